//! Scene model: receiver array, propagation paths, and the geometry behind them.
//!
//! A scene describes one bi-static sensing snapshot: a base station (BS)
//! hosting a uniform planar array in the x-z plane, a transmitting user (UE),
//! and the scatterers between them. Each propagation path is summarized by a
//! complex gain, a bi-static delay, a Doppler shift and a direction of arrival
//! (DoA) at the BS. Paths can be listed directly (tabulated scenarios) or
//! derived from scatterer/target positions; both forms coexist in the JSON
//! schema, with an explicit path list taking precedence.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::SPEED_OF_LIGHT_M_S;

/// Receiver uniform planar array (UPA) in the x-z plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Elements along the x axis.
    pub mx: usize,
    /// Elements along the z axis.
    pub mz: usize,
    /// Element spacing as a fraction of the carrier wavelength (d / lambda).
    pub spacing_over_lambda: f64,
    /// Carrier frequency in Hz.
    pub carrier_hz: f64,
}

impl ArrayGeometry {
    /// Total element count M = mx * mz.
    pub fn element_count(&self) -> usize {
        self.mx * self.mz
    }

    /// Carrier wavelength in meters.
    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT_M_S / self.carrier_hz
    }

    /// Checks the structural invariants of the array description.
    pub fn validate(&self) -> Result<()> {
        if self.mx == 0 || self.mz == 0 {
            return Err(Error::InvalidParameter(format!(
                "array dimensions must be >= 1 (got {}x{})",
                self.mx, self.mz
            )));
        }
        if !(self.spacing_over_lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "spacing_over_lambda must be positive (got {})",
                self.spacing_over_lambda
            )));
        }
        if !(self.carrier_hz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "carrier_hz must be positive (got {})",
                self.carrier_hz
            )));
        }
        Ok(())
    }
}

/// Classification of a propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    /// Static or slow environment reflection (includes the direct UE-BS ray).
    Clutter,
    /// Moving object of interest.
    Target,
}

/// One propagation path in SI units, as consumed by the synthesizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub kind: PathKind,
    /// Complex path gain (reflectivity and spreading combined).
    pub gain: Complex64,
    /// Bi-static delay in seconds.
    pub delay_s: f64,
    /// Doppler shift in Hz (positive = closing).
    pub doppler_hz: f64,
    /// Azimuth DoA at the BS in degrees, within [0, 180].
    pub azimuth_deg: f64,
    /// Zenith DoA at the BS in degrees, within [0, 180].
    pub zenith_deg: f64,
}

impl PathParams {
    /// Checks the per-path invariants (angle domain, non-negative delay).
    pub fn validate(&self) -> Result<()> {
        check_angle("azimuth_deg", self.azimuth_deg)?;
        check_angle("zenith_deg", self.zenith_deg)?;
        if !(self.delay_s >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delay_s must be non-negative (got {})",
                self.delay_s
            )));
        }
        if !self.doppler_hz.is_finite() || !self.gain.re.is_finite() || !self.gain.im.is_finite() {
            return Err(Error::InvalidParameter(
                "path gain/Doppler must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// One explicitly tabulated path (JSON units: microseconds, Hz, degrees).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEntry {
    pub kind: PathKind,
    /// Complex gain as [re, im].
    #[serde(default = "unit_gain")]
    pub gain: [f64; 2],
    pub delay_us: f64,
    pub doppler_hz: f64,
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
}

fn unit_gain() -> [f64; 2] {
    [1.0, 0.0]
}

/// A clutter scatterer given by position rather than path parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScattererRecord {
    /// Position in meters.
    pub position_m: [f64; 3],
    /// Complex reflectivity as [re, im].
    #[serde(default = "unit_gain")]
    pub reflectivity: [f64; 2],
    /// Scatterer velocity in m/s (zero for static clutter).
    #[serde(default)]
    pub velocity_mps: [f64; 3],
}

/// A sensing target given by position and bi-static radial velocity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetRecord {
    /// Position in meters.
    pub position_m: [f64; 3],
    /// Complex reflectivity as [re, im].
    #[serde(default = "unit_gain")]
    pub reflectivity: [f64; 2],
    /// Bi-static radial velocity in m/s (positive = closing).
    pub bistatic_radial_velocity_mps: f64,
}

/// How geometric path gains are formed from reflectivities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainModel {
    /// gain = reflectivity / (d_ue_scatterer * d_scatterer_bs).
    #[default]
    Spreading,
    /// gain = reflectivity verbatim (no distance spreading).
    Reflectivity,
}

/// Full scene description; serializable as the on-disk JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default = "schema_version")]
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub array: ArrayGeometry,
    /// BS (receiver) position in meters.
    pub bs_position_m: [f64; 3],
    /// UE (transmitter) position in meters.
    pub ue_position_m: [f64; 3],
    /// Explicit path list; takes precedence over the geometric records below.
    #[serde(default)]
    pub paths: Vec<PathEntry>,
    #[serde(default)]
    pub clutter_scatterers: Vec<ScattererRecord>,
    #[serde(default)]
    pub targets: Vec<TargetRecord>,
    #[serde(default)]
    pub gain_model: GainModel,
    /// Scene-default SNR in dB; `None` means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

fn schema_version() -> u32 {
    1
}

impl Scene {
    /// Parses a scene from its JSON representation.
    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    /// Loads and validates a scene file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Serializes the scene as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization cannot fail")
    }

    /// Stable content hash (canonical JSON, SHA-256 hex) used in map metadata.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scene serialization cannot fail");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks scene-level invariants (array, angle domains, finite geometry).
    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        for p in [&self.bs_position_m, &self.ue_position_m] {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("positions must be finite".into()));
            }
        }
        if self.paths.is_empty() && self.clutter_scatterers.is_empty() && self.targets.is_empty() {
            return Err(Error::EmptyScene(
                "neither explicit paths nor geometric records are present".into(),
            ));
        }
        for entry in &self.paths {
            path_from_entry(entry).validate()?;
        }
        Ok(())
    }

    /// Resolves the scene into concrete path parameters.
    ///
    /// An explicit `paths` list is converted verbatim; otherwise paths are
    /// derived from scatterer/target geometry (clutter first, then targets).
    pub fn derive_paths(&self) -> Result<Vec<PathParams>> {
        if !self.paths.is_empty() {
            let paths: Vec<PathParams> = self.paths.iter().map(path_from_entry).collect();
            for p in &paths {
                p.validate()?;
            }
            return Ok(paths);
        }
        let mut out = Vec::with_capacity(self.clutter_scatterers.len() + self.targets.len());
        for (i, s) in self.clutter_scatterers.iter().enumerate() {
            out.push(self.geometric_path(
                PathKind::Clutter,
                &s.position_m,
                s.reflectivity,
                GeomDoppler::Velocity(s.velocity_mps),
                &format!("clutter_scatterers[{i}]"),
            )?);
        }
        for (i, t) in self.targets.iter().enumerate() {
            out.push(self.geometric_path(
                PathKind::Target,
                &t.position_m,
                t.reflectivity,
                GeomDoppler::BistaticRadial(t.bistatic_radial_velocity_mps),
                &format!("targets[{i}]"),
            )?);
        }
        if out.is_empty() {
            return Err(Error::EmptyScene("geometric records resolved to no paths".into()));
        }
        Ok(out)
    }

    /// Number of (clutter, target) paths the scene resolves to.
    pub fn path_counts(&self) -> Result<(usize, usize)> {
        let paths = self.derive_paths()?;
        let clutter = paths.iter().filter(|p| p.kind == PathKind::Clutter).count();
        Ok((clutter, paths.len() - clutter))
    }

    fn geometric_path(
        &self,
        kind: PathKind,
        position_m: &[f64; 3],
        reflectivity: [f64; 2],
        doppler: GeomDoppler,
        label: &str,
    ) -> Result<PathParams> {
        let d_ue = distance(&self.ue_position_m, position_m);
        let d_bs = distance(position_m, &self.bs_position_m);
        const MIN_RANGE_M: f64 = 1e-3;
        if d_bs < MIN_RANGE_M {
            return Err(Error::DegenerateGeometry(format!(
                "{label} coincides with the BS"
            )));
        }
        if d_ue < MIN_RANGE_M {
            return Err(Error::DegenerateGeometry(format!(
                "{label} coincides with the UE"
            )));
        }
        let reflectivity = Complex64::new(reflectivity[0], reflectivity[1]);
        let gain = match self.gain_model {
            GainModel::Spreading => reflectivity / (d_ue * d_bs),
            GainModel::Reflectivity => reflectivity,
        };
        let doppler_hz = match doppler {
            GeomDoppler::BistaticRadial(v) => doppler_from_velocity(v, self.array.carrier_hz),
            GeomDoppler::Velocity(v) => {
                // Bi-static range rate: projection of the scatterer velocity on
                // both legs; closing motion (negative range rate) shifts up.
                let a = unit_from(&self.ue_position_m, position_m);
                let b = unit_from(&self.bs_position_m, position_m);
                let range_rate: f64 = (0..3).map(|i| v[i] * (a[i] + b[i])).sum();
                doppler_from_velocity(-range_rate, self.array.carrier_hz)
            }
        };
        let (azimuth_deg, zenith_deg) = bs_frame_doa_deg(&self.bs_position_m, position_m);
        let path = PathParams {
            kind,
            gain,
            delay_s: (d_ue + d_bs) / SPEED_OF_LIGHT_M_S,
            doppler_hz,
            azimuth_deg,
            zenith_deg,
        };
        path.validate()?;
        Ok(path)
    }
}

enum GeomDoppler {
    BistaticRadial(f64),
    Velocity([f64; 3]),
}

fn path_from_entry(entry: &PathEntry) -> PathParams {
    PathParams {
        kind: entry.kind,
        gain: Complex64::new(entry.gain[0], entry.gain[1]),
        delay_s: entry.delay_us * 1e-6,
        doppler_hz: entry.doppler_hz,
        azimuth_deg: entry.azimuth_deg,
        zenith_deg: entry.zenith_deg,
    }
}

fn check_angle(name: &'static str, value: f64) -> Result<()> {
    if !(0.0..=180.0).contains(&value) || !value.is_finite() {
        return Err(Error::AngleOutOfRange { name, value });
    }
    Ok(())
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn unit_from(from: &[f64; 3], to: &[f64; 3]) -> [f64; 3] {
    let d = distance(from, to);
    [(to[0] - from[0]) / d, (to[1] - from[1]) / d, (to[2] - from[2]) / d]
}

/// Doppler shift of a closing velocity `v_mps` at carrier `carrier_hz`.
pub fn doppler_from_velocity(v_mps: f64, carrier_hz: f64) -> f64 {
    v_mps * carrier_hz / SPEED_OF_LIGHT_M_S
}

/// BS-frame (azimuth, zenith) in degrees of a point seen from the BS.
///
/// Azimuth is measured from the +x axis, positive toward decreasing y (the
/// sensing half-plane); points mirrored across the x axis map onto the same
/// azimuth because UPA steering depends on cos(azimuth) only. Zenith is
/// measured from the +z axis; points in the horizontal plane sit at 90 deg.
pub fn bs_frame_doa_deg(bs_m: &[f64; 3], point_m: &[f64; 3]) -> (f64, f64) {
    let dx = point_m[0] - bs_m[0];
    let dy = point_m[1] - bs_m[1];
    let dz = point_m[2] - bs_m[2];
    let azimuth = (-dy).atan2(dx).to_degrees().abs();
    let r = distance(bs_m, point_m);
    let zenith = if r > 0.0 { (dz / r).acos().to_degrees() } else { 90.0 };
    (azimuth, zenith)
}

/// UPA steering vector for a DoA, as the Kronecker product of the x-axis and
/// z-axis responses; element (ix, iz) sits at index `ix * mz + iz`.
///
/// The x-axis phase progression is 2 pi (d/lambda) cos(az) sin(zen) per
/// element and the z-axis progression is 2 pi (d/lambda) cos(zen); element 0
/// has unit response, so ||alpha||^2 = M.
pub fn steering_vector(geom: &ArrayGeometry, azimuth_deg: f64, zenith_deg: f64) -> Result<DVector<Complex64>> {
    check_angle("azimuth_deg", azimuth_deg)?;
    check_angle("zenith_deg", zenith_deg)?;
    geom.validate()?;
    let mut alpha = DVector::zeros(geom.element_count());
    steering_into(geom, azimuth_deg, zenith_deg, alpha.as_mut_slice());
    Ok(alpha)
}

/// Unchecked steering-vector kernel used by spectrum scanners; `out` must hold
/// exactly `geom.element_count()` entries.
pub(crate) fn steering_into(geom: &ArrayGeometry, azimuth_deg: f64, zenith_deg: f64, out: &mut [Complex64]) {
    debug_assert_eq!(out.len(), geom.element_count());
    let az = azimuth_deg.to_radians();
    let zen = zenith_deg.to_radians();
    let two_pi_d = std::f64::consts::TAU * geom.spacing_over_lambda;
    let phase_x = two_pi_d * az.cos() * zen.sin();
    let phase_z = two_pi_d * zen.cos();
    // Per-axis responses via phasor recurrence (one sincos per axis).
    let step_x = Complex64::from_polar(1.0, phase_x);
    let step_z = Complex64::from_polar(1.0, phase_z);
    let mut ax = Complex64::new(1.0, 0.0);
    for ix in 0..geom.mx {
        let mut axz = ax;
        for iz in 0..geom.mz {
            out[ix * geom.mz + iz] = axz;
            axz *= step_z;
        }
        ax *= step_x;
    }
}
