//! Two-step joint spatial / delay-Doppler estimation and bistatic
//! localization.
//!
//! Step 1 nulls the mapped clutter directions, then finds S candidate target
//! DoAs with MUSIC. Step 2 augments the clutter angle set with those
//! candidates and, per candidate, nulls every *other* direction in the
//! augmented set, so each iteration isolates one angular neighborhood; the
//! projected tensor then goes through delay-Doppler processing, peak
//! grouping, per-class spatial-snapshot extraction, and DoA re-estimation.
//! Clustering the per-class records against the clutter map yields the final
//! per-target (delay, Doppler, azimuth, zenith) estimates, which the
//! ellipse-ray intersection turns into horizontal positions.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use std::fmt;

use crate::error::{Error, Result};
use crate::estimate::{
    covariance, dd_peaks_and_group, delay_doppler, fft_doa, fft_doa_peaks, music_peaks,
    refine_music_peak, DdGroupConfig, MusicEvaluator,
};
use crate::metrics::Meter;
use crate::scene::ArrayGeometry;
use crate::suppress::{zf_apply, zf_build};
use crate::synth::{OfdmParams, ReceivedTensor};
use crate::SPEED_OF_LIGHT_M_S;

// ---------------------------------------------------------------------------
// Estimate records
// ---------------------------------------------------------------------------

/// Pipeline stage a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Candidate DoA from the spatial zero-forcing MUSIC pass.
    Step1,
    /// Delay-Doppler class `class` of re-projection iteration `iteration`
    /// (both 1-based).
    Step2 { iteration: usize, class: usize },
    /// Clustered per-target estimate.
    Final,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Step1 => write!(f, "step1"),
            Stage::Step2 { iteration, class } => {
                write!(f, "step2-iter-{iteration}-class-{class}")
            }
            Stage::Final => write!(f, "final"),
        }
    }
}

/// One estimate at any pipeline stage.
#[derive(Debug, Clone)]
pub struct EstimateRecord {
    pub stage: Stage,
    /// Bistatic delay; absent on pure-DoA (Step 1) records.
    pub delay_s: Option<f64>,
    /// Signed Doppler; absent on pure-DoA records.
    pub doppler_hz: Option<f64>,
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    /// Spectrum value (Step 1), class peak magnitude (Step 2), or summed
    /// cluster power (Final).
    pub power: f64,
    /// Free-form quality annotations ("padded", ...).
    pub flags: Vec<String>,
    /// Stage tags of the Step-2 records a Final record was merged from;
    /// empty on non-Final records.
    pub provenance: Vec<Stage>,
}

/// Every record the two-step pipeline produced, all stages included, plus
/// human-readable diagnostics for skipped iterations and discarded records.
#[derive(Debug, Clone, Default)]
pub struct EstimateSet {
    pub records: Vec<EstimateRecord>,
    pub diagnostics: Vec<String>,
}

impl EstimateSet {
    /// Records of one stage kind, in emission order.
    pub fn finals(&self) -> Vec<&EstimateRecord> {
        self.records.iter().filter(|r| r.stage == Stage::Final).collect()
    }

    /// Checks the structural invariants: at most `n_targets` Final records,
    /// each tracing back to at least one Step-2 record that exists in the
    /// set.
    pub fn validate(&self, n_targets: usize) -> Result<()> {
        let finals = self.finals();
        if finals.len() > n_targets {
            return Err(Error::InvalidParameter(format!(
                "{} final records exceed the configured {n_targets} targets",
                finals.len()
            )));
        }
        for record in finals {
            if record.provenance.is_empty() {
                return Err(Error::InvalidParameter(
                    "final record lacks a provenance chain".into(),
                ));
            }
            for tag in &record.provenance {
                if !matches!(tag, Stage::Step2 { .. })
                    || !self.records.iter().any(|r| r.stage == *tag)
                {
                    return Err(Error::InvalidParameter(format!(
                        "final record provenance entry {tag} is not a Step-2 record of this set"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// DoA re-estimation method for Step-2 classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoaMethod {
    /// One-source MUSIC on the extracted snapshot, steering through the
    /// iteration's projector.
    Music,
    /// FFT beamforming with the given per-axis transform length.
    Fft { fft_size: usize },
}

/// Angular and bin tolerances for clutter rejection and record clustering.
#[derive(Debug, Clone, Copy)]
pub struct MatchTolerances {
    /// Clutter-rejection and cluster-linkage tolerance per angle axis,
    /// degrees.
    pub angle_deg: f64,
    /// Cluster-linkage tolerance along delay, in transform bins.
    pub delay_bins: f64,
    /// Cluster-linkage tolerance along Doppler, in transform bins.
    pub doppler_bins: f64,
    /// Doppler gate of the clutter-rejection rule when clutter Dopplers are
    /// known, in transform bins.
    pub clutter_doppler_bins: f64,
}

impl Default for MatchTolerances {
    fn default() -> Self {
        Self { angle_deg: 1.5, delay_bins: 1.5, doppler_bins: 1.5, clutter_doppler_bins: 1.0 }
    }
}

/// Settings of the two-step pipeline.
#[derive(Debug, Clone)]
pub struct JointConfig {
    /// Number of targets S to estimate.
    pub n_targets: usize,
    /// MUSIC scan step, degrees (Step 1 and Step-2 re-estimation).
    pub grid_step_deg: f64,
    /// Optional golden-section polish radius around MUSIC grid peaks.
    pub refine_radius_deg: Option<f64>,
    /// Delay-axis transform length (>= N_sc).
    pub n_delay: usize,
    /// Doppler-axis transform length (>= N_sym).
    pub n_doppler: usize,
    /// Delay-Doppler peak-grouping settings.
    pub dd_grouping: DdGroupConfig,
    /// Step-2 DoA re-estimation method.
    pub doa_method: DoaMethod,
    /// Iterate over the full augmented angle set instead of only the S
    /// Step-1 candidates.
    pub iterate_all: bool,
    /// Clustering tolerances.
    pub tolerances: MatchTolerances,
    /// Known clutter Dopplers aligned with the clutter angle list; enables
    /// the Doppler gate of the clutter-rejection rule.
    pub clutter_dopplers: Option<Vec<f64>>,
}

/// Candidate target DoA from Step 1.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    /// Spectrum value at the candidate.
    pub power: f64,
    /// Set when the spectrum had fewer genuine maxima than requested and
    /// this candidate came from value-ranking padding.
    pub from_padding: bool,
}

// ---------------------------------------------------------------------------
// Step 1
// ---------------------------------------------------------------------------

/// Energy ratio below which zero-forcing is considered to have annihilated
/// the data. Floating-point projection residue sits around 1e-26 of the
/// input energy while any propagating unmapped path — however attenuated —
/// or any noise keeps the ratio above roughly 1e-10.
pub const ANNIHILATION_RATIO: f64 = 1e-20;

/// Step 1: null the mapped clutter DoAs and take the S strongest MUSIC
/// peaks of the projected covariance as target candidates.
///
/// Projector construction errors propagate. A spectrum with fewer genuine
/// maxima than S pads the candidate list with `from_padding` set, and when
/// the projector annihilates essentially the whole input energy (the
/// noiseless signature of a scene with no unmapped scatterer) every
/// candidate is flagged, since peaks of the numerical residue carry no
/// information.
pub fn step1(
    snapshots: &DMatrix<Complex64>,
    clam_doas: &[(f64, f64)],
    geom: &ArrayGeometry,
    config: &JointConfig,
    meter: Meter,
) -> Result<Vec<Candidate>> {
    if config.n_targets == 0 {
        return Err(Error::InvalidParameter("target count must be at least 1".into()));
    }
    let projector = zf_build(geom, clam_doas, meter)?;
    let projected = zf_apply(&projector, snapshots, meter)?;
    let input_energy: f64 = snapshots.iter().map(|v| v.norm_sqr()).sum();
    let residual_energy: f64 = projected.iter().map(|v| v.norm_sqr()).sum();
    let annihilated = residual_energy <= ANNIHILATION_RATIO * input_energy;
    let cov = covariance(&projected, meter)?;
    let mut evaluator =
        MusicEvaluator::new(&cov, geom, config.n_targets, Some(&projector), meter)?;
    let spectrum = evaluator.spectrum(config.grid_step_deg, meter)?;
    let candidates = music_peaks(&spectrum, config.n_targets)
        .into_iter()
        .map(|p| {
            let from_padding = p.from_padding || annihilated;
            match config.refine_radius_deg {
                Some(radius) if !from_padding => {
                    let r = refine_music_peak(
                        &mut evaluator,
                        p.azimuth_deg,
                        p.zenith_deg,
                        radius,
                        meter,
                    );
                    Candidate {
                        azimuth_deg: r.azimuth_deg,
                        zenith_deg: r.zenith_deg,
                        power: r.value,
                        from_padding: false,
                    }
                }
                _ => Candidate {
                    azimuth_deg: p.azimuth_deg,
                    zenith_deg: p.zenith_deg,
                    power: p.value,
                    from_padding,
                },
            }
        })
        .collect();
    Ok(candidates)
}

// ---------------------------------------------------------------------------
// Step 2
// ---------------------------------------------------------------------------

/// Step 2: per-candidate re-projection, delay-Doppler gating, per-class DoA
/// re-estimation, and final clustering.
///
/// The augmented angle set A is the union of the mapped clutter DoAs and the
/// Step-1 candidates (exact duplicates collapsed). Each iteration nulls
/// A minus one kept direction, so the delay-Doppler spectrum of the
/// projected tensor isolates whatever propagates near the kept direction;
/// its grouped classes are re-estimated individually from the complex
/// per-element maps. By default the loop visits the S candidates;
/// `iterate_all` visits every member of A. Weaker classes re-estimating to
/// the direction of a stronger class of the same iteration are flagged as
/// transform sidelobes and excluded from clustering. Iterations whose
/// projector fails are skipped with a diagnostic; if everything fails the
/// returned set has no Final records and says why.
pub fn step2(
    tensor: &ReceivedTensor,
    clam_doas: &[(f64, f64)],
    candidates: &[Candidate],
    geom: &ArrayGeometry,
    ofdm: &OfdmParams,
    config: &JointConfig,
    meter: Meter,
) -> Result<EstimateSet> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("step 2 needs at least one candidate".into()));
    }
    let (_, n_sc, n_sym) = tensor.dims();
    if ofdm.n_subcarriers != n_sc || ofdm.n_symbols != n_sym {
        return Err(Error::DimensionMismatch(format!(
            "tensor is {n_sc} subcarriers x {n_sym} symbols but the OFDM profile says {} x {}",
            ofdm.n_subcarriers, ofdm.n_symbols
        )));
    }
    // Augmented set A: clutter DoAs plus candidates, exact duplicates merged.
    let mut augmented: Vec<(f64, f64)> = clam_doas.to_vec();
    for c in candidates {
        let doa = (c.azimuth_deg, c.zenith_deg);
        if !augmented.contains(&doa) {
            augmented.push(doa);
        }
    }
    let kept: Vec<(f64, f64)> = if config.iterate_all {
        augmented.clone()
    } else {
        candidates.iter().map(|c| (c.azimuth_deg, c.zenith_deg)).collect()
    };

    struct IterationOutcome {
        records: Vec<EstimateRecord>,
        diagnostics: Vec<String>,
    }
    let outcomes: Vec<IterationOutcome> = kept
        .par_iter()
        .enumerate()
        .map(|(k, &keep)| {
            let iteration = k + 1;
            let mut records = Vec::new();
            let mut diagnostics = Vec::new();
            let nulled: Vec<(f64, f64)> =
                augmented.iter().copied().filter(|d| *d != keep).collect();
            let mut run = || -> Result<()> {
                let projector = zf_build(geom, &nulled, meter)?;
                let projected = zf_apply(&projector, tensor.snapshots(), meter)?;
                let zf_tensor = ReceivedTensor::from_snapshots(projected, n_sc, n_sym)?;
                let spectrum =
                    delay_doppler(&zf_tensor, ofdm, config.n_delay, config.n_doppler, meter)?;
                let classes = dd_peaks_and_group(&spectrum, &config.dd_grouping)?;
                if classes.is_empty() {
                    diagnostics.push(format!(
                        "iteration {iteration}: no delay-Doppler class above the noise floor"
                    ));
                    return Ok(());
                }
                for (c, class) in classes.iter().enumerate() {
                    let stage = Stage::Step2 { iteration, class: c + 1 };
                    let snapshot = spectrum.spatial_snapshot(class.delay_bin, class.doppler_bin);
                    let snapshot =
                        DMatrix::from_column_slice(snapshot.len(), 1, snapshot.as_slice());
                    let doa = match config.doa_method {
                        DoaMethod::Music => {
                            let cov = covariance(&snapshot, meter)?;
                            let mut evaluator =
                                MusicEvaluator::new(&cov, geom, 1, Some(&projector), meter)?;
                            let spec = evaluator.spectrum(config.grid_step_deg, meter)?;
                            let peak = music_peaks(&spec, 1)[0];
                            match config.refine_radius_deg {
                                Some(radius) if !peak.from_padding => {
                                    let r = refine_music_peak(
                                        &mut evaluator,
                                        peak.azimuth_deg,
                                        peak.zenith_deg,
                                        radius,
                                        meter,
                                    );
                                    (r.azimuth_deg, r.zenith_deg, false)
                                }
                                _ => (peak.azimuth_deg, peak.zenith_deg, peak.from_padding),
                            }
                        }
                        DoaMethod::Fft { fft_size } => {
                            let spec = fft_doa(&snapshot, geom, fft_size, meter)?;
                            let peak = fft_doa_peaks(&spec, 1)[0];
                            (peak.azimuth_deg, peak.zenith_deg, peak.from_padding)
                        }
                    };
                    let mut flags = Vec::new();
                    if doa.2 {
                        flags.push("padded".to_string());
                    }
                    records.push(EstimateRecord {
                        stage,
                        delay_s: Some(class.delay_s),
                        doppler_hz: Some(class.doppler_hz),
                        azimuth_deg: doa.0,
                        zenith_deg: doa.1,
                        power: class.peak_value,
                        flags,
                        provenance: Vec::new(),
                    });
                }
                // One kept direction radiates one true delay-Doppler peak
                // plus transform sidelobes; a weaker class re-estimating to
                // the direction of a stronger class of the same iteration is
                // such a sidelobe, not a new detection, and must not compete
                // in clustering. Classes arrive strongest-first.
                let angle_tol = config.tolerances.angle_deg;
                for i in 1..records.len() {
                    let echoes = (0..i).any(|j| {
                        !records[j].flags.iter().any(|f| f == "sidelobe")
                            && (records[i].azimuth_deg - records[j].azimuth_deg).abs()
                                <= angle_tol
                            && (records[i].zenith_deg - records[j].zenith_deg).abs()
                                <= angle_tol
                    });
                    if echoes {
                        records[i].flags.push("sidelobe".to_string());
                    }
                }
                Ok(())
            };
            if let Err(e) = run() {
                records.clear();
                diagnostics.push(format!("iteration {iteration}: skipped: {e}"));
            }
            IterationOutcome { records, diagnostics }
        })
        .collect();

    let mut set = EstimateSet::default();
    for c in candidates {
        set.records.push(EstimateRecord {
            stage: Stage::Step1,
            delay_s: None,
            doppler_hz: None,
            azimuth_deg: c.azimuth_deg,
            zenith_deg: c.zenith_deg,
            power: c.power,
            flags: if c.from_padding { vec!["padded".to_string()] } else { Vec::new() },
            provenance: Vec::new(),
        });
    }
    let mut step2_records = Vec::new();
    for outcome in outcomes {
        step2_records.extend(outcome.records);
        set.diagnostics.extend(outcome.diagnostics);
    }
    if step2_records.is_empty() {
        set.diagnostics
            .push("all re-projection iterations failed; no final estimates".to_string());
        return Ok(set);
    }
    let context = ClusterContext {
        clam_doas,
        clutter_dopplers: config.clutter_dopplers.as_deref(),
        delay_bins_per_s: ofdm.subcarrier_spacing_hz * config.n_delay as f64,
        doppler_bins_per_hz: ofdm.symbol_duration_s() * config.n_doppler as f64,
        tolerances: config.tolerances,
    };
    let cluster_input: Vec<EstimateRecord> = step2_records
        .iter()
        .filter(|r| !r.flags.iter().any(|f| f == "sidelobe"))
        .cloned()
        .collect();
    let (finals, diagnostics) = cluster_match(&cluster_input, config.n_targets, &context);
    set.records.extend(step2_records);
    set.records.extend(finals);
    set.diagnostics.extend(diagnostics);
    Ok(set)
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// Inputs of [`cluster_match`] beyond the records themselves.
#[derive(Debug, Clone, Copy)]
pub struct ClusterContext<'a> {
    /// Mapped clutter DoAs driving the rejection rule.
    pub clam_doas: &'a [(f64, f64)],
    /// Known clutter Dopplers aligned with `clam_doas`; `None` makes the
    /// rejection rule DoA-only.
    pub clutter_dopplers: Option<&'a [f64]>,
    /// Bins per second of delay (delta_f * N_tau).
    pub delay_bins_per_s: f64,
    /// Bins per hertz of Doppler (T_s * N_fD).
    pub doppler_bins_per_hz: f64,
    pub tolerances: MatchTolerances,
}

impl ClusterContext<'_> {
    /// Index of the clutter entry a record matches under the rejection rule,
    /// if any: DoA within the angle tolerance on both axes, plus (when
    /// clutter Dopplers are known and the record carries one) Doppler within
    /// the clutter Doppler gate of that same entry.
    fn matching_clutter(&self, record: &EstimateRecord) -> Option<usize> {
        self.clam_doas.iter().position(|&(az, zen)| {
            let doa_close = (record.azimuth_deg - az).abs() <= self.tolerances.angle_deg
                && (record.zenith_deg - zen).abs() <= self.tolerances.angle_deg;
            if !doa_close {
                return false;
            }
            match (self.clutter_dopplers, record.doppler_hz) {
                (Some(dopplers), Some(fd)) => {
                    let i = self
                        .clam_doas
                        .iter()
                        .position(|d| *d == (az, zen))
                        .expect("enumerating clam_doas");
                    dopplers.get(i).is_some_and(|d| {
                        (fd - d).abs() * self.doppler_bins_per_hz
                            <= self.tolerances.clutter_doppler_bins
                    })
                }
                _ => true,
            }
        })
    }
}

/// Clusters Step-2 records into at most `n_targets` Final records.
///
/// Records matching a mapped clutter entry are discarded first. Survivors
/// are single-linkage clustered: two records link when every axis of
/// (azimuth, zenith, delay bins, Doppler bins) differs by at most its
/// tolerance. Each cluster reduces to its power-weighted centroid carrying
/// the summed power and the member stage tags as provenance; a centroid that
/// itself drifts into the clutter gate (possible through linkage chaining)
/// is dropped. The `n_targets` highest-power centroids win. Zero survivors
/// yield an empty list plus a diagnostic.
pub fn cluster_match(
    records: &[EstimateRecord],
    n_targets: usize,
    context: &ClusterContext,
) -> (Vec<EstimateRecord>, Vec<String>) {
    let mut diagnostics = Vec::new();
    let mut survivors: Vec<usize> = Vec::new();
    for (i, record) in records.iter().enumerate() {
        match context.matching_clutter(record) {
            Some(c) => diagnostics.push(format!(
                "discarded {} at ({:.2}, {:.2}): matches mapped clutter {c}",
                record.stage, record.azimuth_deg, record.zenith_deg
            )),
            None => survivors.push(i),
        }
    }
    if survivors.is_empty() {
        diagnostics.push("no records survive clutter rejection".to_string());
        return (Vec::new(), diagnostics);
    }
    // Single-linkage union-find over the scaled per-axis distances.
    let mut parent: Vec<usize> = (0..survivors.len()).collect();
    fn root(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let tol = &context.tolerances;
    for a in 0..survivors.len() {
        for b in (a + 1)..survivors.len() {
            let (ra, rb) = (&records[survivors[a]], &records[survivors[b]]);
            let angle_ok = (ra.azimuth_deg - rb.azimuth_deg).abs() <= tol.angle_deg
                && (ra.zenith_deg - rb.zenith_deg).abs() <= tol.angle_deg;
            let delay_ok = match (ra.delay_s, rb.delay_s) {
                (Some(x), Some(y)) => {
                    (x - y).abs() * context.delay_bins_per_s <= tol.delay_bins
                }
                _ => true,
            };
            let doppler_ok = match (ra.doppler_hz, rb.doppler_hz) {
                (Some(x), Some(y)) => {
                    (x - y).abs() * context.doppler_bins_per_hz <= tol.doppler_bins
                }
                _ => true,
            };
            if angle_ok && delay_ok && doppler_ok {
                let (x, y) = (root(&mut parent, a), root(&mut parent, b));
                parent[x.max(y)] = x.min(y);
            }
        }
    }
    let mut clusters: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for a in 0..survivors.len() {
        let r = root(&mut parent, a);
        clusters.entry(r).or_default().push(survivors[a]);
    }
    let mut centroids: Vec<EstimateRecord> = Vec::new();
    for members in clusters.values() {
        let total: f64 = members.iter().map(|&i| records[i].power).sum();
        let weight = |i: usize| {
            if total > 0.0 { records[i].power / total } else { 1.0 / members.len() as f64 }
        };
        let mean = |f: &dyn Fn(&EstimateRecord) -> f64| -> f64 {
            members.iter().map(|&i| weight(i) * f(&records[i])).sum()
        };
        let merged = EstimateRecord {
            stage: Stage::Final,
            delay_s: members
                .iter()
                .all(|&i| records[i].delay_s.is_some())
                .then(|| mean(&|r| r.delay_s.unwrap())),
            doppler_hz: members
                .iter()
                .all(|&i| records[i].doppler_hz.is_some())
                .then(|| mean(&|r| r.doppler_hz.unwrap())),
            azimuth_deg: mean(&|r| r.azimuth_deg),
            zenith_deg: mean(&|r| r.zenith_deg),
            power: total,
            flags: Vec::new(),
            provenance: members.iter().map(|&i| records[i].stage).collect(),
        };
        if let Some(c) = context.matching_clutter(&merged) {
            diagnostics.push(format!(
                "dropped cluster centroid at ({:.2}, {:.2}): drifted onto mapped clutter {c}",
                merged.azimuth_deg, merged.zenith_deg
            ));
            continue;
        }
        centroids.push(merged);
    }
    if centroids.is_empty() {
        diagnostics.push("no cluster centroid survives clutter rejection".to_string());
        return (Vec::new(), diagnostics);
    }
    centroids.sort_by(|a, b| b.power.partial_cmp(&a.power).unwrap());
    centroids.truncate(n_targets);
    (centroids, diagnostics)
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

/// A target position recovered from one (delay, azimuth) estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizedTarget {
    /// Horizontal position in meters.
    pub position_m: [f64; 2],
    /// Range from the BS along the azimuth ray, meters.
    pub range_from_bs_m: f64,
    /// Echo of the input azimuth, for polar plotting.
    pub azimuth_deg: f64,
    /// Echo of the input delay in microseconds, for polar plotting.
    pub delay_us: f64,
}

/// Horizontal direction of a BS-frame azimuth: measured from +x toward
/// decreasing y (the sensing half-plane).
fn azimuth_ray(azimuth_deg: f64) -> [f64; 2] {
    let az = azimuth_deg.to_radians();
    [az.cos(), -az.sin()]
}

/// Intersects the bistatic ellipse with the BS azimuth ray.
///
/// The delay fixes the distance sum rho = delay * c to the UE and BS; points
/// at that sum form an ellipse with those foci, and the azimuth fixes a ray
/// from the BS. Substituting the ray point b + r*e into the sum condition
/// gives the closed form r = (rho^2 - D^2) / (2 (rho + e . (b - u))) with
/// D the horizontal UE-BS baseline, positive whenever rho > D. A delay at
/// or below the baseline violates the ellipse's triangle inequality.
pub fn localize(
    delay_s: f64,
    azimuth_deg: f64,
    ue_position_m: &[f64; 3],
    bs_position_m: &[f64; 3],
) -> Result<LocalizedTarget> {
    if !(delay_s > 0.0 && delay_s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delay must be positive and finite (got {delay_s} s)"
        )));
    }
    if !(0.0..=180.0).contains(&azimuth_deg) {
        return Err(Error::AngleOutOfRange { name: "azimuth_deg", value: azimuth_deg });
    }
    let rho = delay_s * SPEED_OF_LIGHT_M_S;
    let b = [bs_position_m[0], bs_position_m[1]];
    let u = [ue_position_m[0], ue_position_m[1]];
    let baseline = ((b[0] - u[0]).powi(2) + (b[1] - u[1]).powi(2)).sqrt();
    if rho <= baseline {
        return Err(Error::DegenerateGeometry(format!(
            "bistatic range {rho:.3} m does not exceed the {baseline:.3} m UE-BS baseline"
        )));
    }
    let e = azimuth_ray(azimuth_deg);
    let along = e[0] * (b[0] - u[0]) + e[1] * (b[1] - u[1]);
    let range = (rho * rho - baseline * baseline) / (2.0 * (rho + along));
    Ok(LocalizedTarget {
        position_m: [b[0] + range * e[0], b[1] + range * e[1]],
        range_from_bs_m: range,
        azimuth_deg,
        delay_us: delay_s * 1e6,
    })
}

/// Full-3D variant of [`localize`] using the zenith angle as well: the ray
/// direction becomes (sin(zen) cos(az), -sin(zen) sin(az), cos(zen)) and the
/// same distance-sum closed form applies with 3D vectors.
pub fn localize_3d(
    delay_s: f64,
    azimuth_deg: f64,
    zenith_deg: f64,
    ue_position_m: &[f64; 3],
    bs_position_m: &[f64; 3],
) -> Result<[f64; 3]> {
    if !(delay_s > 0.0 && delay_s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delay must be positive and finite (got {delay_s} s)"
        )));
    }
    if !(0.0..=180.0).contains(&azimuth_deg) {
        return Err(Error::AngleOutOfRange { name: "azimuth_deg", value: azimuth_deg });
    }
    if !(0.0..=180.0).contains(&zenith_deg) {
        return Err(Error::AngleOutOfRange { name: "zenith_deg", value: zenith_deg });
    }
    let rho = delay_s * SPEED_OF_LIGHT_M_S;
    let baseline = (0..3)
        .map(|i| (bs_position_m[i] - ue_position_m[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    if rho <= baseline {
        return Err(Error::DegenerateGeometry(format!(
            "bistatic range {rho:.3} m does not exceed the {baseline:.3} m UE-BS baseline"
        )));
    }
    let (az, zen) = (azimuth_deg.to_radians(), zenith_deg.to_radians());
    let e = [zen.sin() * az.cos(), -zen.sin() * az.sin(), zen.cos()];
    let along: f64 = (0..3).map(|i| e[i] * (bs_position_m[i] - ue_position_m[i])).sum();
    let range = (rho * rho - baseline * baseline) / (2.0 * (rho + along));
    Ok([
        bs_position_m[0] + range * e[0],
        bs_position_m[1] + range * e[1],
        bs_position_m[2] + range * e[2],
    ])
}

/// Forward geometry: the bistatic delay of a reflection point.
pub fn bistatic_delay_s(
    point_m: &[f64; 3],
    ue_position_m: &[f64; 3],
    bs_position_m: &[f64; 3],
) -> f64 {
    let d = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    };
    (d(ue_position_m, point_m) + d(point_m, bs_position_m)) / SPEED_OF_LIGHT_M_S
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MultCounter;
    use crate::scene::{bs_frame_doa_deg, PathKind, PathParams};
    use crate::synth::synthesize_paths;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn upa(mx: usize, mz: usize) -> ArrayGeometry {
        ArrayGeometry { mx, mz, spacing_over_lambda: 0.5, carrier_hz: 28.0e9 }
    }

    fn path(kind: PathKind, gain: f64, delay_us: f64, doppler_hz: f64, az: f64, zen: f64) -> PathParams {
        PathParams {
            kind,
            gain: num_complex::Complex64::new(gain, 0.0),
            delay_s: delay_us * 1e-6,
            doppler_hz,
            azimuth_deg: az,
            zenith_deg: zen,
        }
    }

    const CLUTTER: [(f64, f64); 3] = [(84.3, 65.0), (38.7, 46.0), (111.8, 143.0)];

    fn clutter_paths() -> Vec<PathParams> {
        vec![
            path(PathKind::Clutter, 1.0, 3.35, 186.7, 84.3, 65.0),
            path(PathKind::Clutter, 1.0, 7.34, 466.7, 38.7, 46.0),
            path(PathKind::Clutter, 1.0, 5.25, 746.7, 111.8, 143.0),
        ]
    }

    fn sparse_targets() -> Vec<PathParams> {
        vec![
            path(PathKind::Target, 0.5, 4.50, 3733.3, 52.4, 126.0),
            path(PathKind::Target, 0.5, 3.74, 373.3, 66.8, 92.0),
        ]
    }

    fn desk_config() -> JointConfig {
        JointConfig {
            n_targets: 2,
            grid_step_deg: 1.0,
            refine_radius_deg: Some(1.0),
            n_delay: 640,
            n_doppler: 160,
            dd_grouping: DdGroupConfig::default(),
            doa_method: DoaMethod::Music,
            iterate_all: false,
            tolerances: MatchTolerances::default(),
            clutter_dopplers: None,
        }
    }

    // Step 1 on the well-separated scene, noiseless: both targets recovered
    // to refinement accuracy with genuine (non-padded) peaks.
    #[test]
    fn step1_recovers_separated_targets() {
        let geom = upa(8, 8);
        let mut paths = clutter_paths();
        paths.extend(sparse_targets());
        let tensor =
            synthesize_paths(&geom, &paths, &OfdmParams::desk(), None, 0).unwrap();
        let candidates =
            step1(tensor.snapshots(), &CLUTTER, &geom, &desk_config(), None).unwrap();
        assert_eq!(candidates.len(), 2);
        let mut doas: Vec<(f64, f64)> =
            candidates.iter().map(|c| (c.azimuth_deg, c.zenith_deg)).collect();
        doas.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((doas[0].0 - 52.4).abs() < 5e-2, "az {}", doas[0].0);
        assert!((doas[0].1 - 126.0).abs() < 5e-2, "zen {}", doas[0].1);
        assert!((doas[1].0 - 66.8).abs() < 5e-2, "az {}", doas[1].0);
        assert!((doas[1].1 - 92.0).abs() < 5e-2, "zen {}", doas[1].1);
        assert!(candidates.iter().all(|c| !c.from_padding));
    }

    // With zero targets present the projected data vanishes, the spectrum is
    // flat, and the lone candidate is flagged as padding.
    #[test]
    fn step1_zero_targets_flags_padding() {
        let geom = upa(4, 4);
        let tensor =
            synthesize_paths(&geom, &clutter_paths(), &OfdmParams::desk(), None, 0).unwrap();
        let config = JointConfig { n_targets: 1, refine_radius_deg: None, ..desk_config() };
        let candidates = step1(tensor.snapshots(), &CLUTTER, &geom, &config, None).unwrap();
        assert_eq!(candidates.len(), 1);
        assert!(candidates[0].from_padding);
    }

    // End-to-end on the well-separated scene: each iteration reduces to
    // single-target delay-Doppler estimation, and the Final records hit the
    // truth within half a bin and the refinement accuracy. The counters see
    // exactly S projector builds and S delay-Doppler transforms.
    #[test]
    fn step2_separated_scene_end_to_end() {
        let geom = upa(8, 8);
        let ofdm = OfdmParams::desk();
        let mut paths = clutter_paths();
        paths.extend(sparse_targets());
        let tensor = synthesize_paths(&geom, &paths, &ofdm, None, 0).unwrap();
        let config = desk_config();
        let candidates = step1(tensor.snapshots(), &CLUTTER, &geom, &config, None).unwrap();
        let counter = MultCounter::new();
        let set =
            step2(&tensor, &CLUTTER, &candidates, &geom, &ofdm, &config, Some(&counter)).unwrap();
        set.validate(config.n_targets).unwrap();
        let counts = counter.snapshot();
        assert_eq!(counts.projector_builds, 2);
        assert_eq!(counts.dd_transforms, 2);

        let finals = set.finals();
        assert_eq!(finals.len(), 2, "diagnostics: {:?}", set.diagnostics);
        let delay_bin = 1.0 / (ofdm.subcarrier_spacing_hz * config.n_delay as f64);
        let doppler_bin = 1.0 / (ofdm.symbol_duration_s() * config.n_doppler as f64);
        let mut got: Vec<&EstimateRecord> = finals.clone();
        got.sort_by(|a, b| a.azimuth_deg.partial_cmp(&b.azimuth_deg).unwrap());
        let truth = [(4.50e-6, 3733.3, 52.4, 126.0), (3.74e-6, 373.3, 66.8, 92.0)];
        for (record, t) in got.iter().zip(&truth) {
            assert!((record.delay_s.unwrap() - t.0).abs() <= 0.5 * delay_bin);
            assert!((record.doppler_hz.unwrap() - t.1).abs() <= 0.5 * doppler_bin);
            assert!((record.azimuth_deg - t.2).abs() < 5e-2);
            assert!((record.zenith_deg - t.3).abs() < 5e-2);
            assert!(!record.provenance.is_empty());
        }
        // No final record sits inside the clutter-rejection gate.
        for record in &finals {
            for &(az, zen) in &CLUTTER {
                assert!(
                    (record.azimuth_deg - az).abs() > config.tolerances.angle_deg
                        || (record.zenith_deg - zen).abs() > config.tolerances.angle_deg
                );
            }
        }
    }

    // Close-angle scene: the target 2 degrees from a clutter scatterer is
    // recovered by the re-projection iterations even though Step 1 may
    // misplace a candidate, reproducing the correction mechanism.
    #[test]
    fn step2_close_scene_recovers_adjacent_target() {
        let geom = upa(8, 8);
        let ofdm = OfdmParams::desk();
        let mut paths = clutter_paths();
        paths.push(path(PathKind::Target, 0.5, 4.50, 3733.3, 52.4, 126.0));
        paths.push(path(PathKind::Target, 0.5, 3.74, 373.3, 113.8, 141.0));
        let tensor = synthesize_paths(&geom, &paths, &ofdm, None, 0).unwrap();
        let config = desk_config();
        let candidates = step1(tensor.snapshots(), &CLUTTER, &geom, &config, None).unwrap();
        let set = step2(&tensor, &CLUTTER, &candidates, &geom, &ofdm, &config, None).unwrap();
        let finals = set.finals();
        assert!(!finals.is_empty(), "diagnostics: {:?}", set.diagnostics);
        let hit = |az: f64, zen: f64| {
            finals
                .iter()
                .any(|r| (r.azimuth_deg - az).abs() < 0.5 && (r.zenith_deg - zen).abs() < 0.5)
        };
        assert!(hit(52.4, 126.0), "missing the well-separated target: {finals:?}");
        assert!(hit(113.8, 141.0), "missing the adjacent target: {finals:?}");
    }

    // Iterating the full augmented set performs one projection and transform
    // per member of A instead of per candidate.
    #[test]
    fn step2_iterate_all_visits_augmented_set() {
        let geom = upa(8, 8);
        let ofdm = OfdmParams::desk();
        let mut paths = clutter_paths();
        paths.extend(sparse_targets());
        let tensor = synthesize_paths(&geom, &paths, &ofdm, None, 0).unwrap();
        let config = JointConfig { iterate_all: true, ..desk_config() };
        let candidates = step1(tensor.snapshots(), &CLUTTER, &geom, &config, None).unwrap();
        let counter = MultCounter::new();
        let set =
            step2(&tensor, &CLUTTER, &candidates, &geom, &ofdm, &config, Some(&counter)).unwrap();
        let counts = counter.snapshot();
        assert_eq!(counts.projector_builds, 5);
        assert_eq!(counts.dd_transforms, 5);
        let finals = set.finals();
        assert_eq!(finals.len(), 2);
        let mut azimuths: Vec<f64> = finals.iter().map(|r| r.azimuth_deg).collect();
        azimuths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((azimuths[0] - 52.4).abs() < 5e-2);
        assert!((azimuths[1] - 66.8).abs() < 5e-2);
    }

    fn record(stage: Stage, delay_s: f64, doppler_hz: f64, az: f64, zen: f64, power: f64) -> EstimateRecord {
        EstimateRecord {
            stage,
            delay_s: Some(delay_s),
            doppler_hz: Some(doppler_hz),
            azimuth_deg: az,
            zenith_deg: zen,
            power,
            flags: Vec::new(),
            provenance: Vec::new(),
        }
    }

    fn test_context<'a>(clam: &'a [(f64, f64)], dopplers: Option<&'a [f64]>) -> ClusterContext<'a> {
        // One delay bin per microsecond, one Doppler bin per 100 Hz.
        ClusterContext {
            clam_doas: clam,
            clutter_dopplers: dopplers,
            delay_bins_per_s: 1e6,
            doppler_bins_per_hz: 1e-2,
            tolerances: MatchTolerances::default(),
        }
    }

    // Duplicate observations of one target merge into a single
    // power-weighted centroid with full provenance.
    #[test]
    fn cluster_merges_duplicates() {
        let clam = [(84.3, 65.0)];
        let records = vec![
            record(Stage::Step2 { iteration: 1, class: 1 }, 4.0e-6, 300.0, 52.0, 126.0, 3.0),
            record(Stage::Step2 { iteration: 2, class: 1 }, 4.5e-6, 320.0, 53.0, 127.0, 1.0),
        ];
        let (finals, _) = cluster_match(&records, 2, &test_context(&clam, None));
        assert_eq!(finals.len(), 1);
        let f = &finals[0];
        assert_relative_eq!(f.azimuth_deg, (3.0 * 52.0 + 53.0) / 4.0, epsilon = 1e-12);
        assert_relative_eq!(f.zenith_deg, (3.0 * 126.0 + 127.0) / 4.0, epsilon = 1e-12);
        assert_relative_eq!(f.delay_s.unwrap(), (3.0 * 4.0e-6 + 4.5e-6) / 4.0, epsilon = 1e-18);
        assert_relative_eq!(f.power, 4.0);
        assert_eq!(f.provenance.len(), 2);
        assert_eq!(f.stage, Stage::Final);
    }

    // Rule 1: a record at a mapped clutter DoA is discarded outright, unless
    // known clutter Dopplers say its Doppler is target-like.
    #[test]
    fn cluster_rejects_clutter_matches() {
        let clam = [(84.3, 65.0)];
        let at_clutter =
            vec![record(Stage::Step2 { iteration: 1, class: 1 }, 3.3e-6, 186.7, 84.5, 64.8, 5.0)];
        let (finals, diags) = cluster_match(&at_clutter, 1, &test_context(&clam, None));
        assert!(finals.is_empty());
        assert!(diags.iter().any(|d| d.contains("no records survive")));

        // Doppler-aware mode: same DoA but a Doppler 40 bins away survives.
        let dopplers = [186.7];
        let (finals, _) =
            cluster_match(&at_clutter, 1, &test_context(&clam, Some(&dopplers)));
        assert!(finals.is_empty(), "Doppler within one bin of the clutter must still match");
        let target_doppler =
            vec![record(Stage::Step2 { iteration: 1, class: 1 }, 3.3e-6, 4186.7, 84.5, 64.8, 5.0)];
        let (finals, _) =
            cluster_match(&target_doppler, 1, &test_context(&clam, Some(&dopplers)));
        assert_eq!(finals.len(), 1);
    }

    // Three separated clusters with S = 2 keep the two heaviest.
    #[test]
    fn cluster_keeps_strongest() {
        let clam: [(f64, f64); 0] = [];
        let records = vec![
            record(Stage::Step2 { iteration: 1, class: 1 }, 1.0e-6, 100.0, 30.0, 60.0, 1.0),
            record(Stage::Step2 { iteration: 1, class: 2 }, 5.0e-6, -300.0, 90.0, 100.0, 4.0),
            record(Stage::Step2 { iteration: 2, class: 1 }, 5.1e-6, -310.0, 90.5, 100.5, 3.0),
            record(Stage::Step2 { iteration: 2, class: 2 }, 9.0e-6, 800.0, 150.0, 40.0, 2.0),
        ];
        let (finals, _) = cluster_match(&records, 2, &test_context(&clam, None));
        assert_eq!(finals.len(), 2);
        assert_relative_eq!(finals[0].power, 7.0);
        assert!((finals[0].azimuth_deg - 90.0).abs() < 0.5);
        assert_relative_eq!(finals[1].power, 2.0);
        assert_relative_eq!(finals[1].azimuth_deg, 150.0);
        // Delay separation alone keeps records apart even at equal DoAs.
        let split = vec![
            record(Stage::Step2 { iteration: 1, class: 1 }, 1.0e-6, 100.0, 30.0, 60.0, 1.0),
            record(Stage::Step2 { iteration: 2, class: 1 }, 8.0e-6, 100.0, 30.0, 60.0, 1.0),
        ];
        let (finals, _) = cluster_match(&split, 2, &test_context(&clam, None));
        assert_eq!(finals.len(), 2);
    }

    // Monostatic circle: UE at the BS halves the bistatic range.
    #[test]
    fn localize_monostatic_circle() {
        let bs = [0.0, 0.0, 0.0];
        let hit = localize(2.0e-6, 0.0, &bs, &bs).unwrap();
        assert_relative_eq!(hit.range_from_bs_m, 300.0);
        assert_relative_eq!(hit.position_m[0], 300.0);
        assert_relative_eq!(hit.position_m[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(hit.delay_us, 2.0);
    }

    // Forward-geometry round trip on the reference target against the scene
    // module's own DoA computation.
    #[test]
    fn localize_reference_target() {
        let bs = [0.0, 1000.0, 0.0];
        let ue = [100.0, 0.0, 0.0];
        let target = [500.0, 350.0, 0.0];
        let delay = bistatic_delay_s(&target, &ue, &bs);
        let (azimuth, _) = bs_frame_doa_deg(&bs, &target);
        let hit = localize(delay, azimuth, &ue, &bs).unwrap();
        assert!((hit.position_m[0] - target[0]).abs() < 1e-6, "{:?}", hit.position_m);
        assert!((hit.position_m[1] - target[1]).abs() < 1e-6, "{:?}", hit.position_m);
    }

    // Localization inverts forward geometry across random non-degenerate
    // horizontal configurations in the sensing half-plane.
    #[test]
    fn localize_random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tested = 0;
        while tested < 1000 {
            let bs = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), 0.0];
            let ue = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), 0.0];
            // Targets in the BS's sensing half-plane (y below the BS).
            let target = [
                rng.random_range(-800.0..800.0),
                bs[1] - rng.random_range(1.0..800.0),
                0.0,
            ];
            let delay = bistatic_delay_s(&target, &ue, &bs);
            let baseline =
                ((bs[0] - ue[0]).powi(2) + (bs[1] - ue[1]).powi(2)).sqrt();
            if delay * SPEED_OF_LIGHT_M_S <= baseline * (1.0 + 1e-9) {
                continue;
            }
            let (azimuth, _) = bs_frame_doa_deg(&bs, &target);
            let hit = localize(delay, azimuth, &ue, &bs).unwrap();
            assert!(
                (hit.position_m[0] - target[0]).abs() < 1e-6
                    && (hit.position_m[1] - target[1]).abs() < 1e-6,
                "target {target:?} recovered as {:?}",
                hit.position_m
            );
            tested += 1;
        }
    }

    // Delay violating the triangle inequality is rejected, as are malformed
    // inputs.
    #[test]
    fn localize_rejects_degenerate_inputs() {
        let bs = [0.0, 1000.0, 0.0];
        let ue = [100.0, 0.0, 0.0];
        // Baseline is ~1005 m; 3 us of delay is only ~900 m of range.
        assert!(matches!(
            localize(3.0e-6, 45.0, &ue, &bs),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(localize(-1.0, 45.0, &ue, &bs).is_err());
        assert!(localize(1.0e-5, 200.0, &ue, &bs).is_err());
    }

    // The 3D variant inverts forward geometry including height.
    #[test]
    fn localize_3d_round_trip() {
        let bs = [0.0, 1000.0, 30.0];
        let ue = [100.0, 0.0, 1.5];
        let target = [500.0, 350.0, 80.0];
        let delay = bistatic_delay_s(&target, &ue, &bs);
        let (azimuth, zenith) = bs_frame_doa_deg(&bs, &target);
        let hit = localize_3d(delay, azimuth, zenith, &ue, &bs).unwrap();
        for i in 0..3 {
            assert!((hit[i] - target[i]).abs() < 1e-6, "axis {i}: {hit:?}");
        }
    }

    // EstimateSet invariants: final count cap and provenance checking.
    #[test]
    fn estimate_set_validation() {
        let step2_tag = Stage::Step2 { iteration: 1, class: 1 };
        let mut set = EstimateSet::default();
        set.records.push(record(step2_tag, 1.0e-6, 0.0, 10.0, 20.0, 1.0));
        let mut fin = record(Stage::Final, 1.0e-6, 0.0, 10.0, 20.0, 1.0);
        fin.provenance = vec![step2_tag];
        set.records.push(fin);
        set.validate(1).unwrap();
        assert!(set.validate(0).is_err());
        let mut orphan = set.clone();
        orphan.records[1].provenance = vec![Stage::Step2 { iteration: 9, class: 9 }];
        assert!(orphan.validate(1).is_err());
        let mut bare = set.clone();
        bare.records[1].provenance.clear();
        assert!(bare.validate(1).is_err());
        assert_eq!(format!("{step2_tag}"), "step2-iter-1-class-1");
    }
}
