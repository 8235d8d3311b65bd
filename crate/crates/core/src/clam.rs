//! Clutter angle map: a grid over candidate UE positions, each cell holding
//! the strongest clutter DoAs seen from the BS when the UE transmits there.
//!
//! The BS-frame DoA of a scatterer does not depend on the UE at all; what
//! varies across cells is the received power ranking, because the
//! UE-to-scatterer spreading leg changes with the cell. A map truncated to
//! `max_doas` entries therefore genuinely depends on position, while a map
//! wide enough for every scatterer stores the same set everywhere.
//!
//! Maps persist as versioned JSON with DoAs rounded to 0.1 degrees (the scan
//! resolution of the estimators). Lookups use plain floor indexing per axis
//! and never extrapolate: a position on a shared cell edge belongs to the
//! cell whose lower edge it is, and anything outside the grid is an error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimate::{covariance, music_peaks, music_spectrum};
use crate::scene::{PathKind, Scene};
use crate::synth::{synthesize_paths, OfdmParams};

/// On-disk schema version of [`ClamMap`].
pub const CLAM_SCHEMA_VERSION: u32 = 1;

/// Rectangular grid over the horizontal (x, y) plane of UE positions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClamGridSpec {
    /// Lower corner of the grid in meters.
    pub origin_m: [f64; 2],
    /// Cell edge length in meters.
    pub cell_size_m: f64,
    /// Cell count along x.
    pub nx: usize,
    /// Cell count along y.
    pub ny: usize,
}

impl ClamGridSpec {
    /// Checks that the grid has positive extent and finite placement.
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid must have at least one cell (got {}x{})",
                self.nx, self.ny
            )));
        }
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cell size must be positive and finite (got {} m)",
                self.cell_size_m
            )));
        }
        if self.origin_m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid origin must be finite".into()));
        }
        Ok(())
    }

    /// Total number of cells.
    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    /// Center of cell (ix, iy) in meters.
    pub fn cell_center_m(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin_m[0] + (ix as f64 + 0.5) * self.cell_size_m,
            self.origin_m[1] + (iy as f64 + 0.5) * self.cell_size_m,
        ]
    }

    /// Flat index of the cell containing (x, y) by floor indexing; positions
    /// outside the half-open grid extent are out of bounds.
    pub fn cell_index_of(&self, x_m: f64, y_m: f64) -> Result<usize> {
        let fx = ((x_m - self.origin_m[0]) / self.cell_size_m).floor();
        let fy = ((y_m - self.origin_m[1]) / self.cell_size_m).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return Err(Error::OutOfBounds(format!(
                "position ({x_m}, {y_m}) m lies outside the {}x{} cell grid at {:?}",
                self.nx, self.ny, self.origin_m
            )));
        }
        Ok(fx as usize * self.ny + fy as usize)
    }
}

/// How a map's per-cell DoAs were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClamMethod {
    /// True scatterer geometry, ranked by modeled received power.
    Geometric,
    /// Per-cell clutter-only synthesis followed by MUSIC.
    Estimated,
}

/// One grid cell: clutter DoAs strongest-first, at 0.1-degree precision.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClamCell {
    /// (azimuth_deg, zenith_deg) pairs, strongest first.
    pub doas_deg: Vec<(f64, f64)>,
    /// Set when the per-cell estimator failed and the cell was left empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimator_failed: bool,
}

/// The clutter angle map: location in, clutter DoA list out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClamMap {
    pub version: u32,
    pub method: ClamMethod,
    /// Content hash of the scene the map was built from.
    pub scene_hash: String,
    /// RFC 3339 build timestamp.
    pub built_at: String,
    /// Configured per-cell DoA cap (the map's L).
    pub max_doas: usize,
    pub grid: ClamGridSpec,
    /// Cells in x-major order: index `ix * ny + iy`.
    pub cells: Vec<ClamCell>,
    /// Per-cell estimator warnings accumulated during construction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ClamMap {
    /// DoA list of the cell containing `position_m` (x, y used; the map is a
    /// horizontal-plane grid), strongest first.
    pub fn lookup(&self, position_m: &[f64; 3]) -> Result<&[(f64, f64)]> {
        let idx = self.grid.cell_index_of(position_m[0], position_m[1])?;
        Ok(&self.cells[idx].doas_deg)
    }

    /// Checks structural invariants: grid shape, cell count, DoA domain.
    pub fn validate(&self) -> Result<()> {
        if self.version != CLAM_SCHEMA_VERSION {
            return Err(Error::MalformedArtifact {
                kind: "clutter angle map",
                detail: format!(
                    "unsupported version {} (expected {CLAM_SCHEMA_VERSION})",
                    self.version
                ),
            });
        }
        self.grid.validate()?;
        if self.cells.len() != self.grid.cell_count() {
            return Err(Error::MalformedArtifact {
                kind: "clutter angle map",
                detail: format!(
                    "stores {} cells but the grid has {}",
                    self.cells.len(),
                    self.grid.cell_count()
                ),
            });
        }
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.doas_deg.len() > self.max_doas {
                return Err(Error::MalformedArtifact {
                    kind: "clutter angle map",
                    detail: format!(
                        "cell {i} holds {} DoAs, above the map cap {}",
                        cell.doas_deg.len(),
                        self.max_doas
                    ),
                });
            }
            for &(az, zen) in &cell.doas_deg {
                if !(0.0..=180.0).contains(&az) || !(0.0..=180.0).contains(&zen) {
                    return Err(Error::MalformedArtifact {
                        kind: "clutter angle map",
                        detail: format!(
                            "cell {i} holds a DoA ({az}, {zen}) outside [0, 180] degrees"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Serializes the map as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serialization cannot fail")
    }

    /// Parses and validates a map from its JSON representation.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: ClamMap = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    /// Writes the map to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    /// Loads and validates a map file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Estimator settings for [`build_estimated`].
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// OFDM profile of the per-cell synthesis.
    pub ofdm: OfdmParams,
    /// Per-cell synthesis SNR; `None` for noiseless construction.
    pub snr_db: Option<f64>,
    /// Base RNG seed; cell `i` synthesizes with `seed + i`.
    pub seed: u64,
    /// MUSIC scan resolution in degrees.
    pub grid_step_deg: f64,
}

/// Builds a map from true scatterer geometry.
///
/// Each cell re-derives the scene's clutter paths with the UE moved to the
/// cell center, ranks them by received power |gain|^2 (ties keep scene
/// order), truncates to `max_doas`, and stores the BS-frame DoAs rounded to
/// 0.1 degrees. Scenes with an explicit path list rank by the listed gains,
/// which makes every cell identical.
pub fn build_geometric(scene: &Scene, grid: &ClamGridSpec, max_doas: usize) -> Result<ClamMap> {
    grid.validate()?;
    check_max_doas(max_doas)?;
    let clutter = clutter_paths_at(scene, None)?;
    if clutter.is_empty() {
        return Err(Error::EmptyScene(
            "geometric map construction needs at least one clutter path".into(),
        ));
    }
    let cells: Result<Vec<ClamCell>> = (0..grid.cell_count())
        .into_par_iter()
        .map(|idx| {
            let center = grid.cell_center_m(idx / grid.ny, idx % grid.ny);
            let ranked = clutter_paths_at(scene, Some(center))?;
            Ok(ClamCell { doas_deg: top_doas(ranked, max_doas), estimator_failed: false })
        })
        .collect();
    Ok(assemble(scene, grid, max_doas, ClamMethod::Geometric, cells?, Vec::new()))
}

/// Builds a map by estimating each cell instead of reading off geometry.
///
/// Per cell, the scene's clutter paths (targets must be absent) are
/// re-derived with the UE at the cell center, a clutter-only tensor is
/// synthesized, and MUSIC extracts up to `max_doas` DoAs from its sample
/// covariance. Only genuine spectral maxima are stored; a cell whose
/// estimator fails or finds no maxima is left empty with
/// `estimator_failed` set and a warning recorded. A scene with no clutter at
/// all yields an all-empty map without error.
pub fn build_estimated(
    scene: &Scene,
    grid: &ClamGridSpec,
    max_doas: usize,
    config: &EstimatorConfig,
) -> Result<ClamMap> {
    grid.validate()?;
    check_max_doas(max_doas)?;
    config.ofdm.validate()?;
    let no_clutter = match clutter_paths_at(scene, None) {
        Ok(paths) if paths.is_empty() => true,
        Ok(_) => false,
        Err(Error::EmptyScene(_)) => true,
        Err(e) => return Err(e),
    };
    if has_targets(scene) {
        return Err(Error::InvalidParameter(
            "estimated map construction needs a target-free (clutter-only) scene".into(),
        ));
    }
    if no_clutter {
        let cells = vec![ClamCell { doas_deg: Vec::new(), estimator_failed: false };
            grid.cell_count()];
        return Ok(assemble(scene, grid, max_doas, ClamMethod::Estimated, cells, Vec::new()));
    }
    let outcomes: Result<Vec<(ClamCell, Option<String>)>> = (0..grid.cell_count())
        .into_par_iter()
        .map(|idx| {
            let center = grid.cell_center_m(idx / grid.ny, idx % grid.ny);
            let paths = clutter_paths_at(scene, Some(center))?;
            match estimate_cell(scene, &paths, max_doas, config, config.seed + idx as u64) {
                Ok(doas) if !doas.is_empty() => {
                    Ok((ClamCell { doas_deg: doas, estimator_failed: false }, None))
                }
                Ok(_) => Ok((
                    ClamCell { doas_deg: Vec::new(), estimator_failed: true },
                    Some(format!("cell {idx}: no spectral maxima above the floor")),
                )),
                Err(e) => Ok((
                    ClamCell { doas_deg: Vec::new(), estimator_failed: true },
                    Some(format!("cell {idx}: {e}")),
                )),
            }
        })
        .collect();
    let mut cells = Vec::with_capacity(grid.cell_count());
    let mut warnings = Vec::new();
    for (cell, warning) in outcomes? {
        cells.push(cell);
        warnings.extend(warning);
    }
    Ok(assemble(scene, grid, max_doas, ClamMethod::Estimated, cells, warnings))
}

/// One cell of [`build_estimated`]: synthesize, covariance, MUSIC peaks.
fn estimate_cell(
    scene: &Scene,
    paths: &[crate::scene::PathParams],
    max_doas: usize,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let n_sources = max_doas.min(paths.len());
    let tensor = synthesize_paths(&scene.array, paths, &config.ofdm, config.snr_db, seed)?;
    let cov = covariance(tensor.snapshots(), None)?;
    let spectrum =
        music_spectrum(&cov, n_sources, &scene.array, config.grid_step_deg, None, None)?;
    Ok(music_peaks(&spectrum, n_sources)
        .into_iter()
        .filter(|p| !p.from_padding)
        .map(|p| (round_decidegree(p.azimuth_deg), round_decidegree(p.zenith_deg)))
        .collect())
}

/// Clutter paths of the scene, with the UE optionally moved to `center`,
/// sorted by |gain|^2 descending (stable in scene order).
fn clutter_paths_at(
    scene: &Scene,
    center: Option<[f64; 2]>,
) -> Result<Vec<crate::scene::PathParams>> {
    let moved;
    let effective = match center {
        None => scene,
        Some([x, y]) => {
            moved = Scene {
                ue_position_m: [x, y, scene.ue_position_m[2]],
                ..scene.clone()
            };
            &moved
        }
    };
    let mut paths: Vec<_> = effective
        .derive_paths()?
        .into_iter()
        .filter(|p| p.kind == PathKind::Clutter)
        .collect();
    paths.sort_by(|a, b| b.gain.norm_sqr().partial_cmp(&a.gain.norm_sqr()).unwrap());
    Ok(paths)
}

fn has_targets(scene: &Scene) -> bool {
    !scene.targets.is_empty() || scene.paths.iter().any(|p| p.kind == PathKind::Target)
}

fn top_doas(ranked: Vec<crate::scene::PathParams>, max_doas: usize) -> Vec<(f64, f64)> {
    ranked
        .into_iter()
        .take(max_doas)
        .map(|p| (round_decidegree(p.azimuth_deg), round_decidegree(p.zenith_deg)))
        .collect()
}

fn check_max_doas(max_doas: usize) -> Result<()> {
    if max_doas == 0 {
        return Err(Error::InvalidParameter("per-cell DoA cap must be at least 1".into()));
    }
    Ok(())
}

fn assemble(
    scene: &Scene,
    grid: &ClamGridSpec,
    max_doas: usize,
    method: ClamMethod,
    cells: Vec<ClamCell>,
    warnings: Vec<String>,
) -> ClamMap {
    ClamMap {
        version: CLAM_SCHEMA_VERSION,
        method,
        scene_hash: scene.content_hash(),
        built_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        max_doas,
        grid: *grid,
        cells,
        warnings,
    }
}

/// Rounds an angle to the map's 0.1-degree storage precision.
fn round_decidegree(deg: f64) -> f64 {
    (deg * 10.0).round() / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ArrayGeometry, GainModel, PathEntry, ScattererRecord};

    fn upa(mx: usize, mz: usize) -> ArrayGeometry {
        ArrayGeometry { mx, mz, spacing_over_lambda: 0.5, carrier_hz: 28.0e9 }
    }

    fn grid(nx: usize, ny: usize, cell_m: f64) -> ClamGridSpec {
        ClamGridSpec { origin_m: [0.0, 0.0], cell_size_m: cell_m, nx, ny }
    }

    fn clutter_entry(
        delay_us: f64,
        doppler_hz: f64,
        az: f64,
        zen: f64,
        gain: f64,
    ) -> PathEntry {
        PathEntry {
            kind: PathKind::Clutter,
            gain: [gain, 0.0],
            delay_us,
            doppler_hz,
            azimuth_deg: az,
            zenith_deg: zen,
        }
    }

    /// The bundled reference scene's clutter rows as an explicit path list.
    fn reference_clutter_scene() -> Scene {
        Scene {
            version: 1,
            name: "reference-clutter".into(),
            array: upa(8, 8),
            bs_position_m: [0.0, 1000.0, 0.0],
            ue_position_m: [100.0, 0.0, 0.0],
            paths: vec![
                clutter_entry(3.35, 186.7, 84.3, 65.0, 1.0),
                clutter_entry(7.34, 466.7, 38.7, 46.0, 0.8),
                clutter_entry(5.25, 746.7, 111.8, 143.0, 0.6),
            ],
            clutter_scatterers: Vec::new(),
            targets: Vec::new(),
            gain_model: GainModel::Reflectivity,
            snr_db: None,
        }
    }

    fn scatterer(x: f64, y: f64, reflectivity: f64) -> ScattererRecord {
        ScattererRecord {
            position_m: [x, y, 20.0],
            reflectivity: [reflectivity, 0.0],
            velocity_mps: [0.0, 0.0, 0.0],
        }
    }

    fn scatterer_scene(records: Vec<ScattererRecord>) -> Scene {
        Scene {
            version: 1,
            name: "scatterers".into(),
            array: upa(4, 4),
            bs_position_m: [0.0, 1000.0, 30.0],
            ue_position_m: [100.0, 0.0, 1.5],
            paths: Vec::new(),
            clutter_scatterers: records,
            targets: Vec::new(),
            gain_model: GainModel::Spreading,
            snr_db: None,
        }
    }

    // Floor indexing: interior points, edge ownership, and both out-of-bounds
    // sides.
    #[test]
    fn grid_floor_indexing_and_bounds() {
        let g = grid(3, 2, 10.0);
        assert_eq!(g.cell_count(), 6);
        assert_eq!(g.cell_index_of(0.0, 0.0).unwrap(), 0);
        assert_eq!(g.cell_index_of(9.999, 9.999).unwrap(), 0);
        assert_eq!(g.cell_index_of(25.0, 15.0).unwrap(), 2 * 2 + 1);
        // A shared edge belongs to the cell whose lower edge it is.
        assert_eq!(g.cell_index_of(10.0, 0.0).unwrap(), 2);
        assert_eq!(g.cell_index_of(0.0, 10.0).unwrap(), 1);
        assert!(matches!(g.cell_index_of(30.0, 0.0), Err(Error::OutOfBounds(_))));
        assert!(matches!(g.cell_index_of(-0.001, 0.0), Err(Error::OutOfBounds(_))));
        assert!(matches!(g.cell_index_of(0.0, 20.0), Err(Error::OutOfBounds(_))));
        assert_eq!(g.cell_center_m(2, 1), [25.0, 15.0]);
        assert!(grid(0, 2, 10.0).validate().is_err());
        assert!(grid(2, 2, 0.0).validate().is_err());
    }

    // A single static scatterer: every cell stores the same single DoA, since
    // the BS-frame direction is UE-independent.
    #[test]
    fn geometric_single_scatterer_uniform() {
        let scene = scatterer_scene(vec![scatterer(500.0, 300.0, 1.0)]);
        let map = build_geometric(&scene, &grid(4, 3, 50.0), 3).unwrap();
        assert_eq!(map.method, ClamMethod::Geometric);
        assert_eq!(map.cells.len(), 12);
        let first = &map.cells[0].doas_deg;
        assert_eq!(first.len(), 1);
        for cell in &map.cells {
            assert_eq!(&cell.doas_deg, first);
        }
        let direct = crate::scene::bs_frame_doa_deg(&scene.bs_position_m, &[500.0, 300.0, 20.0]);
        assert_eq!(first[0].0, round_decidegree(direct.0));
        assert_eq!(first[0].1, round_decidegree(direct.1));
    }

    // The reference scene built with L = 3 stores its three clutter DoAs in
    // every cell, and lookup at the scene's UE position returns them.
    #[test]
    fn geometric_reference_scene_stores_clutter_rows() {
        let scene = reference_clutter_scene();
        let map = build_geometric(&scene, &grid(4, 4, 100.0), 3).unwrap();
        let doas = map.lookup(&scene.ue_position_m).unwrap();
        assert_eq!(doas, &[(84.3, 65.0), (38.7, 46.0), (111.8, 143.0)]);
        for cell in &map.cells {
            assert_eq!(cell.doas_deg.as_slice(), doas);
        }
        assert_eq!(map.scene_hash, scene.content_hash());
        assert_eq!(map.max_doas, 3);
    }

    // L = 1 with unequal reflectivities keeps only the stronger scatterer;
    // with equal reflectivities the spreading ranking flips across cells.
    #[test]
    fn geometric_truncation_ranks_by_power() {
        let strong = scatterer(1000.0, 200.0, 1.0);
        let weak = scatterer(-400.0, 0.0, 0.2);
        let scene = scatterer_scene(vec![weak.clone(), strong.clone()]);
        let map = build_geometric(&scene, &grid(3, 3, 100.0), 1).unwrap();
        let strong_doa =
            crate::scene::bs_frame_doa_deg(&scene.bs_position_m, &strong.position_m);
        for cell in &map.cells {
            assert_eq!(cell.doas_deg.len(), 1);
            assert_eq!(cell.doas_deg[0].0, round_decidegree(strong_doa.0));
            assert_eq!(cell.doas_deg[0].1, round_decidegree(strong_doa.1));
        }

        let near = scatterer(50.0, 50.0, 1.0);
        let far = scatterer(950.0, 50.0, 1.0);
        let equal = scatterer_scene(vec![near.clone(), far.clone()]);
        // 1 km wide, two cells: each cell center sits beside one scatterer.
        let wide = ClamGridSpec { origin_m: [0.0, 0.0], cell_size_m: 500.0, nx: 2, ny: 1 };
        let map = build_geometric(&equal, &wide, 1).unwrap();
        let near_doa = crate::scene::bs_frame_doa_deg(&equal.bs_position_m, &near.position_m);
        let far_doa = crate::scene::bs_frame_doa_deg(&equal.bs_position_m, &far.position_m);
        assert_eq!(map.cells[0].doas_deg[0].0, round_decidegree(near_doa.0));
        assert_eq!(map.cells[1].doas_deg[0].0, round_decidegree(far_doa.0));
    }

    // Monotone truncation: the L = k map is a prefix of the L = k + 1 map in
    // every cell.
    #[test]
    fn truncation_is_monotone() {
        let scene = scatterer_scene(vec![
            scatterer(1000.0, 200.0, 0.9),
            scatterer(-400.0, 0.0, 1.3),
            scatterer(300.0, 700.0, 0.4),
            scatterer(-200.0, 500.0, 0.7),
        ]);
        let g = grid(3, 2, 150.0);
        for k in 1..4 {
            let small = build_geometric(&scene, &g, k).unwrap();
            let large = build_geometric(&scene, &g, k + 1).unwrap();
            for (a, b) in small.cells.iter().zip(&large.cells) {
                assert_eq!(a.doas_deg.as_slice(), &b.doas_deg[..a.doas_deg.len()]);
            }
        }
    }

    // Persistence round-trip: identical lookups, validated schema, and the
    // stored angles all at 0.1-degree precision.
    #[test]
    fn save_load_round_trip() {
        let scene = scatterer_scene(vec![
            scatterer(1000.0, 200.0, 1.0),
            scatterer(-400.0, 0.0, 0.5),
        ]);
        let map = build_geometric(&scene, &grid(5, 4, 80.0), 2).unwrap();
        let dir = std::env::temp_dir().join("clamsim-map-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.json");
        map.save(&path).unwrap();
        let loaded = ClamMap::load(&path).unwrap();
        assert_eq!(loaded.cells, map.cells);
        assert_eq!(loaded.scene_hash, map.scene_hash);
        for ix in 0..5 {
            for iy in 0..4 {
                let c = map.grid.cell_center_m(ix, iy);
                let pos = [c[0], c[1], 0.0];
                assert_eq!(loaded.lookup(&pos).unwrap(), map.lookup(&pos).unwrap());
            }
        }
        for cell in &loaded.cells {
            for &(az, zen) in &cell.doas_deg {
                assert_eq!(az, round_decidegree(az));
                assert_eq!(zen, round_decidegree(zen));
            }
        }
        // Validation rejects a corrupted cell count and an out-of-range DoA.
        let mut broken = map.clone();
        broken.cells.pop();
        assert!(matches!(broken.validate(), Err(Error::MalformedArtifact { .. })));
        let mut bad_doa = map.clone();
        bad_doa.cells[0].doas_deg[0].0 = 185.0;
        assert!(matches!(
            ClamMap::from_json(&bad_doa.to_json()),
            Err(Error::MalformedArtifact { .. })
        ));
    }

    // Noiseless estimated construction reproduces the geometric map exactly:
    // the reference DoAs are 0.1-degree grid nodes, so the scan peaks on
    // them and the rounding is the identity.
    #[test]
    fn estimated_matches_geometric_noiseless() {
        let scene = reference_clutter_scene();
        let g = grid(1, 1, 200.0);
        let config = EstimatorConfig {
            ofdm: OfdmParams::desk(),
            snr_db: None,
            seed: 0,
            grid_step_deg: 0.1,
        };
        let estimated = build_estimated(&scene, &g, 3, &config).unwrap();
        let geometric = build_geometric(&scene, &g, 3).unwrap();
        assert_eq!(estimated.method, ClamMethod::Estimated);
        assert!(estimated.warnings.is_empty());
        let got: std::collections::BTreeSet<String> = estimated.cells[0]
            .doas_deg
            .iter()
            .map(|d| format!("{:.1},{:.1}", d.0, d.1))
            .collect();
        let want: std::collections::BTreeSet<String> = geometric.cells[0]
            .doas_deg
            .iter()
            .map(|d| format!("{:.1},{:.1}", d.0, d.1))
            .collect();
        assert_eq!(got, want);
    }

    // At 0 dB over a 100-cell grid, at least 95% of cells land within one
    // degree of the geometric truth on both axes.
    #[test]
    fn estimated_accuracy_under_noise() {
        let scene = reference_clutter_scene();
        let g = grid(10, 10, 30.0);
        let config = EstimatorConfig {
            ofdm: OfdmParams::desk(),
            snr_db: Some(0.0),
            seed: 42,
            grid_step_deg: 1.0,
        };
        let estimated = build_estimated(&scene, &g, 3, &config).unwrap();
        let truth = [(84.3, 65.0), (38.7, 46.0), (111.8, 143.0)];
        let mut hits = 0;
        for cell in &estimated.cells {
            let ok = truth.iter().all(|t| {
                cell.doas_deg
                    .iter()
                    .any(|d| (d.0 - t.0).abs() <= 1.0 && (d.1 - t.1).abs() <= 1.0)
            });
            if ok {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 cells within one degree");
    }

    // Zero clutter: every cell empty without error. Targets: rejected.
    #[test]
    fn estimated_degenerate_scenes() {
        let config = EstimatorConfig {
            ofdm: OfdmParams::desk(),
            snr_db: None,
            seed: 0,
            grid_step_deg: 5.0,
        };
        let mut no_clutter = scatterer_scene(Vec::new());
        no_clutter.paths = Vec::new();
        let map = build_estimated(&no_clutter, &grid(2, 2, 50.0), 3, &config).unwrap();
        assert!(map.cells.iter().all(|c| c.doas_deg.is_empty() && !c.estimator_failed));
        assert!(map.warnings.is_empty());

        let mut with_target = reference_clutter_scene();
        with_target.paths.push(PathEntry {
            kind: PathKind::Target,
            gain: [0.5, 0.0],
            delay_us: 4.5,
            doppler_hz: 3733.3,
            azimuth_deg: 52.4,
            zenith_deg: 126.0,
        });
        assert!(matches!(
            build_estimated(&with_target, &grid(2, 2, 50.0), 3, &config),
            Err(Error::InvalidParameter(_))
        ));

        // Geometric construction insists on clutter being present.
        assert!(matches!(
            build_geometric(&no_clutter, &grid(2, 2, 50.0), 3),
            Err(Error::EmptyScene(_))
        ));
        assert!(build_geometric(&reference_clutter_scene(), &grid(0, 1, 50.0), 3).is_err());
        assert!(build_geometric(&reference_clutter_scene(), &grid(1, 1, 50.0), 0).is_err());
    }

    // Estimator failure flags the cell empty and records a warning instead
    // of failing the whole build: more requested sources than the tiny
    // array's subspace can hold.
    #[test]
    fn estimated_failure_flags_cell() {
        let mut scene = reference_clutter_scene();
        scene.array = upa(2, 1);
        let config = EstimatorConfig {
            ofdm: OfdmParams::desk(),
            snr_db: None,
            seed: 0,
            grid_step_deg: 5.0,
        };
        let map = build_estimated(&scene, &grid(2, 1, 50.0), 3, &config).unwrap();
        assert_eq!(map.cells.len(), 2);
        for cell in &map.cells {
            assert!(cell.doas_deg.is_empty());
            assert!(cell.estimator_failed);
        }
        assert_eq!(map.warnings.len(), 2);
        assert!(map.warnings[0].starts_with("cell 0:"), "{}", map.warnings[0]);
    }
}
