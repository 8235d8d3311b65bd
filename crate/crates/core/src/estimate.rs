//! Parameter estimators operating on suppressed snapshot data.
//!
//! The chain after clutter suppression runs through the kernels here: sample
//! covariance, the MUSIC pseudo-spectrum (optionally scoring the projected
//! steering direction `b = W_bar alpha`), FFT beamforming over the planar
//! aperture, the per-antenna delay-Doppler periodogram with peak grouping,
//! and two sequential baselines (path-by-path zero-forcing MUSIC and
//! spatial-smoothing MUSIC).
//!
//! MUSIC scores use the normalized direction `b / ||b||`, so the denominator
//! lives in [0, 1] and directions the projector annihilates are pinned to the
//! spectrum floor instead of blowing up through a vanishing steering norm;
//! unprojected spectra differ from the unnormalized convention only by the
//! constant factor M. All kernels charge complex-multiplication costs to
//! [`crate::metrics::MultCounter`] lanes under the model conventions
//! documented there, independent of the evaluation shortcuts taken.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::metrics::Meter;
use crate::scene::{steering_into, ArrayGeometry};
use crate::suppress::{zf_apply, zf_build, ZfProjector};
use crate::synth::{OfdmParams, ReceivedTensor};

/// Additive floor in the MUSIC denominator keeping spectrum values finite.
pub const MUSIC_EPS_FLOOR: f64 = 1e-300;

/// Default angular scan resolution in degrees.
pub const DEFAULT_GRID_STEP_DEG: f64 = 0.1;

/// Relative steering-norm threshold below which a direction counts as fully
/// nulled by the projector (||W alpha|| <= tol * sqrt(M)) and its spectrum
/// value is pinned to the floor.
const NULLED_NORM_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Sample covariance
// ---------------------------------------------------------------------------

/// Sample covariance R = Y Y^H / P of an M x P snapshot matrix.
///
/// Accumulated column by column over the lower triangle and mirrored, so no
/// P-sized intermediate exists and the result is exactly Hermitian. Charges
/// M^2 per column to the covariance lane.
pub fn covariance(snapshots: &DMatrix<Complex64>, meter: Meter) -> Result<DMatrix<Complex64>> {
    let (m, p) = snapshots.shape();
    if m == 0 || p == 0 {
        return Err(Error::InvalidParameter(format!(
            "covariance needs a non-empty snapshot matrix (got {m}x{p})"
        )));
    }
    let mut r = DMatrix::<Complex64>::zeros(m, m);
    for col in snapshots.column_iter() {
        for j in 0..m {
            let cj = col[j].conj();
            for i in j..m {
                r[(i, j)] += col[i] * cj;
            }
        }
    }
    let inv_p = 1.0 / p as f64;
    for j in 0..m {
        r[(j, j)] = Complex64::new(r[(j, j)].re * inv_p, 0.0);
        for i in (j + 1)..m {
            r[(i, j)] *= inv_p;
            r[(j, i)] = r[(i, j)].conj();
        }
    }
    if let Some(c) = meter {
        c.add_covariance((m * m * p) as u64);
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// MUSIC pseudo-spectrum
// ---------------------------------------------------------------------------

/// MUSIC pseudo-spectrum sampled on a rectangular azimuth x zenith grid.
#[derive(Debug, Clone)]
pub struct MusicSpectrum {
    /// Azimuth grid nodes in degrees (rows of `values`).
    pub azimuth_deg: Vec<f64>,
    /// Zenith grid nodes in degrees (columns of `values`).
    pub zenith_deg: Vec<f64>,
    /// Spectrum values; `values[(i, j)]` belongs to
    /// `(azimuth_deg[i], zenith_deg[j])`.
    pub values: DMatrix<f64>,
    /// Source count used for the signal/noise subspace split.
    pub n_sources: usize,
    /// Grid step in degrees.
    pub grid_step_deg: f64,
}

impl MusicSpectrum {
    /// Grid node of the largest value (first such node on ties).
    pub fn argmax(&self) -> (f64, f64) {
        let (i, j) = grid_argmax(&self.values);
        (self.azimuth_deg[i], self.zenith_deg[j])
    }
}

/// Reusable MUSIC scoring state: the signal subspace of one covariance plus
/// the optional projected steering model.
pub struct MusicEvaluator {
    geom: ArrayGeometry,
    n_sources: usize,
    /// Adjoint of V = Q_s^H W_bar (or Q_s^H without projector), stored M x S
    /// so each source column is contiguous.
    vt: DMatrix<Complex64>,
    /// Projector null-space basis (M x K) when steering is projected.
    null_basis: Option<DMatrix<Complex64>>,
    /// 1 / ||W||_F^2 (1 without projector, where b = alpha).
    inv_fro_sq: f64,
    /// Covariance eigenvalues, descending.
    eigenvalues: Vec<f64>,
    /// Set for an all-zero covariance, whose "signal subspace" is arbitrary:
    /// the spectrum is reported flat at the floor instead.
    degenerate: bool,
    alpha: Vec<Complex64>,
}

impl MusicEvaluator {
    /// Eigendecomposes the covariance and fixes the subspace split; charges
    /// M^3 to the eigendecomposition lane.
    pub fn new(
        cov: &DMatrix<Complex64>,
        geom: &ArrayGeometry,
        n_sources: usize,
        projector: Option<&ZfProjector>,
        meter: Meter,
    ) -> Result<Self> {
        geom.validate()?;
        let m = geom.element_count();
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{} but the array has {m} elements",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if n_sources == 0 || n_sources >= m {
            return Err(Error::InvalidSubspace(format!(
                "source count {n_sources} leaves no noise subspace in an {m}-element array"
            )));
        }
        let mut departure = 0.0f64;
        let mut magnitude = 0.0f64;
        for j in 0..m {
            for i in 0..m {
                departure = departure.max((cov[(i, j)] - cov[(j, i)].conj()).norm());
                magnitude = magnitude.max(cov[(i, j)].norm());
            }
        }
        if departure > 1e-8 * magnitude.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "covariance departs from Hermitian by {departure:.3e} (tolerance 1e-8)"
            )));
        }
        let herm = DMatrix::from_fn(m, m, |i, j| (cov[(i, j)] + cov[(j, i)].conj()) * 0.5);
        let eig = nalgebra::SymmetricEigen::new(herm);
        if let Some(c) = meter {
            c.add_eigen((m * m * m) as u64);
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut qs = DMatrix::<Complex64>::zeros(m, n_sources);
        for (k, &i) in order.iter().take(n_sources).enumerate() {
            qs.set_column(k, &eig.eigenvectors.column(i));
        }
        let (vt, null_basis, inv_fro_sq) = match projector {
            None => (qs, None, 1.0),
            Some(p) => {
                if p.elements() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "projector spans {} elements but the array has {m}",
                        p.elements()
                    )));
                }
                let fro = p.frobenius_norm();
                let q = p.null_basis().clone();
                // V^H = W_bar^H Q_s = (Q_s - Q (Q^H Q_s)) / ||W||_F.
                let vt = if q.ncols() == 0 {
                    qs.unscale(fro)
                } else {
                    (&qs - &q * (q.adjoint() * &qs)).unscale(fro)
                };
                (vt, Some(q), 1.0 / (fro * fro))
            }
        };
        let degenerate = eigenvalues[0] <= 0.0;
        Ok(Self {
            geom: *geom,
            n_sources,
            vt,
            null_basis,
            inv_fro_sq,
            eigenvalues,
            degenerate,
            alpha: vec![Complex64::default(); m],
        })
    }

    /// Source count of the subspace split.
    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    /// Covariance eigenvalues, sorted descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Pseudo-spectrum value 1 / (||Q_n^H b||^2 / ||b||^2 + floor) at one DoA
    /// in degrees, with b the (projected) steering direction.
    pub fn value(&mut self, azimuth_deg: f64, zenith_deg: f64) -> f64 {
        if self.degenerate {
            return 1.0 / (1.0 + MUSIC_EPS_FLOOR);
        }
        let m = self.geom.element_count() as f64;
        steering_into(&self.geom, azimuth_deg, zenith_deg, &mut self.alpha);
        // ||W alpha||^2 = ||alpha||^2 - ||Q^H alpha||^2 with ||alpha||^2 = M.
        let nulled_energy = match &self.null_basis {
            None => 0.0,
            Some(q) => q
                .column_iter()
                .map(|col| {
                    let mut acc = Complex64::default();
                    for (qv, a) in col.iter().zip(self.alpha.iter()) {
                        acc += qv.conj() * a;
                    }
                    acc.norm_sqr()
                })
                .sum(),
        };
        let w_alpha_sq = (m - nulled_energy).max(0.0);
        if w_alpha_sq <= m * NULLED_NORM_TOL * NULLED_NORM_TOL {
            // Fully nulled direction: report the floor, not a spurious spike.
            return 1.0 / (1.0 + MUSIC_EPS_FLOOR);
        }
        let b_norm_sq = w_alpha_sq * self.inv_fro_sq;
        // ||Q_s^H b||^2 = ||V alpha||^2, accumulated per source column.
        let signal_energy: f64 = self
            .vt
            .column_iter()
            .map(|col| {
                let mut acc = Complex64::default();
                for (v, a) in col.iter().zip(self.alpha.iter()) {
                    acc += v.conj() * a;
                }
                acc.norm_sqr()
            })
            .sum();
        let d = (1.0 - signal_energy / b_norm_sq).clamp(0.0, 1.0);
        1.0 / (d + MUSIC_EPS_FLOOR)
    }

    /// Scans the full [0, 180] x [0, 180] grid; charges (M+1)(M-S) per node
    /// to the scan lane.
    pub fn spectrum(&mut self, grid_step_deg: f64, meter: Meter) -> Result<MusicSpectrum> {
        let azimuth = angle_grid(grid_step_deg)?;
        let zenith = azimuth.clone();
        let mut values = DMatrix::zeros(azimuth.len(), zenith.len());
        for (i, &az) in azimuth.iter().enumerate() {
            for (j, &zen) in zenith.iter().enumerate() {
                values[(i, j)] = self.value(az, zen);
            }
        }
        if let Some(c) = meter {
            c.add_scan(azimuth.len() as u64 * zenith.len() as u64 * self.node_cost());
        }
        Ok(MusicSpectrum {
            azimuth_deg: azimuth,
            zenith_deg: zenith,
            values,
            n_sources: self.n_sources,
            grid_step_deg,
        })
    }

    /// Model cost of one grid-node evaluation.
    fn node_cost(&self) -> u64 {
        let m = self.geom.element_count() as u64;
        (m + 1) * (m - self.n_sources as u64)
    }
}

/// MUSIC pseudo-spectrum of a covariance over the full angular grid.
///
/// With a projector the steering direction is b = W_bar alpha and the
/// covariance is expected to come from the correspondingly projected
/// snapshots.
pub fn music_spectrum(
    cov: &DMatrix<Complex64>,
    n_sources: usize,
    geom: &ArrayGeometry,
    grid_step_deg: f64,
    projector: Option<&ZfProjector>,
    meter: Meter,
) -> Result<MusicSpectrum> {
    MusicEvaluator::new(cov, geom, n_sources, projector, meter)?.spectrum(grid_step_deg, meter)
}

/// Grid nodes covering [0, 180] degrees at the given step.
fn angle_grid(step_deg: f64) -> Result<Vec<f64>> {
    if !(step_deg > 0.0 && step_deg <= 180.0) {
        return Err(Error::InvalidParameter(format!(
            "grid step must lie in (0, 180] degrees (got {step_deg})"
        )));
    }
    let count = (180.0 / step_deg + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| i as f64 * step_deg).collect())
}

fn grid_argmax(values: &DMatrix<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_value = f64::NEG_INFINITY;
    for i in 0..values.nrows() {
        for j in 0..values.ncols() {
            if values[(i, j)] > best_value {
                best_value = values[(i, j)];
                best = (i, j);
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Peak extraction
// ---------------------------------------------------------------------------

/// One extracted spectrum peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    /// Spectrum value at the peak.
    pub value: f64,
    /// Set when the entry came from the global-value padding fallback rather
    /// than a strict local maximum.
    pub from_padding: bool,
}

struct GridPeak {
    row: usize,
    col: usize,
    value: f64,
    from_padding: bool,
}

/// Strict local maxima (8-neighborhood) of a grid, strongest first.
///
/// Ties break toward the smaller flat index (row-major). When fewer strict
/// maxima than `count` exist, the list is padded from the global ranking of
/// admissible nodes with `from_padding` set; at most every admissible node is
/// returned.
fn grid_peaks(
    values: &DMatrix<f64>,
    count: usize,
    wrap: bool,
    admissible: impl Fn(usize, usize) -> bool,
) -> Vec<GridPeak> {
    let (rows, cols) = values.shape();
    let flat = |i: usize, j: usize| i * cols + j;
    let mut peaks = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if !admissible(i, j) {
                continue;
            }
            let v = values[(i, j)];
            let mut strict_max = true;
            'neighbors: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ni = i as i64 + di;
                    let nj = j as i64 + dj;
                    let (ni, nj) = if wrap {
                        (ni.rem_euclid(rows as i64) as usize, nj.rem_euclid(cols as i64) as usize)
                    } else {
                        if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                            continue;
                        }
                        (ni as usize, nj as usize)
                    };
                    if ni == i && nj == j {
                        continue;
                    }
                    if values[(ni, nj)] >= v {
                        strict_max = false;
                        break 'neighbors;
                    }
                }
            }
            if strict_max {
                peaks.push(GridPeak { row: i, col: j, value: v, from_padding: false });
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.value
            .partial_cmp(&a.value)
            .unwrap()
            .then(flat(a.row, a.col).cmp(&flat(b.row, b.col)))
    });
    peaks.truncate(count);
    if peaks.len() < count {
        let taken: std::collections::HashSet<usize> =
            peaks.iter().map(|p| flat(p.row, p.col)).collect();
        let mut pool: Vec<GridPeak> = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .filter(|&(i, j)| admissible(i, j) && !taken.contains(&flat(i, j)))
            .map(|(i, j)| GridPeak { row: i, col: j, value: values[(i, j)], from_padding: true })
            .collect();
        pool.sort_by(|a, b| {
            b.value
                .partial_cmp(&a.value)
                .unwrap()
                .then(flat(a.row, a.col).cmp(&flat(b.row, b.col)))
        });
        let missing = count - peaks.len();
        peaks.extend(pool.into_iter().take(missing));
    }
    peaks
}

/// The `count` strongest strict local maxima of a MUSIC spectrum.
///
/// Sorted by value descending with lowest-flat-index tie-break; padded from
/// the global value ranking (flagged `from_padding`) when the spectrum has
/// fewer strict maxima, e.g. when adjacent peaks merge.
pub fn music_peaks(spectrum: &MusicSpectrum, count: usize) -> Vec<SpectralPeak> {
    grid_peaks(&spectrum.values, count, false, |_, _| true)
        .into_iter()
        .map(|p| SpectralPeak {
            azimuth_deg: spectrum.azimuth_deg[p.row],
            zenith_deg: spectrum.zenith_deg[p.col],
            value: p.value,
            from_padding: p.from_padding,
        })
        .collect()
}

/// A peak after local refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedPeak {
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    pub value: f64,
}

/// Polishes a grid peak by alternating golden-section line searches on the
/// azimuth and zenith axes within +/- `radius_deg` of the seed (clamped to
/// [0, 180]). Evaluations are charged to the refine lane at the per-node scan
/// cost, leaving the scan lane equal to its grid-only closed form.
pub fn refine_music_peak(
    evaluator: &mut MusicEvaluator,
    azimuth_deg: f64,
    zenith_deg: f64,
    radius_deg: f64,
    meter: Meter,
) -> RefinedPeak {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    const TOL_DEG: f64 = 1e-5;
    const CYCLES: usize = 3;
    let mut az = azimuth_deg;
    let mut zen = zenith_deg;
    let mut best = evaluator.value(az, zen);
    let mut evals: u64 = 1;
    for _ in 0..CYCLES {
        for axis in 0..2 {
            let center = if axis == 0 { az } else { zen };
            let mut lo = (center - radius_deg).max(0.0);
            let mut hi = (center + radius_deg).min(180.0);
            let probe = |x: f64, evaluator: &mut MusicEvaluator, evals: &mut u64| {
                *evals += 1;
                if axis == 0 {
                    evaluator.value(x, zen)
                } else {
                    evaluator.value(az, x)
                }
            };
            let mut x1 = hi - GOLDEN * (hi - lo);
            let mut x2 = lo + GOLDEN * (hi - lo);
            let mut f1 = probe(x1, evaluator, &mut evals);
            let mut f2 = probe(x2, evaluator, &mut evals);
            while hi - lo > TOL_DEG {
                if f1 < f2 {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + GOLDEN * (hi - lo);
                    f2 = probe(x2, evaluator, &mut evals);
                } else {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - GOLDEN * (hi - lo);
                    f1 = probe(x1, evaluator, &mut evals);
                }
            }
            let mid = 0.5 * (lo + hi);
            let fm = probe(mid, evaluator, &mut evals);
            // Keep the seed coordinate if the line search did not improve
            // (multi-modal slices can defeat golden-section bracketing).
            if fm >= best {
                best = fm;
                if axis == 0 {
                    az = mid;
                } else {
                    zen = mid;
                }
            }
        }
    }
    if let Some(c) = meter {
        c.add_refine(evals * evaluator.node_cost());
    }
    RefinedPeak { azimuth_deg: az, zenith_deg: zen, value: best }
}

// ---------------------------------------------------------------------------
// FFT beamforming DoA
// ---------------------------------------------------------------------------

/// Beamforming power map over the planar aperture via zero-padded 2D DFT.
#[derive(Debug, Clone)]
pub struct FftDoaSpectrum {
    /// Power values per spatial-frequency bin pair, `power[(kx, kz)]`.
    pub power: DMatrix<f64>,
    /// Signed x-axis spatial frequency (cycles per element) of each row bin.
    pub freq_x: Vec<f64>,
    /// Signed z-axis spatial frequency of each column bin.
    pub freq_z: Vec<f64>,
    /// Element spacing in wavelengths, fixing the angle mapping.
    pub spacing_over_lambda: f64,
}

impl FftDoaSpectrum {
    /// Maps a bin pair to (azimuth, zenith) in degrees via
    /// u = (d/lambda) cos(az) sin(zen), w = (d/lambda) cos(zen); `None`
    /// outside the visible region u^2 + w^2 <= (d/lambda)^2.
    pub fn angles_at(&self, kx: usize, kz: usize) -> Option<(f64, f64)> {
        let d = self.spacing_over_lambda;
        let u = self.freq_x[kx];
        let w = self.freq_z[kz];
        if u * u + w * w > d * d * (1.0 + 1e-12) {
            return None;
        }
        let zen = (w / d).clamp(-1.0, 1.0).acos();
        if zen.sin() < 1e-9 {
            // At the array poles azimuth is unobservable; report broadside.
            return Some((90.0, zen.to_degrees()));
        }
        let az = (u / (d * zen.sin())).clamp(-1.0, 1.0).acos();
        Some((az.to_degrees(), zen.to_degrees()))
    }
}

/// FFT beamforming spectrum: the snapshot-averaged squared magnitude of the
/// aperture 2D DFT, zero-padded to `fft_size` per axis.
///
/// Evaluated through the (circularly wrapped) aperture autocorrelation of the
/// sample covariance, which reproduces the per-snapshot transform average
/// exactly while touching each snapshot only once. The transform lane is
/// charged at the per-snapshot FFT model cost over all fft_size^2 bins.
pub fn fft_doa(
    snapshots: &DMatrix<Complex64>,
    geom: &ArrayGeometry,
    fft_size: usize,
    meter: Meter,
) -> Result<FftDoaSpectrum> {
    geom.validate()?;
    let m = geom.element_count();
    if snapshots.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "snapshots have {} rows but the array has {m} elements",
            snapshots.nrows()
        )));
    }
    if fft_size < geom.mx.max(geom.mz) {
        return Err(Error::InvalidParameter(format!(
            "fft_size {fft_size} does not cover the {}x{} aperture",
            geom.mx, geom.mz
        )));
    }
    let p = snapshots.ncols();
    let r = covariance(snapshots, None)?;
    let n = fft_size;
    // Aperture autocorrelation, lags wrapped onto the DFT grid.
    let mut lag = vec![Complex64::default(); n * n];
    for a in 0..m {
        let (ax, az) = (a / geom.mz, a % geom.mz);
        for b in 0..m {
            let (bx, bz) = (b / geom.mz, b % geom.mz);
            let dx = (ax as i64 - bx as i64).rem_euclid(n as i64) as usize;
            let dz = (az as i64 - bz as i64).rem_euclid(n as i64) as usize;
            lag[dx + dz * n] += r[(a, b)];
        }
    }
    fft2_in_place_forward(&mut lag, n, n);
    if let Some(c) = meter {
        let bins = (n * n) as f64;
        let per_snapshot = 0.5 * bins * bins.log2() + bins;
        c.add_beamform((p as f64 * per_snapshot).round() as u64);
    }
    let power = DMatrix::from_fn(n, n, |kx, kz| lag[kx + kz * n].re.max(0.0));
    let freq = |k: usize| {
        if 2 * k <= n {
            k as f64 / n as f64
        } else {
            (k as f64 - n as f64) / n as f64
        }
    };
    let freq_x: Vec<f64> = (0..n).map(freq).collect();
    let freq_z = freq_x.clone();
    Ok(FftDoaSpectrum { power, freq_x, freq_z, spacing_over_lambda: geom.spacing_over_lambda })
}

/// The `count` strongest visible-region peaks of a beamforming spectrum,
/// using the same local-maximum, tie-break, and padding rules as
/// [`music_peaks`] (with periodic bin neighborhoods).
pub fn fft_doa_peaks(spectrum: &FftDoaSpectrum, count: usize) -> Vec<SpectralPeak> {
    grid_peaks(&spectrum.power, count, true, |kx, kz| spectrum.angles_at(kx, kz).is_some())
        .into_iter()
        .map(|p| {
            let (azimuth_deg, zenith_deg) = spectrum
                .angles_at(p.row, p.col)
                .expect("admissible peaks stay inside the visible region");
            SpectralPeak { azimuth_deg, zenith_deg, value: p.value, from_padding: p.from_padding }
        })
        .collect()
}

/// In-place forward 2D FFT of a column-major rows x cols buffer.
fn fft2_in_place_forward(data: &mut [Complex64], rows: usize, cols: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let col_fft = planner.plan_fft_forward(rows);
    for col in data.chunks_exact_mut(rows) {
        col_fft.process(col);
    }
    let row_fft = planner.plan_fft_forward(cols);
    let mut scratch = vec![Complex64::default(); cols];
    for row in 0..rows {
        for (k, slot) in scratch.iter_mut().enumerate() {
            *slot = data[row + k * rows];
        }
        row_fft.process(&mut scratch);
        for (k, value) in scratch.iter().enumerate() {
            data[row + k * rows] = *value;
        }
    }
}

// ---------------------------------------------------------------------------
// Delay-Doppler periodogram
// ---------------------------------------------------------------------------

/// Per-antenna complex delay-Doppler maps plus the antenna-summed magnitude.
#[derive(Debug, Clone)]
pub struct DelayDopplerSpectrum {
    /// Per-element complex maps, `complex[m][(delay_bin, doppler_bin)]`.
    pub complex: Vec<DMatrix<Complex64>>,
    /// Antenna-summed squared magnitude, scaled by 1/(N_sc N_sym).
    pub magnitude: DMatrix<f64>,
    /// Physical delay of each delay bin, seconds.
    pub delay_axis_s: Vec<f64>,
    /// Signed physical Doppler of each Doppler bin, Hz; bins past half the
    /// transform length map to negative Doppler.
    pub doppler_axis_hz: Vec<f64>,
    /// Subcarrier count of the source tensor (enters the magnitude scale).
    pub n_subcarriers: usize,
    /// Symbol count of the source tensor (enters the magnitude scale).
    pub n_symbols: usize,
}

impl DelayDopplerSpectrum {
    /// Delay-axis transform length.
    pub fn n_delay(&self) -> usize {
        self.magnitude.nrows()
    }

    /// Doppler-axis transform length.
    pub fn n_doppler(&self) -> usize {
        self.magnitude.ncols()
    }

    /// Squared magnitude of one element's map at a bin, scaled like the
    /// summed map.
    pub fn magnitude_at(&self, element: usize, delay_bin: usize, doppler_bin: usize) -> f64 {
        self.complex[element][(delay_bin, doppler_bin)].norm_sqr()
            / (self.n_subcarriers * self.n_symbols) as f64
    }

    /// M-length complex spatial snapshot across elements at one bin.
    pub fn spatial_snapshot(&self, delay_bin: usize, doppler_bin: usize) -> DVector<Complex64> {
        DVector::from_iterator(
            self.complex.len(),
            self.complex.iter().map(|map| map[(delay_bin, doppler_bin)]),
        )
    }
}

/// Per-antenna delay-Doppler periodogram of a received tensor.
///
/// Along subcarriers an unnormalized IFFT of length `n_delay` turns the
/// e^{-j 2 pi n delta_f tau} delay ramp into a peak at bin tau delta_f
/// n_delay; along symbols a forward FFT of length `n_doppler` places the
/// Doppler ramp at bin f_D T_s n_doppler. Both axes are zero-padded
/// (`n_delay >= N_sc`, `n_doppler >= N_sym`). Charges the delay-Doppler lane
/// with the FFT model cost plus the periodogram magnitude term and bumps the
/// transform tally once.
pub fn delay_doppler(
    tensor: &ReceivedTensor,
    ofdm: &OfdmParams,
    n_delay: usize,
    n_doppler: usize,
    meter: Meter,
) -> Result<DelayDopplerSpectrum> {
    ofdm.validate()?;
    let (m, n_sc, n_sym) = tensor.dims();
    if ofdm.n_subcarriers != n_sc || ofdm.n_symbols != n_sym {
        return Err(Error::DimensionMismatch(format!(
            "tensor is {n_sc} subcarriers x {n_sym} symbols but the OFDM profile says {} x {}",
            ofdm.n_subcarriers, ofdm.n_symbols
        )));
    }
    if n_delay < n_sc || n_doppler < n_sym {
        return Err(Error::InvalidParameter(format!(
            "transform lengths {n_delay} x {n_doppler} must cover the {n_sc} x {n_sym} tensor"
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let delay_ifft = planner.plan_fft_inverse(n_delay);
    let doppler_fft = planner.plan_fft_forward(n_doppler);
    let scale = 1.0 / (n_sc * n_sym) as f64;
    let mut complex = Vec::with_capacity(m);
    let mut magnitude = DMatrix::<f64>::zeros(n_delay, n_doppler);
    let mut delay_buf = vec![Complex64::default(); n_delay];
    let mut doppler_buf = vec![Complex64::default(); n_doppler];
    for element in 0..m {
        let mut map = DMatrix::<Complex64>::zeros(n_delay, n_doppler);
        for symbol in 0..n_sym {
            for (n, slot) in delay_buf.iter_mut().enumerate() {
                *slot = if n < n_sc { tensor.entry(element, n, symbol) } else { Complex64::default() };
            }
            delay_ifft.process(&mut delay_buf);
            map.column_mut(symbol).copy_from_slice(&delay_buf);
        }
        for delay_bin in 0..n_delay {
            for (k, slot) in doppler_buf.iter_mut().enumerate() {
                *slot = map[(delay_bin, k)];
            }
            doppler_fft.process(&mut doppler_buf);
            for (k, value) in doppler_buf.iter().enumerate() {
                map[(delay_bin, k)] = *value;
                magnitude[(delay_bin, k)] += value.norm_sqr() * scale;
            }
        }
        complex.push(map);
    }
    if let Some(c) = meter {
        let (mf, n_tau, n_fd) = (m as f64, n_delay as f64, n_doppler as f64);
        let cost = mf * n_sym as f64 * 0.5 * n_tau * n_tau.log2()
            + mf * n_tau * 0.5 * n_fd * n_fd.log2()
            + mf * n_tau * n_fd;
        c.add_delay_doppler(cost.round() as u64);
    }
    let delta_f = ofdm.subcarrier_spacing_hz;
    let t_s = ofdm.symbol_duration_s();
    let delay_axis_s = (0..n_delay).map(|i| i as f64 / (delta_f * n_delay as f64)).collect();
    let doppler_axis_hz = (0..n_doppler)
        .map(|k| {
            let signed = if 2 * k <= n_doppler { k as f64 } else { k as f64 - n_doppler as f64 };
            signed / (t_s * n_doppler as f64)
        })
        .collect();
    Ok(DelayDopplerSpectrum {
        complex,
        magnitude,
        delay_axis_s,
        doppler_axis_hz,
        n_subcarriers: n_sc,
        n_symbols: n_sym,
    })
}

// ---------------------------------------------------------------------------
// Delay-Doppler peak grouping
// ---------------------------------------------------------------------------

/// Grouping configuration for delay-Doppler class extraction.
#[derive(Debug, Clone, Copy)]
pub struct DdGroupConfig {
    /// Flood-fill threshold relative to each class peak, dB (must be < 0).
    pub rel_threshold_db: f64,
    /// Noise-floor margin over the magnitude-map median, dB.
    pub noise_margin_db: f64,
    /// Upper bound on the number of extracted classes.
    pub max_classes: usize,
}

impl Default for DdGroupConfig {
    fn default() -> Self {
        Self { rel_threshold_db: -3.0, noise_margin_db: 12.0, max_classes: 8 }
    }
}

/// One delay-Doppler class: a peak bin with its flooded high-magnitude
/// neighborhood and the physical values at the peak.
#[derive(Debug, Clone)]
pub struct DdClass {
    pub delay_bin: usize,
    pub doppler_bin: usize,
    /// Summed-magnitude value at the peak bin.
    pub peak_value: f64,
    /// Physical delay at the peak bin, seconds.
    pub delay_s: f64,
    /// Signed physical Doppler at the peak bin, Hz.
    pub doppler_hz: f64,
    /// Member bins (delay_bin, doppler_bin) including the peak, sorted.
    pub bins: Vec<(usize, usize)>,
}

/// Iterative peak extraction on the antenna-summed magnitude map.
///
/// Repeatedly takes the global maximum over unclaimed bins, flood-fills its
/// 4-connected region (periodic on both axes) down to the peak plus
/// `rel_threshold_db`, and records the class; stops once the next maximum
/// falls below the noise floor (map median, upper median on even counts,
/// plus `noise_margin_db`) or `max_classes` is reached. Classes come out
/// strongest first.
pub fn dd_peaks_and_group(
    spectrum: &DelayDopplerSpectrum,
    config: &DdGroupConfig,
) -> Result<Vec<DdClass>> {
    let (n_delay, n_doppler) = spectrum.magnitude.shape();
    if n_delay == 0 || n_doppler == 0 {
        return Err(Error::InvalidParameter("empty delay-Doppler spectrum".into()));
    }
    if !(config.rel_threshold_db < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "relative threshold must be negative (got {} dB)",
            config.rel_threshold_db
        )));
    }
    let mut sorted: Vec<f64> = spectrum.magnitude.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let floor = median * 10f64.powf(config.noise_margin_db / 10.0);
    let rel = 10f64.powf(config.rel_threshold_db / 10.0);
    let mut claimed = vec![false; n_delay * n_doppler];
    let mut classes = Vec::new();
    while classes.len() < config.max_classes {
        let mut peak: Option<(usize, usize, f64)> = None;
        for j in 0..n_doppler {
            for i in 0..n_delay {
                if claimed[i + j * n_delay] {
                    continue;
                }
                let v = spectrum.magnitude[(i, j)];
                if peak.map_or(true, |(_, _, pv)| v > pv) {
                    peak = Some((i, j, v));
                }
            }
        }
        let Some((pi, pj, pv)) = peak else { break };
        if pv <= floor {
            break;
        }
        let fill_threshold = (pv * rel).max(floor);
        let mut stack = vec![(pi, pj)];
        claimed[pi + pj * n_delay] = true;
        let mut bins = Vec::new();
        while let Some((i, j)) = stack.pop() {
            bins.push((i, j));
            let neighbors = [
                ((i + n_delay - 1) % n_delay, j),
                ((i + 1) % n_delay, j),
                (i, (j + n_doppler - 1) % n_doppler),
                (i, (j + 1) % n_doppler),
            ];
            for (ni, nj) in neighbors {
                let idx = ni + nj * n_delay;
                if !claimed[idx] && spectrum.magnitude[(ni, nj)] >= fill_threshold {
                    claimed[idx] = true;
                    stack.push((ni, nj));
                }
            }
        }
        bins.sort_unstable();
        classes.push(DdClass {
            delay_bin: pi,
            doppler_bin: pj,
            peak_value: pv,
            delay_s: spectrum.delay_axis_s[pi],
            doppler_hz: spectrum.doppler_axis_hz[pj],
            bins,
        });
    }
    Ok(classes)
}

// ---------------------------------------------------------------------------
// Sequential baselines
// ---------------------------------------------------------------------------

/// Outcome of the path-by-path sequential nulling baseline.
#[derive(Debug, Clone)]
pub struct SequentialMusicOutcome {
    /// DoAs in estimation order (one per completed round).
    pub doas: Vec<(f64, f64)>,
    /// Error annotation when a round failed; earlier rounds are kept.
    pub failure: Option<String>,
}

/// Path-by-path sequential ZF-MUSIC baseline.
///
/// Each round builds a projector nulling every DoA estimated so far,
/// re-projects the snapshots, and appends the grid argmax of a one-source
/// MUSIC spectrum. Early misestimates stay in the nulled set, so errors
/// propagate to later rounds by construction; a mid-sequence projector
/// failure ends the loop with the rounds completed so far.
pub fn sequential_zf_music(
    snapshots: &DMatrix<Complex64>,
    geom: &ArrayGeometry,
    total_paths: usize,
    grid_step_deg: f64,
    meter: Meter,
) -> Result<SequentialMusicOutcome> {
    geom.validate()?;
    let m = geom.element_count();
    if total_paths == 0 || total_paths >= m {
        return Err(Error::InvalidParameter(format!(
            "path count {total_paths} must lie in 1..{m} for an {m}-element array"
        )));
    }
    if snapshots.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "snapshots have {} rows but the array has {m} elements",
            snapshots.nrows()
        )));
    }
    let mut doas: Vec<(f64, f64)> = Vec::new();
    let mut failure = None;
    for round in 0..total_paths {
        let outcome = (|| -> Result<(f64, f64)> {
            let projector = zf_build(geom, &doas, meter)?;
            let projected = zf_apply(&projector, snapshots, meter)?;
            let cov = covariance(&projected, meter)?;
            let spectrum = music_spectrum(&cov, 1, geom, grid_step_deg, Some(&projector), meter)?;
            Ok(spectrum.argmax())
        })();
        match outcome {
            Ok(doa) => doas.push(doa),
            Err(e) => {
                failure = Some(format!("round {}: {e}", round + 1));
                break;
            }
        }
    }
    Ok(SequentialMusicOutcome { doas, failure })
}

/// Forward-only spatial smoothing followed by MUSIC on the subarray model.
///
/// Averages the covariance over all (mx-sx+1)(mz-sz+1) subarray shifts to
/// restore rank against coherent arrivals, then scans MUSIC with the
/// subarray steering model and returns the `n_sources` strongest peaks.
pub fn spatial_smoothing_music(
    snapshots: &DMatrix<Complex64>,
    geom: &ArrayGeometry,
    subarray_mx: usize,
    subarray_mz: usize,
    n_sources: usize,
    grid_step_deg: f64,
    meter: Meter,
) -> Result<Vec<SpectralPeak>> {
    geom.validate()?;
    if subarray_mx == 0 || subarray_mz == 0 || subarray_mx > geom.mx || subarray_mz > geom.mz {
        return Err(Error::InvalidParameter(format!(
            "subarray {subarray_mx}x{subarray_mz} does not fit the {}x{} array",
            geom.mx, geom.mz
        )));
    }
    if snapshots.nrows() != geom.element_count() {
        return Err(Error::DimensionMismatch(format!(
            "snapshots have {} rows but the array has {} elements",
            snapshots.nrows(),
            geom.element_count()
        )));
    }
    let shifts_x = geom.mx - subarray_mx + 1;
    let shifts_z = geom.mz - subarray_mz + 1;
    let n_shifts = shifts_x * shifts_z;
    if n_shifts < n_sources {
        return Err(Error::InvalidSubspace(format!(
            "{n_shifts} subarray shifts cannot decorrelate {n_sources} sources"
        )));
    }
    let full = covariance(snapshots, meter)?;
    let m_sub = subarray_mx * subarray_mz;
    let mut smoothed = DMatrix::<Complex64>::zeros(m_sub, m_sub);
    for off_x in 0..shifts_x {
        for off_z in 0..shifts_z {
            for a in 0..m_sub {
                let fa = (off_x + a / subarray_mz) * geom.mz + (off_z + a % subarray_mz);
                for b in 0..m_sub {
                    let fb = (off_x + b / subarray_mz) * geom.mz + (off_z + b % subarray_mz);
                    smoothed[(a, b)] += full[(fa, fb)];
                }
            }
        }
    }
    smoothed.unscale_mut(n_shifts as f64);
    let sub_geom = ArrayGeometry { mx: subarray_mx, mz: subarray_mz, ..*geom };
    let spectrum = music_spectrum(&smoothed, n_sources, &sub_geom, grid_step_deg, None, meter)?;
    Ok(music_peaks(&spectrum, n_sources))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MultCounter;
    use crate::scene::{steering_vector, PathKind, PathParams};
    use crate::synth::synthesize_paths;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn upa(mx: usize, mz: usize) -> ArrayGeometry {
        ArrayGeometry { mx, mz, spacing_over_lambda: 0.5, carrier_hz: 28.0e9 }
    }

    fn path(kind: PathKind, delay_us: f64, doppler_hz: f64, az: f64, zen: f64) -> PathParams {
        PathParams {
            kind,
            gain: Complex64::new(1.0, 0.0),
            delay_s: delay_us * 1e-6,
            doppler_hz,
            azimuth_deg: az,
            zenith_deg: zen,
        }
    }

    fn ofdm_small() -> OfdmParams {
        OfdmParams {
            subcarrier_spacing_hz: 30.0e3,
            n_subcarriers: 16,
            n_symbols: 12,
            cp_duration_s: 9.375e-6,
        }
    }

    fn random_snapshots(m: usize, p: usize, seed: u64) -> DMatrix<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, p, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    // 1. Covariance equals the dense definitional product, exactly Hermitian,
    //    and charges M^2 P.
    #[test]
    fn covariance_matches_dense_product() {
        let y = random_snapshots(16, 1000, 7);
        let counter = MultCounter::new();
        let r = covariance(&y, Some(&counter)).unwrap();
        let dense = &y * y.adjoint() / Complex64::new(1000.0, 0.0);
        assert!((&r - &dense).iter().all(|v| v.norm() <= 1e-12));
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(r[(i, j)], r[(j, i)].conj());
            }
        }
        assert_eq!(counter.snapshot().covariance, 16 * 16 * 1000);
        let ones = DMatrix::from_element(3, 5, Complex64::new(1.0, 0.0));
        let r1 = covariance(&ones, None).unwrap();
        assert!(r1.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-14));
        assert!(covariance(&DMatrix::<Complex64>::zeros(4, 0), None).is_err());
    }

    // 2. Noiseless single-path data is rank one: dominant eigenvalue gap.
    #[test]
    fn covariance_rank_one_gap() {
        let geom = upa(4, 4);
        let tensor =
            synthesize_paths(&geom, &[path(PathKind::Target, 2.0, 700.0, 52.0, 126.0)], &ofdm_small(), None, 0)
                .unwrap();
        let r = covariance(tensor.snapshots(), None).unwrap();
        let eval = MusicEvaluator::new(&r, &geom, 1, None, None).unwrap();
        let lambda = eval.eigenvalues();
        assert!(lambda[0] > 0.0);
        assert!(lambda[1].abs() <= 1e-10 * lambda[0], "gap {:e}", lambda[1] / lambda[0]);
    }

    // 3. Noiseless single path at a grid node: argmax exact on a coarse lattice.
    #[test]
    fn music_argmax_exact_at_grid_nodes() {
        let geom = upa(4, 4);
        for &(az, zen) in &[(10.0, 30.0), (52.0, 126.0), (90.0, 90.0), (170.0, 150.0)] {
            let tensor =
                synthesize_paths(&geom, &[path(PathKind::Target, 1.0, 500.0, az, zen)], &ofdm_small(), None, 0)
                    .unwrap();
            let r = covariance(tensor.snapshots(), None).unwrap();
            let spectrum = music_spectrum(&r, 1, &geom, 2.0, None, None).unwrap();
            assert_eq!(spectrum.argmax(), (az, zen));
        }
    }

    // 4. Identity covariance: flat spectrum.
    #[test]
    fn music_flat_for_identity_covariance() {
        let geom = upa(4, 2);
        let eye = DMatrix::<Complex64>::identity(8, 8);
        let spectrum = music_spectrum(&eye, 2, &geom, 5.0, None, None).unwrap();
        let max = spectrum.values.iter().cloned().fold(f64::MIN, f64::max);
        let min = spectrum.values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min <= 1.0 + 1e-6, "ratio {}", max / min);
    }

    // 5. Input validation: subspace split, Hermitian tolerance, dimensions.
    #[test]
    fn music_rejects_bad_inputs() {
        let geom = upa(2, 2);
        let eye = DMatrix::<Complex64>::identity(4, 4);
        assert!(matches!(
            music_spectrum(&eye, 0, &geom, 1.0, None, None),
            Err(Error::InvalidSubspace(_))
        ));
        assert!(matches!(
            music_spectrum(&eye, 4, &geom, 1.0, None, None),
            Err(Error::InvalidSubspace(_))
        ));
        let mut skew = eye.clone();
        skew[(0, 1)] = Complex64::new(0.5, 0.0);
        assert!(matches!(
            music_spectrum(&skew, 1, &geom, 1.0, None, None),
            Err(Error::InvalidParameter(_))
        ));
        let small = DMatrix::<Complex64>::identity(3, 3);
        assert!(matches!(
            music_spectrum(&small, 1, &geom, 1.0, None, None),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(music_spectrum(&eye, 1, &geom, 0.0, None, None).is_err());
    }

    // 6. Projected MUSIC: deep nulls at the projected-out clutter DoAs while
    //    both targets peak on-grid.
    #[test]
    fn music_with_projector_nulls_clutter() {
        let geom = upa(8, 8);
        let clutter = [(84.3, 65.0), (38.7, 46.0), (111.8, 143.0)];
        let paths = vec![
            path(PathKind::Clutter, 3.35, 186.7, 84.3, 65.0),
            path(PathKind::Clutter, 7.34, 466.7, 38.7, 46.0),
            path(PathKind::Clutter, 5.25, 746.7, 111.8, 143.0),
            path(PathKind::Target, 4.50, 3733.3, 52.4, 126.0),
            path(PathKind::Target, 3.74, 373.3, 66.8, 92.0),
        ];
        let tensor = synthesize_paths(&geom, &paths, &ofdm_small(), None, 0).unwrap();
        let projector = zf_build(&geom, &clutter, None).unwrap();
        let projected = zf_apply(&projector, tensor.snapshots(), None).unwrap();
        let r = covariance(&projected, None).unwrap();
        let mut eval = MusicEvaluator::new(&r, &geom, 2, Some(&projector), None).unwrap();
        let spectrum = eval.spectrum(0.2, None).unwrap();
        let max = spectrum.values.iter().cloned().fold(f64::MIN, f64::max);
        for &(az, zen) in &clutter {
            let v = eval.value(az, zen);
            assert!(v <= 1e-3 * max, "clutter ({az}, {zen}) value {v:e} vs max {max:e}");
        }
        let peaks = music_peaks(&spectrum, 2);
        let mut found: Vec<(f64, f64)> =
            peaks.iter().map(|p| (p.azimuth_deg, p.zenith_deg)).collect();
        found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert_relative_eq!(found[0].0, 52.4, epsilon = 1e-12);
        assert_relative_eq!(found[0].1, 126.0, epsilon = 1e-12);
        assert_relative_eq!(found[1].0, 66.8, epsilon = 1e-12);
        assert_relative_eq!(found[1].1, 92.0, epsilon = 1e-12);
        assert!(peaks.iter().all(|p| !p.from_padding));
    }

    // 7. Peak rules on a hand-built grid: strict maxima, ordering, padding,
    //    lowest-index ties.
    #[test]
    fn music_peaks_ordering_padding_and_ties() {
        let mut values = DMatrix::<f64>::from_element(5, 5, 1.0);
        values[(1, 1)] = 5.0;
        values[(3, 3)] = 7.0;
        let spectrum = MusicSpectrum {
            azimuth_deg: (0..5).map(|i| i as f64).collect(),
            zenith_deg: (0..5).map(|i| i as f64).collect(),
            values,
            n_sources: 3,
            grid_step_deg: 1.0,
        };
        let peaks = music_peaks(&spectrum, 3);
        assert_eq!(peaks.len(), 3);
        assert_eq!((peaks[0].azimuth_deg, peaks[0].zenith_deg), (3.0, 3.0));
        assert_eq!((peaks[1].azimuth_deg, peaks[1].zenith_deg), (1.0, 1.0));
        assert!(!peaks[0].from_padding && !peaks[1].from_padding);
        // Third entry is padded from the flat remainder: lowest flat index.
        assert!(peaks[2].from_padding);
        assert_eq!((peaks[2].azimuth_deg, peaks[2].zenith_deg), (0.0, 0.0));
        // Fully flat spectrum: no strict maxima at all.
        let flat = MusicSpectrum {
            azimuth_deg: vec![0.0, 1.0],
            zenith_deg: vec![0.0, 1.0],
            values: DMatrix::from_element(2, 2, 1.0),
            n_sources: 1,
            grid_step_deg: 1.0,
        };
        let p = music_peaks(&flat, 1);
        assert!(p[0].from_padding);
        assert_eq!((p[0].azimuth_deg, p[0].zenith_deg), (0.0, 0.0));
    }

    // 8. Golden-section refinement recovers an off-grid DoA from a coarse scan.
    #[test]
    fn refine_recovers_off_grid_peak() {
        let geom = upa(8, 8);
        let truth = (52.43, 126.15);
        let tensor = synthesize_paths(
            &geom,
            &[path(PathKind::Target, 1.0, 500.0, truth.0, truth.1)],
            &ofdm_small(),
            None,
            0,
        )
        .unwrap();
        let r = covariance(tensor.snapshots(), None).unwrap();
        let counter = MultCounter::new();
        let mut eval = MusicEvaluator::new(&r, &geom, 1, None, Some(&counter)).unwrap();
        let spectrum = eval.spectrum(1.0, Some(&counter)).unwrap();
        let seed = spectrum.argmax();
        let refined = refine_music_peak(&mut eval, seed.0, seed.1, 1.0, Some(&counter));
        assert!((refined.azimuth_deg - truth.0).abs() < 5e-3, "az {}", refined.azimuth_deg);
        assert!((refined.zenith_deg - truth.1).abs() < 5e-3, "zen {}", refined.zenith_deg);
        let counts = counter.snapshot();
        assert_eq!(counts.scan, 181 * 181 * 65 * 63);
        assert!(counts.refine > 0);
    }

    // 9. FFT beamforming: boresight path lands in bin (0, 0); bin mapping
    //    matches the spatial-frequency prediction for an off-axis path.
    #[test]
    fn fft_doa_bin_mapping() {
        let geom = upa(8, 8);
        let boresight =
            synthesize_paths(&geom, &[path(PathKind::Target, 1.0, 300.0, 90.0, 90.0)], &ofdm_small(), None, 0)
                .unwrap();
        let spectrum = fft_doa(boresight.snapshots(), &geom, 32, None).unwrap();
        assert_eq!(grid_argmax(&spectrum.power), (0, 0));
        let peak = &fft_doa_peaks(&spectrum, 1)[0];
        assert_relative_eq!(peak.azimuth_deg, 90.0, epsilon = 1e-9);
        assert_relative_eq!(peak.zenith_deg, 90.0, epsilon = 1e-9);

        let geom = upa(16, 16);
        let truth = (52.4f64, 126.0f64);
        let n = 80;
        let tensor =
            synthesize_paths(&geom, &[path(PathKind::Target, 1.0, 300.0, truth.0, truth.1)], &ofdm_small(), None, 0)
                .unwrap();
        let spectrum = fft_doa(tensor.snapshots(), &geom, n, None).unwrap();
        let u = 0.5 * truth.0.to_radians().cos() * truth.1.to_radians().sin();
        let w = 0.5 * truth.1.to_radians().cos();
        let expect_kx = (u * n as f64).round().rem_euclid(n as f64) as usize;
        let expect_kz = (w * n as f64).round().rem_euclid(n as f64) as usize;
        assert_eq!(grid_argmax(&spectrum.power), (expect_kx, expect_kz));
        let peak = &fft_doa_peaks(&spectrum, 1)[0];
        assert!((peak.azimuth_deg - truth.0).abs() < 2.0);
        assert!((peak.zenith_deg - truth.1).abs() < 2.0);
    }

    // 10. Two well-separated paths produce two visible-region peaks; the
    //     transform lane is charged with the per-snapshot model cost.
    #[test]
    fn fft_doa_resolves_separated_paths() {
        let geom = upa(8, 8);
        let paths = vec![
            path(PathKind::Target, 1.0, 300.0, 40.0, 60.0),
            path(PathKind::Target, 2.0, -400.0, 120.0, 110.0),
        ];
        let tensor = synthesize_paths(&geom, &paths, &ofdm_small(), None, 0).unwrap();
        let counter = MultCounter::new();
        let spectrum = fft_doa(tensor.snapshots(), &geom, 64, Some(&counter)).unwrap();
        let peaks = fft_doa_peaks(&spectrum, 2);
        let mut found: Vec<(f64, f64)> =
            peaks.iter().map(|p| (p.azimuth_deg, p.zenith_deg)).collect();
        found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((found[0].0 - 40.0).abs() < 5.0 && (found[0].1 - 60.0).abs() < 5.0);
        assert!((found[1].0 - 120.0).abs() < 5.0 && (found[1].1 - 110.0).abs() < 5.0);
        let p = tensor.snapshots().ncols() as u64;
        let bins = 64u64 * 64;
        assert_eq!(counter.snapshot().transform, p * (bins / 2 * 12 + bins));
        assert_eq!(counter.snapshot().dd_transforms, 0);
        assert!(fft_doa(tensor.snapshots(), &geom, 4, None).is_err());
    }

    // 11. Delay-Doppler: peak bins match the bin maps, Parseval holds, and the
    //     per-element magnitude accessor agrees with the summed map.
    #[test]
    fn delay_doppler_bins_and_parseval() {
        let geom = upa(2, 1);
        let ofdm = OfdmParams {
            subcarrier_spacing_hz: 30.0e3,
            n_subcarriers: 128,
            n_symbols: 32,
            cp_duration_s: 9.375e-6,
        };
        let tau_s = 2.0e-6;
        let doppler_hz = 900.0;
        let tensor = synthesize_paths(
            &geom,
            &[path(PathKind::Target, tau_s * 1e6, doppler_hz, 70.0, 100.0)],
            &ofdm,
            None,
            0,
        )
        .unwrap();
        let (n_delay, n_doppler) = (640, 160);
        let counter = MultCounter::new();
        let spectrum = delay_doppler(&tensor, &ofdm, n_delay, n_doppler, Some(&counter)).unwrap();
        let (pi, pj) = grid_argmax(&spectrum.magnitude);
        let expect_delay = (tau_s * ofdm.subcarrier_spacing_hz * n_delay as f64).round() as usize;
        let expect_doppler =
            (doppler_hz * ofdm.symbol_duration_s() * n_doppler as f64).round() as usize;
        assert_eq!(pi, expect_delay);
        assert_eq!(pj, expect_doppler);
        assert_relative_eq!(spectrum.delay_axis_s[pi], pi as f64 / (30.0e3 * 640.0), epsilon = 1e-18);
        // Parseval: summed magnitude recovers the input energy.
        let total: f64 = spectrum.magnitude.iter().sum();
        let energy = total * (128.0 * 32.0) / (640.0 * 160.0);
        assert_relative_eq!(energy, tensor.energy(), max_relative = 1e-9);
        // Per-element accessor sums to the stored map.
        let sum01 = spectrum.magnitude_at(0, pi, pj) + spectrum.magnitude_at(1, pi, pj);
        assert_relative_eq!(sum01, spectrum.magnitude[(pi, pj)], max_relative = 1e-12);
        // Spatial snapshot at the peak follows the steering phase.
        let snap = spectrum.spatial_snapshot(pi, pj);
        let alpha = steering_vector(&geom, 70.0, 100.0).unwrap();
        let ratio = (snap[1] / snap[0]) / (alpha[1] / alpha[0]);
        assert_relative_eq!(ratio.norm(), 1.0, epsilon = 1e-6);
        assert!(ratio.arg().abs() < 1e-6);
        // Model charge: delay IFFTs + Doppler FFTs + periodogram term.
        let m = 2.0f64;
        let expect_cost = m * 32.0 * 0.5 * 640.0 * 640f64.log2()
            + m * 640.0 * 0.5 * 160.0 * 160f64.log2()
            + m * 640.0 * 160.0;
        let counts = counter.snapshot();
        assert_eq!(counts.transform, expect_cost.round() as u64);
        assert_eq!(counts.dd_transforms, 1);
    }

    // 12. Negative Doppler maps to the upper bin half and back out signed.
    #[test]
    fn delay_doppler_negative_doppler() {
        let geom = upa(1, 1);
        let ofdm = ofdm_small();
        let tensor = synthesize_paths(
            &geom,
            &[path(PathKind::Target, 1.0, -900.0, 90.0, 90.0)],
            &ofdm,
            None,
            0,
        )
        .unwrap();
        let spectrum = delay_doppler(&tensor, &ofdm, 64, 48, None).unwrap();
        let (_, pj) = grid_argmax(&spectrum.magnitude);
        assert!(2 * pj > 48, "negative Doppler must land past the half bin, got {pj}");
        let expected = -900.0;
        let bin_width = 1.0 / (ofdm.symbol_duration_s() * 48.0);
        assert!((spectrum.doppler_axis_hz[pj] - expected).abs() <= 0.5 * bin_width);
        // Undersized transforms are rejected.
        assert!(delay_doppler(&tensor, &ofdm, 8, 48, None).is_err());
        assert!(delay_doppler(&tensor, &ofdm, 64, 4, None).is_err());
        let other = OfdmParams { n_subcarriers: 32, ..ofdm };
        assert!(matches!(
            delay_doppler(&tensor, &other, 64, 48, None),
            Err(Error::DimensionMismatch(_))
        ));
    }

    // 13. Grouping on synthesized data: the two physical components lead the
    //     class list, strongest first, at the predicted bins. Rectangular
    //     windows leave -13 dB sidelobes above a noiseless floor, so trailing
    //     sidelobe classes are legitimate and only bounded by the cap.
    #[test]
    fn dd_grouping_finds_components_first() {
        let geom = upa(2, 1);
        let ofdm = ofdm_small();
        let paths = vec![
            path(PathKind::Target, 1.0, 2000.0, 70.0, 100.0),
            path(PathKind::Clutter, 5.0, -3000.0, 110.0, 80.0),
        ];
        let tensor = synthesize_paths(&geom, &paths, &ofdm, None, 0).unwrap();
        let spectrum = delay_doppler(&tensor, &ofdm, 80, 60, None).unwrap();
        let config = DdGroupConfig::default();
        let classes = dd_peaks_and_group(&spectrum, &config).unwrap();
        assert!(classes.len() >= 2);
        assert!(classes.len() <= config.max_classes);
        let predict = |tau: f64, fd: f64| {
            let i = (tau * 30.0e3 * 80.0).round() as usize;
            let j = (fd * ofdm.symbol_duration_s() * 60.0).round().rem_euclid(60.0) as usize;
            (i, j)
        };
        let mut bins = [(classes[0].delay_bin, classes[0].doppler_bin),
            (classes[1].delay_bin, classes[1].doppler_bin)];
        bins.sort_unstable();
        let mut expect = [predict(1.0e-6, 2000.0), predict(5.0e-6, -3000.0)];
        expect.sort_unstable();
        for (got, want) in bins.iter().zip(&expect) {
            assert!(got.0.abs_diff(want.0) <= 1 && got.1.abs_diff(want.1) <= 1, "{got:?} vs {want:?}");
        }
        for pair in classes.windows(2) {
            assert!(pair[0].peak_value >= pair[1].peak_value);
        }
        for class in &classes {
            assert!(class.bins.contains(&(class.delay_bin, class.doppler_bin)));
            assert_relative_eq!(class.delay_s, spectrum.delay_axis_s[class.delay_bin]);
        }
        assert!(dd_peaks_and_group(
            &spectrum,
            &DdGroupConfig { rel_threshold_db: 0.0, ..Default::default() }
        )
        .is_err());
        // A flat map has no peak above the median-based floor.
        let flat = DelayDopplerSpectrum {
            complex: vec![DMatrix::from_element(4, 4, Complex64::new(1.0, 0.0))],
            magnitude: DMatrix::from_element(4, 4, 1.0),
            delay_axis_s: vec![0.0; 4],
            doppler_axis_hz: vec![0.0; 4],
            n_subcarriers: 4,
            n_symbols: 4,
        };
        assert!(dd_peaks_and_group(&flat, &DdGroupConfig::default()).unwrap().is_empty());
    }

    // 13b. Grouping rules on a hand-built map: -3 dB neighborhoods merge,
    //      sub-threshold shoulders split off, the median floor stops the
    //      sweep, and the flood fill wraps on both axes.
    #[test]
    fn dd_grouping_merging_floor_and_wraparound() {
        let mut magnitude = DMatrix::<f64>::from_element(6, 6, 0.1);
        magnitude[(2, 2)] = 10.0; // class 1 peak
        magnitude[(2, 3)] = 6.0; // above 10 * 10^(-0.3) ~ 5.01: merges
        magnitude[(3, 2)] = 6.0; // merges
        magnitude[(1, 2)] = 4.9; // below the -3 dB line: own class
        magnitude[(5, 0)] = 3.0; // class at the map edge
        magnitude[(0, 0)] = 1.9; // joins via delay-axis wraparound
        magnitude[(5, 5)] = 2.0; // joins via Doppler-axis wraparound
        let spectrum = DelayDopplerSpectrum {
            complex: vec![DMatrix::zeros(6, 6)],
            magnitude,
            delay_axis_s: (0..6).map(|i| i as f64 * 1e-6).collect(),
            doppler_axis_hz: (0..6).map(|i| i as f64 * 100.0).collect(),
            n_subcarriers: 6,
            n_symbols: 6,
        };
        // Median 0.1 puts the floor at 0.1 * 10^1.2 ~ 1.58: the 0.1 field
        // stays out and the sweep ends after the three real classes.
        let classes = dd_peaks_and_group(&spectrum, &DdGroupConfig::default()).unwrap();
        assert_eq!(classes.len(), 3);
        assert_eq!((classes[0].delay_bin, classes[0].doppler_bin), (2, 2));
        assert_eq!(classes[0].bins, vec![(2, 2), (2, 3), (3, 2)]);
        assert_eq!((classes[1].delay_bin, classes[1].doppler_bin), (1, 2));
        assert_eq!(classes[1].bins, vec![(1, 2)]);
        assert_eq!((classes[2].delay_bin, classes[2].doppler_bin), (5, 0));
        assert_eq!(classes[2].bins, vec![(0, 0), (5, 0), (5, 5)]);
        assert_relative_eq!(classes[2].delay_s, 5e-6);
        // A tighter cap truncates the sweep after the strongest classes.
        let capped = dd_peaks_and_group(
            &spectrum,
            &DdGroupConfig { max_classes: 1, ..Default::default() },
        )
        .unwrap();
        assert_eq!(capped.len(), 1);
        assert_eq!(capped[0].bins, vec![(2, 2), (2, 3), (3, 2)]);
    }

    // 14. Sequential ZF-MUSIC: single path in one round, two separated paths
    //     in two rounds, and a partial result when a round's projector fails.
    #[test]
    fn sequential_zf_music_rounds() {
        let geom = upa(4, 4);
        let ofdm = ofdm_small();
        let single =
            synthesize_paths(&geom, &[path(PathKind::Target, 1.0, 500.0, 52.0, 126.0)], &ofdm, None, 0)
                .unwrap();
        let one = sequential_zf_music(single.snapshots(), &geom, 1, 2.0, None).unwrap();
        assert_eq!(one.doas, vec![(52.0, 126.0)]);
        assert!(one.failure.is_none());

        // Unequal gains keep round one out of the equal-power regime, where
        // the rank-one subspace mixes both arrivals and the argmax lands
        // between them (the known bias-propagation weakness of the
        // sequential scheme).
        let mut strong = path(PathKind::Target, 1.0, 500.0, 40.0, 60.0);
        strong.gain = Complex64::new(2.0, 0.0);
        let mut weak = path(PathKind::Target, 2.0, -700.0, 120.0, 110.0);
        weak.gain = Complex64::new(0.7, 0.0);
        let two = synthesize_paths(&geom, &[strong, weak], &ofdm, None, 0).unwrap();
        let out = sequential_zf_music(two.snapshots(), &geom, 2, 2.0, None).unwrap();
        assert!(out.failure.is_none());
        assert_eq!(out.doas, vec![(40.0, 60.0), (120.0, 110.0)]);

        // A 180-degree grid aliases every node onto one steering vector: the
        // first two rounds repeat the same estimate and the third projector
        // build fails, leaving a partial result.
        let tiny_geom = upa(2, 2);
        let tiny =
            synthesize_paths(&tiny_geom, &[path(PathKind::Target, 1.0, 500.0, 52.0, 126.0)], &ofdm, None, 0)
                .unwrap();
        let coarse = sequential_zf_music(tiny.snapshots(), &tiny_geom, 3, 180.0, None).unwrap();
        assert_eq!(coarse.doas.len(), 2);
        let note = coarse.failure.expect("third round must report the projector failure");
        assert!(note.starts_with("round 3:"), "{note}");

        assert!(sequential_zf_music(single.snapshots(), &geom, 16, 2.0, None).is_err());
    }

    // 15. Spatial smoothing: a full-size subarray reduces to plain MUSIC, and
    //     smoothing restores rank for two coherent arrivals.
    #[test]
    fn spatial_smoothing_restores_coherent_rank() {
        let geom = upa(8, 8);
        let a1 = steering_vector(&geom, 40.0, 60.0).unwrap();
        let a2 = steering_vector(&geom, 120.0, 110.0).unwrap();
        // Identical waveform on both paths: rank-one snapshot matrix.
        let waveform = random_snapshots(1, 256, 11);
        let coherent = (&a1 + &a2) * waveform.clone();
        let r = covariance(&coherent, None).unwrap();
        let plain = MusicEvaluator::new(&r, &geom, 2, None, None).unwrap();
        assert!(plain.eigenvalues()[1].abs() <= 1e-10 * plain.eigenvalues()[0]);

        let peaks =
            spatial_smoothing_music(&coherent, &geom, 4, 4, 2, 1.0, None).unwrap();
        let mut found: Vec<(f64, f64)> =
            peaks.iter().map(|p| (p.azimuth_deg, p.zenith_deg)).collect();
        found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert_eq!(found, vec![(40.0, 60.0), (120.0, 110.0)]);
        assert!(peaks.iter().all(|p| !p.from_padding));

        // Full-array "subarray": identical to plain MUSIC on the same data.
        let tensor =
            synthesize_paths(&geom, &[path(PathKind::Target, 1.0, 500.0, 52.0, 126.0)], &ofdm_small(), None, 0)
                .unwrap();
        let smoothed =
            spatial_smoothing_music(tensor.snapshots(), &geom, 8, 8, 1, 2.0, None).unwrap();
        let cov = covariance(tensor.snapshots(), None).unwrap();
        let direct = music_spectrum(&cov, 1, &geom, 2.0, None, None).unwrap();
        let direct_peak = &music_peaks(&direct, 1)[0];
        assert_eq!(
            (smoothed[0].azimuth_deg, smoothed[0].zenith_deg),
            (direct_peak.azimuth_deg, direct_peak.zenith_deg)
        );

        // One shift cannot decorrelate two sources.
        assert!(matches!(
            spatial_smoothing_music(&coherent, &geom, 8, 8, 2, 2.0, None),
            Err(Error::InvalidSubspace(_))
        ));
    }

    // 16. Counter conventions: scan and eigen lanes follow the model formulas
    //     with and without a projector.
    #[test]
    fn counter_charges_follow_model() {
        let geom = upa(2, 2);
        let tensor =
            synthesize_paths(&geom, &[path(PathKind::Target, 1.0, 500.0, 90.0, 90.0)], &ofdm_small(), None, 0)
                .unwrap();
        let counter = MultCounter::new();
        let projector = zf_build(&geom, &[(40.0, 60.0)], Some(&counter)).unwrap();
        let projected = zf_apply(&projector, tensor.snapshots(), Some(&counter)).unwrap();
        let cov = covariance(&projected, Some(&counter)).unwrap();
        let _ = music_spectrum(&cov, 1, &geom, 30.0, Some(&projector), Some(&counter)).unwrap();
        let counts = counter.snapshot();
        let p = tensor.snapshots().ncols() as u64;
        assert_eq!(counts.projector_build, 1 * (4 + 1) * (4 + 1));
        assert_eq!(counts.projector_builds, 1);
        assert_eq!(counts.projection, 16 * p);
        assert_eq!(counts.covariance, 16 * p);
        assert_eq!(counts.eigen, 64);
        // 7x7 nodes at (M+1)(M-S) apiece.
        assert_eq!(counts.scan, 49 * 5 * 3);
    }
}
