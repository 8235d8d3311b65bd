//! Complexity accounting and experiment metrics.
//!
//! The cost model counts complex multiplications under the same conventions as
//! the closed-form expressions in [`complexity`]: covariance formation is
//! charged M^2 per snapshot column, projector construction K(M+K)^2 for K
//! nulled directions, projection M^2 per column, an eigendecomposition M^3,
//! and a spectrum scan (M+1)(M-K) per grid node regardless of the internal
//! evaluation shortcut. Instrumented runs therefore reproduce the closed forms
//! exactly rather than reflecting micro-level operation counts.
//!
//! The second half of the module is the Monte Carlo harness: a method-tagged
//! trial runner, nearest-neighbor truth association, RMSE aggregation, and
//! deterministic CSV emission.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimate::{
    covariance, fft_doa, fft_doa_peaks, music_peaks, refine_music_peak, sequential_zf_music,
    spatial_smoothing_music, DdGroupConfig, MusicEvaluator,
};
use crate::joint::{step1, step2, DoaMethod, EstimateSet, JointConfig, MatchTolerances, Stage};
use crate::scene::{ArrayGeometry, PathKind, Scene};
use crate::suppress::{mti_apply, mti_design, zf_apply, zf_build};
use crate::synth::{synthesize_paths, OfdmParams, ReceivedTensor};

/// Thread-safe complex-multiplication counter shared across a pipeline run.
#[derive(Debug, Default)]
pub struct MultCounter {
    covariance: AtomicU64,
    projector_build: AtomicU64,
    projection: AtomicU64,
    scan: AtomicU64,
    refine: AtomicU64,
    eigen: AtomicU64,
    transform: AtomicU64,
    projector_builds: AtomicU64,
    dd_transforms: AtomicU64,
}

/// Plain snapshot of a [`MultCounter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MultCounts {
    /// Covariance formation charges (M^2 per column).
    pub covariance: u64,
    /// Projector construction charges (K(M+K)^2 per build).
    pub projector_build: u64,
    /// Snapshot projection charges (M^2 per column).
    pub projection: u64,
    /// Spectrum scan charges ((M+1)(M-K) per grid node).
    pub scan: u64,
    /// Extra spectrum evaluations spent on local peak refinement.
    pub refine: u64,
    /// Eigendecomposition charges (M^3 per decomposition).
    pub eigen: u64,
    /// Transform charges: delay-Doppler FFT model plus periodogram, and
    /// FFT-beamforming model costs.
    pub transform: u64,
    /// Number of projector builds.
    pub projector_builds: u64,
    /// Number of delay-Doppler transforms.
    pub dd_transforms: u64,
}

impl MultCounts {
    /// Total complex multiplications across all charge categories.
    pub fn total(&self) -> u64 {
        self.covariance + self.projector_build + self.projection + self.scan + self.refine + self.eigen + self.transform
    }
}

impl MultCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current counter values.
    pub fn snapshot(&self) -> MultCounts {
        MultCounts {
            covariance: self.covariance.load(Ordering::Relaxed),
            projector_build: self.projector_build.load(Ordering::Relaxed),
            projection: self.projection.load(Ordering::Relaxed),
            scan: self.scan.load(Ordering::Relaxed),
            refine: self.refine.load(Ordering::Relaxed),
            eigen: self.eigen.load(Ordering::Relaxed),
            transform: self.transform.load(Ordering::Relaxed),
            projector_builds: self.projector_builds.load(Ordering::Relaxed),
            dd_transforms: self.dd_transforms.load(Ordering::Relaxed),
        }
    }

    pub fn add_covariance(&self, n: u64) {
        self.covariance.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_projector_build(&self, n: u64) {
        self.projector_build.fetch_add(n, Ordering::Relaxed);
        self.projector_builds.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_projection(&self, n: u64) {
        self.projection.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_scan(&self, n: u64) {
        self.scan.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_refine(&self, n: u64) {
        self.refine.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_eigen(&self, n: u64) {
        self.eigen.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_delay_doppler(&self, n: u64) {
        self.transform.fetch_add(n, Ordering::Relaxed);
        self.dd_transforms.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_beamform(&self, n: u64) {
        self.transform.fetch_add(n, Ordering::Relaxed);
    }
}

/// Optional counter handle threaded through the estimation kernels.
pub type Meter<'a> = Option<&'a MultCounter>;

// ---------------------------------------------------------------------------
// Closed-form complexity
// ---------------------------------------------------------------------------

/// The seven accounted algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Fft,
    SpatialClamFft,
    JointClamFft,
    Music,
    SpatialClamMusic,
    SequentialZfMusic,
    JointClamMusic,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Fft,
        Algorithm::SpatialClamFft,
        Algorithm::JointClamFft,
        Algorithm::Music,
        Algorithm::SpatialClamMusic,
        Algorithm::SequentialZfMusic,
        Algorithm::JointClamMusic,
    ];

    /// Stable machine tag (CLI argument and CSV column value).
    pub fn tag(&self) -> &'static str {
        match self {
            Algorithm::Fft => "fft",
            Algorithm::SpatialClamFft => "spatial-clam-fft",
            Algorithm::JointClamFft => "joint-clam-fft",
            Algorithm::Music => "music",
            Algorithm::SpatialClamMusic => "spatial-clam-music",
            Algorithm::SequentialZfMusic => "sequential-zf-music",
            Algorithm::JointClamMusic => "joint-clam-music",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown algorithm tag \"{s}\"")))
    }
}

/// Parameters entering the closed-form counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityParams {
    /// Total array elements M.
    pub m: u64,
    pub n_sc: u64,
    pub n_sym: u64,
    /// Total spatial FFT bins of the beamforming estimator.
    pub n_fft: u64,
    /// Delay-axis IFFT length.
    pub n_tau: u64,
    /// Doppler-axis FFT length.
    pub n_fd: u64,
    /// Number of targets S.
    pub s: u64,
    /// Number of mapped clutter directions L.
    pub l: u64,
    /// Azimuth scan grid size.
    pub r_phi: u64,
    /// Zenith scan grid size.
    pub r_theta: u64,
}

impl ComplexityParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m", self.m),
            ("n_sc", self.n_sc),
            ("n_sym", self.n_sym),
            ("n_fft", self.n_fft),
            ("n_tau", self.n_tau),
            ("n_fd", self.n_fd),
            ("s", self.s),
            ("l", self.l),
            ("r_phi", self.r_phi),
            ("r_theta", self.r_theta),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!(
                    "complexity parameter {name} must be positive"
                )));
            }
        }
        if self.m <= self.l + self.s {
            return Err(Error::InvalidParameter(format!(
                "array size {} leaves no noise subspace for {} clutter + {} target paths",
                self.m, self.l, self.s
            )));
        }
        Ok(())
    }
}

/// The reference parameter set of the complexity comparison: N_sym = 100,
/// N_sc = N_FFT = N_tau = N_fD = 1024, S = 2, L = 3, r_phi = r_theta = 901,
/// with the element count as the free variable.
pub fn reference_complexity_params(m: u64) -> ComplexityParams {
    ComplexityParams {
        m,
        n_sc: 1024,
        n_sym: 100,
        n_fft: 1024,
        n_tau: 1024,
        n_fd: 1024,
        s: 2,
        l: 3,
        r_phi: 901,
        r_theta: 901,
    }
}

/// Radix-2 transform cost model (1/2) N log2 N.
fn half_log2(n: u64) -> f64 {
    0.5 * n as f64 * (n as f64).log2()
}

/// Closed-form complex-multiplication count of one algorithm.
///
/// Transform lengths are costed with the radix-2 (1/2) N log2 N model;
/// power-of-two lengths (the reference configuration throughout) make every
/// term integral, and the result is exact.
pub fn complexity(algorithm: Algorithm, params: &ComplexityParams) -> Result<u64> {
    params.validate()?;
    let (m, n_sc, n_sym) = (params.m as f64, params.n_sc as f64, params.n_sym as f64);
    let (n_fft, n_tau, n_fd) = (params.n_fft, params.n_tau, params.n_fd);
    let (s, l) = (params.s as f64, params.l as f64);
    let grid = (params.r_phi * params.r_theta) as f64;
    let snapshots = n_sym * n_sc;
    // Shared delay-Doppler front end of the joint algorithms: per-candidate
    // projector build and projection, delay IFFTs, Doppler FFTs, periodogram.
    let joint_front = (l + s - 1.0) * (m + l + s - 1.0).powi(2)
        + snapshots * m * m
        + m * n_sym * half_log2(n_tau)
        + m * (n_tau as f64) * half_log2(n_fd)
        + m * (n_tau as f64) * (n_fd as f64);
    let value = match algorithm {
        Algorithm::Fft => snapshots * (n_fft as f64) + snapshots * half_log2(n_fft),
        Algorithm::SpatialClamFft => {
            snapshots * (n_fft as f64) + snapshots * half_log2(n_fft) + snapshots * m * m
        }
        Algorithm::JointClamFft => {
            s * (joint_front + half_log2(n_fft) + n_fft as f64)
        }
        Algorithm::Music => {
            snapshots * m * m + m.powi(3) + grid * (m + 1.0) * (m - (l + s))
        }
        Algorithm::SpatialClamMusic => {
            2.0 * snapshots * m * m + m.powi(3) + grid * (m + 1.0) * (m - s)
        }
        Algorithm::SequentialZfMusic => {
            let rounds: f64 = (1..=(params.l + params.s))
                .map(|k| 2.0 * k as f64 * (m + k as f64).powi(2))
                .sum();
            m * m * (l + s) * (2.0 * snapshots + m + grid) + rounds
        }
        Algorithm::JointClamMusic => {
            s * (joint_front + m * m + m.powi(3) + grid * (m * m - 1.0))
        }
    };
    Ok(value.round() as u64)
}

/// All seven closed-form counts for one parameter set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityReport {
    pub params: ComplexityParams,
    /// Counts in [`Algorithm::ALL`] order.
    pub counts: Vec<(Algorithm, u64)>,
}

pub fn complexity_report(params: &ComplexityParams) -> Result<ComplexityReport> {
    let counts = Algorithm::ALL
        .into_iter()
        .map(|a| complexity(a, params).map(|c| (a, c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComplexityReport { params: *params, counts })
}

// ---------------------------------------------------------------------------
// Truth association and RMSE
// ---------------------------------------------------------------------------

/// Ground-truth parameters of one target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthTarget {
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    pub delay_s: f64,
    pub doppler_hz: f64,
}

/// One estimate produced by a trial, angles always present.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimateSample {
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    pub delay_s: Option<f64>,
    pub doppler_hz: Option<f64>,
}

/// Per-target absolute errors after association.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetErrors {
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    pub delay_s: Option<f64>,
    pub doppler_hz: Option<f64>,
    /// Set when this entry is an unmatched truth or a surplus estimate,
    /// carrying the penalty on both angle axes.
    pub missed: bool,
}

/// Greedy nearest-neighbor association of estimates to truths in the angle
/// plane (smallest Euclidean distance first, each side used at most once).
///
/// Returns one entry per truth, in truth order, followed by one penalty
/// entry per surplus estimate. Unmatched truths and surplus estimates are
/// both misses: their angle errors are `penalty_deg` and their delay/Doppler
/// errors absent.
pub fn associate(
    estimates: &[EstimateSample],
    truths: &[TruthTarget],
    penalty_deg: f64,
) -> Vec<TargetErrors> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(estimates.len() * truths.len());
    for (e, est) in estimates.iter().enumerate() {
        for (t, truth) in truths.iter().enumerate() {
            let dist = (est.azimuth_deg - truth.azimuth_deg)
                .hypot(est.zenith_deg - truth.zenith_deg);
            pairs.push((dist, e, t));
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("angle distances are finite"));
    let mut estimate_of = vec![None; truths.len()];
    let mut estimate_used = vec![false; estimates.len()];
    for (_, e, t) in pairs {
        if !estimate_used[e] && estimate_of[t].is_none() {
            estimate_used[e] = true;
            estimate_of[t] = Some(e);
        }
    }
    let miss = TargetErrors {
        azimuth_deg: penalty_deg,
        zenith_deg: penalty_deg,
        delay_s: None,
        doppler_hz: None,
        missed: true,
    };
    let mut errors: Vec<TargetErrors> = truths
        .iter()
        .zip(&estimate_of)
        .map(|(truth, matched)| match matched {
            Some(e) => {
                let est = &estimates[*e];
                TargetErrors {
                    azimuth_deg: (est.azimuth_deg - truth.azimuth_deg).abs(),
                    zenith_deg: (est.zenith_deg - truth.zenith_deg).abs(),
                    delay_s: est.delay_s.map(|d| (d - truth.delay_s).abs()),
                    doppler_hz: est.doppler_hz.map(|d| (d - truth.doppler_hz).abs()),
                    missed: false,
                }
            }
            None => miss,
        })
        .collect();
    errors.extend(estimate_used.iter().filter(|used| !**used).map(|_| miss));
    errors
}

/// Estimated quantity an RMSE aggregation runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorQuantity {
    Azimuth,
    Zenith,
    Delay,
    Doppler,
}

impl ErrorQuantity {
    pub const ALL: [ErrorQuantity; 4] = [
        ErrorQuantity::Azimuth,
        ErrorQuantity::Zenith,
        ErrorQuantity::Delay,
        ErrorQuantity::Doppler,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ErrorQuantity::Azimuth => "azimuth_deg",
            ErrorQuantity::Zenith => "zenith_deg",
            ErrorQuantity::Delay => "delay_s",
            ErrorQuantity::Doppler => "doppler_hz",
        }
    }
}

impl fmt::Display for ErrorQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Result of one (method, SNR, trial) run.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// `None` for a noiseless run.
    pub snr_db: Option<f64>,
    pub method: Method,
    /// Associated per-target errors plus surplus-estimate penalties.
    pub errors: Vec<TargetErrors>,
    pub flags: Vec<String>,
}

/// One aggregated row of an RMSE table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseRow {
    pub snr_db: Option<f64>,
    pub n_trials: usize,
    /// Error values entering the aggregate.
    pub n_values: usize,
    /// Missed-target entries among them (angle quantities carry the penalty;
    /// delay/Doppler misses are excluded from the aggregate).
    pub n_missed: usize,
    pub rmse: f64,
    pub median: f64,
}

/// Per-SNR RMSE (and median) of one error quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseTable {
    pub quantity: ErrorQuantity,
    pub rows: Vec<RmseRow>,
}

fn snr_order(a: &Option<f64>, b: &Option<f64>) -> std::cmp::Ordering {
    match (a, b) {
        (None, None) => std::cmp::Ordering::Equal,
        (None, Some(_)) => std::cmp::Ordering::Less,
        (Some(_), None) => std::cmp::Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(y),
    }
}

/// Aggregates trial errors into a per-SNR RMSE table.
///
/// Trials are grouped by SNR (noiseless first, then ascending) and folded in
/// a deterministic order (trial index, then method tag), so the result is
/// invariant under permutation of the input. Angle quantities include miss
/// penalties; delay/Doppler quantities skip entries without a value.
pub fn rmse(trials: &[TrialResult], quantity: ErrorQuantity) -> Result<RmseTable> {
    if trials.is_empty() {
        return Err(Error::InvalidParameter("RMSE of an empty trial set".into()));
    }
    let mut ordered: Vec<&TrialResult> = trials.iter().collect();
    ordered.sort_by(|a, b| {
        snr_order(&a.snr_db, &b.snr_db)
            .then(a.trial.cmp(&b.trial))
            .then(a.method.tag().cmp(b.method.tag()))
    });
    let mut rows: Vec<RmseRow> = Vec::new();
    let mut group: Vec<&TrialResult> = Vec::new();
    let flush = |group: &mut Vec<&TrialResult>, rows: &mut Vec<RmseRow>| {
        if group.is_empty() {
            return;
        }
        let mut values: Vec<f64> = Vec::new();
        let mut n_missed = 0;
        for trial in group.iter() {
            for e in &trial.errors {
                if e.missed {
                    n_missed += 1;
                }
                let value = match quantity {
                    ErrorQuantity::Azimuth => Some(e.azimuth_deg),
                    ErrorQuantity::Zenith => Some(e.zenith_deg),
                    ErrorQuantity::Delay => e.delay_s,
                    ErrorQuantity::Doppler => e.doppler_hz,
                };
                if let Some(v) = value {
                    values.push(v);
                }
            }
        }
        let rmse = if values.is_empty() {
            f64::NAN
        } else {
            (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
        };
        let median = median_of(&mut values);
        rows.push(RmseRow {
            snr_db: group[0].snr_db,
            n_trials: group.len(),
            n_values: values.len(),
            n_missed,
            rmse,
            median,
        });
        group.clear();
    };
    for trial in ordered {
        if group
            .last()
            .is_some_and(|g| snr_order(&g.snr_db, &trial.snr_db) != std::cmp::Ordering::Equal)
        {
            flush(&mut group, &mut rows);
        }
        group.push(trial);
    }
    flush(&mut group, &mut rows);
    Ok(RmseTable { quantity, rows })
}

/// Median of the values (NaN when empty); sorts in place.
pub fn median_of(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------------

/// Estimation method a trial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// FFT beamforming on the raw snapshots, S strongest beams.
    Fft,
    /// MUSIC on the raw covariance with the full path count as model order,
    /// S strongest peaks.
    Music,
    /// Forward-only spatial smoothing, then MUSIC as above.
    SpatialSmoothingMusic,
    /// First-order symbol-domain MTI, then S-source MUSIC.
    MtiMusic,
    /// Path-by-path sequential nulling; the harness reports the S weakest
    /// rounds (the last ones) as the target guesses.
    SequentialZfMusic,
    /// Zero-forcing at the mapped clutter DoAs, then FFT beamforming.
    SpatialClamFft,
    /// Zero-forcing at the mapped clutter DoAs, then S-source MUSIC.
    SpatialClamMusic,
    /// Two-step spatial/delay-Doppler pipeline with FFT re-estimation.
    JointClamFft,
    /// Two-step spatial/delay-Doppler pipeline with MUSIC re-estimation.
    JointClamMusic,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Fft,
        Method::Music,
        Method::SpatialSmoothingMusic,
        Method::MtiMusic,
        Method::SequentialZfMusic,
        Method::SpatialClamFft,
        Method::SpatialClamMusic,
        Method::JointClamFft,
        Method::JointClamMusic,
    ];

    /// Stable machine tag (CLI argument and CSV column value).
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Fft => "fft",
            Method::Music => "music",
            Method::SpatialSmoothingMusic => "spatial-smoothing-music",
            Method::MtiMusic => "mti-music",
            Method::SequentialZfMusic => "sequential-zf-music",
            Method::SpatialClamFft => "spatial-clam-fft",
            Method::SpatialClamMusic => "spatial-clam-music",
            Method::JointClamFft => "joint-clam-fft",
            Method::JointClamMusic => "joint-clam-music",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // The two-step pipeline is commonly abbreviated without the map name.
        match s {
            "joint-music" => return Ok(Method::JointClamMusic),
            "joint-fft" => return Ok(Method::JointClamFft),
            _ => {}
        }
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method tag \"{s}\"")))
    }
}

/// Shared knobs of the trial runner.
#[derive(Debug, Clone)]
pub struct RunnerConfig {
    pub ofdm: OfdmParams,
    /// MUSIC scan step for all spectrum searches.
    pub grid_step_deg: f64,
    /// Golden-section polish radius around grid peaks.
    pub refine_radius_deg: Option<f64>,
    /// Delay-axis transform length of the joint methods.
    pub n_delay: usize,
    /// Doppler-axis transform length of the joint methods.
    pub n_doppler: usize,
    pub dd_grouping: DdGroupConfig,
    pub tolerances: MatchTolerances,
    /// Per-axis spatial FFT length of the beamforming methods.
    pub fft_size: usize,
    /// Subarray of the spatial-smoothing baseline.
    pub smoothing_subarray: [usize; 2],
    /// MTI filter order.
    pub mti_order: usize,
    /// Angle-error charge for a missed target, degrees.
    pub miss_penalty_deg: f64,
}

impl RunnerConfig {
    /// Desk-scale defaults: the 128x32 OFDM profile, a 1-degree scan with
    /// refinement, 5x-oversampled delay-Doppler transforms for that profile.
    pub fn desk() -> Self {
        Self {
            ofdm: OfdmParams::desk(),
            grid_step_deg: 1.0,
            refine_radius_deg: Some(1.0),
            n_delay: 640,
            n_doppler: 160,
            dd_grouping: DdGroupConfig::default(),
            tolerances: MatchTolerances::default(),
            fft_size: 64,
            smoothing_subarray: [6, 6],
            mti_order: 1,
            miss_penalty_deg: 90.0,
        }
    }

    /// Full-scale defaults: the 1024x100 OFDM profile with 5x-oversampled
    /// delay-Doppler transforms, sized for a 32x32 array. The scan stays at
    /// 1 degree with golden-section refinement, which reaches the same
    /// estimate accuracy as a dense grid at a fraction of its cost.
    pub fn full() -> Self {
        Self {
            ofdm: OfdmParams::full(),
            n_delay: 5120,
            n_doppler: 500,
            fft_size: 256,
            smoothing_subarray: [16, 16],
            ..Self::desk()
        }
    }

    fn joint_config(&self, n_targets: usize, doa_method: DoaMethod) -> JointConfig {
        JointConfig {
            n_targets,
            grid_step_deg: self.grid_step_deg,
            refine_radius_deg: self.refine_radius_deg,
            n_delay: self.n_delay,
            n_doppler: self.n_doppler,
            dd_grouping: self.dd_grouping,
            doa_method,
            // Visit every member of the augmented angle set: the iterations
            // that keep a clutter direction are what recover a target the
            // spatial null would otherwise swallow, which is the pipeline's
            // whole advantage for close target/clutter pairs.
            iterate_all: true,
            tolerances: self.tolerances,
            clutter_dopplers: None,
        }
    }
}

/// MUSIC helper of the conventional methods: build the spectrum for the
/// stated model order, keep the `count` strongest peaks, polish genuine ones.
fn music_top(
    snapshots: &nalgebra::DMatrix<num_complex::Complex64>,
    geom: &crate::scene::ArrayGeometry,
    n_sources: usize,
    count: usize,
    config: &RunnerConfig,
    meter: Meter,
) -> Result<(Vec<EstimateSample>, Vec<String>)> {
    let cov = covariance(snapshots, meter)?;
    let mut evaluator = MusicEvaluator::new(&cov, geom, n_sources, None, meter)?;
    let spectrum = evaluator.spectrum(config.grid_step_deg, meter)?;
    let mut samples = Vec::new();
    let mut flags = Vec::new();
    for peak in music_peaks(&spectrum, count) {
        let (az, zen) = match config.refine_radius_deg {
            Some(radius) if !peak.from_padding => {
                let r =
                    refine_music_peak(&mut evaluator, peak.azimuth_deg, peak.zenith_deg, radius, meter);
                (r.azimuth_deg, r.zenith_deg)
            }
            _ => (peak.azimuth_deg, peak.zenith_deg),
        };
        if peak.from_padding {
            flags.push("padded".to_string());
        }
        samples.push(EstimateSample { azimuth_deg: az, zenith_deg: zen, ..Default::default() });
    }
    Ok((samples, flags))
}

/// Raw product of one method on one realization, before truth association.
#[derive(Debug, Clone)]
pub struct MethodRun {
    /// The method's claimed targets.
    pub estimates: Vec<EstimateSample>,
    /// Estimator warnings (padding, sequential failures, short finals).
    pub flags: Vec<String>,
    /// Full staged record set; populated by the two-step methods only.
    pub set: Option<EstimateSet>,
}

/// Runs one method on an already synthesized tensor.
///
/// `total_paths` is the model order available to the full-model baselines;
/// `n_targets` is how many estimates the caller expects back. Every method
/// reports exactly `n_targets` angle estimates through its own ranking
/// (strongest peaks/beams; the last sequential rounds; the two-step
/// pipeline's Final records, which alone carry delay and Doppler), except
/// when a two-step run genuinely resolves fewer.
pub fn run_method(
    tensor: &ReceivedTensor,
    geom: &ArrayGeometry,
    clam_doas: &[(f64, f64)],
    method: Method,
    total_paths: usize,
    n_targets: usize,
    config: &RunnerConfig,
    meter: Meter,
) -> Result<MethodRun> {
    let s = n_targets;
    let mut flags: Vec<String> = Vec::new();
    let mut set: Option<EstimateSet> = None;
    let estimates: Vec<EstimateSample> = match method {
        Method::Fft => {
            let spectrum = fft_doa(tensor.snapshots(), geom, config.fft_size, meter)?;
            fft_doa_peaks(&spectrum, s)
                .into_iter()
                .map(|p| EstimateSample {
                    azimuth_deg: p.azimuth_deg,
                    zenith_deg: p.zenith_deg,
                    ..Default::default()
                })
                .collect()
        }
        Method::Music => {
            let (samples, f) =
                music_top(tensor.snapshots(), geom, total_paths, s, config, meter)?;
            flags.extend(f);
            samples
        }
        Method::SpatialSmoothingMusic => {
            let [sx, sz] = config.smoothing_subarray;
            spatial_smoothing_music(
                tensor.snapshots(),
                geom,
                sx,
                sz,
                total_paths,
                config.grid_step_deg,
                meter,
            )?
            .into_iter()
            .take(s)
            .map(|p| EstimateSample {
                azimuth_deg: p.azimuth_deg,
                zenith_deg: p.zenith_deg,
                ..Default::default()
            })
            .collect()
        }
        Method::MtiMusic => {
            let filter = mti_design(config.mti_order)?;
            let filtered = mti_apply(&filter, tensor).trim_leading_symbols(config.mti_order)?;
            let (samples, f) = music_top(filtered.snapshots(), geom, s, s, config, meter)?;
            flags.extend(f);
            samples
        }
        Method::SequentialZfMusic => {
            let outcome =
                sequential_zf_music(tensor.snapshots(), geom, total_paths, config.grid_step_deg, meter)?;
            if let Some(failure) = outcome.failure {
                flags.push(format!("sequential: {failure}"));
            }
            let skip = outcome.doas.len().saturating_sub(s);
            outcome
                .doas
                .into_iter()
                .skip(skip)
                .map(|(az, zen)| EstimateSample {
                    azimuth_deg: az,
                    zenith_deg: zen,
                    ..Default::default()
                })
                .collect()
        }
        Method::SpatialClamFft => {
            let projector = zf_build(geom, clam_doas, meter)?;
            let projected = zf_apply(&projector, tensor.snapshots(), meter)?;
            let spectrum = fft_doa(&projected, geom, config.fft_size, meter)?;
            fft_doa_peaks(&spectrum, s)
                .into_iter()
                .map(|p| EstimateSample {
                    azimuth_deg: p.azimuth_deg,
                    zenith_deg: p.zenith_deg,
                    ..Default::default()
                })
                .collect()
        }
        Method::SpatialClamMusic => {
            let jc = config.joint_config(s, DoaMethod::Music);
            step1(tensor.snapshots(), clam_doas, geom, &jc, meter)?
                .into_iter()
                .map(|c| {
                    if c.from_padding {
                        flags.push("padded".to_string());
                    }
                    EstimateSample {
                        azimuth_deg: c.azimuth_deg,
                        zenith_deg: c.zenith_deg,
                        ..Default::default()
                    }
                })
                .collect()
        }
        Method::JointClamFft | Method::JointClamMusic => {
            let doa_method = if method == Method::JointClamFft {
                DoaMethod::Fft { fft_size: config.fft_size }
            } else {
                DoaMethod::Music
            };
            let jc = config.joint_config(s, doa_method);
            let candidates = step1(tensor.snapshots(), clam_doas, geom, &jc, meter)?;
            let out = step2(tensor, clam_doas, &candidates, geom, &config.ofdm, &jc, meter)?;
            let mut finals: Vec<EstimateSample> = out
                .records
                .iter()
                .filter(|r| r.stage == Stage::Final)
                .map(|r| EstimateSample {
                    azimuth_deg: r.azimuth_deg,
                    zenith_deg: r.zenith_deg,
                    delay_s: r.delay_s,
                    doppler_hz: r.doppler_hz,
                })
                .collect();
            if finals.len() < s {
                flags.push(format!("finals:{}", finals.len()));
                // Step 2 drops candidates with no delay-Doppler class above
                // the noise floor. The runner still owes S estimates, so the
                // unrepresented Step-1 angles fill the shortfall, strongest
                // first, without claiming a delay or Doppler.
                let tol = config.tolerances.angle_deg;
                for c in &candidates {
                    if finals.len() >= s {
                        break;
                    }
                    let represented = finals.iter().any(|f| {
                        (f.azimuth_deg - c.azimuth_deg).abs() <= tol
                            && (f.zenith_deg - c.zenith_deg).abs() <= tol
                    });
                    if !represented {
                        flags.push("unconfirmed".to_string());
                        finals.push(EstimateSample {
                            azimuth_deg: c.azimuth_deg,
                            zenith_deg: c.zenith_deg,
                            ..Default::default()
                        });
                    }
                }
            }
            set = Some(out);
            finals
        }
    };
    Ok(MethodRun { estimates, flags, set })
}

/// Runs one method on one synthesized realization and scores it against the
/// scene's targets.
///
/// Every method reports exactly S angle estimates through its own ranking
/// (S strongest peaks/beams; the S last sequential rounds; the joint
/// pipeline's Final records, which alone carry delay and Doppler). Scoring
/// associates them to the truth greedily; shortfalls become misses.
pub fn run_trial(
    scene: &Scene,
    clam_doas: &[(f64, f64)],
    method: Method,
    snr_db: Option<f64>,
    seed: u64,
    trial: usize,
    config: &RunnerConfig,
    meter: Meter,
) -> Result<TrialResult> {
    let paths = scene.derive_paths()?;
    let truths: Vec<TruthTarget> = paths
        .iter()
        .filter(|p| p.kind == PathKind::Target)
        .map(|p| TruthTarget {
            azimuth_deg: p.azimuth_deg,
            zenith_deg: p.zenith_deg,
            delay_s: p.delay_s,
            doppler_hz: p.doppler_hz,
        })
        .collect();
    if truths.is_empty() {
        return Err(Error::InvalidParameter(
            "the experiment scene contains no targets to score against".into(),
        ));
    }
    let geom = &scene.array;
    let tensor = synthesize_paths(geom, &paths, &config.ofdm, snr_db, seed)?;
    let run = run_method(
        &tensor,
        geom,
        clam_doas,
        method,
        paths.len(),
        truths.len(),
        config,
        meter,
    )?;
    let errors = associate(&run.estimates, &truths, config.miss_penalty_deg);
    Ok(TrialResult { trial, seed, snr_db, method, errors, flags: run.flags })
}

/// Full Monte Carlo experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Label echoed into the CSV headers.
    pub name: String,
    pub scene: Scene,
    /// Mapped clutter DoAs handed to the CLAM-aided methods.
    pub clam_doas: Vec<(f64, f64)>,
    pub methods: Vec<Method>,
    /// SNR sweep; `None` is a noiseless run.
    pub snr_db: Vec<Option<f64>>,
    /// Trials per (method, SNR) cell.
    pub trials: usize,
    pub master_seed: u64,
    pub runner: RunnerConfig,
}

/// Everything an experiment run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    /// All trial results, ordered by (method, SNR, trial).
    pub trials: Vec<TrialResult>,
    /// Per-trial, per-target error rows.
    pub per_trial_csv: String,
    /// Per-(method, SNR, quantity) RMSE/median rows.
    pub aggregated_csv: String,
}

/// Runs the experiment: all (method, SNR, trial) cells in parallel, the same
/// noise realization per (SNR, trial) across methods (paired comparison),
/// deterministic aggregation and CSV emission.
///
/// A trial that returns an error or panics is recorded as a failed trial —
/// all targets missed, the cause in its flags — and the run continues.
pub fn monte_carlo(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.scene.validate()?;
    config.runner.ofdm.validate()?;
    if config.methods.is_empty() {
        return Err(Error::InvalidParameter("experiment has no methods".into()));
    }
    if config.snr_db.is_empty() {
        return Err(Error::InvalidParameter("experiment has no SNR points".into()));
    }
    if config.trials == 0 {
        return Err(Error::InvalidParameter("experiment has no trials".into()));
    }
    let n_targets = config.scene.path_counts()?.1;
    if n_targets == 0 {
        return Err(Error::InvalidParameter(
            "the experiment scene contains no targets to score against".into(),
        ));
    }
    let mut jobs = Vec::new();
    for (method_rank, &method) in config.methods.iter().enumerate() {
        for (snr_rank, &snr) in config.snr_db.iter().enumerate() {
            for trial in 0..config.trials {
                jobs.push((method_rank, method, snr_rank, snr, trial));
            }
        }
    }
    let trials: Vec<TrialResult> = jobs
        .par_iter()
        .map(|&(_, method, snr_rank, snr, trial)| {
            // Seed depends on the (SNR, trial) cell only, so every method
            // sees the same realization.
            let seed =
                config.master_seed.wrapping_add((snr_rank * config.trials + trial) as u64);
            let outcome = catch_unwind(AssertUnwindSafe(|| {
                run_trial(&config.scene, &config.clam_doas, method, snr, seed, trial, &config.runner, None)
            }));
            let failure = match outcome {
                Ok(Ok(result)) => return result,
                Ok(Err(e)) => format!("error: {e}"),
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "opaque panic payload".to_string());
                    format!("panic: {msg}")
                }
            };
            TrialResult {
                trial,
                seed,
                snr_db: snr,
                method,
                errors: vec![
                    TargetErrors {
                        azimuth_deg: config.runner.miss_penalty_deg,
                        zenith_deg: config.runner.miss_penalty_deg,
                        delay_s: None,
                        doppler_hz: None,
                        missed: true,
                    };
                    n_targets
                ],
                flags: vec![failure],
            }
        })
        .collect();
    let per_trial_csv = per_trial_csv(config, &trials);
    let aggregated_csv = aggregated_csv(config, &trials)?;
    Ok(ExperimentOutput { trials, per_trial_csv, aggregated_csv })
}

/// `None`-aware SNR column value.
fn snr_field(snr: &Option<f64>) -> String {
    match snr {
        Some(v) => format!("{v}"),
        None => "off".to_string(),
    }
}

/// Shared reproducibility header: full config echo, one `#` line per field.
/// The timestamp line is informational and excluded from determinism
/// comparisons.
fn csv_header(config: &ExperimentConfig) -> String {
    let mut h = String::new();
    h.push_str(&format!("# clamsim experiment: {}\n", config.name));
    h.push_str(&format!(
        "# timestamp: {}\n",
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    ));
    h.push_str(&format!("# scene: {} ({})\n", config.scene.name, config.scene.content_hash()));
    h.push_str(&format!(
        "# array: {}x{} at {} wavelengths, carrier {} Hz\n",
        config.scene.array.mx,
        config.scene.array.mz,
        config.scene.array.spacing_over_lambda,
        config.scene.array.carrier_hz
    ));
    let ofdm = &config.runner.ofdm;
    h.push_str(&format!(
        "# ofdm: {} Hz spacing, {} subcarriers, {} symbols, {} s CP\n",
        ofdm.subcarrier_spacing_hz, ofdm.n_subcarriers, ofdm.n_symbols, ofdm.cp_duration_s
    ));
    h.push_str(&format!(
        "# runner: grid_step_deg={} refine_radius_deg={} n_delay={} n_doppler={} fft_size={} smoothing={}x{} mti_order={} miss_penalty_deg={}\n",
        config.runner.grid_step_deg,
        config.runner.refine_radius_deg.map_or("off".to_string(), |r| format!("{r}")),
        config.runner.n_delay,
        config.runner.n_doppler,
        config.runner.fft_size,
        config.runner.smoothing_subarray[0],
        config.runner.smoothing_subarray[1],
        config.runner.mti_order,
        config.runner.miss_penalty_deg
    ));
    h.push_str(&format!(
        "# clam_doas: {}\n",
        config
            .clam_doas
            .iter()
            .map(|(az, zen)| format!("({az},{zen})"))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    h.push_str(&format!(
        "# methods: {}\n",
        config.methods.iter().map(|m| m.tag()).collect::<Vec<_>>().join(" ")
    ));
    h.push_str(&format!(
        "# snr_db: {}\n",
        config.snr_db.iter().map(snr_field).collect::<Vec<_>>().join(" ")
    ));
    h.push_str(&format!("# trials: {}\n", config.trials));
    h.push_str(&format!("# master_seed: {}\n", config.master_seed));
    h
}

fn per_trial_csv(config: &ExperimentConfig, trials: &[TrialResult]) -> String {
    let mut csv = csv_header(config);
    csv.push_str(
        "method,snr_db,trial,seed,target,azimuth_err_deg,zenith_err_deg,delay_err_s,doppler_err_hz,missed,flags\n",
    );
    for t in trials {
        for (i, e) in t.errors.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                t.method.tag(),
                snr_field(&t.snr_db),
                t.trial,
                t.seed,
                i,
                e.azimuth_deg,
                e.zenith_deg,
                e.delay_s.map_or(String::new(), |v| format!("{v}")),
                e.doppler_hz.map_or(String::new(), |v| format!("{v}")),
                e.missed,
                t.flags.join(";").replace(',', ";"),
            ));
        }
    }
    csv
}

fn aggregated_csv(config: &ExperimentConfig, trials: &[TrialResult]) -> Result<String> {
    let mut csv = csv_header(config);
    csv.push_str("method,snr_db,quantity,n_trials,n_values,n_missed,rmse,median\n");
    for &method in &config.methods {
        let subset: Vec<TrialResult> =
            trials.iter().filter(|t| t.method == method).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        for quantity in ErrorQuantity::ALL {
            let table = rmse(&subset, quantity)?;
            for row in table.rows {
                if row.n_values == 0 {
                    continue;
                }
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    method.tag(),
                    snr_field(&row.snr_db),
                    quantity.tag(),
                    row.n_trials,
                    row.n_values,
                    row.n_missed,
                    row.rmse,
                    row.median,
                ));
            }
        }
    }
    Ok(csv)
}
