//! Subcommand implementations.
//!
//! Each function loads and validates its inputs before any compute starts,
//! runs the library, and writes CSV/SVG artifacts with reproducibility
//! headers. All failures surface as [`clamsim::error::Error`], whose message
//! names the violated precondition; `main` maps them to exit code 2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clamsim::clam::{build_estimated, build_geometric, ClamGridSpec, ClamMap, EstimatorConfig};
use clamsim::error::{Error, Result};
use clamsim::estimate::{
    covariance, dd_peaks_and_group, delay_doppler, fft_doa, fft_doa_peaks, music_spectrum,
};
use clamsim::metrics::{
    complexity_report, monte_carlo, reference_complexity_params, run_method, Algorithm,
    ExperimentConfig, Method, MethodRun, RunnerConfig,
};
use clamsim::scene::{PathKind, PathParams, Scene};
use clamsim::suppress::{mti_apply, mti_design, mti_demo_series, zf_apply, zf_build};
use clamsim::synth::{synthesize_paths, write_matrix, OfdmParams, ReceivedTensor};

use crate::artifacts::{
    line_chart, parse_aggregated_csv, polar_scatter, snr_field, write_artifact, Header, Marker,
    PolarSeries, Series,
};

// ---------------------------------------------------------------------------
// scene validate
// ---------------------------------------------------------------------------

/// Loads a scene, resolves its paths and checks every delay against the
/// cyclic prefix of the chosen OFDM profile; prints a one-line summary.
pub fn scene_validate(path: &Path, ofdm: &OfdmParams) -> Result<()> {
    let scene = Scene::load(path)?;
    let paths = scene.derive_paths()?;
    for p in &paths {
        if p.delay_s > ofdm.cp_duration_s {
            return Err(Error::DelayExceedsCyclicPrefix {
                delay_us: p.delay_s * 1e6,
                cp_us: ofdm.cp_duration_s * 1e6,
            });
        }
    }
    let (clutter, targets) = scene.path_counts()?;
    println!(
        "scene `{}` ({}) is valid: {} clutter + {} target paths, {}x{} array",
        scene.name,
        &scene.content_hash()[..12],
        clutter,
        targets,
        scene.array.mx,
        scene.array.mz
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// clam build / lookup
// ---------------------------------------------------------------------------

/// Grid and estimator settings of `clam build`.
pub struct ClamBuildArgs {
    pub scene: PathBuf,
    pub out: PathBuf,
    pub estimated: bool,
    pub origin_m: [f64; 2],
    pub cell_size_m: f64,
    pub nx: usize,
    pub ny: usize,
    pub max_doas: usize,
    pub ofdm: OfdmParams,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub grid_step_deg: f64,
}

/// Builds a clutter angle map and writes it as JSON.
pub fn clam_build(args: &ClamBuildArgs) -> Result<()> {
    let scene = Scene::load(&args.scene)?;
    let grid = ClamGridSpec {
        origin_m: args.origin_m,
        cell_size_m: args.cell_size_m,
        nx: args.nx,
        ny: args.ny,
    };
    let map = if args.estimated {
        let config = EstimatorConfig {
            ofdm: args.ofdm,
            snr_db: args.snr_db,
            seed: args.seed,
            grid_step_deg: args.grid_step_deg,
        };
        build_estimated(&scene, &grid, args.max_doas, &config)?
    } else {
        build_geometric(&scene, &grid, args.max_doas)?
    };
    for warning in &map.warnings {
        eprintln!("warning: {warning}");
    }
    map.save(&args.out)?;
    println!(
        "wrote {} ({} cells, {} DoAs max per cell)",
        args.out.display(),
        map.grid.cell_count(),
        map.max_doas
    );
    Ok(())
}

/// Looks a position up in a map file and prints its DoA list as CSV.
pub fn clam_lookup(map_path: &Path, x_m: f64, y_m: f64) -> Result<()> {
    let map = ClamMap::load(map_path)?;
    let doas = map.lookup(&[x_m, y_m, 0.0])?;
    println!("azimuth_deg,zenith_deg");
    for (az, zen) in doas {
        println!("{az},{zen}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline run
// ---------------------------------------------------------------------------

/// Inputs of one `pipeline run`.
pub struct PipelineArgs {
    pub scene: PathBuf,
    pub clam: Option<PathBuf>,
    pub method: Method,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub runner: RunnerConfig,
    pub out_dir: PathBuf,
    /// Also write the spatial projector in the binary matrix format here.
    pub dump_projector: Option<PathBuf>,
}

/// Runs one method on one realization and writes `estimates.csv` plus, for
/// methods with a single canonical spatial scan, `spectrum.csv`.
pub fn pipeline_run(args: &PipelineArgs) -> Result<()> {
    let scene = Scene::load(&args.scene)?;
    let paths = scene.derive_paths()?;
    let n_targets = paths.iter().filter(|p| p.kind == PathKind::Target).count();
    if n_targets == 0 {
        return Err(Error::InvalidParameter(
            "the pipeline scene contains no targets to estimate".into(),
        ));
    }
    let clam_doas = resolve_clam_doas(&scene, &paths, args.clam.as_deref())?;
    if let Some(path) = &args.dump_projector {
        let projects = matches!(
            args.method,
            Method::SpatialClamFft
                | Method::SpatialClamMusic
                | Method::JointClamFft
                | Method::JointClamMusic
        );
        if !projects {
            return Err(Error::InvalidParameter(format!(
                "method {} applies no clutter-angle projector to dump",
                args.method
            )));
        }
        let projector = zf_build(&scene.array, &clam_doas, None)?;
        let mut bytes = Vec::new();
        write_matrix(&mut bytes, projector.w_bar())?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
        println!("wrote {}", path.display());
    }
    let tensor = synthesize_paths(&scene.array, &paths, &args.runner.ofdm, args.snr_db, args.seed)?;
    let run = run_method(
        &tensor,
        &scene.array,
        &clam_doas,
        args.method,
        paths.len(),
        n_targets,
        &args.runner,
        None,
    )?;

    let command = format!(
        "pipeline run --scene {} --method {} --snr {} --seed {}",
        args.scene.display(),
        args.method,
        snr_field(args.snr_db),
        args.seed
    );
    let mut header = Header::new(&command)
        .field("scene", format!("{} ({})", scene.name, scene.content_hash()))
        .field(
            "clam_doas",
            clam_doas.iter().map(|(a, z)| format!("({a},{z})")).collect::<Vec<_>>().join(" "),
        )
        .field("ofdm", ofdm_field(&args.runner.ofdm))
        .field("runner", runner_field(&args.runner));
    if !run.flags.is_empty() {
        header = header.field("flags", run.flags.join("; "));
    }
    if let Some(set) = &run.set {
        for diagnostic in &set.diagnostics {
            header = header.field("diagnostic", diagnostic);
        }
    }
    write_artifact(&args.out_dir.join("estimates.csv"), &estimates_csv(&header, &run))?;

    match spectrum_csv(&tensor, &scene, &paths, &clam_doas, args.method, &args.runner, &header)? {
        Some(csv) => write_artifact(&args.out_dir.join("spectrum.csv"), &csv)?,
        None => println!(
            "note: {} scans per-round spectra; no single spectrum.csv is written",
            args.method
        ),
    }
    Ok(())
}

/// Clutter DoAs for the CLAM-aided methods: a map lookup at the scene's UE
/// position when a map file is given, the scene's true clutter DoAs
/// otherwise.
fn resolve_clam_doas(
    scene: &Scene,
    paths: &[PathParams],
    map_path: Option<&Path>,
) -> Result<Vec<(f64, f64)>> {
    match map_path {
        Some(path) => Ok(ClamMap::load(path)?.lookup(&scene.ue_position_m)?.to_vec()),
        None => Ok(paths
            .iter()
            .filter(|p| p.kind == PathKind::Clutter)
            .map(|p| (p.azimuth_deg, p.zenith_deg))
            .collect()),
    }
}

/// Renders the staged estimate table. Two-step methods report their full
/// record set; the others report final rows only.
fn estimates_csv(header: &Header, run: &MethodRun) -> String {
    let mut csv = header.render();
    csv.push_str("stage,azimuth_deg,zenith_deg,delay_us,doppler_hz,power,flags,provenance\n");
    match &run.set {
        Some(set) => {
            for r in &set.records {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    r.stage,
                    r.azimuth_deg,
                    r.zenith_deg,
                    r.delay_s.map_or(String::new(), |d| format!("{}", d * 1e6)),
                    r.doppler_hz.map_or(String::new(), |f| format!("{f}")),
                    r.power,
                    r.flags.join(";"),
                    r.provenance.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
                );
            }
        }
        None => {
            for e in &run.estimates {
                let _ = writeln!(
                    csv,
                    "final,{},{},{},{},,,",
                    e.azimuth_deg,
                    e.zenith_deg,
                    e.delay_s.map_or(String::new(), |d| format!("{}", d * 1e6)),
                    e.doppler_hz.map_or(String::new(), |f| format!("{f}")),
                );
            }
        }
    }
    csv
}

/// The spatial spectrum a method scans, as CSV. FFT methods dump their
/// beamforming power over all bin pairs (angle columns empty outside the
/// visible region); MUSIC methods dump the scanned pseudo-spectrum. The
/// multi-round baselines (spatial smoothing, sequential ZF) have no single
/// canonical scan and return `None`.
fn spectrum_csv(
    tensor: &ReceivedTensor,
    scene: &Scene,
    paths: &[PathParams],
    clam_doas: &[(f64, f64)],
    method: Method,
    runner: &RunnerConfig,
    header: &Header,
) -> Result<Option<String>> {
    let geom = &scene.array;
    let n_targets = paths.iter().filter(|p| p.kind == PathKind::Target).count();
    let mut csv = header.render();
    match method {
        Method::Fft | Method::SpatialClamFft | Method::JointClamFft => {
            let spectrum = if method == Method::Fft {
                fft_doa(tensor.snapshots(), geom, runner.fft_size, None)?
            } else {
                let projector = zf_build(geom, clam_doas, None)?;
                let snapshots = zf_apply(&projector, tensor.snapshots(), None)?;
                fft_doa(&snapshots, geom, runner.fft_size, None)?
            };
            csv.push_str("kx,kz,freq_x,freq_z,azimuth_deg,zenith_deg,power\n");
            for kx in 0..spectrum.freq_x.len() {
                for kz in 0..spectrum.freq_z.len() {
                    let angles = spectrum
                        .angles_at(kx, kz)
                        .map_or(",".to_string(), |(az, zen)| format!("{az},{zen}"));
                    let _ = writeln!(
                        csv,
                        "{kx},{kz},{},{},{angles},{}",
                        spectrum.freq_x[kx],
                        spectrum.freq_z[kz],
                        spectrum.power[(kx, kz)]
                    );
                }
            }
        }
        Method::Music | Method::MtiMusic | Method::SpatialClamMusic | Method::JointClamMusic => {
            let spectrum = match method {
                Method::Music => {
                    let cov = covariance(tensor.snapshots(), None)?;
                    music_spectrum(&cov, paths.len(), geom, runner.grid_step_deg, None, None)?
                }
                Method::MtiMusic => {
                    let filter = mti_design(runner.mti_order)?;
                    let filtered =
                        mti_apply(&filter, tensor).trim_leading_symbols(runner.mti_order)?;
                    let cov = covariance(filtered.snapshots(), None)?;
                    music_spectrum(&cov, n_targets, geom, runner.grid_step_deg, None, None)?
                }
                _ => {
                    let projector = zf_build(geom, clam_doas, None)?;
                    let snapshots = zf_apply(&projector, tensor.snapshots(), None)?;
                    let cov = covariance(&snapshots, None)?;
                    music_spectrum(
                        &cov,
                        n_targets,
                        geom,
                        runner.grid_step_deg,
                        Some(&projector),
                        None,
                    )?
                }
            };
            csv.push_str("azimuth_deg,zenith_deg,value\n");
            for (i, az) in spectrum.azimuth_deg.iter().enumerate() {
                for (j, zen) in spectrum.zenith_deg.iter().enumerate() {
                    let _ = writeln!(csv, "{az},{zen},{}", spectrum.values[(i, j)]);
                }
            }
        }
        Method::SpatialSmoothingMusic | Method::SequentialZfMusic => return Ok(None),
    }
    Ok(Some(csv))
}

// ---------------------------------------------------------------------------
// experiment run
// ---------------------------------------------------------------------------

/// On-disk experiment description (JSON). Paths resolve relative to the spec
/// file's directory; `null` entries in `snr_db` mean noiseless; omitted
/// runner fields keep the profile defaults.
#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSpec {
    name: String,
    scene: PathBuf,
    #[serde(default)]
    clam: Option<PathBuf>,
    #[serde(default)]
    profile: SpecProfile,
    methods: Vec<String>,
    snr_db: Vec<Option<f64>>,
    trials: usize,
    master_seed: u64,
    #[serde(default)]
    grid_step_deg: Option<f64>,
    #[serde(default)]
    refine_radius_deg: Option<f64>,
    #[serde(default)]
    n_delay: Option<usize>,
    #[serde(default)]
    n_doppler: Option<usize>,
    #[serde(default)]
    fft_size: Option<usize>,
    #[serde(default)]
    smoothing_subarray: Option<[usize; 2]>,
    #[serde(default)]
    mti_order: Option<usize>,
    #[serde(default)]
    noise_margin_db: Option<f64>,
}

/// OFDM/runner scale named in a spec file.
#[derive(Debug, Clone, Copy, Default, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
enum SpecProfile {
    #[default]
    Desk,
    Full,
}

/// Runs a Monte Carlo experiment from a spec file and writes the per-trial
/// and aggregated CSVs.
pub fn experiment_run(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: ExperimentSpec = serde_json::from_str(&text)?;
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let scene = Scene::load(base.join(&spec.scene))?;
    let paths = scene.derive_paths()?;
    let clam_doas = resolve_clam_doas(
        &scene,
        &paths,
        spec.clam.as_ref().map(|p| base.join(p)).as_deref(),
    )?;
    let mut runner = match spec.profile {
        SpecProfile::Desk => RunnerConfig::desk(),
        SpecProfile::Full => RunnerConfig::full(),
    };
    if let Some(v) = spec.grid_step_deg {
        runner.grid_step_deg = v;
    }
    if let Some(v) = spec.refine_radius_deg {
        runner.refine_radius_deg = Some(v);
    }
    if let Some(v) = spec.n_delay {
        runner.n_delay = v;
    }
    if let Some(v) = spec.n_doppler {
        runner.n_doppler = v;
    }
    if let Some(v) = spec.fft_size {
        runner.fft_size = v;
    }
    if let Some(v) = spec.smoothing_subarray {
        runner.smoothing_subarray = v;
    }
    if let Some(v) = spec.mti_order {
        runner.mti_order = v;
    }
    if let Some(v) = spec.noise_margin_db {
        runner.dd_grouping.noise_margin_db = v;
    }
    let methods: Vec<Method> =
        spec.methods.iter().map(|tag| tag.parse()).collect::<Result<_>>()?;
    let config = ExperimentConfig {
        name: spec.name.clone(),
        scene,
        clam_doas,
        methods,
        snr_db: spec.snr_db.clone(),
        trials: spec.trials,
        master_seed: spec.master_seed,
        runner,
    };
    let output = monte_carlo(&config)?;
    write_artifact(&out_dir.join(format!("{}_trials.csv", spec.name)), &output.per_trial_csv)?;
    write_artifact(&out_dir.join(format!("{}_rmse.csv", spec.name)), &output.aggregated_csv)?;
    println!(
        "{} trials over {} methods x {} SNR points",
        output.trials.len(),
        config.methods.len(),
        config.snr_db.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// complexity table
// ---------------------------------------------------------------------------

/// Complex-multiplication counts for each algorithm at the reference
/// parameters, one row per algorithm and one column per array size.
pub fn complexity_table(sizes: &[u64], out: Option<&Path>) -> Result<String> {
    let reports: Vec<_> = sizes
        .iter()
        .map(|&m| complexity_report(&reference_complexity_params(m)))
        .collect::<Result<_>>()?;
    let params = reference_complexity_params(sizes[0]);
    let command = format!(
        "complexity table --m {}",
        sizes.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
    );
    let mut csv = Header::new(&command)
        .field(
            "reference",
            format!(
                "n_sc={} n_sym={} n_fft={} n_tau={} n_fd={} s={} l={} r_phi={} r_theta={}",
                params.n_sc,
                params.n_sym,
                params.n_fft,
                params.n_tau,
                params.n_fd,
                params.s,
                params.l,
                params.r_phi,
                params.r_theta
            ),
        )
        .render();
    let _ = writeln!(
        csv,
        "algorithm,{}",
        sizes.iter().map(|m| format!("m{m}")).collect::<Vec<_>>().join(",")
    );
    for (row, algorithm) in Algorithm::ALL.into_iter().enumerate() {
        let counts: Vec<String> =
            reports.iter().map(|r| r.counts[row].1.to_string()).collect();
        let _ = writeln!(csv, "{algorithm},{}", counts.join(","));
    }
    match out {
        Some(path) => write_artifact(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(csv)
}

// ---------------------------------------------------------------------------
// mti demo
// ---------------------------------------------------------------------------

/// Emits the pulse-canceller demonstration series (time-domain input/output
/// plus spectra and the filter response) as one long-form CSV.
pub fn mti_demo(order: usize, out_dir: &Path) -> Result<()> {
    let series = mti_demo_series(order)?;
    let mut csv = Header::new(&format!("mti demo --order {order}"))
        .field("period_s", series.period_s)
        .field("doppler_hz", series.doppler_hz)
        .render();
    csv.push_str("series,x,value\n");
    let mut dump = |name: &str, xs: &[f64], ys: &[f64]| {
        for (x, y) in xs.iter().zip(ys) {
            let _ = writeln!(csv, "{name},{x},{y}");
        }
    };
    dump("input_abs", &series.time_s, &series.input_abs);
    dump("output_abs", &series.time_s, &series.output_abs);
    dump("input_spectrum_db", &series.freq_hz, &series.input_spectrum_db);
    dump("output_spectrum_db", &series.freq_hz, &series.output_spectrum_db);
    dump("response_abs", &series.freq_hz, &series.response_abs);
    write_artifact(&out_dir.join("mti_demo.csv"), &csv)
}

// ---------------------------------------------------------------------------
// plotdata
// ---------------------------------------------------------------------------

/// Error statistic column of the aggregated CSV to plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Rmse,
    Median,
}

impl Statistic {
    fn name(self) -> &'static str {
        match self {
            Statistic::Rmse => "rmse",
            Statistic::Median => "median",
        }
    }
}

/// Reshapes two single-target experiments (fast / slow) into error-vs-SNR
/// series for the Doppler-suppression comparison figure.
pub fn plotdata_fig7(
    fast: &Path,
    slow: &Path,
    quantity: &str,
    statistic: Statistic,
    out_dir: &Path,
) -> Result<()> {
    let mut series = Vec::new();
    for (label, path) in [("fast", fast), ("slow", slow)] {
        for s in error_series(path, quantity, statistic)? {
            series.push(Series { label: format!("{} ({label})", s.label), points: s.points });
        }
    }
    let header = Header::new(&format!(
        "plotdata fig7 --fast {} --slow {} --quantity {quantity} --statistic {}",
        fast.display(),
        slow.display(),
        statistic.name()
    ));
    write_series(&header, &series, quantity, statistic, "fig7", out_dir)
}

/// Reshapes one experiment into error-vs-SNR series, one per method.
pub fn plotdata_fig8(
    experiment: &Path,
    quantity: &str,
    statistic: Statistic,
    out_dir: &Path,
) -> Result<()> {
    let series = error_series(experiment, quantity, statistic)?;
    let header = Header::new(&format!(
        "plotdata fig8 --experiment {} --quantity {quantity} --statistic {}",
        experiment.display(),
        statistic.name()
    ));
    write_series(&header, &series, quantity, statistic, "fig8", out_dir)
}

/// Error-vs-SNR points per method for one quantity, noiseless rows skipped
/// (they have no position on the SNR axis).
fn error_series(path: &Path, quantity: &str, statistic: Statistic) -> Result<Vec<Series>> {
    let rows = parse_aggregated_csv(path)?;
    let mut methods: Vec<String> = Vec::new();
    for row in &rows {
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
    }
    let series: Vec<Series> = methods
        .into_iter()
        .map(|method| {
            let mut points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.method == method && r.quantity == quantity)
                .filter_map(|r| {
                    let value = match statistic {
                        Statistic::Rmse => r.rmse,
                        Statistic::Median => r.median,
                    };
                    r.snr_db.map(|snr| (snr, value))
                })
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: method, points }
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if series.is_empty() {
        return Err(Error::MalformedArtifact {
            kind: "aggregated experiment CSV",
            detail: format!(
                "{}: no finite-SNR rows for quantity {quantity:?}",
                path.display()
            ),
        });
    }
    Ok(series)
}

/// Writes a series CSV and its log-scale line chart.
fn write_series(
    header: &Header,
    series: &[Series],
    quantity: &str,
    statistic: Statistic,
    stem: &str,
    out_dir: &Path,
) -> Result<()> {
    let mut csv = header.render();
    let _ = writeln!(csv, "series,snr_db,{}", statistic.name());
    for s in series {
        for (snr, value) in &s.points {
            let _ = writeln!(csv, "{},{snr},{value}", s.label);
        }
    }
    write_artifact(&out_dir.join(format!("{stem}.csv")), &csv)?;
    let svg = line_chart(
        &format!("{quantity} {} vs SNR", statistic.name()),
        "SNR (dB)",
        &format!("{} ({})", statistic.name(), quantity_unit(quantity)),
        series,
        true,
    );
    write_artifact(&out_dir.join(format!("{stem}.svg")), &svg)
}

fn quantity_unit(quantity: &str) -> &'static str {
    match quantity {
        "azimuth_deg" | "zenith_deg" => "deg",
        "delay_s" => "s",
        "doppler_hz" => "Hz",
        _ => "",
    }
}

/// Inputs of the polar delay-azimuth export.
pub struct Fig10Args {
    pub scene: PathBuf,
    pub clam: Option<PathBuf>,
    pub snr_db: Option<f64>,
    pub runs: usize,
    pub seed: u64,
    pub runner: RunnerConfig,
    pub out_dir: PathBuf,
}

/// Runs the two-step pipeline and the plain 2D-FFT baseline over independent
/// realizations and writes each target estimate as a polar (azimuth, delay)
/// point, next to the ground-truth coordinates.
///
/// The baseline estimates angle and delay separately (spatial FFT beams,
/// delay-Doppler periodogram classes over all paths), so its per-target point
/// pairs the azimuth and the delay estimates nearest to that target's truth,
/// each estimate used once.
pub fn plotdata_fig10(args: &Fig10Args) -> Result<()> {
    if args.runs == 0 {
        return Err(Error::InvalidParameter("fig10 needs at least one run".into()));
    }
    let scene = Scene::load(&args.scene)?;
    let paths = scene.derive_paths()?;
    let truths: Vec<&PathParams> =
        paths.iter().filter(|p| p.kind == PathKind::Target).collect();
    if truths.is_empty() {
        return Err(Error::InvalidParameter(
            "the fig10 scene contains no targets to plot".into(),
        ));
    }
    let clam_doas = resolve_clam_doas(&scene, &paths, args.clam.as_deref())?;
    let geom = &scene.array;
    let runner = &args.runner;

    let mut joint_points: Vec<(usize, f64, f64)> = Vec::new();
    let mut fft_points: Vec<(usize, f64, f64)> = Vec::new();
    for run in 0..args.runs {
        let seed = args.seed.wrapping_add(run as u64);
        let tensor = synthesize_paths(geom, &paths, &runner.ofdm, args.snr_db, seed)?;
        let joint = run_method(
            &tensor,
            geom,
            &clam_doas,
            Method::JointClamMusic,
            paths.len(),
            truths.len(),
            runner,
            None,
        )?;
        for e in &joint.estimates {
            if let Some(delay) = e.delay_s {
                joint_points.push((run, e.azimuth_deg, delay * 1e6));
            }
        }

        let beams = fft_doa_peaks(&fft_doa(tensor.snapshots(), geom, runner.fft_size, None)?, paths.len());
        let azimuths: Vec<f64> = beams.iter().map(|p| p.azimuth_deg).collect();
        let spectrum =
            delay_doppler(&tensor, &runner.ofdm, runner.n_delay, runner.n_doppler, None)?;
        let delays_us: Vec<f64> = dd_peaks_and_group(&spectrum, &runner.dd_grouping)?
            .iter()
            .map(|c| c.delay_s * 1e6)
            .collect();
        let az_picks = nearest_per_truth(
            &truths.iter().map(|t| t.azimuth_deg).collect::<Vec<_>>(),
            &azimuths,
        );
        let delay_picks = nearest_per_truth(
            &truths.iter().map(|t| t.delay_s * 1e6).collect::<Vec<_>>(),
            &delays_us,
        );
        for (t, (az, delay)) in az_picks.into_iter().zip(delay_picks).enumerate() {
            if let (Some(az), Some(delay)) = (az, delay) {
                fft_points.push((run, az, delay));
            } else {
                eprintln!("warning: run {run} produced no 2D-FFT estimate for target {t}");
            }
        }
    }

    let command = format!(
        "plotdata fig10 --scene {} --snr {} --runs {} --seed {}",
        args.scene.display(),
        snr_field(args.snr_db),
        args.runs,
        args.seed
    );
    let header = Header::new(&command)
        .field("scene", format!("{} ({})", scene.name, scene.content_hash()))
        .field(
            "clam_doas",
            clam_doas.iter().map(|(a, z)| format!("({a},{z})")).collect::<Vec<_>>().join(" "),
        )
        .field("ofdm", ofdm_field(&runner.ofdm))
        .field("runner", runner_field(runner));
    let mut csv = header.render();
    csv.push_str("series,run,azimuth_deg,delay_us\n");
    for t in &truths {
        let _ = writeln!(csv, "truth,,{},{}", t.azimuth_deg, t.delay_s * 1e6);
    }
    for (run, az, delay) in &joint_points {
        let _ = writeln!(csv, "joint-clam-music,{run},{az},{delay}");
    }
    for (run, az, delay) in &fft_points {
        let _ = writeln!(csv, "fft,{run},{az},{delay}");
    }
    write_artifact(&args.out_dir.join("fig10.csv"), &csv)?;

    let svg = polar_scatter(
        "Delay-azimuth estimates",
        "delay (us)",
        &[
            PolarSeries {
                label: "truth".into(),
                marker: Marker::Cross,
                points: truths.iter().map(|t| (t.azimuth_deg, t.delay_s * 1e6)).collect(),
            },
            PolarSeries {
                label: "joint-clam-music".into(),
                marker: Marker::Circle,
                points: joint_points.iter().map(|&(_, az, d)| (az, d)).collect(),
            },
            PolarSeries {
                label: "fft".into(),
                marker: Marker::Circle,
                points: fft_points.iter().map(|&(_, az, d)| (az, d)).collect(),
            },
        ],
    );
    write_artifact(&args.out_dir.join("fig10.svg"), &svg)
}

/// For each truth value, the unused estimate nearest to it (globally nearest
/// pairs claimed first); `None` when the estimates run out.
fn nearest_per_truth(truths: &[f64], estimates: &[f64]) -> Vec<Option<f64>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (t, &truth) in truths.iter().enumerate() {
        for (e, &est) in estimates.iter().enumerate() {
            pairs.push(((truth - est).abs(), t, e));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut picked = vec![None; truths.len()];
    let mut used = vec![false; estimates.len()];
    for (_, t, e) in pairs {
        if picked[t].is_none() && !used[e] {
            picked[t] = Some(estimates[e]);
            used[e] = true;
        }
    }
    picked
}

// ---------------------------------------------------------------------------
// shared field formatting
// ---------------------------------------------------------------------------

fn ofdm_field(ofdm: &OfdmParams) -> String {
    format!(
        "{} Hz spacing, {} subcarriers, {} symbols, {} s CP",
        ofdm.subcarrier_spacing_hz, ofdm.n_subcarriers, ofdm.n_symbols, ofdm.cp_duration_s
    )
}

fn runner_field(runner: &RunnerConfig) -> String {
    format!(
        "grid_step_deg={} refine_radius_deg={} n_delay={} n_doppler={} fft_size={} smoothing={}x{} mti_order={} noise_margin_db={}",
        runner.grid_step_deg,
        runner.refine_radius_deg.map_or("off".to_string(), |r| format!("{r}")),
        runner.n_delay,
        runner.n_doppler,
        runner.fft_size,
        runner.smoothing_subarray[0],
        runner.smoothing_subarray[1],
        runner.mti_order,
        runner.dd_grouping.noise_margin_db
    )
}
