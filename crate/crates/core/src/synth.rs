//! Received-signal synthesis for the bi-static OFDM link.
//!
//! After demodulation and known-data division, the contribution of path k to
//! antenna m, subcarrier n and symbol gamma is
//!
//! ```text
//! Y(m, n, gamma) = sum_k beta_k * alpha_k[m]
//!                  * exp(-j 2 pi n df tau_k)
//!                  * exp(+j 2 pi f_Dk (gamma T_s + T_cp))
//! ```
//!
//! with `T_s = T_cp + 1/df` the full symbol duration. The tensor is stored so
//! that viewing it as an `M x (N_sc * N_sym)` snapshot matrix (column
//! `p = gamma * N_sc + n`) is a zero-copy reinterpretation.

use std::io::{BufRead, Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scene::{PathParams, Scene};

/// OFDM numerology of the sensing link.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OfdmParams {
    /// Subcarrier spacing in Hz.
    pub subcarrier_spacing_hz: f64,
    /// Number of subcarriers carrying data.
    pub n_subcarriers: usize,
    /// Number of OFDM symbols in the sensing frame.
    pub n_symbols: usize,
    /// Cyclic-prefix duration in seconds.
    pub cp_duration_s: f64,
}

impl OfdmParams {
    /// Desk-scale numerology used by fast experiments: 128 x 32 frame.
    pub fn desk() -> Self {
        Self { subcarrier_spacing_hz: 30.0e3, n_subcarriers: 128, n_symbols: 32, cp_duration_s: 9.375e-6 }
    }

    /// Full-scale numerology: 1024 subcarriers, 100 symbols, 9.375 us CP
    /// (288 samples at the 30.72 MHz sampling rate).
    pub fn full() -> Self {
        Self { subcarrier_spacing_hz: 30.0e3, n_subcarriers: 1024, n_symbols: 100, cp_duration_s: 9.375e-6 }
    }

    /// Total OFDM symbol duration T_s = T_cp + 1/df in seconds.
    pub fn symbol_duration_s(&self) -> f64 {
        self.cp_duration_s + 1.0 / self.subcarrier_spacing_hz
    }

    /// Checks the numerology invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.subcarrier_spacing_hz > 0.0) || !(self.cp_duration_s > 0.0) {
            return Err(Error::InvalidParameter(
                "subcarrier spacing and CP duration must be positive".into(),
            ));
        }
        if self.n_subcarriers == 0 || self.n_symbols == 0 {
            return Err(Error::InvalidParameter(
                "frame must contain at least one subcarrier and one symbol".into(),
            ));
        }
        Ok(())
    }
}

/// Post-demodulation data tensor of one sensing frame.
///
/// Internally a column-major `M x (N_sc * N_sym)` matrix whose column
/// `p = gamma * N_sc + n` holds the antenna snapshot of subcarrier `n` in
/// symbol `gamma`; the tensor and snapshot views share storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedTensor {
    data: DMatrix<Complex64>,
    n_elements: usize,
    n_subcarriers: usize,
    n_symbols: usize,
}

impl ReceivedTensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(n_elements: usize, n_subcarriers: usize, n_symbols: usize) -> Self {
        Self {
            data: DMatrix::zeros(n_elements, n_subcarriers * n_symbols),
            n_elements,
            n_subcarriers,
            n_symbols,
        }
    }

    /// Reassembles a tensor from its snapshot matrix (inverse reshape).
    pub fn from_snapshots(
        snapshots: DMatrix<Complex64>,
        n_subcarriers: usize,
        n_symbols: usize,
    ) -> Result<Self> {
        if snapshots.ncols() != n_subcarriers * n_symbols {
            return Err(Error::DimensionMismatch(format!(
                "snapshot matrix has {} columns, expected {} * {}",
                snapshots.ncols(),
                n_subcarriers,
                n_symbols
            )));
        }
        Ok(Self { n_elements: snapshots.nrows(), data: snapshots, n_subcarriers, n_symbols })
    }

    /// Tensor shape as (M, N_sc, N_sym).
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_elements, self.n_subcarriers, self.n_symbols)
    }

    /// Element (antenna m, subcarrier n, symbol gamma).
    #[inline]
    pub fn entry(&self, m: usize, subcarrier: usize, symbol: usize) -> Complex64 {
        self.data[(m, symbol * self.n_subcarriers + subcarrier)]
    }

    /// Mutable element access (antenna m, subcarrier n, symbol gamma).
    #[inline]
    pub fn entry_mut(&mut self, m: usize, subcarrier: usize, symbol: usize) -> &mut Complex64 {
        &mut self.data[(m, symbol * self.n_subcarriers + subcarrier)]
    }

    /// Snapshot-matrix view: M x (N_sc * N_sym), column p = gamma * N_sc + n.
    pub fn snapshots(&self) -> &DMatrix<Complex64> {
        &self.data
    }

    /// Consumes the tensor, yielding the snapshot matrix without copying.
    pub fn into_snapshots(self) -> DMatrix<Complex64> {
        self.data
    }

    /// Total energy (squared Frobenius norm) of the tensor.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Copy of the tensor without its first `count` symbols.
    ///
    /// Filters with an N-symbol memory leave partial sums in the first N
    /// output symbols; estimation stages drop them with this helper.
    pub fn trim_leading_symbols(&self, count: usize) -> Result<Self> {
        if count >= self.n_symbols {
            return Err(Error::InvalidParameter(format!(
                "cannot trim {count} of {} symbols",
                self.n_symbols
            )));
        }
        let kept = self.n_symbols - count;
        let data = DMatrix::from(self.data.columns(count * self.n_subcarriers, kept * self.n_subcarriers));
        Ok(Self { data, n_elements: self.n_elements, n_subcarriers: self.n_subcarriers, n_symbols: kept })
    }

    /// Borrowed view of one symbol's M x N_sc block.
    pub(crate) fn symbol_block(&self, symbol: usize) -> nalgebra::DMatrixView<'_, Complex64> {
        self.data.columns(symbol * self.n_subcarriers, self.n_subcarriers)
    }

    /// Mutable view of one symbol's M x N_sc block.
    pub(crate) fn symbol_block_mut(&mut self, symbol: usize) -> nalgebra::DMatrixViewMut<'_, Complex64> {
        self.data.columns_mut(symbol * self.n_subcarriers, self.n_subcarriers)
    }

    /// Dumps the tensor to the flat binary format.
    ///
    /// One ASCII header line `cxtensor 1 <M> <N_sc> <N_sym>` is followed by
    /// `2 * M * N_sc * N_sym` little-endian IEEE-754 doubles, interleaved
    /// re/im in storage order: antenna index fastest, then subcarrier, then
    /// symbol.
    pub fn write_binary(&self, writer: &mut impl Write) -> Result<()> {
        writeln!(
            writer,
            "cxtensor 1 {} {} {}",
            self.n_elements, self.n_subcarriers, self.n_symbols
        )?;
        write_complex_payload(writer, self.data.as_slice())
    }

    /// Parses a tensor from the flat binary format of [`write_binary`].
    pub fn read_binary(reader: &mut impl BufRead) -> Result<Self> {
        let dims = read_binary_header(reader, "cxtensor", 3)?;
        let (m, n_sc, n_sym) = (dims[0], dims[1], dims[2]);
        let entries = m
            .checked_mul(n_sc)
            .and_then(|v| v.checked_mul(n_sym))
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::MalformedArtifact {
                kind: "tensor dump",
                detail: format!("unusable shape {m} x {n_sc} x {n_sym}"),
            })?;
        let data = DMatrix::from_vec(m, n_sc * n_sym, read_complex_payload(reader, entries)?);
        Self::from_snapshots(data, n_sc, n_sym)
    }
}

/// Dumps a complex matrix to the flat binary format.
///
/// One ASCII header line `cxmatrix 1 <rows> <cols>` is followed by the
/// column-major entries as little-endian interleaved re/im doubles; the
/// payload encoding matches [`ReceivedTensor::write_binary`].
pub fn write_matrix(writer: &mut impl Write, matrix: &DMatrix<Complex64>) -> Result<()> {
    writeln!(writer, "cxmatrix 1 {} {}", matrix.nrows(), matrix.ncols())?;
    write_complex_payload(writer, matrix.as_slice())
}

/// Parses a complex matrix from the flat binary format of [`write_matrix`].
pub fn read_matrix(reader: &mut impl BufRead) -> Result<DMatrix<Complex64>> {
    let dims = read_binary_header(reader, "cxmatrix", 2)?;
    let entries = dims[0]
        .checked_mul(dims[1])
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::MalformedArtifact {
            kind: "matrix dump",
            detail: format!("unusable shape {} x {}", dims[0], dims[1]),
        })?;
    Ok(DMatrix::from_vec(dims[0], dims[1], read_complex_payload(reader, entries)?))
}

/// Writes the interleaved re/im payload of a complex slice.
fn write_complex_payload(writer: &mut impl Write, values: &[Complex64]) -> Result<()> {
    let mut buffer = Vec::with_capacity(values.len() * 16);
    for value in values {
        buffer.extend_from_slice(&value.re.to_le_bytes());
        buffer.extend_from_slice(&value.im.to_le_bytes());
    }
    writer.write_all(&buffer)?;
    Ok(())
}

/// Reads exactly `entries` interleaved re/im doubles.
fn read_complex_payload(reader: &mut impl Read, entries: usize) -> Result<Vec<Complex64>> {
    let mut bytes = vec![0u8; entries * 16];
    reader.read_exact(&mut bytes).map_err(|e| Error::MalformedArtifact {
        kind: "binary dump",
        detail: format!("payload shorter than its header promises: {e}"),
    })?;
    let mut trailing = [0u8; 1];
    match reader.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::MalformedArtifact {
                kind: "binary dump",
                detail: "trailing bytes after payload".into(),
            })
        }
        Err(e) => return Err(e.into()),
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|chunk| {
            Complex64::new(
                f64::from_le_bytes(chunk[..8].try_into().unwrap()),
                f64::from_le_bytes(chunk[8..].try_into().unwrap()),
            )
        })
        .collect())
}

/// Parses a dump header line `<magic> 1 <dim> ...` with `n_dims` dimensions.
fn read_binary_header(reader: &mut impl BufRead, magic: &'static str, n_dims: usize) -> Result<Vec<usize>> {
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let malformed = |detail: String| Error::MalformedArtifact { kind: "binary dump", detail };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != n_dims + 2 || fields[0] != magic {
        return Err(malformed(format!(
            "header {header:?} does not match `{magic} 1` with {n_dims} dimensions"
        )));
    }
    if fields[1] != "1" {
        return Err(malformed(format!("unsupported {magic} version {}", fields[1])));
    }
    fields[2..]
        .iter()
        .map(|f| f.parse::<usize>().map_err(|_| malformed(format!("bad dimension {f:?}"))))
        .collect()
}

/// Synthesizes the received tensor of a scene.
///
/// `snr_db = None` produces the noiseless superposition; otherwise circular
/// complex Gaussian noise is added with per-entry variance set so that the
/// mean signal power over all entries is `snr_db` above the noise (if the
/// scene has no paths, unit-variance noise is used as the reference instead).
/// The generator is seeded deterministically: one `seed` always reproduces the
/// same tensor.
pub fn synthesize(scene: &Scene, ofdm: &OfdmParams, snr_db: Option<f64>, seed: u64) -> Result<ReceivedTensor> {
    ofdm.validate()?;
    scene.array.validate()?;
    let paths = if scene.paths.is_empty() && scene.clutter_scatterers.is_empty() && scene.targets.is_empty() {
        Vec::new()
    } else {
        scene.derive_paths()?
    };
    synthesize_paths(&scene.array, &paths, ofdm, snr_db, seed)
}

/// Synthesizes a tensor directly from resolved path parameters.
pub fn synthesize_paths(
    array: &crate::scene::ArrayGeometry,
    paths: &[PathParams],
    ofdm: &OfdmParams,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<ReceivedTensor> {
    ofdm.validate()?;
    array.validate()?;
    if paths.is_empty() && snr_db.is_none() {
        return Err(Error::EmptyScene(
            "no paths and no noise requested; the tensor would be exactly zero".into(),
        ));
    }
    let cp_us = ofdm.cp_duration_s * 1e6;
    for p in paths {
        p.validate()?;
        if p.delay_s > ofdm.cp_duration_s {
            return Err(Error::DelayExceedsCyclicPrefix { delay_us: p.delay_s * 1e6, cp_us });
        }
    }

    let m_total = array.element_count();
    let (n_sc, n_sym) = (ofdm.n_subcarriers, ofdm.n_symbols);
    let mut tensor = ReceivedTensor::zeros(m_total, n_sc, n_sym);
    let t_sym = ofdm.symbol_duration_s();
    let tau_phase_scale = -std::f64::consts::TAU * ofdm.subcarrier_spacing_hz;

    let mut alpha = vec![Complex64::default(); m_total];
    for p in paths {
        crate::scene::steering_into(array, p.azimuth_deg, p.zenith_deg, &mut alpha);
        let delay_ramp: Vec<Complex64> = (0..n_sc)
            .map(|n| Complex64::from_polar(1.0, tau_phase_scale * p.delay_s * n as f64))
            .collect();
        let doppler_ramp: Vec<Complex64> = (0..n_sym)
            .map(|g| {
                Complex64::from_polar(
                    1.0,
                    std::f64::consts::TAU * p.doppler_hz * (g as f64 * t_sym + ofdm.cp_duration_s),
                )
            })
            .collect();
        for (g, dop) in doppler_ramp.iter().enumerate() {
            for (n, del) in delay_ramp.iter().enumerate() {
                let factor = p.gain * dop * del;
                let mut col = tensor.data.column_mut(g * n_sc + n);
                for (m, a) in alpha.iter().enumerate() {
                    col[m] += factor * a;
                }
            }
        }
    }

    if let Some(snr_db) = snr_db {
        let entries = (m_total * n_sc * n_sym) as f64;
        let mean_signal_power = tensor.energy() / entries;
        let reference = if mean_signal_power > 0.0 { mean_signal_power } else { 1.0 };
        let noise_var = reference / 10f64.powf(snr_db / 10.0);
        let sigma = (noise_var / 2.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Column-major draw order, fixed for reproducibility.
        for v in tensor.data.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re * sigma, im * sigma);
        }
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ArrayGeometry, PathKind};

    fn upa(mx: usize, mz: usize) -> ArrayGeometry {
        ArrayGeometry { mx, mz, spacing_over_lambda: 0.5, carrier_hz: 28.0e9 }
    }

    fn ofdm_small() -> OfdmParams {
        OfdmParams { subcarrier_spacing_hz: 30.0e3, n_subcarriers: 8, n_symbols: 4, cp_duration_s: 9.375e-6 }
    }

    fn path(kind: PathKind, gain: (f64, f64), delay_us: f64, doppler_hz: f64, az: f64, zen: f64) -> PathParams {
        PathParams {
            kind,
            gain: Complex64::new(gain.0, gain.1),
            delay_s: delay_us * 1e-6,
            doppler_hz,
            azimuth_deg: az,
            zenith_deg: zen,
        }
    }

    // 1. Every entry of a single-path tensor matches the closed-form product.
    #[test]
    fn single_path_matches_closed_form() {
        let array = upa(2, 2);
        let ofdm = ofdm_small();
        let p = path(PathKind::Target, (0.8, -0.3), 2.5, 700.0, 52.4, 126.0);
        let t = synthesize_paths(&array, &[p], &ofdm, None, 0).unwrap();
        let alpha = crate::scene::steering_vector(&array, 52.4, 126.0).unwrap();
        let t_sym = ofdm.symbol_duration_s();
        for m in 0..4 {
            for n in 0..8 {
                for g in 0..4 {
                    let want = p.gain
                        * alpha[m]
                        * Complex64::from_polar(1.0, -std::f64::consts::TAU * n as f64 * 30.0e3 * 2.5e-6)
                        * Complex64::from_polar(
                            1.0,
                            std::f64::consts::TAU * 700.0 * (g as f64 * t_sym + ofdm.cp_duration_s),
                        );
                    assert!((t.entry(m, n, g) - want).norm() < 1e-12);
                }
            }
        }
    }

    // 2. Synthesis is additive over paths (noiseless superposition).
    #[test]
    fn superposition_over_paths() {
        let array = upa(3, 2);
        let ofdm = ofdm_small();
        let p1 = path(PathKind::Clutter, (1.0, 0.0), 3.35, 186.7, 84.3, 65.0);
        let p2 = path(PathKind::Target, (0.5, 0.2), 4.5, 3733.3, 52.4, 126.0);
        let both = synthesize_paths(&array, &[p1, p2], &ofdm, None, 0).unwrap();
        let a = synthesize_paths(&array, &[p1], &ofdm, None, 0).unwrap();
        let b = synthesize_paths(&array, &[p2], &ofdm, None, 0).unwrap();
        let diff = both.snapshots() - (a.snapshots() + b.snapshots());
        assert!(diff.norm() < 1e-12 * both.snapshots().norm());
    }

    // 3. A zero-Doppler path repeats identically across symbols.
    #[test]
    fn zero_doppler_is_symbol_invariant() {
        let array = upa(2, 1);
        let ofdm = ofdm_small();
        let p = path(PathKind::Clutter, (1.0, 0.0), 1.0, 0.0, 90.0, 90.0);
        let t = synthesize_paths(&array, &[p], &ofdm, None, 0).unwrap();
        for g in 1..4 {
            for m in 0..2 {
                for n in 0..8 {
                    assert_eq!(t.entry(m, n, g), t.entry(m, n, 0));
                }
            }
        }
    }

    // 4. Snapshot layout: column p = gamma*N_sc + n, and the inverse reshape
    //    restores the tensor bit for bit.
    #[test]
    fn snapshot_round_trip() {
        let array = upa(2, 2);
        let ofdm = ofdm_small();
        let p = path(PathKind::Target, (1.0, 0.0), 2.0, 500.0, 40.0, 70.0);
        let t = synthesize_paths(&array, &[p], &ofdm, Some(10.0), 7).unwrap();
        let y = t.snapshots().clone();
        for g in 0..4 {
            for n in 0..8 {
                let col = y.column(g * 8 + n);
                for m in 0..4 {
                    assert_eq!(col[m], t.entry(m, n, g));
                }
            }
        }
        let back = ReceivedTensor::from_snapshots(y, 8, 4).unwrap();
        assert_eq!(back, t);

        let bad = ReceivedTensor::from_snapshots(DMatrix::zeros(4, 31), 8, 4);
        assert!(matches!(bad, Err(Error::DimensionMismatch(_))));
    }

    // 5. Preconditions: delay beyond the CP and empty noiseless scenes fail.
    #[test]
    fn precondition_errors() {
        let array = upa(2, 2);
        let ofdm = ofdm_small();
        let late = path(PathKind::Clutter, (1.0, 0.0), 9.4, 0.0, 90.0, 90.0);
        assert!(matches!(
            synthesize_paths(&array, &[late], &ofdm, None, 0),
            Err(Error::DelayExceedsCyclicPrefix { .. })
        ));
        assert!(matches!(
            synthesize_paths(&array, &[], &ofdm, None, 0),
            Err(Error::EmptyScene(_))
        ));
    }

    // 6. Empty path list with an SNR yields unit-variance noise only.
    #[test]
    fn noise_only_tensor() {
        let array = upa(4, 4);
        let ofdm = OfdmParams { n_subcarriers: 64, n_symbols: 16, ..ofdm_small() };
        let t = synthesize_paths(&array, &[], &ofdm, Some(0.0), 3).unwrap();
        let entries = (16 * 64 * 16) as f64;
        let mean_power = t.energy() / entries;
        assert!((mean_power - 1.0).abs() < 0.05, "mean noise power {mean_power}");
    }

    // 7. Same seed reproduces the tensor exactly; another seed does not.
    #[test]
    fn noise_is_seed_deterministic() {
        let array = upa(2, 2);
        let ofdm = ofdm_small();
        let p = path(PathKind::Target, (1.0, 0.0), 2.0, 300.0, 60.0, 100.0);
        let t1 = synthesize_paths(&array, &[p], &ofdm, Some(5.0), 42).unwrap();
        let t2 = synthesize_paths(&array, &[p], &ofdm, Some(5.0), 42).unwrap();
        assert_eq!(t1, t2);
        let t3 = synthesize_paths(&array, &[p], &ofdm, Some(5.0), 43).unwrap();
        assert_ne!(t1, t3);
    }

    // 8. Measured SNR tracks the requested SNR.
    #[test]
    fn snr_calibration() {
        let array = upa(4, 4);
        let ofdm = OfdmParams { n_subcarriers: 64, n_symbols: 32, ..ofdm_small() };
        let p = path(PathKind::Target, (1.0, 0.0), 2.0, 300.0, 60.0, 100.0);
        let clean = synthesize_paths(&array, &[p], &ofdm, None, 0).unwrap();
        let noisy = synthesize_paths(&array, &[p], &ofdm, Some(10.0), 11).unwrap();
        let noise = noisy.snapshots() - clean.snapshots();
        let snr = clean.snapshots().norm_squared() / noise.norm_squared();
        let snr_db = 10.0 * snr.log10();
        assert!((snr_db - 10.0).abs() < 0.3, "measured SNR {snr_db} dB");
    }

    // 9. Binary dumps round-trip bit-exactly for tensors and matrices.
    #[test]
    fn binary_dump_round_trip() {
        let array = upa(2, 2);
        let ofdm = ofdm_small();
        let p = path(PathKind::Target, (0.8, -0.3), 2.0, 300.0, 60.0, 100.0);
        let tensor = synthesize_paths(&array, &[p], &ofdm, Some(0.0), 9).unwrap();

        let mut dump = Vec::new();
        tensor.write_binary(&mut dump).unwrap();
        let (m, n_sc, n_sym) = tensor.dims();
        assert!(dump.starts_with(format!("cxtensor 1 {m} {n_sc} {n_sym}\n").as_bytes()));
        let back = ReceivedTensor::read_binary(&mut dump.as_slice()).unwrap();
        assert_eq!(back, tensor);

        let matrix = tensor.snapshots().clone();
        let mut dump = Vec::new();
        write_matrix(&mut dump, &matrix).unwrap();
        assert_eq!(read_matrix(&mut dump.as_slice()).unwrap(), matrix);
    }

    // 10. Malformed dumps are rejected with a named defect.
    #[test]
    fn binary_dump_rejects_malformed_input() {
        let tensor = ReceivedTensor::zeros(2, 3, 2);
        let mut dump = Vec::new();
        tensor.write_binary(&mut dump).unwrap();

        let mut wrong_magic = dump.clone();
        wrong_magic[..8].copy_from_slice(b"cxmatrix");
        assert!(matches!(
            ReceivedTensor::read_binary(&mut wrong_magic.as_slice()),
            Err(Error::MalformedArtifact { .. })
        ));

        let truncated = &dump[..dump.len() - 1];
        assert!(matches!(
            ReceivedTensor::read_binary(&mut &truncated[..]),
            Err(Error::MalformedArtifact { .. })
        ));

        let mut padded = dump.clone();
        padded.push(0);
        assert!(matches!(
            ReceivedTensor::read_binary(&mut padded.as_slice()),
            Err(Error::MalformedArtifact { .. })
        ));
    }
}
