//! Clutter suppression: Doppler-domain MTI filtering and spatial zero-forcing.
//!
//! The MTI path attacks clutter through its (near-)zero Doppler: an N-th order
//! binomial canceller `c_n = (-1)^n C(N, n)` applied along the OFDM symbol
//! axis has frequency response `H(f) = sum_n c_n e^{-j 2 pi f n T}`, which
//! nulls DC and every multiple of the symbol rate. The spatial path instead
//! uses known clutter DoAs: with steering columns C, the zero-forcing
//! projector `W = I - C (C^H C)^{-1} C^H` annihilates the clutter subspace;
//! it is applied Frobenius-normalized so the noise floor stays comparable
//! across different nulled-set sizes.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::metrics::Meter;
use crate::scene::{steering_vector, ArrayGeometry};
use crate::synth::ReceivedTensor;

// ---------------------------------------------------------------------------
// MTI filtering
// ---------------------------------------------------------------------------

/// Impulse-train MTI filter along the symbol axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MtiFilter {
    /// Tap weights c_0..c_N (real-valued for the binomial design).
    pub coefficients: Vec<Complex64>,
}

impl MtiFilter {
    /// Filter order N (number of taps minus one).
    pub fn order(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }
}

/// Binomial MTI design of the given order: c_n = (-1)^n C(N, n).
pub fn mti_design(order: usize) -> Result<MtiFilter> {
    if order == 0 {
        return Err(Error::InvalidParameter("MTI order must be >= 1".into()));
    }
    if order > 50 {
        return Err(Error::InvalidParameter(format!(
            "MTI order {order} exceeds the exactly representable binomial range"
        )));
    }
    let mut c = vec![1.0f64];
    for _ in 0..order {
        // Pascal update with alternating signs folded in afterwards.
        let mut next = vec![0.0; c.len() + 1];
        for (i, v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] += v;
        }
        c = next;
    }
    let coefficients = c
        .into_iter()
        .enumerate()
        .map(|(n, v)| Complex64::new(if n % 2 == 0 { v } else { -v }, 0.0))
        .collect();
    Ok(MtiFilter { coefficients })
}

/// Frequency response H(f) = sum_n c_n e^{-j 2 pi f n T} of the filter for an
/// inter-tap delay of `period_s`.
pub fn mti_response(filter: &MtiFilter, freq_hz: f64, period_s: f64) -> Complex64 {
    let mut h = Complex64::default();
    for (n, c) in filter.coefficients.iter().enumerate() {
        h += c * Complex64::from_polar(1.0, -std::f64::consts::TAU * freq_hz * n as f64 * period_s);
    }
    h
}

/// Applies the MTI filter along the symbol axis of a received tensor.
///
/// Output symbol gamma is `sum_n c_n Y(:, :, gamma - n)` with the negative
/// indices treated as zero, so the tensor shape is unchanged and the first
/// `order` symbols carry partial sums (downstream stages usually trim them
/// with [`ReceivedTensor::trim_leading_symbols`]).
pub fn mti_apply(filter: &MtiFilter, tensor: &ReceivedTensor) -> ReceivedTensor {
    let (m, n_sc, n_sym) = tensor.dims();
    let mut out = ReceivedTensor::zeros(m, n_sc, n_sym);
    for gamma in 0..n_sym {
        let mut acc = DMatrix::<Complex64>::zeros(m, n_sc);
        for (n, c) in filter.coefficients.iter().enumerate() {
            if gamma >= n {
                acc.zip_apply(&tensor.symbol_block(gamma - n), |a, b| *a += c * b);
            }
        }
        out.symbol_block_mut(gamma).copy_from(&acc);
    }
    out
}

// ---------------------------------------------------------------------------
// Zero-forcing projector
// ---------------------------------------------------------------------------

/// Frobenius-normalized zero-forcing projector onto the complement of a set of
/// clutter steering directions.
#[derive(Debug, Clone)]
pub struct ZfProjector {
    w_bar: DMatrix<Complex64>,
    null_basis: DMatrix<Complex64>,
    nulled_doas: Vec<(f64, f64)>,
    frobenius: f64,
}

impl ZfProjector {
    /// Normalized projector matrix W / ||W||_F.
    pub fn w_bar(&self) -> &DMatrix<Complex64> {
        &self.w_bar
    }

    /// Orthonormal basis of the nulled (clutter) subspace, M x K.
    pub fn null_basis(&self) -> &DMatrix<Complex64> {
        &self.null_basis
    }

    /// DoAs (azimuth, zenith) the projector nulls, in build order.
    pub fn nulled_doas(&self) -> &[(f64, f64)] {
        &self.nulled_doas
    }

    /// Frobenius norm of the unnormalized projector (sqrt(M - K) up to roundoff).
    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius
    }

    /// Array size M the projector acts on.
    pub fn elements(&self) -> usize {
        self.w_bar.nrows()
    }
}

/// Default cap on the steering Gram condition number in [`zf_build`].
pub const ZF_CONDITION_CAP: f64 = 1e10;

/// Builds the normalized zero-forcing projector for a DoA set.
///
/// An empty set yields W = I (normalized by sqrt(M)). The Gram matrix of the
/// steering columns is checked against `ZF_CONDITION_CAP` before the null
/// basis is orthogonalized, so duplicated or nearly collinear DoAs fail
/// loudly instead of producing a silently unstable inverse.
pub fn zf_build(geom: &ArrayGeometry, doas: &[(f64, f64)], meter: Meter) -> Result<ZfProjector> {
    zf_build_with_cap(geom, doas, ZF_CONDITION_CAP, meter)
}

/// [`zf_build`] with an explicit condition-number cap.
pub fn zf_build_with_cap(
    geom: &ArrayGeometry,
    doas: &[(f64, f64)],
    condition_cap: f64,
    meter: Meter,
) -> Result<ZfProjector> {
    geom.validate()?;
    let m = geom.element_count();
    let k = doas.len();
    if k >= m {
        return Err(Error::InvalidSubspace(format!(
            "cannot null {k} directions with an {m}-element array"
        )));
    }
    if let Some(c) = meter {
        c.add_projector_build((k * (m + k) * (m + k)) as u64);
    }

    if k == 0 {
        let identity = DMatrix::<Complex64>::identity(m, m);
        let frobenius = (m as f64).sqrt();
        return Ok(ZfProjector {
            w_bar: identity / Complex64::new(frobenius, 0.0),
            null_basis: DMatrix::zeros(m, 0),
            nulled_doas: Vec::new(),
            frobenius,
        });
    }

    let mut c_mat = DMatrix::<Complex64>::zeros(m, k);
    for (j, (az, zen)) in doas.iter().enumerate() {
        c_mat.set_column(j, &steering_vector(geom, *az, *zen)?);
    }

    // Gram condition check before any orthogonalization.
    let gram = c_mat.adjoint() * &c_mat;
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let condition = if lambda_min <= 0.0 { f64::INFINITY } else { lambda_max / lambda_min };
    if condition > condition_cap {
        let (i, j) = most_collinear_pair(&c_mat);
        return Err(Error::IllConditioned(format!(
            "steering Gram condition {condition:.3e} exceeds cap {condition_cap:.1e}; \
             closest DoAs are #{i} ({:.2}, {:.2}) and #{j} ({:.2}, {:.2})",
            doas[i].0, doas[i].1, doas[j].0, doas[j].1
        )));
    }

    // Orthonormal basis of span(C) via Householder QR; W = I - Q Q^H.
    let q = c_mat.qr().q();
    let mut w = DMatrix::<Complex64>::identity(m, m) - &q * q.adjoint();
    // Symmetrize to keep W exactly Hermitian under roundoff.
    let w_h = w.adjoint();
    w = (w + w_h) * Complex64::new(0.5, 0.0);
    let frobenius = w.norm();
    Ok(ZfProjector {
        w_bar: w / Complex64::new(frobenius, 0.0),
        null_basis: q,
        nulled_doas: doas.to_vec(),
        frobenius,
    })
}

/// Indices of the most collinear steering pair (largest normalized inner product).
fn most_collinear_pair(c_mat: &DMatrix<Complex64>) -> (usize, usize) {
    let k = c_mat.ncols();
    if k < 2 {
        return (0, 0);
    }
    let mut best = (0, 1);
    let mut best_corr = -1.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let corr = c_mat.column(i).dotc(&c_mat.column(j)).norm()
                / (c_mat.column(i).norm() * c_mat.column(j).norm());
            if corr > best_corr {
                best_corr = corr;
                best = (i, j);
            }
        }
    }
    best
}

/// Projects a snapshot matrix: returns W_bar * Y.
pub fn zf_apply(projector: &ZfProjector, snapshots: &DMatrix<Complex64>, meter: Meter) -> Result<DMatrix<Complex64>> {
    let m = projector.elements();
    if snapshots.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "projector is {m}x{m} but snapshots have {} rows",
            snapshots.nrows()
        )));
    }
    if let Some(c) = meter {
        c.add_projection((m * m * snapshots.ncols()) as u64);
    }
    Ok(projector.w_bar() * snapshots)
}

// ---------------------------------------------------------------------------
// Periodic-radar MTI demonstration series
// ---------------------------------------------------------------------------

/// Time/frequency series of the periodic-radar MTI demonstration.
#[derive(Debug, Clone)]
pub struct MtiDemoSeries {
    /// Pulse repetition period in seconds.
    pub period_s: f64,
    /// Doppler shift of the moving copy in Hz.
    pub doppler_hz: f64,
    /// Sample instants in seconds.
    pub time_s: Vec<f64>,
    /// |input| time series: static returns plus the Doppler-shifted copy.
    pub input_abs: Vec<f64>,
    /// |output| time series after the MTI canceller.
    pub output_abs: Vec<f64>,
    /// Frequency axis in Hz (non-negative bins).
    pub freq_hz: Vec<f64>,
    /// Input spectrum magnitude in dB.
    pub input_spectrum_db: Vec<f64>,
    /// Output spectrum magnitude in dB.
    pub output_spectrum_db: Vec<f64>,
    /// |H(f)| of the canceller on the same frequency axis.
    pub response_abs: Vec<f64>,
}

/// Builds the MTI demonstration on a periodic pulse train.
///
/// A 10 ms pulse train plus its copy Doppler-shifted by 20 Hz is passed
/// through the order-`order` canceller whose tap delay equals the pulse
/// period; the static component cancels while the shifted copy survives.
pub fn mti_demo_series(order: usize) -> Result<MtiDemoSeries> {
    const PERIOD_S: f64 = 0.01;
    const DOPPLER_HZ: f64 = 20.0;
    const SAMPLE_RATE_HZ: f64 = 10_000.0;

    let filter = mti_design(order)?;
    let period_samples = (PERIOD_S * SAMPLE_RATE_HZ) as usize;
    // Steady-state window of 0.4 s preceded by the filter warm-up, so spectra
    // can be taken past the zero-padded transient.
    let n_steady = 40 * period_samples;
    let warmup = order * period_samples;
    let n = n_steady + warmup;

    let pulse_sigma_s = 0.0006;
    let pulse = |t: f64| -> f64 {
        // Gaussian pulse centered in each repetition interval.
        let phase = (t / PERIOD_S).fract();
        let dt = (phase - 0.5) * PERIOD_S;
        (-dt * dt / (2.0 * pulse_sigma_s * pulse_sigma_s)).exp()
    };

    let time_s: Vec<f64> = (0..n).map(|i| i as f64 / SAMPLE_RATE_HZ).collect();
    let input: Vec<Complex64> = time_s
        .iter()
        .map(|&t| {
            let s = pulse(t);
            Complex64::new(s, 0.0)
                + Complex64::new(s, 0.0) * Complex64::from_polar(1.0, std::f64::consts::TAU * DOPPLER_HZ * t)
        })
        .collect();
    let mut output = vec![Complex64::default(); n];
    for i in 0..n {
        let mut acc = Complex64::default();
        for (k, c) in filter.coefficients.iter().enumerate() {
            if i >= k * period_samples {
                acc += c * input[i - k * period_samples];
            }
        }
        output[i] = acc;
    }

    // Spectra over the steady-state window only, mirroring the tensor-domain
    // convention of trimming the filter's zero-padded leading output.
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_steady);
    let mut in_spec = input[warmup..].to_vec();
    let mut out_spec = output[warmup..].to_vec();
    fft.process(&mut in_spec);
    fft.process(&mut out_spec);

    let half = n_steady / 2;
    let freq_hz: Vec<f64> =
        (0..half).map(|k| k as f64 * SAMPLE_RATE_HZ / n_steady as f64).collect();
    let to_db = |v: &Complex64| 20.0 * (v.norm() + 1e-15).log10();
    Ok(MtiDemoSeries {
        period_s: PERIOD_S,
        doppler_hz: DOPPLER_HZ,
        input_abs: input.iter().map(|v| v.norm()).collect(),
        output_abs: output.iter().map(|v| v.norm()).collect(),
        input_spectrum_db: in_spec[..half].iter().map(to_db).collect(),
        output_spectrum_db: out_spec[..half].iter().map(to_db).collect(),
        response_abs: freq_hz.iter().map(|&f| mti_response(&filter, f, PERIOD_S).norm()).collect(),
        time_s,
        freq_hz,
    })
}
