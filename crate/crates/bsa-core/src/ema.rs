//! Exponential-moving-average filter bank: per-step updates, batched
//! unfolding into a lower-triangular matrix contraction, and cutoff-frequency
//! analysis. No learnable state lives here; everything is a pure function of
//! its inputs.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Check that every smoothing factor lies strictly inside (0, 1).
pub fn validate_alpha_range(alphas: &[f64]) -> Result<()> {
    for (k, &a) in alphas.iter().enumerate() {
        if !(a > 0.0 && a < 1.0) || !a.is_finite() {
            return Err(Error::Domain(format!(
                "smoothing factor alpha[{k}] = {a} must lie in the open interval (0, 1)"
            )));
        }
    }
    Ok(())
}

/// Check range plus strict monotonicity (the construction-time invariant).
pub fn validate_alphas(alphas: &[f64]) -> Result<()> {
    validate_alpha_range(alphas)?;
    for k in 1..alphas.len() {
        if alphas[k] <= alphas[k - 1] {
            return Err(Error::Domain(format!(
                "smoothing factors must be strictly increasing, got alpha[{}] = {} after alpha[{}] = {}",
                k,
                alphas[k],
                k - 1,
                alphas[k - 1]
            )));
        }
    }
    Ok(())
}

/// Carried EMA state: one row per smoothing factor, one column per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBank {
    values: Array2<f64>,
}

impl MomentumBank {
    /// Wrap an existing K×D matrix, rejecting non-finite entries.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "momentum bank entries must be finite".to_string(),
            ));
        }
        Ok(Self { values })
    }

    /// Initialize every row to the same feature vector (the epoch-start rule).
    pub fn from_feature(feature: ArrayView1<'_, f64>, k: usize) -> Result<Self> {
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "initial momentum feature must be finite".to_string(),
            ));
        }
        let d = feature.len();
        let mut values = Array2::zeros((k, d));
        for mut row in values.rows_mut() {
            row.assign(&feature);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// One EMA step: `out[k][i] = alpha[k] * momentum[k][i] + (1 - alpha[k]) * feature[i]`.
pub fn ema_update(
    momentum: ArrayView2<'_, f64>,
    feature: ArrayView1<'_, f64>,
    alphas: &[f64],
) -> Result<Array2<f64>> {
    validate_alpha_range(alphas)?;
    let (k, d) = momentum.dim();
    if alphas.len() != k {
        return Err(Error::Dimension(format!(
            "momentum has {k} rows but {} smoothing factors were given",
            alphas.len()
        )));
    }
    if feature.len() != d {
        return Err(Error::Dimension(format!(
            "momentum has {d} features but the input feature vector has {}",
            feature.len()
        )));
    }
    let mut out = Array2::zeros((k, d));
    for (ki, &alpha) in alphas.iter().enumerate() {
        let beta = 1.0 - alpha;
        for i in 0..d {
            out[[ki, i]] = alpha * momentum[[ki, i]] + beta * feature[i];
        }
    }
    Ok(out)
}

/// The -3 dB (half-power) cutoff of the one-pole filter with factor `alpha`,
/// in cycles per step: `(1/2pi) * acos(1 - (1-alpha)^2 / (2 alpha))`.
///
/// The half-power point only exists below the Nyquist frequency when
/// `alpha >= 3 - 2*sqrt(2)`; smaller factors barely attenuate anything and
/// are rejected as a domain error.
pub fn cutoff_frequency(alpha: f64) -> Result<f64> {
    validate_alpha_range(&[alpha])?;
    let one_minus = 1.0 - alpha;
    let ratio = one_minus * one_minus / (2.0 * alpha);
    if ratio > 2.0 {
        return Err(Error::Domain(format!(
            "alpha = {alpha} has no half-power cutoff below the Nyquist frequency"
        )));
    }
    Ok((1.0 - ratio).acos() / (2.0 * std::f64::consts::PI))
}

/// Longest period (in steps) the filter substantially preserves: `1 / cutoff_frequency`.
pub fn cutoff_period(alpha: f64) -> Result<f64> {
    Ok(1.0 / cutoff_frequency(alpha)?)
}

/// Lower-triangular operator expressing `B` sequential EMA updates as one
/// matrix contraction. Slice `k` has entries
///
/// ```text
/// A[k][p][0] = alpha_k^p
/// A[k][p][q] = (1 - alpha_k) * alpha_k^(p-q)   for 1 <= q <= p
/// A[k][p][q] = 0                               for q > p
/// ```
///
/// so every row of every slice sums to 1 by geometric telescoping.
#[derive(Debug, Clone)]
pub struct UnfoldingMatrix {
    entries: Array3<f64>,
}

impl UnfoldingMatrix {
    pub fn entries(&self) -> &Array3<f64> {
        &self.entries
    }

    /// (K, B+1, B+1)
    pub fn dims(&self) -> (usize, usize, usize) {
        self.entries.dim()
    }
}

/// Build the unfolding matrix for a batch of length `batch_len`. Powers of
/// alpha are accumulated by iterated multiplication so the entries are
/// bit-reproducible across platforms.
pub fn build_unfolding_matrix(alphas: &[f64], batch_len: usize) -> Result<UnfoldingMatrix> {
    validate_alpha_range(alphas)?;
    if batch_len == 0 {
        return Err(Error::Domain(
            "unfolding matrix requires batch length >= 1".to_string(),
        ));
    }
    let k = alphas.len();
    let n = batch_len + 1;
    let mut entries = Array3::zeros((k, n, n));
    for (ki, &alpha) in alphas.iter().enumerate() {
        let mut powers = vec![1.0_f64; n];
        for m in 1..n {
            powers[m] = powers[m - 1] * alpha;
        }
        let beta = 1.0 - alpha;
        for p in 0..n {
            entries[[ki, p, 0]] = powers[p];
            for q in 1..=p {
                entries[[ki, p, q]] = beta * powers[p - q];
            }
        }
    }
    Ok(UnfoldingMatrix { entries })
}

/// Derivative of the unfolding matrix entries with respect to `alpha_k`,
/// built with the same iterated powers. Shares the sparsity pattern of
/// [`build_unfolding_matrix`].
pub fn build_unfolding_derivative(alphas: &[f64], batch_len: usize) -> Result<Array3<f64>> {
    validate_alpha_range(alphas)?;
    if batch_len == 0 {
        return Err(Error::Domain(
            "unfolding derivative requires batch length >= 1".to_string(),
        ));
    }
    let k = alphas.len();
    let n = batch_len + 1;
    let mut entries = Array3::zeros((k, n, n));
    for (ki, &alpha) in alphas.iter().enumerate() {
        let mut powers = vec![1.0_f64; n];
        for m in 1..n {
            powers[m] = powers[m - 1] * alpha;
        }
        let beta = 1.0 - alpha;
        for p in 0..n {
            // d/da a^p
            if p >= 1 {
                entries[[ki, p, 0]] = p as f64 * powers[p - 1];
            }
            // d/da (1-a) a^(p-q): -a^(p-q) + (1-a)(p-q) a^(p-q-1)
            for q in 1..p {
                let e = p - q;
                entries[[ki, p, q]] = beta * e as f64 * powers[e - 1] - powers[e];
            }
            if p >= 1 {
                entries[[ki, p, p]] = -1.0;
            }
        }
    }
    Ok(entries)
}

/// Unfold `B` sequential EMA updates in one contraction. Returns the full
/// momentum trajectory with shape (B+1, K, D): row 0 is the initial momentum,
/// row `b` equals `b` applications of [`ema_update`], and row `B` is the
/// carry for the next batch.
pub fn batched_momentum(
    momentum: ArrayView2<'_, f64>,
    features: ArrayView2<'_, f64>,
    alphas: &[f64],
) -> Result<Array3<f64>> {
    let (k, d) = momentum.dim();
    let (b, fd) = features.dim();
    if fd != d {
        return Err(Error::Dimension(format!(
            "momentum has {d} features but the batch has {fd}"
        )));
    }
    if alphas.len() != k {
        return Err(Error::Dimension(format!(
            "momentum has {k} rows but {} smoothing factors were given",
            alphas.len()
        )));
    }
    let unfolding = build_unfolding_matrix(alphas, b)?;
    let mut out = Array3::zeros((b + 1, k, d));
    for ki in 0..k {
        let a = unfolding.entries.index_axis(Axis(0), ki);
        let m_row = momentum.row(ki);
        for p in 0..=b {
            let mut acc = vec![0.0_f64; d];
            let a_p0 = a[[p, 0]];
            for i in 0..d {
                acc[i] = a_p0 * m_row[i];
            }
            for q in 1..=p {
                let c = a[[p, q]];
                let f = features.row(q - 1);
                for i in 0..d {
                    acc[i] += c * f[i];
                }
            }
            for i in 0..d {
                out[[p, ki, i]] = acc[i];
            }
        }
    }
    Ok(out)
}
