//! The learnable spectral attention module.
//!
//! A module holds a `(2K+1) x D` matrix of attention logits (K high-frequency
//! slots, one identity slot, K low-frequency slots), K raw smoothing
//! parameters mapped through a sigmoid, and a carried K x D momentum bank.
//! The forward pass decomposes each feature vector against the momentum
//! trajectory of its batch and recombines the components with per-feature
//! softmax weights; the backward pass produces exact analytic gradients for
//! the logits, the smoothing parameters (through the powers of the unfolding
//! matrix), and the inputs.
//!
//! Batched forwards unfold the EMA recurrence so gradients at a sample can
//! reach earlier samples of the same mini-batch; the momentum carried in from
//! before the batch is always treated as a constant.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::ema::{
    batched_momentum, build_unfolding_derivative, validate_alphas, MomentumBank, UnfoldingMatrix,
};
use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Column-wise stable softmax of a `(2K+1) x D` logit matrix.
pub fn column_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, cols) = logits.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..cols {
        let col = logits.column(i);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..rows {
            let e = (col[j] - max).exp();
            out[[j, i]] = e;
            sum += e;
        }
        for j in 0..rows {
            out[[j, i]] /= sum;
        }
    }
    out
}

/// Split a feature vector against a momentum bank into `2K+1` rows:
/// rows `0..K` are the doubled high-frequency residuals `2 (F - M[K-1-k])`
/// (reversed index so the outermost slots pair up), row `K` is the feature
/// itself, and rows `K+1..=2K` are the doubled momenta `2 M[k]`.
///
/// Row `j` plus row `2K - j` always equals `2 F`.
pub fn decompose(
    feature: ArrayView1<'_, f64>,
    momentum: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let (k, d) = momentum.dim();
    if feature.len() != d {
        return Err(Error::Dimension(format!(
            "feature has {} entries but momentum has {d} columns",
            feature.len()
        )));
    }
    let mut out = Array2::zeros((2 * k + 1, d));
    for kk in 0..k {
        let m = momentum.row(k - 1 - kk);
        for i in 0..d {
            out[[kk, i]] = 2.0 * (feature[i] - m[i]);
        }
    }
    for i in 0..d {
        out[[k, i]] = feature[i];
    }
    for kk in 0..k {
        let m = momentum.row(kk);
        for i in 0..d {
            out[[k + 1 + kk, i]] = 2.0 * m[i];
        }
    }
    Ok(out)
}

/// Everything the backward pass needs to reproduce the forward exactly.
#[derive(Debug, Clone)]
pub struct SaTape {
    step: u64,
    /// B x L x D input window.
    window: Array3<f64>,
    /// B x D momentum drivers (last look-back position of each sample).
    drivers: Array2<f64>,
    /// (B+1) x K x D momentum trajectory; row 0 is the pre-batch carry.
    trajectory: Array3<f64>,
    /// (2K+1) x D softmax weights.
    weights: Array2<f64>,
    alphas: Vec<f64>,
    unfolding: UnfoldingMatrix,
    batched_bptt: bool,
    learn_smoothing: bool,
}

impl SaTape {
    /// Recompute the forward output from the cached state. Runs the same code
    /// path as the forward pass, so the result is bit-identical.
    pub fn replay_output(&self) -> Array3<f64> {
        recombine(&self.window, &self.trajectory, &self.weights)
    }

    pub fn trajectory(&self) -> &Array3<f64> {
        &self.trajectory
    }
}

/// Gradients returned by the batched backward pass.
#[derive(Debug, Clone)]
pub struct SaGradients {
    /// d loss / d sa_matrix, `(2K+1) x D`.
    pub sa_matrix: Array2<f64>,
    /// d loss / d raw_smoothing, length K.
    pub raw_smoothing: Vec<f64>,
    /// d loss / d input window, same shape as the forward input.
    pub window: Array3<f64>,
}

/// Weighted recombination of the decomposition. `y[b][l][i]` depends on the
/// sample's own value at `(l, i)` and the pre-update momentum row `b`.
fn recombine(window: &Array3<f64>, trajectory: &Array3<f64>, weights: &Array2<f64>) -> Array3<f64> {
    let (b_len, l_len, d) = window.dim();
    let k = trajectory.dim().1;
    // y = g_x * x + sum_k g_m[k] * M[b][k], with
    // g_x[i]    = 2 * sum_{kk<K} w[kk][i] + w[K][i]
    // g_m[k][i] = 2 * (w[K+1+k][i] - w[K-1-k][i])
    let mut g_x = vec![0.0_f64; d];
    let mut g_m = Array2::zeros((k, d));
    for i in 0..d {
        let mut s = 0.0;
        for kk in 0..k {
            s += weights[[kk, i]];
        }
        g_x[i] = 2.0 * s + weights[[k, i]];
        for kk in 0..k {
            g_m[[kk, i]] = 2.0 * (weights[[k + 1 + kk, i]] - weights[[k - 1 - kk, i]]);
        }
    }
    let mut out = Array3::zeros((b_len, l_len, d));
    for b in 0..b_len {
        for l in 0..l_len {
            for i in 0..d {
                let mut acc = g_x[i] * window[[b, l, i]];
                for kk in 0..k {
                    acc += g_m[[kk, i]] * trajectory[[b, kk, i]];
                }
                out[[b, l, i]] = acc;
            }
        }
    }
    out
}

/// The spectral attention module.
#[derive(Debug, Clone)]
pub struct SpectralAttention {
    sa_matrix: Array2<f64>,
    raw_smoothing: Vec<f64>,
    momentum: Option<MomentumBank>,
    k: usize,
    d: usize,
    /// When false the smoothing parameters receive zero gradient.
    pub learn_smoothing: bool,
    /// When false each sample is treated as an independent forward: momentum
    /// still advances between samples but no gradient crosses sample
    /// boundaries, reproducing the non-batched variant.
    pub batched_bptt: bool,
    step: u64,
}

impl SpectralAttention {
    /// Gaussian-initialized module: `sa_matrix[j][i] = -(j-K)^2 / (2 sigma^2)`
    /// with `sigma = K/2`, exactly symmetric about the identity row, so the
    /// module starts as an identity function.
    pub fn new(k: usize, d: usize, alphas: &[f64]) -> Result<Self> {
        Self::with_sigma(k, d, alphas, k as f64 / 2.0)
    }

    /// Same as [`SpectralAttention::new`] with an explicit index-scale for
    /// the Gaussian initialization.
    pub fn with_sigma(k: usize, d: usize, alphas: &[f64], sigma_idx: f64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Domain(
                "spectral attention requires K >= 1 and D >= 1".to_string(),
            ));
        }
        if alphas.len() != k {
            return Err(Error::Dimension(format!(
                "expected {k} smoothing factors, got {}",
                alphas.len()
            )));
        }
        let mut module = Self {
            sa_matrix: Self::gaussian_logits(k, d, sigma_idx)?,
            raw_smoothing: vec![0.0; k],
            momentum: None,
            k,
            d,
            learn_smoothing: true,
            batched_bptt: true,
            step: 0,
        };
        module.set_smoothing(alphas)?;
        Ok(module)
    }

    /// Rebuild a module from serialized state. Monotonicity of the smoothing
    /// factors is not required here: training may reorder them.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        sa_matrix: Array2<f64>,
        raw_smoothing: Vec<f64>,
        momentum: Option<Array2<f64>>,
        learn_smoothing: bool,
        batched_bptt: bool,
    ) -> Result<Self> {
        let (rows, d) = sa_matrix.dim();
        if rows < 3 || rows % 2 == 0 {
            return Err(Error::Dimension(format!(
                "sa_matrix must have an odd number of rows >= 3, got {rows}"
            )));
        }
        let k = (rows - 1) / 2;
        if raw_smoothing.len() != k {
            return Err(Error::Dimension(format!(
                "sa_matrix implies K = {k} but {} raw smoothing parameters were given",
                raw_smoothing.len()
            )));
        }
        if sa_matrix.iter().any(|v| !v.is_finite())
            || raw_smoothing.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Domain(
                "module parameters must be finite".to_string(),
            ));
        }
        let momentum = match momentum {
            Some(values) => {
                if values.dim() != (k, d) {
                    return Err(Error::Dimension(format!(
                        "momentum shape {:?} does not match (K, D) = ({k}, {d})",
                        values.dim()
                    )));
                }
                Some(MomentumBank::from_values(values)?)
            }
            None => None,
        };
        Ok(Self {
            sa_matrix,
            raw_smoothing,
            momentum,
            k,
            d,
            learn_smoothing,
            batched_bptt,
            step: 0,
        })
    }

    /// The symmetric initialization logits: `-(j-K)^2 / (2 sigma_idx^2)`,
    /// identical in every feature column.
    pub fn gaussian_logits(k: usize, d: usize, sigma_idx: f64) -> Result<Array2<f64>> {
        if sigma_idx <= 0.0 {
            return Err(Error::Domain(
                "gaussian initialization requires sigma_idx > 0".to_string(),
            ));
        }
        let rows = 2 * k + 1;
        let denom = 2.0 * sigma_idx * sigma_idx;
        Ok(Array2::from_shape_fn((rows, d), |(j, _)| {
            let offset = j as f64 - k as f64;
            -(offset * offset) / denom
        }))
    }

    /// Store smoothing factors as raw parameters via the inverse sigmoid.
    /// Requires strictly increasing values in (0, 1).
    pub fn set_smoothing(&mut self, alphas: &[f64]) -> Result<()> {
        if alphas.len() != self.k {
            return Err(Error::Dimension(format!(
                "expected {} smoothing factors, got {}",
                self.k,
                alphas.len()
            )));
        }
        validate_alphas(alphas)?;
        self.raw_smoothing = alphas.iter().map(|&a| logit(a)).collect();
        self.step += 1;
        Ok(())
    }

    /// Effective smoothing factors `sigmoid(raw)`.
    pub fn alphas(&self) -> Vec<f64> {
        self.raw_smoothing.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn raw_smoothing(&self) -> &[f64] {
        &self.raw_smoothing
    }

    pub fn set_raw_smoothing(&mut self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.k {
            return Err(Error::Dimension(format!(
                "expected {} raw parameters, got {}",
                self.k,
                raw.len()
            )));
        }
        self.raw_smoothing = raw.to_vec();
        self.step += 1;
        Ok(())
    }

    pub fn sa_matrix(&self) -> &Array2<f64> {
        &self.sa_matrix
    }

    pub fn sa_matrix_mut(&mut self) -> &mut Array2<f64> {
        self.step += 1;
        &mut self.sa_matrix
    }

    /// Per-feature softmax of the logits (columns sum to 1).
    pub fn softmax_weights(&self) -> Array2<f64> {
        column_softmax(self.sa_matrix.view())
    }

    pub fn num_factors(&self) -> usize {
        self.k
    }

    pub fn num_features(&self) -> usize {
        self.d
    }

    /// Set every momentum row to `f0` (the epoch-start rule).
    pub fn init_momentum(&mut self, f0: ArrayView1<'_, f64>) -> Result<()> {
        if f0.len() != self.d {
            return Err(Error::Dimension(format!(
                "momentum init feature has {} entries, module expects {}",
                f0.len(),
                self.d
            )));
        }
        self.momentum = Some(MomentumBank::from_feature(f0, self.k)?);
        self.step += 1;
        Ok(())
    }

    pub fn momentum(&self) -> Option<ArrayView2<'_, f64>> {
        self.momentum.as_ref().map(|m| m.values())
    }

    pub fn set_momentum(&mut self, values: Array2<f64>) -> Result<()> {
        if values.dim() != (self.k, self.d) {
            return Err(Error::Dimension(format!(
                "momentum shape {:?} does not match (K, D) = ({}, {})",
                values.dim(),
                self.k,
                self.d
            )));
        }
        self.momentum = Some(MomentumBank::from_values(values)?);
        self.step += 1;
        Ok(())
    }

    pub fn clear_momentum(&mut self) {
        self.momentum = None;
        self.step += 1;
    }

    /// Batched forward over a window tensor `B x L x D`. All L positions of a
    /// sample are recombined against that sample's pre-update momentum row;
    /// the momentum stream is driven by the last position of each sample and
    /// updated once per sample. The stored carry becomes trajectory row `B`.
    ///
    /// Returns the transformed window and, when `training` is set, the tape
    /// for the backward pass.
    pub fn forward_window(
        &mut self,
        window: &Array3<f64>,
        training: bool,
    ) -> Result<(Array3<f64>, Option<SaTape>)> {
        let (b_len, l_len, d) = window.dim();
        if d != self.d {
            return Err(Error::Dimension(format!(
                "window has {d} features, module expects {}",
                self.d
            )));
        }
        if b_len == 0 || l_len == 0 {
            return Err(Error::Dimension(
                "window must have B >= 1 and L >= 1".to_string(),
            ));
        }
        let momentum = self.momentum.as_ref().ok_or_else(|| {
            Error::State("momentum is uninitialized; call init_momentum first".to_string())
        })?;
        let alphas = self.alphas();
        let drivers = Array2::from_shape_fn((b_len, d), |(b, i)| window[[b, l_len - 1, i]]);
        let trajectory = batched_momentum(momentum.values(), drivers.view(), &alphas)?;
        let weights = self.softmax_weights();
        let output = recombine(window, &trajectory, &weights);

        let carry = trajectory.index_axis(Axis(0), b_len).to_owned();
        self.momentum = Some(MomentumBank::from_values(carry)?);
        self.step += 1;

        let tape = if training {
            let unfolding = crate::ema::build_unfolding_matrix(&alphas, b_len)?;
            Some(SaTape {
                step: self.step,
                window: window.clone(),
                drivers,
                trajectory,
                weights,
                alphas,
                unfolding,
                batched_bptt: self.batched_bptt,
                learn_smoothing: self.learn_smoothing,
            })
        } else {
            None
        };
        Ok((output, tape))
    }

    /// Exact analytic gradients of `sum <grad_out, output>` for a window
    /// forward. Gradients reach the logits, the raw smoothing parameters
    /// (through the alpha powers of the unfolding), and the inputs; the
    /// momentum carried in from before the batch receives none.
    pub fn backward_window(&self, tape: &SaTape, grad_out: &Array3<f64>) -> Result<SaGradients> {
        if tape.step != self.step {
            return Err(Error::State(
                "stale tape: the module state changed after this forward".to_string(),
            ));
        }
        let (b_len, l_len, d) = tape.window.dim();
        if grad_out.dim() != (b_len, l_len, d) {
            return Err(Error::Dimension(format!(
                "grad_out shape {:?} does not match forward shape {:?}",
                grad_out.dim(),
                tape.window.dim()
            )));
        }
        let k = self.k;
        let weights = &tape.weights;

        let mut g_x = vec![0.0_f64; d];
        let mut g_m = Array2::zeros((k, d));
        for i in 0..d {
            let mut s = 0.0;
            for kk in 0..k {
                s += weights[[kk, i]];
            }
            g_x[i] = 2.0 * s + weights[[k, i]];
            for kk in 0..k {
                g_m[[kk, i]] = 2.0 * (weights[[k + 1 + kk, i]] - weights[[k - 1 - kk, i]]);
            }
        }

        // d loss / d component weight, before the softmax Jacobian.
        let mut d_weights: Array2<f64> = Array2::zeros((2 * k + 1, d));
        // Column sums of grad_out over the window axis, reused for the
        // momentum-path gradients.
        let mut g_sum: Array2<f64> = Array2::zeros((b_len, d));
        // Direct input path: each position sees its own value through the
        // high rows and the identity row.
        let mut d_window = Array3::zeros((b_len, l_len, d));

        for b in 0..b_len {
            for l in 0..l_len {
                for i in 0..d {
                    let g = grad_out[[b, l, i]];
                    if g == 0.0 {
                        continue;
                    }
                    let x = tape.window[[b, l, i]];
                    g_sum[[b, i]] += g;
                    d_window[[b, l, i]] += g * g_x[i];
                    for kk in 0..k {
                        let m_rev = tape.trajectory[[b, k - 1 - kk, i]];
                        d_weights[[kk, i]] += g * 2.0 * (x - m_rev);
                        let m = tape.trajectory[[b, kk, i]];
                        d_weights[[k + 1 + kk, i]] += g * 2.0 * m;
                    }
                    d_weights[[k, i]] += g * x;
                }
            }
        }

        // Softmax Jacobian per feature column.
        let mut d_sa = Array2::zeros((2 * k + 1, d));
        for i in 0..d {
            let mut dot = 0.0;
            for j in 0..2 * k + 1 {
                dot += weights[[j, i]] * d_weights[[j, i]];
            }
            for j in 0..2 * k + 1 {
                d_sa[[j, i]] = weights[[j, i]] * (d_weights[[j, i]] - dot);
            }
        }

        // d loss / d trajectory row b (outputs of this batch only; row B is
        // the carry and receives nothing from this batch's loss).
        let mut d_traj = Array3::zeros((b_len, k, d));
        for b in 0..b_len {
            for kk in 0..k {
                for i in 0..d {
                    d_traj[[b, kk, i]] = g_sum[[b, i]] * g_m[[kk, i]];
                }
            }
        }

        let mut d_raw = vec![0.0_f64; k];
        if tape.batched_bptt {
            // Momentum path into earlier drivers: M[b] depends on driver q
            // through A[k][b][q+1], so gradients only flow backward in time.
            let a = tape.unfolding.entries();
            for kk in 0..k {
                for b in 1..b_len {
                    for q in 0..b {
                        let c = a[[kk, b, q + 1]];
                        for i in 0..d {
                            d_window[[q, l_len - 1, i]] += d_traj[[b, kk, i]] * c;
                        }
                    }
                }
            }
            if tape.learn_smoothing {
                let a_deriv = build_unfolding_derivative(&tape.alphas, b_len)?;
                for kk in 0..k {
                    let mut d_alpha = 0.0;
                    for b in 0..b_len {
                        // q = 0 multiplies the pre-batch carry (trajectory row 0).
                        let c0 = a_deriv[[kk, b, 0]];
                        if c0 != 0.0 {
                            let mut dot = 0.0;
                            for i in 0..d {
                                dot += d_traj[[b, kk, i]] * tape.trajectory[[0, kk, i]];
                            }
                            d_alpha += c0 * dot;
                        }
                        for q in 1..=b {
                            let c = a_deriv[[kk, b, q]];
                            if c == 0.0 {
                                continue;
                            }
                            let mut dot = 0.0;
                            for i in 0..d {
                                dot += d_traj[[b, kk, i]] * tape.drivers[[q - 1, i]];
                            }
                            d_alpha += c * dot;
                        }
                    }
                    let alpha = tape.alphas[kk];
                    d_raw[kk] = d_alpha * alpha * (1.0 - alpha);
                }
            }
        }

        Ok(SaGradients {
            sa_matrix: d_sa,
            raw_smoothing: d_raw,
            window: d_window,
        })
    }

    /// Batched forward over plain feature vectors `B x D`: the window case
    /// with a single look-back position per sample.
    pub fn forward_batched(
        &mut self,
        features: &Array2<f64>,
        training: bool,
    ) -> Result<(Array2<f64>, Option<SaTape>)> {
        let window = features.clone().insert_axis(Axis(1));
        let (out, tape) = self.forward_window(&window, training)?;
        Ok((out.remove_axis(Axis(1)), tape))
    }

    /// Backward counterpart of [`SpectralAttention::forward_batched`]. The
    /// returned window gradient has shape `B x 1 x D`; use
    /// [`SpectralAttention::feature_grad`] for the flat `B x D` view.
    pub fn backward_batched(&self, tape: &SaTape, grad_out: &Array2<f64>) -> Result<SaGradients> {
        let grad = grad_out.clone().insert_axis(Axis(1));
        self.backward_window(tape, &grad)
    }

    /// Gradient of the batched forward with respect to the `B x D` features.
    pub fn feature_grad(grads: &SaGradients) -> Array2<f64> {
        grads.window.clone().remove_axis(Axis(1))
    }
}
