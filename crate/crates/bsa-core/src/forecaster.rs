//! Linear base forecasters with analytic gradients.
//!
//! Two channel-independent models are provided: a decomposition model that
//! splits the look-back window into seasonal and trend parts with a centered
//! moving average and applies one linear map to each, and an
//! instance-normalized model that standardizes each window, applies a single
//! linear map, and denormalizes the forecast with the same statistics.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Epsilon added to the per-window standard deviation before dividing.
pub const REVIN_EPS: f64 = 1e-5;

/// Centered moving average with replicate padding, plus the residual.
/// Returns `(seasonal, trend)` with `seasonal + trend == x` exactly.
pub fn series_decompose(x: ArrayView1<'_, f64>, window: usize) -> Result<(Array1<f64>, Array1<f64>)> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Domain(format!(
            "decomposition window must be odd and >= 1, got {window}"
        )));
    }
    let len = x.len();
    if len == 0 {
        return Err(Error::Domain("cannot decompose an empty series".to_string()));
    }
    let half = (window - 1) / 2;
    let mut trend = Array1::zeros(len);
    let inv = 1.0 / window as f64;
    for l in 0..len {
        let mut acc = 0.0;
        for off in 0..window {
            let idx = (l + off).saturating_sub(half).min(len - 1);
            acc += x[idx];
        }
        trend[l] = acc * inv;
    }
    let seasonal = &x - &trend;
    Ok((seasonal, trend))
}

/// Transpose application of the moving-average operator: scatters `grad`
/// through the same replicate-padded stencil used by [`series_decompose`].
fn moving_average_backward(grad: ArrayView1<'_, f64>, window: usize) -> Array1<f64> {
    let len = grad.len();
    let half = (window - 1) / 2;
    let inv = 1.0 / window as f64;
    let mut out = Array1::zeros(len);
    for l in 0..len {
        let g = grad[l] * inv;
        if g == 0.0 {
            continue;
        }
        for off in 0..window {
            let idx = (l + off).saturating_sub(half).min(len - 1);
            out[idx] += g;
        }
    }
    out
}

/// Per-window instance statistics of one channel.
#[derive(Debug, Clone)]
pub struct RevinStats {
    /// Per-channel window means.
    pub mean: Vec<f64>,
    /// Per-channel window standard deviations (population, without epsilon).
    pub std: Vec<f64>,
}

/// Standardize each channel of an `L x N` window with its own mean and
/// (epsilon-guarded) standard deviation.
pub fn revin_normalize(x: ArrayView2<'_, f64>) -> (Array2<f64>, RevinStats) {
    let (l, n) = x.dim();
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    let mut out = Array2::zeros((l, n));
    for c in 0..n {
        let col = x.column(c);
        let mu = col.sum() / l as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l as f64;
        let sd = var.sqrt();
        let denom = sd + REVIN_EPS;
        for r in 0..l {
            out[[r, c]] = (x[[r, c]] - mu) / denom;
        }
        mean[c] = mu;
        std[c] = sd;
    }
    (out, RevinStats { mean, std })
}

/// Invert [`revin_normalize`] on a forecast using the stored statistics.
pub fn revin_denormalize(y: ArrayView2<'_, f64>, stats: &RevinStats) -> Array2<f64> {
    let (s, n) = y.dim();
    let mut out = Array2::zeros((s, n));
    for c in 0..n {
        let denom = stats.std[c] + REVIN_EPS;
        for r in 0..s {
            out[[r, c]] = y[[r, c]] * denom + stats.mean[c];
        }
    }
    out
}

/// Decomposition-based linear forecaster with separate per-channel seasonal
/// and trend maps.
#[derive(Debug, Clone)]
pub struct DLinearModel {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub decomp_window: usize,
    /// N x L x S
    seasonal_w: Array3<f64>,
    /// N x L x S
    trend_w: Array3<f64>,
    /// N x S
    bias: Array2<f64>,
    version: u64,
}

/// Instance-normalized linear forecaster.
#[derive(Debug, Clone)]
pub struct RLinearModel {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// N x L x S
    weight: Array3<f64>,
    /// N x S
    bias: Array2<f64>,
    version: u64,
}

fn init_weight(rng: &mut impl Rng, n: usize, l: usize, s: usize) -> Array3<f64> {
    let bound = 1.0 / (l as f64).sqrt();
    Array3::from_shape_fn((n, l, s), |_| rng.gen_range(-bound..bound))
}

fn check_dims(lookback: usize, horizon: usize, channels: usize) -> Result<()> {
    if lookback == 0 || horizon == 0 || channels == 0 {
        return Err(Error::Domain(
            "lookback, horizon, and channel count must all be >= 1".to_string(),
        ));
    }
    Ok(())
}

/// Forward tape for a batch through [`DLinearModel`].
#[derive(Debug, Clone)]
pub struct DLinearTape {
    version: u64,
    /// B x L x N
    seasonal: Array3<f64>,
    /// B x L x N
    trend: Array3<f64>,
}

/// Flat parameter gradients of a [`DLinearModel`], same layout as
/// [`DLinearModel::params_flat`].
#[derive(Debug, Clone)]
pub struct DLinearGrads {
    pub seasonal_w: Array3<f64>,
    pub trend_w: Array3<f64>,
    pub bias: Array2<f64>,
}

impl DLinearModel {
    pub fn new(
        lookback: usize,
        horizon: usize,
        channels: usize,
        decomp_window: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_dims(lookback, horizon, channels)?;
        if decomp_window == 0 || decomp_window % 2 == 0 {
            return Err(Error::Domain(format!(
                "decomposition window must be odd and >= 1, got {decomp_window}"
            )));
        }
        Ok(Self {
            lookback,
            horizon,
            channels,
            decomp_window,
            seasonal_w: init_weight(rng, channels, lookback, horizon),
            trend_w: init_weight(rng, channels, lookback, horizon),
            bias: Array2::zeros((channels, horizon)),
            version: 0,
        })
    }

    /// All parameters zero; forecasts are identically zero.
    pub fn zeroed(lookback: usize, horizon: usize, channels: usize, decomp_window: usize) -> Result<Self> {
        check_dims(lookback, horizon, channels)?;
        Ok(Self {
            lookback,
            horizon,
            channels,
            decomp_window,
            seasonal_w: Array3::zeros((channels, lookback, horizon)),
            trend_w: Array3::zeros((channels, lookback, horizon)),
            bias: Array2::zeros((channels, horizon)),
            version: 0,
        })
    }

    pub fn from_parts(
        lookback: usize,
        horizon: usize,
        channels: usize,
        decomp_window: usize,
        seasonal_w: Array3<f64>,
        trend_w: Array3<f64>,
        bias: Array2<f64>,
    ) -> Result<Self> {
        check_dims(lookback, horizon, channels)?;
        let expect = (channels, lookback, horizon);
        if seasonal_w.dim() != expect || trend_w.dim() != expect || bias.dim() != (channels, horizon)
        {
            return Err(Error::Dimension(
                "model parameter shapes do not match the declared dimensions".to_string(),
            ));
        }
        Ok(Self {
            lookback,
            horizon,
            channels,
            decomp_window,
            seasonal_w,
            trend_w,
            bias,
            version: 0,
        })
    }

    /// Forecast one `L x N` window.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut out = Array2::zeros((self.horizon, self.channels));
        for c in 0..self.channels {
            let (seasonal, trend) = series_decompose(x.column(c), self.decomp_window)?;
            self.channel_forward(c, &seasonal, &trend, &mut out);
        }
        Ok(out)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.dim() != (self.lookback, self.channels) {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match (L, N) = ({}, {})",
                x.dim(),
                self.lookback,
                self.channels
            )));
        }
        Ok(())
    }

    fn channel_forward(
        &self,
        c: usize,
        seasonal: &Array1<f64>,
        trend: &Array1<f64>,
        out: &mut Array2<f64>,
    ) {
        let ws = self.seasonal_w.index_axis(Axis(0), c);
        let wt = self.trend_w.index_axis(Axis(0), c);
        let mut acc = vec![0.0_f64; self.horizon];
        for l in 0..self.lookback {
            let sv = seasonal[l];
            let tv = trend[l];
            let ws_row = ws.row(l);
            let wt_row = wt.row(l);
            for s in 0..self.horizon {
                acc[s] += sv * ws_row[s] + tv * wt_row[s];
            }
        }
        for s in 0..self.horizon {
            out[[s, c]] = acc[s] + self.bias[[c, s]];
        }
    }

    /// Forecast a `B x L x N` batch, keeping the decompositions for the
    /// backward pass.
    pub fn forward_batch(&self, x: &Array3<f64>) -> Result<(Array3<f64>, DLinearTape)> {
        let (b_len, l, n) = x.dim();
        if (l, n) != (self.lookback, self.channels) {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match (B, L, N) with L = {}, N = {}",
                x.dim(),
                self.lookback,
                self.channels
            )));
        }
        let mut preds = Array3::zeros((b_len, self.horizon, n));
        let mut seasonal = Array3::zeros((b_len, l, n));
        let mut trend = Array3::zeros((b_len, l, n));
        for b in 0..b_len {
            let sample = x.index_axis(Axis(0), b);
            let mut out = Array2::zeros((self.horizon, n));
            for c in 0..n {
                let (se, tr) = series_decompose(sample.column(c), self.decomp_window)?;
                self.channel_forward(c, &se, &tr, &mut out);
                for r in 0..l {
                    seasonal[[b, r, c]] = se[r];
                    trend[[b, r, c]] = tr[r];
                }
            }
            preds.index_axis_mut(Axis(0), b).assign(&out);
        }
        Ok((
            preds,
            DLinearTape {
                version: self.version,
                seasonal,
                trend,
            },
        ))
    }

    /// Analytic gradients for a batch. Returns parameter gradients and the
    /// gradient with respect to the model input.
    pub fn backward_batch(
        &self,
        tape: &DLinearTape,
        grad_out: &Array3<f64>,
    ) -> Result<(DLinearGrads, Array3<f64>)> {
        if tape.version != self.version {
            return Err(Error::State(
                "stale tape: model parameters changed after this forward".to_string(),
            ));
        }
        let (b_len, l, n) = tape.seasonal.dim();
        if grad_out.dim() != (b_len, self.horizon, n) {
            return Err(Error::Dimension(format!(
                "grad_out shape {:?} does not match (B, S, N)",
                grad_out.dim()
            )));
        }
        let mut grads = DLinearGrads {
            seasonal_w: Array3::zeros(self.seasonal_w.dim()),
            trend_w: Array3::zeros(self.trend_w.dim()),
            bias: Array2::zeros(self.bias.dim()),
        };
        let mut d_x = Array3::zeros((b_len, l, n));
        for b in 0..b_len {
            for c in 0..n {
                let ws = self.seasonal_w.index_axis(Axis(0), c);
               let wt = self.trend_w.index_axis(Axis(0), c);
                let mut d_seasonal = Array1::zeros(l);
                let mut d_trend = Array1::zeros(l);
                for r in 0..l {
                    let sv = tape.seasonal[[b, r, c]];
                    let tv = tape.trend[[b, r, c]];
                    let ws_row = ws.row(r);
                    let wt_row = wt.row(r);
                    let mut acc_s = 0.0;
                    let mut acc_t = 0.0;
                    for s in 0..self.horizon {
                        let g = grad_out[[b, s, c]];
                        grads.seasonal_w[[c, r, s]] += sv * g;
                        grads.trend_w[[c, r, s]] += tv * g;
                        acc_s += ws_row[s] * g;
                        acc_t += wt_row[s] * g;
                    }
                    d_seasonal[r] = acc_s;
                    d_trend[r] = acc_t;
                }
                for s in 0..self.horizon {
                    grads.bias[[c, s]] += grad_out[[b, s, c]];
                }
                // x = seasonal + trend with trend = MA(x):
                // d_x = d_seasonal + MA^T (d_trend - d_seasonal)
                let diff = &d_trend - &d_seasonal;
                let through_ma = moving_average_backward(diff.view(), self.decomp_window);
                for r in 0..l {
                    d_x[[b, r, c]] = d_seasonal[r] + through_ma[r];
                }
            }
        }
        Ok((grads, d_x))
    }

    /// Flat parameter vector: seasonal weights, then trend weights, then bias,
    /// all in row-major order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.seasonal_w.len() + self.trend_w.len() + self.bias.len());
        out.extend(self.seasonal_w.iter());
        out.extend(self.trend_w.iter());
        out.extend(self.bias.iter());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expect = self.seasonal_w.len() + self.trend_w.len() + self.bias.len();
        if flat.len() != expect {
            return Err(Error::Dimension(format!(
                "expected {expect} parameters, got {}",
                flat.len()
            )));
        }
        let (a, rest) = flat.split_at(self.seasonal_w.len());
        let (b, c) = rest.split_at(self.trend_w.len());
        for (dst, src) in self.seasonal_w.iter_mut().zip(a) {
            *dst = *src;
        }
        for (dst, src) in self.trend_w.iter_mut().zip(b) {
            *dst = *src;
        }
        for (dst, src) in self.bias.iter_mut().zip(c) {
            *dst = *src;
        }
        self.version += 1;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.seasonal_w.len() + self.trend_w.len() + self.bias.len()
    }

    pub fn seasonal_weights(&self) -> &Array3<f64> {
        &self.seasonal_w
    }

    pub fn trend_weights(&self) -> &Array3<f64> {
        &self.trend_w
    }

    pub fn bias(&self) -> &Array2<f64> {
        &self.bias
    }
}

impl DLinearGrads {
    /// Same layout as [`DLinearModel::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.seasonal_w.len() + self.trend_w.len() + self.bias.len());
        out.extend(self.seasonal_w.iter());
        out.extend(self.trend_w.iter());
        out.extend(self.bias.iter());
        out
    }
}

/// Forward tape for a batch through the linear stage of [`RLinearModel`].
#[derive(Debug, Clone)]
pub struct RLinearTape {
    version: u64,
    /// Linear-stage input, B x L x N (normalized window, possibly transformed
    /// by an attention module).
    pub input: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct RLinearGrads {
    pub weight: Array3<f64>,
    pub bias: Array2<f64>,
}

impl RLinearModel {
    pub fn new(lookback: usize, horizon: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        check_dims(lookback, horizon, channels)?;
        Ok(Self {
            lookback,
            horizon,
            channels,
            weight: init_weight(rng, channels, lookback, horizon),
            bias: Array2::zeros((channels, horizon)),
            version: 0,
        })
    }

    pub fn zeroed(lookback: usize, horizon: usize, channels: usize) -> Result<Self> {
        check_dims(lookback, horizon, channels)?;
        Ok(Self {
            lookback,
            horizon,
            channels,
            weight: Array3::zeros((channels, lookback, horizon)),
            bias: Array2::zeros((channels, horizon)),
            version: 0,
        })
    }

    pub fn from_parts(
        lookback: usize,
        horizon: usize,
        channels: usize,
        weight: Array3<f64>,
        bias: Array2<f64>,
    ) -> Result<Self> {
        check_dims(lookback, horizon, channels)?;
        if weight.dim() != (channels, lookback, horizon) || bias.dim() != (channels, horizon) {
            return Err(Error::Dimension(
                "model parameter shapes do not match the declared dimensions".to_string(),
            ));
        }
        Ok(Self {
            lookback,
            horizon,
            channels,
            weight,
            bias,
            version: 0,
        })
    }

    /// Full forward for one window: normalize, linear map, denormalize.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.dim() != (self.lookback, self.channels) {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match (L, N) = ({}, {})",
                x.dim(),
                self.lookback,
                self.channels
            )));
        }
        let (normed, stats) = revin_normalize(x);
        let y = self.linear(normed.view());
        Ok(revin_denormalize(y.view(), &stats))
    }

    fn linear(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.horizon, self.channels));
        for c in 0..self.channels {
            let w = self.weight.index_axis(Axis(0), c);
            let mut acc = vec![0.0_f64; self.horizon];
            for l in 0..self.lookback {
                let xv = x[[l, c]];
                let w_row = w.row(l);
                for s in 0..self.horizon {
                    acc[s] += xv * w_row[s];
                }
            }
            for s in 0..self.horizon {
                out[[s, c]] = acc[s] + self.bias[[c, s]];
            }
        }
        out
    }

    /// Linear stage over a batch of (already normalized) windows.
    pub fn linear_forward_batch(&self, x: &Array3<f64>) -> Result<(Array3<f64>, RLinearTape)> {
        let (b_len, l, n) = x.dim();
        if (l, n) != (self.lookback, self.channels) {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match L = {}, N = {}",
                x.dim(),
                self.lookback,
                self.channels
            )));
        }
        let mut out = Array3::zeros((b_len, self.horizon, n));
        for b in 0..b_len {
            let y = self.linear(x.index_axis(Axis(0), b));
            out.index_axis_mut(Axis(0), b).assign(&y);
        }
        Ok((
            out,
            RLinearTape {
                version: self.version,
                input: x.clone(),
            },
        ))
    }

    /// Backward of the linear stage: parameter gradients plus the gradient
    /// with respect to the stage input.
    pub fn linear_backward_batch(
        &self,
        tape: &RLinearTape,
        grad_out: &Array3<f64>,
    ) -> Result<(RLinearGrads, Array3<f64>)> {
        if tape.version != self.version {
            return Err(Error::State(
                "stale tape: model parameters changed after this forward".to_string(),
            ));
        }
        let (b_len, l, n) = tape.input.dim();
        if grad_out.dim() != (b_len, self.horizon, n) {
            return Err(Error::Dimension(format!(
                "grad_out shape {:?} does not match (B, S, N)",
                grad_out.dim()
            )));
        }
        let mut grads = RLinearGrads {
            weight: Array3::zeros(self.weight.dim()),
            bias: Array2::zeros(self.bias.dim()),
        };
        let mut d_x = Array3::zeros((b_len, l, n));
        for b in 0..b_len {
            for c in 0..n {
                let w = self.weight.index_axis(Axis(0), c);
                for r in 0..l {
                    let xv = tape.input[[b, r, c]];
                    let w_row = w.row(r);
                    let mut acc = 0.0;
                    for s in 0..self.horizon {
                        let g = grad_out[[b, s, c]];
                        grads.weight[[c, r, s]] += xv * g;
                        acc += w_row[s] * g;
                    }
                    d_x[[b, r, c]] = acc;
                }
                for s in 0..self.horizon {
                    grads.bias[[c, s]] += grad_out[[b, s, c]];
                }
            }
        }
        Ok((grads, d_x))
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight.len() + self.bias.len());
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expect = self.weight.len() + self.bias.len();
        if flat.len() != expect {
            return Err(Error::Dimension(format!(
                "expected {expect} parameters, got {}",
                flat.len()
            )));
        }
        let (a, b) = flat.split_at(self.weight.len());
        for (dst, src) in self.weight.iter_mut().zip(a) {
            *dst = *src;
        }
        for (dst, src) in self.bias.iter_mut().zip(b) {
            *dst = *src;
        }
        self.version += 1;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array2<f64> {
        &self.bias
    }
}

impl RLinearGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight.len() + self.bias.len());
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
        out
    }
}

/// Backward through [`revin_normalize`] and [`revin_denormalize`] for one
/// sample and channel set. `d_normed` is the gradient arriving at the
/// normalized window, `d_mean` and `d_denom` are gradients arriving directly
/// at the per-channel mean and epsilon-guarded deviation (from the
/// denormalization stage); returns the gradient at the raw window.
pub fn revin_backward(
    x: ArrayView2<'_, f64>,
    stats: &RevinStats,
    d_normed: ArrayView2<'_, f64>,
    d_mean: &[f64],
    d_denom: &[f64],
) -> Array2<f64> {
    let (l, n) = x.dim();
    let lf = l as f64;
    let mut d_x = Array2::zeros((l, n));
    for c in 0..n {
        let mu = stats.mean[c];
        let sd = stats.std[c];
        let denom = sd + REVIN_EPS;
        let mut sum_dn = 0.0;
        let mut sum_dn_u = 0.0;
        for r in 0..l {
            let u = (x[[r, c]] - mu) / denom;
            sum_dn += d_normed[[r, c]];
            sum_dn_u += d_normed[[r, c]] * u;
        }
        let total_d_mean = d_mean[c] - sum_dn / denom;
        let total_d_denom = d_denom[c] - sum_dn_u / denom;
        // denom = sqrt(var) + eps; d var = d denom / (2 sqrt(var))
        let d_var = if sd > 0.0 { total_d_denom / (2.0 * sd) } else { 0.0 };
        for r in 0..l {
            let centered = x[[r, c]] - mu;
            d_x[[r, c]] = d_normed[[r, c]] / denom
                + total_d_mean / lf
                + d_var * 2.0 * centered / lf;
        }
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decompose_constant_series() {
        let x = Array1::from_elem(9, 3.5);
        let (seasonal, trend) = series_decompose(x.view(), 5).unwrap();
        for l in 0..9 {
            assert!((trend[l] - 3.5).abs() < 1e-15);
            assert!(seasonal[l].abs() < 1e-15);
        }
    }

    #[test]
    fn decompose_window_one_is_degenerate() {
        let x = array![1.0, -2.0, 4.0];
        let (seasonal, trend) = series_decompose(x.view(), 1).unwrap();
        assert_eq!(trend, x);
        assert!(seasonal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompose_hand_computed_example() {
        let x = array![1.0, 2.0, 3.0, 4.0, 5.0];
        let (seasonal, trend) = series_decompose(x.view(), 3).unwrap();
        let expected = [4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0];
        for l in 0..5 {
            assert!((trend[l] - expected[l]).abs() < 1e-14, "trend[{l}]");
            assert!((seasonal[l] - (x[l] - expected[l])).abs() < 1e-14);
        }
    }

    #[test]
    fn decompose_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let x = Array1::from((0..40).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<f64>>());
        let (seasonal, trend) = series_decompose(x.view(), 25).unwrap();
        for l in 0..40 {
            let back = seasonal[l] + trend[l];
            assert!((back - x[l]).abs() <= f64::EPSILON * x[l].abs().max(1.0));
        }
    }

    #[test]
    fn decompose_rejects_even_window() {
        let x = array![1.0, 2.0];
        assert!(matches!(
            series_decompose(x.view(), 4),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn dlinear_zero_params_zero_forecast() {
        let model = DLinearModel::zeroed(8, 3, 2, 3).unwrap();
        let x = Array2::from_elem((8, 2), 1.7);
        let out = model.forward(x.view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dlinear_linear_in_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = DLinearModel::new(6, 2, 1, 3, &mut rng).unwrap();
        let one = model.forward(Array2::from_elem((6, 1), 1.0).view()).unwrap();
        let three = model.forward(Array2::from_elem((6, 1), 3.0).view()).unwrap();
        // bias is zero at init, so scaling the input scales the output
        for s in 0..2 {
            assert!((three[[s, 0]] - 3.0 * one[[s, 0]]).abs() < 1e-12);
        }
    }

    /// Naive triple-loop oracle for the decomposition forecaster.
    fn dlinear_oracle(model: &DLinearModel, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((model.horizon, model.channels));
        for c in 0..model.channels {
            let (seasonal, trend) = series_decompose(x.column(c), model.decomp_window).unwrap();
            for s in 0..model.horizon {
                let mut acc = model.bias()[[c, s]];
                for l in 0..model.lookback {
                    acc += seasonal[l] * model.seasonal_weights()[[c, l, s]]
                        + trend[l] * model.trend_weights()[[c, l, s]];
                }
                out[[s, c]] = acc;
            }
        }
        out
    }

    #[test]
    fn dlinear_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        use rand::Rng;
        let mut model = DLinearModel::new(7, 4, 3, 5, &mut rng).unwrap();
        let mut params = model.params_flat();
        for p in params.iter_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        model.set_params_flat(&params).unwrap();
        let x = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-2.0..2.0));
        let fast = model.forward(x.view()).unwrap();
        let slow = dlinear_oracle(&model, x.view());
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn revin_constant_channel_normalizes_to_zero() {
        let x = Array2::from_elem((5, 2), 4.0);
        let (normed, stats) = revin_normalize(x.view());
        assert!(normed.iter().all(|&v| v == 0.0));
        assert_eq!(stats.std, vec![0.0, 0.0]);
    }

    #[test]
    fn revin_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        use rand::Rng;
        let x = Array2::from_shape_fn((12, 3), |_| rng.gen_range(-4.0..4.0));
        let (normed, stats) = revin_normalize(x.view());
        let back = revin_denormalize(normed.view(), &stats);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn revin_two_point_example() {
        let x = array![[0.0], [2.0]];
        let (normed, stats) = revin_normalize(x.view());
        assert!((stats.mean[0] - 1.0).abs() < 1e-15);
        assert!((stats.std[0] - 1.0).abs() < 1e-15);
        let expected = 1.0 / (1.0 + REVIN_EPS);
        assert!((normed[[0, 0]] + expected).abs() < 1e-15);
        assert!((normed[[1, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn rlinear_zero_weights_forecast_window_mean() {
        let model = RLinearModel::zeroed(6, 3, 2).unwrap();
        let mut x = Array2::zeros((6, 2));
        for r in 0..6 {
            x[[r, 0]] = r as f64;
            x[[r, 1]] = 10.0 - r as f64;
        }
        let out = model.forward(x.view()).unwrap();
        for s in 0..3 {
            assert!((out[[s, 0]] - 2.5).abs() < 1e-12);
            assert!((out[[s, 1]] - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rlinear_scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        use rand::Rng;
        let model = RLinearModel::new(9, 4, 2, &mut rng).unwrap();
        let x = Array2::from_shape_fn((9, 2), |_| rng.gen_range(-2.0..2.0));
        let (a, b) = (2.75, -1.25);
        let scaled = x.mapv(|v| a * v + b);
        let base = model.forward(x.view()).unwrap();
        let shifted = model.forward(scaled.view()).unwrap();
        for (lhs, rhs) in shifted.iter().zip(base.iter()) {
            assert!((lhs - (a * rhs + b)).abs() <= 1e-10);
        }
    }

    /// Naive oracle for the instance-normalized forecaster.
    fn rlinear_oracle(model: &RLinearModel, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (normed, stats) = revin_normalize(x);
        let mut out = Array2::zeros((model.horizon, model.channels));
        for c in 0..model.channels {
            for s in 0..model.horizon {
                let mut acc = model.bias()[[c, s]];
                for l in 0..model.lookback {
                    acc += normed[[l, c]] * model.weights()[[c, l, s]];
                }
                out[[s, c]] = acc * (stats.std[c] + REVIN_EPS) + stats.mean[c];
            }
        }
        out
    }

    #[test]
    fn rlinear_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        use rand::Rng;
        let mut model = RLinearModel::new(8, 3, 2, &mut rng).unwrap();
        let mut params = model.params_flat();
        for p in params.iter_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        model.set_params_flat(&params).unwrap();
        let x = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-3.0..3.0));
        let fast = model.forward(x.view()).unwrap();
        let slow = rlinear_oracle(&model, x.view());
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dlinear_backward_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let model = DLinearModel::new(5, 2, 2, 3, &mut rng).unwrap();
        let x = Array3::from_shape_fn((3, 5, 2), |_| 0.5);
        let (_, tape) = model.forward_batch(&x).unwrap();
        let (grads, d_x) = model
            .backward_batch(&tape, &Array3::zeros((3, 2, 2)))
            .unwrap();
        assert!(grads.flat().iter().all(|&v| v == 0.0));
        assert!(d_x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dlinear_input_grad_independent_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        use rand::Rng;
        let model = DLinearModel::new(5, 2, 1, 3, &mut rng).unwrap();
        let g = Array3::from_shape_fn((1, 2, 1), |_| rng.gen_range(-1.0..1.0));
        let x1 = Array3::from_shape_fn((1, 5, 1), |_| rng.gen_range(-2.0..2.0));
        let x2 = Array3::from_shape_fn((1, 5, 1), |_| rng.gen_range(-2.0..2.0));
        let (_, t1) = model.forward_batch(&x1).unwrap();
        let (_, d1) = model.backward_batch(&t1, &g).unwrap();
        let (_, t2) = model.forward_batch(&x2).unwrap();
        let (_, d2) = model.backward_batch(&t2, &g).unwrap();
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn stale_model_tape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut model = DLinearModel::new(4, 2, 1, 3, &mut rng).unwrap();
        let x = Array3::zeros((1, 4, 1));
        let (_, tape) = model.forward_batch(&x).unwrap();
        let params = model.params_flat();
        model.set_params_flat(&params).unwrap();
        assert!(matches!(
            model.backward_batch(&tape, &Array3::zeros((1, 2, 1))),
            Err(Error::State(_))
        ));
    }

    /// Central-difference check of both models' parameter and input
    /// gradients through a quadratic readout.
    #[test]
    fn model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        use rand::Rng;
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-3);

        // DLinear
        let model = DLinearModel::new(6, 3, 2, 3, &mut rng).unwrap();
        let x = Array3::from_shape_fn((2, 6, 2), |_| rng.gen_range(-2.0..2.0));
        let g = Array3::from_shape_fn((2, 3, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |m: &DLinearModel, xs: &Array3<f64>| -> f64 {
            let (p, _) = m.forward_batch(xs).unwrap();
            p.iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = model.forward_batch(&x).unwrap();
        let (grads, d_x) = model.backward_batch(&tape, &g).unwrap();
        let flat = grads.flat();
        let base_params = model.params_flat();
        for idx in 0..base_params.len() {
            let mut hi = model.clone();
            let mut p = base_params.clone();
            p[idx] += h;
            hi.set_params_flat(&p).unwrap();
            let mut lo = model.clone();
            p[idx] -= 2.0 * h;
            lo.set_params_flat(&p).unwrap();
            let n = (loss(&hi, &x) - loss(&lo, &x)) / (2.0 * h);
            assert!(rel(flat[idx], n) < 1e-5, "dlinear param {idx}");
        }
        for (idx, _) in x.indexed_iter() {
            let mut hi = x.clone();
            hi[idx] += h;
            let mut lo = x.clone();
            lo[idx] -= h;
            let n = (loss(&model, &hi) - loss(&model, &lo)) / (2.0 * h);
            assert!(rel(d_x[idx], n) < 1e-5, "dlinear input {idx:?}");
        }

        // RLinear linear stage
        let rmodel = RLinearModel::new(5, 2, 2, &mut rng).unwrap();
        let xn = Array3::from_shape_fn((2, 5, 2), |_| rng.gen_range(-2.0..2.0));
        let g2 = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let loss2 = |m: &RLinearModel, xs: &Array3<f64>| -> f64 {
            let (p, _) = m.linear_forward_batch(xs).unwrap();
            p.iter().zip(g2.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, tape2) = rmodel.linear_forward_batch(&xn).unwrap();
        let (grads2, d_xn) = rmodel.linear_backward_batch(&tape2, &g2).unwrap();
        let flat2 = grads2.flat();
        let base2 = rmodel.params_flat();
        for idx in 0..base2.len() {
            let mut hi = rmodel.clone();
            let mut p = base2.clone();
            p[idx] += h;
            hi.set_params_flat(&p).unwrap();
            let mut lo = rmodel.clone();
            p[idx] -= 2.0 * h;
            lo.set_params_flat(&p).unwrap();
            let n = (loss2(&hi, &xn) - loss2(&lo, &xn)) / (2.0 * h);
            assert!(rel(flat2[idx], n) < 1e-5, "rlinear param {idx}");
        }
        for (idx, _) in xn.indexed_iter() {
            let mut hi = xn.clone();
            hi[idx] += h;
            let mut lo = xn.clone();
            lo[idx] -= h;
            let n = (loss2(&rmodel, &hi) - loss2(&rmodel, &lo)) / (2.0 * h);
            assert!(rel(d_xn[idx], n) < 1e-5, "rlinear input {idx:?}");
        }
    }

    /// The instance-normalization backward, including the statistic paths
    /// used by the denormalization stage.
    #[test]
    fn revin_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        use rand::Rng;
        let h = 1e-6;
        let (l, n) = (7, 2);
        let x = Array2::from_shape_fn((l, n), |_| rng.gen_range(-2.0..2.0));
        let g_norm = Array2::from_shape_fn((l, n), |_| rng.gen_range(-1.0..1.0));
        let g_mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g_denom: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // scalar readout touching all three outputs of the normalizer
        let eval = |xs: &Array2<f64>| -> f64 {
            let (normed, stats) = revin_normalize(xs.view());
            let mut acc = 0.0;
            for c in 0..n {
                acc += g_mean[c] * stats.mean[c] + g_denom[c] * (stats.std[c] + REVIN_EPS);
            }
            acc + normed.iter().zip(g_norm.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, stats) = revin_normalize(x.view());
        let d_x = revin_backward(x.view(), &stats, g_norm.view(), &g_mean, &g_denom);
        for (idx, _) in x.indexed_iter() {
            let mut hi = x.clone();
            hi[idx] += h;
            let mut lo = x.clone();
            lo[idx] -= h;
            let nu = (eval(&hi) - eval(&lo)) / (2.0 * h);
            let a = d_x[idx];
            assert!(
                (a - nu).abs() / (a.abs() + nu.abs()).max(1e-3) < 1e-5,
                "revin input {idx:?}: analytic {a} vs fd {nu}"
            );
        }
    }
}
