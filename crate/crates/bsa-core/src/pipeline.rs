//! Composition of a base forecaster with an optional spectral attention
//! module at its input, plus the MSE loss and flat parameter-group plumbing
//! used by the optimizer and the gradient checker.
//!
//! Insertion points:
//! - decomposition model: the module transforms the raw look-back window
//!   right before series decomposition;
//! - instance-normalized model: the module transforms the normalized window
//!   right before the linear layer, and the forecast is denormalized with the
//!   sample's own statistics.
//!
//! The module's feature axis equals the channel count: it is applied
//! position-wise across the look-back window with shared parameters, and its
//! momentum stream is driven by the value at the most recent position, one
//! update per sample.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::forecaster::{
    revin_backward, revin_denormalize, revin_normalize, DLinearModel, DLinearTape, RLinearModel,
    RLinearTape, RevinStats, REVIN_EPS,
};
use crate::spectral::{SaTape, SpectralAttention};

/// The two supported base forecasters.
#[derive(Debug, Clone)]
pub enum BaseModel {
    DLinear(DLinearModel),
    RLinear(RLinearModel),
}

impl BaseModel {
    pub fn lookback(&self) -> usize {
        match self {
            BaseModel::DLinear(m) => m.lookback,
            BaseModel::RLinear(m) => m.lookback,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            BaseModel::DLinear(m) => m.horizon,
            BaseModel::RLinear(m) => m.horizon,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            BaseModel::DLinear(m) => m.channels,
            BaseModel::RLinear(m) => m.channels,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BaseModel::DLinear(_) => "dlinear",
            BaseModel::RLinear(_) => "rlinear",
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            BaseModel::DLinear(m) => m.num_params(),
            BaseModel::RLinear(m) => m.num_params(),
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            BaseModel::DLinear(m) => m.params_flat(),
            BaseModel::RLinear(m) => m.params_flat(),
        }
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            BaseModel::DLinear(m) => m.set_params_flat(flat),
            BaseModel::RLinear(m) => m.set_params_flat(flat),
        }
    }
}

/// Parameter groups with independent learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Model,
    SaMatrix,
    Smoothing,
}

/// A forecaster plus an optional attention module at its insertion point.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub model: BaseModel,
    pub bsa: Option<SpectralAttention>,
}

enum ModelTape {
    DLinear(DLinearTape),
    RLinear {
        /// Raw inputs, B x L x N.
        inputs: Array3<f64>,
        /// Per-sample normalization statistics.
        stats: Vec<RevinStats>,
        /// Pre-denormalization forecasts, B x S x N.
        normed_preds: Array3<f64>,
        linear: RLinearTape,
    },
}

/// Everything needed to run the backward pass of one batch.
pub struct PipelineTape {
    sa: Option<SaTape>,
    model: ModelTape,
}

/// Flat gradients per parameter group plus the input gradient.
#[derive(Debug, Clone)]
pub struct PipelineGrads {
    pub model: Vec<f64>,
    pub sa_matrix: Vec<f64>,
    pub smoothing: Vec<f64>,
    /// B x L x N
    pub inputs: Array3<f64>,
}

impl Pipeline {
    pub fn new(model: BaseModel, bsa: Option<SpectralAttention>) -> Result<Self> {
        if let Some(sa) = &bsa {
            if sa.num_features() != model.channels() {
                return Err(Error::Dimension(format!(
                    "attention module has {} features but the model has {} channels",
                    sa.num_features(),
                    model.channels()
                )));
            }
        }
        Ok(Self { model, bsa })
    }

    /// The feature vector that drives the momentum stream for a sample: the
    /// last look-back position, normalized first for the instance-normalized
    /// model.
    pub fn momentum_driver(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        match &self.model {
            BaseModel::DLinear(_) => input.to_owned(),
            BaseModel::RLinear(_) => revin_normalize(input).0,
        }
    }

    /// Initialize the module's momentum from the first sample of an epoch.
    pub fn init_momentum_from(&mut self, first_input: ArrayView2<'_, f64>) -> Result<()> {
        let transformed = self.momentum_driver(first_input);
        let last = transformed.nrows() - 1;
        let driver = transformed.row(last).to_owned();
        if let Some(sa) = &mut self.bsa {
            sa.init_momentum(driver.view())?;
        }
        Ok(())
    }

    /// Forward a `B x L x N` batch to `B x S x N` forecasts. With `training`
    /// set, returns the tape for [`Pipeline::backward_batch`]; the attention
    /// momentum advances in both modes.
    pub fn forward_batch(
        &mut self,
        inputs: &Array3<f64>,
        training: bool,
    ) -> Result<(Array3<f64>, Option<PipelineTape>)> {
        let (b_len, l, n) = inputs.dim();
        if l != self.model.lookback() || n != self.model.channels() {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match the model's (L, N) = ({}, {})",
                inputs.dim(),
                self.model.lookback(),
                self.model.channels()
            )));
        }
        match &mut self.model {
            BaseModel::DLinear(model) => {
                let (x, sa_tape) = match &mut self.bsa {
                    Some(sa) => {
                        let (x, tape) = sa.forward_window(inputs, training)?;
                        (x, tape)
                    }
                    None => (inputs.clone(), None),
                };
                let (preds, model_tape) = model.forward_batch(&x)?;
                let tape = training.then_some(PipelineTape {
                    sa: sa_tape,
                    model: ModelTape::DLinear(model_tape),
                });
                Ok((preds, tape))
            }
            BaseModel::RLinear(model) => {
                let mut normed = Array3::zeros((b_len, l, n));
                let mut stats = Vec::with_capacity(b_len);
                for b in 0..b_len {
                    let (xn, st) = revin_normalize(inputs.index_axis(Axis(0), b));
                    normed.index_axis_mut(Axis(0), b).assign(&xn);
                    stats.push(st);
                }
                let (x, sa_tape) = match &mut self.bsa {
                    Some(sa) => {
                        let (x, tape) = sa.forward_window(&normed, training)?;
                        (x, tape)
                    }
                    None => (normed, None),
                };
                let (normed_preds, linear_tape) = model.linear_forward_batch(&x)?;
                let s = model.horizon;
                let mut preds = Array3::zeros((b_len, s, n));
                for b in 0..b_len {
                    let y = revin_denormalize(normed_preds.index_axis(Axis(0), b), &stats[b]);
                    preds.index_axis_mut(Axis(0), b).assign(&y);
                }
                let tape = training.then_some(PipelineTape {
                    sa: sa_tape,
                    model: ModelTape::RLinear {
                        inputs: inputs.clone(),
                        stats,
                        normed_preds,
                        linear: linear_tape,
                    },
                });
                Ok((preds, tape))
            }
        }
    }

    /// Exact gradients of a scalar loss given its gradient at the forecasts.
    pub fn backward_batch(
        &self,
        tape: &PipelineTape,
        grad_preds: &Array3<f64>,
    ) -> Result<PipelineGrads> {
        match (&self.model, &tape.model) {
            (BaseModel::DLinear(model), ModelTape::DLinear(model_tape)) => {
                let (grads, d_x) = model.backward_batch(model_tape, grad_preds)?;
                let (sa_matrix, smoothing, d_inputs) = self.attention_backward(&tape.sa, d_x)?;
                Ok(PipelineGrads {
                    model: grads.flat(),
                    sa_matrix,
                    smoothing,
                    inputs: d_inputs,
                })
            }
            (BaseModel::RLinear(model), ModelTape::RLinear {
                inputs,
                stats,
                normed_preds,
                linear,
            }) => {
                let (b_len, _, n) = inputs.dim();
                let s = model.horizon;
                // denormalization: out = y_norm * (std + eps) + mean
                let mut d_normed_preds = Array3::zeros((b_len, s, n));
                let mut d_mean = vec![vec![0.0_f64; n]; b_len];
                let mut d_denom = vec![vec![0.0_f64; n]; b_len];
                for b in 0..b_len {
                    for c in 0..n {
                        let denom = stats[b].std[c] + REVIN_EPS;
                        for si in 0..s {
                            let g = grad_preds[[b, si, c]];
                            d_normed_preds[[b, si, c]] = g * denom;
                            d_denom[b][c] += g * normed_preds[[b, si, c]];
                            d_mean[b][c] += g;
                        }
                    }
                }
                let (grads, d_linear_in) = model.linear_backward_batch(linear, &d_normed_preds)?;
                let (sa_matrix, smoothing, d_normed) =
                    self.attention_backward(&tape.sa, d_linear_in)?;
                // back through the per-sample normalization
                let mut d_inputs = Array3::zeros(inputs.dim());
                for b in 0..b_len {
                    let d_x = revin_backward(
                        inputs.index_axis(Axis(0), b),
                        &stats[b],
                        d_normed.index_axis(Axis(0), b),
                        &d_mean[b],
                        &d_denom[b],
                    );
                    d_inputs.index_axis_mut(Axis(0), b).assign(&d_x);
                }
                Ok(PipelineGrads {
                    model: grads.flat(),
                    sa_matrix,
                    smoothing,
                    inputs: d_inputs,
                })
            }
            _ => Err(Error::State(
                "tape does not belong to this pipeline's model".to_string(),
            )),
        }
    }

    fn attention_backward(
        &self,
        sa_tape: &Option<SaTape>,
        d_x: Array3<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>, Array3<f64>)> {
        match (&self.bsa, sa_tape) {
            (Some(sa), Some(tape)) => {
                let grads = sa.backward_window(tape, &d_x)?;
                Ok((
                    grads.sa_matrix.iter().cloned().collect(),
                    grads.raw_smoothing,
                    grads.window,
                ))
            }
            (None, None) => Ok((Vec::new(), Vec::new(), d_x)),
            _ => Err(Error::State(
                "attention tape does not match the pipeline configuration".to_string(),
            )),
        }
    }

    pub fn num_params(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Model => self.model.num_params(),
            ParamGroup::SaMatrix => self.bsa.as_ref().map_or(0, |sa| sa.sa_matrix().len()),
            ParamGroup::Smoothing => self.bsa.as_ref().map_or(0, |sa| sa.num_factors()),
        }
    }

    pub fn params(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::Model => self.model.params_flat(),
            ParamGroup::SaMatrix => self
                .bsa
                .as_ref()
                .map_or(Vec::new(), |sa| sa.sa_matrix().iter().cloned().collect()),
            ParamGroup::Smoothing => self
                .bsa
                .as_ref()
                .map_or(Vec::new(), |sa| sa.raw_smoothing().to_vec()),
        }
    }

    pub fn set_params(&mut self, group: ParamGroup, flat: &[f64]) -> Result<()> {
        match group {
            ParamGroup::Model => self.model.set_params_flat(flat),
            ParamGroup::SaMatrix => {
                let sa = self.bsa.as_mut().ok_or_else(|| {
                    Error::State("pipeline has no attention module".to_string())
                })?;
                let dim = sa.sa_matrix().dim();
                if flat.len() != dim.0 * dim.1 {
                    return Err(Error::Dimension(format!(
                        "expected {} logits, got {}",
                        dim.0 * dim.1,
                        flat.len()
                    )));
                }
                let new = Array2::from_shape_vec(dim, flat.to_vec())
                    .map_err(|e| Error::Dimension(e.to_string()))?;
                sa.sa_matrix_mut().assign(&new);
                Ok(())
            }
            ParamGroup::Smoothing => {
                let sa = self.bsa.as_mut().ok_or_else(|| {
                    Error::State("pipeline has no attention module".to_string())
                })?;
                sa.set_raw_smoothing(flat)
            }
        }
    }

    /// Snapshot of the attention momentum, used to restore state around
    /// repeated evaluations.
    pub fn momentum_snapshot(&self) -> Option<Array2<f64>> {
        self.bsa
            .as_ref()
            .and_then(|sa| sa.momentum().map(|m| m.to_owned()))
    }

    pub fn restore_momentum(&mut self, snapshot: &Option<Array2<f64>>) -> Result<()> {
        if let Some(sa) = &mut self.bsa {
            match snapshot {
                Some(m) => sa.set_momentum(m.clone())?,
                None => sa.clear_momentum(),
            }
        }
        Ok(())
    }
}

/// Mean squared error over every coordinate of the batch.
pub fn mse_loss(preds: &Array3<f64>, targets: &Array3<f64>) -> Result<f64> {
    if preds.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} does not match target shape {:?}",
            preds.dim(),
            targets.dim()
        )));
    }
    let n = preds.len() as f64;
    Ok(preds
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse_loss`] at the predictions.
pub fn mse_grad(preds: &Array3<f64>, targets: &Array3<f64>) -> Result<Array3<f64>> {
    if preds.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} does not match target shape {:?}",
            preds.dim(),
            targets.dim()
        )));
    }
    let n = preds.len() as f64;
    let mut out = Array3::zeros(preds.dim());
    for (o, (p, t)) in out.iter_mut().zip(preds.iter().zip(targets.iter())) {
        *o = 2.0 * (p - t) / n;
    }
    Ok(out)
}

/// Per-sample mean squared errors (mean over horizon and channels).
pub fn per_sample_mse(preds: &Array3<f64>, targets: &Array3<f64>) -> Result<Vec<f64>> {
    if preds.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} does not match target shape {:?}",
            preds.dim(),
            targets.dim()
        )));
    }
    let (b_len, s, n) = preds.dim();
    let denom = (s * n) as f64;
    let mut out = Vec::with_capacity(b_len);
    for b in 0..b_len {
        let mut acc = 0.0;
        for si in 0..s {
            for c in 0..n {
                let d = preds[[b, si, c]] - targets[[b, si, c]];
                acc += d * d;
            }
        }
        out.push(acc / denom);
    }
    Ok(out)
}
