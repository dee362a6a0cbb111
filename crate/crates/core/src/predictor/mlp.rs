//! Fully connected ReLU network producing the utilization-law coefficients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureScaling, FeatureVector, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;

/// Lower bound applied to predicted utilization.
pub const UTIL_FLOOR: f64 = 1e-4;

/// Layer sizes: `inputs -> hidden`, `hidden_layers` x `hidden -> hidden`, `hidden -> 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub inputs: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            inputs: NUM_FEATURES,
            hidden: 512,
            hidden_layers: 8,
        }
    }
}

impl Architecture {
    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s = vec![(self.inputs, self.hidden)];
        s.extend(std::iter::repeat_n((self.hidden, self.hidden), self.hidden_layers));
        s.push((self.hidden, 2));
        s
    }
}

/// One affine layer; `weight` is `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub layers: Vec<Dense>,
    pub scaling: FeatureScaling,
}

/// Coefficients of `utilization = alpha - beta / waves`, both in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilCoeffs {
    pub alpha: f64,
    pub beta: f64,
}

impl MlpWeights {
    pub fn zeros(arch: Architecture, scaling: FeatureScaling) -> Self {
        MlpWeights {
            layers: arch.shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            scaling,
        }
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn init(arch: Architecture, scaling: FeatureScaling, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .shapes()
            .into_iter()
            .map(|(i, o)| {
                let bound = (6.0 / i as f64).sqrt();
                let mut layer = Dense::zeros(i, o);
                layer
                    .weight
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-bound..bound));
                layer
            })
            .collect();
        MlpWeights { layers, scaling }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Layer shapes chain, the output has two units and all entries are finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.weight.ncols()
                )));
            }
            if i > 0 && self.layers[i - 1].weight.ncols() != l.weight.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.weight.nrows(),
                    i - 1,
                    self.layers[i - 1].weight.ncols()
                )));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("layer {i} has non-finite entries")));
            }
        }
        if self.output_dim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "network must produce 2 outputs, produces {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid outputs for a batch of model inputs (`n x inputs`).
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weight) + &l.bias;
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    /// Forward pass keeping every layer input for backpropagation.
    /// `acts[i]` is the input to layer `i`; the return value is the logits.
    pub(crate) fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.weight) + &l.bias;
            acts.push(h);
            h = if i < last { z.mapv(relu) } else { z };
        }
        (acts, h)
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the logits.
    pub(crate) fn backward(&self, acts: &[Array2<f64>], d_logits: Array2<f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits;
        for i in (0..self.layers.len()).rev() {
            let input = &acts[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut d_in = delta.dot(&self.layers[i].weight.t());
                // acts[i] is the ReLU output of layer i-1
                ndarray::Zip::from(&mut d_in)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = d_in;
            }
            grads.push(Dense { weight: gw, bias: gb });
        }
        grads.reverse();
        grads
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

pub fn predict_coeffs(w: &MlpWeights, x: &FeatureVector) -> Result<UtilCoeffs> {
    if w.input_dim() != NUM_FEATURES {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} inputs, feature vector has {NUM_FEATURES}",
            w.input_dim()
        )));
    }
    if w.output_dim() != 2 {
        return Err(Error::ShapeMismatch(format!("network produces {} outputs, need 2", w.output_dim())));
    }
    let input = x.model_input(w.scaling);
    let row = ArrayView2::from_shape((1, NUM_FEATURES), &input).expect("1 x 5 view");
    let out = w.forward(row);
    Ok(UtilCoeffs {
        alpha: sigmoid(out[[0, 0]]),
        beta: sigmoid(out[[0, 1]]),
    })
}

/// `alpha - beta / waves`, clamped to `[UTIL_FLOOR, 1]`.
pub fn utilization(c: &UtilCoeffs, num_waves: u64) -> f64 {
    let raw = c.alpha - c.beta / num_waves.max(1) as f64;
    raw.clamp(UTIL_FLOOR, 1.0)
}
