//! Training the utilization predictor end to end.
//!
//! The loss is the symmetric mean absolute percentage error between the
//! assembled kernel latency and the measured latency, so gradients flow
//! through the latency equations into the network:
//!
//! ```text
//! alpha, beta = sigmoid(mlp(x))
//! u_raw       = alpha - beta / waves
//! u           = floor + softplus(s * (u_raw - floor)) / s
//! latency     = flops_tile * waves / (roofline * u)
//! loss        = mean(2 |latency - y| / (latency + y))
//! ```
//!
//! Training uses the smooth floor above; inference clamps hard.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::TrainSample;
use super::features::{FeatureScaling, NUM_FEATURES};
use super::mlp::{Architecture, Dense, MlpWeights, UTIL_FLOOR};
use super::analyze;
use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::kernel::{describe_kernel, OpFamily};
use crate::numeric::sigmoid;
use crate::tiledb::TileDb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Sharpness of the smooth utilization floor used while training.
    pub floor_sharpness: f64,
    pub scaling: FeatureScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.2,
            seed: 0,
            hidden: 512,
            hidden_layers: 8,
            floor_sharpness: 1e3,
            scaling: FeatureScaling::default(),
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            inputs: NUM_FEATURES,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::parse(path, line, e.message().to_string())
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if self.floor_sharpness.is_nan() || self.floor_sharpness <= 0.0 {
            return bad("floor_sharpness must be positive");
        }
        Ok(())
    }
}

/// Samples converted to network inputs and latency-equation constants.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// `n x 5` model inputs (features after scaling).
    pub inputs: Array2<f64>,
    pub waves: Vec<f64>,
    /// Latency at full utilization: `flops_tile * waves / roofline`.
    pub full_util_latency: Vec<f64>,
    pub target: Vec<f64>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Turn samples into training rows. All samples must belong to `family`.
pub fn prepare(
    samples: &[TrainSample],
    family: OpFamily,
    scaling: FeatureScaling,
    catalog: &Catalog,
    tiledb: &TileDb,
) -> Result<Prepared> {
    let n = samples.len();
    let mut inputs = Array2::zeros((n, NUM_FEATURES));
    let mut waves = Vec::with_capacity(n);
    let mut full = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        if s.op_type.family() != Some(family) {
            return Err(Error::InvalidConfig(format!(
                "sample {} is `{}`, not a {family} operator",
                i + 1,
                s.op_type
            )));
        }
        let gpu = catalog.get(&s.gpu_name)?;
        let k = describe_kernel(s.op_type.clone(), &s.dims, s.dtype)?;
        let tile = tiledb.lookup_tile(&k.op_type, &k.dims, gpu);
        let a = analyze(&k, tile, gpu)?;
        let x = a.features.model_input(scaling);
        inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
        waves.push(a.plan.num_waves as f64);
        full.push(a.plan.flops_tile * a.plan.num_waves as f64 / a.roofline);
        target.push(s.measured_latency);
    }
    Ok(Prepared {
        inputs,
        waves,
        full_util_latency: full,
        target,
    })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn smooth_floor(raw: f64, sharpness: f64) -> (f64, f64) {
    let x = sharpness * (raw - UTIL_FLOOR);
    (UTIL_FLOOR + softplus(x) / sharpness, sigmoid(x))
}

pub fn smape_term(pred: f64, target: f64) -> f64 {
    2.0 * (pred - target).abs() / (pred.abs() + target.abs())
}

/// Mean SMAPE of the smooth-floor model over `idx`.
pub fn smooth_loss(w: &MlpWeights, data: &Prepared, idx: &[usize], sharpness: f64) -> f64 {
    loss_impl(w, data, idx, sharpness, false).0
}

/// Mean SMAPE and its gradient with respect to every parameter.
pub fn loss_and_grad(w: &MlpWeights, data: &Prepared, idx: &[usize], sharpness: f64) -> (f64, Vec<Dense>) {
    let (loss, grads) = loss_impl(w, data, idx, sharpness, true);
    (loss, grads.expect("gradients requested"))
}

fn loss_impl(
    w: &MlpWeights,
    data: &Prepared,
    idx: &[usize],
    sharpness: f64,
    with_grad: bool,
) -> (f64, Option<Vec<Dense>>) {
    let n = idx.len();
    let x = data.inputs.select(Axis(0), idx);
    let (acts, logits) = if with_grad {
        w.forward_cached(x.view())
    } else {
        (Vec::new(), w.forward(x.view()))
    };
    let mut d_logits = Array2::zeros((n, 2));
    let mut total = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        let alpha = sigmoid(logits[[r, 0]]);
        let beta = sigmoid(logits[[r, 1]]);
        let waves = data.waves[i];
        let raw = alpha - beta / waves;
        let (u, du_draw) = smooth_floor(raw, sharpness);
        let p = data.full_util_latency[i] / u;
        let y = data.target[i];
        total += smape_term(p, y);

        if with_grad {
            let sign = if p > y {
                1.0
            } else if p < y {
                -1.0
            } else {
                0.0
            };
            let dl_dp = 4.0 * y * sign / ((p + y) * (p + y));
            let dl_du = dl_dp * (-p / u);
            let dl_draw = dl_du * du_draw / n as f64;
            d_logits[[r, 0]] = dl_draw * alpha * (1.0 - alpha);
            d_logits[[r, 1]] = -dl_draw / waves * beta * (1.0 - beta);
        }
    }
    let grads = with_grad.then(|| w.backward(&acts, d_logits));
    (total / n.max(1) as f64, grads)
}

/// Mean SMAPE of the inference path (hard clamp) over `idx`.
pub fn evaluate_smape(w: &MlpWeights, data: &Prepared, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let x = data.inputs.select(Axis(0), idx);
    let logits = w.forward(x.view());
    let mut total = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        let alpha = sigmoid(logits[[r, 0]]);
        let beta = sigmoid(logits[[r, 1]]);
        let u = (alpha - beta / data.waves[i]).clamp(UTIL_FLOOR, 1.0);
        total += smape_term(data.full_util_latency[i] / u, data.target[i]);
    }
    total / idx.len() as f64
}

struct AdamW {
    m: Vec<Dense>,
    v: Vec<Dense>,
    step: i32,
}

impl AdamW {
    fn new(w: &MlpWeights) -> Self {
        let zeros = || {
            w.layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.dim()),
                })
                .collect::<Vec<_>>()
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, w: &mut MlpWeights, grads: &[Dense], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = cfg.learning_rate;
        let decay = 1.0 - lr * cfg.weight_decay;
        let eps = cfg.adam_eps;
        let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = *p * decay - lr * mh / (vh.sqrt() + eps);
        };
        for (((layer, g), m), v) in w.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean smooth-floor SMAPE over the epoch's minibatches, in percent.
    pub train_smape: f64,
    /// Validation SMAPE of the inference path, in percent.
    pub val_smape: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub family: OpFamily,
    pub weights: MlpWeights,
    pub history: Vec<EpochStats>,
    /// Epoch whose weights were kept (0 = initialization).
    pub best_epoch: usize,
}

/// Train one predictor on samples of a single operator family.
pub fn train(
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    catalog: &Catalog,
    tiledb: &TileDb,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let family = first
        .op_type
        .family()
        .ok_or_else(|| Error::InvalidConfig(format!("`{}` has no predictor", first.op_type)))?;
    let data = prepare(dataset, family, cfg.scaling, catalog, tiledb)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (data.len() as f64 * cfg.validation_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut weights = MlpWeights::init(cfg.architecture(), cfg.scaling, cfg.seed);
    let select = |w: &MlpWeights, train_idx: &[usize]| {
        if val_idx.is_empty() {
            evaluate_smape(w, &data, train_idx)
        } else {
            evaluate_smape(w, &data, &val_idx)
        }
    };
    let mut best = (select(&weights, &train_idx), 0usize, weights.clone());
    let mut opt = AdamW::new(&weights);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (loss, grads) = loss_and_grad(&weights, &data, batch, cfg.floor_sharpness);
            loss_sum += loss * batch.len() as f64;
            opt.update(&mut weights, &grads, cfg);
        }
        let train_smape = 100.0 * loss_sum / train_idx.len().max(1) as f64;
        let score = select(&weights, &train_idx);
        history.push(EpochStats {
            epoch,
            train_smape,
            val_smape: 100.0 * score,
        });
        if score < best.0 {
            best = (score, epoch, weights.clone());
        }
    }

    Ok(TrainOutcome {
        family,
        weights: best.2,
        history,
        best_epoch: best.1,
    })
}

/// Loss history as CSV: `epoch,train_smape_pct,val_smape_pct`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_smape_pct,val_smape_pct\n");
    for h in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", h.epoch, h.train_smape, h.val_smape));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{OpFamily, OpType};

    fn sample(dims: [u64; 4], lat: f64) -> TrainSample {
        TrainSample {
            op_type: OpType::Bmm,
            dims: dims.to_vec(),
            gpu_name: "V100".into(),
            measured_latency: lat,
            dtype: crate::kernel::Dtype::Fp32,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 16,
            hidden_layers: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = train(&[sample([4, 64, 64, 64], 1e-5)], &cfg, &Catalog::builtin(), &TileDb::new()).unwrap();
        assert_eq!(out.weights, MlpWeights::init(cfg.architecture(), cfg.scaling, cfg.seed));
        assert!(out.history.is_empty());
    }

    #[test]
    fn single_sample_overfits() {
        let cfg = TrainConfig {
            epochs: 400,
            learning_rate: 3e-3,
            ..tiny_cfg()
        };
        let cat = Catalog::builtin();
        let probe = sample([8, 256, 128, 256], 1.0);
        let mut p = prepare(&[probe], OpFamily::Bmm, cfg.scaling, &cat, &TileDb::new()).unwrap();
        // reachable target: 60% utilization
        let target = p.full_util_latency[0] / 0.6;
        p.target[0] = target;
        let out = train(&[sample([8, 256, 128, 256], target)], &cfg, &cat, &TileDb::new()).unwrap();
        let first = out.history.first().unwrap().train_smape;
        // the returned weights are the best epoch, not the last
        let kept = 100.0 * evaluate_smape(&out.weights, &p, &[0]);
        assert!(kept < first);
        assert!(kept < 0.5, "kept SMAPE {kept}%");
    }

    #[test]
    fn empty_and_unknown_rejected() {
        let cat = Catalog::builtin();
        assert!(matches!(train(&[], &tiny_cfg(), &cat, &TileDb::new()), Err(Error::EmptyDataset)));
        let mut s = sample([1, 2, 3, 4], 1e-6);
        s.gpu_name = "Z80".into();
        assert!(matches!(train(&[s], &tiny_cfg(), &cat, &TileDb::new()), Err(Error::UnknownGpu(_))));
        let bad = sample([1, 2, 3, 0], 1e-6);
        assert!(train(&[bad], &tiny_cfg(), &cat, &TileDb::new()).is_err());
    }

    #[test]
    fn mixed_families_rejected() {
        let mut s2 = sample([1, 2, 3, 4], 1e-6);
        s2.op_type = OpType::Softmax;
        s2.dims = vec![8, 8];
        let r = train(&[sample([1, 2, 3, 4], 1e-6), s2], &tiny_cfg(), &Catalog::builtin(), &TileDb::new());
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn smooth_floor_matches_clamp_away_from_floor() {
        let (u, d) = smooth_floor(0.5, 1e3);
        assert!((u - 0.5).abs() < 1e-12);
        assert!((d - 1.0).abs() < 1e-12);
        let (u, _) = smooth_floor(-0.5, 1e3);
        assert!((UTIL_FLOOR..UTIL_FLOOR + 1e-12).contains(&u));
    }
}
