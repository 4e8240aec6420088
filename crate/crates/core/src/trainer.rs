//! Head optimization with AdamW, cosine annealing, clipping and early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{forward, HeadConfig, HeadInput, HeadParams, HeadVars};
use crate::losses::{build_objective, LossWeights, RankingHyper};
use crate::metrics::{aurc, error_flags, argmax_labels, risk_coverage_curve};
use crate::synth::SynthCase;
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub early_stop_tolerance: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub ranking: RankingHyper,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 3e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-2,
            clip_norm: 12.0,
            max_epochs: 200,
            early_stop_tolerance: 10,
            seed: 0,
            weights: LossWeights::default(),
            ranking: RankingHyper::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr_min.is_finite() && self.lr_max.is_finite() && 0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        self.weights.validate()?;
        self.ranking.validate()?;
        self.head.validate()
    }
}

/// Record of one epoch; epoch 0 is the untrained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub lr: f64,
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// `lr_min + (lr_max - lr_min)(1 + cos(pi t / max_epochs)) / 2`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let t = epoch as f64 / cfg.max_epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales all gradients so their global norm is at most `clip_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip_norm {
        let k = clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// First and second moments per tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Decoupled weight decay, then a bias-corrected Adam update, on every tensor.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, x) in p.iter_mut().enumerate() {
            let g = grads[k][i];
            *x -= lr * cfg.weight_decay * *x;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn input(case: &SynthCase) -> HeadInput<'_> {
    HeadInput {
        taps: &case.taps,
        logits: &case.logits,
    }
}

/// Mean per-case AURC of the head's error score.
pub fn validation_score(params: &HeadParams, cfg: &HeadConfig, cases: &[SynthCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut total = 0.0;
    for c in cases {
        let bundle = params.infer(cfg, &input(c))?;
        let e = error_flags(&argmax_labels(&c.logits)?, &c.labels)?;
        total += aurc(&risk_coverage_curve(&bundle.ranking.to_f64(), &e)?);
    }
    Ok(total / cases.len() as f64)
}

/// Loss of one case; when `step` is given, also returns the gradients of learnable tensors.
fn case_loss(
    params: &HeadParams,
    cfg: &TrainConfig,
    weights: &LossWeights,
    case: &SynthCase,
    pair_seed: u64,
    with_grads: bool,
) -> Result<(f64, Vec<(String, f64)>, Option<Vec<Vec<f64>>>)> {
    let mut g = Graph::new();
    let vars = HeadVars::register(&mut g, params, &cfg.head, with_grads);
    let fw = forward(&mut g, &vars, params, &cfg.head, &input(case))?;
    let obj = build_objective(&mut g, &fw, &case.labels, weights, &cfg.ranking, pair_seed)?;
    let terms = obj
        .term_values(&g)
        .into_iter()
        .map(|(t, v)| (t.name().to_string(), v))
        .collect();
    let loss = obj.total_value(&g);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss on case {}", case.id)));
    }
    let grads = match (obj.total, with_grads) {
        (Some(total), true) => {
            let gr = g.backward(total)?;
            let flags = params.tensors(&cfg.head);
            let out = vars
                .ordered
                .iter()
                .zip(&flags)
                .filter(|(_, t)| t.learnable)
                .map(|(&v, t)| gr.of(v).map_or_else(|| vec![0.0; t.values.len()], <[f64]>::to_vec))
                .collect::<Vec<_>>();
            if out.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient on case {}", case.id)));
            }
            Some(out)
        }
        _ => None,
    };
    Ok((loss, terms, grads))
}

fn epoch_record(epoch: usize, lr: f64, losses: &[(f64, Vec<(String, f64)>)], val_score: f64) -> EpochRecord {
    let n = losses.len().max(1) as f64;
    let mut terms = BTreeMap::new();
    for (_, ts) in losses {
        for (name, v) in ts {
            *terms.entry(name.clone()).or_insert(0.0) += v / n;
        }
    }
    EpochRecord {
        epoch,
        loss: losses.iter().map(|(l, _)| l).sum::<f64>() / n,
        terms,
        lr,
        val_score,
    }
}

/// Trains from an explicit starting point.
pub fn train_from(
    params: HeadParams,
    train: &[SynthCase],
    val: &[SynthCase],
    cfg: &TrainConfig,
) -> Result<(HeadParams, TrainHistory)> {
    train_observed(params, train, val, cfg, |_, _| {})
}

/// [`train_from`] with a callback after every epoch, including epoch 0.
pub fn train_observed(
    mut params: HeadParams,
    train: &[SynthCase],
    val: &[SynthCase],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord, &HeadParams),
) -> Result<(HeadParams, TrainHistory)> {
    cfg.validate()?;
    params.check(&cfg.head)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let weights = cfg.weights.for_variant(cfg.head.variant);
    let active = weights.any_active();

    let initial: Vec<_> = train
        .iter()
        .enumerate()
        .map(|(k, c)| case_loss(&params, cfg, &weights, c, mix(cfg.seed ^ mix(k as u64)), false).map(|(l, t, _)| (l, t)))
        .collect::<Result<_>>()?;
    let mut best_score = validation_score(&params, &cfg.head, val)?;
    let mut history = TrainHistory {
        epochs: vec![epoch_record(0, cosine_lr(0, cfg), &initial, best_score)],
        best_epoch: 0,
    };
    observe(&history.epochs[0], &params);
    let mut best = params.clone();
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = cosine_lr(epoch - 1, cfg);
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        for (step, &k) in order.iter().enumerate() {
            let seed = mix(cfg.seed ^ mix((epoch as u64) << 32 | step as u64));
            let (loss, terms, grads) = case_loss(&params, cfg, &weights, &train[k], seed, active)?;
            if let Some(mut grads) = grads {
                clip_gradients(&mut grads, cfg.clip_norm);
                let mut views: Vec<&mut [f64]> = params
                    .tensors_mut(&cfg.head)
                    .into_iter()
                    .filter(|t| t.learnable)
                    .map(|t| t.values)
                    .collect();
                adamw_step(&mut views, &grads, &mut state, lr, cfg)?;
                params.round_to_storage(&cfg.head);
            }
            losses.push((loss, terms));
        }
        let score = validation_score(&params, &cfg.head, val)?;
        history.epochs.push(epoch_record(epoch, lr, &losses, score));
        observe(&history.epochs[epoch], &params);
        if score < best_score {
            best_score = score;
            best = params.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_tolerance {
                break;
            }
        }
    }
    Ok((best, history))
}

/// The untrained head that [`train_head`] starts from.
pub fn init_head(cfg: &TrainConfig) -> Result<HeadParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed));
    HeadParams::init(&cfg.head, &mut rng)
}

/// Initializes a head from `cfg.seed` and trains it.
pub fn train_head(train: &[SynthCase], val: &[SynthCase], cfg: &TrainConfig) -> Result<(HeadParams, TrainHistory)> {
    train_from(init_head(cfg)?, train, val, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, Split, SynthConfig};

    #[test]
    fn cosine_examples() {
        let cfg = TrainConfig::default();
        assert!((cosine_lr(0, &cfg) - 1e-3).abs() < 1e-15);
        assert!((cosine_lr(200, &cfg) - 3e-4).abs() < 1e-15);
        assert!((cosine_lr(100, &cfg) - 6.5e-4).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![6.0], vec![0.0]];
        clip_gradients(&mut g, 12.0);
        assert_eq!(g, vec![vec![6.0], vec![0.0]]);
        let mut g = vec![vec![24.0, 0.0], vec![0.0]];
        assert_eq!(clip_gradients(&mut g, 12.0), 24.0);
        assert_eq!(g, vec![vec![12.0, 0.0], vec![0.0]]);
        let mut g = vec![vec![30.0, -40.0], vec![5.0]];
        clip_gradients(&mut g, 12.0);
        let n = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n <= 12.0 + 1e-6);
    }

    #[test]
    fn adamw_examples() {
        let mut cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0];
        let mut st = AdamState::default();
        adamw_step(&mut [&mut p[..]], &[vec![0.0]], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![1.0]);

        let mut p = vec![1.0];
        let mut st = AdamState::default();
        adamw_step(&mut [&mut p[..]], &[vec![1.0]], &mut st, 0.1, &cfg).unwrap();
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        cfg.weight_decay = 0.01;
        let mut p = vec![1.0];
        let mut st = AdamState::default();
        adamw_step(&mut [&mut p[..]], &[vec![0.0]], &mut st, 0.1, &cfg).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);

        assert!(adamw_step(&mut [&mut p[..]], &[vec![0.0, 1.0]], &mut st, 0.1, &cfg).is_err());
    }

    fn tiny() -> (Vec<SynthCase>, Vec<SynthCase>, TrainConfig) {
        let synth = SynthConfig {
            spatial: vec![8, 8],
            ..SynthConfig::default()
        };
        let train = generate_split(&synth, 3, Split::Train).unwrap();
        let val = generate_split(&synth, 2, Split::Val).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        (train, val, cfg)
    }

    #[test]
    fn zero_objective_leaves_params() {
        let (train, val, mut cfg) = tiny();
        cfg.weights = LossWeights::zero();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed));
        let init = HeadParams::init(&cfg.head, &mut rng).unwrap();
        let (out, hist) = train_head(&train, &val, &cfg).unwrap();
        assert_eq!(out, init);
        assert_eq!(hist.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val, cfg) = tiny();
        let a = train_head(&train, &val, &cfg).unwrap();
        let b = train_head(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.epochs.len(), 4);
        assert!(a.1.best_epoch < a.1.epochs.len());
        assert!(a.1.epochs.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let (_, val, cfg) = tiny();
        assert!(train_head(&[], &val, &cfg).is_err());
    }
}
