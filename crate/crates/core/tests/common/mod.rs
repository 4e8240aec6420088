#![allow(dead_code)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use segwithu::head::{forward, HeadConfig, HeadInput, HeadParams, HeadVars};
use segwithu::losses::{anchor_consistency_on_graph, build_objective, LossTerm, LossWeights, RankingHyper};
use segwithu::synth::{generate_case, SynthCase, SynthConfig};
use segwithu::tensor::Graph;

/// Prints one line past the test harness capture.
pub fn report(criterion: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion}: {verdict} {detail}\n");
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).ok();
    out.flush().ok();
}

pub const FD_STEP: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub struct GradInstance {
    pub cfg: HeadConfig,
    pub params: HeadParams,
    pub case: SynthCase,
    pub hyper: RankingHyper,
    pub pair_seed: u64,
}

/// A 6x6 case with a small two-tap head whose parameters are all moved off their init.
pub fn grad_instance(seed: u64) -> GradInstance {
    let synth = SynthConfig {
        spatial: vec![6, 6],
        tap_channels: vec![4, 3],
        noise_level: 2.5,
        seed,
        ..SynthConfig::default()
    };
    let case = generate_case(&synth, seed).expect("synthetic case");
    let cfg = HeadConfig {
        tap_channels: vec![4, 3],
        fused_channels: 5,
        num_probes: 3,
        ..HeadConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = HeadParams::init(&cfg, &mut rng).expect("head init");
    for t in params.tensors_mut(&cfg) {
        for v in t.values.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += 0.3 * n;
        }
    }
    GradInstance {
        cfg,
        params,
        case,
        hyper: RankingHyper {
            max_pairs: 64,
            ..RankingHyper::default()
        },
        pair_seed: seed,
    }
}

/// The weight set of one isolated term.
pub fn only(term: LossTerm) -> LossWeights {
    let mut w = LossWeights::zero();
    match term {
        LossTerm::Nll => w.nll = 1.0,
        LossTerm::Ec => w.ec = 1.0,
        LossTerm::Pair => w.pair = 1.0,
        LossTerm::Tail => w.tail = 1.0,
        LossTerm::Trust => w.trust = 1.0,
        LossTerm::Anchor => w.anchor = 1.0,
        LossTerm::Res => w.res = 1.0,
    }
    w
}

/// Objective value and, with `grads`, reverse-mode gradients of every tensor.
/// A `frozen_anchor` replaces the stop-gradient anchor target, as the
/// analytic gradient treats it as constant.
fn objective(
    inst: &GradInstance,
    params: &HeadParams,
    weights: &LossWeights,
    grads: bool,
    frozen_anchor: Option<&[f64]>,
) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let mut g = Graph::new();
    let vars = HeadVars::register(&mut g, params, &inst.cfg, grads);
    let input = HeadInput {
        taps: &inst.case.taps,
        logits: &inst.case.logits,
    };
    let fw = forward(&mut g, &vars, params, &inst.cfg, &input).expect("forward");
    let anchor = g.value(fw.anchor).to_vec();
    let Some(frozen) = frozen_anchor else {
        let obj = build_objective(&mut g, &fw, &inst.case.labels, weights, &inst.hyper, inst.pair_seed)
            .expect("objective");
        let total = obj.total.expect("active objective");
        let value = g.value(total)[0];
        if !grads {
            return (value, Vec::new(), anchor);
        }
        let gr = g.backward(total).expect("backward");
        let out = vars
            .ordered
            .iter()
            .zip(params.tensors(&inst.cfg))
            .map(|(&v, t)| gr.of(v).map_or_else(|| vec![0.0; t.values.len()], <[f64]>::to_vec))
            .collect();
        return (value, out, anchor);
    };
    let mut rest = weights.clone();
    rest.anchor = 0.0;
    let obj = build_objective(&mut g, &fw, &inst.case.labels, &rest, &inst.hyper, inst.pair_seed).expect("objective");
    let mut value = obj.total_value(&g);
    if weights.anchor > 0.0 {
        let dims = g.dims(fw.anchor).clone();
        let target = g.constant(dims, frozen.to_vec()).expect("anchor dims");
        let term = anchor_consistency_on_graph(&mut g, fw.score, target).expect("anchor term");
        value += weights.anchor * g.value(term)[0];
    }
    (value, Vec::new(), anchor)
}

/// Reverse-mode against central-difference gradients.
#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    /// Largest per-tensor `|g - n| / max(|g|, |n|, FD_FLOOR)` in the L2 norm.
    pub tensor_rel: f64,
    pub tensor: String,
    /// Largest per-element relative error with the same floor.
    pub element_rel: f64,
    pub elements: usize,
}

pub fn grad_check(inst: &GradInstance, weights: &LossWeights, step: f64) -> GradCheck {
    let (value, analytic, anchor) = objective(inst, &inst.params, weights, true, None);
    let frozen = objective(inst, &inst.params, weights, false, Some(&anchor)).0;
    assert!((value - frozen).abs() <= 1e-12 * value.abs().max(1.0), "frozen-anchor objective drifted");
    let tensors: Vec<(String, bool)> = inst
        .params
        .tensors(&inst.cfg)
        .iter()
        .map(|t| (t.name.clone(), t.learnable))
        .collect();
    let mut out = GradCheck::default();
    let mut probe = inst.params.clone();
    for (ti, grad) in analytic.iter().enumerate() {
        if !tensors[ti].1 {
            continue;
        }
        let mut numeric = Vec::with_capacity(grad.len());
        for k in 0..grad.len() {
            let orig = inst.params.tensors(&inst.cfg)[ti].values[k];
            let mut at = |x: f64| {
                probe.tensors_mut(&inst.cfg)[ti].values[k] = x;
                objective(inst, &probe, weights, false, Some(&anchor)).0
            };
            let n = (at(orig + step) - at(orig - step)) / (2.0 * step);
            at(orig);
            let rel = (grad[k] - n).abs() / grad[k].abs().max(n.abs()).max(FD_FLOOR);
            out.element_rel = out.element_rel.max(rel);
            out.elements += 1;
            numeric.push(n);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(grad).max(norm(&numeric)).max(FD_FLOOR);
        if rel > out.tensor_rel {
            out.tensor_rel = rel;
            out.tensor = tensors[ti].0.clone();
        }
    }
    out
}
