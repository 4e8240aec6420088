//! Rank-1 posterior probes.
//!
//! A probe projector maps features to `R` probe responses `v`; a mixer maps
//! probe space to class logits. Each probe carries a learned scale
//! `sigma_r = softplus(alpha_r) + eps`. Epistemic uncertainty is the summed
//! per-class population variance of the softmax over a fixed, negation
//! symmetric set of signed perturbation patterns `u`, where pattern `u`
//! shifts the logits by `mixer((sigma * u) * v)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{round_f32, softplus, UNIT_VARIANCE_GAIN};
use crate::tensor::{
    constant_field, pointwise_linear, to_field, DenseField, Dims, Graph, Linear, LinearVars, Var,
};

pub const DEFAULT_NUM_PROBES: usize = 8;
pub const DEFAULT_SIGMA_INIT: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Learnable probe parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    /// Features to probe responses, `F -> R`.
    pub psi: Linear,
    /// Unconstrained scales, one per probe.
    pub alpha: Vec<f64>,
    /// Probe space to logit perturbations, `R -> C`.
    pub mixer: Linear,
    pub epsilon: f64,
}

impl ProbeParams {
    pub fn init<R: Rng + ?Sized>(
        features: usize,
        probes: usize,
        classes: usize,
        sigma_init: f64,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if probes == 0 {
            return Err(Error::InvalidArgument("at least one probe is required".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("probe epsilon must be positive".into()));
        }
        let alpha0 = round_f32(alpha_for_scale(sigma_init, epsilon)?);
        Ok(Self {
            psi: Linear::random(probes, features, UNIT_VARIANCE_GAIN, rng),
            alpha: vec![alpha0; probes],
            mixer: Linear::random(classes, probes, UNIT_VARIANCE_GAIN, rng),
            epsilon,
        })
    }

    pub fn num_probes(&self) -> usize {
        self.alpha.len()
    }

    pub fn scales(&self) -> Vec<f64> {
        probe_scales(&self.alpha, self.epsilon)
    }
}

/// Fixed signed perturbation patterns in probe space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePatterns {
    patterns: Vec<Vec<f64>>,
}

impl ProbePatterns {
    /// The `2R` signed one-hot patterns `{+e_r, -e_r}`.
    pub fn signed_one_hot(probes: usize) -> Self {
        let mut patterns = Vec::with_capacity(2 * probes);
        for r in 0..probes {
            for sign in [1.0, -1.0] {
                let mut u = vec![0.0; probes];
                u[r] = sign;
                patterns.push(u);
            }
        }
        Self { patterns }
    }

    /// Validates a custom pattern set: at least two patterns of equal length,
    /// closed under negation.
    pub fn new(patterns: Vec<Vec<f64>>) -> Result<Self> {
        if patterns.len() < 2 {
            return Err(Error::InvalidArgument("need at least two probe patterns".into()));
        }
        let r = patterns[0].len();
        if patterns.iter().any(|p| p.len() != r) {
            return Err(Error::InvalidArgument("probe patterns differ in length".into()));
        }
        for p in &patterns {
            let neg: Vec<f64> = p.iter().map(|x| -x).collect();
            if !patterns.iter().any(|q| *q == neg) {
                return Err(Error::InvalidArgument(
                    "probe pattern set must be symmetric under negation".into(),
                ));
            }
        }
        Ok(Self { patterns })
    }

    pub fn patterns(&self) -> &[Vec<f64>] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.patterns.first().map_or(0, Vec::len)
    }
}

/// `softplus(alpha) + eps`.
pub fn probe_scale(alpha: f64, epsilon: f64) -> f64 {
    softplus(alpha) + epsilon
}

pub fn probe_scales(alpha: &[f64], epsilon: f64) -> Vec<f64> {
    alpha.iter().map(|&a| probe_scale(a, epsilon)).collect()
}

/// The `alpha` whose scale is `sigma`.
pub fn alpha_for_scale(sigma: f64, epsilon: f64) -> Result<f64> {
    let s = sigma - epsilon;
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale {sigma} not reachable with epsilon {epsilon}"
        )));
    }
    Ok(s.exp_m1().ln())
}

/// `v = psi(h)`.
pub fn probe_responses(h: &DenseField, params: &ProbeParams) -> Result<DenseField> {
    pointwise_linear(&params.psi, h)
}

/// Unpatterned logit perturbation `mixer(v)`.
pub fn base_delta(v: &DenseField, mixer: &Linear) -> Result<DenseField> {
    pointwise_linear(mixer, v)
}

/// Logit perturbation induced by pattern `u`: `mixer((sigma * u) * v)`.
pub fn pattern_delta(v: &DenseField, sigma: &[f64], u: &[f64], mixer: &Linear) -> Result<DenseField> {
    let mut g = Graph::new();
    let mixer_vars = LinearVars::register(&mut g, mixer, false);
    let vv = constant_field(&mut g, v);
    let sv = g.constant(Dims::vector(sigma.len()), sigma.to_vec())?;
    let out = pattern_delta_on_graph(&mut g, vv, sv, u, &mixer_vars)?;
    to_field(&g, out)
}

pub(crate) fn pattern_delta_on_graph(
    g: &mut Graph,
    v: Var,
    sigma: Var,
    u: &[f64],
    mixer: &LinearVars,
) -> Result<Var> {
    let r = g.dims(v).channels;
    if u.len() != r || g.dims(sigma).len() != r {
        return Err(Error::Shape(format!(
            "pattern of length {} and {} scales for {r} probes",
            u.len(),
            g.dims(sigma).len()
        )));
    }
    let uv = g.constant(Dims::vector(r), u.to_vec())?;
    let su = g.mul(sigma, uv)?;
    let scaled = g.mul(v, su)?;
    mixer.apply(g, scaled)
}

/// `sum_c Var_k softmax(z + delta_k)_c` over pattern perturbations `delta_k`.
pub(crate) fn epistemic_on_graph(
    g: &mut Graph,
    z: Var,
    v: Var,
    sigma: Var,
    mixer: &LinearVars,
    patterns: &ProbePatterns,
) -> Result<Var> {
    if patterns.len() < 2 {
        return Err(Error::InvalidArgument("need at least two probe patterns".into()));
    }
    let mut probs = Vec::with_capacity(patterns.len());
    for u in patterns.patterns() {
        let dz = pattern_delta_on_graph(g, v, sigma, u, mixer)?;
        let zk = g.add(z, dz)?;
        probs.push(g.softmax(zk));
    }
    let mut sum = probs[0];
    for &p in &probs[1..] {
        sum = g.add(sum, p)?;
    }
    let mean = g.scale(sum, 1.0 / probs.len() as f64);
    let mut sq = None;
    for &p in &probs {
        let d = g.sub(p, mean)?;
        let d2 = g.square(d);
        sq = Some(match sq {
            None => d2,
            Some(acc) => g.add(acc, d2)?,
        });
    }
    let var = g.scale(sq.expect("at least two patterns"), 1.0 / probs.len() as f64);
    Ok(g.sum_channels(var))
}

/// Epistemic map from logits, probe responses and scales.
pub fn epistemic_map(
    z: &DenseField,
    v: &DenseField,
    sigma: &[f64],
    mixer: &Linear,
    patterns: &ProbePatterns,
) -> Result<DenseField> {
    if z.channels() != mixer.out_dim {
        return Err(Error::Channels {
            expected: mixer.out_dim,
            actual: z.channels(),
        });
    }
    let mut g = Graph::new();
    let mixer_vars = LinearVars::register(&mut g, mixer, false);
    let zv = constant_field(&mut g, z);
    let vv = constant_field(&mut g, v);
    let sv = g.constant(Dims::vector(sigma.len()), sigma.to_vec())?;
    let out = epistemic_on_graph(&mut g, zv, vv, sv, &mixer_vars, patterns)?;
    to_field(&g, out)
}

/// `U_probe = mean_r v_r^2`.
pub fn probe_energy(v: &DenseField) -> Result<DenseField> {
    channel_mean_square(v)
}

/// `U_res = mean_c dz_c^2` of the unpatterned perturbation.
pub fn residual_energy(delta: &DenseField) -> Result<DenseField> {
    channel_mean_square(delta)
}

fn channel_mean_square(f: &DenseField) -> Result<DenseField> {
    let mut g = Graph::new();
    let x = constant_field(&mut g, f);
    let out = mean_square_on_graph(&mut g, x);
    to_field(&g, out)
}

pub(crate) fn mean_square_on_graph(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    g.mean_channels(sq)
}
