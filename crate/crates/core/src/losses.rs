//! Training objective terms and their weighted sum.
//!
//! Every term is recorded on a [`Graph`] so that gradients reach the head
//! parameters. The `*_loss` functions evaluate a single term eagerly on plain
//! slices, treating them as one flat batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{ForwardVars, MapVariant};
use crate::tensor::ops::argmax;
use crate::tensor::{DenseField, Dims, Graph, LabelField, Var};

/// Floor applied to log-probabilities in the NLL term.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)
/// Stabilizer added to the standard deviation when standardizing.
pub const STD_EPSILON: f64 = 1e-6;
/// Upper bound on sampled error/correct pairs.
pub const DEFAULT_MAX_PAIRS: usize = 4096;

/// Per-term weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub nll: f64,
    pub ec: f64,
    pub pair: f64,
    pub tail: f64,
    pub trust: f64,
    pub anchor: f64,
    pub res: f64,
    /// Segmentation refinement; not supported and must stay 0.
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nll: 0.5,
            ec: 0.25,
            pair: 0.25,
            tail: 0.25,
            trust: 0.05,
            anchor: 0.05,
            res: 0.05,
            seg: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            nll: 0.0,
            ec: 0.0,
            pair: 0.0,
            tail: 0.0,
            trust: 0.0,
            anchor: 0.0,
            res: 0.0,
            seg: 0.0,
        }
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Nll => self.nll,
            LossTerm::Ec => self.ec,
            LossTerm::Pair => self.pair,
            LossTerm::Tail => self.tail,
            LossTerm::Trust => self.trust,
            LossTerm::Anchor => self.anchor,
            LossTerm::Res => self.res,
        }
    }

    pub fn set(&mut self, term: LossTerm, value: f64) {
        let slot = match term {
            LossTerm::Nll => &mut self.nll,
            LossTerm::Ec => &mut self.ec,
            LossTerm::Pair => &mut self.pair,
            LossTerm::Tail => &mut self.tail,
            LossTerm::Trust => &mut self.trust,
            LossTerm::Anchor => &mut self.anchor,
            LossTerm::Res => &mut self.res,
        };
        *slot = value;
    }

    pub fn validate(&self) -> Result<()> {
        for t in LossTerm::ALL {
            let w = self.get(t);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {} must be finite and nonnegative",
                    t.name()
                )));
            }
        }
        if self.seg != 0.0 {
            return Err(Error::InvalidArgument(
                "the segmentation refinement term is not supported; seg weight must be 0".into(),
            ));
        }
        Ok(())
    }

    /// Weights restricted to the terms a map variant trains.
    pub fn for_variant(&self, variant: MapVariant) -> Self {
        let mut w = *self;
        match variant {
            MapVariant::Both => {}
            MapVariant::CalibrationOnly => {
                for t in [LossTerm::Ec, LossTerm::Pair, LossTerm::Tail, LossTerm::Anchor] {
                    w.set(t, 0.0);
                }
            }
            MapVariant::RankingOnly => w.nll = 0.0,
        }
        w
    }

    pub fn any_active(&self) -> bool {
        LossTerm::ALL.iter().any(|&t| self.get(t) > 0.0)
    }
}

/// Temperatures, margin and pair budget of the ranking terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankingHyper {
    pub tau_ec: f64,
    pub tau_pair: f64,
    pub delta: f64,
    pub tail_temperature: f64,
    pub max_pairs: usize,
}

impl Default for RankingHyper {
    fn default() -> Self {
        Self {
            tau_ec: 1.0,
            tau_pair: 1.0,
            delta: 0.1,
            tail_temperature: 1.0,
            max_pairs: DEFAULT_MAX_PAIRS,
        }
    }
}

impl RankingHyper {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !(pos(self.tau_ec) && pos(self.tau_pair) && pos(self.tail_temperature)) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::InvalidArgument("ranking margin must be nonnegative".into()));
        }
        if self.max_pairs == 0 {
            return Err(Error::InvalidArgument("pair budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    Nll,
    Ec,
    Pair,
    Tail,
    Trust,
    Anchor,
    Res,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Nll,
        LossTerm::Ec,
        LossTerm::Pair,
        LossTerm::Tail,
        LossTerm::Trust,
        LossTerm::Anchor,
        LossTerm::Res,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Nll => "nll",
            LossTerm::Ec => "ec",
            LossTerm::Pair => "pair",
            LossTerm::Tail => "tail",
            LossTerm::Trust => "trust",
            LossTerm::Anchor => "anchor",
            LossTerm::Res => "res",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// `1` where the backbone argmax disagrees with the label, as a one-channel field.
pub fn error_indicator(z: &DenseField, y: &LabelField) -> Result<DenseField> {
    y.check_aligned(z)?;
    y.check_range(z.channels())?;
    let (nb, nc, nv) = (z.batch(), z.channels(), z.voxels());
    let mut e = Vec::with_capacity(nb * nv);
    for b in 0..nb {
        for i in 0..nv {
            let k = argmax((0..nc).map(|c| f64::from(z.get(b, c, i))));
            e.push(if k == y.data()[b * nv + i] as usize { 0.0 } else { 1.0 });
        }
    }
    DenseField::new(z.shape_with_channels(1), e)
}

/// `(u - mean) / (std + eps)` over every element, population std.
pub fn standardize_on_graph(g: &mut Graph, u: Var) -> Result<Var> {
    let mean = g.mean_all(u);
    let centered = g.sub(u, mean)?;
    let sq = g.square(centered);
    let var = g.mean_all(sq);
    let std = g.sqrt(var);
    let denom = g.offset(std, STD_EPSILON);
    g.div(centered, denom)
}

/// Mean negative log-likelihood of `labels` under `softmax(z_tilde)`.
pub fn nll_on_graph(g: &mut Graph, z_tilde: Var, labels: &[u32]) -> Result<Var> {
    let logp = g.log_softmax(z_tilde);
    let picked = g.gather_channel(logp, labels)?;
    let floored = g.clamp_min(picked, LOG_PROB_FLOOR);
    let mean = g.mean_all(floored);
    Ok(g.neg(mean))
}

/// Mean BCE-with-logits of `u_hat / tau` against `e`.
pub fn ec_on_graph(g: &mut Graph, u_hat: Var, e: Var, tau: f64) -> Result<Var> {
    let x = g.scale(u_hat, 1.0 / tau);
    let sp = g.softplus(x);
    let ex = g.mul(e, x)?;
    let per = g.sub(sp, ex)?;
    Ok(g.mean_all(per))
}

/// Draws `min(max_pairs, n_err * n_corr)` (error, correct) index pairs with replacement.
pub fn sample_pairs(e: &[f64], max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let errs: Vec<usize> = (0..e.len()).filter(|&i| e[i] > 0.5).collect();
    let corr: Vec<usize> = (0..e.len()).filter(|&i| e[i] <= 0.5).collect();
    if errs.is_empty() || corr.is_empty() {
        return Vec::new();
    }
    let k = max_pairs.min(errs.len().saturating_mul(corr.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let i = errs[rng.random_range(0..errs.len())];
            let j = corr[rng.random_range(0..corr.len())];
            (i, j)
        })
        .collect()
}

/// Mean of `softplus((u_j - u_i + delta) / tau)` over the sampled pairs; zero without pairs.
pub fn pair_on_graph(
    g: &mut Graph,
    u: Var,
    e: &[f64],
    delta: f64,
    tau: f64,
    max_pairs: usize,
    seed: u64,
) -> Result<Var> {
    if e.len() != g.dims(u).len() {
        return Err(Error::Shape(format!(
            "{} error flags for {} scores",
            e.len(),
            g.dims(u).len()
        )));
    }
    let pairs = sample_pairs(e, max_pairs, seed);
    if pairs.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let ui = g.gather(u, pairs.iter().map(|p| p.0).collect())?;
    let uj = g.gather(u, pairs.iter().map(|p| p.1).collect())?;
    let d = g.sub(uj, ui)?;
    let d = g.offset(d, delta);
    let d = g.scale(d, 1.0 / tau);
    let sp = g.softplus(d);
    Ok(g.mean_all(sp))
}

/// `sum_i softmax(-u / T)_i e_i`, the softmax taken over every element.
pub fn tail_on_graph(g: &mut Graph, u: Var, e: Var, temperature: f64) -> Result<Var> {
    let s = g.scale(u, -1.0 / temperature);
    let max = g.value(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = g.offset(s, -max);
    let ex = g.exp(shifted);
    let den = g.sum_all(ex);
    let weighted = g.mul(ex, e)?;
    let num = g.sum_all(weighted);
    g.div(num, den)
}

/// `mean |dz|^2 + 1/4 mean |softmax(z + dz) - softmax(z)|^2`, norms over classes.
pub fn trust_on_graph(g: &mut Graph, dz: Var, z: Var) -> Result<Var> {
    let sq = g.square(dz);
    let energy = g.sum_channels(sq);
    let t1 = g.mean_all(energy);
    let zp = g.add(z, dz)?;
    let p_pert = g.softmax(zp);
    let zc = g.detach(z);
    let p_base = g.softmax(zc);
    let diff = g.sub(p_pert, p_base)?;
    let dsq = g.square(diff);
    let shift = g.sum_channels(dsq);
    let t2 = g.mean_all(shift);
    let t2 = g.scale(t2, 0.25);
    g.add(t1, t2)
}

/// Smooth-L1 between the standardized ranking map and the standardized, detached anchor.
pub fn anchor_consistency_on_graph(g: &mut Graph, ranking: Var, anchor: Var) -> Result<Var> {
    let r = standardize_on_graph(g, ranking)?;
    let a = g.detach(anchor);
    let a = standardize_on_graph(g, a)?;
    let d = g.sub(r, a)?;
    let l = g.smooth_l1(d);
    Ok(g.mean_all(l))
}

/// `mean (1 - w) U_res`.
pub fn residual_on_graph(g: &mut Graph, w: Var, u_res: Var) -> Result<Var> {
    let nw = g.neg(w);
    let one_minus = g.offset(nw, 1.0);
    let prod = g.mul(one_minus, u_res)?;
    Ok(g.mean_all(prod))
}

/// Weighted sum of evaluated terms.
pub fn total_loss(terms: &[(LossTerm, f64)], weights: &LossWeights) -> f64 {
    terms
        .iter()
        .filter(|(t, _)| weights.get(*t) > 0.0)
        .map(|&(t, v)| weights.get(t) * v)
        .sum()
}

/// The recorded objective of one forward pass.
#[derive(Debug, Clone)]
pub struct Objective {
    /// `None` when every weight is zero.
    pub total: Option<Var>,
    pub terms: Vec<(LossTerm, Var)>,
}

impl Objective {
    pub fn term_values(&self, g: &Graph) -> Vec<(LossTerm, f64)> {
        self.terms.iter().map(|&(t, v)| (t, g.value(v)[0])).collect()
    }

    pub fn total_value(&self, g: &Graph) -> f64 {
        self.total.map_or(0.0, |v| g.value(v)[0])
    }
}

/// Records every term with a positive weight and their weighted sum.
///
/// Ranking terms act on `fw.score`; `pair_seed` freezes the pair sample.
pub fn build_objective(
    g: &mut Graph,
    fw: &ForwardVars,
    labels: &LabelField,
    weights: &LossWeights,
    hyper: &RankingHyper,
    pair_seed: u64,
) -> Result<Objective> {
    weights.validate()?;
    hyper.validate()?;
    let z_dims = g.dims(fw.logits).clone();
    if labels.batch() != z_dims.batch || labels.spatial() != z_dims.spatial.as_slice() {
        return Err(Error::Shape(format!(
            "labels {:?} not aligned with logits {:?}",
            labels.shape(),
            z_dims
        )));
    }
    labels.check_range(z_dims.channels)?;
    let e_vals = error_flags(g.value(fw.logits), &z_dims, labels.data());
    let e = g.constant(z_dims.with_channels(1), e_vals.clone())?;

    let mut terms = Vec::new();
    let mut std_score = None;
    for t in LossTerm::ALL {
        if weights.get(t) <= 0.0 {
            continue;
        }
        let v = match t {
            LossTerm::Nll => nll_on_graph(g, fw.tempered_logits, labels.data())?,
            LossTerm::Ec => {
                let s = match std_score {
                    Some(s) => s,
                    None => {
                        let s = standardize_on_graph(g, fw.score)?;
                        std_score = Some(s);
                        s
                    }
                };
                ec_on_graph(g, s, e, hyper.tau_ec)?
            }
            LossTerm::Pair => pair_on_graph(
                g,
                fw.score,
                &e_vals,
                hyper.delta,
                hyper.tau_pair,
                hyper.max_pairs,
                pair_seed,
            )?,
            LossTerm::Tail => tail_on_graph(g, fw.score, e, hyper.tail_temperature)?,
            LossTerm::Trust => match fw.base_delta {
                Some(dz) => trust_on_graph(g, dz, fw.logits)?,
                None => continue,
            },
            LossTerm::Anchor => anchor_consistency_on_graph(g, fw.score, fw.anchor)?,
            LossTerm::Res => residual_on_graph(g, fw.weight, fw.residual_energy)?,
        };
        terms.push((t, v));
    }
    let mut total: Option<Var> = None;
    for &(t, v) in &terms {
        let wv = g.scale(v, weights.get(t));
        total = Some(match total {
            Some(acc) => g.add(acc, wv)?,
            None => wv,
        });
    }
    Ok(Objective { total, terms })
}

fn error_flags(z: &[f64], d: &Dims, labels: &[u32]) -> Vec<f64> {
    let (nb, nc, nv) = (d.batch, d.channels, d.voxels());
    let mut e = Vec::with_capacity(nb * nv);
    for b in 0..nb {
        for i in 0..nv {
            let k = argmax((0..nc).map(|c| z[(b * nc + c) * nv + i]));
            e.push(if k == labels[b * nv + i] as usize { 0.0 } else { 1.0 });
        }
    }
    e
}

fn flat(g: &mut Graph, values: &[f64]) -> Result<Var> {
    g.constant(Dims::new(1, 1, vec![values.len()]), values.to_vec())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {} must match and be nonzero", a.len(), b.len())));
    }
    Ok(())
}

pub fn standardize(u: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::Shape("cannot standardize an empty slice".into()));
    }
    let mut g = Graph::new();
    let v = flat(&mut g, u)?;
    let s = standardize_on_graph(&mut g, v)?;
    Ok(g.value(s).to_vec())
}

/// NLL of `labels` under `softmax(z_tilde)`; `z_tilde` is `(B, C, spatial...)`.
pub fn nll_loss(z_tilde: &DenseField, labels: &LabelField) -> Result<f64> {
    labels.check_aligned(z_tilde)?;
    let mut g = Graph::new();
    let z = crate::tensor::constant_field(&mut g, z_tilde);
    let l = nll_on_graph(&mut g, z, labels.data())?;
    Ok(g.value(l)[0])
}

pub fn ec_loss(u_hat: &[f64], e: &[f64], tau: f64) -> Result<f64> {
    check_len(u_hat, e)?;
    let mut g = Graph::new();
    let u = flat(&mut g, u_hat)?;
    let ev = flat(&mut g, e)?;
    let l = ec_on_graph(&mut g, u, ev, tau)?;
    Ok(g.value(l)[0])
}

pub fn pairwise_loss(u: &[f64], e: &[f64], delta: f64, tau: f64, max_pairs: usize, seed: u64) -> Result<f64> {
    check_len(u, e)?;
    let mut g = Graph::new();
    let uv = flat(&mut g, u)?;
    let l = pair_on_graph(&mut g, uv, e, delta, tau, max_pairs, seed)?;
    Ok(g.value(l)[0])
}

pub fn tail_loss(u: &[f64], e: &[f64], temperature: f64) -> Result<f64> {
    check_len(u, e)?;
    let mut g = Graph::new();
    let uv = flat(&mut g, u)?;
    let ev = flat(&mut g, e)?;
    let l = tail_on_graph(&mut g, uv, ev, temperature)?;
    Ok(g.value(l)[0])
}

/// Trust term for logits and perturbation of equal `(B, C, spatial...)` shape.
pub fn trust_loss(dz: &DenseField, z: &DenseField) -> Result<f64> {
    if dz.shape() != z.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", dz.shape(), z.shape())));
    }
    let mut g = Graph::new();
    let d = crate::tensor::constant_field(&mut g, dz);
    let zv = crate::tensor::constant_field(&mut g, z);
    let l = trust_on_graph(&mut g, d, zv)?;
    Ok(g.value(l)[0])
}

pub fn anchor_consistency_loss(ranking: &[f64], anchor: &[f64]) -> Result<f64> {
    check_len(ranking, anchor)?;
    let mut g = Graph::new();
    let r = flat(&mut g, ranking)?;
    let a = flat(&mut g, anchor)?;
    let l = anchor_consistency_on_graph(&mut g, r, a)?;
    Ok(g.value(l)[0])
}

pub fn residual_reg_loss(w: &[f64], u_res: &[f64]) -> Result<f64> {
    check_len(w, u_res)?;
    let mut g = Graph::new();
    let wv = flat(&mut g, w)?;
    let r = flat(&mut g, u_res)?;
    let l = residual_on_graph(&mut g, wv, r)?;
    Ok(g.value(l)[0])
}
