//! Margin weighting, aleatoric and calibration branches, logit tempering,
//! entropy, the anchor map and the ranking map.
//!
//! Quantities that depend only on the frozen logits (margin, ambiguity
//! weight, entropy) are plain `f64` computations. Everything downstream of
//! learnable parameters also has a graph form used during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{entropy, softmax_f64};
use crate::tensor::{constant_field, to_field, DenseField, Graph, Linear, LinearVars, Var};

pub const DEFAULT_GAMMA: f64 = 4.0;

/// Parameters of the map heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapParams {
    pub gamma: f64,
    /// `F -> 1`; absent when the aleatoric branch is disabled.
    pub psi_ale: Option<Linear>,
    /// `3 -> 1` with the aleatoric branch, `2 -> 1` without.
    pub psi_cal: Linear,
    pub rank_a: f64,
    pub rank_b: f64,
    pub rank_c: f64,
}

impl MapParams {
    /// Zero-initialized heads, so the ranking map starts as the handcrafted
    /// score `U_anchor + ln2 * w`.
    pub fn init(features: usize, gamma: f64, aleatoric: bool) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument("gamma must be positive".into()));
        }
        Ok(Self {
            gamma,
            psi_ale: aleatoric.then(|| Linear::zeros(1, features)),
            psi_cal: Linear::zeros(1, if aleatoric { 3 } else { 2 }),
            rank_a: 0.0,
            rank_b: 0.0,
            rank_c: 0.0,
        })
    }

    pub fn aleatoric_enabled(&self) -> bool {
        self.psi_ale.is_some()
    }
}

// ---------------------------------------------------------------------------
// Logit-only quantities
// ---------------------------------------------------------------------------

/// Per-voxel features of the frozen prediction, all `(batch, voxels)` flat.
#[derive(Debug, Clone)]
pub(crate) struct LogitStats {
    pub margin: Vec<f64>,
    pub weight: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl LogitStats {
    pub fn compute(z: &[f64], batch: usize, classes: usize, voxels: usize, gamma: f64) -> Self {
        let probs = softmax_f64(z, batch, classes, voxels);
        let mut margin = Vec::with_capacity(batch * voxels);
        let mut ent = Vec::with_capacity(batch * voxels);
        for b in 0..batch {
            for i in 0..voxels {
                let base = b * classes * voxels + i;
                let col = (0..classes).map(|c| probs[base + c * voxels]);
                margin.push(top_two_gap(col.clone()));
                ent.push(entropy(col));
            }
        }
        let weight = margin.iter().map(|&m| (-gamma * m).exp()).collect();
        Self {
            margin,
            weight,
            entropy: ent,
        }
    }
}

fn top_two_gap(values: impl Iterator<Item = f64>) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in values {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (first - second).max(0.0)
}

fn per_voxel(p: &DenseField, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Result<DenseField> {
    let (nb, nc, nv) = (p.batch(), p.channels(), p.voxels());
    let mut out = Vec::with_capacity(nb * nv);
    for b in 0..nb {
        for i in 0..nv {
            let mut col = (0..nc).map(|c| p.get(b, c, i) as f64);
            out.push(f(&mut col));
        }
    }
    DenseField::from_f64(p.shape_with_channels(1), &out)
}

/// `p_(1) - p_(2)` per voxel.
pub fn margin_map(p: &DenseField) -> Result<DenseField> {
    if p.channels() < 2 {
        return Err(Error::InvalidArgument("margin needs at least two classes".into()));
    }
    per_voxel(p, |col| top_two_gap(col))
}

/// `exp(-gamma * m)`.
pub fn ambiguity_weight(m: &DenseField, gamma: f64) -> Result<DenseField> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument("gamma must be positive".into()));
    }
    let w: Vec<f64> = m.data().iter().map(|&x| (-gamma * x as f64).exp()).collect();
    DenseField::from_f64(m.shape().to_vec(), &w)
}

/// Shannon entropy of the class probabilities per voxel.
pub fn entropy_map(p: &DenseField) -> Result<DenseField> {
    per_voxel(p, |col| entropy(col))
}

// ---------------------------------------------------------------------------
// Learnable branches
// ---------------------------------------------------------------------------

/// `softplus(psi_ale(h))`.
pub fn aleatoric_map(h: &DenseField, psi_ale: &Linear) -> Result<DenseField> {
    let mut g = Graph::new();
    let lin = LinearVars::register(&mut g, psi_ale, false);
    let hv = constant_field(&mut g, h);
    let out = aleatoric_on_graph(&mut g, hv, &lin)?;
    to_field(&g, out)
}

pub(crate) fn aleatoric_on_graph(g: &mut Graph, h: Var, psi_ale: &LinearVars) -> Result<Var> {
    let a = psi_ale.apply(g, h)?;
    Ok(g.softplus(a))
}

/// `softplus(psi_cal([log(1 + U_epi + U_res), log(1 + U_ale), m]))`, the
/// middle feature present only with the aleatoric branch.
pub fn calibration_map(
    u_epi: &DenseField,
    u_res: &DenseField,
    u_ale: Option<&DenseField>,
    m: &DenseField,
    psi_cal: &Linear,
) -> Result<DenseField> {
    let mut g = Graph::new();
    let lin = LinearVars::register(&mut g, psi_cal, false);
    let e = constant_field(&mut g, u_epi);
    let r = constant_field(&mut g, u_res);
    let a = u_ale.map(|f| constant_field(&mut g, f));
    let mv = constant_field(&mut g, m);
    let out = calibration_on_graph(&mut g, e, r, a, mv, &lin, psi_cal.in_dim)?;
    to_field(&g, out)
}

pub(crate) fn calibration_on_graph(
    g: &mut Graph,
    u_epi: Var,
    u_res: Var,
    u_ale: Option<Var>,
    m: Var,
    psi_cal: &LinearVars,
    in_dim: usize,
) -> Result<Var> {
    let want = if u_ale.is_some() { 3 } else { 2 };
    if in_dim != want {
        return Err(Error::Channels {
            expected: want,
            actual: in_dim,
        });
    }
    let er = g.add(u_epi, u_res)?;
    let f0 = g.ln_1p(er);
    let mut feats = vec![f0];
    if let Some(a) = u_ale {
        feats.push(g.ln_1p(a));
    }
    feats.push(m);
    let x = g.concat_channels(&feats)?;
    let c = psi_cal.apply(g, x)?;
    Ok(g.softplus(c))
}

/// `z / sqrt(1 + U_cal)`; never changes the per-voxel argmax.
pub fn temper_logits(z: &DenseField, u_cal: &DenseField) -> Result<DenseField> {
    check_one_channel(u_cal, z)?;
    let mut g = Graph::new();
    let zv = constant_field(&mut g, z);
    let cv = constant_field(&mut g, u_cal);
    let out = temper_on_graph(&mut g, zv, cv)?;
    to_field(&g, out)
}

pub(crate) fn temper_on_graph(g: &mut Graph, z: Var, u_cal: Var) -> Result<Var> {
    let t = g.offset(u_cal, 1.0);
    let s = g.sqrt(t);
    g.div(z, s)
}

/// `log(1+U_epi) + log(1+U_res)/2 + log(1+U_cal)/4 + H/(4 log C) + w`.
pub fn anchor_map(
    u_epi: &DenseField,
    u_res: &DenseField,
    u_cal: &DenseField,
    entropy: &DenseField,
    w: &DenseField,
    classes: usize,
) -> Result<DenseField> {
    for f in [u_res, u_cal, entropy, w] {
        check_one_channel(f, u_epi)?;
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = [u_epi, u_res, u_cal, entropy, w]
        .iter()
        .map(|f| constant_field(&mut g, f))
        .collect();
    let out = anchor_on_graph(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4], classes)?;
    to_field(&g, out)
}

pub(crate) fn anchor_on_graph(
    g: &mut Graph,
    u_epi: Var,
    u_res: Var,
    u_cal: Var,
    entropy: Var,
    w: Var,
    classes: usize,
) -> Result<Var> {
    if classes < 2 {
        return Err(Error::InvalidArgument("anchor needs at least two classes".into()));
    }
    let e = g.ln_1p(u_epi);
    let r = g.ln_1p(u_res);
    let r = g.scale(r, 0.5);
    let c = g.ln_1p(u_cal);
    let c = g.scale(c, 0.25);
    let h = g.scale(entropy, 0.25 / (classes as f64).ln());
    let mut acc = g.add(e, r)?;
    acc = g.add(acc, c)?;
    acc = g.add(acc, h)?;
    g.add(acc, w)
}

/// `(1 + 0.1 tanh a) U_anchor + b + softplus(c) w`.
pub fn ranking_map(anchor: &DenseField, w: &DenseField, a: f64, b: f64, c: f64) -> Result<DenseField> {
    check_one_channel(w, anchor)?;
    let mut g = Graph::new();
    let av = g.scalar(a);
    let bv = g.scalar(b);
    let cv = g.scalar(c);
    let an = constant_field(&mut g, anchor);
    let wv = constant_field(&mut g, w);
    let out = ranking_on_graph(&mut g, an, wv, av, bv, cv)?;
    to_field(&g, out)
}

pub(crate) fn ranking_on_graph(
    g: &mut Graph,
    anchor: Var,
    w: Var,
    a: Var,
    b: Var,
    c: Var,
) -> Result<Var> {
    let ta = g.tanh(a);
    let ta = g.scale(ta, 0.1);
    let slope = g.offset(ta, 1.0);
    let lhs = g.mul(slope, anchor)?;
    let lhs = g.add(lhs, b)?;
    let sc = g.softplus(c);
    let rhs = g.mul(sc, w)?;
    g.add(lhs, rhs)
}

fn check_one_channel(f: &DenseField, like: &DenseField) -> Result<()> {
    if f.channels() != 1 {
        return Err(Error::Channels {
            expected: 1,
            actual: f.channels(),
        });
    }
    if f.batch() != like.batch() || f.spatial() != like.spatial() {
        return Err(Error::Shape(format!(
            "{:?} not aligned with {:?}",
            f.shape(),
            like.shape()
        )));
    }
    Ok(())
}

/// Full per-voxel output of the head for a batch of cases.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBundle {
    pub probe_responses: Option<DenseField>,
    pub epistemic: DenseField,
    pub aleatoric: Option<DenseField>,
    pub calibration: DenseField,
    pub ranking: DenseField,
    pub anchor: DenseField,
    pub probe_energy: DenseField,
    pub residual_energy: DenseField,
    pub margin: DenseField,
    pub weight: DenseField,
    pub entropy: DenseField,
    pub tempered_logits: DenseField,
}

impl UncertaintyBundle {
    /// Named maps in a fixed order, for export.
    pub fn named_fields(&self) -> Vec<(&'static str, &DenseField)> {
        let mut out = Vec::new();
        if let Some(v) = &self.probe_responses {
            out.push(("probe_responses", v));
        }
        out.push(("u_epi", &self.epistemic));
        if let Some(a) = &self.aleatoric {
            out.push(("u_ale", a));
        }
        out.extend([
            ("u_cal", &self.calibration),
            ("u_rnk", &self.ranking),
            ("u_anchor", &self.anchor),
            ("u_probe", &self.probe_energy),
            ("u_res", &self.residual_energy),
            ("margin", &self.margin),
            ("weight", &self.weight),
            ("entropy", &self.entropy),
            ("tempered_logits", &self.tempered_logits),
        ]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn f1(data: &[f32]) -> DenseField {
        DenseField::new(vec![1, 1, data.len()], data.to_vec()).unwrap()
    }

    fn probs(cols: &[&[f32]]) -> DenseField {
        let c = cols[0].len();
        let n = cols.len();
        let mut data = vec![0.0; c * n];
        for (i, col) in cols.iter().enumerate() {
            for (k, &p) in col.iter().enumerate() {
                data[k * n + i] = p;
            }
        }
        DenseField::new(vec![1, c, n], data).unwrap()
    }

    #[test]
    fn margin_examples() {
        let p = probs(&[&[1.0, 0.0, 0.0], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], &[0.5, 0.3, 0.2]]);
        let m = margin_map(&p).unwrap();
        assert_eq!(m.data()[0], 1.0);
        assert_eq!(m.data()[1], 0.0);
        assert!((m.data()[2] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn weight_examples() {
        let w = ambiguity_weight(&f1(&[0.0, 1.0, 0.5]), 4.0).unwrap();
        assert_eq!(w.data()[0], 1.0);
        assert!((w.data()[1] as f64 - 0.018_316).abs() < 1e-6);
        assert!(w.data()[2] > w.data()[1] && w.data()[2] < w.data()[0]);
        assert!(ambiguity_weight(&f1(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn aleatoric_examples() {
        let h = DenseField::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let u = aleatoric_map(&h, &Linear::zeros(1, 2)).unwrap();
        assert!(u.data().iter().all(|&x| (x as f64 - LN_2).abs() < 1e-7));
        let mut lin = Linear::zeros(1, 2);
        lin.bias = vec![-20.0];
        let u = aleatoric_map(&h, &lin).unwrap();
        assert!(u.data().iter().all(|&x| x > 0.0 && (x as f64 - 2.061e-9).abs() < 1e-12));
    }

    #[test]
    fn calibration_examples() {
        let z = f1(&[0.0]);
        let u = calibration_map(&z, &z, Some(&z), &z, &Linear::zeros(1, 3)).unwrap();
        assert!((u.data()[0] as f64 - LN_2).abs() < 1e-7);
        let ones = Linear::from_parts(1, 3, vec![1.0; 3], vec![0.0]).unwrap();
        let u = calibration_map(&z, &z, Some(&z), &z, &ones).unwrap();
        assert!((u.data()[0] as f64 - LN_2).abs() < 1e-7);
        assert!(calibration_map(&z, &z, None, &z, &ones).is_err());
        let two = Linear::from_parts(1, 2, vec![1.0, 1.0], vec![0.0]).unwrap();
        assert!(calibration_map(&z, &z, None, &z, &two).is_ok());
    }

    #[test]
    fn temper_examples() {
        let z = DenseField::new(vec![1, 2, 1], vec![4.0, 2.0]).unwrap();
        assert_eq!(temper_logits(&z, &f1(&[0.0])).unwrap(), z);
        assert_eq!(temper_logits(&z, &f1(&[3.0])).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn entropy_examples() {
        let p = probs(&[&[0.0, 1.0, 0.0, 0.0], &[0.25; 4]]);
        let h = entropy_map(&p).unwrap();
        assert_eq!(h.data()[0], 0.0);
        assert!((h.data()[1] as f64 - 4f64.ln()).abs() < 1e-6);
        let h = entropy_map(&probs(&[&[0.5, 0.5]])).unwrap();
        assert!((h.data()[0] as f64 - LN_2).abs() < 1e-7);
    }

    #[test]
    fn anchor_and_ranking_examples() {
        let zero = f1(&[0.0]);
        let one = f1(&[1.0]);
        let a = anchor_map(&zero, &zero, &zero, &zero, &one, 3).unwrap();
        assert!((a.data()[0] - 1.0).abs() < 1e-7);
        let e = f1(&[(1f64.exp() - 1.0) as f32]);
        let w = f1(&[(-4.0f64).exp() as f32]);
        let a = anchor_map(&e, &zero, &zero, &zero, &w, 3).unwrap();
        assert!((a.data()[0] as f64 - 1.018_316).abs() < 1e-5);

        let r = ranking_map(&one, &one, 0.0, 0.0, 0.0).unwrap();
        assert!((r.data()[0] as f64 - (1.0 + LN_2)).abs() < 1e-6);
        let r = ranking_map(&one, &one, 0.0, 0.5, 0.0).unwrap();
        assert!((r.data()[0] as f64 - 2.193_147).abs() < 1e-5);
        let big = ranking_map(&one, &zero, 50.0, 0.0, 0.0).unwrap();
        assert!((big.data()[0] as f64 - 1.1).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn tempering_preserves_argmax(
            zs in prop::collection::vec(-20.0f32..20.0, 3 * 6),
            cal in prop::collection::vec(0.0f32..50.0, 6),
        ) {
            let z = DenseField::new(vec![1, 3, 6], zs).unwrap();
            let u = DenseField::new(vec![1, 1, 6], cal).unwrap();
            let t = temper_logits(&z, &u).unwrap();
            for i in 0..6 {
                let a = crate::tensor::ops::argmax((0..3).map(|c| z.get(0, c, i) as f64));
                let b = crate::tensor::ops::argmax((0..3).map(|c| t.get(0, c, i) as f64));
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn anchor_monotone_and_ranking_increasing(
            base in prop::collection::vec(0.0f32..5.0, 5),
            bump in 0.01f32..2.0,
            which in 0usize..4,
            a in -10.0f64..10.0,
            b in -3.0f64..3.0,
            c in -3.0f64..3.0,
        ) {
            let fields: Vec<DenseField> = base.iter().map(|&x| f1(&[x])).collect();
            let lo = anchor_map(&fields[0], &fields[1], &fields[2], &fields[3], &fields[4], 3).unwrap();
            let mut bumped = fields.clone();
            bumped[which] = f1(&[base[which] + bump]);
            let hi = anchor_map(&bumped[0], &bumped[1], &bumped[2], &bumped[3], &bumped[4], 3).unwrap();
            prop_assert!(hi.data()[0] >= lo.data()[0]);
            let r_lo = ranking_map(&lo, &fields[4], a, b, c).unwrap();
            let r_hi = ranking_map(&f1(&[lo.data()[0] + bump]), &fields[4], a, b, c).unwrap();
            prop_assert!(r_hi.data()[0] > r_lo.data()[0]);
        }
    }
}
