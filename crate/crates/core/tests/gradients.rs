//! Central-difference checks for every differentiable graph operation.

use proptest::prelude::*;
use segwithu::losses::standardize_on_graph;
use segwithu::tensor::{Dims, Graph, Var};

const STEP: f64 = 1e-5;

/// Checks `d/dx sum(r * f(x))` against central differences for fixed random `r`.
fn check(dims: Dims, x: Vec<f64>, build: impl Fn(&mut Graph, Var) -> Var) -> Result<(), TestCaseError> {
    let weights = |n: usize| (0..n).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect::<Vec<f64>>();
    let eval = |x: &[f64], grad: bool| {
        let mut g = Graph::new();
        let xv = if grad {
            g.param(dims.clone(), x.to_vec()).unwrap()
        } else {
            g.constant(dims.clone(), x.to_vec()).unwrap()
        };
        let y = build(&mut g, xv);
        let r = g.constant(g.dims(y).clone(), weights(g.value(y).len())).unwrap();
        let prod = g.mul(y, r).unwrap();
        let loss = g.sum_all(prod);
        let value = g.value(loss)[0];
        let grads = grad.then(|| g.backward(loss).unwrap().of(xv).map(<[f64]>::to_vec).unwrap());
        (value, grads)
    };
    let analytic = eval(&x, true).1.unwrap();
    for k in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[k] += STEP;
        lo[k] -= STEP;
        let numeric = (eval(&hi, false).0 - eval(&lo, false).0) / (2.0 * STEP);
        let tol = 1e-5 * analytic[k].abs().max(numeric.abs()).max(1.0);
        prop_assert!(
            (analytic[k] - numeric).abs() <= tol,
            "element {k}: analytic {} numeric {numeric}",
            analytic[k]
        );
    }
    Ok(())
}

fn field(batch: usize, channels: usize, len: usize) -> impl Strategy<Value = (Dims, Vec<f64>)> {
    prop::collection::vec(-2.0f64..2.0, batch * channels * len).prop_map(move |v| (Dims::new(batch, channels, vec![len]), v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_unary_ops((d, x) in field(2, 3, 4)) {
        check(d.clone(), x.clone(), |g, v| g.softplus(v))?;
        check(d.clone(), x.clone(), |g, v| g.tanh(v))?;
        check(d.clone(), x.clone(), |g, v| g.exp(v))?;
        check(d.clone(), x.clone(), |g, v| g.square(v))?;
        check(d.clone(), x.clone(), |g, v| g.scale(v, -2.5))?;
        check(d.clone(), x.clone(), |g, v| g.offset(v, 0.7))?;
        check(d, x, |g, v| g.neg(v))?;
    }

    #[test]
    fn domain_restricted_unary_ops((d, x) in field(1, 2, 5)) {
        let pos: Vec<f64> = x.iter().map(|v| v.abs() + 0.5).collect();
        check(d.clone(), pos.clone(), |g, v| g.ln(v))?;
        check(d.clone(), pos.clone(), |g, v| g.ln_1p(v))?;
        check(d, pos, |g, v| g.sqrt(v))?;
    }

    #[test]
    fn piecewise_ops_away_from_kinks((d, x) in field(1, 2, 6)) {
        let away: Vec<f64> = x.iter().map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { *v }).collect();
        check(d.clone(), away.clone(), |g, v| g.smooth_l1(v))?;
        let shifted: Vec<f64> = away.iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect();
        check(d, shifted, |g, v| g.clamp_min(v, 0.0))?;
    }

    #[test]
    fn broadcasting_binary_ops((d, x) in field(2, 3, 4), other in prop::collection::vec(0.5f64..2.0, 2 * 4)) {
        let od = Dims::new(2, 1, vec![4]);
        for op in 0..4 {
            let (od, other) = (od.clone(), other.clone());
            check(d.clone(), x.clone(), move |g, v| {
                let c = g.constant(od.clone(), other.clone()).unwrap();
                match op {
                    0 => g.add(v, c).unwrap(),
                    1 => g.sub(c, v).unwrap(),
                    2 => g.mul(v, c).unwrap(),
                    _ => g.div(v, c).unwrap(),
                }
            })?;
        }
        // Gradient flowing into the broadcast operand.
        let big = x.clone();
        check(od.clone(), other.clone(), move |g, v| {
            let c = g.constant(Dims::new(2, 3, vec![4]), big.clone()).unwrap();
            let q = g.div(c, v).unwrap();
            g.mul(q, v).map(|m| g.add(m, q).unwrap()).unwrap()
        })?;
    }

    #[test]
    fn reductions((d, x) in field(2, 3, 4)) {
        check(d.clone(), x.clone(), |g, v| g.sum_all(v))?;
        check(d.clone(), x.clone(), |g, v| g.mean_all(v))?;
        check(d.clone(), x.clone(), |g, v| g.sum_channels(v))?;
        check(d, x, |g, v| g.mean_channels(v))?;
    }

    #[test]
    fn softmax_family((d, x) in field(2, 4, 3)) {
        check(d.clone(), x.clone(), |g, v| g.softmax(v))?;
        check(d, x, |g, v| g.log_softmax(v))?;
    }

    #[test]
    fn linear_in_every_argument((d, x) in field(2, 3, 4), w in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 2)) {
        let (w1, b1) = (w.clone(), b.clone());
        check(d.clone(), x.clone(), move |g, v| {
            let wv = g.constant(Dims::vector(6), w1.clone()).unwrap();
            let bv = g.constant(Dims::vector(2), b1.clone()).unwrap();
            g.linear(v, wv, bv, 2).unwrap()
        })?;
        let (x2, b2) = (x.clone(), b.clone());
        let dx = d.clone();
        check(Dims::vector(6), w.clone(), move |g, wv| {
            let xv = g.constant(dx.clone(), x2.clone()).unwrap();
            let bv = g.constant(Dims::vector(2), b2.clone()).unwrap();
            g.linear(xv, wv, bv, 2).unwrap()
        })?;
        check(Dims::vector(2), b, move |g, bv| {
            let xv = g.constant(d.clone(), x.clone()).unwrap();
            let wv = g.constant(Dims::vector(6), w.clone()).unwrap();
            g.linear(xv, wv, bv, 2).unwrap()
        })?;
    }

    #[test]
    fn indexing_ops(x in prop::collection::vec(-2.0f64..2.0, 3 * 16), labels in prop::collection::vec(0u32..3, 16), picks in prop::collection::vec(0usize..16, 1..20)) {
        let d = Dims::new(1, 3, vec![4, 4]);
        check(d.clone(), x.clone(), move |g, v| g.gather_channel(v, &labels).unwrap())?;
        check(d.clone(), x.clone(), move |g, v| {
            let one = g.mean_channels(v);
            g.gather(one, picks.clone()).unwrap()
        })?;
        check(d.clone(), x.clone(), |g, v| g.resize_nearest(v, &[8, 8]).unwrap())?;
        check(d, x, |g, v| {
            let sq = g.square(v);
            g.concat_channels(&[v, sq]).unwrap()
        })?;
    }

    #[test]
    fn standardization((d, x) in field(1, 1, 9)) {
        let spread: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + i as f64 * 0.3).collect();
        check(d, spread, |g, v| standardize_on_graph(g, v).unwrap())?;
    }
}
