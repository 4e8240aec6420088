//! Voxel-level evaluation metrics and the simple baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{argmax, entropy, softmax_f64};
use crate::tensor::{DenseField, LabelField};

/// Number of thresholds on the accuracy-threshold grid.
pub const ACCURACY_THRESHOLDS: usize = 101;
/// Search bracket for the temperature, in `T`.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
/// Golden-section tolerance on `log T`.
pub const TEMPERATURE_TOLERANCE: f64 = 1e-4;

/// Mean foreground Dice over classes present in either mask; 1 without foreground.
pub fn dice(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} voxels, reference {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0u64; num_classes];
    let mut np = vec![0u64; num_classes];
    let mut ng = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        for l in [p, g] {
            if l as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: i64::from(l),
                    num_classes,
                });
            }
        }
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let scores: Vec<f64> = (1..num_classes)
        .filter(|&c| np[c] + ng[c] > 0)
        .map(|c| 2.0 * inter[c] as f64 / (np[c] + ng[c]) as f64)
        .collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean squared distance between probability vectors and one-hot labels.
pub fn brier(p: &DenseField, y: &LabelField) -> Result<f64> {
    y.check_aligned(p)?;
    y.check_range(p.channels())?;
    let (nb, nc, nv) = (p.batch(), p.channels(), p.voxels());
    let mut total = 0.0;
    for b in 0..nb {
        for i in 0..nv {
            let label = y.data()[b * nv + i] as usize;
            for c in 0..nc {
                let target = if c == label { 1.0 } else { 0.0 };
                let d = f64::from(p.get(b, c, i)) - target;
                total += d * d;
            }
        }
    }
    Ok(total / (nb * nv) as f64)
}

/// Indices of `u` in ascending order, ties by index.
fn ascending_order(u: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    idx
}

/// Error-detection AUROC with mid-ranks; `None` unless both populations are present.
pub fn auroc(u: &[f64], e: &[bool]) -> Result<Option<f64>> {
    check_scores(u, e)?;
    let n1 = e.iter().filter(|&&x| x).count();
    let n0 = e.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Ok(None);
    }
    let order = ascending_order(u);
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && u[order[end]] == u[order[k]] {
            end += 1;
        }
        // Ranks k+1..=end share their mean.
        let mid = (k + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[k..end].iter().filter(|&&i| e[i]).count() as f64;
        k = end;
    }
    let n1f = n1 as f64;
    Ok(Some((rank_sum - n1f * (n1f + 1.0) / 2.0) / (n1f * n0 as f64)))
}

fn check_scores(u: &[f64], e: &[bool]) -> Result<()> {
    if u.len() != e.len() {
        return Err(Error::Shape(format!("{} scores for {} error flags", u.len(), e.len())));
    }
    if u.is_empty() {
        return Err(Error::InvalidArgument("no voxels to score".into()));
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("uncertainty score"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveSource {
    Method,
    Oracle,
    Random,
}

/// Risk at coverages `k / N`, `k = 1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    pub coverage: Vec<f64>,
    pub risk: Vec<f64>,
    pub source: CurveSource,
}

fn prefix_curve(e: &[bool], order: &[usize], source: CurveSource) -> RiskCoverageCurve {
    let n = e.len() as f64;
    let mut errs = 0usize;
    let mut coverage = Vec::with_capacity(order.len());
    let mut risk = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        errs += usize::from(e[i]);
        coverage.push((k + 1) as f64 / n);
        risk.push(errs as f64 / (k + 1) as f64);
    }
    RiskCoverageCurve {
        coverage,
        risk,
        source,
    }
}

/// Retains voxels in ascending `u` and records the running error rate.
pub fn risk_coverage_curve(u: &[f64], e: &[bool]) -> Result<RiskCoverageCurve> {
    check_scores(u, e)?;
    Ok(prefix_curve(e, &ascending_order(u), CurveSource::Method))
}

/// Trapezoidal area from the first attained coverage to 1.
pub fn aurc(curve: &RiskCoverageCurve) -> f64 {
    curve
        .coverage
        .windows(2)
        .zip(curve.risk.windows(2))
        .map(|(c, r)| (c[1] - c[0]) * (r[0] + r[1]) / 2.0)
        .sum()
}

/// The random-rejection and oracle curves for an error pattern.
pub fn reference_curves(e: &[bool]) -> Result<(RiskCoverageCurve, RiskCoverageCurve)> {
    if e.is_empty() {
        return Err(Error::InvalidArgument("no voxels to score".into()));
    }
    let n = e.len();
    let rate = e.iter().filter(|&&x| x).count() as f64 / n as f64;
    let random = RiskCoverageCurve {
        coverage: (1..=n).map(|k| k as f64 / n as f64).collect(),
        risk: vec![rate; n],
        source: CurveSource::Random,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (e[i], i));
    Ok((random, prefix_curve(e, &order, CurveSource::Oracle)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub threshold: f64,
    /// `None` when no voxel reaches the threshold.
    pub accuracy: Option<f64>,
    pub retained_fraction: f64,
}

/// Accuracy of voxels whose top probability reaches each of 101 thresholds on `[0, 1]`.
pub fn accuracy_threshold_curve(p: &DenseField, y: &LabelField) -> Result<Vec<AccuracyPoint>> {
    y.check_aligned(p)?;
    y.check_range(p.channels())?;
    let (nb, nc, nv) = (p.batch(), p.channels(), p.voxels());
    let mut conf = Vec::with_capacity(nb * nv);
    for b in 0..nb {
        for i in 0..nv {
            let probs: Vec<f64> = (0..nc).map(|c| f64::from(p.get(b, c, i))).collect();
            let k = argmax(probs.iter().copied());
            conf.push((probs[k], k == y.data()[b * nv + i] as usize));
        }
    }
    let n = conf.len() as f64;
    Ok((0..ACCURACY_THRESHOLDS)
        .map(|k| {
            let t = k as f64 / (ACCURACY_THRESHOLDS - 1) as f64;
            let (kept, right) = conf
                .iter()
                .filter(|(c, _)| *c >= t)
                .fold((0usize, 0usize), |(a, r), (_, ok)| (a + 1, r + usize::from(*ok)));
            AccuracyPoint {
                threshold: t,
                accuracy: (kept > 0).then(|| right as f64 / kept as f64),
                retained_fraction: kept as f64 / n,
            }
        })
        .collect())
}

/// Per-voxel Shannon entropy of a probability field, one channel.
pub fn entropy_score(p: &DenseField) -> Result<DenseField> {
    let (nb, nc, nv) = (p.batch(), p.channels(), p.voxels());
    let mut out = Vec::with_capacity(nb * nv);
    for b in 0..nb {
        for i in 0..nv {
            out.push(entropy((0..nc).map(|c| f64::from(p.get(b, c, i)))));
        }
    }
    DenseField::from_f64(p.shape_with_channels(1), &out)
}

/// Mean NLL of labels under `softmax(z / t)` over every case.
pub fn tempered_nll(cases: &[(&DenseField, &LabelField)], t: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, y) in cases {
        y.check_aligned(z)?;
        y.check_range(z.channels())?;
        let (nb, nc, nv) = (z.batch(), z.channels(), z.voxels());
        let scaled: Vec<f64> = z.data().iter().map(|&x| f64::from(x) / t).collect();
        let p = softmax_f64(&scaled, nb, nc, nv);
        for b in 0..nb {
            for i in 0..nv {
                let label = y.data()[b * nv + i] as usize;
                total -= p[(b * nc + label) * nv + i].max(1e-300).ln();
            }
        }
        count += nb * nv;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("temperature fit needs at least one voxel".into()));
    }
    Ok(total / count as f64)
}

/// `softmax(z / t)` computed in 64-bit.
pub fn temperature_probs(z: &DenseField, t: f64) -> Result<DenseField> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {t} must be positive")));
    }
    let (nb, nc, nv) = (z.batch(), z.channels(), z.voxels());
    let scaled: Vec<f64> = z.data().iter().map(|&x| f64::from(x) / t).collect();
    DenseField::from_f64(z.shape().to_vec(), &softmax_f64(&scaled, nb, nc, nv))
}

/// Scalar temperature minimizing validation NLL, by golden-section search on `log T`.
pub fn fit_temperature(cases: &[(&DenseField, &LabelField)]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("temperature fit needs validation cases".into()));
    }
    let f = |s: f64| tempered_nll(cases, s.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > TEMPERATURE_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(((a + b) / 2.0).exp())
}

/// Per-voxel argmax labels, lowest class on ties.
pub fn argmax_labels(z: &DenseField) -> Result<LabelField> {
    let (nb, nc, nv) = (z.batch(), z.channels(), z.voxels());
    let mut out = Vec::with_capacity(nb * nv);
    for b in 0..nb {
        for i in 0..nv {
            out.push(argmax((0..nc).map(|c| f64::from(z.get(b, c, i)))) as u32);
        }
    }
    let mut shape = vec![nb];
    shape.extend_from_slice(z.spatial());
    LabelField::new(shape, out)
}

/// Error flags of argmax predictions against labels.
pub fn error_flags(pred: &LabelField, y: &LabelField) -> Result<Vec<bool>> {
    if pred.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), y.shape())));
    }
    Ok(pred.data().iter().zip(y.data()).map(|(a, b)| a != b).collect())
}

/// One row of the per-case results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub method: String,
    pub dice: f64,
    pub brier: f64,
    pub auroc: Option<f64>,
    pub aurc: f64,
}

/// Scores one case: Dice from the logits, Brier from `probs`, ranking metrics from `score`.
pub fn case_metrics(
    case_id: &str,
    method: &str,
    logits: &DenseField,
    probs: &DenseField,
    labels: &LabelField,
    score: &DenseField,
) -> Result<CaseMetrics> {
    labels.check_aligned(logits)?;
    labels.check_aligned(score)?;
    if score.channels() != 1 {
        return Err(Error::Channels {
            expected: 1,
            actual: score.channels(),
        });
    }
    let pred = argmax_labels(logits)?;
    let e = error_flags(&pred, labels)?;
    let u = score.to_f64();
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        method: method.to_string(),
        dice: dice(pred.data(), labels.data(), logits.channels())?,
        brier: brier(probs, labels)?,
        auroc: auroc(&u, &e)?,
        aurc: aurc(&risk_coverage_curve(&u, &e)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flags(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 2, 0, 1], &[1, 2, 0, 1], 3).unwrap(), 1.0);
        assert_eq!(dice(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        assert!((dice(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&[0, 0], &[0, 0], 3).unwrap(), 1.0);
        // Class 2 absent from both masks is left out of the mean.
        assert_eq!(dice(&[1, 0], &[1, 0], 3).unwrap(), 1.0);
        assert!(dice(&[3], &[0], 3).is_err());
        assert!(dice(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn brier_examples() {
        let y = LabelField::new(vec![1, 1], vec![0]).unwrap();
        let one_hot = DenseField::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(brier(&one_hot, &y).unwrap(), 0.0);
        let half = DenseField::new(vec![1, 2, 1], vec![0.5, 0.5]).unwrap();
        assert_eq!(brier(&half, &y).unwrap(), 0.5);
        let p = DenseField::new(vec![1, 2, 1], vec![0.8, 0.2]).unwrap();
        assert!((brier(&p, &y).unwrap() - 0.08).abs() < 1e-7);
    }

    #[test]
    fn auroc_examples() {
        let e = flags(&[1, 0, 1, 0]);
        assert_eq!(auroc(&[0.9, 0.1, 0.8, 0.2], &e).unwrap(), Some(1.0));
        assert_eq!(auroc(&[0.3; 4], &e).unwrap(), Some(0.5));
        let got = auroc(&[0.5, 0.4, 0.9, 0.1, 0.5], &flags(&[1, 0, 0, 0, 1])).unwrap().unwrap();
        assert!((got - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(auroc(&[0.1, 0.2], &flags(&[0, 0])).unwrap(), None);
        assert_eq!(auroc(&[0.1, 0.2], &flags(&[1, 1])).unwrap(), None);
    }

    #[test]
    fn risk_coverage_examples() {
        let u = [1.0, 2.0, 3.0, 4.0];
        let zero = risk_coverage_curve(&u, &flags(&[0, 0, 0, 0])).unwrap();
        assert!(zero.risk.iter().all(|&r| r == 0.0));
        let one = risk_coverage_curve(&u, &flags(&[1, 1, 1, 1])).unwrap();
        assert!(one.risk.iter().all(|&r| r == 1.0));
        let c = risk_coverage_curve(&u, &flags(&[0, 0, 0, 1])).unwrap();
        assert_eq!(c.risk, vec![0.0, 0.0, 0.0, 0.25]);
        assert_eq!(c.coverage, vec![0.25, 0.5, 0.75, 1.0]);
        assert!((aurc(&c) - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn reference_curve_examples() {
        let e = flags(&[0, 0, 0, 1]);
        let (random, oracle) = reference_curves(&e).unwrap();
        assert!(random.risk.iter().all(|&r| r == 0.25));
        assert!((aurc(&random) - 0.25 * 0.75).abs() < 1e-15);
        assert_eq!(&oracle.risk[..3], &[0.0, 0.0, 0.0]);
        assert!((aurc(&oracle) - 0.03125).abs() < 1e-15);
        let (_, shuffled) = reference_curves(&flags(&[1, 0, 0, 0])).unwrap();
        assert_eq!(shuffled.risk, vec![0.0, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn accuracy_threshold_examples() {
        let p = DenseField::new(vec![1, 2, 2], vec![0.9, 0.4, 0.1, 0.6]).unwrap();
        let y = LabelField::new(vec![1, 2], vec![0, 0]).unwrap();
        let curve = accuracy_threshold_curve(&p, &y).unwrap();
        assert_eq!(curve.len(), 101);
        assert_eq!(curve[0].accuracy, Some(0.5));
        assert_eq!(curve[70].accuracy, Some(1.0));
        assert_eq!(curve[70].retained_fraction, 0.5);
        assert_eq!(curve[100].accuracy, None);
        assert_eq!(curve[100].retained_fraction, 0.0);
    }

    #[test]
    fn entropy_score_examples() {
        let p = DenseField::new(vec![1, 2, 2], vec![1.0, 0.5, 0.0, 0.5]).unwrap();
        let h = entropy_score(&p).unwrap();
        assert_eq!(h.shape(), &[1, 1, 2]);
        assert_eq!(h.data()[0], 0.0);
        assert!((f64::from(h.data()[1]) - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn temperature_fit_recovers_scale() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 4000;
        let mut z = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        let mut logits = vec![0.0f32; 2 * n];
        for i in 0..n {
            let a: f64 = rng.random_range(-3.0..3.0);
            logits[i] = a as f32;
            logits[n + i] = 0.0;
            let p0 = 1.0 / (1.0 + (-a).exp());
            y.push(u32::from(rng.random::<f64>() >= p0));
        }
        z.extend_from_slice(&logits);
        let calibrated = DenseField::new(vec![1, 2, n], z).unwrap();
        let labels = LabelField::new(vec![1, n], y).unwrap();
        let t1 = fit_temperature(&[(&calibrated, &labels)]).unwrap();
        assert!((t1 - 1.0).abs() < 0.1, "{t1}");
        let doubled = DenseField::new(vec![1, 2, n], logits.iter().map(|x| x * 2.0).collect()).unwrap();
        let t2 = fit_temperature(&[(&doubled, &labels)]).unwrap();
        assert!((t2 - 2.0).abs() < 0.2, "{t2}");
        // Grid-search oracle agrees.
        let grid_best = (1..=400)
            .map(|k| 0.05 * f64::from(k))
            .min_by(|&a, &b| {
                let fa = tempered_nll(&[(&doubled, &labels)], a).unwrap();
                let fb = tempered_nll(&[(&doubled, &labels)], b).unwrap();
                fa.total_cmp(&fb)
            })
            .unwrap();
        assert!((t2 - grid_best).abs() < 0.05 + 1e-9);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..200).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|k| f64::from(k) / 4.0), n),
                prop::collection::vec(prop::bool::ANY, n),
            )
        })
    }

    fn brute_auroc(u: &[f64], e: &[bool]) -> Option<f64> {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..u.len() {
            for j in 0..u.len() {
                if e[i] && !e[j] {
                    pairs += 1.0;
                    if u[i] > u[j] {
                        wins += 1.0;
                    } else if u[i] == u[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    proptest! {
        #[test]
        fn auroc_matches_brute_force((u, e) in instance()) {
            let got = auroc(&u, &e).unwrap();
            match (got, brute_auroc(&u, &e)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-10),
                (None, None) => {}
                other => prop_assert!(false, "{other:?}"),
            }
        }

        #[test]
        fn oracle_bounds_method((u, e) in instance()) {
            let method = aurc(&risk_coverage_curve(&u, &e).unwrap());
            let (random, oracle) = reference_curves(&e).unwrap();
            prop_assert!(aurc(&oracle) <= method + 1e-12);
            let rate = e.iter().filter(|&&x| x).count() as f64 / e.len() as f64;
            prop_assert!((aurc(&random) - rate * (1.0 - 1.0 / e.len() as f64)).abs() <= 1e-9);
            let c = risk_coverage_curve(&u, &e).unwrap();
            prop_assert!((c.risk.last().unwrap() - rate).abs() < 1e-12);
        }

        #[test]
        fn rank_invariance((u, e) in instance()) {
            let t: Vec<f64> = u.iter().map(|x| (2.0 * x).exp() - 3.0).collect();
            prop_assert_eq!(auroc(&u, &e).unwrap(), auroc(&t, &e).unwrap());
            let a = aurc(&risk_coverage_curve(&u, &e).unwrap());
            let b = aurc(&risk_coverage_curve(&t, &e).unwrap());
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn dice_is_symmetric(pairs in prop::collection::vec((0u32..4, 0u32..4), 1..60)) {
            let (p, g): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            prop_assert_eq!(dice(&p, &g, 4).unwrap(), dice(&g, &p, 4).unwrap());
        }
    }
}
