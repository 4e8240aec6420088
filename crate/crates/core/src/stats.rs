//! Paired significance testing across methods.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size tested with the exact null distribution.
pub const DEFAULT_EXACT_MAX_N: usize = 25;
/// Family-wise significance level of the pairwise matrices.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences.
    pub n: usize,
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided paired signed-rank test with the default exact/normal crossover.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(x, y, DEFAULT_EXACT_MAX_N)
}

pub fn wilcoxon_signed_rank_with(x: &[f64], y: &[f64], exact_max_n: usize) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("paired samples are empty".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&v| v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired difference"));
    }
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    let doubled = doubled_ranks(&d);
    let w2: u64 = d.iter().zip(&doubled).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_plus = w2 as f64 / 2.0;
    if n <= exact_max_n {
        return Ok(WilcoxonResult {
            n,
            w_plus,
            p_value: exact_p(&doubled, w2),
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let mut k = 0;
    while k < mags.len() {
        let mut end = k + 1;
        while end < mags.len() && mags[end] == mags[k] {
            end += 1;
        }
        let t = (end - k) as f64;
        ties += t * t * t - t;
        k = end;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt();
        let normal = Normal::standard();
        (2.0 * normal.sf(z)).min(1.0)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value,
        exact: false,
    })
}

/// Twice the mid-ranks of `|d|`, which are always integers.
fn doubled_ranks(d: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut out = vec![0u64; d.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && d[idx[end]].abs() == d[idx[k]].abs() {
            end += 1;
        }
        // Ranks k+1..=end; twice their mean is k+1+end.
        let r2 = (k + 1 + end) as u64;
        for &i in &idx[k..end] {
            out[i] = r2;
        }
        k = end;
    }
    out
}

/// Exact two-sided p-value of a doubled signed-rank sum by dynamic programming.
fn exact_p(doubled: &[u64], w2: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all: f64 = counts.iter().sum();
    let w2 = w2 as usize;
    let lower: f64 = counts[..=w2].iter().sum();
    let upper: f64 = counts[w2..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_correction(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (j, &i) in idx.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// Significance matrix for one metric: `cells[r][c] = +1` when column `c`
/// is significantly better than row `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrix {
    pub metric: String,
    pub higher_is_better: bool,
    pub methods: Vec<String>,
    pub cells: Vec<Vec<i32>>,
    pub p_raw: Vec<Vec<f64>>,
    pub p_holm: Vec<Vec<f64>>,
    pub column_sums: Vec<i32>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs every pairwise test in one Holm block and assigns wins and losses.
pub fn pairwise_matrix(
    metric: &str,
    higher_is_better: bool,
    scores: &[(String, Vec<f64>)],
    alpha: f64,
    exact_max_n: usize,
) -> Result<PairwiseMatrix> {
    let m = scores.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no methods to compare".into()));
    }
    let n = scores[0].1.len();
    if let Some((name, _)) = scores.iter().find(|(_, s)| s.len() != n) {
        return Err(Error::Shape(format!("method {name} has a different case count")));
    }
    let mut pairs = Vec::new();
    let mut raw = Vec::new();
    for r in 0..m {
        for c in r + 1..m {
            raw.push(wilcoxon_signed_rank_with(&scores[c].1, &scores[r].1, exact_max_n)?.p_value);
            pairs.push((r, c));
        }
    }
    let adjusted = holm_correction(&raw);
    let mut cells = vec![vec![0i32; m]; m];
    let mut p_raw = vec![vec![1.0; m]; m];
    let mut p_holm = vec![vec![1.0; m]; m];
    for (k, &(r, c)) in pairs.iter().enumerate() {
        p_raw[r][c] = raw[k];
        p_raw[c][r] = raw[k];
        p_holm[r][c] = adjusted[k];
        p_holm[c][r] = adjusted[k];
        if adjusted[k] > alpha {
            continue;
        }
        let mut diffs: Vec<f64> = scores[c].1.iter().zip(&scores[r].1).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
        let med = median(&mut diffs);
        let dir = if med != 0.0 { med } else { mean };
        let sign = if dir > 0.0 {
            1
        } else if dir < 0.0 {
            -1
        } else {
            0
        };
        let sign = if higher_is_better { sign } else { -sign };
        cells[r][c] = sign;
        cells[c][r] = -sign;
    }
    let column_sums = (0..m).map(|c| (0..m).map(|r| cells[r][c]).sum()).collect();
    Ok(PairwiseMatrix {
        metric: metric.to_string(),
        higher_is_better,
        methods: scores.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        p_raw,
        p_holm,
        column_sums,
    })
}

/// Column sums added across metric blocks.
pub fn combined_column_sums(blocks: &[PairwiseMatrix]) -> Result<Vec<i32>> {
    let Some(first) = blocks.first() else {
        return Ok(Vec::new());
    };
    let mut out = vec![0; first.methods.len()];
    for b in blocks {
        if b.methods != first.methods {
            return Err(Error::InvalidArgument("blocks list different methods".into()));
        }
        for (o, s) in out.iter_mut().zip(&b.column_sums) {
            *o += s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full enumeration over the `2^n` sign patterns.
    fn enumerate_p(d: &[f64]) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        if nz.is_empty() {
            return 1.0;
        }
        let r = doubled_ranks(&nz);
        let obs: u64 = nz.iter().zip(&r).filter(|(v, _)| **v > 0.0).map(|(_, x)| x).sum();
        let n = nz.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let s: u64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            le += u64::from(s <= obs);
            ge += u64::from(s >= obs);
        }
        (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn wilcoxon_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(wilcoxon_signed_rank(&x, &x).unwrap().p_value, 1.0);
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((r.w_plus, r.p_value), (6.0, 0.25));
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.p_value, 0.0625);
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn critical_value_at_ten() {
        // For n = 10 without ties, W <= 8 iff p <= 0.05.
        for w in 0..=55u64 {
            let counts = {
                let doubled: Vec<u64> = (1..=10).map(|k| 2 * k).collect();
                exact_p(&doubled, 2 * w)
            };
            let min_w = w.min(55 - w);
            assert_eq!(min_w <= 8, counts <= 0.05, "w = {w}, p = {counts}");
        }
    }

    #[test]
    fn normal_approximation_is_close_to_exact() {
        let x: Vec<f64> = (0..30).map(|i| f64::from(i) * 0.37 - 2.0).collect();
        let y: Vec<f64> = (0..30).map(|i| (f64::from(i) * 1.3).sin()).collect();
        let exact = wilcoxon_signed_rank_with(&x, &y, 30).unwrap();
        let approx = wilcoxon_signed_rank_with(&x, &y, 25).unwrap();
        assert!(exact.exact && !approx.exact);
        assert!((exact.p_value - approx.p_value).abs() < 0.01);
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_correction(&[0.2]), vec![0.2]);
        let h = holm_correction(&[0.01, 0.04, 0.03]);
        for (a, b) in h.iter().zip([0.03, 0.06, 0.06]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(holm_correction(&[1.0, 1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn identical_methods_give_zeros() {
        let s: Vec<f64> = (0..10).map(|i| f64::from(i) / 10.0).collect();
        let scores = vec![("a".to_string(), s.clone()), ("b".to_string(), s.clone()), ("c".to_string(), s)];
        let m = pairwise_matrix("dice", true, &scores, DEFAULT_ALPHA, DEFAULT_EXACT_MAX_N).unwrap();
        assert!(m.cells.iter().flatten().all(|&c| c == 0));
        assert_eq!(m.column_sums, vec![0, 0, 0]);
    }

    #[test]
    fn dominant_method_collects_wins() {
        let base: Vec<f64> = (0..30).map(|i| (f64::from(i) * 0.7).sin() * 0.05 + 0.5).collect();
        let a: Vec<f64> = base.iter().map(|x| x + 0.3).collect();
        let b: Vec<f64> = base.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        let scores = vec![("A".to_string(), a.clone()), ("B".to_string(), b), ("C".to_string(), base.clone())];
        let m = pairwise_matrix("dice", true, &scores, DEFAULT_ALPHA, DEFAULT_EXACT_MAX_N).unwrap();
        assert_eq!(m.column_sums[0], 2);
        assert_eq!(m.cells[1][0], 1);
        assert_eq!(m.cells[2][0], 1);
        assert_eq!(m.cells[0][1], -1);
        // Lower-is-better flips every sign.
        let lo = pairwise_matrix("aurc", false, &scores, DEFAULT_ALPHA, DEFAULT_EXACT_MAX_N).unwrap();
        assert_eq!(lo.column_sums[0], -2);
        let total = combined_column_sums(&[m, lo]).unwrap();
        assert_eq!(total[0], 0);
    }

    proptest! {
        #[test]
        fn exact_matches_enumeration(d in prop::collection::vec((-6i32..=6).prop_map(|k| f64::from(k) / 2.0), 1..=12)) {
            let zeros = vec![0.0; d.len()];
            let got = wilcoxon_signed_rank(&d, &zeros).unwrap().p_value;
            prop_assert_eq!(got, enumerate_p(&d));
        }

        #[test]
        fn holm_is_monotone_and_dominates(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let h = holm_correction(&p);
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
            for w in idx.windows(2) {
                prop_assert!(h[w[0]] <= h[w[1]]);
            }
            for (a, b) in h.iter().zip(&p) {
                prop_assert!(a >= b && *a <= 1.0);
            }
        }

        #[test]
        fn matrices_are_antisymmetric(raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 2..5), shift in 0.0f64..0.5) {
            let scores: Vec<(String, Vec<f64>)> = raw
                .into_iter()
                .enumerate()
                .map(|(k, v)| (format!("m{k}"), v.into_iter().map(|x| x + shift * k as f64).collect()))
                .collect();
            let m = pairwise_matrix("brier", false, &scores, 0.05, 25).unwrap();
            for r in 0..scores.len() {
                prop_assert_eq!(m.cells[r][r], 0);
                for c in 0..scores.len() {
                    prop_assert_eq!(m.cells[r][c], -m.cells[c][r]);
                }
            }
            for c in 0..scores.len() {
                prop_assert_eq!(m.column_sums[c], (0..scores.len()).map(|r| m.cells[r][c]).sum::<i32>());
            }
        }
    }
}
