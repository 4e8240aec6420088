//! End-to-end evaluation: scoring rules, pooled curves and ablation grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadInput, HeadParams};
use crate::io::config::{Ablation, RunConfig};
use crate::losses::LossTerm;
use crate::metrics::{
    accuracy_threshold_curve, argmax_labels, case_metrics, entropy_score, error_flags, fit_temperature,
    reference_curves, risk_coverage_curve, temperature_probs, AccuracyPoint, CaseMetrics, RiskCoverageCurve,
};
use crate::synth::SynthCase;
use crate::tensor::{softmax, DenseField, LabelField};
use crate::trainer::train_head;

/// How a method turns a case into probabilities and an error score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringRule {
    /// Tempered probabilities and the trained ranking map.
    SegwithuRanking,
    /// Softmax of the raw logits and its entropy.
    Entropy,
    /// Softmax at a validation-fitted temperature and its entropy.
    Temperature,
}

impl ScoringRule {
    pub const ALL: [ScoringRule; 3] = [Self::SegwithuRanking, Self::Entropy, Self::Temperature];

    pub fn name(self) -> &'static str {
        match self {
            Self::SegwithuRanking => "segwithu-ranking",
            Self::Entropy => "entropy",
            Self::Temperature => "temperature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// A ready-to-apply scoring rule.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Head { params: &'a HeadParams, cfg: &'a HeadConfig },
    Entropy,
    Temperature(f64),
}

impl Scorer<'_> {
    pub fn rule(&self) -> ScoringRule {
        match self {
            Scorer::Head { .. } => ScoringRule::SegwithuRanking,
            Scorer::Entropy => ScoringRule::Entropy,
            Scorer::Temperature(_) => ScoringRule::Temperature,
        }
    }
}

/// Probabilities and a one-channel error score for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub probs: DenseField,
    pub score: DenseField,
}

pub fn fit_case_temperature(val: &[SynthCase]) -> Result<f64> {
    let pairs: Vec<_> = val.iter().map(|c| (&c.logits, &c.labels)).collect();
    fit_temperature(&pairs)
}

pub fn score_case(scorer: &Scorer<'_>, case: &SynthCase) -> Result<Scored> {
    match *scorer {
        Scorer::Head { params, cfg } => {
            let bundle = params.infer(
                cfg,
                &HeadInput {
                    taps: &case.taps,
                    logits: &case.logits,
                },
            )?;
            Ok(Scored {
                probs: softmax(&bundle.tempered_logits)?,
                score: bundle.ranking,
            })
        }
        Scorer::Entropy => {
            let probs = softmax(&case.logits)?;
            let score = entropy_score(&probs)?;
            Ok(Scored { probs, score })
        }
        Scorer::Temperature(t) => {
            let probs = temperature_probs(&case.logits, t)?;
            let score = entropy_score(&probs)?;
            Ok(Scored { probs, score })
        }
    }
}

pub fn evaluate_cases(method: &str, scorer: &Scorer<'_>, cases: &[SynthCase]) -> Result<Vec<CaseMetrics>> {
    cases
        .iter()
        .map(|c| {
            let s = score_case(scorer, c)?;
            case_metrics(&c.id, method, &c.logits, &s.probs, &c.labels, &s.score)
        })
        .collect()
}

/// Curves over all voxels of a split, cases concatenated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCurves {
    pub method: RiskCoverageCurve,
    pub oracle: RiskCoverageCurve,
    pub random: RiskCoverageCurve,
    pub accuracy: Vec<AccuracyPoint>,
}

pub fn pooled_curves(scorer: &Scorer<'_>, cases: &[SynthCase]) -> Result<PooledCurves> {
    let first = cases
        .first()
        .ok_or_else(|| Error::InvalidArgument("no cases to pool".into()))?;
    let mut u = Vec::new();
    let mut e = Vec::new();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut batch = 0;
    for c in cases {
        if c.logits.shape()[1..] != first.logits.shape()[1..] {
            return Err(Error::Shape(format!("case {} differs in shape from {}", c.id, first.id)));
        }
        let s = score_case(scorer, c)?;
        u.extend(s.score.to_f64());
        e.extend(error_flags(&argmax_labels(&c.logits)?, &c.labels)?);
        probs.extend_from_slice(s.probs.data());
        labels.extend_from_slice(c.labels.data());
        batch += c.logits.batch();
    }
    let mut pshape = first.logits.shape().to_vec();
    pshape[0] = batch;
    let mut lshape = first.labels.shape().to_vec();
    lshape[0] = batch;
    let probs = DenseField::new(pshape, probs)?;
    let labels = LabelField::new(lshape, labels)?;
    let (random, oracle) = reference_curves(&e)?;
    Ok(PooledCurves {
        method: risk_coverage_curve(&u, &e)?,
        oracle,
        random,
        accuracy: accuracy_threshold_curve(&probs, &labels)?,
    })
}

/// Split means of one method; AUROC averages only the cases where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub cases: usize,
    pub dice: f64,
    pub brier: f64,
    pub auroc: Option<f64>,
    pub auroc_cases: usize,
    pub aurc: f64,
}

pub fn summarize(method: &str, rows: &[CaseMetrics]) -> MethodSummary {
    let n = rows.len().max(1) as f64;
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.auroc).collect();
    MethodSummary {
        method: method.to_string(),
        cases: rows.len(),
        dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        brier: rows.iter().map(|r| r.brier).sum::<f64>() / n,
        auroc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        auroc_cases: defined.len(),
        aurc: rows.iter().map(|r| r.aurc).sum::<f64>() / n,
    }
}

pub const ABLATION_GRIDS: [&str; 6] = ["maps", "losses", "probes", "probe-count", "gamma", "taps"];

/// Named variants of one ablation grid; each includes the unmodified baseline.
pub fn ablation_grid(name: &str) -> Result<Vec<(String, Ablation)>> {
    let base = Ablation::default;
    let grid = match name {
        "maps" => vec![
            ("calibration-only".into(), Ablation { calibration_only: true, ..base() }),
            ("ranking-only".into(), Ablation { ranking_only: true, ..base() }),
            ("both".into(), base()),
        ],
        "losses" => {
            let mut v: Vec<(String, Ablation)> = [LossTerm::Nll, LossTerm::Ec, LossTerm::Pair, LossTerm::Tail, LossTerm::Trust]
                .into_iter()
                .map(|t| {
                    (
                        format!("no-{}", t.name()),
                        Ablation {
                            disable_losses: vec![t],
                            ..base()
                        },
                    )
                })
                .collect();
            v.push(("all".into(), base()));
            v
        }
        "probes" => vec![
            ("direct-head".into(), Ablation { direct_head: true, ..base() }),
            ("fixed-sigma".into(), Ablation { fixed_sigma: true, ..base() }),
            ("no-aleatoric".into(), Ablation { no_aleatoric: true, ..base() }),
            ("baseline".into(), base()),
        ],
        "probe-count" => [4, 8, 16, 32]
            .into_iter()
            .map(|r| (format!("r{r}"), Ablation { num_probes: Some(r), ..base() }))
            .collect(),
        "gamma" => [1.0, 2.0, 4.0, 8.0]
            .into_iter()
            .map(|g| (format!("gamma{g}"), Ablation { gamma: Some(g), ..base() }))
            .collect(),
        "taps" => vec![
            ("single-tap".into(), Ablation { single_tap: true, ..base() }),
            ("multi-tap".into(), base()),
        ],
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown ablation grid {other:?}; expected one of {}",
                ABLATION_GRIDS.join(", ")
            )))
        }
    };
    Ok(grid)
}

/// Test-split summary of one trained variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub best_epoch: usize,
    pub epochs: usize,
    pub summary: MethodSummary,
    pub cases: Vec<CaseMetrics>,
}

/// Trains `ablation` on top of `base` and scores the test split.
pub fn run_variant(
    name: &str,
    base: &RunConfig,
    ablation: &Ablation,
    train: &[SynthCase],
    val: &[SynthCase],
    test: &[SynthCase],
) -> Result<VariantResult> {
    let run = RunConfig {
        ablation: ablation.clone(),
        ..base.clone()
    };
    let (_, cfg) = run.resolve()?;
    let (params, history) = train_head(train, val, &cfg)?;
    let scorer = Scorer::Head {
        params: &params,
        cfg: &cfg.head,
    };
    let cases = evaluate_cases(name, &scorer, test)?;
    Ok(VariantResult {
        variant: name.to_string(),
        best_epoch: history.best_epoch,
        epochs: history.epochs.len() - 1,
        summary: summarize(name, &cases),
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, Split, SynthConfig};

    fn small() -> Vec<SynthCase> {
        let cfg = SynthConfig {
            spatial: vec![8, 8],
            ..SynthConfig::default()
        };
        generate_split(&cfg, 3, Split::Test).unwrap()
    }

    #[test]
    fn rule_names_round_trip() {
        for r in ScoringRule::ALL {
            assert_eq!(ScoringRule::parse(r.name()), Some(r));
        }
        assert_eq!(ScoringRule::parse("mc-dropout"), None);
    }

    #[test]
    fn unit_temperature_matches_entropy() {
        let cases = small();
        let a = evaluate_cases("m", &Scorer::Entropy, &cases).unwrap();
        let b = evaluate_cases("m", &Scorer::Temperature(1.0), &cases).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.dice, y.dice);
            assert!((x.brier - y.brier).abs() < 1e-6);
        }
    }

    #[test]
    fn pooled_curves_cover_every_voxel() {
        let cases = small();
        let c = pooled_curves(&Scorer::Entropy, &cases).unwrap();
        assert_eq!(c.method.coverage.len(), 3 * 64);
        assert_eq!(c.oracle.coverage.len(), 3 * 64);
        assert_eq!(c.accuracy.len(), 101);
        assert_eq!(*c.method.coverage.last().unwrap(), 1.0);
    }

    #[test]
    fn every_grid_resolves() {
        for name in ABLATION_GRIDS {
            for (_, ab) in ablation_grid(name).unwrap() {
                let run = RunConfig {
                    ablation: ab,
                    ..RunConfig::default()
                };
                run.resolve().unwrap();
            }
        }
        assert!(ablation_grid("dropout").is_err());
    }

    #[test]
    fn summary_skips_missing_auroc() {
        let row = |auroc| CaseMetrics {
            case_id: "c".into(),
            method: "m".into(),
            dice: 1.0,
            brier: 0.0,
            auroc,
            aurc: 0.5,
        };
        let s = summarize("m", &[row(None), row(Some(0.75))]);
        assert_eq!(s.auroc, Some(0.75));
        assert_eq!(s.auroc_cases, 1);
        assert_eq!(s.aurc, 0.5);
    }
}
