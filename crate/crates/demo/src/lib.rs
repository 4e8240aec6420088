//! Browser demo: inspect a synthetic case, compare error scores, and train a
//! small head in the page.
//!
//! The `*_json` functions are plain Rust and carry the logic; the exported
//! wasm functions only forward to them.

use std::cell::RefCell;

use segwithu::head::{HeadConfig, HeadInput, HeadParams};
use segwithu::io::config::RunConfig;
use segwithu::metrics::{argmax_labels, aurc, auroc, entropy_score, error_flags, reference_curves, risk_coverage_curve};
use segwithu::synth::{generate_case, generate_split, Split, SynthCase, SynthConfig};
use segwithu::tensor::softmax;
use segwithu::trainer::{init_head, train_head, TrainConfig};
use segwithu::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Points kept per plotted curve.
const CURVE_POINTS: usize = 101;
const TRAIN_CASES: usize = 8;
const VAL_CASES: usize = 4;

struct Trained {
    seed: u64,
    params: HeadParams,
    cfg: HeadConfig,
}

thread_local! {
    static TRAINED: RefCell<Option<Trained>> = const { RefCell::new(None) };
}

fn configs(seed: u64) -> Result<(SynthConfig, TrainConfig)> {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
    .resolve()
}

fn test_case(seed: u64, index: u64, noise: f64) -> Result<SynthCase> {
    let (synth, _) = configs(seed)?;
    let synth = SynthConfig {
        noise_level: noise,
        ..synth
    };
    generate_case(&synth, Split::Test.offset() + index)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct CaseView {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub labels: Vec<u32>,
    pub prediction: Vec<u32>,
    pub errors: Vec<u8>,
    pub error_rate: f64,
}

pub fn case_view(seed: u64, index: u64, noise: f64) -> Result<CaseView> {
    let case = test_case(seed, index, noise)?;
    let pred = argmax_labels(&case.logits)?;
    let e = error_flags(&pred, &case.labels)?;
    let sp = case.labels.spatial();
    Ok(CaseView {
        width: sp[1],
        height: sp[0],
        classes: case.logits.channels(),
        labels: case.labels.data().to_vec(),
        prediction: pred.data().to_vec(),
        errors: e.iter().map(|&x| u8::from(x)).collect(),
        error_rate: e.iter().filter(|&&x| x).count() as f64 / e.len() as f64,
    })
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub coverage: Vec<f64>,
    pub risk: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct ScoreView {
    pub name: String,
    pub score: Vec<f64>,
    /// `None` when the case has no errors or no correct voxels.
    pub auroc: Option<f64>,
    pub aurc: f64,
    pub curve: Curve,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub methods: Vec<ScoreView>,
    pub oracle_aurc: f64,
    pub random_aurc: f64,
    pub oracle: Curve,
    pub head_trained: bool,
}

fn thin(coverage: &[f64], risk: &[f64]) -> Curve {
    let n = coverage.len();
    let picks: Vec<usize> = if n <= CURVE_POINTS {
        (0..n).collect()
    } else {
        (0..CURVE_POINTS).map(|k| k * (n - 1) / (CURVE_POINTS - 1)).collect()
    };
    Curve {
        coverage: picks.iter().map(|&i| coverage[i]).collect(),
        risk: picks.iter().map(|&i| risk[i]).collect(),
    }
}

fn score_view(name: &str, score: Vec<f64>, e: &[bool]) -> Result<ScoreView> {
    let curve = risk_coverage_curve(&score, e)?;
    Ok(ScoreView {
        name: name.to_string(),
        auroc: auroc(&score, e)?,
        aurc: aurc(&curve),
        curve: thin(&curve.coverage, &curve.risk),
        score,
    })
}

/// Entropy against the head's ranking map on one test case. Uses the head
/// from the last [`train`] call with the same seed, else the untrained head.
pub fn compare_scores(seed: u64, index: u64, noise: f64) -> Result<Comparison> {
    let case = test_case(seed, index, noise)?;
    let e = error_flags(&argmax_labels(&case.logits)?, &case.labels)?;
    let input = HeadInput {
        taps: &case.taps,
        logits: &case.logits,
    };
    let (bundle, trained) = TRAINED.with(|t| -> Result<_> {
        match &*t.borrow() {
            Some(tr) if tr.seed == seed => Ok((tr.params.infer(&tr.cfg, &input)?, true)),
            _ => {
                let (_, cfg) = configs(seed)?;
                Ok((init_head(&cfg)?.infer(&cfg.head, &input)?, false))
            }
        }
    })?;
    let entropy = entropy_score(&softmax(&case.logits)?)?.to_f64();
    let (random, oracle) = reference_curves(&e)?;
    let head_name = if trained { "ranking map (trained)" } else { "ranking map (untrained)" };
    Ok(Comparison {
        methods: vec![
            score_view("predictive entropy", entropy, &e)?,
            score_view(head_name, bundle.ranking.to_f64(), &e)?,
        ],
        oracle_aurc: aurc(&oracle),
        random_aurc: aurc(&random),
        oracle: thin(&oracle.coverage, &oracle.risk),
        head_trained: trained,
    })
}

#[derive(Debug, Serialize)]
pub struct TrainView {
    pub epochs: Vec<usize>,
    pub loss: Vec<f64>,
    pub val_aurc: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains on a few default-noise cases and keeps the best head for [`compare_scores`].
pub fn train(seed: u64, epochs: usize) -> Result<TrainView> {
    let (synth, mut cfg) = configs(seed)?;
    cfg.max_epochs = epochs.max(1);
    let train = generate_split(&synth, TRAIN_CASES, Split::Train)?;
    let val = generate_split(&synth, VAL_CASES, Split::Val)?;
    let (params, history) = train_head(&train, &val, &cfg)?;
    TRAINED.with(|t| {
        *t.borrow_mut() = Some(Trained {
            seed,
            params,
            cfg: cfg.head.clone(),
        })
    });
    Ok(TrainView {
        epochs: history.epochs.iter().map(|r| r.epoch).collect(),
        loss: history.epochs.iter().map(|r| r.loss).collect(),
        val_aurc: history.epochs.iter().map(|r| r.val_score).collect(),
        best_epoch: history.best_epoch,
    })
}

/// Forgets the trained head.
pub fn reset() {
    TRAINED.with(|t| *t.borrow_mut() = None);
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.and_then(|v| to_json(&v)).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = viewCase)]
pub fn view_case_js(seed: u32, index: u32, noise: f64) -> std::result::Result<String, JsValue> {
    js(case_view(u64::from(seed), u64::from(index), noise))
}

#[wasm_bindgen(js_name = compareScores)]
pub fn compare_scores_js(seed: u32, index: u32, noise: f64) -> std::result::Result<String, JsValue> {
    js(compare_scores(u64::from(seed), u64::from(index), noise))
}

#[wasm_bindgen(js_name = trainHead)]
pub fn train_js(seed: u32, epochs: u32) -> std::result::Result<String, JsValue> {
    js(train(u64::from(seed), epochs as usize))
}

#[wasm_bindgen(js_name = resetHead)]
pub fn reset_js() {
    reset();
}
