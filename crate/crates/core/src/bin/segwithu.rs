use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segwithu::io::checkpoint::{load_checkpoint, save_checkpoint};
use segwithu::io::config::RunConfig;
use segwithu::io::dataset::{read_dataset, read_manifest, write_dataset};
use segwithu::io::report::{
    read_case_metrics, write_accuracy_curve, write_case_metrics, write_comparison_csv, write_comparison_json,
    write_risk_coverage, ComparisonReport,
};
use segwithu::io::tensor_file::write_field;
use segwithu::io::write_json;
use segwithu::metrics::CaseMetrics;
use segwithu::pipeline::{
    ablation_grid, evaluate_cases, fit_case_temperature, pooled_curves, run_variant, summarize, Scorer, ScoringRule,
    ABLATION_GRIDS,
};
use segwithu::stats::{combined_column_sums, pairwise_matrix, DEFAULT_ALPHA, DEFAULT_EXACT_MAX_N};
use segwithu::synth::{generate_split, Split, SynthCase};
use segwithu::trainer::{train_head, TrainConfig};
use segwithu::Error;

/// Post-hoc uncertainty head for frozen segmentation backbones.
///
/// Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "segwithu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train, val and test splits.
    Synth(SynthArgs),
    /// Fit the head on the train split, early-stopping on val; writes a checkpoint.
    Train(TrainArgs),
    /// Write every uncertainty map of a trained head for one split.
    Infer(InferArgs),
    /// Score one split with a scoring rule; writes per-case metrics and pooled curves.
    Eval(EvalArgs),
    /// Pairwise Wilcoxon/Holm matrices across result directories.
    Compare(CompareArgs),
    /// Risk-coverage and accuracy-threshold curves with oracle and random references.
    Curves(EvalArgs),
    /// Train and score every variant of a named ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset root; receives train/, val/ and test/.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Split to process: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory; one subdirectory of maps per case.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset root written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Scoring rule: segwithu-ranking, entropy or temperature.
    #[arg(long, default_value = "segwithu-ranking")]
    rule: String,
    /// Checkpoint directory; required by segwithu-ranking.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Method label written to the results; defaults to the rule name.
    #[arg(long)]
    method: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Result directories, each holding a cases.csv from `eval`.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Family-wise significance level.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Largest case count that uses the exact Wilcoxon distribution.
    #[arg(long, default_value_t = DEFAULT_EXACT_MAX_N)]
    exact_max_n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Grid name: maps, losses, probes, probe-count, gamma or taps.
    #[arg(long)]
    grid: String,
    /// Dataset root written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; one results directory per variant.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = Result<(), Failure>;

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Failure::Usage(format!("unknown split {other:?}; expected train, val or test"))),
    }
}

fn load_split(root: &Path, split: Split) -> Result<Vec<SynthCase>, Error> {
    read_dataset(&root.join(split.name()))
}

/// Resolves `cfg` and aligns the head with the dataset on disk.
fn resolve_for(cfg: &RunConfig, root: &Path) -> Result<TrainConfig, Error> {
    let (_, mut train) = cfg.resolve()?;
    let manifest = read_manifest(&root.join(Split::Train.name()))?;
    train.head.num_classes = manifest.num_classes;
    train.head.tap_channels = manifest.tap_channels;
    train.validate()?;
    Ok(train)
}

fn synth(a: &SynthArgs) -> CliResult {
    let cfg = a.config.load()?;
    let (synth, _) = cfg.resolve()?;
    for (split, n) in [
        (Split::Train, cfg.splits.train),
        (Split::Val, cfg.splits.val),
        (Split::Test, cfg.splits.test),
    ] {
        write_dataset(&a.out.join(split.name()), &generate_split(&synth, n, split)?)?;
    }
    write_json(&a.out.join("run_config.json"), &cfg)?;
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult {
    let cfg = a.config.load()?;
    let tcfg = resolve_for(&cfg, &a.data)?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let (params, history) = train_head(&train, &val, &tcfg)?;
    save_checkpoint(&a.out, &params, &tcfg, &history)?;
    write_json(&a.out.join("history.json"), &history)?;
    Ok(())
}

fn infer(a: &InferArgs) -> CliResult {
    let split = parse_split(&a.split)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cases = load_split(&a.data, split)?;
    for c in &cases {
        let bundle = ckpt.params.infer(
            &ckpt.config.head,
            &segwithu::head::HeadInput {
                taps: &c.taps,
                logits: &c.logits,
            },
        )?;
        let dir = a.out.join(&c.id);
        for (name, field) in bundle.named_fields() {
            write_field(&dir.join(format!("{name}.swut")), field)?;
        }
    }
    Ok(())
}

/// Holds whatever the chosen rule needs to stay alive while scoring.
enum Prepared {
    Head(segwithu::io::checkpoint::Checkpoint),
    Entropy,
    Temperature(f64),
}

impl Prepared {
    fn new(a: &EvalArgs) -> Result<Self, Failure> {
        let rule = ScoringRule::parse(&a.rule).ok_or_else(|| {
            Failure::Usage(format!(
                "unknown rule {:?}; expected segwithu-ranking, entropy or temperature",
                a.rule
            ))
        })?;
        Ok(match rule {
            ScoringRule::SegwithuRanking => {
                let path = a
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Failure::Usage("segwithu-ranking needs --checkpoint".into()))?;
                Prepared::Head(load_checkpoint(path)?)
            }
            ScoringRule::Entropy => Prepared::Entropy,
            ScoringRule::Temperature => Prepared::Temperature(fit_case_temperature(&load_split(&a.data, Split::Val)?)?),
        })
    }

    fn scorer(&self) -> Scorer<'_> {
        match self {
            Prepared::Head(c) => Scorer::Head {
                params: &c.params,
                cfg: &c.config.head,
            },
            Prepared::Entropy => Scorer::Entropy,
            Prepared::Temperature(t) => Scorer::Temperature(*t),
        }
    }
}

fn write_curves(out: &Path, scorer: &Scorer<'_>, cases: &[SynthCase]) -> Result<(), Error> {
    let c = pooled_curves(scorer, cases)?;
    write_risk_coverage(&out.join("risk_coverage.csv"), &c.method)?;
    write_risk_coverage(&out.join("risk_coverage_oracle.csv"), &c.oracle)?;
    write_risk_coverage(&out.join("risk_coverage_random.csv"), &c.random)?;
    write_accuracy_curve(&out.join("accuracy_threshold.csv"), &c.accuracy)
}

fn eval(a: &EvalArgs) -> CliResult {
    let split = parse_split(&a.split)?;
    let prepared = Prepared::new(a)?;
    let cases = load_split(&a.data, split)?;
    let scorer = prepared.scorer();
    let method = a.method.clone().unwrap_or_else(|| a.rule.clone());
    let rows = evaluate_cases(&method, &scorer, &cases)?;
    write_case_metrics(&a.out.join("cases.csv"), &rows)?;
    write_json(&a.out.join("summary.json"), &summarize(&method, &rows))?;
    if let Prepared::Temperature(t) = prepared {
        write_json(&a.out.join("temperature.json"), &serde_json::json!({ "temperature": t }))?;
    }
    write_curves(&a.out, &scorer, &cases)?;
    Ok(())
}

fn curves(a: &EvalArgs) -> CliResult {
    let split = parse_split(&a.split)?;
    let prepared = Prepared::new(a)?;
    let cases = load_split(&a.data, split)?;
    write_curves(&a.out, &prepared.scorer(), &cases)?;
    Ok(())
}

const COMPARE_METRICS: [(&str, bool); 4] = [("dice", true), ("brier", false), ("auroc", true), ("aurc", false)];

fn metric_value(r: &CaseMetrics, metric: &str) -> Option<f64> {
    match metric {
        "dice" => Some(r.dice),
        "brier" => Some(r.brier),
        "auroc" => r.auroc,
        _ => Some(r.aurc),
    }
}

fn compare(a: &CompareArgs) -> CliResult {
    let mut methods: Vec<(String, Vec<CaseMetrics>)> = Vec::new();
    for dir in &a.results {
        let mut rows = read_case_metrics(&dir.join("cases.csv"))?;
        rows.sort_by(|x, y| x.case_id.cmp(&y.case_id));
        let name = rows
            .first()
            .map(|r| r.method.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("{} holds no cases", dir.display())))?;
        if methods.iter().any(|(m, _)| *m == name) {
            return Err(Failure::Usage(format!("method {name:?} appears twice")));
        }
        methods.push((name, rows));
    }
    let ids: Vec<&str> = methods[0].1.iter().map(|r| r.case_id.as_str()).collect();
    for (name, rows) in &methods {
        if rows.iter().map(|r| r.case_id.as_str()).ne(ids.iter().copied()) {
            return Err(Error::InvalidArgument(format!("method {name:?} covers a different case set")).into());
        }
    }
    let mut blocks = Vec::new();
    for (metric, higher) in COMPARE_METRICS {
        // Cases where any method lacks the metric are dropped from this block.
        let keep: Vec<usize> = (0..ids.len())
            .filter(|&i| methods.iter().all(|(_, rows)| metric_value(&rows[i], metric).is_some()))
            .collect();
        let scores: Vec<(String, Vec<f64>)> = methods
            .iter()
            .map(|(name, rows)| {
                let v = keep.iter().filter_map(|&i| metric_value(&rows[i], metric)).collect();
                (name.clone(), v)
            })
            .collect();
        blocks.push(pairwise_matrix(metric, higher, &scores, a.alpha, a.exact_max_n)?);
    }
    let report = ComparisonReport {
        methods: methods.iter().map(|(m, _)| m.clone()).collect(),
        cases: ids.len(),
        combined_column_sums: combined_column_sums(&blocks)?,
        blocks,
    };
    write_comparison_csv(&a.out.join("pairwise.csv"), &report)?;
    write_comparison_json(&a.out.join("pairwise.json"), &report)?;
    Ok(())
}

fn ablate(a: &AblateArgs) -> CliResult {
    let grid = ablation_grid(&a.grid).map_err(|_| {
        Failure::Usage(format!(
            "unknown grid {:?}; expected one of {}",
            a.grid,
            ABLATION_GRIDS.join(", ")
        ))
    })?;
    let cfg = a.config.load()?;
    let mut base = cfg.clone();
    let manifest = read_manifest(&a.data.join(Split::Train.name()))?;
    base.synth.num_classes = manifest.num_classes;
    base.synth.tap_channels = manifest.tap_channels;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let test = load_split(&a.data, Split::Test)?;
    let mut summaries = Vec::new();
    for (name, ablation) in &grid {
        let r = run_variant(name, &base, ablation, &train, &val, &test)?;
        let dir = a.out.join(name);
        write_case_metrics(&dir.join("cases.csv"), &r.cases)?;
        write_json(&dir.join("summary.json"), &r.summary)?;
        summaries.push(serde_json::json!({
            "variant": r.variant,
            "best_epoch": r.best_epoch,
            "epochs": r.epochs,
            "summary": r.summary,
        }));
    }
    write_json(&a.out.join("ablation.json"), &summaries)?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::NonFinite(_) | Error::Graph(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Curves(a) => curves(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
