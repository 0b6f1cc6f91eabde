use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use ttcloc::data::{load_dataset, manifest_path, DatasetManifest};
use ttcloc::evaluator::{self, parse_iou_spec, VideoGroundTruth};
use ttcloc::gradcheck::{self, TOLERANCE};
use ttcloc::io::{read_json, to_json_lines, write_atomic, write_json_atomic};
use ttcloc::localizer::{infer_dataset, parse_detection_lines, DetectionRecord};
use ttcloc::network::{load_checkpoint, save_checkpoint};
use ttcloc::synth::{generate_split, Preset, SynthSpec};
use ttcloc::{run_training, Error, GatingKind, InferenceMode, Result, TrainConfig};
use ttcloc_cli::config::{
    parse_enum, parse_seeds, parse_supervision, synthetic_train_config, ExperimentConfig,
};
use ttcloc_cli::experiment::{
    ablation_cells, inference_options, lambda_cells, rows_to_csv, run_grid, AblationRow,
};

const PARAMS_FILE: &str = "params.bin";
const CONFIG_FILE: &str = "train_config.json";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(
    name = "ttcloc",
    version,
    about = "Temporal action localization with learned thresholds"
)]
struct Cli {
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: training split in OUT, held-out split in OUT/test.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Run a checkpoint over a dataset and write detections as JSON lines.
    Infer(InferArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Run the ablation grid on a synthetic preset.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON file holding a synthetic spec.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_clip_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    background_weight: Option<f64>,
    /// sigmoid, softsign or binarize
    #[arg(long)]
    gating: Option<GatingKind>,
    /// gated or topk_eighth
    #[arg(long)]
    aggregator: Option<String>,
    /// inner_product, l1, l2 or cosine
    #[arg(long)]
    reg_form: Option<String>,
    /// weak, full or semi:K
    #[arg(long)]
    supervision: Option<String>,
    /// joint, fully_annotated_only or pretrain_finetune
    #[arg(long)]
    strategy: Option<String>,
    /// predicted or manual
    #[arg(long)]
    train_localization: Option<String>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field {
                    c.$($target)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(iterations => iterations);
        set!(hidden_dim => hidden_dim);
        set!(learning_rate => learning_rate);
        set!(batch_size => batch_size);
        set!(max_clip_len => max_clip_len);
        set!(dropout => dropout);
        set!(lambda => loss.lambda);
        set!(eta => loss.eta);
        set!(gating => gating);
        if let Some(w) = self.background_weight {
            c.loss.background_weight = Some(w);
        }
        if let Some(v) = &self.aggregator {
            c.loss.aggregator = parse_enum(v)?;
        }
        if let Some(v) = &self.reg_form {
            c.loss.reg_form = parse_enum(v)?;
        }
        if let Some(v) = &self.supervision {
            c.supervision = parse_supervision(v)?;
        }
        if let Some(v) = &self.strategy {
            c.strategy = parse_enum(v)?;
        }
        if let Some(v) = &self.train_localization {
            c.train_localization = parse_enum(v)?;
        }
        c.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "predicted")]
    mode: InferenceMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    det: PathBuf,
    /// Dataset directory or manifest.json.
    #[arg(long)]
    gt: PathBuf,
    /// `start:end:step` or a comma list.
    #[arg(long, default_value = "0.3:0.7:0.1")]
    iou: String,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to OUT with a .csv extension.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Append the lambda sensitivity sweep.
    #[arg(long)]
    lambda_sweep: bool,
    /// Output directory for ablation.csv and ablation.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => return gradcheck_command(a),
        Command::Ablate(a) => ablate(a, cli.threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = ExperimentConfig::load_or_default(a.config.as_deref())?;
    let mut spec = match (&a.spec, a.preset) {
        (Some(path), _) => read_json::<SynthSpec>(path)?,
        (None, Some(p)) => SynthSpec::preset(p, config.seed),
        (None, None) => config
            .synth_spec()
            .unwrap_or_else(|| SynthSpec::preset(Preset::Easy, config.seed)),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let data = generate_split(&spec)?;
    data.train.write(&a.out)?;
    data.test.write(&a.out.join("test"))?;
    write_json_atomic(&a.out.join("synth_spec.json"), &spec)?;
    info!(
        "wrote {} training and {} held-out videos to {}",
        data.train.samples.len(),
        data.test.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = ExperimentConfig::load_or_default(a.config.as_deref())?.train;
    a.overrides.apply(&mut config)?;
    let data = load_dataset(&a.data)?;
    let started = Instant::now();
    let outcome = run_training(&data.samples, data.num_classes(), &config)?;
    info!(
        "trained {} steps in {:.1}s",
        outcome.state.step,
        started.elapsed().as_secs_f64()
    );
    save_checkpoint(&a.out.join(PARAMS_FILE), &outcome.state.params)?;
    write_json_atomic(&a.out.join(CONFIG_FILE), &config)?;
    write_atomic(
        &a.out.join(METRICS_FILE),
        to_json_lines(&outcome.log).as_bytes(),
    )
}

fn infer(a: InferArgs) -> Result<()> {
    let config: TrainConfig = read_json(&a.ckpt.join(CONFIG_FILE))?;
    config.validate()?;
    let params = load_checkpoint(&a.ckpt.join(PARAMS_FILE))?;
    let data = load_dataset(&a.data)?;
    if data.manifest.feature_dim() != Some(params.input_dim())
        || data.num_classes() != params.num_classes()
    {
        return Err(Error::Config(format!(
            "checkpoint expects D={} C={}, dataset has D={:?} C={}",
            params.input_dim(),
            params.num_classes(),
            data.manifest.feature_dim(),
            data.num_classes()
        )));
    }
    let dets = infer_dataset(&params, &data.samples, &inference_options(&config, a.mode))?;
    let records: Vec<DetectionRecord> = dets
        .iter()
        .map(|d| DetectionRecord::new(d, &data.manifest.class_names))
        .collect();
    info!(
        "{} detections over {} videos",
        records.len(),
        data.samples.len()
    );
    write_atomic(&a.out, to_json_lines(&records).as_bytes())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    class_names: &'a [String],
    #[serde(flatten)]
    report: &'a evaluator::EvalReport,
}

fn eval(a: EvalArgs) -> Result<()> {
    let thresholds = parse_iou_spec(&a.iou)?;
    let manifest: DatasetManifest = read_json(&manifest_path(&a.gt))?;
    manifest.validate()?;
    let text = std::fs::read_to_string(&a.det).map_err(|e| Error::io(&a.det, e))?;
    let dets = parse_detection_lines(&text)?;
    let gts: Vec<VideoGroundTruth> = manifest
        .videos
        .iter()
        .map(|v| VideoGroundTruth {
            video_id: v.id.clone(),
            segments: v.segments.clone().unwrap_or_default(),
        })
        .collect();
    let report = evaluator::evaluate(&dets, &gts, manifest.num_classes, &thresholds)?;
    let csv = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_json_atomic(
        &a.out,
        &EvalOutput {
            class_names: &manifest.class_names,
            report: &report,
        },
    )?;
    write_atomic(&csv, report.to_csv(&manifest.class_names).as_bytes())?;
    for (t, m) in report.iou_thresholds.iter().zip(&report.map) {
        println!("mAP@{t}: {:.2}", 100.0 * m);
    }
    println!("average: {:.2}", 100.0 * report.average_map);
    Ok(())
}

fn gradcheck_command(a: GradcheckArgs) -> ExitCode {
    let started = Instant::now();
    let report = gradcheck::run_suite(a.seed);
    println!("{:<44} {:>12}  status", "component", "max rel err");
    for c in &report.components {
        println!(
            "{:<44} {:>12.3e}  {}",
            c.component,
            c.max_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    for c in &report.cases {
        let status = match (c.strict, c.passed) {
            (false, _) => "surrogate",
            (true, true) => "ok",
            (true, false) => "FAIL",
        };
        println!(
            "{:<44} {:>12.3e}  {status}",
            format!("total/{}", c.label()),
            c.max_error
        );
    }
    println!(
        "tolerance {TOLERANCE:e}; {} in {:.1}s",
        if report.passed() {
            "all strict checks passed"
        } else {
            "FAILED"
        },
        started.elapsed().as_secs_f64()
    );
    if let Some(out) = &a.out {
        if let Err(e) = write_json_atomic(out, &report) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    preset: Option<Preset>,
    synth: &'a SynthSpec,
    base: &'a TrainConfig,
    seeds: &'a [u64],
    rows: &'a [AblationRow],
}

fn ablate(a: AblateArgs, threads: usize) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig {
            train: synthetic_train_config(),
            preset: Some(Preset::Medium),
            ..ExperimentConfig::default()
        },
    };
    if let Some(p) = a.preset {
        config.preset = Some(p);
        config.synth = None;
    }
    if let Some(s) = &a.seeds {
        config.seeds = parse_seeds(s)?;
    }
    a.overrides.apply(&mut config.train)?;
    config.validate()?;
    let spec = config
        .synth_spec()
        .ok_or_else(|| Error::Config("ablate needs a preset or a synth spec".into()))?;
    let mut cells = ablation_cells(&config.train);
    if a.lambda_sweep {
        cells.extend(lambda_cells(&config.train));
    }
    info!("{} cells x {} seeds", cells.len(), config.seeds.len());
    let rows = run_grid(&spec, &cells, &config.seeds, threads)?;
    write_atomic(&a.out.join("ablation.csv"), rows_to_csv(&rows).as_bytes())?;
    write_json_atomic(
        &a.out.join("ablation.json"),
        &AblationOutput {
            preset: config.preset,
            synth: &spec,
            base: &config.train,
            seeds: &config.seeds,
            rows: &rows,
        },
    )
}
