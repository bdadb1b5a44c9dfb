//! `msarnn`: data generation, training, evaluation and analysis for the
//! stereo attention policy.

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod provenance;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msarnn::diffcore::{primitive_suite, PRIMITIVE_TOL};
use msarnn::evalkit::{
    attention_drift, closed_loop_rollout, collect_traces, pca_hidden, silhouette, standard_suite, success_rate_suite,
    write_overlay_ppm, write_pca_csv, write_report, write_rollout_csv, write_timing, RolloutSpec, TrialSet,
};
use msarnn::model::InputMode;
use msarnn::model::{composed_grad_check, COMPOSED_TOL};
use msarnn::msa::Backbone;
use msarnn::simenv::{generate_dataset, read_dataset, write_dataset, Condition, SimConfig, Variant};
use msarnn::trainer::{load_checkpoint, train, TrainConfig};
use serde::Serialize;
use serde_json::json;

use provenance::RunRecord;

#[derive(Parser, Debug, Serialize)]
#[command(name = "msarnn", version = provenance::VERSION, about = "Stereo multistage spatial attention policy pipeline")]
struct Cli {
    /// Worker threads for dataset generation and rollouts [default: all cores].
    #[arg(long, global = true, env = "MSA_THREADS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Generate scripted demonstrations in the synthetic stereo scene.
    GenData(GenDataArgs),
    /// Train a policy on a generated dataset.
    Train(TrainArgs),
    /// Closed-loop success rates with 99% Wilson intervals.
    Eval(EvalArgs),
    /// One closed-loop rollout with per-step state and optional attention export.
    Rollout(RolloutArgs),
    /// Post-hoc analyses of a trained policy.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Finite-difference checks of every differentiable primitive and the full loss.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 54)]
    episodes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Initial distance to the target in metres.
    #[arg(long, default_value_t = 0.5)]
    distance: f64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = SimConfig::default().image_h)]
    image_size: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
enum BackboneArg {
    Msa,
    Sa,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
enum InputArg {
    Stereo,
    Mono,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides the configured backbone.
    #[arg(long, value_enum)]
    ablation_backbone: Option<BackboneArg>,
    /// Overrides the configured input mode.
    #[arg(long, value_enum)]
    ablation_input: Option<InputArg>,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Trials per condition [default: 50 undisturbed, 30 per disturbance].
    #[arg(long)]
    trials: Option<usize>,
    /// Evaluate a single condition instead of all four.
    #[arg(long)]
    condition: Option<Condition>,
    #[arg(long, default_value_t = 0.5)]
    distance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "center")]
    variant: Variant,
    #[arg(long, default_value_t = 0.5)]
    distance: f64,
    #[arg(long, default_value = "none")]
    condition: Condition,
    /// Write per-step attention maps and point overlays.
    #[arg(long)]
    export_attention: bool,
    #[arg(long, default_value = "rollout")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Serialize)]
enum AnalyzeCommand {
    /// Principal components of the joint-LSTM hidden states across position variants.
    Pca(PcaArgs),
}

#[derive(Args, Debug, Serialize)]
struct PcaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "left,center,right")]
    variants: Vec<Variant>,
    /// Rollouts per variant.
    #[arg(long, default_value_t = 5)]
    per_variant: usize,
    #[arg(long, default_value_t = 0.5)]
    distance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "pca")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradCheckArgs {
    /// First seed of the primitive suite.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value = "grad-check")]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    /// Bad input: flags, configuration, files that fail validation.
    Invalid(String),
    /// Everything else, including gradient checks that did not pass.
    Runtime(String),
}

impl From<msarnn::Error> for Failure {
    fn from(e: msarnn::Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(a: &GenDataArgs) -> CliResult<PathBuf> {
    let sim = SimConfig {
        image_h: a.image_size,
        image_w: a.image_size,
        ..SimConfig::default()
    };
    let data = generate_dataset(&sim, a.episodes, a.seed, a.distance)?;
    write_dataset(&a.out, &data)?;
    log::info!("wrote {} episodes to {}", data.episodes.len(), a.out.display());
    Ok(a.out.clone())
}

fn train_cmd(a: &TrainArgs) -> CliResult<PathBuf> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(steps) = a.steps {
        cfg.set_steps(steps);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(b) = a.ablation_backbone {
        cfg.ablation.backbone = match b {
            BackboneArg::Msa => Backbone::Msa,
            BackboneArg::Sa => Backbone::Sa,
        };
    }
    if let Some(i) = a.ablation_input {
        cfg.ablation.input = match i {
            InputArg::Stereo => InputMode::Stereo,
            InputArg::Mono => InputMode::Mono,
        };
    }
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    let outcome = train(&data, &cfg, Some(&a.out))?;
    if let Some(last) = outcome.log.last() {
        log::info!("finished at step {} with loss {:.5}", last.step, last.total);
    }
    if let Some(ck) = &outcome.checkpoint {
        log::info!("checkpoint {}", ck.display());
    }
    Ok(a.out.clone())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<PathBuf> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let sets: Vec<TrialSet> = match a.condition {
        Some(condition) => vec![TrialSet {
            condition,
            trials: a.trials.unwrap_or(if condition == Condition::None { 50 } else { 30 }),
            distance: a.distance,
        }],
        None => standard_suite(a.distance)
            .into_iter()
            .map(|s| TrialSet {
                trials: a.trials.unwrap_or(s.trials),
                ..s
            })
            .collect(),
    };
    let report = success_rate_suite(&ckpt, &sets, a.seed)?;
    write_report(&a.out.join("eval_report.json"), &report)?;
    write_timing(&a.out.join("eval_timing.json"), &report)?;
    for row in &report.rows {
        println!(
            "{:<18} {:>3}/{:<3} {:5.1}% (99% CI {:.1}-{:.1})  latency {:.1}±{:.1} ms",
            row.condition.as_str(),
            row.successes,
            row.trials,
            100.0 * row.rate,
            100.0 * row.ci_low,
            100.0 * row.ci_high,
            row.latency_ms.mean,
            row.latency_ms.std
        );
    }
    Ok(a.out.clone())
}

fn rollout_cmd(a: &RolloutArgs) -> CliResult<PathBuf> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let spec = RolloutSpec {
        seed: a.seed,
        variant: a.variant,
        distance: a.distance,
        condition: a.condition,
    };
    let maps = a.export_attention.then(|| a.out.join("attention"));
    let r = closed_loop_rollout(&ckpt, &spec, maps.as_deref())?;
    write_rollout_csv(&a.out.join(format!("rollout_{}.csv", a.seed)), &r)?;
    if let Some(dir) = &maps {
        for (t, p) in r.points.iter().enumerate() {
            let obs = &r.episode.observations[t];
            for (view, image, k) in [("left", &obs.left, 0), ("right", &obs.right, 1)] {
                let path = dir.join(format!("step_{t:03}")).join(format!("overlay_{view}.ppm"));
                write_overlay_ppm(&path, image, &p.extracted[k], &p.predicted[k], 8)?;
            }
        }
    }
    let drift = attention_drift(&r.points);
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "spec": spec,
            "success": r.episode.success,
            "steps": r.latency_ms.len(),
            "over_budget_steps": r.over_budget,
            "drift": drift,
        }),
    )?;
    println!("success: {}", r.episode.success);
    Ok(a.out.clone())
}

fn pca_cmd(a: &PcaArgs) -> CliResult<PathBuf> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let traces = collect_traces(&ckpt, &a.variants, a.per_variant, a.distance, a.seed)?;
    let pca = pca_hidden(&traces, 2)?;
    write_pca_csv(&a.out.join("pca.csv"), &traces, &pca)?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (t, proj) in traces.iter().zip(&pca.projections) {
        for p in proj {
            points.push(p.clone());
            labels.push(t.variant as usize);
        }
    }
    let score = if a.variants.len() >= 2 {
        Some(silhouette(&points, &labels)?)
    } else {
        None
    };
    write_json(
        &a.out.join("pca.json"),
        &json!({
            "explained": pca.explained,
            "explained_ratio": pca.explained_ratio(),
            "components": pca.components,
            "silhouette": score,
        }),
    )?;
    println!("explained variance ratio {:.3}", pca.explained_ratio());
    if let Some(s) = score {
        println!("silhouette by variant {s:.3}");
    }
    Ok(a.out.clone())
}

fn grad_check_cmd(a: &GradCheckArgs) -> CliResult<PathBuf> {
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    for seed in a.seed..a.seed + a.seeds {
        for (name, err) in primitive_suite(seed)? {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
            if !(err < PRIMITIVE_TOL) {
                failed.push(format!("{name} (seed {seed}): {err:.3e}"));
            }
            rows.push(json!({"check": name, "seed": seed, "max_rel_error": err, "tolerance": PRIMITIVE_TOL}));
        }
    }
    for (name, err) in &worst {
        println!("{name:<26} worst {err:.3e} (< {PRIMITIVE_TOL:e})");
    }
    for temperature in [0.001, 0.5] {
        let err = composed_grad_check(a.seed, temperature)?;
        println!(
            "{:<26} {err:.3e} (< {COMPOSED_TOL:e})",
            format!("full loss, T={temperature}")
        );
        if !(err < COMPOSED_TOL) {
            failed.push(format!("full loss at T={temperature}: {err:.3e}"));
        }
        rows.push(json!({"check": "full loss", "temperature": temperature, "seed": a.seed, "max_rel_error": err, "tolerance": COMPOSED_TOL}));
    }
    write_json(
        &a.out.join("grad_check.json"),
        &json!({"passed": failed.is_empty(), "checks": rows}),
    )?;
    if failed.is_empty() {
        Ok(a.out.clone())
    } else {
        Err(Failure::Runtime(format!(
            "gradient checks failed: {}",
            failed.join("; ")
        )))
    }
}

fn dispatch(cli: &Cli) -> CliResult<PathBuf> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Analyze(AnalyzeCommand::Pca(a)) => pca_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn out_dir(cli: &Cli) -> &Path {
    match &cli.command {
        Command::GenData(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Rollout(a) => &a.out,
        Command::Analyze(AnalyzeCommand::Pca(a)) => &a.out,
        Command::GradCheck(a) => &a.out,
    }
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
    let threads = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(2);
    }
    let mut record = RunRecord::start(&cli, threads);
    let result = dispatch(&cli);
    let code = match &result {
        Ok(_) => 0,
        Err(Failure::Invalid(_)) => 1,
        Err(Failure::Runtime(_)) => 2,
    };
    record.finish(
        code,
        result.as_ref().err().map(|f| match f {
            Failure::Invalid(m) | Failure::Runtime(m) => m.clone(),
        }),
    );
    // A run that failed validation before creating its output directory leaves
    // no provenance behind.
    let out = out_dir(&cli);
    if code != 1 || out.is_dir() {
        if let Err(Failure::Invalid(m) | Failure::Runtime(m)) = write_json(&out.join("run.json"), &record) {
            log::warn!("could not write run.json: {m}");
        }
    }
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
