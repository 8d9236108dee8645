//! Command-line entry points: synthetic data generation, episodic
//! training, checkpoint evaluation, and over-smoothing analysis.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use attentive_gnn::analysis::{export_features, smoothing_profile, ProfileRecord};
use attentive_gnn::attention::AttentionConfig;
use attentive_gnn::config::RunConfig;
use attentive_gnn::episodes::sample_task;
use attentive_gnn::training::{
    derive_seed, evaluate, load_checkpoint, save_checkpoint, train, write_metrics, SeedDomain,
};

#[derive(Parser)]
#[command(
    name = "attentive-gnn",
    about = "Few-shot classification with a triple-attention GNN",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature CSV from the [dataset] section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint.json and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: out_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; prints accuracy with a 95% CI.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Profile per-layer smoothing metrics; optionally sweep beta.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-layer feature CSVs for the first profiled task.
        #[arg(long)]
        export_features: bool,
        /// Evaluate the checkpoint at beta = 0.1, 0.2, ..., 1.0.
        #[arg(long)]
        beta_sweep: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(&config, &out, seed),
        Command::Train { config, out, seed } => cmd_train(&config, out, seed),
        Command::Eval {
            config,
            checkpoint,
            out,
            seed,
        } => cmd_eval(&config, &checkpoint, out, seed),
        Command::Analyze {
            config,
            checkpoint,
            out,
            seed,
            export_features,
            beta_sweep,
        } => cmd_analyze(&config, &checkpoint, out, seed, export_features, beta_sweep),
    }
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    if cfg.dataset.source != "synthetic" {
        bail!("gen-data needs dataset.source = \"synthetic\"");
    }
    let ds = cfg.load_dataset()?;
    ds.save_csv(out)?;
    println!(
        "wrote {} classes x {} samples (dim {}) to {}",
        ds.num_classes(),
        cfg.dataset.per_class,
        ds.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = out_dir(&cfg, out)?;
    let ds = cfg.load_dataset()?;
    let tcfg = cfg.train_config();

    let started = std::time::Instant::now();
    let outcome = train(&ds, &tcfg, &cfg.model)?;
    let elapsed = started.elapsed();

    write_metrics(&dir.join("metrics.jsonl"), &outcome.metrics)?;
    save_checkpoint(
        &dir.join("checkpoint.json"),
        &outcome.params,
        &outcome.optimizer,
        outcome.episodes_done,
    )?;
    let last = outcome.metrics.last().expect("training emits records");
    println!(
        "trained {} episodes in {:.1}s; final loss {:.4}, eval accuracy {:.4}",
        outcome.episodes_done,
        elapsed.as_secs_f64(),
        last.mean_loss,
        last.eval_accuracy
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = out_dir(&cfg, out)?;
    let ds = cfg.load_dataset()?;
    let tcfg = cfg.train_config();
    let (params, _, _) = load_checkpoint(checkpoint, &cfg.model, tcfg.n_way, ds.dim())?;

    // same seed stream as the final record of training
    let result = evaluate(
        &params,
        &ds,
        &tcfg,
        &cfg.model,
        tcfg.eval_episodes,
        derive_seed(tcfg.seed, SeedDomain::Eval, tcfg.total_episodes),
    )?;
    match result.ci95 {
        Some(ci) => println!(
            "accuracy {:.4} ± {:.4} (95% CI over {} episodes)",
            result.mean_accuracy, ci, result.episodes
        ),
        None => println!(
            "accuracy {:.4} ± n/a (single episode)",
            result.mean_accuracy
        ),
    }
    let record = serde_json::to_string_pretty(&result)?;
    std::fs::write(dir.join("eval.json"), record)?;
    Ok(())
}

fn cmd_analyze(
    config: &Path,
    checkpoint: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    export: bool,
    beta_sweep: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = out_dir(&cfg, out)?;
    let ds = cfg.load_dataset()?;
    let tcfg = cfg.train_config();
    let (params, _, _) = load_checkpoint(checkpoint, &cfg.model, tcfg.n_way, ds.dim())?;
    let rank_m = cfg.analysis.rank_m.unwrap_or(tcfg.n_way);

    let mut records: Vec<ProfileRecord> = Vec::new();
    for t in 0..cfg.analysis.tasks {
        let task = sample_task(
            &ds,
            tcfg.n_way,
            tcfg.k_shot,
            tcfg.queries_per_class,
            tcfg.setting,
            tcfg.query_dist,
            cfg.model.query_init,
            derive_seed(tcfg.seed, SeedDomain::Analysis, t as u64),
        )?;
        let trace = attentive_gnn::attention::model_forward_trace(&task, &params, &cfg.model)?;
        let profile = smoothing_profile(&trace.layer_features, cfg.analysis.epsilon, rank_m)?;
        records.extend(profile.records(t));
        if t == 0 && (export || cfg.analysis.export_features) {
            let paths = export_features(&trace.layer_features, &task, &dir.join("features"))?;
            println!("exported {} feature files", paths.len());
        }
    }
    attentive_gnn::analysis::write_profile_records(&dir.join("profile.jsonl"), &records)?;
    println!(
        "profiled {} tasks x {} stages -> {}",
        cfg.analysis.tasks,
        records.len() / cfg.analysis.tasks,
        dir.join("profile.jsonl").display()
    );

    if beta_sweep {
        let mut lines = Vec::new();
        for i in 1..=10 {
            let beta = i as f64 / 10.0;
            let swept = AttentionConfig {
                beta,
                ..cfg.model.clone()
            };
            let result = evaluate(
                &params,
                &ds,
                &tcfg,
                &swept,
                tcfg.eval_episodes,
                derive_seed(tcfg.seed, SeedDomain::Eval, tcfg.total_episodes),
            )?;
            println!("beta {beta:.1}: accuracy {:.4}", result.mean_accuracy);
            lines.push(serde_json::json!({
                "beta": beta,
                "accuracy": result.mean_accuracy,
                "ci95": result.ci95,
            }));
        }
        let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(dir.join("beta_sweep.jsonl"), body)?;
    }
    Ok(())
}
