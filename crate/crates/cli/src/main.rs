//! `bplm`: pretraining, continued pretraining, fine-tuning/evaluation and
//! report aggregation from declarative config files.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bplm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use bplm::data::{gen_corpus, pack_batches};
use bplm::finetune::{run_grid_search, write_report, zero_shot_eval, RUNS_HEADER};
use bplm::runner::{check_cpt_base, initial_checkpoint, save_metrics_csv, train_from, validate_biphasic, RunOutput};
use bplm::tasks::{gen_task_data, TaskGenConfig};
use bplm::{LmBatch, Task, TaskSplits};
use clap::{Args, Parser, Subcommand};

use crate::config::{Experiment, RawConfig};

#[derive(Parser)]
#[command(name = "bplm", version, about = "Desk-scale CLM/MLM pretraining and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Omit to use the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $BPLM_OUT_DIR/<config name>, or runs/<config name>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Permit masking ratios, learning-rate grids and seed counts outside the study grid.
    #[arg(long)]
    allow_nonstudy: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain from scratch (single objective) or biphasic CLM then MLM.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continued MLM pretraining from a finished checkpoint.
    Cpt {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Accept a base that has not gone through learning-rate decay.
        #[arg(long)]
        force: bool,
    },
    /// Grid-search fine-tuning and evaluation of a checkpoint on a task dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with train.jsonl, validation.jsonl and test.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Task,
        /// Dataset name used in reports [default: data directory name]
        #[arg(long)]
        dataset: Option<String>,
        /// Use seeds 0..N instead of the configured list.
        #[arg(long)]
        seeds: Option<u64>,
        /// Parallel (lr, seed) cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Retrieval datasets to evaluate zero-shot with the selected models.
        #[arg(long)]
        zero_shot: Vec<PathBuf>,
    },
    /// Concatenate aggregate.csv files found under the given directories.
    Report {
        dirs: Vec<PathBuf>,
        /// Output CSV [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic task dataset as JSONL.
    GenTasks {
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 300)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output_dir(common: &Common) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    let name = common
        .config
        .as_ref()
        .and_then(|c| c.file_stem())
        .map_or_else(|| "desk".to_string(), |s| s.to_string_lossy().into_owned());
    let root = std::env::var_os("BPLM_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

fn load_experiment(common: &Common, for_cpt: bool) -> Result<Experiment> {
    match &common.config {
        Some(path) => config::load_experiment(path, common.seed, for_cpt),
        None => RawConfig::default().expand(common.seed, for_cpt),
    }
}

fn prepare_out(common: &Common, exp: &Experiment) -> Result<PathBuf> {
    let out = output_dir(common);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.expanded.toml"), exp.to_toml()?)?;
    Ok(out)
}

fn pretraining_data(exp: &Experiment, steps: u64) -> Result<Vec<LmBatch>> {
    let corpus = gen_corpus(&exp.data.corpus)?;
    let packed = pack_batches(&corpus.sequences, &exp.data.pack)?;
    if (packed.batches.len() as u64) < steps {
        bail!(
            "corpus yields {} batches but the run needs {steps}; raise data.corpus.target_tokens or data.epochs",
            packed.batches.len()
        );
    }
    log::info!(
        "{} batches of {} rows; corpus entropy rate {:.4} nats/token",
        packed.batches.len(),
        exp.data.pack.batch_rows,
        corpus.entropy_rate
    );
    Ok(packed.batches)
}

fn write_run(out: &Path, run: &RunOutput) -> Result<()> {
    save_checkpoint(&run.checkpoint, &out.join("checkpoint.bplm"))?;
    save_metrics_csv(&out.join("metrics.csv"), &run.trace)?;
    Ok(())
}

fn cadence_saver(out: &Path) -> Result<impl FnMut(&Checkpoint) -> bplm::Result<()>> {
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir)?;
    Ok(move |c: &Checkpoint| save_checkpoint(c, &dir.join(format!("step-{:08}.bplm", c.step))))
}

fn cmd_pretrain(common: &Common, resume: Option<&Path>) -> Result<()> {
    let exp = load_experiment(common, false)?;
    exp.check_study_grid(common.allow_nonstudy, true, false)?;
    let cfg = &exp.train;
    if cfg.plan.len() == 2 {
        validate_biphasic(cfg)?;
    } else if cfg.plan.len() != 1 {
        bail!("pretrain takes a single-phase or a two-phase (clm, mlm) plan");
    }
    let out = prepare_out(common, &exp)?;
    let data = pretraining_data(&exp, cfg.total_steps())?;
    let start = match resume {
        Some(path) => load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?,
        None => initial_checkpoint(cfg)?,
    };
    if cfg.plan.len() == 2 {
        log::info!("biphasic run: clm for {} steps, then mlm for {}", cfg.plan[0].steps, cfg.plan[1].steps);
    }
    let run = train_from(cfg, start, &data, &mut cadence_saver(&out)?)?;
    write_run(&out, &run)?;
    if let Some(last) = run.trace.last() {
        println!("pretrain done: {} steps, final loss {:.5}, output {}", run.checkpoint.step, last.loss, out.display());
    }
    Ok(())
}

fn cmd_cpt(common: &Common, base: &Path, force: bool) -> Result<()> {
    let mut exp = load_experiment(common, true)?;
    exp.cpt.force = force;
    exp.check_study_grid(common.allow_nonstudy, false, true)?;
    let base_ckpt = load_checkpoint(base).with_context(|| format!("loading {}", base.display()))?;
    check_cpt_base(&base_ckpt, force)?;
    if force && !base_ckpt.is_decayed() {
        log::warn!("continuing from a non-decayed base because of --force");
    }
    let out = prepare_out(common, &exp)?;
    let run = if exp.cpt.steps == 0 {
        RunOutput { checkpoint: base_ckpt, trace: Vec::new() }
    } else {
        let cfg = exp.cpt.train_config(&base_ckpt)?;
        let data = pretraining_data(&exp, exp.cpt.steps)?;
        let state = exp.cpt.initial_state(&base_ckpt)?;
        train_from(&cfg, state, &data, &mut cadence_saver(&out)?)?
    };
    write_run(&out, &run)?;
    let history: Vec<String> = run.checkpoint.history.iter().map(|p| format!("{}:{}", p.objective, p.steps)).collect();
    println!("cpt done: history {}, output {}", history.join(" -> "), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    common: &Common,
    checkpoint: &Path,
    data_dir: &Path,
    task: Task,
    dataset: Option<String>,
    seeds: Option<u64>,
    jobs: usize,
    zero_shot: &[PathBuf],
) -> Result<()> {
    let mut exp = load_experiment(common, false)?;
    if let Some(n) = seeds {
        exp.finetune.seeds = (0..n).collect();
    }
    if !exp.finetune.is_study_grid() {
        if !common.allow_nonstudy {
            bail!(
                "fine-tuning grid ({} learning rates x {} seeds) differs from the study grid; pass --allow-nonstudy",
                exp.finetune.lrs.len(),
                exp.finetune.seeds.len()
            );
        }
        log::warn!("NON-STUDY fine-tuning grid (allowed by --allow-nonstudy)");
    }
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let splits = TaskSplits::read_dir(data_dir, task)?;
    let dataset = dataset.unwrap_or_else(|| {
        data_dir.file_name().map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let out = prepare_out(common, &exp)?;
    let report = run_grid_search(&ckpt.model, &ckpt.params, &splits, &dataset, &exp.finetune, jobs)?;
    write_report(&out, &report)?;

    if !zero_shot.is_empty() {
        if task != Task::Ir {
            bail!("--zero-shot needs an ir task");
        }
        let mut w = csv::Writer::from_path(out.join("zero_shot.csv"))?;
        w.write_record(RUNS_HEADER)?;
        for dir in zero_shot {
            let target = TaskSplits::read_dir(dir, Task::Ir)?;
            let name = dir.file_name().map_or_else(|| "zero-shot".to_string(), |n| n.to_string_lossy().into_owned());
            for (seed, model) in &report.selected_models {
                let eval = zero_shot_eval(model, &target.test)?;
                w.write_record([
                    "ir".to_string(),
                    name.clone(),
                    report.selected_lr.to_string(),
                    seed.to_string(),
                    "test".to_string(),
                    Task::Ir.metric_name().to_string(),
                    eval.metric.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    let ci = report.test_ci95.map_or_else(|| "n/a (single seed)".to_string(), |c| format!("{c:.4}"));
    println!(
        "{task} {dataset}: lr {} selected, test {} {:.4} ± {ci}; {} runs, output {}",
        report.selected_lr,
        task.metric_name(),
        report.test_mean,
        report.runs.len(),
        out.display()
    );
    Ok(())
}

fn find_aggregates(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_aggregates(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "aggregate.csv") {
            found.push(p);
        }
    }
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut files = Vec::new();
    for d in dirs {
        find_aggregates(d, &mut files)?;
    }
    if files.is_empty() {
        bail!("no aggregate.csv found");
    }
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Option<csv::StringRecord> = None;
    for f in &files {
        let mut r = csv::Reader::from_path(f)?;
        let h = r.headers()?.clone();
        match &header {
            None => {
                let mut full = csv::StringRecord::from(vec!["source"]);
                full.extend(h.iter());
                w.write_record(&full)?;
                header = Some(h);
            }
            Some(prev) if *prev != h => bail!("{} has a different header", f.display()),
            Some(_) => {}
        }
        for rec in r.records() {
            let mut row = csv::StringRecord::from(vec![f.parent().unwrap_or(Path::new("")).display().to_string()]);
            row.extend(rec?.iter());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_gen_tasks(task: Task, size: usize, seed: u64, out: &Path) -> Result<()> {
    let splits = gen_task_data(task, size, seed, &TaskGenConfig::default())?;
    splits.write_dir(out)?;
    println!(
        "{task}: {} train, {} validation, {} test examples in {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, resume } => cmd_pretrain(&common, resume.as_deref()),
        Command::Cpt { common, base, force } => cmd_cpt(&common, &base, force),
        Command::Finetune { common, checkpoint, data, task, dataset, seeds, jobs, zero_shot } => {
            cmd_finetune(&common, &checkpoint, &data, task, dataset, seeds, jobs, &zero_shot)
        }
        Command::Report { dirs, out } => cmd_report(&dirs, out.as_deref()),
        Command::GenTasks { task, size, seed, out } => cmd_gen_tasks(task, size, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

