use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fpn::ablation::{format_table, run_ablation};
use fpn::config::RunConfig;
use fpn::data::{read_dataset, write_dataset, Scene};
use fpn::eval::evaluate_checkpoint;
use fpn::fpn::PyramidVariant;
use fpn::gradsuite::run_suite;
use fpn::model::{Checkpoint, RpnNetwork, Task};
use fpn::train::{train_detector, train_masks, train_rpn, TrainOptions, TrainRun};
use fpn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fpn",
    version,
    about = "Feature pyramid proposals, detection and segment proposals on synthetic shapes"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Pyramid variant, overriding the config
    #[arg(long, global = true, value_parser = ["fpn", "bottomup", "nolateral", "finest"])]
    variant: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and eval splits under OUT/train and OUT/eval
    GenData {
        #[arg(long)]
        train_images: Option<usize>,
        #[arg(long)]
        eval_images: Option<usize>,
    },
    /// Train the region proposal network
    TrainRpn {
        /// Dataset directory written by gen-data; generated in memory if absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the box detector on proposals from a trained RPN
    TrainDet {
        /// Proposal network checkpoint
        #[arg(long)]
        rpn: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the segment proposal heads
    TrainMask {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split
    Eval {
        #[arg(long, value_parser = ["proposals", "detection", "masks"])]
        task: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every proposal ablation row
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation
    GradCheck,
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = &cli.variant {
        cfg.fpn.variant = v.parse::<PyramidVariant>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split(cfg: &RunConfig, data: Option<&Path>, name: &str) -> Result<Vec<Scene>> {
    match (data, name) {
        (Some(d), _) => read_dataset(&d.join(name)),
        (None, "train") => cfg.train_scenes(),
        (None, _) => cfg.eval_scenes(),
    }
}

fn resume(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    path.map(Checkpoint::load).transpose()
}

/// Writes to stdout, ignoring a closed pipe.
fn say(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn report_run<N>(run: &TrainRun<N>, out: &Path) {
    if let Some(last) = run.losses.last() {
        say(&format!("{}\n", last.to_line()));
    }
    say(&format!("wrote {}\n", out.join("checkpoint.bin").display()));
}

fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join("config.toml"))
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData { train_images, eval_images } => {
            let mut cfg = load_config(cli, None)?;
            if let Some(n) = train_images {
                cfg.data.train_images = *n;
            }
            if let Some(n) = eval_images {
                cfg.data.eval_images = *n;
            }
            write_dataset(&out.join("train"), &cfg.train_scenes()?)?;
            write_dataset(&out.join("eval"), &cfg.eval_scenes()?)?;
            say(&format!(
                "wrote {} train and {} eval images to {}\n",
                cfg.data.train_images,
                cfg.data.eval_images,
                out.display()
            ));
        }
        Command::TrainRpn { data, resume: r } => {
            let cfg = load_config(cli, None)?;
            let scenes = split(&cfg, data.as_deref(), "train")?;
            let ck = resume(r.as_deref())?;
            let opts = TrainOptions {
                resume: ck.as_ref(),
                out_dir: Some(out),
            };
            report_run(&train_rpn(&cfg, &scenes, &opts)?, out);
        }
        Command::TrainDet { rpn, data, resume: r } => {
            let cfg = load_config(cli, None)?;
            let scenes = split(&cfg, data.as_deref(), "train")?;
            let rpn_ck = Checkpoint::load(rpn)?;
            rpn_ck.expect_task(Task::Proposals)?;
            let proposer = RpnNetwork::new(&cfg)?;
            rpn_ck.restore(&proposer.store)?;
            let ck = resume(r.as_deref())?;
            let opts = TrainOptions {
                resume: ck.as_ref(),
                out_dir: Some(out),
            };
            report_run(&train_detector(&cfg, &scenes, &proposer, &opts)?, out);
        }
        Command::TrainMask { data, resume: r } => {
            let cfg = load_config(cli, None)?;
            let scenes = split(&cfg, data.as_deref(), "train")?;
            let ck = resume(r.as_deref())?;
            let opts = TrainOptions {
                resume: ck.as_ref(),
                out_dir: Some(out),
            };
            report_run(&train_masks(&cfg, &scenes, &opts)?, out);
        }
        Command::Eval { task, checkpoint, data } => {
            let cfg = load_config(cli, sibling_config(checkpoint).as_deref())?;
            let task: Task = task.parse()?;
            let ck = Checkpoint::load(checkpoint)?;
            let scenes = split(&cfg, data.as_deref(), "eval")?;
            let ev = evaluate_checkpoint(&cfg, &ck, task, &scenes)?;
            ev.write(out)?;
            say(&ev.report.to_text());
            say(&format!("seconds_per_image = {:.6}\n", ev.seconds_per_image));
        }
        Command::Ablate { data } => {
            let cfg = load_config(cli, None)?;
            let train = split(&cfg, data.as_deref(), "train")?;
            let eval = split(&cfg, data.as_deref(), "eval")?;
            let results = run_ablation(&cfg, &train, &eval, Some(out))?;
            let table = format_table(&results);
            let p = out.join("table.txt");
            fs::write(&p, &table).map_err(|e| Error::Io { path: p, source: e })?;
            say(&table);
        }
        Command::GradCheck => {
            let cfg = load_config(cli, None)?;
            let outcomes = run_suite(cfg.seed)?;
            let mut worst = 0.0f64;
            for o in &outcomes {
                let verdict = if o.passed() { "ok" } else { "FAIL" };
                say(&format!(
                    "{:<62} {:.3e}  (< {:.0e})  {verdict}\n",
                    o.name, o.max_rel_error, o.tolerance
                ));
                worst = worst.max(o.max_rel_error);
            }
            say(&format!("max relative error = {worst:.3e}\n"));
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            if failed > 0 {
                return Err(Error::CheckFailed(format!("{failed} gradient checks exceeded tolerance")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
