//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid flags or configuration,
//! 3 refusal to overwrite an existing artifact, 4 missing input artifact.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::StageConfig;
use crate::data::{generate_dataset, load_split, CompositeSample, MANIFEST_FILE, MIN_SIZE};
use crate::error::{Error, Result};
use crate::netgraph::{load_checkpoint, save_checkpoint};
use crate::pipeline::{
    evaluate_net, run_experiment_preset, run_train_stage, train_teacher, EvalResult, Preset,
    PresetInputs, RunDir,
};
use crate::pruner::{prune_student, run_prune_stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_WOULD_OVERWRITE: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "slimmat",
    version,
    about = "Distillation-aware channel pruning for matting networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic composite dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train the teacher with the alpha loss only.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sparsify a student under distillation and cut its channels.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Overrides `ratio` from the config.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Retrain a pruned architecture from scratch with distillation.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Pruned checkpoint written by `prune`.
        #[arg(long)]
        student: PathBuf,
    },
    /// Print `mse,sad,grad,conn,params,flops` for a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset root (test split) or a split directory such as `root/test`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Print a header line first.
        #[arg(long)]
        header: bool,
    },
    /// Run an experiment preset and write report.md and report.csv.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        preset: String,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run directory name under the runs root.
    #[arg(long, default_value = "default")]
    name: String,
    #[arg(long)]
    force: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::WouldOverwrite(_) => EXIT_WOULD_OVERWRITE,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            n_train,
            n_test,
            size,
            seed,
            force,
        } => {
            if size < MIN_SIZE {
                return Err(Error::InvalidArgument(format!(
                    "--size {size} is below the minimum {MIN_SIZE}"
                )));
            }
            generate_dataset(&out, n_train, n_test, size, seed, force)?;
            println!("{}", out.join(MANIFEST_FILE).display());
            Ok(())
        }
        Command::TrainTeacher { run } => {
            let (cfg, dir, train, test) = open_run(&run, "teacher")?;
            let (net, log) = train_teacher(&cfg, &train)?;
            finish_stage(&dir, "teacher", &net, &log.to_csv()?, &test, cfg.batch_size)
        }
        Command::Prune {
            run,
            teacher,
            ratio,
        } => {
            let mut cfg = StageConfig::load(&run.config)?;
            if let Some(r) = ratio {
                cfg.ratio = r;
            }
            let teacher = load_checkpoint(&teacher)?;
            let (cfg, dir, train, test) = open_run_with(cfg, &run, "pruned")?;
            let (student, log) = run_prune_stage(&teacher, &cfg, &train)?;
            save_checkpoint(&student, &dir.checkpoint("sparsified"))?;
            let size = train[0].size();
            let (pruned, report) = prune_student(&student, cfg.ratio, cfg.min_keep_fraction, size)?;
            dir.write_log("prune_report.md", &report.to_markdown())?;
            dir.write_log("prune_layers.csv", &report.layers_csv()?)?;
            dir.write_log("gamma_histogram.csv", &report.histogram_csv())?;
            dir.write_log("prune_report.json", &serde_json::to_string_pretty(&report)?)?;
            println!(
                "tau_enc={},tau_dec={},params_before={},params_after={}",
                fmt_tau(report.tau_enc),
                fmt_tau(report.tau_dec),
                report.params_before,
                report.params_after
            );
            finish_stage(
                &dir,
                "pruned",
                &pruned,
                &log.to_csv()?,
                &test,
                cfg.batch_size,
            )
        }
        Command::Train {
            run,
            teacher,
            student,
        } => {
            let teacher = load_checkpoint(&teacher)?;
            let pruned = load_checkpoint(&student)?;
            let (cfg, dir, train, test) = open_run(&run, "final")?;
            let (net, art) = run_train_stage(&pruned, &teacher, &cfg, &train)?;
            finish_stage(
                &dir,
                "final",
                &net,
                &art.log.to_csv()?,
                &test,
                cfg.batch_size,
            )
        }
        Command::Eval {
            model,
            data,
            batch_size,
            header,
        } => {
            let net = load_checkpoint(&model)?;
            let samples = load_eval_split(&data)?;
            let eval = evaluate_net(&net, &samples, batch_size.max(1))?;
            if header {
                println!("mse,sad,grad,conn,params,flops");
            }
            println!("{}", eval_row(&eval));
            Ok(())
        }
        Command::Report {
            run,
            teacher,
            preset,
        } => {
            let preset = Preset::parse(&preset)?;
            let teacher = load_checkpoint(&teacher)?;
            let cfg = StageConfig::load(&run.config)?;
            cfg.validate()?;
            let dir = RunDir::named(&run.name)?;
            if dir.report_md().exists() && !run.force {
                return Err(Error::WouldOverwrite(dir.report_md()));
            }
            dir.begin_stage(preset.name(), &cfg, true)?;
            let train = load_split(&run.data, "train")?;
            let test = load_split(&run.data, "test")?;
            let inputs = PresetInputs {
                cfg: &cfg,
                teacher: &teacher,
                train: &train,
                test: &test,
            };
            let report = run_experiment_preset(preset, &inputs)?;
            let md = report.to_markdown();
            std::fs::write(dir.report_md(), &md)?;
            std::fs::write(dir.report_csv(), report.to_csv()?)?;
            print!("{md}");
            Ok(())
        }
    }
}

type OpenedRun = (
    StageConfig,
    RunDir,
    Vec<CompositeSample>,
    Vec<CompositeSample>,
);

fn open_run(run: &RunArgs, stage: &str) -> Result<OpenedRun> {
    open_run_with(StageConfig::load(&run.config)?, run, stage)
}

fn open_run_with(cfg: StageConfig, run: &RunArgs, stage: &str) -> Result<OpenedRun> {
    cfg.validate()?;
    let dir = RunDir::named(&run.name)?;
    let train = load_split(&run.data, "train")?;
    let test = load_split(&run.data, "test")?;
    dir.begin_stage(stage, &cfg, run.force)?;
    Ok((cfg, dir, train, test))
}

fn finish_stage(
    dir: &RunDir,
    stage: &str,
    net: &crate::netgraph::NetworkGraph,
    log_csv: &str,
    test: &[CompositeSample],
    batch_size: usize,
) -> Result<()> {
    dir.write_log(&format!("{stage}.csv"), log_csv)?;
    if !test.is_empty() {
        let eval = evaluate_net(net, test, batch_size)?;
        dir.write_log(
            &format!("{stage}.eval.csv"),
            &format!("mse,sad,grad,conn,params,flops\n{}\n", eval_row(&eval)),
        )?;
    }
    let path = dir.checkpoint(stage);
    save_checkpoint(net, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn fmt_tau(t: Option<f64>) -> String {
    t.map_or("n/a".into(), |t| format!("{t:e}"))
}

fn eval_row(e: &EvalResult) -> String {
    let m = &e.mean;
    format!(
        "{},{},{},{},{},{}",
        m.mse, m.sad, m.grad, m.conn, e.params, e.flops
    )
}

/// A dataset root evaluates its test split; `root/<split>` evaluates that split.
fn load_eval_split(data: &Path) -> Result<Vec<CompositeSample>> {
    if data.join(MANIFEST_FILE).is_file() {
        return load_split(data, "test");
    }
    match (data.parent(), data.file_name().and_then(|n| n.to_str())) {
        (Some(root), Some(split)) if root.join(MANIFEST_FILE).is_file() => load_split(root, split),
        _ => Err(Error::MissingArtifact(data.join(MANIFEST_FILE))),
    }
}
