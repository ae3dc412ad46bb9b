use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use uharmony::ablation::{run_ablation, AblationPlan};
use uharmony::gradcheck::suite::{format_reports, run_suite, wrong_backward_fixture, Scope};
use uharmony::synth::{generate_domain, DatasetManifest, DomainSpec, Split};
use uharmony::train::{
    evaluate, metrics_csv, registry_from_manifests, train, Checkpoint, EvalMode, ExperimentConfig, TrainOptions,
};
use uharmony::{DType, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;

#[derive(Parser)]
#[command(name = "uharmony", version, about = "Joint multi-domain 3D segmentation with feature harmonization")]
struct Cli {
    /// Seed override: offsets domain seeds (gen-data), replaces the run seed
    /// (train), the seed list (ablate) or the input draws (gradcheck).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Storage and compute precision for gen-data, train and ablate.
    #[arg(long, global = true, value_enum)]
    dtype: Option<Precision>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(alias = "dataset_free")]
    DatasetFree,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Uharmony,
    End2end,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    WrongBackward,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one dataset per domain spec under <out>/<domain name>.
    GenData {
        #[arg(long, required = true, num_args = 1..)]
        spec: Vec<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train jointly on the given datasets; writes checkpoint.bin and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory or manifest.json, one per domain.
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch and save a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint: per-class DSC table on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "dataset-free")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; exits 4 if any check fails.
    Gradcheck {
        #[arg(long, value_enum, default_value = "ops")]
        scope: ScopeArg,
        #[arg(long, value_enum, hide = true)]
        fixture: Option<Fixture>,
    },
    /// Run a variant × seed matrix; exits 4 if an ordering check is violated.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write long-format plot_data.csv.
        #[arg(long)]
        emit_plot_data: bool,
    },
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>, Error> {
    paths.iter().map(|p| DatasetManifest::load(p)).collect()
}

fn gen_data(cli: &Cli, specs: &[PathBuf], n: usize, out: &Path) -> CmdResult {
    let mut loaded = Vec::new();
    for p in specs {
        let mut s = DomainSpec::load(p)?;
        if let Some(seed) = cli.seed {
            s.seed = s.seed.wrapping_add(seed);
        }
        loaded.push(s);
    }
    for (k, a) in loaded.iter().enumerate() {
        if let Some(b) = loaded[..k].iter().find(|b| b.domain_id == a.domain_id || b.name == a.name) {
            return Err(Error::Config(format!(
                "specs '{}' and '{}' share a domain id or name",
                b.name, a.name
            ))
            .into());
        }
    }
    let dtype = cli.dtype.map(DType::from).unwrap_or(DType::F64);
    for s in &loaded {
        let dir = out.join(&s.name);
        generate_domain(s, n, &dir, dtype)?;
        println!("{}", dir.join("manifest.json").display());
    }
    Ok(())
}

fn train_cmd(
    cli: &Cli,
    config: &Path,
    manifests: &[PathBuf],
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> CmdResult {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = cli.dtype {
        cfg.train.dtype = d.into();
    }
    let manifests = load_manifests(manifests)?;
    let registry = registry_from_manifests(&manifests)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let ck = train(&cfg, &manifests, &registry, TrainOptions { resume, stop_after })?;
    fs::create_dir_all(out)?;
    ck.save(&out.join("checkpoint.bin"))?;
    fs::write(out.join("metrics.csv"), metrics_csv(&ck.history))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let last: Vec<String> = ck
        .epochs
        .iter()
        .filter(|e| e.epoch == ck.epoch)
        .map(|e| format!("{} loss {:.4}", e.domain, e.loss))
        .collect();
    println!("epoch {}/{}: {}", ck.epoch, cfg.train.total_epochs, last.join(", "));
    println!("{}", out.join("checkpoint.bin").display());
    Ok(())
}

fn eval_cmd(checkpoint: &Path, manifests: &[PathBuf], mode: ModeArg, split: SplitArg, csv: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let manifests = load_manifests(manifests)?;
    let mode = match mode {
        ModeArg::DatasetFree => EvalMode::DatasetFree,
        ModeArg::Oracle => EvalMode::Oracle,
    };
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let report = evaluate(&ck.model, &manifests, mode, split)?;
    print!("{}", report.to_table());
    if let Some(p) = csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, scope: ScopeArg, fixture: Option<Fixture>) -> CmdResult {
    if matches!(cli.dtype, Some(Precision::F32)) {
        return Err(Error::Config("gradient checks run in double precision only".into()).into());
    }
    let reports = match fixture {
        Some(Fixture::WrongBackward) => vec![wrong_backward_fixture()?],
        None => {
            let scope = match scope {
                ScopeArg::Ops => Scope::Ops,
                ScopeArg::Uharmony => Scope::Uharmony,
                ScopeArg::End2end => Scope::End2End,
            };
            run_suite(scope, cli.seed.unwrap_or(0))?
        }
    };
    print!("{}", format_reports(&reports));
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}

fn ablate_cmd(cli: &Cli, plan: &Path, out: &Path, plot: bool) -> CmdResult {
    let mut plan = AblationPlan::load(plan)?;
    if let Some(s) = cli.seed {
        plan.seeds = vec![s];
    }
    if let Some(d) = cli.dtype {
        plan.base.train.dtype = d.into();
    }
    let report = run_ablation(&plan, out)?;
    report.write(out, plot)?;
    print!("{}", report.to_table());
    let violated = report.checks().iter().filter(|c| !c.passed).count();
    if violated > 0 {
        return Err(Failure::Verification(format!("{violated} ordering check(s) violated")));
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::GenData { spec, n, out } => gen_data(cli, spec, *n, out),
        Command::Train { config, manifest, out, resume, stop_after } => {
            train_cmd(cli, config, manifest, out, resume.as_deref(), *stop_after)
        }
        Command::Eval { checkpoint, manifest, mode, split, csv } => {
            eval_cmd(checkpoint, manifest, *mode, *split, csv.as_deref())
        }
        Command::Gradcheck { scope, fixture } => gradcheck_cmd(cli, *scope, *fixture),
        Command::Ablate { plan, out, emit_plot_data } => ablate_cmd(cli, plan, out, *emit_plot_data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("uharmony: verification failed: {msg}");
            ExitCode::from(EXIT_VERIFICATION)
        }
        Err(Failure::Error(e)) => {
            eprintln!("uharmony: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_CONFIG,
            })
        }
    }
}
