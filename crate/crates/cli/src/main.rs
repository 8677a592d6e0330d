//! Command-line driver for prior estimation, sampling and diagnostics.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcc_lab::config::RunConfig;
use tcc_lab::denoiser::{build_denoiser, Denoiser};
use tcc_lab::diagnostics::{count_flops, deviation, within_label_dispersion};
use tcc_lab::pack::{load_pack, save_pack};
use tcc_lab::schedule::NoiseSchedule;
use tcc_lab::trajectory::{CalibrationPack, RecordOptions, Runner};

#[derive(Parser)]
#[command(name = "tcc-lab", version, about = "Cache reuse and trajectory-consistent calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithPack {
    #[command(flatten)]
    common: Common,
    /// Calibration pack to apply at cached steps.
    #[arg(long)]
    pack: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Trajectory-consistent prior estimation; writes `tcc.tccpack`.
    EstimatePriors(Common),
    /// One-shot baseline estimation; writes `oneshot.tccpack`.
    EstimateOneshot(Common),
    /// Cache-accelerated sampling; writes `latents.csv` and `steps.csv`.
    Sample(WithPack),
    /// Compares a cached (optionally calibrated) run against full computation.
    EvalDeviation(WithPack),
    /// Analytical FLOPs of the configured schedule; writes `flops.csv`.
    Flops(WithPack),
    /// Within-label dispersion of full-computation activations.
    Dispersion(Common),
    /// Endpoint deviation of both estimators over a grid of strengths.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 1.0])]
        alphas: Vec<f64>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Lib(tcc_lab::Error),
    Csv(csv::Error),
}

impl From<tcc_lab::Error> for CliError {
    fn from(e: tcc_lab::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Csv(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use tcc_lab::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Lib(E::InvalidConfig { .. } | E::Syntax { .. }) => 2,
            CliError::Lib(
                E::FingerprintMismatch { .. } | E::BadMagic | E::VersionMismatch { .. } | E::UnexpectedEof | E::MalformedPack(_),
            ) => 3,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => f.write_str(m),
            CliError::Lib(e) => e.fmt(f),
            CliError::Csv(e) => e.fmt(f),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

struct Session {
    cfg: RunConfig,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    threads: usize,
    out: PathBuf,
}

impl Session {
    fn open(common: &Common) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.run.seed = seed;
        }
        cfg.validate()?;
        let threads = match std::env::var("TCC_LAB_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("TCC_LAB_THREADS: expected a thread count, got `{v}`")))?,
            Err(_) => 0,
        };
        let out = common.out.clone().unwrap_or_else(|| cfg.run.output_dir.clone());
        std::fs::create_dir_all(&out)
            .map_err(|e| CliError::Lib(tcc_lab::Error::Io(e)))?;
        Ok(Self {
            denoiser: build_denoiser(&cfg.model)?,
            schedule: cfg.build_schedule()?,
            cfg,
            threads,
            out,
        })
    }

    fn runner(&self) -> CliResult<Runner<'_>> {
        Ok(Runner::new(&self.denoiser, &self.schedule, &self.cfg.cache, self.threads)?)
    }

    fn load(&self, pack: &Option<PathBuf>) -> CliResult<Option<CalibrationPack>> {
        match pack {
            Some(path) => Ok(Some(load_pack(path, self.cfg.fingerprint())?)),
            None => Ok(None),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn announce(path: &Path) {
    println!("{}", path.display());
}

fn estimate(common: &Common, oneshot: bool) -> CliResult<()> {
    let s = Session::open(common)?;
    let runner = s.runner()?;
    let samples = s.cfg.samples();
    let opts = s.cfg.estimate_options();
    let est = if oneshot {
        runner.estimate_priors_oneshot(&samples, &opts)?
    } else {
        runner.estimate_priors(&samples, &opts)?
    };
    let path = s.path(if oneshot { "oneshot.tccpack" } else { "tcc.tccpack" });
    save_pack(&est.pack, &path)?;
    announce(&path);
    Ok(())
}

fn sample(args: &WithPack) -> CliResult<()> {
    let s = Session::open(&args.common)?;
    let runner = s.runner()?;
    let samples = s.cfg.samples();
    let rec = match s.load(&args.pack)? {
        Some(pack) => runner.run_calibrated_inference(&samples, &pack, RecordOptions::default())?,
        None => runner.run_cached(&samples, RecordOptions::default())?,
    };
    let latents = s.path("latents.csv");
    report::write_latents(&latents, &samples, &rec.endpoints)?;
    let steps = s.path("steps.csv");
    report::write_steps(&steps, &rec.steps)?;
    announce(&latents);
    announce(&steps);
    Ok(())
}

fn eval_deviation(args: &WithPack) -> CliResult<()> {
    let s = Session::open(&args.common)?;
    let runner = s.runner()?;
    let samples = s.cfg.samples();
    let rec = RecordOptions {
        latents: true,
        site_values: true,
        mismatch: false,
    };
    let full = runner.run_full(&samples, rec)?;
    let pack = s.load(&args.pack)?;
    let method = match &pack {
        Some(pack) => runner.run_calibrated_inference(&samples, pack, rec)?,
        None => runner.run_cached(&samples, rec)?,
    };
    let r = deviation(&full, &method)?;
    let calibrated: Vec<_> = method.steps.iter().filter(|l| l.calibrated_sites > 0).map(|l| l.step_index).collect();
    let summary = s.path("deviation.csv");
    report::write_deviation_summary(&summary, &s.cfg, pack.is_some(), &r)?;
    let steps = s.path("deviation_steps.csv");
    report::write_deviation_steps(&steps, &r, &calibrated)?;
    let sites = s.path("site_mismatch.csv");
    report::write_site_mismatch(&sites, &r, pack.as_ref())?;
    for p in [&summary, &steps, &sites] {
        announce(p);
    }
    Ok(())
}

fn flops(args: &WithPack) -> CliResult<()> {
    let s = Session::open(&args.common)?;
    let pack = s.load(&args.pack)?;
    let r = count_flops(&s.cfg.model, s.schedule.n_steps(), &s.cfg.cache, pack.as_ref());
    let path = s.path("flops.csv");
    report::write_flops(&path, &s.cfg, &r)?;
    announce(&path);
    Ok(())
}

fn dispersion(common: &Common) -> CliResult<()> {
    let s = Session::open(common)?;
    let runner = s.runner()?;
    let samples = s.cfg.samples();
    let rec = RecordOptions {
        site_values: true,
        ..RecordOptions::default()
    };
    let full = runner.run_full(&samples, rec)?;
    let input: Vec<_> = samples.iter().map(|spec| spec.condition).zip(&full.site_values).collect();
    let r = within_label_dispersion(&input)?;
    let sites = s.path("dispersion.csv");
    report::write_dispersion_sites(&sites, &r)?;
    let steps = s.path("dispersion_steps.csv");
    report::write_dispersion_steps(&steps, &r)?;
    announce(&sites);
    announce(&steps);
    Ok(())
}

fn sweep_alpha(common: &Common, alphas: &[f64]) -> CliResult<()> {
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(CliError::Config(format!("--alphas: strengths must be finite and >= 0, got {a}")));
    }
    let s = Session::open(common)?;
    let runner = s.runner()?;
    let samples = s.cfg.samples();
    let none = RecordOptions::default();
    let full = runner.run_full(&samples, none)?;
    let cached = runner.run_cached(&samples, none)?;
    let cache_dev = deviation(&full, &cached)?.endpoint_rel_dev;

    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut opts = s.cfg.estimate_options();
        opts.fit.alpha = alpha;
        let tcc = runner.estimate_priors(&samples, &opts)?;
        let oneshot = runner.estimate_priors_oneshot(&samples, &opts)?;
        let tcc_run = runner.run_calibrated_inference(&samples, &tcc.pack, none)?;
        let one_run = runner.run_calibrated_inference(&samples, &oneshot.pack, none)?;
        let first = tcc.pack.operators.keys().map(|s| s.step_index).max();
        let first_identical = tcc
            .pack
            .operators
            .iter()
            .filter(|(site, _)| Some(site.step_index) == first)
            .all(|(site, op)| oneshot.pack.operators.get(site) == Some(op));
        rows.push(report::SweepRow {
            alpha,
            tcc: deviation(&full, &tcc_run)?.endpoint_rel_dev,
            oneshot: deviation(&full, &one_run)?.endpoint_rel_dev,
            cache: cache_dev,
            operators: tcc.pack.len(),
            first_step_identical: first_identical,
        });
    }
    let path = s.path("sweep_alpha.csv");
    report::write_sweep(&path, &rows)?;
    announce(&path);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::EstimatePriors(c) => estimate(c, false),
        Command::EstimateOneshot(c) => estimate(c, true),
        Command::Sample(a) => sample(a),
        Command::EvalDeviation(a) => eval_deviation(a),
        Command::Flops(a) => flops(a),
        Command::Dispersion(c) => dispersion(c),
        Command::SweepAlpha { common, alphas } => sweep_alpha(common, alphas),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tcc-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
