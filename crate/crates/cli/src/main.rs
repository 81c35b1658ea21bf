//! `apn`: dataset generation, training, evaluation, localization and
//! gradient verification.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apn_core::data::{
    generate_synthetic, load_bundle, save_bundle, DatasetBundle, Split, SynthConfig,
};
use apn_core::eval::{
    chance_pcp, export_heatmaps, fsl_evaluate, gfsl_eval, gzsl_eval, pcp, zsl_eval, EvalConfig,
    EvalReport, Mode,
};
use apn_core::model::{infer, load_checkpoint, save_checkpoint, ModelParams};
use apn_core::train::{grid_search, train, TrainConfig};
use apn_core::verify::gradient_suite;
use apn_core::{Error, ErrorKind, Float};
use clap::{Args, Parser, Subcommand};
use log::info;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "apn",
    version,
    about = "Attribute prototype network: zero-/few-shot classification and attribute localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic attribute-grounded dataset bundle.
    GenSynth(GenArgs),
    /// Train a model on a bundle's seen classes.
    Train(TrainArgs),
    /// Evaluate a checkpoint (zsl, gzsl, fsl or gfsl).
    Eval(EvalArgs),
    /// Export attribute heatmaps and peak boxes for one image.
    Localize(LocalizeArgs),
    /// Score part localization (PCP) on the test images.
    Pcp(PcpArgs),
    /// Finite-difference check of every differentiable primitive and the joint loss.
    Gradcheck(GradArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for evaluation (1 = fully deterministic).
    #[arg(long)]
    threads: Option<usize>,
    /// Compute in 64-bit floats.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// `key = value` generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Toggles {
    #[arg(long)]
    no_reg: bool,
    #[arg(long)]
    no_ad: bool,
    #[arg(long)]
    no_cpt: bool,
    #[arg(long)]
    no_zoom: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// `key = value` training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    toggles: Toggles,
    /// Calibration factor recorded with the model for generalized evaluation.
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Comma-separated λ1 values; with it, grid search on the validation classes picks λ1 and γ first.
    #[arg(long, value_delimiter = ',')]
    grid_lambda1: Vec<f64>,
    /// Comma-separated γ values for grid search (default 0, 0.1, ..., 1.0).
    #[arg(long, value_delimiter = ',')]
    grid_gamma: Vec<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Disable the zoom-in branch at inference.
    #[arg(long)]
    no_zoom: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_parser = parse_mode, default_value = "zsl")]
    mode: Mode,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Support images per novel class (fsl, gfsl).
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Image id (default: the first test image).
    #[arg(long)]
    image: Option<u32>,
    /// 1-based attribute index; repeatable (default: the attributes active in the image's class).
    #[arg(long = "attr")]
    attrs: Vec<usize>,
    /// Box side as a fraction of the object box side.
    #[arg(long, default_value_t = 0.25)]
    rho: f64,
}

#[derive(Args, Debug)]
struct PcpArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.25)]
    rho: f64,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Directory for the result table (printed to stdout as well).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random points per check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected zsl, gzsl, fsl or gfsl)"))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("I/O error on {}: {e}", path.display()),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("usage error")
                .to_string();
            eprintln!("usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let kind = match f.code {
                1 => "usage",
                2 => "data",
                _ => "numerical",
            };
            eprintln!("{kind}: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => {
            setup(&a.common)?;
            if a.common.f64 {
                train_cmd::<f64>(a)
            } else {
                train_cmd::<f32>(a)
            }
        }
        Command::Eval(a) => {
            setup(&a.common)?;
            if a.common.f64 {
                eval_cmd::<f64>(a)
            } else {
                eval_cmd::<f32>(a)
            }
        }
        Command::Localize(a) => {
            setup(&a.common)?;
            if a.common.f64 {
                localize_cmd::<f64>(a)
            } else {
                localize_cmd::<f32>(a)
            }
        }
        Command::Pcp(a) => {
            setup(&a.common)?;
            if a.common.f64 {
                pcp_cmd::<f64>(a)
            } else {
                pcp_cmd::<f32>(a)
            }
        }
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn setup(c: &Common) -> CliResult {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot size the thread pool: {e}")))?;
    }
    fs::create_dir_all(&c.out).map_err(|e| io_failure(&c.out, e))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// `manifest.txt`: command, version, seed, threads, dtype, inputs and the
/// resolved configuration.
fn manifest(
    out: &Path,
    command: &str,
    c: &Common,
    inputs: &[(&str, &Path)],
    config: &str,
) -> CliResult {
    let mut m = String::new();
    let _ = writeln!(m, "command = {command}");
    let _ = writeln!(m, "version = {VERSION}");
    if let Some(seed) = c.seed {
        let _ = writeln!(m, "seed = {seed}");
    }
    let _ = writeln!(
        m,
        "threads = {}",
        c.threads.map_or("default".to_string(), |t| t.to_string())
    );
    let _ = writeln!(m, "dtype = {}", if c.f64 { "f64" } else { "f32" });
    for (name, path) in inputs {
        let _ = writeln!(m, "{name} = {}", path.display());
    }
    m.push_str("\n[config]\n");
    m.push_str(config);
    write(&out.join("manifest.txt"), &m)
}

fn gen_synth(a: GenArgs) -> CliResult {
    setup(&a.common)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            SynthConfig::from_text(&text, p)?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    let bundle = generate_synthetic(&cfg)?;
    save_bundle(&bundle, &a.common.out)?;
    info!(
        "wrote {} images of {} classes to {}",
        bundle.samples.len(),
        bundle.classes.classes().len(),
        a.common.out.display()
    );
    manifest(&a.common.out, "gen-synth", &a.common, &[], &cfg.to_text())
}

fn load_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    let t = &a.toggles;
    cfg.reg &= !t.no_reg;
    cfg.ad &= !t.no_ad;
    cfg.cpt &= !t.no_cpt;
    cfg.zoom &= !t.no_zoom;
    cfg.f64 |= a.common.f64;
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd<T: Float>(a: TrainArgs) -> CliResult {
    check_gamma(a.gamma)?;
    let mut cfg = load_train_config(&a)?;
    let bundle = load_bundle(&a.data)?;
    let out = &a.common.out;
    if !a.grid_lambda1.is_empty() || !a.grid_gamma.is_empty() {
        let lambdas = if a.grid_lambda1.is_empty() {
            vec![cfg.lambda1]
        } else {
            a.grid_lambda1.clone()
        };
        let gammas = if a.grid_gamma.is_empty() {
            (0..=10).map(|i| i as f64 / 10.0).collect()
        } else {
            a.grid_gamma.clone()
        };
        let grid = grid_search::<T>(&bundle, &cfg, &lambdas, &gammas)?;
        write(&out.join("grid.tsv"), &grid.to_tsv())?;
        info!(
            "grid search picked λ1 = {}, γ = {}",
            grid.best.lambda1, grid.best.gamma
        );
        cfg = grid.best;
    }
    let (params, log) = train::<T>(&bundle, &cfg)?;
    let ckpt = out.join("checkpoint.apn");
    save_checkpoint(&params, &cfg.to_text(), &ckpt)?;
    write(&out.join("runlog.tsv"), &log.to_tsv())?;
    info!("checkpoint written to {}", ckpt.display());
    manifest(
        out,
        "train",
        &a.common,
        &[("data", &a.data)],
        &cfg.to_text(),
    )
}

/// Loads bundle and checkpoint; the training config stored in the checkpoint
/// supplies the branch toggles and γ.
fn load_model<T: Float>(m: &ModelArgs) -> CliResult<(DatasetBundle, ModelParams<T>, TrainConfig)> {
    let bundle = load_bundle(&m.data)?;
    let (params, text) = load_checkpoint::<T>(&m.ckpt)?;
    let mut cfg = TrainConfig::from_text(&text, &m.ckpt)?;
    cfg.zoom &= !m.no_zoom;
    if params.arch.k != bundle.schema.k() {
        return Err(Error::InvalidData(format!(
            "checkpoint has K = {} but the bundle has K = {}",
            params.arch.k,
            bundle.schema.k()
        ))
        .into());
    }
    Ok((bundle, params, cfg))
}

fn check_gamma(gamma: Option<f64>) -> CliResult {
    match gamma {
        Some(g) if !(g >= 0.0 && g.is_finite()) => {
            Err(usage(format!("--gamma must be >= 0, got {g}")))
        }
        _ => Ok(()),
    }
}

fn eval_cmd<T: Float>(a: EvalArgs) -> CliResult {
    check_gamma(a.gamma)?;
    let (bundle, params, tcfg) = load_model::<T>(&a.model)?;
    let ecfg = EvalConfig {
        mode: a.mode,
        gamma: a.gamma.unwrap_or(tcfg.gamma),
        way: a.way,
        shot: a.shots,
        query: a.query,
        episodes: a.episodes,
        seed: a.common.seed.unwrap_or(7),
        ..EvalConfig::default()
    };
    ecfg.validate()?;
    let lc = tcfg.loss_config();
    let part = bundle.partition();
    let report: EvalReport = match a.mode {
        Mode::Zsl => zsl_eval(
            &params,
            &bundle,
            &part.unseen,
            &bundle.classes.ids(Split::Unseen),
            &lc,
        )?,
        Mode::Gzsl => gzsl_eval(&params, &bundle, ecfg.gamma, &lc)?,
        Mode::Fsl => {
            let summary = fsl_evaluate(&params, &bundle, &ecfg, &lc)?;
            EvalReport::from_episodes(summary)
        }
        Mode::Gfsl => gfsl_eval(&params, &bundle, ecfg.shot, ecfg.seed, &lc)?,
    };
    let tsv = report.to_tsv();
    print!("{tsv}");
    write(&a.common.out.join("report.tsv"), &tsv)?;
    let config = format!(
        "mode = {}\ngamma = {}\nway = {}\nshots = {}\nquery = {}\nepisodes = {}\nzoom = {}\n",
        a.mode.as_str(),
        ecfg.gamma,
        ecfg.way,
        ecfg.shot,
        ecfg.query,
        ecfg.episodes,
        lc.zoom
    );
    manifest(
        &a.common.out,
        "eval",
        &a.common,
        &[("data", &a.model.data), ("ckpt", &a.model.ckpt)],
        &config,
    )
}

fn localize_cmd<T: Float>(a: LocalizeArgs) -> CliResult {
    if !(a.rho > 0.0 && a.rho <= 1.0) {
        return Err(usage(format!("--rho must lie in (0, 1], got {}", a.rho)));
    }
    let (bundle, params, tcfg) = load_model::<T>(&a.model)?;
    let index = match a.image {
        Some(id) => bundle
            .samples
            .iter()
            .position(|s| s.image_id == id)
            .ok_or_else(|| usage(format!("no image with id {id}")))?,
        None => *bundle
            .partition()
            .test()
            .first()
            .ok_or_else(|| Failure::from(Error::Empty("test images".into())))?,
    };
    let k = bundle.schema.k();
    let class = bundle
        .classes
        .get(bundle.samples[index].class_id)
        .expect("validated bundle");
    let attrs: Vec<usize> = if a.attrs.is_empty() {
        let active: Vec<usize> = (0..k).filter(|&i| class.attrs[i] > 0.5).collect();
        if active.is_empty() {
            (0..k).collect()
        } else {
            active
        }
    } else {
        a.attrs
            .iter()
            .map(|&i| {
                if i == 0 || i > k {
                    Err(usage(format!("--attr {i} outside 1..={k}")))
                } else {
                    Ok(i - 1)
                }
            })
            .collect::<CliResult<_>>()?
    };
    let input = bundle.batch::<T>(&[index])?;
    let ids = bundle.classes.all_ids();
    let class_attrs = bundle.class_matrix::<T>(&ids)?;
    let lc = tcfg.loss_config();
    let trace = infer(&params, &input, &class_attrs, bundle.schema.groups(), &lc)?
        .pop()
        .expect("one trace per image");
    let image = input.slice_outer(0)?;
    let files = export_heatmaps(
        &trace,
        &image,
        &attrs,
        bundle.schema.names(),
        a.rho,
        &a.common.out,
    )?;
    info!("wrote {} heatmap files", files.len());
    let config = format!(
        "image = {}\nattrs = {}\nrho = {}\n",
        bundle.samples[index].image_id,
        attrs
            .iter()
            .map(|k| (k + 1).to_string())
            .collect::<Vec<_>>()
            .join(","),
        a.rho
    );
    manifest(
        &a.common.out,
        "localize",
        &a.common,
        &[("data", &a.model.data), ("ckpt", &a.model.ckpt)],
        &config,
    )
}

fn pcp_cmd<T: Float>(a: PcpArgs) -> CliResult {
    if !(a.rho > 0.0 && a.rho <= 1.0) {
        return Err(usage(format!("--rho must lie in (0, 1], got {}", a.rho)));
    }
    let (bundle, params, tcfg) = load_model::<T>(&a.model)?;
    let test = bundle.partition().test();
    let report = pcp(&params, &bundle, &test, &tcfg.loss_config())?;
    let mut tsv = String::from("part\tname\tcorrect\ttotal\tpcp\n");
    for p in &report.parts {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{:.6}",
            p.part + 1,
            p.name,
            p.correct,
            p.total,
            p.score()
        );
    }
    let _ = writeln!(tsv, "mean\t-\t-\t-\t{:.6}", report.mean);
    let _ = writeln!(tsv, "chance\t-\t-\t-\t{:.6}", chance_pcp(&bundle, &test));
    let _ = writeln!(tsv, "skipped\t-\t-\t{}\t-", report.skipped);
    print!("{tsv}");
    write(&a.common.out.join("pcp.tsv"), &tsv)?;
    manifest(
        &a.common.out,
        "pcp",
        &a.common,
        &[("data", &a.model.data), ("ckpt", &a.model.ckpt)],
        &format!("rho = {}\n", a.rho),
    )
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn gradcheck_cmd(a: GradArgs) -> CliResult {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let results = gradient_suite(a.trials, a.seed)?;
    let mut table = String::from("check\ttrials\tchecked\tskipped\tmax_rel_err\tstatus\n");
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passes(GRAD_TOLERANCE);
        if !ok {
            failed.push(r.name.clone());
        }
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{:.3e}\t{}",
            r.name,
            r.trials,
            r.checked,
            r.skipped,
            r.max_relative_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
        write(&out.join("gradcheck.tsv"), &table)?;
        let common = Common {
            out: out.clone(),
            seed: Some(a.seed),
            threads: None,
            f64: true,
        };
        manifest(
            out,
            "gradcheck",
            &common,
            &[],
            &format!("trials = {}\ntolerance = {GRAD_TOLERANCE:e}\n", a.trials),
        )?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "relative error ≥ {GRAD_TOLERANCE:e} in {}",
            failed.join(", ")
        ))
        .into())
    }
}
