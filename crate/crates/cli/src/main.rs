mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcarn_core::adversarial::{build_feature_extractor, build_multiscale};
use pcarn_core::analysis::{cost_report, eresidual_cost_ratio, efficiency_sweep, HR_HEIGHT, HR_WIDTH};
use pcarn_core::generator::{build_generator, Generator};
use pcarn_core::gradcheck::run_suite;
use pcarn_core::imageio::{corpus_scan, load_png, save_png, ImageBuffer, ImageRecord};
use pcarn_core::metrics::{psnr, ssim};
use pcarn_core::nn::{init_histogram, InitScheme};
use pcarn_core::resample::{degrade_bicubic, upscale_bicubic};
use pcarn_core::training::{train_phase1, train_phase2, LossRecord, TrainingSet};
use pcarn_core::weights::{load_into, save_weights};
use pcarn_core::{Error, Result, Tensor};

use config::{Preset, RunConfig};

const HIST_BINS: usize = 1000;
const HIST_SAMPLES: usize = 100_000;
const RATIO_GROUPS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Cascading residual super-resolution: analysis, training, inference.
#[derive(Parser, Debug)]
#[command(name = "pcarn", version)]
struct Cli {
    /// Config file of `key = value` lines, applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base values for every key not set elsewhere.
    #[arg(long, global = true, value_enum, default_value = "full")]
    preset: Preset,
    /// Override one config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and mult-add report per layer.
    Analyze(AnalyzeArgs),
    /// Pixel-loss training from scratch.
    Train(TrainArgs),
    /// Adversarial + perceptual fine-tuning of trained weights.
    Finetune(FinetuneArgs),
    /// Super-resolve one PNG.
    Sr(SrArgs),
    /// PSNR/SSIM against high-resolution references.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Histograms of initialized weights for each init scheme.
    InitHist(InitHistArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Upscaling factor; repeat for several.
    #[arg(long = "scale", default_value = "4")]
    scales: Vec<u32>,
    /// Output width the costs refer to.
    #[arg(long, default_value_t = HR_WIDTH)]
    width: usize,
    #[arg(long, default_value_t = HR_HEIGHT)]
    height: usize,
    /// Residual-unit groups; values above 1 imply efficient units.
    #[arg(long)]
    group: Option<usize>,
    /// Share residual-unit weights within each cascading block.
    #[arg(long)]
    tied: bool,
    /// Use grouped+pointwise residual units.
    #[arg(long)]
    efficient: bool,
    /// Emit CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
    /// Also compare every group/tying variant.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of PNG training images.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Where to write the trained weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Per-step loss log (default: `<weights>.log`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pixel-trained weights to start from.
    #[arg(long)]
    weights_in: Option<PathBuf>,
    #[command(flatten)]
    out: TrainArgs,
}

#[derive(Args, Debug)]
struct SrArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    scale: u32,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of high-resolution reference PNGs.
    #[arg(long)]
    hr: PathBuf,
    /// Low-resolution inputs matched to `--hr` by file name; by default
    /// they are made by bicubic degradation.
    #[arg(long, conflicts_with = "sr")]
    lr: Option<PathBuf>,
    /// Score existing super-resolved PNGs (matched by name) instead of
    /// running a model.
    #[arg(long)]
    sr: Option<PathBuf>,
    #[arg(long, required_unless_present = "sr")]
    weights: Option<PathBuf>,
    #[arg(long)]
    scale: u32,
}

#[derive(Args, Debug)]
struct InitHistArgs {
    /// Only this scheme, e.g. `0.1xN(2/F)`; default all six.
    #[arg(long)]
    scheme: Option<InitScheme>,
    /// Write one file per scheme here instead of printing.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage, 2 data, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidSpec { .. } | Error::Config(_) | Error::TieConflict { .. } => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn sidecar(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Preset, then `--config` (or the sidecar of `weights`), then `--set`,
/// then `--seed`.
fn load_config(cli: &Cli, weights: Option<&Path>) -> Result<RunConfig> {
    let file = match (&cli.config, weights) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(w)) if sidecar(w).exists() => Some(sidecar(w)),
        _ => None,
    };
    let mut cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(cli.preset, &text)?
        }
        None => RunConfig::preset(cli.preset),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let weights_hint = match &cli.command {
        Some(Command::Finetune(a)) => a.weights_in.clone(),
        Some(Command::Sr(a)) => Some(a.weights.clone()),
        Some(Command::Eval(a)) => a.weights.clone(),
        _ => None,
    };
    let mut cfg = load_config(&cli, weights_hint.as_deref())?;
    if let Some(Command::Analyze(a)) = &cli.command {
        if let Some(g) = a.group {
            cfg.model.group = g;
            cfg.model.efficient = g > 1;
        }
        cfg.model.tied |= a.tied;
        cfg.model.efficient |= a.efficient;
    }
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no command given (see --help)".into()));
    };
    eprintln!("seed = {}", cfg.train.seed);
    let outcome = match command {
        Command::Analyze(a) => cmd_analyze(&cfg, &a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Finetune(a) => cmd_finetune(cfg, a),
        Command::Sr(a) => cmd_sr(&cfg, &a),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Gradcheck => {
            if !cmd_gradcheck(cfg.train.seed)? {
                return Ok(ExitCode::from(3));
            }
            Ok(())
        }
        Command::InitHist(a) => cmd_init_hist(&cfg, &a),
    };
    outcome.map(|()| ExitCode::SUCCESS)
}

fn cmd_analyze(cfg: &RunConfig, a: &AnalyzeArgs) -> Result<()> {
    cfg.model.validate()?;
    let gen: Generator<f32> = build_generator(&cfg.model, cfg.init, cfg.train.seed)?;
    for &scale in &a.scales {
        let report = cost_report(&gen, scale, a.width, a.height)?;
        if a.csv {
            print!("{}", report.render_csv());
        } else {
            println!("model {}", cfg.model.label());
            print!("{}", report.render_table());
            println!();
        }
    }
    if a.csv {
        return Ok(());
    }
    println!("residual-unit cost ratio, 3x3 kernels");
    println!("{:>6}  {:>8}  {:>9}", "groups", "ratio", "reduction");
    for g in RATIO_GROUPS {
        let r = eresidual_cost_ratio(3, g);
        println!("{g:>6}  {r:>8.4}  {:>8.2}x", 1.0 / r);
    }
    if a.sweep {
        let scale = a.scales[0];
        println!();
        println!("variants at x{scale}");
        println!("{:<8}  {:>10}  {:>16}", "model", "params", "mult_adds");
        for row in efficiency_sweep(&cfg.model, &RATIO_GROUPS, scale, a.width, a.height)? {
            println!("{:<8}  {:>10}  {:>16}", row.label, row.params, row.mult_adds);
        }
    }
    Ok(())
}

/// Line-buffered loss log: every record is on disk before the next step.
struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(LossLog {
            out: BufWriter::new(File::create(path)?),
        })
    }

    fn write(&mut self, rec: &LossRecord) -> Result<()> {
        writeln!(self.out, "{rec}")?;
        self.out.flush()?;
        Ok(())
    }
}

fn progress(rec: &LossRecord, total: u64) {
    if rec.step % 100 == 0 || rec.step + 1 == total {
        log::info!("step {}/{total} {rec}", rec.step + 1);
    }
}

fn load_training_set(cfg: &RunConfig, patch: usize) -> Result<TrainingSet> {
    let dir = cfg
        .paths
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus directory (use --corpus or paths.corpus)".into()))?;
    let max_scale = cfg.train.scales.iter().copied().max().unwrap_or(1) as usize;
    let corpus = corpus_scan(dir, patch * max_scale)?;
    println!("corpus: {} images, {} skipped", corpus.len(), corpus.skipped.len());
    TrainingSet::from_corpus(&corpus)
}

fn output_paths(cfg: &mut RunConfig, a: TrainArgs) -> Result<(PathBuf, PathBuf)> {
    if a.corpus.is_some() {
        cfg.paths.corpus = a.corpus;
    }
    if a.weights.is_some() {
        cfg.paths.weights_out = a.weights;
    }
    if a.log.is_some() {
        cfg.paths.log = a.log;
    }
    let weights = cfg
        .paths
        .weights_out
        .clone()
        .ok_or_else(|| Error::Config("no output weights path (use --weights or paths.weights_out)".into()))?;
    let log = cfg.paths.log.clone().unwrap_or_else(|| {
        let mut s = weights.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    });
    cfg.paths.log = Some(log.clone());
    Ok((weights, log))
}

fn finish_run(gen: &Generator<f32>, cfg: &RunConfig, weights: &Path, log: &Path) -> Result<()> {
    save_weights(&gen.store, weights)?;
    std::fs::write(sidecar(weights), cfg.dump())?;
    println!("weights: {} ({} params)", weights.display(), gen.num_params());
    println!("log: {}", log.display());
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let (weights, log_path) = output_paths(&mut cfg, a)?;
    cfg.validate()?;
    let set = load_training_set(&cfg, cfg.train.patch)?;
    let mut gen: Generator<f32> = build_generator(&cfg.model, cfg.init, cfg.train.seed)?;
    let mut log = LossLog::create(&log_path)?;
    let total = cfg.train.phase1_steps;
    train_phase1(&mut gen, &cfg.train, &set, &mut |rec| {
        progress(rec, total);
        log.write(rec)
    })?;
    finish_run(&gen, &cfg, &weights, &log_path)
}

fn cmd_finetune(mut cfg: RunConfig, a: FinetuneArgs) -> Result<()> {
    if a.weights_in.is_some() {
        cfg.paths.weights_in = a.weights_in;
    }
    let input = cfg
        .paths
        .weights_in
        .clone()
        .ok_or_else(|| Error::Config("fine-tuning needs input weights (use --weights-in)".into()))?;
    let (weights, log_path) = output_paths(&mut cfg, a.out)?;
    cfg.validate()?;
    let set = load_training_set(&cfg, cfg.train.adv_patch)?;
    let mut gen: Generator<f32> = build_generator(&cfg.model, cfg.init, cfg.train.seed)?;
    load_into(&mut gen.store, &input)?;
    let mut msd = build_multiscale(&cfg.adv, cfg.train.seed.wrapping_add(1))?;
    let fx = build_feature_extractor(&cfg.features)?;
    let mut log = LossLog::create(&log_path)?;
    let total = cfg.train.phase2_steps;
    train_phase2(&mut gen, &mut msd, &fx, &cfg.train, &set, &mut |rec| {
        progress(rec, total);
        if let Some(d) = &rec.disc {
            log::debug!("d_loss {:.6} prob [{:.6}, {:.6}] extents {:?}", d.d_loss, d.min_prob, d.max_prob, d.extents);
        }
        log.write(rec)
    })?;
    finish_run(&gen, &cfg, &weights, &log_path)
}

fn load_model(cfg: &RunConfig, weights: &Path, scale: u32) -> Result<Generator<f32>> {
    cfg.model.validate()?;
    let mut gen: Generator<f32> = build_generator(&cfg.model, cfg.init, cfg.train.seed)?;
    load_into(&mut gen.store, weights)?;
    gen.head(scale)?;
    Ok(gen)
}

fn super_resolve(gen: &Generator<f32>, lr: &Tensor<f32>, scale: u32) -> Result<Tensor<f32>> {
    Ok(gen.infer(lr, scale)?.map(|v| v.clamp(0.0, 1.0)))
}

fn cmd_sr(cfg: &RunConfig, a: &SrArgs) -> Result<()> {
    let gen = load_model(cfg, &a.weights, a.scale)?;
    let input = load_png(&a.input)?;
    let sr = super_resolve(&gen, &input.to_tensor(), a.scale)?;
    let out = ImageBuffer::from_tensor(&sr)?;
    save_png(&out, &a.output)?;
    println!(
        "{}x{} -> {}x{}: {}",
        input.width,
        input.height,
        out.width,
        out.height,
        a.output.display()
    );
    Ok(())
}

fn file_name(r: &ImageRecord) -> String {
    r.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Look up `name` in a second directory.
fn partner(dir: &Path, name: &str) -> Result<Tensor<f32>> {
    Ok(load_png(&dir.join(name))?.to_tensor())
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let r = a.scale as usize;
    let hr_set = corpus_scan(&a.hr, r)?;
    if hr_set.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} holds no usable PNG", a.hr.display())));
    }
    let gen = match &a.weights {
        Some(w) if a.sr.is_none() => Some(load_model(cfg, w, a.scale)?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(hr_set.len());
    for rec in &hr_set.images {
        let name = file_name(rec);
        let full = rec.image.to_tensor::<f32>();
        let s = full.shape();
        let hr = full.crop(0, 0, s.h - s.h % r, s.w - s.w % r)?;
        let lr = match &a.lr {
            Some(dir) => partner(dir, &name)?,
            None => degrade_bicubic(&hr, r)?,
        };
        let ls = lr.shape();
        if (ls.h * r, ls.w * r) != (hr.shape().h, hr.shape().w) {
            return Err(Error::Image {
                path: a.lr.as_deref().unwrap_or(&a.hr).join(&name),
                reason: format!("low-resolution image is {}x{}, expected 1/{r} of the reference", ls.w, ls.h),
            });
        }
        let sr = match (&a.sr, &gen) {
            (Some(dir), _) => partner(dir, &name)?,
            (None, Some(g)) => super_resolve(g, &lr, a.scale)?,
            (None, None) => unreachable!("weights are required without --sr"),
        };
        if sr.shape() != hr.shape() {
            return Err(Error::Image {
                path: PathBuf::from(&name),
                reason: format!("output shape {} does not match reference {}", sr.shape(), hr.shape()),
            });
        }
        let bic = upscale_bicubic(&lr, r)?.map(|v| v.clamp(0.0, 1.0));
        rows.push((
            name,
            [psnr(&sr, &hr, 1.0)?, ssim(&sr, &hr, 1.0)?, psnr(&bic, &hr, 1.0)?, ssim(&bic, &hr, 1.0)?],
        ));
    }
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(5);
    println!("{:<width$}  {:>9}  {:>7}  {:>12}  {:>12}", "image", "psnr", "ssim", "bicubic_psnr", "bicubic_ssim");
    let mut mean = [0.0f64; 4];
    for (name, m) in &rows {
        println!("{:<width$}  {:>9.4}  {:>7.4}  {:>12.4}  {:>12.4}", name, m[0], m[1], m[2], m[3]);
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc += v / rows.len() as f64;
        }
    }
    println!("{:<width$}  {:>9.4}  {:>7.4}  {:>12.4}  {:>12.4}", "mean", mean[0], mean[1], mean[2], mean[3]);
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let results = run_suite(seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

/// `1.0xU(1/F)` -> `1.0xU_1_F_`.
fn scheme_file_stem(s: &InitScheme) -> String {
    s.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_init_hist(cfg: &RunConfig, a: &InitHistArgs) -> Result<()> {
    cfg.model.validate()?;
    let schemes: Vec<InitScheme> = match a.scheme {
        Some(s) => vec![s],
        None => InitScheme::all().to_vec(),
    };
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for scheme in schemes {
        let gen: Generator<f32> = build_generator(&cfg.model, scheme, cfg.train.seed)?;
        let hist = init_histogram(&gen.store, HIST_BINS, HIST_SAMPLES, cfg.train.seed)?;
        let summary = format!(
            "{scheme}: {} values, range [{:.6e}, {:.6e}], mean {:.3e}",
            hist.total(),
            hist.min,
            hist.max,
            hist.mean()
        );
        match &a.out_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.hist", scheme_file_stem(&scheme)));
                std::fs::write(&path, hist.render())?;
                println!("{summary} -> {}", path.display());
            }
            None => {
                println!("# {summary}");
                print!("{}", hist.render());
            }
        }
    }
    Ok(())
}
