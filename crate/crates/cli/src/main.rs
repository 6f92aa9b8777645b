//! `retoucher`: dataset synthesis, training, retouching, ablations, mask
//! dumps, strength sweeps and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use retouch_core::bafs::dump_masks;
use retouch_core::checkpoint::{import_external_checkpoint, load_model, save_model, NameMap};
use retouch_core::data::{augment, dataset_build, Dataset, ImageTensor, PairedSample, Split};
use retouch_core::eval::{evaluate_samples, mean_abs_diff, MetricReport};
use retouch_core::perceptual::ConvPyramid;
use retouch_core::train::Trainer;
use retouch_core::{BlendMode, Error, Retoucher, RunConfig, StrengthSpec};

/// Largest accepted retouching strength.
const MAX_STRENGTH: f64 = 4.0;
const HOME_VAR: &str = "RETOUCHER_HOME";

#[derive(Parser, Debug)]
#[command(name = "retoucher", version, about = "Blemish-aware portrait retouching")]
struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    SynthData(SynthArgs),
    /// Blend a raw/clean pair with a residual factor.
    Augment(AugmentArgs),
    /// Train a retoucher.
    Train(TrainArgs),
    /// Retouch one image.
    Retouch(RetouchArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate blend-mode variants over several seeds.
    Ablate(AblateArgs),
    /// Dump the spatial and channel masks for one image.
    Masks(MasksArgs),
    /// Retouch one image at several strengths.
    StrengthSweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Side length; defaults to the model resolution.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for the model, metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    blend_mode: Option<BlendMode>,
    /// Resume from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Model checkpoint; defaults to the configured path or
    /// `$RETOUCHER_HOME/model.safetensors`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetouchArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Report path stem; `.json` and `.csv` are written.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "concat,spatial,channel,sc")]
    modes: Vec<BlendMode>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct MasksArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "masks")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5,2")]
    values: Vec<f64>,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

fn home() -> PathBuf {
    std::env::var_os(HOME_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(config)
}

fn check_strength(s: f64) -> anyhow::Result<StrengthSpec> {
    if !(0.0..=MAX_STRENGTH).contains(&s) {
        return Err(Error::Argument(format!("strength {s} outside [0, {MAX_STRENGTH}]")).into());
    }
    Ok(StrengthSpec::new(s)?)
}

fn log_resolved(config: &RunConfig, seed: u64) -> anyhow::Result<()> {
    info!("resolved config: {}", serde_json::to_string(config)?);
    info!("seed: {seed}");
    Ok(())
}

fn require(path: Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {what} given (flag or config)")).into())
}

fn model_path(arg: &ModelArg, config: &RunConfig) -> PathBuf {
    arg.checkpoint
        .clone()
        .or_else(|| config.paths.checkpoint.clone())
        .unwrap_or_else(|| home().join("model.safetensors"))
}

fn load_input(model: &Retoucher<f32>, path: &Path) -> anyhow::Result<ImageTensor> {
    let img = ImageTensor::load_png(path)?;
    let r = model.resolution();
    if img.width() != r || img.height() != r {
        bail!(Error::Argument(format!(
            "{} is {}x{}, the model needs {r}x{r}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

fn retouch_one(model: &Retoucher<f32>, img: &ImageTensor, s: &StrengthSpec) -> anyhow::Result<ImageTensor> {
    let (out, _) = model.retouch(&ImageTensor::stack(&[img])?, s, false)?;
    Ok(ImageTensor::from_batch(&out, 0)?)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth_data(mut config: RunConfig, args: SynthArgs) -> anyhow::Result<()> {
    if let Some(n) = args.samples {
        config.data.samples = n;
    }
    if let Some(s) = args.seed {
        config.data.seed = s;
    }
    config.validate()?;
    let out = require(args.out.or(config.paths.dataset.clone()), "dataset output directory")?;
    let resolution = args.resolution.unwrap_or_else(|| config.model.resolution());
    log_resolved(&config, config.data.seed)?;
    let manifest = dataset_build(config.data.samples, &config.blemish, config.data.seed, resolution, &out)?;
    let test = manifest.iter().filter(|e| e.split == Split::Test).count();
    println!("wrote {} pairs ({} train / {test} test) to {}", manifest.len(), manifest.len() - test, out.display());
    Ok(())
}

fn augment_cmd(args: AugmentArgs) -> anyhow::Result<()> {
    let raw = ImageTensor::load_png(&args.raw)?;
    let clean = ImageTensor::load_png(&args.clean)?;
    let sample = PairedSample::new("cli", raw, clean, None)?;
    augment(&sample, args.lambda)?.save_png(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_training_data(dir: &Path) -> anyhow::Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let ds = Dataset::open(dir)?;
    Ok((ds.load_split(Split::Train)?, ds.load_split(Split::Test)?))
}

/// Trains one model into `out`; returns it.
fn train_into(config: &RunConfig, train: &[PairedSample], out: &Path, resume: Option<&Path>) -> anyhow::Result<Retoucher<f32>> {
    create_dir(out)?;
    fs::write(out.join("resolved-config.json"), config.to_json()? + "\n")?;
    let mut trainer = match resume {
        Some(state) => {
            let t = Trainer::load_state(state)?;
            info!("resuming from {} at step {}", state.display(), t.step());
            t
        }
        None => {
            let mut model = Retoucher::new(config.model.clone(), config.train.seed)?;
            if let Some(weights) = &config.paths.gp_weights {
                let map = match &config.paths.name_map {
                    Some(p) => NameMap::load(p)?,
                    None => NameMap::stylegan2_pytorch(&config.model.gp),
                };
                let gp = import_external_checkpoint(weights, &map, &config.model.gp)?;
                for (name, a) in gp.iter() {
                    model.params_mut().insert(name, a.clone());
                }
                info!("initialized backbone from {} ({})", weights.display(), map.id);
            }
            Trainer::with_model(model, config.train.clone())?
        }
    };
    let log_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(if resume.is_some() {
        File::options().append(true).create(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    });
    let ckpt = (config.train.checkpoint_every > 0).then_some(out);
    trainer.fit(train, Some(&mut log), ckpt)?;
    log.flush()?;
    trainer.save_state(&out.join("state-final.safetensors"))?;
    let model = trainer.into_model();
    save_model(&out.join("model.safetensors"), &model)?;
    Ok(model)
}

fn train_cmd(mut config: RunConfig, args: TrainArgs) -> anyhow::Result<()> {
    if let Some(s) = args.steps {
        config.train.steps = s;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    if let Some(m) = args.blend_mode {
        config.model.blend_mode = m;
    }
    config.validate()?;
    let dataset = require(args.dataset.or(config.paths.dataset.clone()), "dataset")?;
    let out = args.out.or(config.paths.output.clone()).unwrap_or_else(|| home().join("run"));
    log_resolved(&config, config.train.seed)?;
    let (train, test) = load_training_data(&dataset)?;
    let model = train_into(&config, &train, &out, args.resume.as_deref())?;
    if !test.is_empty() {
        let report = evaluate_samples(&model, &test, &ConvPyramid::default(), &StrengthSpec::default(), &config.to_json()?)?;
        report.write(&out.join("eval"))?;
        print_summary("test", &report);
    }
    println!("model written to {}", out.join("model.safetensors").display());
    Ok(())
}

fn print_summary(label: &str, r: &MetricReport) {
    println!(
        "{label}: model psnr {:.3} dB ssim {:.4} perc {:.5} changed {:.3} | input psnr {:.3} dB ssim {:.4}",
        r.model.mean.psnr_db,
        r.model.mean.ssim,
        r.model.mean.perc_dist,
        r.model.mean.changed_ratio,
        r.baseline.mean.psnr_db,
        r.baseline.mean.ssim
    );
}

fn retouch_cmd(config: RunConfig, args: RetouchArgs) -> anyhow::Result<()> {
    let strength = check_strength(args.strength)?;
    let model = load_model(&model_path(&args.model, &config))?;
    let img = load_input(&model, &args.input)?;
    retouch_one(&model, &img, &strength)?.save_png(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn evaluate_cmd(config: RunConfig, args: EvaluateArgs) -> anyhow::Result<()> {
    let strength = check_strength(args.strength)?;
    let model = load_model(&model_path(&args.model, &config))?;
    let dataset = require(args.dataset.or(config.paths.dataset.clone()), "dataset")?;
    let samples = Dataset::open(&dataset)?.load_split(args.split)?;
    let source = format!("{}|{}|{}", serde_json::to_string(model.config())?, dataset.display(), args.split);
    let report = evaluate_samples(&model, &samples, &ConvPyramid::default(), &strength, &source)?;
    let (json, csv) = report.write(&args.report)?;
    print_summary(&args.split.to_string(), &report);
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn ablate_cmd(mut config: RunConfig, args: AblateArgs) -> anyhow::Result<()> {
    if let Some(s) = args.steps {
        config.train.steps = s;
    }
    config.validate()?;
    let dataset = require(args.dataset.or(config.paths.dataset.clone()), "dataset")?;
    let out = args.out.or(config.paths.output.clone()).unwrap_or_else(|| home().join("ablate"));
    create_dir(&out)?;
    let (train, test) = load_training_data(&dataset)?;
    if test.is_empty() {
        bail!(Error::Config("ablation needs a non-empty test split".into()));
    }
    let extractor = ConvPyramid::default();
    let mut runs = String::from("mode,seed,psnr_db,ssim,perc_dist,changed_ratio\n");
    let mut table = String::from("method,psnr_db,ssim,perc_dist,changed_ratio,seeds\n");
    for mode in &args.modes {
        let mut sums = [0.0f64; 4];
        for &seed in &args.seeds {
            let mut c = config.clone();
            c.model.blend_mode = *mode;
            c.train.seed = seed;
            log_resolved(&c, seed)?;
            let model = train_into(&c, &train, &out.join(format!("{mode}-seed{seed}")), None)?;
            let r = evaluate_samples(&model, &test, &extractor, &StrengthSpec::default(), &c.to_json()?)?;
            let m = &r.model.mean;
            runs += &format!("{mode},{seed},{:.6},{:.6},{:.6},{:.6}\n", m.psnr_db, m.ssim, m.perc_dist, m.changed_ratio);
            for (s, v) in sums.iter_mut().zip([m.psnr_db, m.ssim, m.perc_dist, m.changed_ratio]) {
                *s += v;
            }
            print_summary(&format!("{mode} seed {seed}"), &r);
        }
        let k = args.seeds.len() as f64;
        table += &format!(
            "{mode},{:.6},{:.6},{:.6},{:.6},{}\n",
            sums[0] / k,
            sums[1] / k,
            sums[2] / k,
            sums[3] / k,
            args.seeds.len()
        );
    }
    fs::write(out.join("ablation_runs.csv"), runs)?;
    fs::write(out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn masks_cmd(config: RunConfig, args: MasksArgs) -> anyhow::Result<()> {
    let model = load_model(&model_path(&args.model, &config))?;
    let img = load_input(&model, &args.input)?;
    let (_, diag) = model.retouch(&ImageTensor::stack(&[&img])?, &StrengthSpec::default(), false)?;
    let written = dump_masks(&diag.spatial_masks, &diag.channel_masks, 0, &args.out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn sweep_cmd(config: RunConfig, args: SweepArgs) -> anyhow::Result<()> {
    let strengths = args.values.iter().map(|&s| check_strength(s)).collect::<anyhow::Result<Vec<_>>>()?;
    let model = load_model(&model_path(&args.model, &config))?;
    let img = load_input(&model, &args.input)?;
    create_dir(&args.out)?;
    let plain = retouch_one(&model, &img, &StrengthSpec::default())?;
    let floor = retouch_one(&model, &img, &StrengthSpec::new(0.0)?)?;
    let mut summary = Vec::new();
    for s in strengths {
        let out = retouch_one(&model, &img, &s)?;
        let path = args.out.join(format!("strength_{}.png", s.factor));
        out.save_png(&path)?;
        let deviation = mean_abs_diff(out.array(), floor.array())?;
        let equals_plain = out == plain;
        if s.is_identity() && !equals_plain {
            bail!("strength 1 output differs from the plain retouch");
        }
        println!("s={} deviation-from-s0 {deviation:.6} -> {}", s.factor, path.display());
        summary.push(serde_json::json!({ "strength": s.factor, "deviation_from_s0": deviation, "path": path, "equals_plain": equals_plain }));
    }
    fs::write(args.out.join("sweep.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData(a) => synth_data(config, a),
        Command::Augment(a) => augment_cmd(a),
        Command::Train(a) => train_cmd(config, a),
        Command::Retouch(a) => retouch_cmd(config, a),
        Command::Evaluate(a) => evaluate_cmd(config, a),
        Command::Ablate(a) => ablate_cmd(config, a),
        Command::Masks(a) => masks_cmd(config, a),
        Command::StrengthSweep(a) => sweep_cmd(config, a),
    }
}

/// Configuration and argument problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Argument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strength_bounds() {
        assert!(check_strength(0.0).is_ok());
        assert!(check_strength(4.0).is_ok());
        assert_eq!(exit_code(&check_strength(4.5).unwrap_err()), 2);
        assert_eq!(exit_code(&check_strength(-1.0).unwrap_err()), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn blend_mode_flags_parse() {
        let cli = Cli::try_parse_from(["retoucher", "ablate", "--modes", "concat,sc", "--seeds", "0,1"]).unwrap();
        match cli.command {
            Command::Ablate(a) => {
                assert_eq!(a.modes, vec![BlendMode::Concat, BlendMode::SpatialChannel]);
                assert_eq!(a.seeds, vec![0, 1]);
            }
            other => panic!("{other:?}"),
        }
    }
}
