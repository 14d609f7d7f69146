//! `bseg` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{batch, generate, load_dataset, save_dataset, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::manifest::{ManifestRow, RunManifest};
use crate::metrics::{summarize, BinaryMask, MetricSummary};
use crate::net::predict;
use crate::params::ParameterStore;
use crate::pgm::GrayImage;
use crate::train::{evaluate, load_checkpoint, Trainer};

pub const CHECKPOINT_FILE: &str = "model.bckp";
pub const RUN_MANIFEST_FILE: &str = "run.manifest";

#[derive(Debug, Parser)]
#[command(name = "bseg", version, about = "Boundary-aware two-stream segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Gen(GenArgs),
    /// Train and write a checkpoint plus run manifest.
    Train(TrainArgs),
    /// Mean ± std Dice, Jaccard and Hausdorff.
    Eval(EvalArgs),
    /// Write thresholded predicted masks as PGM.
    Predict(ModelArgs),
    /// Write each attention map as a grayscale PGM.
    Attn(AttnArgs),
    /// Finite-difference check of every op and block.
    Gradcheck(Shared),
}

/// Flags shared by every command. Unset flags fall back to the config file,
/// then to defaults.
#[derive(Debug, Default, Args)]
pub struct Shared {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Report the 95th-percentile Hausdorff distance instead of the maximum.
    #[arg(long)]
    pub hd95: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Training dataset directory; generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset for periodic evaluation; the training set otherwise.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Labelled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<sample>.pgm` masks as written by `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

impl Shared {
    /// defaults < `base` (e.g. a run manifest) < config file < flags.
    pub fn resolve(&self, base: Option<&[(String, String)]>) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        for (k, v) in base.unwrap_or_default() {
            c.set(k, v)?;
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_text(&text)?;
        }
        let flags: [(&str, Option<String>); 12] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("size", self.size.map(|v| v.to_string())),
            ("samples", self.samples.map(|v| v.to_string())),
            ("levels", self.levels.map(|v| v.to_string())),
            ("base_channels", self.base_channels.map(|v| v.to_string())),
            ("lambda1", self.lambda1.map(|v| v.to_string())),
            ("lambda2", self.lambda2.map(|v| v.to_string())),
            ("lambda3", self.lambda3.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("hd95", self.hd95.then(|| "true".to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out_dir.as_deref().ok_or_else(|| Error::Config("--out-dir is required".into()))?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(dir)
    }
}

/// Outcome of a parsed invocation.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Attn(a) => cmd_attn(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

/// Parse `args`, run, and report. Returns the process exit code; errors are a
/// single `error[<kind>]: <message>` line on `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            let _ = writeln!(err, "error[usage]: {first}");
            return 2;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {line}", e.kind());
            1
        }
    }
}

fn io_write(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let c = a.shared.resolve(None)?;
    let dir = a.shared.out_dir()?;
    let samples = generate(&c.synth_config(), c.samples)?;
    let names = save_dataset(dir, &samples)?;
    io_write(out, &format!("wrote {} samples to {}\n", names.len(), dir.display()))
}

fn load_samples(dir: &Path) -> Result<(Vec<String>, Vec<Sample>)> {
    let loaded = load_dataset(dir)?;
    if loaded.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dir.display())));
    }
    Ok(loaded.into_iter().unzip())
}

fn check_sizes(c: &RunConfig, samples: &[Sample]) -> Result<()> {
    for s in samples {
        c.spec.check_input(s.height(), s.width()).map_err(|_| {
            Error::Config(format!(
                "sample size {}x{} is incompatible with levels={}",
                s.height(),
                s.width(),
                c.spec.levels
            ))
        })?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let c = a.shared.resolve(None)?;
    let dir = a.shared.out_dir()?.to_path_buf();
    let train = match &a.data {
        Some(d) => load_samples(d)?.1,
        None => generate(&c.synth_config(), c.samples)?,
    };
    let eval = a.eval_data.as_deref().map(load_samples).transpose()?.map(|(_, s)| s);
    check_sizes(&c, &train)?;
    if let Some(e) = &eval {
        check_sizes(&c, e)?;
    }
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut config = c.train_config();
    config.checkpoint_path = Some(ckpt_path.clone());
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(c.spec.clone(), config, load_checkpoint(p)?)?,
        None => Trainer::new(c.spec.clone(), config)?,
    };
    let config_pairs: Vec<(String, String)> = c.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let manifest_path = dir.join(RUN_MANIFEST_FILE);
    let mut manifest = match &a.resume {
        Some(_) if manifest_path.exists() => {
            let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let mut m = RunManifest::parse(&text)?;
            m.rows.retain(|r| r.log.epoch <= trainer.epoch);
            m.config = config_pairs;
            m
        }
        _ => RunManifest::new(c.seed, c.is_no_edge_ablation(), config_pairs),
    };
    let objective = trainer.default_objective();
    let start = Instant::now();
    while !trainer.is_done() {
        let log = trainer.advance(&train, eval.as_deref(), &objective)?;
        let line = match &log.eval {
            Some(m) => format!(
                "epoch {:>4}  loss {:.4}  dice {:.3}  hausdorff {:.3}\n",
                log.epoch, log.loss_total, m.dice.0, m.hausdorff.0
            ),
            None => format!("epoch {:>4}  loss {:.4}\n", log.epoch, log.loss_total),
        };
        io_write(out, &line)?;
        manifest.rows.push(ManifestRow { log, wall_secs: start.elapsed().as_secs_f64() });
        write_atomic(&manifest_path, manifest.to_text().as_bytes())?;
    }
    write_atomic(&manifest_path, manifest.to_text().as_bytes())?;
    io_write(out, &format!("checkpoint {}\nmanifest {}\n", ckpt_path.display(), manifest_path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Config for a saved model: the run manifest beside the checkpoint (if any)
/// is the base layer under the config file and flags.
fn model_config(shared: &Shared, checkpoint: &Path) -> Result<RunConfig> {
    let manifest = checkpoint.with_file_name(RUN_MANIFEST_FILE);
    let base = if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        Some(RunManifest::parse(&text)?.config)
    } else {
        None
    };
    shared.resolve(base.as_deref())
}

fn load_model(shared: &Shared, checkpoint: &Path) -> Result<(RunConfig, ParameterStore)> {
    let c = model_config(shared, checkpoint)?;
    let (_, params, _) = load_checkpoint(checkpoint)?.into_state(&c.spec.layout())?;
    Ok((c, params))
}

/// `0.822±0.176`
pub fn format_pm((mean, std): (f64, f64)) -> String {
    format!("{mean:.3}±{std:.3}")
}

pub fn format_summary(m: &MetricSummary) -> String {
    let mut s = format!(
        "dice {}\njaccard {}\nhausdorff {}\nsamples {}\n",
        format_pm(m.dice),
        format_pm(m.jaccard),
        format_pm(m.hausdorff),
        m.samples
    );
    if m.hausdorff_undefined > 0 {
        s.push_str(&format!("hausdorff_undefined {}\n", m.hausdorff_undefined));
    }
    s
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (names, samples) = load_samples(&a.data)?;
    let summary = if let Some(ckpt) = &a.checkpoint {
        let (c, params) = load_model(&a.shared, ckpt)?;
        check_sizes(&c, &samples)?;
        evaluate(&c.spec, &params, &samples, c.train.hausdorff)?
    } else {
        let c = a.shared.resolve(None)?;
        let dir = a.predictions.as_ref().expect("clap requires one of the two");
        let mut preds = Vec::with_capacity(samples.len());
        let mut truths = Vec::with_capacity(samples.len());
        for (name, s) in names.iter().zip(&samples) {
            let path = dir.join(format!("{}.pgm", stem(name)));
            let img = GrayImage::load(&path)?;
            if img.width != s.width() || img.height != s.height() {
                return Err(Error::shape("eval", format!("{} does not match its label size", path.display())));
            }
            let probs: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
            preds.push(BinaryMask::from_probs(img.height, img.width, &probs)?);
            truths.push(BinaryMask::from_probs(s.height(), s.width(), s.mask.data())?);
        }
        summarize(&preds, &truths, c.train.hausdorff)?
    };
    io_write(out, &format_summary(&summary))
}

fn cmd_predict(a: &ModelArgs, out: &mut dyn Write) -> Result<()> {
    let (c, params) = load_model(&a.shared, &a.checkpoint)?;
    let (names, samples) = load_samples(&a.data)?;
    check_sizes(&c, &samples)?;
    let dir = a.shared.out_dir()?;
    for (name, s) in names.iter().zip(&samples) {
        let pred = predict(&c.spec, &params, &batch(&[s])?.0)?;
        let mask = BinaryMask::from_probs(s.height(), s.width(), pred.y_prob.data())?;
        let bits: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        GrayImage::from_unit(s.width(), s.height(), &bits)?.save(dir.join(format!("{}.pgm", stem(name))))?;
    }
    io_write(out, &format!("wrote {} masks to {}\n", names.len(), dir.display()))
}

fn cmd_attn(a: &AttnArgs, out: &mut dyn Write) -> Result<()> {
    let m = &a.model;
    let (c, params) = load_model(&m.shared, &m.checkpoint)?;
    let (names, samples) = load_samples(&m.data)?;
    check_sizes(&c, &samples)?;
    let dir = m.shared.out_dir()?;
    let n = a.limit.unwrap_or(samples.len()).min(samples.len());
    for (name, s) in names.iter().zip(&samples).take(n) {
        let pred = predict(&c.spec, &params, &batch(&[s])?.0)?;
        for (g, alpha) in pred.alphas.iter().enumerate() {
            let [_, _, ah, aw] = alpha.dims4("attn")?;
            GrayImage::from_unit(aw, ah, alpha.data())?.save(dir.join(format!("{}_alpha{}.pgm", stem(name), g + 1)))?;
        }
    }
    io_write(out, &format!("wrote attention maps for {n} samples to {}\n", dir.display()))
}

fn cmd_gradcheck(a: &Shared, out: &mut dyn Write) -> Result<()> {
    let c = a.resolve(None)?;
    let results = run_suite(c.seed)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        io_write(
            out,
            &format!("{status} {:<28} max_rel_err {:.3e} over {} coords (worst {})\n", r.name, r.max_rel_error, r.checked, r.worst),
        )?;
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    io_write(out, &format!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})\n"))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("{} case(s) above tolerance: {}", failed.len(), failed.join(", "))))
    }
}
