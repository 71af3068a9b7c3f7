//! `befd`: synthesize data, inspect edge maps, train, predict, evaluate and
//! self-verify the BEFD-UNet pipeline.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use befd_core::data::raster::{decode_raster, is_raster, visualize, write_raster};
use befd_core::data::{
    attention_input, binarize, prepare_sample, read_pnm, synth_generate, write_pgm, ClaheParams, DatasetManifest, Split,
};
use befd_core::edge::{attention_transform, sobel};
use befd_core::metrics::{intersect_masks, thin_vessel_mask, write_csv, PooledEvaluator};
use befd_core::train::{predict_probabilities, train_loop, Checkpoint};
use befd_core::verify::{self, Suite};
use befd_core::{fault, AttentionParams, Field, NetworkVariant};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "befd", version, about = "Vessel segmentation with edge attention and feature denoising")]
struct Cli {
    /// Worker threads for tensor ops; falls back to BEFD_THREADS, then 1.
    #[arg(long, global = true, env = "BEFD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic vessel dataset and its manifest.
    Synth(SynthArgs),
    /// Compute the Sobel edge-attention map of an image.
    Edgemap(EdgemapArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Predict a vessel probability map with a checkpoint.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run the gradient and oracle verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    count: u32,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split tag written into the manifest.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EdgemapArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    lambda_min: f64,
    #[arg(long, default_value_t = 5.0)]
    lambda_max: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Float raster of attention weights.
    #[arg(long)]
    out_raw: Option<PathBuf>,
    /// Min-max scaled PGM of the same map.
    #[arg(long)]
    out_vis: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// unet, be-unet, fd-unet or befd-unet.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Float raster of probabilities.
    #[arg(long)]
    out_prob: Option<PathBuf>,
    /// PGM with 255 where probability exceeds the threshold.
    #[arg(long)]
    out_bin: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Fail unless the checkpoint holds this variant.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Probability maps (float raster, or PGM read as value/255); repeatable.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth PGMs, paired with --pred in order.
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Evaluation masks, paired in order.
    #[arg(long)]
    mask: Vec<PathBuf>,
    /// Restrict evaluation to thin ground-truth vessels (width 1-2 px).
    #[arg(long)]
    thin_only: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// grad, oracle or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = verify::DEFAULT_SEEDS)]
    seeds: usize,
    /// Deliberately break one backward rule to test the harness.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Usage errors exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<befd_core::Error> for Failure {
    fn from(e: befd_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(1).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start {threads} worker threads: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Edgemap(a) => cmd_edgemap(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let split: Split = a.split.parse().map_err(|e: befd_core::Error| usage(e.to_string()))?;
    if a.height < 32 || a.width < 32 {
        return Err(usage(format!("--height and --width must be at least 32, got {}x{}", a.height, a.width)));
    }
    synth_generate(a.count as usize, a.height, a.width, a.seed, split, &a.out)?;
    println!("{}", a.out.join("manifest.txt").display());
    Ok(())
}

fn cmd_edgemap(a: EdgemapArgs) -> CmdResult {
    let params = AttentionParams { lambda_min: a.lambda_min, lambda_max: a.lambda_max, alpha: a.alpha, beta: a.beta };
    params.validate().map_err(|e| usage(e.to_string()))?;
    eprintln!(
        "edge attention: lambda_min={} lambda_max={} alpha={} beta={}",
        params.lambda_min, params.lambda_max, params.alpha, params.beta
    );
    let image = read_pnm(&a.input)?;
    let field = attention_input(&image, &ClaheParams::default())?;
    let map = attention_transform(&sobel(&field), &params);
    if let Some(p) = &a.out_raw {
        write_raster(&map.weights.map(|v| v as f32), p)?;
    }
    if let Some(p) = &a.out_vis {
        write_pgm(&visualize(&map.weights), p)?;
    }
    let (lo, hi) = map.weights.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    println!("{}x{} weights in [{lo}, {hi}]", map.weights.width(), map.weights.height());
    Ok(())
}

fn parse_variant(s: &str) -> Result<NetworkVariant, Failure> {
    s.parse().map_err(|e: befd_core::Error| usage(e.to_string()))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut rc = RunConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        rc.apply_text(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    let t = &mut rc.train;
    if let Some(v) = &a.variant {
        t.variant = parse_variant(v)?;
    }
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.base_channels {
        t.unet.base_channels = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(d) = a.data {
        rc.data = Some(d);
    }
    let t = &rc.train;
    t.validate().map_err(|e| usage(e.to_string()))?;
    let data = rc.data.as_ref().ok_or_else(|| usage("no training manifest: pass --data or set data.manifest"))?;
    let manifest = DatasetManifest::read(data).with_context(|| format!("loading manifest {}", data.display()))?;

    println!(
        "variant={} depth={} base_channels={} be_levels={:?} fd_skips={:?}",
        t.variant, t.unet.depth, t.unet.base_channels, t.unet.be_levels, t.unet.fd_skips
    );
    println!(
        "iterations={} batch_size={} lr={} seed={} samples={}",
        t.iterations,
        t.batch_size,
        t.learning_rate,
        t.seed,
        manifest.entries.len()
    );
    println!("iter\tloss\tseconds");
    let out = train_loop(t, &manifest, &a.out, &mut |line| println!("{}", line.to_text()))?;
    if let Some(p) = out.final_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("--threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let ckpt = Checkpoint::<f32>::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    if let Some(v) = &a.variant {
        let v = parse_variant(v)?;
        ckpt.check_compatible(&ckpt.unet, v)?;
    }
    let mut net = ckpt.to_network()?;
    let image = read_pnm(&a.input)?;
    let attention = net.variant().boundary_enhancement().then_some(&ckpt.attention);
    let sample = prepare_sample(&image, None, None, &ckpt.clahe, net.config().divisor(), attention)?;
    let prob = predict_probabilities(&mut net, &sample)?;
    if let Some(p) = &a.out_prob {
        write_raster(&prob, p)?;
    }
    if let Some(p) = &a.out_bin {
        write_pgm(&prob.map(|v| if f64::from(v) > a.threshold { 255 } else { 0 }), p)?;
    }
    let fg = prob.data().iter().filter(|&&v| f64::from(v) > a.threshold).count();
    println!("{}x{} predicted, {fg} foreground pixels at threshold {}", prob.width(), prob.height(), a.threshold);
    Ok(())
}

fn read_prediction(path: &Path) -> anyhow::Result<Field<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if is_raster(&bytes) {
        return Ok(decode_raster(&bytes).with_context(|| path.display().to_string())?);
    }
    let img = befd_core::data::decode_pnm(&bytes).with_context(|| path.display().to_string())?;
    Ok(img.channel(0).map(|v| v as f32 / 255.0))
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if a.pred.len() != a.gt.len() {
        return Err(usage(format!("{} --pred files but {} --gt files", a.pred.len(), a.gt.len())));
    }
    if !a.mask.is_empty() && a.mask.len() != a.gt.len() {
        return Err(usage(format!("{} --mask files for {} images", a.mask.len(), a.gt.len())));
    }
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(usage(format!("--threshold must lie in (0, 1), got {}", a.threshold)));
    }
    let mut pooled = PooledEvaluator::new();
    let mut rows = Vec::new();
    for (i, (pp, gp)) in a.pred.iter().zip(&a.gt).enumerate() {
        let pred = read_prediction(pp)?;
        let gt = binarize(&read_pnm(gp)?);
        let mut mask = match a.mask.get(i) {
            Some(m) => Some(binarize(&read_pnm(m)?)),
            None => None,
        };
        if pred.dims() != gt.dims() {
            return Err(Failure::Runtime(anyhow::anyhow!(
                "{} is {}x{} but {} is {}x{}",
                pp.display(),
                pred.width(),
                pred.height(),
                gp.display(),
                gt.width(),
                gt.height()
            )));
        }
        if a.thin_only {
            let thin = thin_vessel_mask(&gt);
            mask = Some(match mask {
                Some(m) => intersect_masks(&m, &thin).with_context(|| format!("mask for {}", gp.display()))?,
                None => thin,
            });
        }
        let report = pooled
            .add(&pred, &gt, mask.as_ref(), a.threshold)
            .with_context(|| format!("scoring {} against {}", pp.display(), gp.display()))?;
        let id = pp.file_stem().map_or_else(|| i.to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((id, report));
    }
    let total = pooled.finish()?;
    let mut text = Vec::new();
    write_csv(&mut text, &rows, &total).context("formatting CSV")?;
    if let Some(p) = &a.out_csv {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", String::from_utf8_lossy(&text));
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let suite: Suite = a.suite.parse().map_err(|e: befd_core::Error| usage(e.to_string()))?;
    match a.inject_fault.as_deref() {
        None => {}
        Some("conv2d") => fault::perturb_conv2d_backward(true),
        Some(other) => return Err(usage(format!("unknown fault `{other}` (only conv2d)"))),
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let results = verify::run(suite, a.seeds);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("failed checks: {}", failed.join(", "))))
    }
}
