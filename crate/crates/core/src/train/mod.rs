//! Optimization: BCE on logits, Adam, the training loop, and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::ClaheParams;
use crate::data::DatasetManifest;
use crate::data::{augment_flip, crop_back, load_sample, Sample};
use crate::edge::{AttentionMap, AttentionParams};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::ops::norm::Mode;
use crate::ops::pointwise::sigmoid;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unet::{Network, NetworkVariant, UNetConfig};

/// Iterations between log lines.
pub const LOG_EVERY: usize = 50;
/// Mixed into the seed for the batch/augmentation stream so it differs
/// from the initialization stream.
const DATA_STREAM: u64 = 0x0da7_a5ee_d000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub variant: NetworkVariant,
    pub unet: UNetConfig,
    pub attention: AttentionParams,
    pub clahe: ClaheParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            batch_size: 8,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            variant: NetworkVariant::BefdUnet,
            unet: UNetConfig::default(),
            attention: AttentionParams::default(),
            clahe: ClaheParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        self.unet.validate()?;
        self.attention.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub iteration: usize,
    /// Mean loss since the previous line.
    pub loss: f64,
    pub seconds: f64,
}

impl LogLine {
    pub fn to_text(&self) -> String {
        format!("{}\t{:.6}\t{:.3}", self.iteration, self.loss, self.seconds)
    }
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub adam: AdamState<f32>,
    /// Loss of every iteration, in order.
    pub losses: Vec<f64>,
    pub log: Vec<LogLine>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint<f32> {
        Checkpoint::from_network(
            &self.network,
            config.attention,
            config.clahe,
            config.seed,
            self.losses.len() as u64,
            Some(&self.adam),
        )
    }
}

/// Loads every manifest record, computing attention maps when the variant
/// uses boundary enhancement.
pub fn load_samples(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Vec<Sample>> {
    let attention = config.variant.boundary_enhancement().then_some(&config.attention);
    let divisor = config.unet.divisor();
    manifest
        .entries
        .par_iter()
        .map(|e| load_sample(&e.image, Some(&e.label), e.mask.as_deref(), &config.clahe, divisor, attention))
        .collect()
}

/// Loads the manifest and trains, writing `train.log` and checkpoints to `out_dir`.
pub fn train_loop(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    progress: &mut dyn FnMut(&LogLine),
) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = load_samples(manifest, config)?;
    train_on_samples(config, &samples, Some(out_dir), progress)
}

fn stack(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>)> {
    let (h, w) = samples[0].dims();
    let n = samples.len();
    let mut img = Vec::with_capacity(n * h * w);
    let mut lbl = Vec::with_capacity(n * h * w);
    let any_mask = samples.iter().any(|s| s.mask.is_some());
    let mut msk = Vec::with_capacity(if any_mask { n * h * w } else { 0 });
    for s in samples {
        img.extend_from_slice(s.image.data());
        lbl.extend(s.label.data().iter().map(|&v| f32::from(v != 0)));
        if any_mask {
            match &s.mask {
                Some(m) => msk.extend(m.data().iter().map(|&v| f32::from(v != 0))),
                None => msk.extend(std::iter::repeat_n(1.0, h * w)),
            }
        }
    }
    let shape = vec![n, 1, h, w];
    let mask = any_mask.then(|| Tensor::from_vec(shape.clone(), msk)).transpose()?;
    Ok((Tensor::from_vec(shape.clone(), img)?, Tensor::from_vec(shape, lbl)?, mask))
}

fn attention_refs<'a>(variant: NetworkVariant, samples: &'a [Sample]) -> Result<Option<Vec<&'a AttentionMap>>> {
    if !variant.boundary_enhancement() {
        return Ok(None);
    }
    samples
        .iter()
        .map(|s| s.attention.as_ref().ok_or_else(|| Error::Config(format!("variant {variant} needs attention maps on every sample"))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Trains on prepared samples. With `out_dir`, writes `train.log`,
/// periodic `ckpt_<iter>.befd` and `final.befd`.
pub fn train_on_samples(
    config: &TrainConfig,
    samples: &[Sample],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&LogLine),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let dims = samples[0].dims();
    if let Some(s) = samples.iter().find(|s| s.dims() != dims) {
        return Err(Error::Config(format!(
            "training images must share extents after padding: {:?} vs {:?}",
            dims,
            s.dims()
        )));
    }
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("train.log");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut net = Network::<f32>::build(&config.unet, config.variant, config.seed)?;
    let mut adam = AdamState::new(net.params().iter().map(|(n, t)| (n.as_str(), t)));
    let adam_cfg = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DATA_STREAM);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut log = Vec::new();
    let start = Instant::now();
    let save = |net: &Network<f32>, adam: &AdamState<f32>, iteration: usize, name: String| -> Result<PathBuf> {
        let dir = out_dir.expect("only called with an output directory");
        let path = dir.join(name);
        Checkpoint::from_network(net, config.attention, config.clahe, config.seed, iteration as u64, Some(adam)).save(&path)?;
        Ok(path)
    };

    for it in 1..=config.iterations {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..samples.len())).collect();
        let batch: Vec<Sample> = idx.iter().map(|&i| augment_flip(&samples[i], &mut rng)).collect();
        let (input, targets, mask) = stack(&batch)?;
        let maps = attention_refs(config.variant, &batch)?;

        let mut tape = Tape::new();
        let x = tape.constant(input);
        let (logits, vars) = net.forward(&mut tape, x, maps.as_deref(), Mode::Train)?;
        let loss = tape.bce_with_logits(logits, targets, mask)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, batch: idx });
        }
        tape.backward(loss)?;
        let grads: Vec<_> = vars.iter().map(|&v| tape.take_grad(v)).collect();
        drop(tape);
        adam_step(&mut net.named_params_mut(), &grads, &mut adam, &adam_cfg)?;
        losses.push(value);

        if it % LOG_EVERY == 0 || it == config.iterations {
            let from = log.last().map_or(0, |l: &LogLine| l.iteration);
            let window = &losses[from..];
            let line = LogLine {
                iteration: it,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some((f, p)) = &mut log_file {
                writeln!(f, "{}", line.to_text()).map_err(|e| Error::io(&*p, e))?;
            }
            progress(&line);
            log.push(line);
        }
        if out_dir.is_some() && config.checkpoint_every > 0 && it % config.checkpoint_every == 0 && it < config.iterations {
            save(&net, &adam, it, format!("ckpt_{it:06}.befd"))?;
        }
    }
    let final_checkpoint = match out_dir {
        Some(_) => Some(save(&net, &adam, config.iterations, "final.befd".into())?),
        None => None,
    };
    Ok(TrainOutcome { network: net, adam, losses, log, final_checkpoint })
}

/// Foreground probabilities for one prepared sample, cropped to the
/// original extents.
pub fn predict_probabilities(net: &mut Network<f32>, sample: &Sample) -> Result<Field<f32>> {
    let maps = attention_refs(net.variant(), std::slice::from_ref(sample))?;
    let logits = net.predict_logits(&sample.image, maps.as_deref())?;
    let (h, w) = sample.dims();
    let prob = Field::from_vec(h, w, logits.data()[..h * w].iter().map(|&z| sigmoid(z)).collect())?;
    Ok(crop_back(&prob, &sample.pad))
}
