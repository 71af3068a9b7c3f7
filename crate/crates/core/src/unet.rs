//! UNet encoder-decoder with optional boundary enhancement (edge attention
//! multiplied into deep encoder levels) and feature denoising (non-local
//! blocks on shallow skip connections).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoise::denoise_forward;
use crate::edge::{apply_attention, attention_pyramid, AttentionMap};
use crate::error::{Error, Result};
use crate::ops::norm::{BatchNormState, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// 1-based encoder levels whose output is multiplied by the attention map.
    pub be_levels: Vec<usize>,
    /// 1-based skip connections that pass through a denoising block.
    pub fd_skips: Vec<usize>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 5,
            base_channels: 64,
            in_channels: 1,
            out_channels: 1,
            be_levels: vec![3, 4, 5],
            fd_skips: vec![1, 2, 3],
        }
    }
}

impl UNetConfig {
    /// Default wiring at a different width.
    pub fn with_base_channels(base_channels: usize) -> Self {
        UNetConfig { base_channels, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.depth > 16 {
            return fail(format!("depth {} is unreasonably large", self.depth));
        }
        for (name, set, max) in [("be_levels", &self.be_levels, self.depth), ("fd_skips", &self.fd_skips, self.depth - 1)] {
            if let Some(&bad) = set.iter().find(|&&l| l == 0 || l > max) {
                return fail(format!("{name} entry {bad} outside 1..={max}"));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return fail(format!("{name} contains duplicates: {set:?}"));
            }
        }
        Ok(())
    }

    /// Three attention levels and three denoised skips, as in the reference wiring.
    pub fn is_reference_wiring(&self) -> bool {
        self.be_levels.len() == 3 && self.fd_skips.len() == 3
    }

    /// Channel count at 1-based `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Input extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkVariant {
    Unet,
    BeUnet,
    FdUnet,
    BefdUnet,
}

impl NetworkVariant {
    pub const ALL: [NetworkVariant; 4] = [Self::Unet, Self::BeUnet, Self::FdUnet, Self::BefdUnet];

    pub fn boundary_enhancement(self) -> bool {
        matches!(self, Self::BeUnet | Self::BefdUnet)
    }

    pub fn feature_denoising(self) -> bool {
        matches!(self, Self::FdUnet | Self::BefdUnet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::BeUnet => "be-unet",
            Self::FdUnet => "fd-unet",
            Self::BefdUnet => "befd-unet",
        }
    }
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetworkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected unet, be-unet, fd-unet, befd-unet)")))
    }
}

/// conv3x3 -> BN -> ReLU, as parameter/state indices.
#[derive(Debug, Clone)]
struct ConvBlock {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    convs: [ConvBlock; 2],
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    level: usize,
    up_weight: usize,
    up_bias: usize,
    denoise: Option<(usize, usize)>,
    convs: [ConvBlock; 2],
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: UNetConfig,
    variant: NetworkVariant,
    params: Vec<(String, Tensor<T>)>,
    bn: Vec<(String, BatchNormState<T>)>,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    head: (usize, usize),
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Kaiming-uniform, bound `sqrt(6 / fan_in)`.
    Kaiming { fan_in: usize },
}

struct Builder<T> {
    seed: u64,
    params: Vec<(String, Tensor<T>)>,
    bn: Vec<(String, BatchNormState<T>)>,
}

impl<T: Element> Builder<T> {
    fn param(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            }
        };
        self.params.push((name, t));
        self.params.len() - 1
    }

    fn conv_block(&mut self, prefix: &str, i: usize, cin: usize, cout: usize) -> ConvBlock {
        let weight = self.param(format!("{prefix}.conv{i}.weight"), &[cout, cin, 3, 3], Init::Kaiming { fan_in: cin * 9 });
        let bias = self.param(format!("{prefix}.conv{i}.bias"), &[cout], Init::Zeros);
        let gamma = self.param(format!("{prefix}.bn{i}.gamma"), &[cout], Init::Ones);
        let beta = self.param(format!("{prefix}.bn{i}.beta"), &[cout], Init::Zeros);
        self.bn.push((format!("{prefix}.bn{i}"), BatchNormState::new(cout)));
        ConvBlock { weight, bias, gamma, beta, bn: self.bn.len() - 1 }
    }
}

impl<T: Element> Network<T> {
    /// Builds a network. The same seed yields bit-identical parameters, and
    /// layers shared between variants get identical values.
    pub fn build(config: &UNetConfig, variant: NetworkVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { seed, params: Vec::new(), bn: Vec::new() };
        let mut encoder = Vec::with_capacity(config.depth);
        for l in 1..=config.depth {
            let cin = if l == 1 { config.in_channels } else { config.channels(l - 1) };
            let c = config.channels(l);
            let prefix = format!("enc{l}");
            encoder.push(EncoderLevel { convs: [b.conv_block(&prefix, 1, cin, c), b.conv_block(&prefix, 2, c, c)] });
        }
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for l in (1..config.depth).rev() {
            let (c, cdeep) = (config.channels(l), config.channels(l + 1));
            let prefix = format!("dec{l}");
            let up_weight = b.param(format!("{prefix}.up.weight"), &[cdeep, c, 2, 2], Init::Kaiming { fan_in: cdeep });
            let up_bias = b.param(format!("{prefix}.up.bias"), &[c], Init::Zeros);
            let denoise = (variant.feature_denoising() && config.fd_skips.contains(&l)).then(|| {
                (
                    b.param(format!("skip{l}.denoise.weight"), &[c, c, 1, 1], Init::Zeros),
                    b.param(format!("skip{l}.denoise.bias"), &[c], Init::Zeros),
                )
            });
            let convs = [b.conv_block(&prefix, 1, 2 * c, c), b.conv_block(&prefix, 2, c, c)];
            decoder.push(DecoderLevel { level: l, up_weight, up_bias, denoise, convs });
        }
        let c1 = config.channels(1);
        let head = (
            b.param("head.weight".into(), &[config.out_channels, c1, 1, 1], Init::Kaiming { fan_in: c1 }),
            b.param("head.bias".into(), &[config.out_channels], Init::Zeros),
        );
        Ok(Network { config: config.clone(), variant, params: b.params, bn: b.bn, encoder, decoder, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn variant(&self) -> NetworkVariant {
        self.variant
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    /// Parameter tensors in registry order; names are fixed.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    /// Names paired with mutable tensors, in registry order.
    pub fn named_params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn batch_norm_states(&self) -> &[(String, BatchNormState<T>)] {
        &self.bn
    }

    /// Total trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters followed by batch-norm running statistics, as named tensors.
    pub fn state_entries(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        for (n, st) in &self.bn {
            out.push((format!("{n}.running_mean"), &st.running_mean));
            out.push((format!("{n}.running_var"), &st.running_var));
        }
        out
    }

    /// Replaces parameters and running statistics from named tensors.
    /// Every entry must be present with a matching shape.
    pub fn load_state(&mut self, entries: &HashMap<String, Tensor<T>>) -> Result<()> {
        let fetch = |name: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = entries.get(name).ok_or_else(|| Error::Config(format!("state is missing `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::Config(format!(
                    "`{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        let mut params = Vec::with_capacity(self.params.len());
        for (n, t) in &self.params {
            params.push(fetch(n, t)?);
        }
        let mut stats = Vec::with_capacity(self.bn.len());
        for (n, st) in &self.bn {
            stats.push((fetch(&format!("{n}.running_mean"), &st.running_mean)?, fetch(&format!("{n}.running_var"), &st.running_var)?));
        }
        for ((_, t), p) in self.params.iter_mut().zip(params) {
            *t = p;
        }
        for ((_, st), (m, v)) in self.bn.iter_mut().zip(stats) {
            st.running_mean = m;
            st.running_var = v;
            st.initialized = true;
        }
        Ok(())
    }

    /// Records every parameter as a trainable leaf, in registry order.
    pub fn bind_params(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Forward pass with freshly bound parameters. Returns logits and the
    /// parameter vars (registry order) for gradient lookup.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        attention: Option<&[&AttentionMap]>,
        mode: Mode,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = self.bind_params(tape);
        let logits = self.forward_with(tape, &vars, input, attention, mode)?;
        Ok((logits, vars))
    }

    /// Forward pass over already bound parameter vars.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        attention: Option<&[&AttentionMap]>,
        mode: Mode,
    ) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::Config(format!("{} parameter vars for {} parameters", params.len(), self.params.len())));
        }
        let (n, c, h, w) = tape.value(input).dims4("unet forward")?;
        if c != self.config.in_channels {
            return Err(Error::shape("unet forward", format!("input has {c} channels, network expects {}", self.config.in_channels)));
        }
        let div = self.config.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "unet forward",
                format!("input extents {h}x{w} must be divisible by {div} (2^(depth-1))"),
            ));
        }

        let be_maps = if self.variant.boundary_enhancement() {
            let maps = attention.ok_or_else(|| {
                Error::Config(format!("variant {} needs an attention map per batch item", self.variant))
            })?;
            if maps.len() != n {
                return Err(Error::shape("unet forward", format!("{} attention maps for a batch of {n}", maps.len())));
            }
            let levels: Vec<(usize, usize)> =
                self.config.be_levels.iter().map(|&l| (h >> (l - 1), w >> (l - 1))).collect();
            let mut per_item = Vec::with_capacity(n);
            for m in maps {
                if m.source_dims != (h, w) || m.dims() != (h, w) {
                    return Err(Error::shape(
                        "unet forward",
                        format!("attention map is {:?} (source {:?}) but input is {h}x{w}", m.dims(), m.source_dims),
                    ));
                }
                per_item.push(attention_pyramid(m, &levels)?);
            }
            Some(per_item)
        } else {
            None
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth - 1);
        for l in 1..=self.config.depth {
            let level = self.encoder[l - 1].clone();
            for blk in &level.convs {
                x = self.conv_block(tape, params, blk, x, mode)?;
            }
            if let (Some(maps), Some(pos)) = (&be_maps, self.config.be_levels.iter().position(|&b| b == l)) {
                let refs: Vec<&AttentionMap> = maps.iter().map(|m| &m[pos]).collect();
                x = apply_attention(tape, x, &refs)?;
            }
            if l < self.config.depth {
                skips.push(x);
                x = tape.maxpool2d(x)?;
            }
        }
        for dl in self.decoder.clone() {
            let up = tape.conv_transpose2d(x, params[dl.up_weight], Some(params[dl.up_bias]))?;
            let mut skip = skips[dl.level - 1];
            if let Some((wi, bi)) = dl.denoise {
                skip = denoise_forward(tape, skip, params[wi], params[bi])?;
            }
            x = tape.concat_channels(skip, up)?;
            for blk in &dl.convs {
                x = self.conv_block(tape, params, blk, x, mode)?;
            }
        }
        tape.conv2d(x, params[self.head.0], Some(params[self.head.1]), 0)
    }

    fn conv_block(&mut self, tape: &mut Tape<T>, params: &[Var], blk: &ConvBlock, x: Var, mode: Mode) -> Result<Var> {
        let y = tape.conv2d(x, params[blk.weight], Some(params[blk.bias]), 1)?;
        let y = tape.batchnorm2d(y, params[blk.gamma], params[blk.beta], &mut self.bn[blk.bn].1, mode)?;
        tape.relu(y)
    }

    /// Inference-mode logits for a batch.
    pub fn predict_logits(&mut self, batch: &Tensor<T>, attention: Option<&[&AttentionMap]>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let out = self.forward_with(&mut tape, &vars, input, attention, Mode::Infer)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field;

    fn micro(depth: usize, base: usize) -> UNetConfig {
        UNetConfig {
            depth,
            base_channels: base,
            be_levels: (1..=depth).rev().take(3).collect(),
            fd_skips: (1..depth).take(3).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn default_config_matches_reference_wiring() {
        let c = UNetConfig::default();
        assert!(c.validate().is_ok());
        assert!(c.is_reference_wiring());
        assert_eq!((1..=5).map(|l| c.channels(l)).collect::<Vec<_>>(), vec![64, 128, 256, 512, 1024]);
        assert_eq!(c.divisor(), 16);
    }

    #[test]
    fn invalid_configs() {
        assert!(UNetConfig { depth: 1, ..Default::default() }.validate().is_err());
        assert!(UNetConfig { fd_skips: vec![5], ..Default::default() }.validate().is_err());
        assert!(UNetConfig { be_levels: vec![0], ..Default::default() }.validate().is_err());
        assert!(UNetConfig { be_levels: vec![3, 3], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in NetworkVariant::ALL {
            assert_eq!(v.as_str().parse::<NetworkVariant>().unwrap(), v);
        }
        assert!("segnet".parse::<NetworkVariant>().is_err());
    }

    #[test]
    fn smallest_network_count_by_hand() {
        let cfg = UNetConfig { depth: 2, base_channels: 1, be_levels: vec![], fd_skips: vec![], ..Default::default() };
        let net = Network::<f32>::build(&cfg, NetworkVariant::Unet, 0).unwrap();
        // enc1: (9+1+2)*2; enc2: (18+2+4)+(36+2+4); dec1: up 8+1, (18+1+2)+(9+1+2); head 1+1
        assert_eq!(net.param_count(), 24 + 66 + 42 + 2);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = micro(3, 4);
        let a = Network::<f32>::build(&cfg, NetworkVariant::BefdUnet, 11).unwrap();
        let b = Network::<f32>::build(&cfg, NetworkVariant::BefdUnet, 11).unwrap();
        let c = Network::<f32>::build(&cfg, NetworkVariant::BefdUnet, 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let names: std::collections::HashSet<_> = a.params().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), a.params().len());
    }

    #[test]
    fn output_matches_input_extents() {
        let cfg = micro(3, 2);
        for v in NetworkVariant::ALL {
            let mut net = Network::<f32>::build(&cfg, v, 3).unwrap();
            let x = Tensor::from_fn(&[2, 1, 16, 8], |i| (i as f32 * 0.13).sin());
            let map = AttentionMap { weights: Field::filled(16, 8, 1.5), source_dims: (16, 8) };
            let maps = [&map, &map];
            let att = v.boundary_enhancement().then_some(&maps[..]);
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let (logits, _) = net.forward(&mut tape, input, att, Mode::Train).unwrap();
            assert_eq!(tape.value(logits).shape(), &[2, 1, 16, 8]);
        }
    }

    #[test]
    fn forward_errors() {
        let cfg = micro(3, 2);
        let mut net = Network::<f32>::build(&cfg, NetworkVariant::BeUnet, 3).unwrap();
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
        assert!(net.forward(&mut tape, input, None, Mode::Train).is_err());
        let odd = tape.constant(Tensor::zeros(&[1, 1, 18, 16]));
        let err = net.forward(&mut tape, odd, None, Mode::Train).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn be_adds_no_parameters() {
        let cfg = micro(3, 4);
        let u = Network::<f32>::build(&cfg, NetworkVariant::Unet, 0).unwrap();
        let be = Network::<f32>::build(&cfg, NetworkVariant::BeUnet, 0).unwrap();
        assert_eq!(u.param_count(), be.param_count());
    }
}
