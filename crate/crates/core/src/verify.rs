//! Self-verification suites: finite-difference gradient checks for every
//! differentiable op and the full network, plus independent oracles for
//! non-local means, AUC, the distance transform and edge attention.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoise::{denoise_forward, nonlocal_bruteforce};
use crate::edge::{edge_attention, sobel, AttentionMap, AttentionParams};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::gradcheck::{grad_check, random_projection, GradCheckConfig, GradReport};
use crate::metrics::{auc_from_pairs, auc_pairwise, distance_transform, distance_transform_bruteforce, ConfusionCounts};
use crate::ops::nonlocal::nonlocal_means_dot_forward;
use crate::ops::norm::{BatchNormState, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::unet::{Network, NetworkVariant, UNetConfig};

/// Seeds per gradient check.
pub const DEFAULT_SEEDS: usize = 20;
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Oracle,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Suite::Grad),
            "oracle" => Ok(Suite::Oracle),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown suite `{s}` (expected grad, oracle or all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed deviation.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub seconds: f64,
    pub note: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:<4} worst={:<10.3e} tol={:<8.1e} cases={:<5} {:>7.2}s",
            self.name,
            if self.passed { "ok" } else { "FAIL" },
            self.worst,
            self.tolerance,
            self.cases,
            self.seconds
        )?;
        if !self.note.is_empty() {
            write!(f, "  {}", self.note)?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, seeds: usize) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        out.extend(grad_suite(seeds));
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        out.extend(oracle_suite());
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least 0.05 away from zero, either sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A random permutation of evenly spaced values, so every pooling window
/// has a unique maximum separated from the runner-up by far more than the step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape.to_vec(), v).expect("shape")
}

fn micro_config() -> UNetConfig {
    UNetConfig { depth: 2, base_channels: 2, be_levels: vec![1, 2], fd_skips: vec![1], ..Default::default() }
}

fn random_attention(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<AttentionMap> {
    (0..n)
        .map(|_| {
            let img = Field::from_fn(h, w, |_, _| rng.random_range(0.0..1.0));
            edge_attention(&img, &AttentionParams::default())
        })
        .collect()
}

type GradCase = fn(u64) -> Result<GradReport>;

fn check(seed: u64, step: f64, inputs: &[Tensor<f64>], f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let cfg = GradCheckConfig { step, tolerance: GRAD_TOLERANCE, max_coords_per_input: Some(48), seed };
    grad_check(f, inputs, &cfg)
}

fn projected(
    seed: u64,
    inputs: &[Tensor<f64>],
    mut f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    check(seed, 1e-5, inputs, |t, v| {
        let out = f(t, v)?;
        random_projection(t, out, seed)
    })
}

fn case_conv2d(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let k = if seed % 2 == 0 { 3 } else { 1 };
    let inputs = [uniform(&mut r, &[2, 3, 5, 4], -1.0, 1.0), uniform(&mut r, &[2, 3, k, k], -1.0, 1.0), uniform(&mut r, &[2], -1.0, 1.0)];
    projected(seed, &inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), k / 2))
}

fn case_conv_transpose2d(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0), uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0), uniform(&mut r, &[2], -1.0, 1.0)];
    projected(seed, &inputs, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2])))
}

fn case_maxpool2d(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    projected(seed, &[distinct(&mut r, &[2, 2, 4, 6])], |t, v| t.maxpool2d(v[0]))
}

fn case_batchnorm2d(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0), uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)];
    projected(seed, &inputs, |t, v| {
        let mut st = BatchNormState::new(3);
        t.batchnorm2d(v[0], v[1], v[2], &mut st, Mode::Train)
    })
}

fn case_elementwise(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [off_zero(&mut r, &[2, 3, 2, 2]), uniform(&mut r, &[2, 1, 2, 2], -1.0, 1.0), uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0)];
    projected(seed, &inputs, |t, v| {
        // relu(a) * broadcast(b) + sigmoid(c) * a
        let a = t.relu(v[0])?;
        let ab = t.mul(a, v[1])?;
        let s = t.sigmoid(v[2])?;
        let sa = t.mul(s, v[0])?;
        t.add(ab, sa)
    })
}

fn case_concat(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [uniform(&mut r, &[2, 1, 3, 2], -1.0, 1.0), uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0)];
    projected(seed, &inputs, |t, v| t.concat_channels(v[0], v[1]))
}

fn case_reduce_mean(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    check(seed, 1e-5, &[uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0)], |t, v| t.reduce_mean(v[0]))
}

fn case_bce_loss(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 1, 3, 3];
    let y = Tensor::from_fn(&shape, |_| f64::from(u8::from(r.random_bool(0.4))));
    let mut m = Tensor::from_fn(&shape, |_| f64::from(u8::from(r.random_bool(0.7))));
    m.data_mut()[0] = 1.0;
    let masked = seed % 2 == 1;
    check(seed, 1e-5, &[uniform(&mut r, &shape, -4.0, 4.0)], |t, v| {
        t.bce_with_logits(v[0], y.clone(), masked.then(|| m.clone()))
    })
}

fn case_nonlocal(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    projected(seed, &[uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0)], |t, v| t.nonlocal_means_dot(v[0]))
}

fn case_denoise(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [uniform(&mut r, &[2, 3, 2, 3], -1.0, 1.0), uniform(&mut r, &[3, 3, 1, 1], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)];
    projected(seed, &inputs, |t, v| denoise_forward(t, v[0], v[1], v[2]))
}

fn case_network(seed: u64) -> Result<GradReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::build(&micro_config(), NetworkVariant::BefdUnet, seed)?;
    // Train a non-zero denoise path so its gradients are exercised too.
    let mut inputs: Vec<Tensor<f64>> = net.params().iter().map(|(_, p)| p.clone()).collect();
    for ((name, _), p) in net.params().iter().zip(&mut inputs) {
        if name.contains("denoise") || name.ends_with("bias") || name.ends_with("beta") {
            *p = uniform(&mut r, p.shape(), -0.3, 0.3);
        }
    }
    let (n, h, w) = (2, 8, 8);
    let x = uniform(&mut r, &[n, 1, h, w], 0.0, 1.0);
    inputs.push(x);
    let maps = random_attention(&mut r, n, h, w);
    let y = Tensor::from_fn(&[n, 1, h, w], |_| f64::from(u8::from(r.random_bool(0.3))));
    let np = inputs.len() - 1;
    let cfg = GradCheckConfig { step: 1e-6, tolerance: GRAD_TOLERANCE, max_coords_per_input: Some(12), seed };
    grad_check(
        |t, v| {
            let refs: Vec<&AttentionMap> = maps.iter().collect();
            let logits = net.forward_with(t, &v[..np], v[np], Some(&refs), Mode::Train)?;
            t.bce_with_logits(logits, y.clone(), None)
        },
        &inputs,
        &cfg,
    )
}

const GRAD_CASES: &[(&str, GradCase)] = &[
    ("conv2d", case_conv2d),
    ("conv_transpose2d", case_conv_transpose2d),
    ("maxpool2d", case_maxpool2d),
    ("batchnorm2d", case_batchnorm2d),
    ("elementwise", case_elementwise),
    ("concat", case_concat),
    ("reduce_mean", case_reduce_mean),
    ("bce_loss", case_bce_loss),
    ("nonlocal_means_dot", case_nonlocal),
    ("denoise_forward", case_denoise),
    ("befd_unet", case_network),
];

/// Every case over `seeds` seeds; a case fails on its worst seed.
pub fn grad_suite(seeds: usize) -> Vec<CheckResult> {
    GRAD_CASES
        .iter()
        .map(|&(name, case)| {
            let start = Instant::now();
            let mut worst = 0.0f64;
            let mut cases = 0;
            let mut note = String::new();
            let mut passed = true;
            for seed in 0..seeds as u64 {
                match case(seed) {
                    Ok(rep) => {
                        cases += rep.checked;
                        if rep.worst > worst {
                            worst = rep.worst;
                            note = format!("worst at seed {seed}, input {}, coord {}", rep.worst_at.0, rep.worst_at.1);
                        }
                        passed &= rep.passed;
                    }
                    Err(e) => {
                        passed = false;
                        note = format!("seed {seed}: {e}");
                        break;
                    }
                }
            }
            CheckResult { name, passed, worst, tolerance: GRAD_TOLERANCE, cases, seconds: start.elapsed().as_secs_f64(), note }
        })
        .collect()
}

fn timed(name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<(f64, usize)>) -> CheckResult {
    let start = Instant::now();
    let (passed, worst, cases, note) = match f() {
        Ok((worst, cases)) => (worst <= tolerance, worst, cases, String::new()),
        Err(e) => (false, f64::NAN, 0, e.to_string()),
    };
    CheckResult { name, passed, worst, tolerance, cases, seconds: start.elapsed().as_secs_f64(), note }
}

/// Gram-path non-local means against the direct double loop: 50 shapes
/// with at most 64 locations.
pub fn check_nonlocal_bruteforce() -> CheckResult {
    timed("nonlocal_gram_vs_direct", 1e-10, || {
        let mut r = ChaCha8Rng::seed_from_u64(0x6a);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (h, w) = loop {
                let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
                if h * w <= 64 {
                    break (h, w);
                }
            };
            let shape = [r.random_range(1..=2), r.random_range(1..=6), h, w];
            let x = uniform(&mut r, &shape, -1.0, 1.0);
            worst = worst.max(nonlocal_means_dot_forward(&x)?.max_abs_diff(&nonlocal_bruteforce(&x)?));
        }
        Ok((worst, 50))
    })
}

/// Permuting locations permutes the output the same way.
pub fn check_nonlocal_permutation() -> CheckResult {
    timed("nonlocal_permutation", 1e-9, || {
        let mut r = ChaCha8Rng::seed_from_u64(0x6b);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (c, n) = (r.random_range(1..=6), r.random_range(2..=64));
            let x = uniform(&mut r, &[1, c, 1, n], -1.0, 1.0);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            let permute = |t: &Tensor<f64>| Tensor::from_fn(&[1, c, 1, n], |i| t.data()[(i / n) * n + perm[i % n]]);
            let a = permute(&nonlocal_means_dot_forward(&x)?);
            let b = nonlocal_means_dot_forward(&permute(&x))?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok((worst, 50))
    })
}

/// The block is cubic in its input: `f(s x) = s^3 f(x)`.
pub fn check_nonlocal_homogeneity() -> CheckResult {
    timed("nonlocal_cubic_homogeneity", 1e-9, || {
        let mut r = ChaCha8Rng::seed_from_u64(0x6c);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let shape = [1, r.random_range(1..=6), r.random_range(1..=8), r.random_range(1..=8)];
            let x = uniform(&mut r, &shape, -1.0, 1.0);
            let s: f64 = r.random_range(0.25..2.0);
            let a = nonlocal_means_dot_forward(&x.map(|v| v * s))?;
            let b = nonlocal_means_dot_forward(&x)?.map(|v| v * s * s * s);
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok((worst, 50))
    })
}

fn random_scored(r: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = r.random_range(2..=32 * 32);
    let levels = if r.random_bool(0.5) { r.random_range(2..50) } else { 0 };
    let p = r.random_range(0.05..0.95);
    (0..n)
        .map(|_| {
            let s: f64 = r.random_range(0.0..1.0);
            // half of the instances are quantized to force ties
            let s = if levels > 0 { (s * levels as f64).floor() / levels as f64 } else { s };
            (s, r.random_bool(p))
        })
        .collect()
}

/// Rank-based AUC against the O(P·N) pair count on 1000 instances.
pub fn check_auc_pairwise() -> CheckResult {
    timed("auc_vs_pairwise", 1e-12, || {
        let mut r = ChaCha8Rng::seed_from_u64(0xa0c);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let s = random_scored(&mut r);
            match (auc_from_pairs(s.clone()), auc_pairwise(&s)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err(Error::Undefined("AUC definedness differs from the oracle")),
            }
        }
        Ok((worst, 1000))
    })
}

/// AUC is unchanged by a strictly increasing score transform and flips to
/// `1 - AUC` when scores are negated (no ties).
pub fn check_auc_invariance() -> CheckResult {
    timed("auc_monotone_invariance", 1e-12, || {
        let mut r = ChaCha8Rng::seed_from_u64(0xa0d);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let n = r.random_range(2..=1024);
            // distinct grid scores so the transforms below cannot create ties
            let mut grid: Vec<u32> = (0..4096).collect();
            grid.shuffle(&mut r);
            let s: Vec<(f64, bool)> = (0..n).map(|i| (grid[i] as f64 / 4096.0, r.random_bool(0.3))).collect();
            let Some(base) = auc_from_pairs(s.clone()) else { continue };
            let warped = auc_from_pairs(s.iter().map(|&(v, y)| ((3.0 * v).exp() + v * v * v, y)).collect()).unwrap();
            let flipped = auc_from_pairs(s.iter().map(|&(v, y)| (1.0 - v, y)).collect()).unwrap();
            worst = worst.max((warped - base).abs()).max((flipped - (1.0 - base)).abs());
        }
        Ok((worst, 100))
    })
}

/// Exact distance transform against nearest-background search on 32x32 fields.
pub fn check_distance_transform() -> CheckResult {
    timed("edt_vs_bruteforce", 0.0, || {
        let mut r = ChaCha8Rng::seed_from_u64(0xed7);
        let mut worst = 0.0f64;
        for _ in 0..30 {
            let density = r.random_range(0.3..0.98);
            let gt = Field::from_fn(32, 32, |_, _| u8::from(r.random_bool(density)));
            let (a, b) = (distance_transform(&gt), distance_transform_bruteforce(&gt));
            for (p, q) in a.data().iter().zip(b.data()) {
                if p != q {
                    worst = worst.max((p - q).abs());
                }
            }
        }
        Ok((worst, 30))
    })
}

/// sen·(tp+fn) = tp and spe·(tn+fp) = tn as exact fractions.
pub fn check_metric_identities() -> CheckResult {
    timed("metric_identities", 0.0, || {
        let mut r = ChaCha8Rng::seed_from_u64(0x4e7);
        let mut bad = 0usize;
        for _ in 0..1000 {
            let c = ConfusionCounts {
                tp: r.random_range(0..10_000),
                tn: r.random_range(0..10_000),
                fp: r.random_range(0..10_000),
                fn_: r.random_range(0..10_000),
            };
            let (sen, spe, acc, f1) = (c.sensitivity(), c.specificity(), c.accuracy(), c.f1());
            let ok = sen.num as u128 * (c.tp + c.fn_) as u128 == c.tp as u128 * sen.den as u128
                && spe.num as u128 * (c.tn + c.fp) as u128 == c.tn as u128 * spe.den as u128
                && acc.num == c.tp + c.tn
                && acc.den == c.total()
                && f1.num == 2 * c.tp
                && f1.den == 2 * c.tp + c.fp + c.fn_;
            bad += usize::from(!ok);
        }
        Ok((bad as f64, 1000))
    })
}

/// Sobel response of a unit-10 step and the attention transform at the
/// default thresholds.
pub fn check_attention_hand_cases() -> CheckResult {
    timed("attention_hand_cases", 1e-12, || {
        let step = Field::from_fn(5, 6, |_, x| if x >= 3 { 10.0 } else { 0.0 });
        let g = sobel(&step);
        let mut worst = (g.magnitude.get(2, 2) - 40.0).abs().max((g.magnitude.get(2, 3) - 40.0).abs());
        worst = worst.max(g.magnitude.get(2, 0).abs());
        let p = AttentionParams::default();
        let cases = [(0.5, 1.0), (0.8, 3.0), (2.9, 2.0), (5.0, 1.0), (7.3, 1.0)];
        for (gv, expect) in cases {
            worst = worst.max((p.weight(gv) - expect).abs());
        }
        Ok((worst, cases.len() + 3))
    })
}

pub fn oracle_suite() -> Vec<CheckResult> {
    vec![
        check_nonlocal_bruteforce(),
        check_nonlocal_permutation(),
        check_nonlocal_homogeneity(),
        check_auc_pairwise(),
        check_auc_invariance(),
        check_distance_transform(),
        check_metric_identities(),
        check_attention_hand_cases(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault;

    #[test]
    fn oracles_pass() {
        for r in oracle_suite() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn grad_cases_pass_on_a_few_seeds() {
        for r in grad_suite(2) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn perturbed_conv_backward_is_caught() {
        fault::perturb_conv2d_backward(true);
        let r = case_conv2d(0).unwrap();
        fault::perturb_conv2d_backward(false);
        assert!(!r.passed);
        assert!(case_conv2d(0).unwrap().passed);
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("fast".parse::<Suite>().is_err());
    }
}
