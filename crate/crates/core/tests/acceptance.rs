//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! The scaled training experiment dominates the runtime (three 2,000-iteration
//! runs at 64x64). Set `BEFD_ACCEPTANCE_SKIP_TRAINING=1` to report those
//! criteria as SKIP during quick iterations.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use befd_core::data::{decode_pnm, encode_pnm, synth_generate, DatasetManifest, ImageU8, Sample, Split};
use befd_core::metrics::{thin_vessel_mask, MetricsReport, PooledEvaluator};
use befd_core::train::{load_samples, predict_probabilities, train_on_samples, Checkpoint, TrainConfig, TrainOutcome};
use befd_core::verify::{self, CheckResult};
use befd_core::{AttentionMap, Field, Network, NetworkVariant, Tensor, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SECONDS: f64 = 180.0;
const TRAIN_SECONDS: f64 = 1800.0;
const LOSS_DROP: f64 = 0.5;
const MIN_F1: f64 = 0.75;
const DATA_SEED: u64 = 2024;
const TRAIN_SEED: u64 = 1;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    criterion: &'static str,
    verdict: Verdict,
    detail: String,
}

fn line(criterion: &'static str, ok: bool, detail: String) -> Line {
    Line { criterion, verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn summarize(checks: &[CheckResult]) -> (bool, String) {
    let ok = checks.iter().all(|c| c.passed);
    let parts: Vec<String> = checks
        .iter()
        .map(|c| format!("{}{} worst={:.2e}/{:.0e} n={}", if c.passed { "" } else { "!" }, c.name, c.worst, c.tolerance, c.cases))
        .collect();
    (ok, parts.join("; "))
}

fn gradient_suite() -> Line {
    let start = Instant::now();
    let checks = verify::grad_suite(verify::DEFAULT_SEEDS);
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = summarize(&checks);
    line(
        "gradient suite",
        ok && secs <= GRAD_SECONDS,
        format!("{} seeds, {secs:.1}s (limit {GRAD_SECONDS}s): {detail}", verify::DEFAULT_SEEDS),
    )
}

fn nonlocal_oracle() -> Line {
    let (ok, detail) = summarize(&[
        verify::check_nonlocal_bruteforce(),
        verify::check_nonlocal_permutation(),
        verify::check_nonlocal_homogeneity(),
    ]);
    line("non-local means oracle", ok, detail)
}

/// Zeroes every parameter the extended network has beyond the baseline and
/// compares logits bit for bit, in both inference and training mode.
fn neutral_extension() -> Line {
    let cfg = UNetConfig::default();
    let run = || -> befd_core::Result<(bool, String)> {
        let mut base = Network::<f32>::build(&cfg, NetworkVariant::Unet, 7)?;
        let mut ext = Network::<f32>::build(&cfg, NetworkVariant::BefdUnet, 7)?;
        let shared: Vec<String> = base.params().iter().map(|(n, _)| n.clone()).collect();
        let mut zeroed = 0;
        for (name, t) in ext.named_params_mut() {
            if !shared.iter().any(|s| s == name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                zeroed += 1;
            }
        }
        for (n, t) in base.params() {
            if ext.param(n) != Some(t) {
                return Ok((false, format!("shared parameter {n} differs at init")));
            }
        }
        let (h, w) = (64, 64);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let batch = Tensor::from_fn(&[2, 1, h, w], |_| r.random::<f32>());
        let ones = AttentionMap { weights: Field::filled(h, w, 1.0), source_dims: (h, w) };
        let maps = [&ones, &ones];
        let a = base.predict_logits(&batch, None)?;
        let b = ext.predict_logits(&batch, Some(&maps))?;
        let infer_same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());

        let train = |net: &mut Network<f32>, att: Option<&[&AttentionMap]>| -> befd_core::Result<Tensor<f32>> {
            let mut tape = befd_core::Tape::new();
            let x = tape.constant(batch.clone());
            let (y, _) = net.forward(&mut tape, x, att, befd_core::Mode::Train)?;
            Ok(tape.value(y).clone())
        };
        let ta = train(&mut base, None)?;
        let tb = train(&mut ext, Some(&maps))?;
        let train_same = ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        Ok((
            infer_same && train_same && zeroed > 0,
            format!(
                "{zeroed} extra tensors zeroed; inference bit-identical={infer_same}, training-mode bit-identical={train_same}, max |diff|={:.1e}",
                a.max_abs_diff(&b)
            ),
        ))
    };
    match run() {
        Ok((ok, d)) => line("neutral-extension equivalence", ok, d),
        Err(e) => line("neutral-extension equivalence", false, e.to_string()),
    }
}

fn attention_hand_cases() -> Line {
    let (ok, detail) = summarize(&[verify::check_attention_hand_cases()]);
    line("edge attention hand cases", ok, detail)
}

fn metrics_and_auc() -> Line {
    let (ok, detail) = summarize(&[
        verify::check_metric_identities(),
        verify::check_auc_pairwise(),
        verify::check_auc_invariance(),
        verify::check_distance_transform(),
    ]);
    line("metrics and AUC", ok, detail)
}

fn parameter_accounting() -> Line {
    let cfg = UNetConfig::default();
    let count = |v| Network::<f32>::build(&cfg, v, 0).map(|n| n.param_count());
    match (count(NetworkVariant::Unet), count(NetworkVariant::FdUnet), count(NetworkVariant::BeUnet)) {
        (Ok(u), Ok(fd), Ok(be)) => {
            let expected: usize = cfg.fd_skips.iter().map(|&l| cfg.channels(l) * cfg.channels(l) + cfg.channels(l)).sum();
            let (dfd, dbe) = (fd as i64 - u as i64, be as i64 - u as i64);
            line(
                "parameter accounting",
                dfd == 86_464 && expected == 86_464 && dbe == 0,
                format!("UNet {u}, FD-UNet-UNet {dfd} (expected {expected}), BE-UNet-UNet {dbe}"),
            )
        }
        _ => line("parameter accounting", false, "network construction failed".into()),
    }
}

fn pnm_round_trip() -> bool {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    (0..200).all(|_| {
        let (w, h, c) = (r.random_range(1..40), r.random_range(1..40), if r.random_bool(0.5) { 3 } else { 1 });
        let img = ImageU8::new(w, h, c, (0..w * h * c).map(|_| r.random()).collect()).unwrap();
        decode_pnm(&encode_pnm(&img)).ok().as_ref() == Some(&img)
    })
}

struct Run {
    outcome: TrainOutcome,
    seconds: f64,
    pooled: MetricsReport,
    thin: MetricsReport,
}

fn scaled_config(variant: NetworkVariant) -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        batch_size: 8,
        learning_rate: 1e-4,
        seed: TRAIN_SEED,
        checkpoint_every: 1000,
        variant,
        unet: UNetConfig::with_base_channels(16),
        ..Default::default()
    }
}

fn scaled_run(cfg: &TrainConfig, train: &DatasetManifest, test: &DatasetManifest, out: &Path) -> befd_core::Result<Run> {
    let samples = load_samples(train, cfg)?;
    let start = Instant::now();
    let mut outcome = train_on_samples(cfg, &samples, Some(out), &mut |l| {
        eprintln!("  [{}] {}", cfg.variant, l.to_text())
    })?;
    let seconds = start.elapsed().as_secs_f64();
    let (mut pooled, mut thin) = (PooledEvaluator::new(), PooledEvaluator::new());
    for s in load_samples(test, cfg)? {
        let p = predict_probabilities(&mut outcome.network, &s)?;
        pooled.add(&p, &s.label, s.mask.as_ref(), 0.5)?;
        thin.add(&p, &s.label, Some(&thin_vessel_mask(&s.label)), 0.5)?;
    }
    Ok(Run { outcome, seconds, pooled: pooled.finish()?, thin: thin.finish()? })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn checkpoints_identical(a: &Path, b: &Path) -> std::io::Result<(bool, usize)> {
    let mut names: Vec<_> = fs::read_dir(a)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| n.to_string_lossy().ends_with(".befd"))
        .collect();
    names.sort();
    for n in &names {
        if fs::read(a.join(n))? != fs::read(b.join(n))? {
            return Ok((false, names.len()));
        }
    }
    Ok((!names.is_empty(), names.len()))
}

/// The saved checkpoint must reproduce the in-memory network's outputs exactly.
fn round_trip_inference(run: &mut Run, path: &Path, samples: &[Sample]) -> befd_core::Result<bool> {
    let mut loaded = Checkpoint::<f32>::load(path)?.to_network()?;
    for s in samples {
        let a = predict_probabilities(&mut run.outcome.network, s)?;
        let b = predict_probabilities(&mut loaded, s)?;
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn f1(r: &MetricsReport) -> f64 {
    r.f1.unwrap_or(f64::NAN)
}

fn training_criteria(lines: &mut Vec<Line>) {
    const TRAINING: &str = "scaled training experiment";
    const DETERMINISM: &str = "determinism and persistence";
    if std::env::var_os("BEFD_ACCEPTANCE_SKIP_TRAINING").is_some() {
        for criterion in [TRAINING, DETERMINISM] {
            lines.push(Line { criterion, verdict: Verdict::Skip, detail: "BEFD_ACCEPTANCE_SKIP_TRAINING is set".into() });
        }
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let result = (|| -> befd_core::Result<Vec<Line>> {
        let all = synth_generate(50, 64, 64, DATA_SEED, Split::Train, &dir.path().join("data"))?;
        let train = DatasetManifest { entries: all.entries[..40].to_vec(), split: Split::Train };
        let test = DatasetManifest { entries: all.entries[40..].to_vec(), split: Split::Test };
        let befd_cfg = scaled_config(NetworkVariant::BefdUnet);
        let (ra, rb) = (dir.path().join("befd_a"), dir.path().join("befd_b"));
        let mut first = scaled_run(&befd_cfg, &train, &test, &ra)?;
        let second = scaled_run(&befd_cfg, &train, &test, &rb)?;
        let base = scaled_run(&scaled_config(NetworkVariant::Unet), &train, &test, &dir.path().join("unet"))?;

        let losses = &first.outcome.losses;
        let (head, tail) = (mean(&losses[..50]), mean(&losses[losses.len() - 50..]));
        let drop = 1.0 - tail / head;
        let pooled_f1 = f1(&first.pooled);
        let mut out = vec![line(
            TRAINING,
            drop >= LOSS_DROP && pooled_f1 >= MIN_F1 && first.seconds <= TRAIN_SECONDS,
            format!(
                "BCE {head:.4} -> {tail:.4} (drop {:.1}%, need {:.0}%); pooled F1 {pooled_f1:.4} (need {MIN_F1}), acc {:.4}, AUC {:.4}; {:.0}s (limit {TRAIN_SECONDS}s); thin-vessel F1 BEFD {:.4} vs UNet {:.4} (UNet pooled F1 {:.4})",
                100.0 * drop,
                100.0 * LOSS_DROP,
                first.pooled.acc.unwrap_or(f64::NAN),
                first.pooled.auc.unwrap_or(f64::NAN),
                first.seconds,
                f1(&first.thin),
                f1(&base.thin),
                f1(&base.pooled),
            ),
        )];

        let (same_ckpt, files) = checkpoints_identical(&ra, &rb).map_err(|source| befd_core::Error::Io { path: ra.clone(), source })?;
        let same_losses = first.outcome.losses == second.outcome.losses;
        let test_samples = load_samples(&test, &befd_cfg)?;
        let inference = round_trip_inference(&mut first, &ra.join("final.befd"), &test_samples)?;
        let pnm = pnm_round_trip();
        out.push(line(
            DETERMINISM,
            same_ckpt && same_losses && inference && pnm,
            format!(
                "{files} checkpoints byte-identical across runs={same_ckpt}, losses identical={same_losses}; checkpoint round trip inference bit-exact={inference}; PNM round trip lossless={pnm}"
            ),
        ));
        Ok(out)
    })();
    match result {
        Ok(l) => lines.extend(l),
        Err(e) => {
            lines.push(line(TRAINING, false, e.to_string()));
            lines.push(line(DETERMINISM, false, e.to_string()));
        }
    }
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. --list from tooling) are irrelevant here
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut lines = vec![
        gradient_suite(),
        nonlocal_oracle(),
        neutral_extension(),
        attention_hand_cases(),
        metrics_and_auc(),
        parameter_accounting(),
    ];
    training_criteria(&mut lines);

    let mut failed = 0;
    for l in &lines {
        let tag = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} {}: {}", l.criterion, l.detail);
    }
    println!("acceptance: {} criteria, {failed} failed", lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
