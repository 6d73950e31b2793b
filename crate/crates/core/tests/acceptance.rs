//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion. A failed criterion makes the process exit non-zero only when
//! `ACCEPTANCE_STRICT=1` is set, so the workspace test run reports results
//! without aborting.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{grad_check, random_tensor, rng, FD_TOL};
use rand::Rng;
use rand_distr::StandardNormal;
use spikevae::checkpoint::{load_trainer, save_checkpoint};
use spikevae::data::load_split;
use spikevae::experiments::{noise_curve, shuffle_test, ShuffleDim};
use spikevae::io::montage_bytes;
use spikevae::latent::{prior_rates, sample_spikes, sampler_backward, RateVector, SamplerDraw};
use spikevae::loss::{mmd_rbf, mmd_squared, mse_loss, Bandwidth};
use spikevae::metrics::energy_report;
use spikevae::probe::{encode_rates, probe_train_eval, ProbeConfig};
use spikevae::rng::derive_indexed;
use spikevae::snn::{decode_output, lif_sequence, tdbn_forward, RunningStats};
use spikevae::train::{generate_images, reconstruct};
use spikevae::{BnMode, Dataset, LifParams, Model, ModelConfig, Tape, Tensor, Trainer};

const SEEDS: [u64; 3] = [1, 2, 3];
const EVAL_BATCH: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    if let Some(b) = budget {
        if took > b {
            pass = false;
            detail.push_str(&format!("; over the {:.0} s budget", b.as_secs_f64()));
        }
    }
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:>2}: {name}: {detail} ({:.1} s)", took.as_secs_f64());
    pass
}

fn c1_energy() -> Outcome {
    let rate_model = energy_report(1.9e8, 1.8e6, 0.4491, 16, true).energy_joules;
    let baseline = energy_report(5.0e10, 5.6e8, 0.3390, 16, true).energy_joules;
    let (ea, fa) = ((rate_model / 0.0012 - 1.0).abs(), (baseline / 0.2468 - 1.0).abs());
    outcome(
        ea < 0.05 && fa < 0.05,
        format!("rate-coded model {rate_model:.4e} J ({:.2}% off), baseline {baseline:.4e} J ({:.2}% off)", 100.0 * ea, 100.0 * fa),
    )
}

fn binomial_pmf(n: usize, r: f64, steps: usize) -> f64 {
    let mut choose = 1.0f64;
    for k in 0..n {
        choose = choose * (steps - k) as f64 / (k + 1) as f64;
    }
    choose * r.powi(n as i32) * (1.0 - r).powi((steps - n) as i32)
}

/// Each draw is one 128-neuron latent vector at a common rate.
fn c2_sampler_law() -> Outcome {
    const T: usize = 16;
    const D: usize = 128;
    let (mut worst_z, mut worst_tv) = (0.0f64, 0.0f64);
    for g in 1..=9 {
        let r = g as f32 / 10.0;
        let rates = RateVector::new(1, D, vec![r; D]).unwrap();
        let mut hist = [0usize; T + 1];
        for k in 0..10_000u64 {
            let draw = SamplerDraw::generate(1, D, T, derive_indexed(2000 + g, "law", k));
            let z = sample_spikes(&rates, &draw).unwrap().spikes;
            for i in 0..D {
                hist[z.sequence(0, i).iter().map(|&b| b as usize).sum::<usize>()] += 1;
            }
        }
        let n = hist.iter().sum::<usize>() as f64;
        let mean = hist.iter().enumerate().map(|(k, &h)| (k * h) as f64).sum::<f64>() / n;
        let se = (T as f64 * r as f64 * (1.0 - r as f64) / n).sqrt();
        worst_z = worst_z.max((mean - r as f64 * T as f64).abs() / se);
        let tv = hist
            .iter()
            .enumerate()
            .map(|(k, &h)| (h as f64 / n - binomial_pmf(k, r as f64, T)).abs())
            .sum::<f64>()
            / 2.0;
        worst_tv = worst_tv.max(tv);
    }
    outcome(
        worst_z <= 3.0 && worst_tv < 0.01,
        format!("worst mean deviation {worst_z:.2} SE, worst total variation {worst_tv:.5}"),
    )
}

fn c3_surrogate_expectation() -> Outcome {
    const T: usize = 16;
    let alpha = 0.5;
    let mut worst = 0.0f64;
    for r in [0.25f32, 0.35, 0.5, 0.65, 0.75] {
        let rates = RateVector::new(1, 1000, vec![r; 1000]).unwrap();
        let mut sum = 0.0f64;
        for k in 0..100u64 {
            let draw = SamplerDraw::generate(1, 1000, T, derive_indexed(3000, "grad", k));
            let sample = sample_spikes(&rates, &draw).unwrap();
            sum += sampler_backward(&sample, &rates, &draw, alpha).unwrap().iter().map(|&g| g as f64).sum::<f64>();
        }
        worst = worst.max((sum / 1e5 / T as f64 - 1.0).abs());
    }
    outcome(worst < 0.02, format!("worst relative deviation from T: {:.3}%", 100.0 * worst))
}

fn kernel_oracle(a: &[f32], b: &[f32], sigma2: f64) -> f64 {
    let mut d = 0.0f64;
    for i in 0..a.len() {
        d += (a[i] as f64 - b[i] as f64).powi(2);
    }
    (-d / (2.0 * sigma2)).exp()
}

fn mmd_oracle(p: &Tensor, q: &Tensor, sigma2: f64) -> f64 {
    let d = p.shape()[1];
    let mean_k = |a: &Tensor, b: &Tensor| {
        let (na, nb) = (a.shape()[0], b.shape()[0]);
        let mut s = 0.0;
        for i in 0..na {
            for j in 0..nb {
                s += kernel_oracle(&a.data()[i * d..(i + 1) * d], &b.data()[j * d..(j + 1) * d], sigma2);
            }
        }
        s / (na * nb) as f64
    };
    mean_k(p, p) + mean_k(q, q) - 2.0 * mean_k(p, q)
}

fn c4_mmd() -> Outcome {
    let mut r = rng(4);
    let mut exact = true;
    let mut self_zero = true;
    for n in 1..=10 {
        let p = random_tensor(&mut r, &[n, 5], 0.0, 1.0);
        let q = random_tensor(&mut r, &[11 - n, 5], 0.0, 1.0);
        let s2 = r.random_range(0.1..2.0);
        exact &= mmd_squared(&p, &q, s2).unwrap() == mmd_oracle(&p, &q, s2);
        self_zero &= mmd_squared(&p, &p, s2).unwrap() == 0.0;
    }
    let cloud = |r: &mut rand_chacha::ChaCha8Rng, shift: f32| {
        Tensor::from_fn([200, 2], |i| r.sample::<f32, _>(StandardNormal) + if i % 2 == 0 { shift } else { 0.0 })
    };
    let mut monotone = true;
    for seed in 0..5 {
        let mut r = rng(400 + seed);
        let base = cloud(&mut r, 0.0);
        let mut prev = f64::NEG_INFINITY;
        for shift in [0.0f32, 0.5, 1.0, 2.0] {
            let other = cloud(&mut r, shift);
            let v = mmd_squared(&base, &other, Bandwidth::Median.resolve(&base, &other).unwrap()).unwrap();
            monotone &= v > prev;
            prev = v;
        }
    }
    outcome(
        exact && self_zero && monotone,
        format!("brute-force equality {exact}, mmd(P,P)=0 {self_zero}, monotone over 5 seeds {monotone}"),
    )
}

fn c5_gradients() -> Outcome {
    let mut r = rng(5);
    let mut errors = Vec::new();

    let x = random_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let k = random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    errors.push(("conv", grad_check(&[x, k], &[0, 1], 51, |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap())));

    let x = random_tensor(&mut r, &[2, 4, 3, 3], -1.0, 1.0);
    let k = random_tensor(&mut r, &[4, 2, 3, 3], -0.5, 0.5);
    errors.push((
        "transposed conv",
        grad_check(&[x, k], &[0, 1], 52, |t, v| t.conv2d_transpose(v[0], v[1], 2, 1, 1).unwrap()),
    ));

    let x = random_tensor(&mut r, &[6, 3, 2, 2], -1.0, 1.0);
    let gamma = random_tensor(&mut r, &[3], 0.5, 1.5);
    let beta = random_tensor(&mut r, &[3], -0.5, 0.5);
    errors.push((
        "tdBN",
        grad_check(&[x, gamma, beta], &[0, 1, 2], 53, |t, v| {
            let mut stats = RunningStats::new(3);
            tdbn_forward(t, v[0], v[1], v[2], &mut stats, BnMode::Train).unwrap()
        }),
    ));

    let x = random_tensor(&mut r, &[8, 2, 4, 4], 0.0, 1.0);
    let k = random_tensor(&mut r, &[1, 2, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut r, &[1], -0.5, 0.5);
    errors.push((
        "readout",
        grad_check(&[x, k, b], &[0, 1, 2], 54, |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1).unwrap();
            let y = t.add_bias(y, v[2]).unwrap();
            decode_output(t, y, 4).unwrap()
        }),
    ));

    let noise = random_tensor(&mut r, &[5, 6], -2.0, 2.0);
    let w = random_tensor(&mut r, &[6, 6], -0.5, 0.5);
    let b = random_tensor(&mut r, &[6], -0.5, 0.5);
    errors.push((
        "bottleneck",
        grad_check(&[noise.clone(), w.clone(), b.clone()], &[0, 1, 2], 55, |t, v| prior_rates(t, v[0], v[1], v[2]).unwrap()),
    ));

    let posterior = random_tensor(&mut r, &[4, 6], 0.0, 1.0);
    errors.push((
        "rate to MMD",
        grad_check(&[posterior, noise, w, b], &[0, 2, 3], 56, |t, v| {
            let prior = prior_rates(t, v[1], v[2], v[3]).unwrap();
            mmd_rbf(t, v[0], prior, 0.3).unwrap()
        }),
    ));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let listing: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(worst < FD_TOL, format!("relative errors: {}", listing.join(", ")))
}

fn c10_lif_traces() -> Outcome {
    let trace = |current: f32| {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([12, 1], current));
        let s = lif_sequence(&mut tape, x, 12, LifParams::default()).unwrap();
        tape.value(s).data().to_vec()
    };
    let strong = trace(0.3);
    let weak = trace(0.1);
    outcome(
        strong.iter().all(|&s| s == 1.0) && weak.iter().all(|&s| s == 0.0),
        format!("0.3 fires {}/12 steps, 0.1 fires {}/12 steps", strong.iter().sum::<f32>(), weak.iter().sum::<f32>()),
    )
}

struct Trained {
    seed: u64,
    trainer: Trainer,
    initial_mse: f64,
    final_mse: f64,
    gray_mse: f64,
    train_secs: f64,
}

fn data_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

fn recon_mse(model: &mut Model, images: &Tensor, seed: u64) -> f64 {
    let n = images.shape()[0];
    let mut sum = 0.0;
    for (b, s) in (0..n).step_by(EVAL_BATCH).enumerate() {
        let x = images.slice_rows(s, (s + EVAL_BATCH).min(n));
        let r = reconstruct(model, &x, derive_indexed(seed, "eval", b as u64)).unwrap();
        sum += mse_loss(&r.recon, &x).unwrap() * x.shape()[0] as f64;
    }
    sum / n as f64
}

fn train_desk(seed: u64, train: &Dataset, test: &Tensor) -> Trained {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::desk()
    };
    let mut trainer = Trainer::new(Model::new(&cfg).unwrap());
    let initial_mse = recon_mse(&mut trainer.model, test, 99);
    let gray_mse = mse_loss(&Tensor::full(test.shape().to_vec(), 0.5), test).unwrap();
    let start = Instant::now();
    for _ in 0..5 {
        trainer.train_epoch(train).unwrap();
    }
    let train_secs = start.elapsed().as_secs_f64();
    let final_mse = recon_mse(&mut trainer.model, test, 99);
    Trained {
        seed,
        trainer,
        initial_mse,
        final_mse,
        gray_mse,
        train_secs,
    }
}

fn c6_desk_training(runs: &[Trained]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for t in runs {
        let drop = 1.0 - t.final_mse / t.initial_mse;
        pass &= drop >= 0.5 && t.final_mse < t.gray_mse;
        parts.push(format!(
            "seed {}: {:.4} -> {:.4} (-{:.0}%, gray {:.4}, {:.0} s)",
            t.seed,
            t.initial_mse,
            t.final_mse,
            100.0 * drop,
            t.gray_mse,
            t.train_secs
        ));
    }
    outcome(pass, parts.join("; "))
}

fn c7_shuffle(runs: &mut [Trained], test: &Tensor) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for t in runs.iter_mut() {
        let m = &mut t.trainer.model;
        let time = shuffle_test(m, test, ShuffleDim::Time, EVAL_BATCH, 70).unwrap();
        let length = shuffle_test(m, test, ShuffleDim::Length, EVAL_BATCH, 70).unwrap();
        pass &= time.vs_vanilla < length.vs_vanilla;
        parts.push(format!("seed {}: time {:.5} vs length {:.5}", t.seed, time.vs_vanilla, length.vs_vanilla));
    }
    outcome(pass, format!("loss vs vanilla, {}", parts.join("; ")))
}

fn c8_noise(runs: &mut [Trained], test: &Tensor) -> Outcome {
    let probs = [0.0, 0.05, 0.1, 0.2];
    let mut pass = true;
    let mut parts = Vec::new();
    for t in runs.iter_mut() {
        let curve = noise_curve(&mut t.trainer.model, test, &probs, EVAL_BATCH, 80).unwrap();
        let start = curve[0].loss.vs_original == curve[0].loss.vanilla && curve[0].loss.vs_vanilla == 0.0;
        let rising = curve.windows(2).all(|w| w[1].loss.vs_original >= w[0].loss.vs_original - 1e-3);
        pass &= start && rising;
        let values: Vec<String> = curve.iter().map(|p| format!("{:.4}", p.loss.vs_original)).collect();
        parts.push(format!("seed {}: [{}]", t.seed, values.join(", ")));
    }
    outcome(pass, format!("loss vs original at a = 0, 0.05, 0.1, 0.2: {}", parts.join("; ")))
}

fn c9_probe(runs: &mut [Trained], train: &Dataset, test: &Dataset) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for t in runs.iter_mut() {
        let m = &mut t.trainer.model;
        let tx = encode_rates(m, train.images(), EVAL_BATCH, 90).unwrap();
        let vx = encode_rates(m, test.images(), EVAL_BATCH, 91).unwrap();
        let cfg = ProbeConfig {
            seed: t.seed,
            ..ProbeConfig::default()
        };
        let acc = probe_train_eval(&tx, train.labels().unwrap(), &vx, test.labels().unwrap(), cfg).unwrap().accuracy;
        pass &= acc >= 0.85;
        parts.push(format!("seed {}: {:.2}%", t.seed, 100.0 * acc));
    }
    outcome(pass, format!("test accuracy {}", parts.join(", ")))
}

fn c11_determinism(runs: &mut [Trained], train: &Dataset, test: &Tensor) -> Outcome {
    let small = train.take(128);
    let replay = || {
        let cfg = ModelConfig {
            seed: 11,
            ..ModelConfig::desk()
        };
        let mut t = Trainer::new(Model::new(&cfg).unwrap());
        let metrics = t.train_epoch(&small).unwrap();
        let montage = montage_bytes(&generate_images(&mut t.model, 16, 5).unwrap(), 4).unwrap();
        (metrics, montage)
    };
    let (a, b) = (replay(), replay());
    let replayed = a == b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ckpt");
    let original = &mut runs[0].trainer;
    save_checkpoint(original, &path).unwrap();
    let mut loaded = load_trainer(&path).unwrap();
    let x = test.slice_rows(0, 32);
    let same_forward = reconstruct(&mut original.model, &x, 3).unwrap() == reconstruct(&mut loaded.model, &x, 3).unwrap();
    let same_samples = generate_images(&mut original.model, 8, 4).unwrap() == generate_images(&mut loaded.model, 8, 4).unwrap();
    outcome(
        replayed && same_forward && same_samples,
        format!("replayed metrics and montage identical {replayed}, checkpoint forward identical {same_forward}, samples identical {same_samples}"),
    )
}

fn main() {
    println!("acceptance suite");
    let mut results = vec![
        run(1, "energy arithmetic", Some(Duration::from_secs(1)), c1_energy),
        run(2, "sampler law", Some(Duration::from_secs(10)), c2_sampler_law),
        run(3, "surrogate-gradient expectation", Some(Duration::from_secs(10)), c3_surrogate_expectation),
        run(4, "MMD correctness", Some(Duration::from_secs(30)), c4_mmd),
        run(5, "gradient integrity", Some(Duration::from_secs(120)), c5_gradients),
        run(10, "LIF hand traces", None, c10_lif_traces),
    ];

    let train_full = load_split(&data_dir(), true).expect("bundled training split").resized(32);
    let test_full = load_split(&data_dir(), false).expect("bundled test split").resized(32);
    let train = train_full.take(2000);
    let eval = test_full.images().clone();
    let shuffle_set = eval.slice_rows(0, 500);

    let mut runs = Vec::new();
    let trained = run(6, "desk training", Some(Duration::from_secs(15 * 60)), || {
        runs = SEEDS.iter().map(|&s| train_desk(s, &train, &eval)).collect();
        c6_desk_training(&runs)
    });
    results.push(trained);
    if runs.len() == SEEDS.len() {
        results.push(run(7, "temporal-robustness ordering", None, || c7_shuffle(&mut runs, &shuffle_set)));
        results.push(run(8, "noise curve", None, || c8_noise(&mut runs, &shuffle_set)));
        results.push(run(9, "encoder probe", Some(Duration::from_secs(10 * 60)), || {
            c9_probe(&mut runs, &train_full, &test_full)
        }));
        results.push(run(11, "determinism and round-trip", None, || c11_determinism(&mut runs, &train, &eval)));
    } else {
        for (id, name) in [(7, "temporal-robustness ordering"), (8, "noise curve"), (9, "encoder probe"), (11, "determinism and round-trip")] {
            println!("[FAIL] criterion {id:>2}: {name}: no trained models");
            results.push(false);
        }
    }

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if passed != results.len() && strict {
        std::process::exit(1);
    }
}
