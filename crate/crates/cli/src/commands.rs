use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use spikevae::checkpoint::{load_trainer, save_checkpoint};
use spikevae::data::load_split;
use spikevae::experiments::{energy_table, measured_rate, noise_curve, rate_histograms, shuffle_test as run_shuffle, ShuffleDim};
use spikevae::io::{sig6, write_csv, write_montage};
use spikevae::latent::{shuffle_length, shuffle_time};
use spikevae::probe::{encode_rates, probe_train_eval, ProbeConfig};
use spikevae::rng::derive_indexed;
use spikevae::train::{decode_spikes, generate_images, reconstruct, sample_prior};
use spikevae::{ArchScale, Dataset, Error, Model, ModelConfig, Tensor, Trainer};

use crate::settings::{Settings, Sources};
use crate::{Common, EnergyArgs, EvalArgs, GenerateArgs, NoiseArgs, ProbeArgs, RateHistArgs, ShuffleArgs, TrainArgs};

const MONTAGE_IMAGES: usize = 8;

impl Common {
    fn sources(&self) -> Sources<'_> {
        Sources {
            config: self.config.as_deref(),
            set: &self.set,
        }
    }
}

fn text<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn path_text(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_resolved(dir: &Path, text: &str) -> Result<()> {
    let path = dir.join("config-resolved");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// A split resized to the model's input size, optionally truncated.
fn load_images(dir: &Path, train: bool, cfg: &ModelConfig, limit: usize) -> Result<Dataset> {
    let ds = load_split(dir, train)?;
    let [c, h, w] = ds.image_shape();
    if c != cfg.image_channels || h != w {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            reason: format!("images are {c}×{h}×{w}; the model expects {} square channel(s)", cfg.image_channels),
        }
        .into());
    }
    let ds = if limit > 0 { ds.take(limit) } else { ds };
    Ok(ds.resized(cfg.image_size))
}

/// Stacks image tensors `(n_i, c, h, w)` along the first axis.
fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("parts share a per-image shape")
}

pub fn train(a: TrainArgs) -> Result<()> {
    let base = if a.desk_scale { ModelConfig::desk() } else { ModelConfig::default() };
    let s = Settings::resolve(
        Some(base),
        &[("data", ""), ("limit", "0"), ("sample_every", "1")],
        &a.common.sources(),
        vec![
            ("data", path_text(&a.data)),
            ("seed", text(a.seed)),
            ("epochs", text(a.epochs)),
            ("limit", text(a.limit)),
            ("sample_every", text(a.sample_every)),
        ],
    )?;
    let data = load_images(&s.required_path("data")?, true, &s.model, s.get("limit")?)?;
    let every: usize = s.get("sample_every")?;
    let out = &a.common.out;
    prepare_out(out)?;
    write_resolved(out, &s.to_text("train", None))?;

    let mut trainer = Trainer::new(Model::new(&s.model)?);
    let shown = data.take(MONTAGE_IMAGES).images().clone();
    let header = ["epoch", "mse", "mmd2", "total", "mean_rate"];
    let mut rows = Vec::new();
    for _ in 0..s.model.epochs {
        let m = trainer.train_epoch(&data).with_context(|| format!("training epoch {}", trainer.epoch + 1))?;
        eprintln!(
            "epoch {}: mse {:.5}  mmd2 {:.5}  total {:.5}  rate {:.3}",
            m.epoch, m.mse, m.mmd2, m.total, m.mean_rate
        );
        rows.push(vec![m.epoch.to_string(), sig6(m.mse), sig6(m.mmd2), sig6(m.total), sig6(m.mean_rate)]);
        write_csv(&header, &rows, &out.join("metrics.csv"))?;
        save_checkpoint(&trainer, &out.join("checkpoint.ckpt"))?;
        if every > 0 && m.epoch % every as u64 == 0 {
            let r = reconstruct(&mut trainer.model, &shown, derive_indexed(s.model.seed, "montage", m.epoch))?;
            let path = out.join(format!("recon-epoch-{:03}.pgm", m.epoch));
            write_montage(&stack(&[&shown, &r.recon]), MONTAGE_IMAGES, &path)?;
        }
    }
    Ok(())
}

fn load_checkpoint_model(s: &Settings) -> Result<Model> {
    Ok(load_trainer(&s.required_path("checkpoint")?)?.model)
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let s = Settings::resolve(
        None,
        &[("checkpoint", ""), ("num", "64"), ("seed", "0"), ("cols", "8")],
        &a.common.sources(),
        vec![
            ("checkpoint", path_text(&a.checkpoint)),
            ("num", text(a.num)),
            ("seed", text(a.seed)),
            ("cols", text(a.cols)),
        ],
    )?;
    let mut model = load_checkpoint_model(&s)?;
    let (n, seed, cols): (usize, u64, usize) = (s.get("num")?, s.get("seed")?, s.get("cols")?);
    let out = &a.common.out;
    prepare_out(out)?;
    write_resolved(out, &s.to_text("generate", Some(model.config())))?;

    let images = generate_images(&mut model, n, seed)?;
    if n > 0 {
        write_montage(&images, cols, &out.join("generated.pgm"))?;
    }
    let rates = sample_prior(&model, n, seed)?;
    let d = rates.neurons();
    let mut header = vec!["image".to_string(), "mean_rate".to_string()];
    header.extend((0..d).map(|i| format!("r{i}")));
    let rows: Vec<Vec<String>> = (0..n)
        .map(|b| {
            let row = rates.row(b);
            let mean = row.iter().map(|&r| r as f64).sum::<f64>() / d as f64;
            let mut cells = vec![b.to_string(), sig6(mean)];
            cells.extend(row.iter().map(|&r| sig6(r as f64)));
            cells
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&header, &rows, &out.join("generated-rates.csv"))?;
    eprintln!("generated {n} images");
    Ok(())
}

/// Settings, model and test images shared by the checkpoint experiments.
struct Eval {
    settings: Settings,
    model: Model,
    images: Dataset,
    seed: u64,
    batch: usize,
}

fn eval_setup(a: &EvalArgs, extra: &[(&str, &str)], flags: Vec<(&str, Option<String>)>, limit: &str) -> Result<Eval> {
    let mut defaults = vec![("checkpoint", ""), ("data", ""), ("seed", "0"), ("limit", limit), ("eval_batch", "100")];
    defaults.extend_from_slice(extra);
    let mut all_flags = vec![
        ("checkpoint", path_text(&a.checkpoint)),
        ("data", path_text(&a.data)),
        ("seed", text(a.seed)),
        ("limit", text(a.limit)),
    ];
    all_flags.extend(flags);
    let settings = Settings::resolve(None, &defaults, &a.common.sources(), all_flags)?;
    let model = load_checkpoint_model(&settings)?;
    let images = load_images(&settings.required_path("data")?, false, model.config(), settings.get("limit")?)?;
    let (seed, batch) = (settings.get("seed")?, settings.get("eval_batch")?);
    Ok(Eval {
        settings,
        model,
        images,
        seed,
        batch,
    })
}

pub fn shuffle_test(a: ShuffleArgs) -> Result<()> {
    let mut e = eval_setup(&a.eval, &[("dim", "time")], vec![("dim", a.dim.clone())], "1000")?;
    let dim_name = e.settings.raw("dim").to_string();
    let dim: ShuffleDim = dim_name.parse()?;
    let out = &a.eval.common.out;
    prepare_out(out)?;
    write_resolved(out, &e.settings.to_text("shuffle-test", Some(e.model.config())))?;

    let r = run_shuffle(&mut e.model, e.images.images(), dim, e.batch, e.seed)?;
    write_csv(
        &["dim", "images", "vs_original", "vs_vanilla", "vanilla"],
        &[vec![dim_name.clone(), e.images.len().to_string(), sig6(r.vs_original), sig6(r.vs_vanilla), sig6(r.vanilla)]],
        &out.join(format!("shuffle-{dim_name}.csv")),
    )?;
    println!("{dim_name} shuffle: vs original {:.6}, vs vanilla {:.6} (vanilla {:.6})", r.vs_original, r.vs_vanilla, r.vanilla);

    // originals, vanilla reconstructions, shuffled decodings
    let shown = e.images.take(MONTAGE_IMAGES).images().clone();
    if shown.shape()[0] > 0 {
        let vanilla = reconstruct(&mut e.model, &shown, derive_indexed(e.seed, "montage", 0))?;
        let s = derive_indexed(e.seed, "montage-shuffle", 0);
        let z = match dim {
            ShuffleDim::Time => shuffle_time(&vanilla.latent, s),
            ShuffleDim::Length => shuffle_length(&vanilla.latent, s),
        };
        let shuffled = decode_spikes(&mut e.model, &z)?;
        let montage = stack(&[&shown, &vanilla.recon, &shuffled]);
        write_montage(&montage, shown.shape()[0], &out.join(format!("shuffle-{dim_name}.pgm")))?;
    }
    Ok(())
}

fn parse_probs(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("cannot parse flip probability {p:?}")).into()))
        .collect()
}

pub fn noise_test(a: NoiseArgs) -> Result<()> {
    let mut e = eval_setup(&a.eval, &[("probs", "0,0.02,0.05,0.1,0.2")], vec![("probs", a.probs.clone())], "1000")?;
    let probs = parse_probs(e.settings.raw("probs"))?;
    let out = &a.eval.common.out;
    prepare_out(out)?;
    write_resolved(out, &e.settings.to_text("noise-test", Some(e.model.config())))?;

    let curve = noise_curve(&mut e.model, e.images.images(), &probs, e.batch, e.seed)?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|p| vec![sig6(p.prob), sig6(p.loss.vs_original), sig6(p.loss.vs_vanilla)])
        .collect();
    write_csv(&["prob", "vs_original", "vs_vanilla"], &rows, &out.join("noise.csv"))?;
    for p in &curve {
        println!("a = {:<6} vs original {:.6}  vs vanilla {:.6}", p.prob, p.loss.vs_original, p.loss.vs_vanilla);
    }
    Ok(())
}

pub fn energy(a: EnergyArgs) -> Result<()> {
    let e = &a.eval;
    let s = Settings::resolve(
        None,
        &[
            ("checkpoint", ""),
            ("arch", ""),
            ("rate", ""),
            ("data", ""),
            ("seed", "0"),
            ("limit", "256"),
            ("eval_batch", "100"),
        ],
        &e.common.sources(),
        vec![
            ("checkpoint", path_text(&e.checkpoint)),
            ("arch", a.arch.clone()),
            ("rate", text(a.rate)),
            ("data", path_text(&e.data)),
            ("seed", text(e.seed)),
            ("limit", text(e.limit)),
        ],
    )?;
    let mut model = match (s.path("checkpoint"), s.raw("arch")) {
        (Some(_), "") => load_checkpoint_model(&s)?,
        (None, "") => return Err(Error::Config("supply --checkpoint or --arch".into()).into()),
        (None, arch) => {
            let cfg = match arch.parse::<ArchScale>()? {
                ArchScale::Full => ModelConfig::default(),
                ArchScale::Desk => ModelConfig::desk(),
            };
            Model::new(&cfg)?
        }
        (Some(_), _) => return Err(Error::Config("--checkpoint and --arch are exclusive".into()).into()),
    };
    let rate = match (s.raw("rate"), s.path("data")) {
        ("", Some(dir)) if s.path("checkpoint").is_some() => {
            let images = load_images(&dir, false, model.config(), s.get("limit")?)?;
            measured_rate(&mut model, images.images(), s.get("eval_batch")?, s.get("seed")?)?
        }
        ("", _) => return Err(Error::Config("supply --rate, or --checkpoint with --data to measure it".into()).into()),
        _ => s.get("rate")?,
    };
    let out = &e.common.out;
    prepare_out(out)?;
    let stored = s.path("checkpoint").map(|_| model.config().clone());
    write_resolved(out, &s.to_text("energy", stored.as_ref()))?;

    let (layers, total) = energy_table(&model, rate)?;
    let row = |name: &str, r: &spikevae::EnergyReport| {
        vec![
            name.to_string(),
            sig6(r.flops_add),
            sig6(r.flops_mul),
            sig6(r.avg_rate),
            r.steps.to_string(),
            sig6(r.sops),
            sig6(r.energy_joules),
        ]
    };
    let mut rows: Vec<Vec<String>> = layers.iter().map(|l| row(&l.name, &l.report)).collect();
    rows.push(row("total", &total));
    write_csv(
        &["layer", "flops_add", "flops_mul", "avg_rate", "steps", "sops", "energy_joules"],
        &rows,
        &out.join("energy.csv"),
    )?;
    println!(
        "add {:.4e}  mul {:.4e}  rate {:.4}  SOPs {:.4e}  energy {:.4e} J",
        total.flops_add, total.flops_mul, total.avg_rate, total.sops, total.energy_joules
    );
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let e = &a.eval;
    let s = Settings::resolve(
        None,
        &[
            ("checkpoint", ""),
            ("data", ""),
            ("seed", "0"),
            ("limit", "0"),
            ("test_limit", "0"),
            ("epochs", "30"),
            ("probe_lr", "0.01"),
            ("probe_batch", "32"),
            ("eval_batch", "100"),
        ],
        &e.common.sources(),
        vec![
            ("checkpoint", path_text(&e.checkpoint)),
            ("data", path_text(&e.data)),
            ("seed", text(e.seed)),
            ("limit", text(e.limit)),
            ("test_limit", text(a.test_limit)),
            ("epochs", text(a.epochs)),
        ],
    )?;
    let mut model = load_checkpoint_model(&s)?;
    let dir = s.required_path("data")?;
    let train = load_images(&dir, true, model.config(), s.get("limit")?)?;
    let test = load_images(&dir, false, model.config(), s.get("test_limit")?)?;
    let labels = |ds: &Dataset| -> Result<Vec<u8>> {
        ds.labels().map(<[u8]>::to_vec).ok_or_else(|| {
            Error::Load {
                path: dir.clone(),
                reason: "the probe needs label files".into(),
            }
            .into()
        })
    };
    let (train_y, test_y) = (labels(&train)?, labels(&test)?);
    let out = &e.common.out;
    prepare_out(out)?;
    write_resolved(out, &s.to_text("probe", Some(model.config())))?;

    let (seed, batch): (u64, usize) = (s.get("seed")?, s.get("eval_batch")?);
    let tx = encode_rates(&mut model, train.images(), batch, derive_indexed(seed, "probe-train", 0))?;
    let vx = encode_rates(&mut model, test.images(), batch, derive_indexed(seed, "probe-test", 0))?;
    let cfg = ProbeConfig {
        epochs: s.get("epochs")?,
        batch_size: s.get("probe_batch")?,
        lr: s.get("probe_lr")?,
        seed,
    };
    let r = probe_train_eval(&tx, &train_y, &vx, &test_y, cfg)?;
    write_csv(
        &["accuracy", "final_loss", "epochs", "train_images", "test_images"],
        &[vec![sig6(r.accuracy), sig6(r.final_loss), cfg.epochs.to_string(), train.len().to_string(), test.len().to_string()]],
        &out.join("probe.csv"),
    )?;
    println!("probe accuracy {:.2}%", 100.0 * r.accuracy);
    Ok(())
}

pub fn rate_hist(a: RateHistArgs) -> Result<()> {
    let mut e = eval_setup(
        &a.eval,
        &[("bins", "20"), ("num_prior", "1000")],
        vec![("bins", text(a.bins))],
        "1000",
    )?;
    let (bins, n_prior): (usize, usize) = (e.settings.get("bins")?, e.settings.get("num_prior")?);
    let out = &a.eval.common.out;
    prepare_out(out)?;
    write_resolved(out, &e.settings.to_text("rate-hist", Some(e.model.config())))?;

    let (post, prior) = rate_histograms(&mut e.model, e.images.images(), n_prior, bins, e.batch, e.seed)?;
    let rows: Vec<Vec<String>> = (0..bins)
        .map(|i| vec![sig6(post.edges[i]), sig6(post.edges[i + 1]), sig6(post.freq[i]), sig6(prior.freq[i])])
        .collect();
    write_csv(&["bin_start", "bin_end", "posterior", "prior"], &rows, &out.join("rate-hist.csv"))?;
    eprintln!("wrote {bins}-bin histograms of {} posterior and {n_prior} prior rate vectors", e.images.len());
    Ok(())
}
