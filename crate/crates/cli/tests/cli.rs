use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

fn spikevae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikevae")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 12] = [
    "--set", "image_size=8", "--set", "channels=4,8", "--set", "latent_dim=16", "--set", "steps=4", "--set", "batch_size=16",
    "--set", "epochs=2",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let data = data_dir();
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--limit", "32"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    spikevae(&args)
}

/// One tiny trained run shared by the checkpoint commands.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let o = train_tiny(dir.path(), &["--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    })
    .path()
}

fn checkpoint() -> String {
    trained().join("checkpoint.ckpt").display().to_string()
}

#[test]
fn train_writes_artifacts_and_replays_from_the_resolved_config() {
    let first = trained();
    for f in ["config-resolved", "metrics.csv", "checkpoint.ckpt", "recon-epoch-001.pgm", "recon-epoch-002.pgm"] {
        assert!(first.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(first.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,mse,mmd2,total,mean_rate\n"));
    let resolved = fs::read_to_string(first.join("config-resolved")).unwrap();
    assert!(resolved.contains("command = train\n"));
    assert!(resolved.contains("seed = 4\n"));
    assert!(resolved.contains("channels = 4,8\n"));

    let again = tempfile::tempdir().unwrap();
    let o = spikevae(&[
        "train",
        "--config",
        first.join("config-resolved").to_str().unwrap(),
        "--out",
        again.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.csv", "checkpoint.ckpt", "recon-epoch-002.pgm", "config-resolved"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn missing_dataset_exits_3_naming_the_path() {
    let out = tempfile::tempdir().unwrap();
    let o = spikevae(&["train", "--data", "/no/such/mnist", "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("/no/such/mnist"), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_2() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let data = data_dir();
    let data = data.to_str().unwrap();
    assert_eq!(code(&spikevae(&["train", "--data", data, "--out", dir, "--set", "bogus=1"])), 2);
    assert_eq!(code(&spikevae(&["train", "--data", data, "--out", dir, "--set", "lr=fast"])), 2);
    assert_eq!(code(&spikevae(&["train", "--data", data, "--out", dir, "--set", "image_size=30"])), 2);
    assert_eq!(code(&spikevae(&["train", "--data", data, "--out", dir, "--config", "/no/such/file"])), 2);
    assert_eq!(code(&spikevae(&["train", "--out", dir])), 2);
    assert_eq!(code(&spikevae(&["generate", "--out", dir])), 2);
}

#[test]
fn diverging_training_exits_4() {
    let out = tempfile::tempdir().unwrap();
    let o = train_tiny(out.path(), &["--set", "lr=1e30", "--set", "epochs=3"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn generation_is_reproducible_and_single_tiles_fit() {
    let ckpt = checkpoint();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = spikevae(&["generate", "--checkpoint", &ckpt, "--num", "6", "--seed", "9", "--out", d.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["generated.pgm", "generated-rates.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let rates = fs::read_to_string(a.path().join("generated-rates.csv")).unwrap();
    assert_eq!(rates.lines().count(), 7);

    let one = tempfile::tempdir().unwrap();
    let o = spikevae(&["generate", "--checkpoint", &ckpt, "--num", "1", "--out", one.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(fs::read(one.path().join("generated.pgm")).unwrap().starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    let bytes = fs::read(checkpoint()).unwrap();
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let o = spikevae(&["generate", "--checkpoint", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

fn eval_args<'a>(cmd: &'a str, ckpt: &'a str, data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![cmd, "--checkpoint", ckpt, "--data", data, "--out", out, "--limit", "40"]
}

#[test]
fn robustness_commands_write_their_tables() {
    let ckpt = checkpoint();
    let data = data_dir().display().to_string();
    let out = tempfile::tempdir().unwrap();
    let o_dir = out.path().to_str().unwrap();

    let o = spikevae(&[eval_args("shuffle-test", &ckpt, &data, o_dir), vec!["--dim", "length"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.path().join("shuffle-length.csv")).unwrap();
    assert!(table.starts_with("dim,images,vs_original,vs_vanilla,vanilla\nlength,40,"));
    assert!(out.path().join("shuffle-length.pgm").exists());
    assert_eq!(code(&spikevae(&[eval_args("shuffle-test", &ckpt, &data, o_dir), vec!["--dim", "depth"]].concat())), 2);

    let o = spikevae(&[eval_args("noise-test", &ckpt, &data, o_dir), vec!["--probs", "0,0.1"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curve = fs::read_to_string(out.path().join("noise.csv")).unwrap();
    let first: Vec<&str> = curve.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((first[0], first[2]), ("0", "0"));
    assert_eq!(code(&spikevae(&[eval_args("noise-test", &ckpt, &data, o_dir), vec!["--probs", ""]].concat())), 2);
}

#[test]
fn energy_from_a_preset_and_from_a_checkpoint() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let o = spikevae(&["energy", "--arch", "desk", "--rate", "0", "--out", dir]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.path().join("energy.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 11 + 1);
    assert!(table.lines().last().unwrap().starts_with("total,"));
    assert!(table.lines().last().unwrap().ends_with(",0"));

    let data = data_dir().display().to_string();
    let o = spikevae(&["energy", "--checkpoint", &checkpoint(), "--data", &data, "--limit", "20", "--out", dir]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&spikevae(&["energy", "--out", dir])), 2);
    assert_eq!(code(&spikevae(&["energy", "--arch", "desk", "--out", dir])), 2);
}

#[test]
fn probe_and_histograms() {
    let ckpt = checkpoint();
    let data = data_dir().display().to_string();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();

    let o = spikevae(&[eval_args("probe", &ckpt, &data, dir), vec!["--test-limit", "30", "--epochs", "2"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.path().join("probe.csv")).unwrap();
    assert!(table.starts_with("accuracy,final_loss,epochs,train_images,test_images\n"));
    assert!(table.trim_end().ends_with(",2,40,30"));

    let o = spikevae(&[eval_args("rate-hist", &ckpt, &data, dir), vec!["--bins", "2"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist = fs::read_to_string(out.path().join("rate-hist.csv")).unwrap();
    let rows: Vec<Vec<f64>> = hist.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    for col in [2, 3] {
        let mass: f64 = rows.iter().map(|r| r[col]).sum();
        assert!((mass - 1.0).abs() < 1e-5, "column {col} sums to {mass}");
    }
    let first = hist.clone();
    spikevae(&[eval_args("rate-hist", &ckpt, &data, dir), vec!["--bins", "2"]].concat());
    assert_eq!(fs::read_to_string(out.path().join("rate-hist.csv")).unwrap(), first);
}
