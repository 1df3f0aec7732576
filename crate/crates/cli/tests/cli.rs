use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL_RL: &str = r#"
seed = 3

[render]
resolution = 12

[agent]
input_size = 12
hidden = 8
features_per_interaction = 2
convs = [
    { out_channels = 4, kernel = 4, stride = 2 },
    { out_channels = 4, kernel = 3, stride = 1 },
    { out_channels = 3, kernel = 2, stride = 1 },
]

[sac]
total_frames = 600
warmup = 200
batch = 8
log_interval = 200
eval_episodes = 2
"#;

const SMALL_DATA: &str = r#"
[transfer]
epochs = 2
batch_size = 4
seeds = [0]

[transfer.dataset]
samples = 16
"#;

fn tsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsim")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = tsim(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn out(dir: &Path, name: &str) -> (PathBuf, String) {
    let p = dir.join(name);
    let s = p.to_str().unwrap().to_string();
    (p, s)
}

/// File name to SHA-256 for every file in `dir`.
fn hashes(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let bytes = fs::read(e.path()).unwrap();
            (e.file_name().to_string_lossy().into_owned(), hex::encode(Sha256::digest(&bytes)))
        })
        .collect()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tsim(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tsim(&["train-rl", "--frames", "lots"]).status.code(), Some(1));
    assert_eq!(tsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_name_the_key() {
    let t = TempDir::new().unwrap();
    let bad = write_config(t.path(), "bad.toml", "[sac]\ngamma = 1.5\n");
    let (_, o) = out(t.path(), "r");
    let r = tsim(&["--config", &bad, "--out", &o, "train-rl", "--frames", "0"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("sac.gamma"));

    let typo = write_config(t.path(), "typo.toml", "[sac]\ngama = 0.9\n");
    let r = tsim(&["--config", &typo, "--out", &o, "train-rl", "--frames", "0"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("gama"));
}

#[test]
fn zero_frames_writes_an_untrained_checkpoint() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.toml", SMALL_RL);
    let (a, sa) = out(t.path(), "a");
    let (b, sb) = out(t.path(), "b");
    ok(&["--config", &cfg, "--out", &sa, "train-rl", "--frames", "0"]);
    ok(&["--config", &cfg, "--out", &sb, "train-rl", "--frames", "0"]);
    let ck = fs::read(a.join("agent.ckpt")).unwrap();
    assert_eq!(&ck[..4], b"TSIM");
    assert_eq!(ck, fs::read(b.join("agent.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(a.join("metrics.csv")).unwrap().lines().count(), 1);
    assert!(!a.join("eval.csv").exists());
}

#[test]
fn train_rl_is_bytewise_reproducible() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.toml", SMALL_RL);
    let (a, sa) = out(t.path(), "a");
    let (b, sb) = out(t.path(), "b");
    let stdout = ok(&["--config", &cfg, "--out", &sa, "train-rl"]);
    ok(&["--config", &cfg, "--out", &sb, "train-rl"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("frame")).count(), 3);
    let h = hashes(&a);
    assert!(h.contains_key("agent.ckpt") && h.contains_key("metrics.csv") && h.contains_key("eval.csv"));
    assert_eq!(h, hashes(&b));

    let (_, se) = out(t.path(), "e");
    let ck = a.join("agent.ckpt");
    let text = ok(&["--config", &cfg, "--out", &se, "eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "2"]);
    assert!(text.contains("eval (stochastic)"));
}

#[test]
fn eval_policies_without_a_checkpoint() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.toml", SMALL_RL);
    let (_, so) = out(t.path(), "o");
    let text = ok(&["--config", &cfg, "--out", &so, "eval", "--policy", "oracle", "--episodes", "5"]);
    assert!(text.contains("(5/5)"), "{text}");
    let r = tsim(&["--config", &cfg, "--out", &so, "eval", "--policy", "greedy"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn gen_data_is_reproducible_and_splits_by_rule() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.toml", SMALL_DATA);
    let (a, sa) = out(t.path(), "a");
    let (b, sb) = out(t.path(), "b");
    let text = ok(&["--config", &cfg, "--out", &sa, "gen-data"]);
    assert!(text.contains("train 14  test 2"), "{text}");
    ok(&["--config", &cfg, "--out", &sb, "gen-data"]);
    assert_eq!(hashes(&a), hashes(&b));

    let three = write_config(t.path(), "three.toml", "[transfer.dataset]\nsamples = 3\n");
    let (_, s3) = out(t.path(), "three");
    assert!(ok(&["--config", &three, "--out", &s3, "gen-data"]).contains("train 2  test 1"));
}

#[test]
fn transfer_filters_and_reproducibility() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.toml", SMALL_DATA);
    let (d, sd) = out(t.path(), "data");
    ok(&["--config", &cfg, "--out", &sd, "gen-data"]);
    let ds = d.join("dataset.tds");
    let ds = ds.to_str().unwrap();

    let (a, sa) = out(t.path(), "a");
    let (b, sb) = out(t.path(), "b");
    let args = |o: &str| {
        vec![
            "--config", &cfg, "--out", o, "transfer", "--dataset", ds, "--regimes", "random", "--tasks",
            "classification", "--seeds", "0",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    let run = |o: &str| {
        let v = args(o);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run(&sa);
    run(&sb);
    let csv = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert_eq!(hashes(&a), hashes(&b));

    let r = tsim(&["--config", &cfg, "--out", &sa, "transfer", "--dataset", ds, "--regimes", "telepathy"]);
    assert_eq!(r.status.code(), Some(1));
    let r = tsim(&["--config", &cfg, "--out", &sa, "transfer", "--dataset", "/no/such/file.tds"]);
    assert_eq!(r.status.code(), Some(1));
    let r = tsim(&["--config", &cfg, "--out", &sa, "transfer", "--dataset", ds, "--regimes", "proposed"]);
    assert_eq!(r.status.code(), Some(1));

    // report rebuilds the same markdown from the csv
    let md = fs::read(a.join("results.md")).unwrap();
    fs::remove_file(a.join("results.md")).unwrap();
    ok(&["report", "--run", &sa]);
    assert_eq!(fs::read(a.join("results.md")).unwrap(), md);
    let r = tsim(&["report", "--run", t.path().join("missing").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn render_sample_names_and_determinism() {
    let t = TempDir::new().unwrap();
    let (a, sa) = out(t.path(), "a");
    let (b, sb) = out(t.path(), "b");
    let text = ok(&["--seed", "7", "--out", &sa, "render-sample"]);
    ok(&["--seed", "7", "--out", &sb, "render-sample"]);
    assert!(text.contains("class ") && text.contains("bbox cx"));
    assert!(a.join("sample_7_L.png").exists() && a.join("sample_7_R.png").exists());
    assert_eq!(hashes(&a), hashes(&b));

    let (e, se) = out(t.path(), "e");
    ok(&["--seed", "7", "--out", &se, "render-sample", "--empty"]);
    let with = image::open(a.join("sample_7_L.png")).unwrap().to_rgb8();
    let without = image::open(e.join("sample_7_L.png")).unwrap().to_rgb8();
    // the overlay colour only appears when there is an object
    let yellow = |img: &image::RgbImage| img.pixels().filter(|p| p.0 == [255, 230, 0]).count();
    assert!(yellow(&with) > 0);
    assert_eq!(yellow(&without), 0);
    // empty left eye: sky on top, floor at the bottom, constant along each row
    for row in 0..without.height() {
        let first = without.get_pixel(0, row);
        assert!((0..without.width()).all(|c| without.get_pixel(c, row) == first));
    }
}
