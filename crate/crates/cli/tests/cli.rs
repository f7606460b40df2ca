use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn talkhead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talkhead"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

/// A 4-sequence corpus and a tiny model, rooted at `dir`.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    let doc = format!(
        r#"
[paths]
data_dir = "{d}/data"
checkpoint_dir = "{d}/ckpt"
output_dir = "{d}/out"

[data]
styles = 2
sequences_per_style = 2
seconds = 0.8
grid_rows = 6
grid_cols = 6
val_fraction = 0.0
test_fraction = 0.5

[model]
gat_width = 4
style_dim = 8
audio_content_dim = 8
motion_content_dim = 8
model_dim = 8
heads = 2
encoder_layers = 1
ff_mult = 2
decoder_dim = 8
decoder_heads = 2
decoder_layers = 1
frontend_channels = 8
classifier_hidden = 8

[train]
stage1_steps = 5
stage2_steps = 5
batch_size = 2
window = 12
"#,
        d = dir.display()
    );
    std::fs::write(&path, doc).unwrap();
    path
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, cfg: &Path) {
    let out = talkhead(&["synth-data", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(dir.join("data/manifest.json").exists());
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir);
    synth(dir, &cfg);
    let out = talkhead(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    cfg
}

fn log_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .map(str::to_string)
        .collect()
}

#[test]
fn zero_sequences_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = talkhead(&[
        "synth-data",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "data.sequences_per_style=0",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(doc["entries"].as_array().unwrap().len(), 0);
}

#[test]
fn synthesis_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = talkhead(&["synth-data", "--config", c, "--seed", "5", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", text(&out));
    }
    assert_eq!(files(&a), files(&b));
}

#[test]
fn summary_counts_match_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = talkhead(&["synth-data", "--config", cfg.to_str().unwrap()]);
    let summary = String::from_utf8_lossy(&out.stdout).to_string();
    let data = dir.path().join("data");
    let wavs = std::fs::read_dir(data.join("audio")).unwrap().count();
    let motions = std::fs::read_dir(data.join("motion")).unwrap().count();
    let templates = std::fs::read_dir(data.join("templates")).unwrap().count();
    assert_eq!((wavs, motions), (4, 4));
    assert!(summary.contains(&format!("wrote {wavs} sequences")), "{summary}");
    assert!(summary.contains("train 2, val 0, test 2"), "{summary}");
    assert!(summary.contains(&format!("{templates} identities")), "{summary}");
}

#[test]
fn smoke_training_logs_finite_losses() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let rows = log_rows(&dir.path().join("out/train.log"));
    assert_eq!(rows.len(), 10);
    for row in &rows {
        for v in row.split('\t').skip(2) {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{row}");
        }
    }
    assert!(dir.path().join("ckpt/stage1.ptkc").exists());
    assert!(dir.path().join("ckpt/final.ptkc").exists());
}

#[test]
fn ablation_flags_are_echoed_in_the_log_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    synth(dir.path(), &cfg);
    let out = talkhead(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--disable-cts",
        "--disable-e_g",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let log = std::fs::read_to_string(dir.path().join("out/train.log")).unwrap();
    assert!(log.starts_with("# ablations: cts,e_g\n"), "{log}");
}

#[test]
fn resume_reproduces_the_uninterrupted_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    synth(dir.path(), &cfg);
    let c = cfg.to_str().unwrap();
    let out = talkhead(&["train", "--config", c, "--set", "checkpoint_every=3"]);
    assert!(out.status.success(), "{}", text(&out));
    let full = log_rows(&dir.path().join("out/train.log"));
    let out = talkhead(&[
        "train",
        "--config",
        c,
        "--set",
        &format!("paths.output_dir={}/resumed", dir.path().display()),
        "--set",
        &format!("paths.checkpoint_dir={}/resumed_ckpt", dir.path().display()),
        "--resume",
        dir.path().join("ckpt/step_000006.ptkc").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let resumed = log_rows(&dir.path().join("resumed/train.log"));
    assert_eq!(resumed.len(), 4);
    assert_eq!(&full[6..], &resumed[..]);
}

#[test]
fn invalid_config_names_the_field_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = talkhead(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.batch_size=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("train.batch_size"), "{}", text(&out));
    let out = talkhead(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("bogus"), "{}", text(&out));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = talkhead(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    let out = talkhead(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
}

#[test]
fn generation_is_sized_deterministic_and_identity_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let c = cfg.to_str().unwrap();
    let ckpt = dir.path().join("ckpt/final.ptkc");
    let audio = dir.path().join("data/audio/00000.wav");
    let run = |identity: &str, name: &str| -> Vec<u8> {
        let out_path = dir.path().join(name);
        let out = talkhead(&[
            "generate",
            "--config",
            c,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--audio",
            audio.to_str().unwrap(),
            "--identity",
            identity,
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", text(&out));
        assert!(text(&out).contains("wrote 20 frames"), "{}", text(&out));
        std::fs::read(out_path).unwrap()
    };
    let a = run("0", "a.ptkm");
    let again = run("0", "a2.ptkm");
    let b = run("1", "b.ptkm");
    assert_eq!(a, again);
    assert_ne!(a, b);
}

#[test]
fn style_reference_changes_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let c = cfg.to_str().unwrap();
    let ckpt = dir.path().join("ckpt/final.ptkc");
    let audio = dir.path().join("data/audio/00000.wav");
    let plain = dir.path().join("plain.ptkm");
    let styled = dir.path().join("styled.ptkm");
    let reference = dir.path().join("data/motion/00003.ptkm");
    let base = [
        "generate",
        "--config",
        c,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--audio",
        audio.to_str().unwrap(),
        "--identity",
        "0",
    ];
    let out = talkhead(&[&base[..], &["--out", plain.to_str().unwrap()]].concat());
    assert!(out.status.success(), "{}", text(&out));
    let out = talkhead(
        &[
            &base[..],
            &["--out", styled.to_str().unwrap(), "--style-reference", reference.to_str().unwrap()],
        ]
        .concat(),
    );
    assert!(out.status.success(), "{}", text(&out));
    assert_ne!(std::fs::read(plain).unwrap(), std::fs::read(styled).unwrap());
}

#[test]
fn ground_truth_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    synth(dir.path(), &cfg);
    let json = dir.path().join("gt.json");
    let out = talkhead(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--ground-truth",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(doc["lve"].as_f64(), Some(0.0));
    assert_eq!(doc["fdd"].as_f64(), Some(0.0));
}

#[test]
fn report_rows_average_to_headline_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let json = dir.path().join("eval.json");
    let out = talkhead(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        dir.path().join("ckpt/final.ptkc").to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("LVE") && table.contains("FDD") && table.contains("style silhouette"));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    for key in ["lve", "fdd", "style_silhouette", "sequences"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    let rows = doc["sequences"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let mean = |k: &str| rows.iter().map(|r| r[k].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!((mean("lve") - doc["lve"].as_f64().unwrap()).abs() < 1e-12);
    assert!((mean("fdd") - doc["fdd"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn gradcheck_lists_every_loss_and_passes() {
    let out = talkhead(&["gradcheck"]);
    assert!(out.status.success(), "{}", text(&out));
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    for name in talkhead_core::losses::LOSS_REGISTRY {
        let line = table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(name))
            .unwrap_or_else(|| panic!("{name} missing from\n{table}"));
        assert!(line.ends_with("PASS"), "{line}");
    }
    assert!(table.lines().any(|l| l.starts_with("negative_control") && l.ends_with("PASS")));
}
