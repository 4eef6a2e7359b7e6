use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 3
output_dir = "run"

[model]
image_size = 64
branch_hidden = 8
value_hidden = 8

[training]
stage1_epochs = 1
stage2_epochs = 1
batch_size = 8
learning_rate = 1e-3

[data]
manifest = "data/manifest.tsv"

[data.synth]
n_per_class = 20
side = 64
artifact_strength = 0.5
quality_range = [60, 100]
train_fraction = 0.5
{extra}"#
    );
    let path = dir.join("dpl.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dpl(&[]).status.code(), Some(1));
    assert_eq!(dpl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(dpl(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[bogus]\nx = 1\n");
    let out = dpl(&["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert!(!dir.path().join("data").exists());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn missing_manifest_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dpl(&["--config", cfg.to_str().unwrap(), "fit-indicators"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.tsv"));
}

fn box_blur(path: &Path, out: &Path) {
    let img = image::open(path).unwrap().to_rgb8();
    let (w, h) = img.dimensions();
    let mut dst = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            let mut n = 0;
            for dy in -3i32..=3 {
                for dx in -3i32..=3 {
                    let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                    if xx >= 0 && yy >= 0 && (xx as u32) < w && (yy as u32) < h {
                        let p = img.get_pixel(xx as u32, yy as u32);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                        n += 1;
                    }
                }
            }
            dst.put_pixel(x, y, image::Rgb(acc.map(|v| (v / n) as u8)));
        }
    }
    dst.save(out).unwrap();
}

fn level_of(line: &str) -> usize {
    line.trim().rsplit("level=").next().unwrap().parse().unwrap()
}

#[test]
fn full_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "");
    let cfg = cfg_path.to_str().unwrap();
    let run = dir.path().join("run");

    let o = dpl(&["--config", cfg, "synth"]);
    assert!(o.status.success(), "{o:?}");
    assert!(dir.path().join("data/manifest.tsv").exists());

    let o = dpl(&["--config", cfg, "fit-indicators"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("vqi levels") && text.contains("fii levels"));
    let q1 = std::fs::read(run.join("vqi.quantizer")).unwrap();
    assert!(dpl(&["--config", cfg, "fit-indicators"]).status.success());
    assert_eq!(q1, std::fs::read(run.join("vqi.quantizer")).unwrap());

    // sharp image versus a blurred copy under the proxy quality indicator
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.tsv")).unwrap();
    let best = manifest
        .lines()
        .filter(|l| l.contains("synthetic_fake;q="))
        .max_by_key(|l| l.rsplit("q=").next().unwrap().trim().parse::<u32>().unwrap())
        .unwrap();
    let sharp = dir.path().join("data").join(best.split('\t').next().unwrap());
    let blurred = dir.path().join("blurred.png");
    box_blur(&sharp, &blurred);
    let a = dpl(&["--config", cfg, "score", "vqi", sharp.to_str().unwrap()]);
    let b = dpl(&["--config", cfg, "score", "vqi", blurred.to_str().unwrap()]);
    assert!(a.status.success() && b.status.success());
    let (la, lb) = (level_of(&stdout(&a)), level_of(&stdout(&b)));
    assert!((1..=5).contains(&la) && (1..=5).contains(&lb));
    assert!(la < lb, "sharp level {la}, blurred level {lb}");
    let again = dpl(&["--config", cfg, "score", "vqi", sharp.to_str().unwrap()]);
    assert_eq!(stdout(&a), stdout(&again));

    let o = dpl(&["--config", cfg, "--deterministic", "train"]);
    assert!(o.status.success(), "{o:?}");
    let ckpt = run.join("checkpoints/epoch-002.ckpt");
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    // resume after "interrupting" at epoch 1
    std::fs::remove_file(&ckpt).unwrap();
    let o = dpl(&["--config", cfg, "--deterministic", "train", "--resume"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("epochs run: 1"));
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(), metrics);

    let c = ckpt.to_str().unwrap();
    let o = dpl(&["--config", cfg, "eval", "--checkpoint", c, "--robustness"]);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(run.join("eval/robustness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert!(run.join("eval/robustness.png").exists());
    let o = dpl(&["--config", cfg, "eval", "--checkpoint", c, "--policy", "none"]);
    assert!(o.status.success(), "{o:?}");
    let reports: Vec<_> = std::fs::read_dir(run.join("eval"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("report-") && n.ends_with(".json"))
        .collect();
    assert_eq!(reports.len(), 2, "{reports:?}");

    let emb = dir.path().join("emb.tsv");
    let o = dpl(&["--config", cfg, "export-embeddings", "--checkpoint", c, "--out", emb.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let rows = std::fs::read_to_string(&emb).unwrap();
    assert_eq!(rows.lines().count(), 1 + 20);
    assert_eq!(rows.lines().nth(1).unwrap().split('\t').count(), 3 + 8);
}

#[test]
fn score_without_quantizers_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let img = dir.path().join("x.png");
    image::RgbImage::from_pixel(64, 64, image::Rgb([90, 90, 90])).save(&img).unwrap();
    let o = dpl(&["--config", cfg.to_str().unwrap(), "score", "fii", img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
