//! Manifests, JPEG augmentation and the synthetic artifact dataset.
//!
//! Manifest format (UTF-8, tab-separated):
//!
//! ```text
//! # dpl manifest v1
//! path	label	split	source_tag
//! images/real_0000.jpg	0	train	synthetic_real;q=57
//! ```
//!
//! The first line is the versioned header and the second names the
//! columns. Blank lines and further `#` lines are ignored. Relative paths
//! resolve against the manifest's directory. A completely empty file is an
//! empty manifest.

use std::collections::HashSet;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FaceImage;
use crate::config::{CompressionMode, CompressionPolicy, SynthConfig};
use crate::error::{Error, Result};
use crate::indicators::splitmix64;

pub const MANIFEST_HEADER: &str = "# dpl manifest v1";
pub const MANIFEST_COLUMNS: &str = "path\tlabel\tsplit\tsource_tag";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub split: Split,
    pub source_tag: String,
}

impl ManifestEntry {
    /// Breakdown key: the source tag up to its first `;`.
    pub fn source(&self) -> &str {
        self.source_tag.split(';').next().unwrap_or("")
    }
}

/// Parses manifest text; `origin` is used for error messages and to
/// resolve relative paths.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let base = origin.parent().unwrap_or(Path::new(""));
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let mut entries = Vec::new();
    let Some((_, first)) = lines.next() else {
        return Ok(entries);
    };
    if first.trim() != MANIFEST_HEADER {
        return Err(err(1, format!("expected header `{MANIFEST_HEADER}`")));
    }
    match lines.next() {
        None => return Ok(entries),
        Some((n, cols)) if cols.trim() != MANIFEST_COLUMNS => {
            return Err(err(n, "expected columns path, label, split, source_tag".into()))
        }
        Some(_) => {}
    }
    let mut seen = HashSet::new();
    for (n, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(n, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(err(n, "empty path".into()));
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(n, format!("label must be 0 or 1, got `{other}`"))),
        };
        let split = fields[2].parse::<Split>().map_err(|m| err(n, m))?;
        let path = base.join(fields[0]);
        if !seen.insert(path.clone()) {
            return Err(err(n, format!("duplicate entry `{}`", fields[0])));
        }
        entries.push(ManifestEntry {
            path,
            label,
            split,
            source_tag: fields[3].to_string(),
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Renders entries with paths relative to `dir` where possible.
pub fn render_manifest(entries: &[ManifestEntry], dir: &Path) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n{MANIFEST_COLUMNS}\n");
    for e in entries {
        let p = e.path.strip_prefix(dir).unwrap_or(&e.path);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.display(),
            e.label,
            e.split,
            e.source_tag
        ));
    }
    out
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    std::fs::write(path, render_manifest(entries, dir)).map_err(|e| Error::io(path, e))
}

/// Loads every entry's image in manifest order, resized to `side`.
pub fn load_images(entries: &[ManifestEntry], side: usize) -> Result<Vec<FaceImage>> {
    entries
        .par_iter()
        .map(|e| FaceImage::load(&e.path, Some(side)))
        .collect()
}

/// Mixes a root seed with a path of indices (worker, epoch, sample, ...).
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |h, &x| splitmix64(h ^ splitmix64(x)))
}

pub fn jpeg_roundtrip(image: &FaceImage, quality: u8) -> Result<FaceImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&image.to_rgb())
        .map_err(|e| Error::Codec(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(format!("jpeg decode: {e}")))?
        .to_rgb8();
    FaceImage::from_rgb(&decoded)
}

/// Applies the compression policy. `random_jpeg` draws the quality
/// uniformly from the inclusive range; `fixed_jpeg` uses its lower end.
pub fn jpeg_augment(image: &FaceImage, policy: &CompressionPolicy, rng: &mut ChaCha8Rng) -> Result<FaceImage> {
    policy.validate()?;
    let [lo, hi] = policy.quality_range;
    match policy.mode {
        CompressionMode::None => Ok(image.clone()),
        CompressionMode::FixedJpeg => jpeg_roundtrip(image, lo),
        CompressionMode::RandomJpeg => jpeg_roundtrip(image, rng.random_range(lo..=hi)),
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural face-like texture: background, shaded skin ellipse, eyes,
/// brows and mouth, low-frequency skin variation and mild sensor noise.
/// Returns linear RGB in [0, 255] as f64 plus the face geometry.
fn synth_face(side: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, (f64, f64, f64, f64)) {
    let s = side as f64;
    let cx = s * (0.5 + rng.random_range(-0.04..0.04));
    let cy = s * (0.52 + rng.random_range(-0.04..0.04));
    let rx = s * rng.random_range(0.28..0.35);
    let ry = s * rng.random_range(0.36..0.44);
    let skin_r: f64 = rng.random_range(150.0..230.0);
    let skin = [
        skin_r,
        skin_r * rng.random_range(0.70..0.85),
        skin_r * rng.random_range(0.55..0.72),
    ];
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..120.0));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / s,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(2.0..7.0),
            )
        })
        .collect();
    let eye_dx = rx * rng.random_range(0.32..0.42);
    let eye_y = cy - ry * rng.random_range(0.18..0.28);
    let (eye_rx, eye_ry) = (rx * 0.14, ry * 0.07);
    let mouth_y = cy + ry * rng.random_range(0.40..0.52);
    let (mouth_rx, mouth_ry) = (rx * rng.random_range(0.28..0.42), ry * 0.06);
    let noise = Normal::new(0.0, 2.0).expect("valid sigma");
    let mut out = vec![0.0; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let inside = 1.0 - smoothstep(0.9, 1.05, d);
            let shade = 1.0 - 0.25 * d.min(1.0);
            let wave: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * fx + ky * fy + ph).sin())
                .sum();
            let mut px: [f64; 3] = std::array::from_fn(|c| {
                inside * (skin[c] * shade + wave) + (1.0 - inside) * (bg[c] + 0.3 * wave)
            });
            for side_sign in [-1.0, 1.0] {
                let e = ((fx - cx - side_sign * eye_dx) / eye_rx).powi(2) + ((fy - eye_y) / eye_ry).powi(2);
                let w = 1.0 - smoothstep(0.7, 1.0, e);
                let b = ((fx - cx - side_sign * eye_dx) / (eye_rx * 1.3)).powi(2)
                    + ((fy - eye_y + eye_ry * 2.6) / (eye_ry * 0.5)).powi(2);
                let wb = 1.0 - smoothstep(0.6, 1.0, b);
                for (c, v) in px.iter_mut().enumerate() {
                    *v = *v * (1.0 - w) + w * [50.0, 40.0, 35.0][c];
                    *v = *v * (1.0 - 0.6 * wb) + 0.6 * wb * 60.0;
                }
            }
            let m = ((fx - cx) / mouth_rx).powi(2) + ((fy - mouth_y) / mouth_ry).powi(2);
            let wm = 1.0 - smoothstep(0.6, 1.0, m);
            for (c, v) in px.iter_mut().enumerate() {
                *v = *v * (1.0 - wm) + wm * [150.0, 60.0, 65.0][c];
            }
            let i = (y * side + x) * 3;
            for c in 0..3 {
                out[i + c] = px[c] + noise.sample(rng);
            }
        }
    }
    (out, (cx, cy, rx, ry))
}

/// Plants a localized high-frequency pattern inside the face: a windowed
/// checkerboard-like texture of period 2 to 4 pixels over a square patch
/// of side `side / 4`, amplitude `48 · strength` gray levels.
fn plant_artifact(pixels: &mut [f64], side: usize, geom: (f64, f64, f64, f64), strength: f64, rng: &mut ChaCha8Rng) {
    if strength <= 0.0 {
        return;
    }
    let (cx, cy, rx, ry) = geom;
    let half = side as f64 / 4.0;
    let ax = cx + rx * rng.random_range(-0.45..0.45);
    let ay = cy + ry * rng.random_range(-0.45..0.45);
    let period = rng.random_range(2..=4) as f64;
    let (phx, phy) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    let amp = 96.0 * strength;
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = ((fx - ax) / half, (fy - ay) / half);
            if dx.abs() >= 1.0 || dy.abs() >= 1.0 {
                continue;
            }
            let window = (0.5 + 0.5 * (std::f64::consts::PI * dx).cos()) * (0.5 + 0.5 * (std::f64::consts::PI * dy).cos());
            let sx = (std::f64::consts::TAU * (fx + phx) / period).sin();
            let sy = (std::f64::consts::TAU * (fy + phy) / period).sin();
            let pattern = (sx * sy).signum();
            let i = (y * side + x) * 3;
            for c in 0..3 {
                pixels[i + c] += amp * window * pattern * tint[c];
            }
        }
    }
}

fn to_image(side: usize, pixels: &[f64]) -> FaceImage {
    let bytes = pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    FaceImage::new(side, side, bytes).expect("synthetic image is well-formed")
}

/// One synthetic sample before compression.
pub fn synth_image(side: usize, label: u8, artifact_strength: f64, seed: u64, index: usize) -> FaceImage {
    // real and fake with the same index share the face; only fakes get the artifact
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64]));
    let (mut px, geom) = synth_face(side, &mut rng);
    let mut art_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64, 1]));
    if label == 1 {
        plant_artifact(&mut px, side, geom, artifact_strength, &mut art_rng);
    }
    to_image(side, &px)
}

/// Result of [`make_synthetic_dataset`].
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Writes `2 · n_per_class` JPEG images and a manifest into `out_dir`.
///
/// Each image is stored at a JPEG quality drawn uniformly from
/// `quality_range`, independently of its class; the quality is recorded in
/// the source tag (`synthetic_real;q=57`). Within each class the first
/// `round(n · train_fraction)` images form the training split.
pub fn make_synthetic_dataset(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<SyntheticDataset> {
    if config.n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let n_train = ((config.n_per_class as f64 * config.train_fraction).round() as usize).min(config.n_per_class);
    let [lo, hi] = config.quality_range;
    let jobs: Vec<(u8, usize)> = (0..2u8)
        .flat_map(|label| (0..config.n_per_class).map(move |i| (label, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(label, i)| -> Result<ManifestEntry> {
            let img = synth_image(config.side, label, config.artifact_strength, seed, i);
            let mut qrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[label as u64, i as u64, 2]));
            let quality: u8 = qrng.random_range(lo..=hi);
            let class = if label == 0 { "real" } else { "fake" };
            let path = img_dir.join(format!("{class}_{i:05}.jpg"));
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, quality)
                .encode_image(&img.to_rgb())
                .map_err(|e| Error::Codec(format!("jpeg encode: {e}")))?;
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            Ok(ManifestEntry {
                path,
                label,
                split: if i < n_train { Split::Train } else { Split::Test },
                source_tag: format!("synthetic_{class};q={quality}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest_path = out_dir.join("manifest.tsv");
    write_manifest(&manifest_path, &entries)?;
    Ok(SyntheticDataset {
        manifest_path,
        entries,
    })
}

/// Images plus labels for one split, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<FaceImage>,
}

impl Dataset {
    pub fn load(manifest: &Path, split: Split, side: usize) -> Result<Self> {
        let entries: Vec<_> = load_manifest(manifest)?
            .into_iter()
            .filter(|e| e.split == split)
            .collect();
        let images = load_images(&entries, side)?;
        Ok(Self { entries, images })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "# dpl manifest v1\npath\tlabel\tsplit\tsource_tag\n";

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("", Path::new("m.tsv")).unwrap().is_empty());
        assert!(parse_manifest(HEAD, Path::new("m.tsv")).unwrap().is_empty());
    }

    #[test]
    fn valid_manifest_keeps_file_order() {
        let text = format!("{HEAD}b.png\t1\ttrain\tdf\na.png\t0\ttest\treal\n\nc.png\t0\tval\tx;q=3\n");
        let e = parse_manifest(&text, Path::new("/data/m.tsv")).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].path, PathBuf::from("/data/b.png"));
        assert_eq!(e[1].split, Split::Test);
        assert_eq!(e[2].source(), "x");
        let rendered = render_manifest(&e, Path::new("/data"));
        assert_eq!(parse_manifest(&rendered, Path::new("/data/m.tsv")).unwrap(), e);
    }

    #[test]
    fn bad_label_names_the_line() {
        let text = format!("{HEAD}a.png\t0\ttrain\tx\nb.png\t2\ttrain\tx\n");
        match parse_manifest(&text, Path::new("m.tsv")).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("label"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_rows_and_duplicates_rejected() {
        for (body, line) in [
            ("a.png\t0\ttrain\n", 3),
            ("a.png\t0\tholdout\tx\n", 3),
            ("a.png\t0\ttrain\tx\na.png\t1\ttest\ty\n", 4),
        ] {
            match parse_manifest(&format!("{HEAD}{body}"), Path::new("m.tsv")).unwrap_err() {
                Error::Parse { line: l, .. } => assert_eq!(l, line, "{body}"),
                e => panic!("unexpected {e}"),
            }
        }
        assert!(parse_manifest("path\tlabel\n", Path::new("m.tsv")).is_err());
    }

    #[test]
    fn missing_manifest_is_missing_file() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.tsv")),
            Err(Error::MissingFile(_))
        ));
    }

    fn natural() -> FaceImage {
        synth_image(64, 0, 0.0, 7, 0)
    }

    fn mad(a: &FaceImage, b: &FaceImage) -> f64 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / a.pixels().len() as f64
    }

    #[test]
    fn augmentation_policies() {
        let img = natural();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(jpeg_augment(&img, &CompressionPolicy::none(), &mut rng).unwrap(), img);
        let q100 = jpeg_augment(&img, &CompressionPolicy::fixed(100), &mut rng).unwrap();
        let q10 = jpeg_augment(&img, &CompressionPolicy::fixed(10), &mut rng).unwrap();
        assert!(mad(&img, &q10) > mad(&img, &q100));
        assert_eq!((q10.width(), q10.height()), (64, 64));
        let policy = CompressionPolicy::default();
        let a = jpeg_augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = jpeg_augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let bad = CompressionPolicy {
            mode: CompressionMode::RandomJpeg,
            quality_range: [50, 20],
        };
        assert!(jpeg_augment(&img, &bad, &mut rng).is_err());
    }

    #[test]
    fn synthetic_dataset_is_balanced_and_reproducible() {
        let cfg = SynthConfig {
            n_per_class: 10,
            side: 32,
            ..SynthConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = make_synthetic_dataset(&cfg, 3, d1.path()).unwrap();
        let b = make_synthetic_dataset(&cfg, 3, d2.path()).unwrap();
        assert_eq!(a.entries.len(), 20);
        assert_eq!(a.entries.iter().filter(|e| e.label == 1).count(), 10);
        assert_eq!(a.entries.iter().filter(|e| e.split == Split::Train).count(), 14);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(std::fs::read(&x.path).unwrap(), std::fs::read(&y.path).unwrap());
            assert_eq!(x.source_tag, y.source_tag);
            let q: u8 = x.source_tag.split("q=").nth(1).unwrap().parse().unwrap();
            assert!((30..=100).contains(&q));
        }
        let back = load_manifest(&a.manifest_path).unwrap();
        assert_eq!(back, a.entries);
        let train = Dataset::load(&a.manifest_path, Split::Train, 32).unwrap();
        assert_eq!(train.len(), 14);
    }

    #[test]
    fn artifact_is_localized_high_frequency() {
        let real = synth_image(64, 0, 0.5, 11, 4);
        let fake = synth_image(64, 1, 0.5, 11, 4);
        // same face stream, so the difference is the artifact alone
        let diff: Vec<usize> = real
            .pixels()
            .iter()
            .zip(fake.pixels())
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i / 3)
            .collect();
        assert!(!diff.is_empty());
        let xs: Vec<usize> = diff.iter().map(|i| i % 64).collect();
        let span = xs.iter().max().unwrap() - xs.iter().min().unwrap();
        assert!(span <= 32, "artifact spans {span} columns");
        assert!(crate::indicators::high_frequency_energy(&fake) > crate::indicators::high_frequency_energy(&real));
        assert_eq!(synth_image(64, 1, 0.0, 11, 4), real);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 1]);
        assert_ne!(a, derive_seed(1, &[1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 1]));
        assert_eq!(a, derive_seed(1, &[0, 1]));
    }
}
