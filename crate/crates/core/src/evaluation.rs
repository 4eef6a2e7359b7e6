//! AUC, perturbation sweeps, evaluation reports and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FaceImage;
use crate::config::CompressionPolicy;
use crate::data::{derive_seed, jpeg_augment, Dataset};
use crate::error::{Error, Result};
use crate::fsm::SamplingMode;
use crate::model::{DplModel, ForwardRecord, LevelRouter, Levels};
use crate::scalar::Scalar;

/// Mann–Whitney AUC with midranks for ties: the probability that a random
/// positive (label 1) outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "auc",
            expected: format!("{} labels", scores.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        let present = labels.first().copied().unwrap_or(0);
        return Err(Error::SingleClass(present));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the midrank (i + j + 2) / 2
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Saturation,
    Contrast,
    Blockwise,
    Noise,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::Saturation,
        PerturbationKind::Contrast,
        PerturbationKind::Blockwise,
        PerturbationKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Saturation => "saturation",
            PerturbationKind::Contrast => "contrast",
            PerturbationKind::Blockwise => "blockwise",
            PerturbationKind::Noise => "noise",
        }
    }

    /// Severity ladder for levels 1..=5.
    ///
    /// * saturation: chroma scale 0.8, 0.6, 0.4, 0.2, 0.0
    /// * contrast: scale about mean luma 0.8, 0.6, 0.45, 0.3, 0.15
    /// * blockwise: 4, 8, 12, 16, 20 random gray blocks of side `W/8`
    /// * noise: Gaussian σ 5, 10, 15, 20, 25 per color component (8-bit scale)
    pub fn ladder(self) -> [f64; 5] {
        match self {
            PerturbationKind::Saturation => [0.8, 0.6, 0.4, 0.2, 0.0],
            PerturbationKind::Contrast => [0.8, 0.6, 0.45, 0.3, 0.15],
            PerturbationKind::Blockwise => [4.0, 8.0, 12.0, 16.0, 20.0],
            PerturbationKind::Noise => [5.0, 10.0, 15.0, 20.0, 25.0],
        }
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// 1 (mildest) to 5; 0 is the identity.
    pub severity: u8,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity must lie in 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    /// Severity 0, reserved for testing.
    pub fn identity(kind: PerturbationKind) -> Self {
        Self { kind, severity: 0 }
    }

    pub fn parameter(&self) -> Option<f64> {
        (self.severity >= 1).then(|| self.kind.ladder()[self.severity as usize - 1])
    }
}

fn luma601(p: &[u8]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn perturb(image: &FaceImage, spec: PerturbationSpec, rng: &mut ChaCha8Rng) -> FaceImage {
    let Some(param) = spec.parameter() else {
        return image.clone();
    };
    let mut out = image.clone();
    match spec.kind {
        PerturbationKind::Saturation => {
            for p in out.pixels_mut().chunks_exact_mut(3) {
                let y = luma601(p);
                for v in p.iter_mut() {
                    *v = to_u8(y + param * (*v as f64 - y));
                }
            }
        }
        PerturbationKind::Contrast => {
            let mean = image.pixels().chunks_exact(3).map(luma601).sum::<f64>() / (image.width() * image.height()) as f64;
            for v in out.pixels_mut() {
                *v = to_u8(mean + param * (*v as f64 - mean));
            }
        }
        PerturbationKind::Blockwise => {
            let (w, h) = (image.width(), image.height());
            let bs = (w / 8).max(1);
            for _ in 0..param as usize {
                let x0 = rng.random_range(0..=w - bs);
                let y0 = rng.random_range(0..=h - bs);
                let gray: u8 = rng.random();
                for y in y0..y0 + bs {
                    for x in x0..x0 + bs {
                        let i = (y * w + x) * 3;
                        out.pixels_mut()[i..i + 3].fill(gray);
                    }
                }
            }
        }
        PerturbationKind::Noise => {
            for v in out.pixels_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = to_u8(*v as f64 + param * z);
            }
        }
    }
    out
}

/// AUC over one source compared against all real images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceBreakdown {
    pub source: String,
    pub label: u8,
    pub n: usize,
    /// Fake sources only: AUC of this source's fakes against every real.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub n_samples: usize,
    pub policy: String,
    pub perturbation: Option<PerturbationSpec>,
    pub per_source: Vec<SourceBreakdown>,
    /// Count of images per `(k1, k2)` step pair.
    pub level_counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AUC        {:.6}", self.auc);
        let _ = writeln!(s, "samples    {}", self.n_samples);
        let _ = writeln!(s, "policy     {}", self.policy);
        match &self.perturbation {
            Some(p) => {
                let _ = writeln!(s, "perturb    {} severity {}", p.kind.name(), p.severity);
            }
            None => {
                let _ = writeln!(s, "perturb    none");
            }
        }
        let _ = writeln!(s, "per source:");
        for b in &self.per_source {
            match b.auc {
                Some(a) => {
                    let _ = writeln!(s, "  {:<24} label {} n {:>6}  AUC {:.6}", b.source, b.label, b.n, a);
                }
                None => {
                    let _ = writeln!(s, "  {:<24} label {} n {:>6}", b.source, b.label, b.n);
                }
            }
        }
        let _ = writeln!(s, "levels (k1,k2):");
        for (k, n) in &self.level_counts {
            let _ = writeln!(s, "  {k:<8} {n}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        ensure_parent(stem)?;
        let txt = stem.with_extension("txt");
        let json = stem.with_extension("json");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }
}

/// Everything needed to score one image.
pub struct Detector<'a, T: Scalar> {
    pub model: &'a DplModel<T>,
    pub router: &'a LevelRouter,
}

impl<T: Scalar> Detector<'_, T> {
    /// Deterministic-mode forward of image `index` after compression and
    /// an optional perturbation; randomness derives from `(seed, index)`.
    pub fn run(
        &self,
        image: &FaceImage,
        index: usize,
        policy: &CompressionPolicy,
        perturbation: Option<PerturbationSpec>,
        seed: u64,
    ) -> Result<(Levels, ForwardRecord)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64]));
        let mut img = jpeg_augment(image, policy, &mut rng)?;
        if let Some(p) = perturbation {
            img = perturb(&img, p, &mut rng);
        }
        let routing = self.router.route(&img)?;
        let rec = self.model.infer(&img, routing.levels, SamplingMode::Deterministic, &mut rng)?;
        Ok((routing.levels, rec))
    }

    fn run_all(
        &self,
        data: &Dataset,
        policy: &CompressionPolicy,
        perturbation: Option<PerturbationSpec>,
        seed: u64,
    ) -> Result<Vec<(Levels, ForwardRecord)>> {
        data.images
            .par_iter()
            .enumerate()
            .map(|(i, img)| self.run(img, i, policy, perturbation, seed))
            .collect()
    }
}

pub fn evaluate<T: Scalar>(
    detector: &Detector<'_, T>,
    data: &Dataset,
    policy: &CompressionPolicy,
    perturbation: Option<PerturbationSpec>,
    seed: u64,
) -> Result<EvalReport> {
    let labels = data.labels();
    if let Some(&first) = labels.first() {
        if labels.iter().all(|&l| l == first) {
            return Err(Error::SingleClass(first));
        }
    }
    let results = detector.run_all(data, policy, perturbation, seed)?;
    let scores: Vec<f64> = results.iter().map(|(_, r)| r.prediction.fake_confidence()).collect();
    let total = auc(&scores, &labels)?;
    let mut groups: BTreeMap<(u8, String), Vec<usize>> = BTreeMap::new();
    for (i, e) in data.entries.iter().enumerate() {
        groups.entry((e.label, e.source().to_string())).or_default().push(i);
    }
    let reals: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let per_source = groups
        .into_iter()
        .map(|((label, source), idx)| {
            let auc = if label == 1 {
                let mut s: Vec<f64> = reals.iter().map(|&i| scores[i]).collect();
                let mut l = vec![0u8; reals.len()];
                s.extend(idx.iter().map(|&i| scores[i]));
                l.extend(std::iter::repeat_n(1u8, idx.len()));
                Some(auc(&s, &l)?)
            } else {
                None
            };
            Ok(SourceBreakdown {
                source,
                label,
                n: idx.len(),
                auc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut level_counts = BTreeMap::new();
    for (lv, _) in &results {
        *level_counts.entry(format!("{},{}", lv.vq, lv.fi)).or_insert(0) += 1;
    }
    Ok(EvalReport {
        auc: total,
        n_samples: labels.len(),
        policy: policy.label(),
        perturbation,
        per_source,
        level_counts,
    })
}

/// Writes `label, k1, k2, v_1..v_D` per image, in manifest order.
pub fn export_embeddings<T: Scalar>(
    detector: &Detector<'_, T>,
    data: &Dataset,
    policy: &CompressionPolicy,
    seed: u64,
    out_path: &Path,
) -> Result<usize> {
    let results = detector.run_all(data, policy, None, seed)?;
    let dim = detector.model.fused_dim();
    let mut s = String::from("label\tk1\tk2");
    for j in 0..dim {
        let _ = write!(s, "\tv{j}");
    }
    s.push('\n');
    for (e, (lv, rec)) in data.entries.iter().zip(&results) {
        let _ = write!(s, "{}\t{}\t{}", e.label, lv.vq, lv.fi);
        for v in &rec.fused {
            let _ = write!(s, "\t{v:e}");
        }
        s.push('\n');
    }
    ensure_parent(out_path)?;
    std::fs::write(out_path, s).map_err(|e| Error::io(out_path, e))?;
    Ok(results.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub kind: PerturbationKind,
    pub severity: u8,
    pub auc: f64,
}

/// 4 kinds × 5 severities.
pub fn robustness_grid<T: Scalar>(
    detector: &Detector<'_, T>,
    data: &Dataset,
    policy: &CompressionPolicy,
    seed: u64,
) -> Result<Vec<RobustnessCell>> {
    let mut cells = Vec::with_capacity(20);
    for kind in PerturbationKind::ALL {
        for severity in 1..=5 {
            let spec = PerturbationSpec::new(kind, severity)?;
            let r = evaluate(detector, data, policy, Some(spec), seed)?;
            cells.push(RobustnessCell {
                kind,
                severity,
                auc: r.auc,
            });
        }
    }
    Ok(cells)
}

pub fn robustness_csv(cells: &[RobustnessCell]) -> String {
    let mut s = String::from("kind,severity,parameter,auc\n");
    for c in cells {
        let p = c.kind.ladder()[c.severity as usize - 1];
        let _ = writeln!(s, "{},{},{},{:.6}", c.kind.name(), c.severity, p, c.auc);
    }
    s
}

fn draw_line(img: &mut image::RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// 2×2 panel image, one AUC-versus-severity curve per perturbation kind.
/// Each panel spans severities 1..5 horizontally and AUC 0..1 vertically,
/// with gridlines at AUC 0.5 and 1.0.
pub fn robustness_plot(cells: &[RobustnessCell]) -> image::RgbImage {
    const PW: i64 = 240;
    const PH: i64 = 180;
    const M: i64 = 20;
    let mut img = image::RgbImage::from_pixel(2 * PW as u32, 2 * PH as u32, image::Rgb([255, 255, 255]));
    let colors = [[200, 40, 40], [40, 120, 200], [40, 160, 60], [160, 80, 200]];
    for (k, kind) in PerturbationKind::ALL.into_iter().enumerate() {
        let (ox, oy) = ((k as i64 % 2) * PW, (k as i64 / 2) * PH);
        let px = |sev: f64| ox + M + ((sev - 1.0) / 4.0 * (PW - 2 * M) as f64).round() as i64;
        let py = |a: f64| oy + PH - M - (a.clamp(0.0, 1.0) * (PH - 2 * M) as f64).round() as i64;
        draw_line(&mut img, (px(1.0), py(0.0)), (px(5.0), py(0.0)), [0, 0, 0]);
        draw_line(&mut img, (px(1.0), py(0.0)), (px(1.0), py(1.0)), [0, 0, 0]);
        draw_line(&mut img, (px(1.0), py(0.5)), (px(5.0), py(0.5)), [200, 200, 200]);
        draw_line(&mut img, (px(1.0), py(1.0)), (px(5.0), py(1.0)), [200, 200, 200]);
        let mut pts: Vec<&RobustnessCell> = cells.iter().filter(|c| c.kind == kind).collect();
        pts.sort_by_key(|c| c.severity);
        for w in pts.windows(2) {
            draw_line(
                &mut img,
                (px(w[0].severity as f64), py(w[0].auc)),
                (px(w[1].severity as f64), py(w[1].auc)),
                colors[k],
            );
        }
        for c in pts {
            let (cx, cy) = (px(c.severity as f64), py(c.auc));
            for d in -2..=2 {
                draw_line(&mut img, (cx - 2, cy + d), (cx + 2, cy + d), colors[k]);
            }
        }
    }
    img
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_robustness(cells: &[RobustnessCell], csv_path: &Path, png_path: &Path) -> Result<()> {
    ensure_parent(csv_path)?;
    ensure_parent(png_path)?;
    std::fs::write(csv_path, robustness_csv(cells)).map_err(|e| Error::io(csv_path, e))?;
    robustness_plot(cells)
        .save(png_path)
        .map_err(|e| Error::Codec(format!("{}: {e}", png_path.display())))
}
