//! Quality and forgery-identifiability indicators.
//!
//! An indicator turns a face into a score in (0, 1) by comparing one image
//! embedding against a positive and a negative text prompt, then a fitted
//! equal-frequency quantizer turns the score into a step level `1..=K`.
//! Two offline scorers stand in for a vision-language model: the
//! [`HashEmbedder`] and the high-frequency [`ProxyIndicator`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::FaceImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub positive: String,
    pub negative: String,
}

impl PromptPair {
    pub fn new(positive: impl Into<String>, negative: impl Into<String>) -> Result<Self> {
        let pair = Self {
            positive: positive.into(),
            negative: negative.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive.trim().is_empty() || self.negative.trim().is_empty() {
            return Err(Error::Config("prompts must be non-empty".into()));
        }
        if self.positive == self.negative {
            return Err(Error::Config(format!(
                "positive and negative prompt are identical: {:?}",
                self.positive
            )));
        }
        Ok(())
    }

    /// Quality prompts; a higher score means a better-looking image.
    pub fn quality() -> Self {
        Self {
            positive: "Good photo.".into(),
            negative: "Bad photo.".into(),
        }
    }

    /// Identifiability prompts; a higher score means the manipulation is
    /// easier to see.
    pub fn identifiability() -> Self {
        Self {
            positive: "manipulated face.".into(),
            negative: "genuine face.".into(),
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            positive: self.negative.clone(),
            negative: self.positive.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                context: "cosine similarity",
                expected: format!("dimension {}", self.dim()),
                actual: format!("dimension {}", other.dim()),
            });
        }
        let (na, nb) = (self.norm(), other.norm());
        if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
            return Err(Error::DegenerateEmbedding(format!(
                "norms {na} and {nb}"
            )));
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        Ok(dot / (na * nb))
    }
}

/// Score in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct IndicatorScore(f64);

impl IndicatorScore {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidArgument(format!(
                "indicator score must lie in (0, 1), got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The 0–100 presentation scale.
    pub fn percent(self) -> f64 {
        self.0 * 100.0
    }
}

/// Two-way softmax of temperature-scaled similarities, positive component:
/// `exp(s₊/τ) / (exp(s₊/τ) + exp(s₋/τ))`.
pub fn paired_prompt_probability<T: Scalar>(s_pos: T, s_neg: T, temperature: T) -> T {
    let d = (s_neg - s_pos) / temperature;
    // 1 / (1 + e^d), computed on the side that cannot overflow
    if d <= T::zero() {
        T::one() / (T::one() + d.exp())
    } else {
        let e = (-d).exp();
        e / (e + T::one())
    }
}

/// Image and text encoder of a vision-language model.
pub trait Embedder: Send + Sync {
    fn embed_image(&self, image: &FaceImage) -> Result<EmbeddingVector>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Deterministic hash embedder used offline.
///
/// Image rule, for dimension `d` and the `N = H·W·3` bytes `x_i`:
/// `v_j = σ(−1, j) + (1 / (255·N)) · Σ_i x_i · σ(i, j)` where
/// `σ(i, j) = ±1` is the top bit of `splitmix64(i · d + j + SALT)` mapped
/// `0 → +1, 1 → −1` (`σ(−1, j)` uses index `u64::MAX` in place of `i·d`).
/// Text rule: `v_j = σ'(j)` from `splitmix64(fnv1a(text) + j)`.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

pub const HASH_EMBEDDER_SALT: u64 = 0x5EED_D00D;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sign_bit(h: u64) -> f64 {
    if h >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 16 }
    }
}

impl Embedder for HashEmbedder {
    fn embed_image(&self, image: &FaceImage) -> Result<EmbeddingVector> {
        let d = self.dim as u64;
        let n = image.pixels().len() as f64;
        let mut v: Vec<f64> = (0..d)
            .map(|j| sign_bit(splitmix64(u64::MAX.wrapping_add(j).wrapping_add(HASH_EMBEDDER_SALT))))
            .collect();
        let mut acc = vec![0.0f64; self.dim];
        for (i, &x) in image.pixels().iter().enumerate() {
            if x == 0 {
                continue;
            }
            let base = (i as u64).wrapping_mul(d);
            for (j, a) in acc.iter_mut().enumerate() {
                *a += x as f64
                    * sign_bit(splitmix64(base.wrapping_add(j as u64).wrapping_add(HASH_EMBEDDER_SALT)));
            }
        }
        for (vj, a) in v.iter_mut().zip(acc) {
            *vj += a / (255.0 * n);
        }
        Ok(EmbeddingVector(v))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let seed = fnv1a(text.as_bytes());
        Ok(EmbeddingVector(
            (0..self.dim as u64)
                .map(|j| sign_bit(splitmix64(seed.wrapping_add(j))))
                .collect(),
        ))
    }
}

/// Embeddings computed offline by an external vision-language model.
///
/// File format: one record per line, tab-separated
/// `image|text <TAB> key <TAB> v1,v2,...`. Image keys are the lowercase hex
/// SHA-256 of the raw RGB pixel buffer; text keys are the prompt verbatim.
/// Lines starting with `#` are comments.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbedder {
    images: HashMap<String, EmbeddingVector>,
    texts: HashMap<String, EmbeddingVector>,
}

pub fn image_key(image: &FaceImage) -> String {
    hex::encode(Sha256::digest(image.pixels()))
}

impl PrecomputedEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::EmbedderUnavailable(format!("{}: {e}", path.display()))
        })?;
        let mut out = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut cols = line.split('\t');
            let (Some(kind), Some(key), Some(vals), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(parse_err("expected 3 tab-separated columns".into()));
            };
            let values = vals
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad vector: {e}")))?;
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err("vector must be non-empty and finite".into()));
            }
            let slot = match kind {
                "image" => &mut out.images,
                "text" => &mut out.texts,
                other => return Err(parse_err(format!("unknown record kind `{other}`"))),
            };
            slot.insert(key.to_string(), EmbeddingVector(values));
        }
        Ok(out)
    }

    pub fn insert_image(&mut self, image: &FaceImage, v: EmbeddingVector) {
        self.images.insert(image_key(image), v);
    }

    pub fn insert_text(&mut self, text: &str, v: EmbeddingVector) {
        self.texts.insert(text.to_string(), v);
    }
}

impl Embedder for PrecomputedEmbedder {
    fn embed_image(&self, image: &FaceImage) -> Result<EmbeddingVector> {
        let key = image_key(image);
        self.images
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::EmbedderUnavailable(format!("no embedding for image {key}")))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| Error::EmbedderUnavailable(format!("no embedding for prompt {text:?}")))
    }
}

pub fn embed_image(image: &FaceImage, embedder: &dyn Embedder) -> Result<EmbeddingVector> {
    let v = embedder.embed_image(image)?;
    if v.0.is_empty() || v.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateEmbedding("non-finite image embedding".into()));
    }
    Ok(v)
}

/// Paired-prompt indicator score of one image.
pub fn score(
    image: &FaceImage,
    prompts: &PromptPair,
    embedder: &dyn Embedder,
    temperature: f64,
) -> Result<IndicatorScore> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let v = embed_image(image, embedder)?;
    let s_pos = v.cosine(&embedder.embed_text(&prompts.positive)?)?;
    let s_neg = v.cosine(&embedder.embed_text(&prompts.negative)?)?;
    let q = paired_prompt_probability(s_pos, s_neg, temperature);
    // cosines are bounded, so q stays strictly inside (0, 1) unless τ is tiny
    IndicatorScore::new(q.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
}

/// Which indicator a score came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    Vqi,
    Fii,
}

impl IndicatorKind {
    pub fn name(self) -> &'static str {
        match self {
            IndicatorKind::Vqi => "vqi",
            IndicatorKind::Fii => "fii",
        }
    }
}

const PROXY_EPS: f64 = 1e-6;
const PROXY_ENERGY_SCALE: f64 = 1e-3;
const PROXY_PEAK_SCALE: f64 = 4.0;
const PROXY_BLOCK: usize = 8;

/// Mean squared forward difference of luma over horizontal and vertical
/// neighbours, restricted to the window `[x0, x1) × [y0, y1)`.
fn hf_energy(luma: &[f64], width: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let v = luma[y * width + x];
            if x + 1 < x1 {
                let d = luma[y * width + x + 1] - v;
                acc += d * d;
                n += 1;
            }
            if y + 1 < y1 {
                let d = luma[(y + 1) * width + x] - v;
                acc += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// High-frequency energy `E` of the whole image (see [`stub_indicator`]).
pub fn high_frequency_energy(image: &FaceImage) -> f64 {
    let luma = image.luma();
    hf_energy(&luma, image.width(), 0, image.width(), 0, image.height())
}

/// Offline quality proxy: `q = (E + ε) / (E + ε + s)` with `E` the mean
/// squared neighbour difference of luma in [0, 1], `ε = 1e-6` and
/// `s = 1e-3`. Blur and heavy compression lower `E`; a constant image
/// attains the minimum `ε / (ε + s)`.
pub fn stub_indicator(image: &FaceImage) -> IndicatorScore {
    let e = high_frequency_energy(image);
    IndicatorScore((e + PROXY_EPS) / (e + PROXY_EPS + PROXY_ENERGY_SCALE))
}

pub fn stub_indicator_minimum() -> f64 {
    PROXY_EPS / (PROXY_EPS + PROXY_ENERGY_SCALE)
}

/// Offline identifiability proxy: with per-block (8×8) high-frequency
/// energies `e_b`, `ρ = (max_b e_b + ε) / (mean_b e_b + ε)` and
/// `q = ρ / (ρ + 4)`. A localized burst of high-frequency energy raises
/// `ρ`; a uniform image gives `ρ = 1`, `q = 0.2`.
pub fn stub_identifiability(image: &FaceImage) -> IndicatorScore {
    let luma = image.luma();
    let (w, h) = (image.width(), image.height());
    let mut energies = Vec::new();
    for by in (0..h).step_by(PROXY_BLOCK) {
        for bx in (0..w).step_by(PROXY_BLOCK) {
            energies.push(hf_energy(
                &luma,
                w,
                bx,
                (bx + PROXY_BLOCK).min(w),
                by,
                (by + PROXY_BLOCK).min(h),
            ));
        }
    }
    let max = energies.iter().cloned().fold(0.0, f64::max);
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    let rho = (max + PROXY_EPS) / (mean + PROXY_EPS);
    IndicatorScore(rho / (rho + PROXY_PEAK_SCALE))
}

/// The scorer behind one indicator.
#[derive(Clone)]
pub enum IndicatorBackend {
    /// High-frequency proxies; no model needed.
    Proxy,
    /// Paired-prompt scoring against an embedder.
    Prompt {
        embedder: std::sync::Arc<dyn Embedder>,
        prompts: PromptPair,
        temperature: f64,
    },
}

impl std::fmt::Debug for IndicatorBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IndicatorBackend::Proxy => write!(f, "Proxy"),
            IndicatorBackend::Prompt {
                prompts,
                temperature,
                ..
            } => write!(f, "Prompt({prompts:?}, τ={temperature})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Indicator {
    pub kind: IndicatorKind,
    pub backend: IndicatorBackend,
}

impl Indicator {
    pub fn proxy(kind: IndicatorKind) -> Self {
        Self {
            kind,
            backend: IndicatorBackend::Proxy,
        }
    }

    pub fn score(&self, image: &FaceImage) -> Result<IndicatorScore> {
        match &self.backend {
            IndicatorBackend::Proxy => Ok(match self.kind {
                IndicatorKind::Vqi => stub_indicator(image),
                IndicatorKind::Fii => stub_identifiability(image),
            }),
            IndicatorBackend::Prompt {
                embedder,
                prompts,
                temperature,
            } => score(image, prompts, embedder.as_ref(), *temperature),
        }
    }
}

/// Direction of the score → level map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Higher score → lower level (fewer steps). Both indicators use this.
    HigherIsLower,
    HigherIsHigher,
}

impl Orientation {
    fn as_str(self) -> &'static str {
        match self {
            Orientation::HigherIsLower => "higher_is_lower",
            Orientation::HigherIsHigher => "higher_is_higher",
        }
    }
}

/// Level in `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StepLevel(usize);

impl StepLevel {
    pub fn new(level: usize, levels: usize) -> Result<Self> {
        if level == 0 || level > levels {
            return Err(Error::InvalidArgument(format!(
                "level {level} outside 1..={levels}"
            )));
        }
        Ok(Self(level))
    }

    /// A level without an upper-bound check (used for fixed-depth runs).
    pub fn fixed(level: usize) -> Self {
        assert!(level >= 1);
        Self(level)
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Fitted equal-frequency level boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    pub levels: usize,
    pub orientation: Orientation,
    /// `levels − 1` non-decreasing score thresholds.
    pub boundaries: Vec<f64>,
}

pub const QUANTIZER_FORMAT_VERSION: u32 = 1;

/// Linear-interpolation quantile of sorted data at probability `p`.
fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Fits `levels − 1` boundaries at the `i / levels` quantiles.
pub fn fit_quantizer(
    scores: &[IndicatorScore],
    levels: usize,
    orientation: Orientation,
) -> Result<QuantizerSpec> {
    if levels < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 levels, got {levels}"
        )));
    }
    if scores.len() < levels {
        return Err(Error::InsufficientData {
            needed: levels,
            got: scores.len(),
        });
    }
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.value()).collect();
    if sorted.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    sorted.sort_by(|a, b| a.total_cmp(b));
    let boundaries = (1..levels)
        .map(|i| interpolated_quantile(&sorted, i as f64 / levels as f64))
        .collect();
    Ok(QuantizerSpec {
        levels,
        orientation,
        boundaries,
    })
}

/// Maps a score to its level. A score equal to a boundary takes the lower
/// level; scores outside the fitted range clamp to level 1 or `K`.
pub fn quantize(score: IndicatorScore, spec: &QuantizerSpec) -> StepLevel {
    let s = score.value();
    let level = match spec.orientation {
        Orientation::HigherIsLower => 1 + spec.boundaries.iter().filter(|&&b| b > s).count(),
        Orientation::HigherIsHigher => 1 + spec.boundaries.iter().filter(|&&b| b < s).count(),
    };
    StepLevel(level)
}

impl QuantizerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.boundaries.len() != self.levels - 1 {
            return Err(Error::InvalidArgument(format!(
                "quantizer with {} levels needs {} boundaries, has {}",
                self.levels,
                self.levels.saturating_sub(1),
                self.boundaries.len()
            )));
        }
        if self.boundaries.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::InvalidArgument(
                "quantizer boundaries must be sorted".into(),
            ));
        }
        Ok(())
    }

    /// Plain-text key/value document; boundaries use the shortest
    /// round-tripping decimal form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# dpl quantizer").unwrap();
        writeln!(s, "version = {QUANTIZER_FORMAT_VERSION}").unwrap();
        writeln!(s, "levels = {}", self.levels).unwrap();
        writeln!(s, "orientation = {}", self.orientation.as_str()).unwrap();
        let b: Vec<String> = self.boundaries.iter().map(|x| format!("{x:?}")).collect();
        writeln!(s, "boundaries = {}", b.join(" ")).unwrap();
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut version = None;
        let mut levels = None;
        let mut orientation = None;
        let mut boundaries = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, "expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "version" => {
                    let n: u32 = v.parse().map_err(|_| err(i + 1, format!("bad version `{v}`")))?;
                    if n != QUANTIZER_FORMAT_VERSION {
                        return Err(err(i + 1, format!("unsupported version {n}")));
                    }
                    version = Some(n);
                }
                "levels" => {
                    levels = Some(v.parse().map_err(|_| err(i + 1, format!("bad levels `{v}`")))?)
                }
                "orientation" => {
                    orientation = Some(match v {
                        "higher_is_lower" => Orientation::HigherIsLower,
                        "higher_is_higher" => Orientation::HigherIsHigher,
                        _ => return Err(err(i + 1, format!("bad orientation `{v}`"))),
                    })
                }
                "boundaries" => {
                    boundaries = Some(
                        v.split_whitespace()
                            .map(|t| t.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| err(i + 1, format!("bad boundary: {e}")))?,
                    )
                }
                other => return Err(err(i + 1, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| err(0, format!("missing `{what}`"));
        version.ok_or_else(|| missing("version"))?;
        let spec = Self {
            levels: levels.ok_or_else(|| missing("levels"))?,
            orientation: orientation.ok_or_else(|| missing("orientation"))?,
            boundaries: boundaries.ok_or_else(|| missing("boundaries"))?,
        };
        spec.validate()
            .map_err(|e| err(0, e.to_string()))?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingQuantizer(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_text(&text, path)
    }
}

/// Standard file names of the two quantizers inside a run directory.
pub fn quantizer_path(dir: &Path, kind: IndicatorKind) -> PathBuf {
    dir.join(format!("{}.quantizer", kind.name()))
}
