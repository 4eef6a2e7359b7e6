//! Face images, feature maps and the pluggable feature extractor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MIN_IMAGE_SIDE: usize = 32;
pub const DEFAULT_IMAGE_SIDE: usize = 224;

/// A pre-cropped RGB face, 8 bits per channel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl FaceImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "face image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                context: "FaceImage::new",
                expected: format!("{} bytes", width * height * 3),
                actual: format!("{} bytes", pixels.len()),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn from_rgb(img: &image::RgbImage) -> Result<Self> {
        Self::new(
            img.width() as usize,
            img.height() as usize,
            img.as_raw().clone(),
        )
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer sized at construction")
    }

    /// Loads a PNG/JPEG file, resizing to `side × side` when it differs.
    pub fn load(path: &Path, side: Option<usize>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let img = match side {
            Some(s) if img.width() as usize != s || img.height() as usize != s => {
                image::imageops::resize(&img, s as u32, s as u32, image::imageops::FilterType::Triangle)
            }
            _ => img,
        };
        Self::from_rgb(&img)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Rec. 601 luma in [0, 1].
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect()
    }

    /// `(H·W) × 3` matrix with channels scaled to [0, 1].
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self
            .pixels
            .iter()
            .map(|&b| T::lit(b as f64 / 255.0))
            .collect();
        Matrix::from_vec(self.height * self.width, 3, data).expect("sized")
    }
}

/// Backbone output `f ∈ R^{h×w×c}` stored as `(h·w) × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Matrix<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, values: Matrix<T>) -> Result<Self> {
        if values.rows() != height * width {
            return Err(Error::ShapeMismatch {
                context: "FeatureMap::new",
                expected: format!("{} rows", height * width),
                actual: format!("{} rows", values.rows()),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub output_channels: usize,
    #[serde(default)]
    pub pretrained_path: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            name: "tiny".into(),
            output_channels: 48,
            pretrained_path: None,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_channels < 3 {
            return Err(Error::Config(format!(
                "backbone output_channels must be >= 3, got {}",
                self.output_channels
            )));
        }
        Ok(())
    }
}

/// Feature extractor whose parameters live in a [`ParamStore`] under
/// [`Group::Backbone`].
pub trait Backbone<T: Scalar>: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// `(h, w, c)` of the feature map produced for an `height × width` input.
    fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)>;

    /// Differentiable forward over a `(H·W) × 3` image in [0, 1].
    fn forward<'t>(
        &self,
        params: &Bound<'t, '_, T>,
        image: Var<'t, T>,
        height: usize,
        width: usize,
    ) -> Result<Var<'t, T>>;

    fn extract<'t>(&self, params: &Bound<'t, '_, T>, image: &FaceImage) -> Result<(Var<'t, T>, (usize, usize, usize))> {
        let shape = self.output_shape(image.height(), image.width())?;
        let x = params.tape().leaf(image.to_matrix());
        let f = self.forward(params, x, image.height(), image.width())?;
        Ok((f, shape))
    }
}

/// Three non-overlapping strided convolution stages (strides 4, 2, 4;
/// total stride 32) with ReLU after the first two. Each stage is a
/// patchify followed by a linear map, which is exactly a convolution with
/// kernel size equal to its stride.
pub struct TinyBackbone {
    spec: BackboneSpec,
    stages: Vec<(usize, Linear)>,
}

pub const TINY_STRIDES: [usize; 3] = [4, 2, 4];

impl TinyBackbone {
    pub fn new<T: Scalar>(
        spec: &BackboneSpec,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        bias: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let c = spec.output_channels;
        let widths = [(c / 4).max(1), (c / 2).max(1), c];
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, (&stride, &out_ch)) in TINY_STRIDES.iter().zip(&widths).enumerate() {
            // He-uniform scale for the stages followed by ReLU
            let gain = if i + 1 < TINY_STRIDES.len() { 6f64.sqrt() } else { 1.0 };
            let lin = Linear::with_gain(
                store,
                rng,
                &format!("backbone.stage{i}"),
                Group::Backbone,
                stride * stride * in_ch,
                out_ch,
                bias,
                gain,
            );
            stages.push((stride, lin));
            in_ch = out_ch;
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
        })
    }

    pub fn parameter_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.stages
            .iter()
            .map(|(_, l)| {
                store.value(l.weight).len() + l.bias.map(|b| store.value(b).len()).unwrap_or(0)
            })
            .sum()
    }
}

impl<T: Scalar> Backbone<T> for TinyBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (height, width);
        for (stride, _) in &self.stages {
            h /= stride;
            w /= stride;
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {height}x{width} too small for backbone `{}`",
                self.spec.name
            )));
        }
        Ok((h, w, self.spec.output_channels))
    }

    fn forward<'t>(
        &self,
        params: &Bound<'t, '_, T>,
        image: Var<'t, T>,
        height: usize,
        width: usize,
    ) -> Result<Var<'t, T>> {
        <Self as Backbone<T>>::output_shape(self, height, width)?;
        let (mut h, mut w) = (height, width);
        let mut x = image;
        let last = self.stages.len() - 1;
        for (i, (stride, lin)) in self.stages.iter().enumerate() {
            x = lin.forward(params, x.patchify(h, w, *stride));
            h /= stride;
            w /= stride;
            if i < last {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

pub type BackboneConstructor<T> =
    fn(&BackboneSpec, &mut ParamStore<T>, &mut ChaCha8Rng) -> Result<Box<dyn Backbone<T>>>;

/// Name → constructor table.
pub struct BackboneRegistry<T: Scalar> {
    entries: BTreeMap<String, BackboneConstructor<T>>,
}

fn tiny_with_bias<T: Scalar>(
    spec: &BackboneSpec,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Backbone<T>>> {
    Ok(Box::new(TinyBackbone::new(spec, store, rng, true)?))
}

fn tiny_without_bias<T: Scalar>(
    spec: &BackboneSpec,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Backbone<T>>> {
    Ok(Box::new(TinyBackbone::new(spec, store, rng, false)?))
}

impl<T: Scalar> BackboneRegistry<T> {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry with the built-in `tiny` and `tiny_nobias` entries.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("tiny", tiny_with_bias::<T>).expect("fresh registry");
        r.register("tiny_nobias", tiny_without_bias::<T>)
            .expect("fresh registry");
        r
    }

    pub fn register(&mut self, name: &str, ctor: BackboneConstructor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateBackbone(name.to_string()));
        }
        self.entries.insert(name.to_string(), ctor);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn build(
        &self,
        spec: &BackboneSpec,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn Backbone<T>>> {
        let ctor = self
            .entries
            .get(&spec.name)
            .ok_or_else(|| Error::UnknownBackbone(spec.name.clone()))?;
        ctor(spec, store, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;

    fn build(name: &str, c: usize) -> (ParamStore<f64>, Box<dyn Backbone<f64>>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = BackboneSpec {
            name: name.into(),
            output_channels: c,
            pretrained_path: None,
        };
        let b = BackboneRegistry::with_defaults()
            .build(&spec, &mut store, &mut rng)
            .unwrap();
        (store, b)
    }

    #[test]
    fn tiny_stride_schedule_gives_7x7x48_at_224() {
        let (store, b) = build("tiny", 48);
        assert_eq!(b.output_shape(224, 224).unwrap(), (7, 7, 48));
        let img = FaceImage::filled(224, 224, [10, 200, 30]).unwrap();
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let (f, shape) = b.extract(&p, &img).unwrap();
        assert_eq!(f.shape(), (49, 48));
        assert_eq!(shape, (7, 7, 48));
    }

    #[test]
    fn tiny_is_under_parameter_budget() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = TinyBackbone::new(&BackboneSpec::default(), &mut store, &mut rng, true).unwrap();
        assert!(b.parameter_count(&store) <= 100_000);
        assert_eq!(b.parameter_count(&store), store.count_in(&[Group::Backbone]));
    }

    #[test]
    fn zero_image_through_bias_free_backbone_is_zero() {
        let (store, b) = build("tiny_nobias", 48);
        let img = FaceImage::filled(64, 64, [0, 0, 0]).unwrap();
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let (f, _) = b.extract(&p, &img).unwrap();
        assert!(f.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_images_identical_features() {
        let (store, b) = build("tiny", 12);
        let img = FaceImage::new(32, 32, (0..32 * 32 * 3).map(|i| (i * 7 % 251) as u8).collect())
            .unwrap();
        let run = || {
            let tape = Tape::new();
            let p = Bound::new(&tape, &store);
            b.extract(&p, &img).unwrap().0.value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn output_shape_is_pure_function_of_input_for_every_entry() {
        let reg = BackboneRegistry::<f64>::with_defaults();
        for name in reg.names() {
            let (store, b) = build(name, 24);
            for side in [32usize, 64, 96, 100] {
                let img = FaceImage::filled(side, side, [1, 2, 3]).unwrap();
                let tape = Tape::new();
                let p = Bound::new(&tape, &store);
                let (f, (h, w, c)) = b.extract(&p, &img).unwrap();
                assert_eq!(f.shape(), (h * w, c));
                assert_eq!(b.output_shape(side, side).unwrap(), (h, w, c));
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let (store, b) = build("tiny", 12);
        let x0 = Matrix::<f64>::from_fn(32 * 32, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin() * 0.5 + 0.5);
        let loss = |x: &Matrix<f64>| -> (f64, Option<Matrix<f64>>) {
            let tape = Tape::new();
            let p = Bound::new(&tape, &store);
            let xv = tape.leaf(x.clone());
            let f = b.forward(&p, xv, 32, 32).unwrap();
            let y = f.tanh().square().sum();
            let g = tape.backward(y);
            (y.item(), g.get(xv).cloned())
        };
        let (_, g) = loss(&x0);
        let g = g.unwrap();
        let h = 1e-6;
        for i in (0..x0.len()).step_by(97) {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&p).0 - loss(&m).0) / (2.0 * h);
            let a = g.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
            assert!(rel < 1e-4, "index {i}: analytic {a} numeric {num}");
        }
    }

    #[test]
    fn registry_errors() {
        let mut reg = BackboneRegistry::<f64>::with_defaults();
        assert!(matches!(
            reg.register("tiny", tiny_with_bias::<f64>),
            Err(Error::DuplicateBackbone(_))
        ));
        reg.register("mine", tiny_without_bias::<f64>).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BackboneSpec {
            name: "mine".into(),
            ..Default::default()
        };
        assert!(reg.build(&spec, &mut store, &mut rng).is_ok());
        let spec = BackboneSpec {
            name: "nope".into(),
            ..Default::default()
        };
        assert!(matches!(
            reg.build(&spec, &mut store, &mut rng),
            Err(Error::UnknownBackbone(_))
        ));
    }

    #[test]
    fn rejects_small_images() {
        assert!(FaceImage::filled(16, 64, [0; 3]).is_err());
    }
}
