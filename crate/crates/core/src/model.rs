//! Full detector: backbone → feature selection → two progressive branches
//! → fusion → shared head, plus the value network used in stage II.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneRegistry, FaceImage};
use crate::branches::{
    attention_param, classify, fuse_branches, run_branch, Branch, BranchKind, BranchSummary,
    ClassifierHead, Prediction,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fsm::{unroll, ChannelMask, Proposer, SamplingMode, SamplingOutcome, Unrolled};
use crate::indicators::{quantize, Indicator, IndicatorScore, QuantizerSpec, StepLevel};
use crate::nn::{Bound, Group, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Step budgets of the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Levels {
    pub vq: usize,
    pub fi: usize,
}

impl Levels {
    pub fn new(vq: usize, fi: usize) -> Self {
        assert!(vq >= 1 && fi >= 1, "levels start at 1");
        Self { vq, fi }
    }

    pub fn max_steps(self) -> usize {
        self.vq.max(self.fi)
    }
}

/// `V(f_t)`: pooled feature → scalar, one tanh hidden layer.
#[derive(Debug, Clone)]
pub struct ValueHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ValueHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, channels: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, "value.hidden", Group::Value, channels, hidden, true),
            out: Linear::new(store, rng, "value.out", Group::Value, hidden, 1, true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, params: &Bound<'t, '_, T>, pooled: Var<'t, T>) -> Var<'t, T> {
        self.out.forward(params, self.hidden.forward(params, pooled).tanh())
    }
}

pub struct DplModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Box<dyn Backbone<T>>,
    pub proposer: Proposer,
    pub vq: Branch,
    pub fi: Branch,
    pub attention: Option<ParamId>,
    pub head: ClassifierHead,
    pub value_head: ValueHead,
}

impl<T: Scalar> std::fmt::Debug for DplModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DplModel")
            .field("config", &self.config)
            .field("parameters", &self.store.count_in(&Group::ALL))
            .finish()
    }
}

/// Everything one forward pass recorded on a tape.
pub struct ForwardGraph<'t, T> {
    pub levels: Levels,
    pub feature_shape: (usize, usize, usize),
    pub unrolled: Unrolled<'t, T>,
    pub vq: BranchSummary<'t, T>,
    pub fi: BranchSummary<'t, T>,
    /// Fused feature classified at each step `1..=T`.
    pub step_features: Vec<Var<'t, T>>,
    pub step_logits: Vec<Var<'t, T>>,
    pub predictions: Vec<Prediction>,
}

/// Value-level summary of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRecord {
    pub prediction: Prediction,
    pub per_step_predictions: Vec<Prediction>,
    pub levels: Levels,
    pub trajectory: Vec<SamplingOutcome>,
    pub window_starts: Vec<usize>,
    /// Final fused two-branch feature.
    pub fused: Vec<f64>,
    /// Recurrent-unit invocations per branch `(vq, fi)`.
    pub branch_steps: (usize, usize),
}

impl<'t, T: Scalar> ForwardGraph<'t, T> {
    pub fn final_prediction(&self) -> Prediction {
        *self.predictions.last().expect("at least one step")
    }

    pub fn record(&self) -> ForwardRecord {
        let fused = self
            .step_features
            .last()
            .expect("at least one step")
            .value()
            .data()
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect();
        ForwardRecord {
            prediction: self.final_prediction(),
            per_step_predictions: self.predictions.clone(),
            levels: self.levels,
            trajectory: self.unrolled.outcomes.clone(),
            window_starts: self.unrolled.masks.iter().map(|m: &ChannelMask| m.start).collect(),
            fused,
            branch_steps: (self.vq.steps_executed, self.fi.steps_executed),
        }
    }
}

impl<T: Scalar> DplModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(config, &BackboneRegistry::with_defaults(), seed)
    }

    pub fn with_registry(config: &ModelConfig, registry: &BackboneRegistry<T>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = registry.build(&config.backbone, &mut store, &mut rng)?;
        let c = config.backbone.output_channels;
        let h = config.branch_hidden;
        let proposer = Proposer::new(&mut store, &mut rng, c, &config.fsm);
        let vq = Branch::new(&mut store, &mut rng, BranchKind::Vq, c, h);
        let fi = Branch::new(&mut store, &mut rng, BranchKind::Fi, c, h);
        let attention = (config.fusion == crate::branches::FusionStrategy::Attention)
            .then(|| attention_param(&mut store, &mut rng, h));
        let head = ClassifierHead::new(&mut store, &mut rng, config.fusion.output_dim(h));
        let value_head = ValueHead::new(&mut store, &mut rng, c, config.value_hidden);
        let mut model = Self {
            config: config.clone(),
            store,
            backbone,
            proposer,
            vq,
            fi,
            attention,
            head,
            value_head,
        };
        if let Some(path) = config.backbone.pretrained_path.clone() {
            crate::checkpoint::load_group_weights(&path, &mut model.store, Group::Backbone)?;
        }
        Ok(model)
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.output_channels
    }

    pub fn delta(&self) -> usize {
        self.config.fsm.delta_for(self.channels())
    }

    pub fn fused_dim(&self) -> usize {
        self.config.fusion.output_dim(self.config.branch_hidden)
    }

    /// Runs the detector on a feature map already recorded on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_features<'t>(
        &self,
        params: &Bound<'t, '_, T>,
        feature: Var<'t, T>,
        shape: (usize, usize, usize),
        levels: Levels,
        mode: SamplingMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardGraph<'t, T>> {
        if shape.2 != self.channels() {
            return Err(Error::ShapeMismatch {
                context: "forward",
                expected: format!("{} channels", self.channels()),
                actual: format!("{} channels", shape.2),
            });
        }
        let steps = levels.max_steps();
        let unrolled = unroll(&self.proposer, params, feature, shape, steps, self.delta(), mode, rng)?;
        let vq = run_branch(&self.vq, params, &unrolled.pooled, levels.vq)?;
        let fi = run_branch(&self.fi, params, &unrolled.pooled, levels.fi)?;
        let attention = self.attention.map(|id| params.var(id));
        let mut step_features = Vec::with_capacity(steps);
        let mut step_logits = Vec::with_capacity(steps);
        let mut predictions = Vec::with_capacity(steps);
        for t in 1..=steps {
            let a = vq.partial[t.min(levels.vq) - 1];
            let b = fi.partial[t.min(levels.fi) - 1];
            let fused = fuse_branches(a, b, self.config.fusion, attention)?;
            let (logits, pred) = classify(&self.head, params, fused)?;
            step_features.push(fused);
            step_logits.push(logits);
            predictions.push(pred);
        }
        Ok(ForwardGraph {
            levels,
            feature_shape: shape,
            unrolled,
            vq,
            fi,
            step_features,
            step_logits,
            predictions,
        })
    }

    /// Backbone plus [`Self::forward_features`].
    pub fn forward<'t>(
        &self,
        params: &Bound<'t, '_, T>,
        image: &FaceImage,
        levels: Levels,
        mode: SamplingMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardGraph<'t, T>> {
        let (feature, shape) = self.backbone.extract(params, image)?;
        self.forward_features(params, feature, shape, levels, mode, rng)
    }

    /// Inference-only forward returning the value record.
    pub fn infer(
        &self,
        image: &FaceImage,
        levels: Levels,
        mode: SamplingMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardRecord> {
        let tape = Tape::new();
        let params = Bound::new(&tape, &self.store);
        Ok(self.forward(&params, image, levels, mode, rng)?.record())
    }

    /// Backbone feature map values for one image.
    pub fn features(&self, image: &FaceImage) -> Result<(Matrix<T>, (usize, usize, usize))> {
        let tape = Tape::new();
        let params = Bound::new(&tape, &self.store);
        let (f, shape) = self.backbone.extract(&params, image)?;
        Ok((f.value(), shape))
    }
}

/// Indicator scores and levels for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub vqi: IndicatorScore,
    pub fii: IndicatorScore,
    pub levels: Levels,
}

/// Scores an image with both indicators and quantizes the scores.
#[derive(Debug, Clone)]
pub struct LevelRouter {
    pub vqi: Indicator,
    pub fii: Indicator,
    pub vqi_quantizer: QuantizerSpec,
    pub fii_quantizer: QuantizerSpec,
    pub fixed_depth: Option<usize>,
}

impl LevelRouter {
    pub fn route(&self, image: &FaceImage) -> Result<Routing> {
        let vqi = self.vqi.score(image)?;
        let fii = self.fii.score(image)?;
        let levels = match self.fixed_depth {
            Some(k) => Levels::new(k, k),
            None => Levels::new(
                quantize(vqi, &self.vqi_quantizer).get(),
                quantize(fii, &self.fii_quantizer).get(),
            ),
        };
        Ok(Routing { vqi, fii, levels })
    }

    pub fn step_levels(&self, routing: &Routing) -> (StepLevel, StepLevel) {
        (StepLevel::fixed(routing.levels.vq), StepLevel::fixed(routing.levels.fi))
    }
}

/// Indicator routing followed by a model forward.
pub fn forward<T: Scalar>(
    image: &FaceImage,
    model: &DplModel<T>,
    router: &LevelRouter,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardRecord> {
    let routing = router.route(image)?;
    model.infer(image, routing.levels, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::branches::FusionStrategy;
    use crate::fsm::FsmConfig;
    use crate::indicators::{IndicatorKind, Orientation};

    fn small_config(fusion: FusionStrategy) -> ModelConfig {
        ModelConfig {
            image_size: 64,
            backbone: BackboneSpec {
                name: "tiny".into(),
                output_channels: 12,
                pretrained_path: None,
            },
            branch_hidden: 8,
            fusion,
            fsm: FsmConfig { hidden: 6, delta: None },
            value_hidden: 4,
            fixed_depth: None,
        }
    }

    fn probe_image(seed: u64) -> FaceImage {
        let mut s = seed;
        FaceImage::new(
            64,
            64,
            (0..64 * 64 * 3)
                .map(|_| {
                    s = crate::indicators::splitmix64(s);
                    (s >> 56) as u8
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_depth_uses_one_step_and_no_masks() {
        let model = DplModel::<f64>::new(&small_config(FusionStrategy::Add), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = model
            .infer(&probe_image(1), Levels::new(1, 1), SamplingMode::Stochastic, &mut rng)
            .unwrap();
        assert_eq!(rec.per_step_predictions.len(), 1);
        assert!(rec.trajectory.is_empty());
        assert_eq!(rec.branch_steps, (1, 1));
    }

    #[test]
    fn step_counts_follow_levels() {
        let model = DplModel::<f64>::new(&small_config(FusionStrategy::Add), 2).unwrap();
        for (k1, k2) in [(1, 5), (3, 2), (4, 4), (5, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let rec = model
                .infer(&probe_image(2), Levels::new(k1, k2), SamplingMode::Stochastic, &mut rng)
                .unwrap();
            assert_eq!(rec.branch_steps, (k1, k2));
            assert_eq!(rec.per_step_predictions.len(), k1.max(k2));
            assert_eq!(rec.trajectory.len(), k1.max(k2) - 1);
            for p in &rec.per_step_predictions {
                assert!((p.confidences[0] + p.confidences[1] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_mode_is_reproducible() {
        let model = DplModel::<f64>::new(&small_config(FusionStrategy::Attention), 5).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            model
                .infer(&probe_image(3), Levels::new(4, 2), SamplingMode::Deterministic, &mut rng)
                .unwrap()
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn confidences_telescope() {
        let model = DplModel::<f64>::new(&small_config(FusionStrategy::Concat), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rec = model
            .infer(&probe_image(4), Levels::new(5, 3), SamplingMode::Stochastic, &mut rng)
            .unwrap();
        let c: Vec<f64> = rec.per_step_predictions.iter().map(|p| p.confidences[1]).collect();
        let sum: f64 = c.windows(2).map(|w| w[1] - w[0]).sum();
        assert!((sum - (c[c.len() - 1] - c[0])).abs() < 1e-12);
        assert_eq!(rec.fused.len(), 16);
    }

    #[test]
    fn router_maps_scores_to_levels() {
        let q = QuantizerSpec {
            levels: 5,
            orientation: Orientation::HigherIsLower,
            boundaries: vec![0.2, 0.4, 0.6, 0.8],
        };
        let router = LevelRouter {
            vqi: Indicator::proxy(IndicatorKind::Vqi),
            fii: Indicator::proxy(IndicatorKind::Fii),
            vqi_quantizer: q.clone(),
            fii_quantizer: q,
            fixed_depth: None,
        };
        let flat = FaceImage::filled(64, 64, [90, 90, 90]).unwrap();
        let r = router.route(&flat).unwrap();
        // flat image: minimal quality proxy → level 5; identifiability 0.2 → level 5 (tie goes low)
        assert_eq!(r.levels, Levels::new(5, 4));
        let fixed = LevelRouter {
            fixed_depth: Some(1),
            ..router
        };
        assert_eq!(fixed.route(&flat).unwrap().levels, Levels::new(1, 1));
        let model = DplModel::<f64>::new(&small_config(FusionStrategy::Add), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = forward(&flat, &model, &fixed, SamplingMode::Deterministic, &mut rng).unwrap();
        assert_eq!(rec.levels, Levels::new(1, 1));
    }
}
