//! Feature selection: a recurrent proposer picks a channel window per step,
//! and every channel outside the window has its spatial mean removed
//! before the map is passed to the next step.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Bound, GruCell, Group, Linear, ParamStore};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Matrix;

/// Floor added to the softplus output so σ never reaches zero.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Spatial mean of a feature map, `1 × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature<T>(pub Matrix<T>);

impl<T: Scalar> PooledFeature<T> {
    pub fn of(map: &FeatureMap<T>) -> Self {
        Self(map.values.mean_rows())
    }

    pub fn values(&self) -> &[T] {
        self.0.data()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal<T> {
    pub mu: T,
    pub sigma: T,
    pub hidden: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Draw from `N(μ, σ)`.
    Stochastic,
    /// Use `μ`.
    Deterministic,
    /// Ignore the proposer; position uniform on `[0, c)`.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingOutcome {
    /// Window position in `[0, c]`.
    pub position: f64,
    /// Pre-squash draw `z`, `position = c · sigmoid(z)`.
    pub draw: f64,
    /// Log-density of the draw under the proposal (`-ln c` in uniform mode).
    pub log_prob: f64,
    pub mode: SamplingMode,
}

/// Gaussian log-density `ln N(z; μ, σ)`.
pub fn gaussian_log_density<T: Scalar>(z: T, mu: T, sigma: T) -> T {
    let d = (z - mu) / sigma;
    -T::lit(0.5) * d * d - sigma.ln() - T::lit(0.5) * (T::lit(2.0) * T::PI()).ln()
}

/// Differential entropy of `N(μ, σ)`: `½ ln(2πe σ²)`.
pub fn gaussian_entropy<T: Scalar>(sigma: T) -> T {
    T::lit(0.5) * (T::lit(2.0) * T::PI() * T::E() * sigma * sigma).ln()
}

/// Draws a window position for one step.
pub fn sample_position<T: Scalar>(
    proposal: &MaskProposal<T>,
    channels: usize,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> SamplingOutcome {
    let c = channels as f64;
    let (mu, sigma) = (proposal.mu.to_f64_lossy(), proposal.sigma.to_f64_lossy());
    match mode {
        SamplingMode::Stochastic => {
            let eps: f64 = rng.sample(StandardNormal);
            let draw = mu + sigma * eps;
            SamplingOutcome {
                position: c * sigmoid(draw),
                draw,
                log_prob: gaussian_log_density(draw, mu, sigma),
                mode,
            }
        }
        SamplingMode::Deterministic => SamplingOutcome {
            position: c * sigmoid(mu),
            draw: mu,
            log_prob: gaussian_log_density(mu, mu, sigma),
            mode,
        },
        SamplingMode::UniformRandom => uniform_position(channels, rng),
    }
}

/// The stage-I randomizer: position uniform on `[0, c)`.
pub fn uniform_position(channels: usize, rng: &mut ChaCha8Rng) -> SamplingOutcome {
    let c = channels as f64;
    let u: f64 = rng.random();
    let draw = if u > 0.0 { (u / (1.0 - u)).ln() } else { f64::NEG_INFINITY };
    SamplingOutcome {
        position: c * u,
        draw,
        log_prob: -c.ln(),
        mode: SamplingMode::UniformRandom,
    }
}

/// Binary channel mask: channels in `[start, end)` are 0 (retained
/// unchanged), all others 1 (mean-subtracted). Every spatial position
/// shares the pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub position: f64,
    pub width: usize,
    pub start: usize,
    pub end: usize,
    pub shape: (usize, usize, usize),
}

impl ChannelMask {
    pub fn channels(&self) -> usize {
        self.shape.2
    }

    pub fn zeroed(&self) -> usize {
        self.end - self.start
    }

    /// Per-channel mask value (0 or 1).
    pub fn pattern(&self) -> Vec<u8> {
        (0..self.channels())
            .map(|i| u8::from(!(self.start..self.end).contains(&i)))
            .collect()
    }

    /// True for channels whose mean is subtracted.
    pub fn subtract_flags(&self) -> Vec<bool> {
        self.pattern().into_iter().map(|m| m == 1).collect()
    }

    /// The full `h × w × c` mask, row-major over `(y, x, channel)`.
    pub fn to_dense(&self) -> Vec<u8> {
        let (h, w, _) = self.shape;
        let pattern = self.pattern();
        (0..h * w).flat_map(|_| pattern.iter().copied()).collect()
    }
}

/// Window `[⌊position⌋, ⌊position⌋ + delta)` clamped to the channel range.
pub fn build_mask(position: f64, delta: usize, shape: (usize, usize, usize)) -> ChannelMask {
    let c = shape.2;
    let start = if position.is_finite() && position > 0.0 {
        (position.floor() as usize).min(c)
    } else {
        0
    };
    let end = (start + delta).min(c);
    ChannelMask {
        position,
        width: delta,
        start,
        end,
        shape,
    }
}

/// `f_next = f − M ⊗ mean(f)`: retained channels are copied bit-for-bit,
/// the rest are centered. Returns the new map and its spatial mean.
pub fn select_features<T: Scalar>(
    f: &FeatureMap<T>,
    mask: &ChannelMask,
) -> Result<(FeatureMap<T>, PooledFeature<T>)> {
    if f.shape() != mask.shape {
        return Err(Error::ShapeMismatch {
            context: "select_features",
            expected: format!("{:?}", mask.shape),
            actual: format!("{:?}", f.shape()),
        });
    }
    let tape = Tape::new();
    let next = tape.leaf(f.values.clone()).masked_center(&mask.subtract_flags()).value();
    let next = FeatureMap::new(f.height, f.width, next)?;
    let pooled = PooledFeature::of(&next);
    Ok((next, pooled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsmConfig {
    /// Proposer hidden size.
    pub hidden: usize,
    /// Retained window width; `None` means `⌊c / 3⌋`.
    #[serde(default)]
    pub delta: Option<usize>,
}

impl Default for FsmConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            delta: None,
        }
    }
}

impl FsmConfig {
    pub fn delta_for(&self, channels: usize) -> usize {
        self.delta.unwrap_or(channels / 3).clamp(1, channels)
    }
}

/// Proposer outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ProposalVars<'t, T> {
    pub mu: Var<'t, T>,
    pub sigma: Var<'t, T>,
    pub hidden: Var<'t, T>,
}

impl<'t, T: Scalar> ProposalVars<'t, T> {
    pub fn to_proposal(&self) -> MaskProposal<T> {
        MaskProposal {
            mu: self.mu.item(),
            sigma: self.sigma.item(),
            hidden: self.hidden.value(),
        }
    }

    /// `ln N(draw; μ, σ)` as a differentiable node.
    pub fn log_prob(&self, draw: T) -> Var<'t, T> {
        let tape = self.mu.tape();
        let ln_sigma = self.sigma.ln();
        let inv_sigma = (-ln_sigma).exp();
        let d = (tape.constant_scalar(draw) - self.mu) * inv_sigma;
        (d.square().scale(-T::lit(0.5)) - ln_sigma)
            .add_scalar(-T::lit(0.5) * (T::lit(2.0) * T::PI()).ln())
    }

    /// Gaussian entropy as a differentiable node.
    pub fn entropy(&self) -> Var<'t, T> {
        self.sigma
            .ln()
            .add_scalar(T::lit(0.5) * (T::lit(2.0) * T::PI() * T::E()).ln())
    }
}

/// The mask proposer Φ: a GRU over pooled features with a two-output head
/// `(μ, σ = softplus(s) + 1e-3)`.
#[derive(Debug, Clone)]
pub struct Proposer {
    pub channels: usize,
    pub gru: GruCell,
    pub head: Linear,
}

impl Proposer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        channels: usize,
        config: &FsmConfig,
    ) -> Self {
        let gru = GruCell::new(store, rng, "fsm.gru", Group::Fsm, channels, config.hidden);
        let head = Linear::new(store, rng, "fsm.head", Group::Fsm, config.hidden, 2, true);
        // start near the middle of the channel range with σ ≈ 1
        let bias = head.bias.expect("head has bias");
        let b = store.value_mut(bias);
        b.set(0, 0, T::zero());
        b.set(0, 1, T::lit((1f64.exp() - 1.0).ln()));
        Self {
            channels,
            gru,
            head,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    pub fn initial_hidden<'t, T: Scalar>(&self, tape: &'t Tape<T>) -> Var<'t, T> {
        tape.leaf(Matrix::zeros(1, self.hidden_dim()))
    }

    /// `μ, σ, g_t = Φ(f'_t, g_{t−1})` on a tape.
    pub fn propose_var<'t, T: Scalar>(
        &self,
        params: &Bound<'t, '_, T>,
        pooled: Var<'t, T>,
        hidden: Var<'t, T>,
    ) -> Result<ProposalVars<'t, T>> {
        if pooled.shape() != (1, self.channels) {
            return Err(Error::ShapeMismatch {
                context: "propose",
                expected: format!("1x{}", self.channels),
                actual: format!("{:?}", pooled.shape()),
            });
        }
        let g = self.gru.step(params, pooled, hidden);
        let out = self.head.forward(params, g);
        let mu = out.slice_cols(0, 1);
        let sigma = out.slice_cols(1, 1).softplus().add_scalar(T::lit(SIGMA_FLOOR));
        Ok(ProposalVars {
            mu,
            sigma,
            hidden: g,
        })
    }

    /// Value-level proposal from a full feature map.
    pub fn propose<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        f: &FeatureMap<T>,
        hidden: &Matrix<T>,
    ) -> Result<MaskProposal<T>> {
        if f.channels() != self.channels {
            return Err(Error::ShapeMismatch {
                context: "propose",
                expected: format!("{} channels", self.channels),
                actual: format!("{} channels", f.channels()),
            });
        }
        let tape = Tape::new();
        let p = Bound::new(&tape, store);
        let pooled = tape.leaf(f.values.mean_rows());
        let h = tape.leaf(hidden.clone());
        Ok(self.propose_var(&p, pooled, h)?.to_proposal())
    }
}

/// One FSM trajectory recorded on a tape.
pub struct Unrolled<'t, T> {
    /// `f'_1 … f'_T`.
    pub pooled: Vec<Var<'t, T>>,
    /// Proposals for steps `2..=T` (empty in uniform mode).
    pub proposals: Vec<ProposalVars<'t, T>>,
    /// Sampling outcomes for steps `2..=T`.
    pub outcomes: Vec<SamplingOutcome>,
    pub masks: Vec<ChannelMask>,
}

/// Runs `steps` feature-selection steps starting from `f_1 = f`.
///
/// Step 1 sees the unmasked map; every later input comes from one
/// propose → sample → mask → select cycle. In uniform mode the proposer is
/// not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn unroll<'t, T: Scalar>(
    proposer: &Proposer,
    params: &Bound<'t, '_, T>,
    f1: Var<'t, T>,
    shape: (usize, usize, usize),
    steps: usize,
    delta: usize,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> Result<Unrolled<'t, T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("unroll needs at least one step".into()));
    }
    let c = shape.2;
    let mut f = f1;
    let mut pooled = vec![f.mean_rows()];
    let mut proposals = Vec::new();
    let mut outcomes = Vec::new();
    let mut masks = Vec::new();
    let mut hidden = proposer.initial_hidden(params.tape());
    for _ in 1..steps {
        let outcome = match mode {
            SamplingMode::UniformRandom => uniform_position(c, rng),
            _ => {
                let pv = proposer.propose_var(params, *pooled.last().expect("non-empty"), hidden)?;
                hidden = pv.hidden;
                proposals.push(pv);
                sample_position(&pv.to_proposal(), c, mode, rng)
            }
        };
        let mask = build_mask(outcome.position, delta, shape);
        f = f.masked_center(&mask.subtract_flags());
        pooled.push(f.mean_rows());
        outcomes.push(outcome);
        masks.push(mask);
    }
    Ok(Unrolled {
        pooled,
        proposals,
        outcomes,
        masks,
    })
}

/// One line of the trajectory export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub sample: usize,
    pub step: usize,
    pub position: f64,
    pub window_start: usize,
    pub window_end: usize,
    pub draw: f64,
    pub log_prob: f64,
    pub mode: SamplingMode,
}

/// Writes sampled positions as JSON lines, one per (sample, step ≥ 2).
pub fn write_trajectories(
    path: &Path,
    trajectories: &[(usize, Vec<SamplingOutcome>, Vec<ChannelMask>)],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (sample, outcomes, masks) in trajectories {
        for (i, (o, m)) in outcomes.iter().zip(masks).enumerate() {
            let line = TrajectoryLine {
                sample: *sample,
                step: i + 2,
                position: o.position,
                window_start: m.start,
                window_end: m.end,
                draw: o.draw,
                log_prob: o.log_prob,
                mode: o.mode,
            };
            let json = serde_json::to_string(&line).expect("serializable");
            writeln!(out, "{json}").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}
