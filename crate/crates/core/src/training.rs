//! Two-stage optimization.
//!
//! Stage I trains backbone, branches, fusion and head on focal
//! cross-entropy plus the hard-sample entropy term, with the mask proposer
//! replaced by a uniform randomizer. Stage II freezes all of those and
//! trains only the proposer and the value head with a clipped surrogate
//! objective, rewarding each mask by the change it causes in the
//! ground-truth confidence.
//!
//! Gradients are computed per sample on separate tapes and summed in
//! sample order, so results do not depend on the worker count.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::FaceImage;
use crate::branches::Prediction;
use crate::checkpoint::{self, CheckpointContents, Progress};
use crate::config::{
    CompressionPolicy, IndicatorBackendKind, PpoConfig, RegPlacement, RegVariant, ReturnRule, RunConfig,
    TrainingConfig,
};
use crate::data::{derive_seed, jpeg_augment, Dataset, Split};
use crate::error::{Error, Result};
use crate::fsm::{build_mask, Proposer, SamplingMode};
use crate::indicators::{
    fit_quantizer, quantizer_path, Indicator, IndicatorBackend, IndicatorKind, IndicatorScore, Orientation,
    PrecomputedEmbedder, QuantizerSpec,
};
use crate::model::{DplModel, ForwardGraph, ForwardRecord, LevelRouter, ValueHead};
use crate::nn::{Adam, AdamConfig, Bound, GradBuffer, Group, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Groups trained in stage I.
pub const STAGE1_GROUPS: [Group; 5] = [Group::Backbone, Group::BranchVq, Group::BranchFi, Group::Fusion, Group::Head];
/// Groups trained in stage II.
pub const STAGE2_GROUPS: [Group; 2] = [Group::Fsm, Group::Value];
/// Groups that must not change during stage II.
pub const FROZEN_IN_STAGE2: [Group; 5] = STAGE1_GROUPS;

const CONFIDENCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    pub rew: f64,
    pub se: f64,
    /// Entropy bonus already multiplied by its coefficient.
    pub en: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn stage1(ce: f64, reg: f64) -> Self {
        Self {
            ce,
            reg,
            total: ce + reg,
            ..Self::default()
        }
    }

    pub fn stage2(rew: f64, se: f64, en: f64) -> Self {
        Self {
            rew,
            se,
            en,
            total: rew + se - en,
            ..Self::default()
        }
    }
}

// ---------------------------------------------------------------- losses

/// `mean_i −(1 − p_y)^γ ln p_y`, with `p_y` clamped to at least `1e-12`.
pub fn focal_ce_loss(predictions: &[Prediction], labels: &[u8], gamma: f64) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "one label per prediction");
    if predictions.is_empty() {
        return 0.0;
    }
    let sum: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let py = p.confidences[y as usize].max(CONFIDENCE_FLOOR);
            -(1.0 - py).powf(gamma) * py.ln()
        })
        .sum();
    sum / predictions.len() as f64
}

/// Per-sample focal term on a tape from `1 × 2` logits.
pub fn focal_ce_var<'t, T: Scalar>(logits: Var<'t, T>, label: u8, gamma: f64) -> Var<'t, T> {
    let lp = logits.log_softmax_rows().slice_cols(label as usize, 1);
    if gamma == 0.0 {
        return -lp;
    }
    let one_minus_p = lp.exp().scale(-T::one()).add_scalar(T::one());
    -(one_minus_p.powf(T::lit(gamma)) * lp)
}

/// 1 when the final-step prediction disagrees with the label (a 0.5/0.5
/// tie predicts real).
pub fn is_hard_sample(record: &ForwardRecord, label: u8) -> bool {
    record.prediction.predicted_label() != label as usize
}

fn selected_steps(n_steps: usize, placement: RegPlacement) -> std::ops::Range<usize> {
    match placement {
        RegPlacement::First => 0..1,
        RegPlacement::Last => n_steps - 1..n_steps,
        RegPlacement::LastAndPreceding => 0..n_steps,
    }
}

fn neg_entropy(c: &[f64; 2]) -> f64 {
    c.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum()
}

/// `(1/B) Σ_i Π(x_i) Σ_{t ∈ placement} s · Σ_c c_t,c ln c_t,c`, with
/// `s = +1` for the defer-decision variant (minimizing raises entropy) and
/// `s = −1` for the literal variant.
pub fn reg_loss(records: &[ForwardRecord], flags: &[bool], placement: RegPlacement, variant: RegVariant) -> f64 {
    assert_eq!(records.len(), flags.len(), "one flag per record");
    if records.is_empty() {
        return 0.0;
    }
    let sign = match variant {
        RegVariant::DeferDecision => 1.0,
        RegVariant::LiteralFormula => -1.0,
    };
    let mut sum = 0.0;
    for (r, &hard) in records.iter().zip(flags) {
        if !hard {
            continue;
        }
        for t in selected_steps(r.per_step_predictions.len(), placement) {
            sum += sign * neg_entropy(&r.per_step_predictions[t].confidences);
        }
    }
    sum / records.len() as f64
}

/// One sample's hard-sample term on a tape, not yet divided by `B`.
pub fn reg_var<'t, T: Scalar>(
    step_logits: &[Var<'t, T>],
    placement: RegPlacement,
    variant: RegVariant,
) -> Option<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    for t in selected_steps(step_logits.len(), placement) {
        let lp = step_logits[t].log_softmax_rows();
        let term = (lp.exp() * lp).sum();
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    acc.map(|a| match variant {
        RegVariant::DeferDecision => a,
        RegVariant::LiteralFormula => -a,
    })
}

/// Rewards and returns of one trajectory.
///
/// With `T` steps there are `T − 1` transitions. Transition `j` (0-based)
/// is the proposer acting on state `f_{j+1}`; its action `l_{j+2}` earns
/// `r_{j+2} = c_{j+2} − c_{j+1}`, stored at `rewards[j]`. `returns[j]` is
/// the return credited to that transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Ground-truth confidence `c_t`, `t = 1..=T`.
    pub confidences: Vec<f64>,
    pub positions: Vec<f64>,
    pub draws: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    /// `V(f_t)` for each transition's state; empty until estimated.
    pub values: Vec<f64>,
}

pub fn returns_from_rewards(rewards: &[f64], rule: ReturnRule) -> Vec<f64> {
    match rule {
        ReturnRule::RewardToGo => {
            let mut out = vec![0.0; rewards.len()];
            let mut acc = 0.0;
            for j in (0..rewards.len()).rev() {
                acc += rewards[j];
                out[j] = acc;
            }
            out
        }
        ReturnRule::Total => {
            let total: f64 = rewards.iter().sum();
            vec![total; rewards.len()]
        }
    }
}

pub fn compute_rewards(record: &ForwardRecord, label: u8, rule: ReturnRule) -> TrajectoryRecord {
    let confidences: Vec<f64> = record
        .per_step_predictions
        .iter()
        .map(|p| p.confidences[label as usize])
        .collect();
    let rewards: Vec<f64> = confidences.windows(2).map(|w| w[1] - w[0]).collect();
    TrajectoryRecord {
        returns: returns_from_rewards(&rewards, rule),
        positions: record.trajectory.iter().map(|o| o.position).collect(),
        draws: record.trajectory.iter().map(|o| o.draw).collect(),
        old_log_probs: record.trajectory.iter().map(|o| o.log_prob).collect(),
        confidences,
        rewards,
        values: Vec::new(),
    }
}

/// `A_t = R_t − V(f_t)`.
pub fn advantage(trajectory: &TrajectoryRecord) -> Vec<f64> {
    assert_eq!(trajectory.values.len(), trajectory.returns.len(), "values estimated");
    trajectory
        .returns
        .iter()
        .zip(&trajectory.values)
        .map(|(r, v)| r - v)
        .collect()
}

/// Zero mean, unit variance; left unchanged when fewer than two values or
/// zero spread.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        for a in adv.iter_mut() {
            *a -= mean;
        }
        return;
    }
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` for one transition.
pub fn ppo_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// `−mean_t min(ρ_t A_t, clip(ρ_t, 1−ε, 1+ε) A_t)`, `ρ_t = exp(new − old)`.
pub fn ppo_loss(new_log_probs: &[f64], old_log_probs: &[f64], advantages: &[f64], cfg: &PpoConfig) -> f64 {
    assert!(
        new_log_probs.len() == old_log_probs.len() && old_log_probs.len() == advantages.len(),
        "equal-length step lists"
    );
    if advantages.is_empty() {
        return 0.0;
    }
    let sum: f64 = new_log_probs
        .iter()
        .zip(old_log_probs)
        .zip(advantages)
        .map(|((n, o), a)| ppo_term((n - o).exp(), *a, cfg.clip_epsilon))
        .sum();
    -sum / advantages.len() as f64
}

/// One transition's surrogate on a tape: the clipped branch, when it is
/// the active minimum, carries no gradient.
pub fn ppo_term_var<'t, T: Scalar>(new_log_prob: Var<'t, T>, old_log_prob: f64, advantage: f64, epsilon: f64) -> Var<'t, T> {
    let ratio = new_log_prob.add_scalar(T::lit(-old_log_prob)).exp();
    let r = ratio.item().to_f64_lossy();
    let unclipped = r * advantage;
    let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if clipped < unclipped {
        new_log_prob.tape().constant_scalar(T::lit(clipped))
    } else {
        ratio.scale(T::lit(advantage))
    }
}

/// Mean squared error.
pub fn value_loss(values: &[f64], returns: &[f64]) -> f64 {
    assert_eq!(values.len(), returns.len(), "aligned lists");
    if values.is_empty() {
        return 0.0;
    }
    values.iter().zip(returns).map(|(v, r)| (v - r) * (v - r)).sum::<f64>() / values.len() as f64
}

/// Mean Gaussian differential entropy `½ ln(2πe σ²)` over proposals.
pub fn entropy_bonus(sigmas: &[f64]) -> f64 {
    if sigmas.is_empty() {
        return 0.0;
    }
    sigmas.iter().map(|&s| crate::fsm::gaussian_entropy(s)).sum::<f64>() / sigmas.len() as f64
}

// ---------------------------------------------------------------- steps

/// One training example; `key` indexes the sample's random stream.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub image: &'a FaceImage,
    pub label: u8,
    pub key: u64,
}

/// Per-step settings shared by both stages.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub training: &'a TrainingConfig,
    pub ppo: &'a PpoConfig,
    pub compression: &'a CompressionPolicy,
    /// Seed of this optimization step; items derive their own from it.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub samples: usize,
    pub correct: usize,
    /// Stage II: transitions used in the update.
    pub transitions: usize,
}

fn map_items<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> Result<O> + Sync + Send) -> Result<Vec<O>> {
    if workers <= 1 {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn check_finite(stage: &'static str, step: usize, losses: &LossBreakdown, grads_ok: bool) -> Result<()> {
    let vals = [losses.ce, losses.reg, losses.rew, losses.se, losses.en, losses.total];
    if vals.iter().all(|v| v.is_finite()) && grads_ok {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        stage,
        step,
        detail: format!("losses {losses:?}, finite gradients: {grads_ok}"),
    })
}

fn prepare(
    item: &BatchItem<'_>,
    router: &LevelRouter,
    ctx: &StepContext<'_>,
) -> Result<(FaceImage, crate::model::Levels, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[item.key]));
    let img = jpeg_augment(item.image, ctx.compression, &mut rng)?;
    let levels = router.route(&img)?.levels;
    Ok((img, levels, rng))
}

struct Stage1Sample<T> {
    grads: Vec<Option<Matrix<T>>>,
    ce: f64,
    reg: f64,
    correct: bool,
}

/// One gradient step on `L_1 = L_CE + L_REG` with the uniform randomizer.
pub fn stage1_step<T: Scalar>(
    model: &mut DplModel<T>,
    router: &LevelRouter,
    adam: &mut Adam<T>,
    batch: &[BatchItem<'_>],
    ctx: &StepContext<'_>,
    step_index: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Ok(StepReport::default());
    }
    let cfg = ctx.training;
    let inv_b = 1.0 / batch.len() as f64;
    let m: &DplModel<T> = model;
    let samples = map_items(batch, cfg.workers, |item| -> Result<Stage1Sample<T>> {
        let (img, levels, mut rng) = prepare(item, router, ctx)?;
        let tape = Tape::new();
        let params = Bound::new(&tape, &m.store);
        let graph = m.forward(&params, &img, levels, SamplingMode::UniformRandom, &mut rng)?;
        let last = *graph.step_logits.last().expect("at least one step");
        let focal = focal_ce_var(last, item.label, cfg.focal_gamma);
        let correct = graph.final_prediction().predicted_label() == item.label as usize;
        let mut loss = focal.scale(T::lit(inv_b));
        let mut reg = 0.0;
        if cfg.use_reg_loss && !correct {
            if let Some(r) = reg_var(&graph.step_logits, cfg.reg_placement, cfg.reg_variant) {
                reg = r.item().to_f64_lossy() * inv_b;
                loss = loss + r.scale(T::lit(inv_b));
            }
        }
        let ce = focal.item().to_f64_lossy() * inv_b;
        let mut grads = tape.backward(loss);
        Ok(Stage1Sample {
            grads: params.collect(&mut grads, &STAGE1_GROUPS),
            ce,
            reg,
            correct,
        })
    })?;
    let mut buf = GradBuffer::new(model.store.len());
    let (mut ce, mut reg, mut correct) = (0.0, 0.0, 0);
    for s in samples {
        ce += s.ce;
        reg += s.reg;
        correct += s.correct as usize;
        buf.accumulate(s.grads);
    }
    let losses = LossBreakdown::stage1(ce, reg);
    check_finite("stage I", step_index, &losses, buf.all_finite())?;
    adam.update(&mut model.store, &buf, &STAGE1_GROUPS);
    Ok(StepReport {
        losses,
        samples: batch.len(),
        correct,
        transitions: 0,
    })
}

/// A collected stage-II trajectory: the states the proposer saw, its
/// draws, and the per-transition returns and old-policy quantities.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub states: Vec<Matrix<T>>,
    pub draws: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub returns: Vec<f64>,
    pub old_values: Vec<f64>,
}

impl<T> Episode<T> {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Old-policy log-probabilities and values of an episode, computed with
/// the same graph the update uses.
pub fn score_episode<T: Scalar>(
    proposer: &Proposer,
    value_head: &ValueHead,
    store: &ParamStore<T>,
    states: &[Matrix<T>],
    draws: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let params = Bound::new(&tape, store);
    let mut h = proposer.initial_hidden(&tape);
    let mut lps = Vec::with_capacity(draws.len());
    let mut vals = Vec::with_capacity(draws.len());
    for (s, &z) in states.iter().zip(draws) {
        let x = tape.leaf(s.clone());
        let pv = proposer.propose_var(&params, x, h)?;
        h = pv.hidden;
        lps.push(pv.log_prob(T::lit(z)).item().to_f64_lossy());
        vals.push(value_head.forward(&params, x).item().to_f64_lossy());
    }
    Ok((lps, vals))
}

fn add<'t, T: Scalar>(acc: Option<Var<'t, T>>, v: Var<'t, T>) -> Option<Var<'t, T>> {
    Some(acc.map_or(v, |a| a + v))
}

struct PpoSample<T> {
    grads: Vec<Option<Matrix<T>>>,
    rew: f64,
    se: f64,
    en: f64,
}

/// One inner PPO epoch over `episodes`: returns the summed gradient of
/// `L_2 = L_REW + L_SE − β·L_EN` (all means over transitions) and its parts.
pub fn ppo_gradients<T: Scalar>(
    proposer: &Proposer,
    value_head: &ValueHead,
    store: &ParamStore<T>,
    episodes: &[Episode<T>],
    advantages: &[Vec<f64>],
    cfg: &PpoConfig,
    workers: usize,
) -> Result<(GradBuffer<T>, LossBreakdown)> {
    let n: usize = episodes.iter().map(|e| e.len()).sum();
    let mut buf = GradBuffer::new(store.len());
    if n == 0 {
        return Ok((buf, LossBreakdown::default()));
    }
    let inv_n = T::lit(1.0 / n as f64);
    let pairs: Vec<(&Episode<T>, &Vec<f64>)> = episodes.iter().zip(advantages).collect();
    let samples = map_items(&pairs, workers, |(ep, adv)| -> Result<PpoSample<T>> {
        let tape = Tape::new();
        let params = Bound::new(&tape, store);
        let mut h = proposer.initial_hidden(&tape);
        let mut rew: Option<Var<'_, T>> = None;
        let mut se: Option<Var<'_, T>> = None;
        let mut en: Option<Var<'_, T>> = None;
        for j in 0..ep.len() {
            let x = tape.leaf(ep.states[j].clone());
            let pv = proposer.propose_var(&params, x, h)?;
            h = pv.hidden;
            let lp = pv.log_prob(T::lit(ep.draws[j]));
            rew = add(rew, -ppo_term_var(lp, ep.old_log_probs[j], adv[j], cfg.clip_epsilon));
            let v = value_head.forward(&params, x);
            se = add(se, v.add_scalar(T::lit(-ep.returns[j])).square());
            en = add(en, pv.entropy());
        }
        let (rew, se, en) = match (rew, se, en) {
            (Some(a), Some(b), Some(c)) => (a.scale(inv_n), b.scale(inv_n), c.scale(inv_n * T::lit(cfg.entropy_coefficient))),
            _ => {
                return Ok(PpoSample {
                    grads: Vec::new(),
                    rew: 0.0,
                    se: 0.0,
                    en: 0.0,
                })
            }
        };
        let loss = rew + se - en;
        let out = (rew.item().to_f64_lossy(), se.item().to_f64_lossy(), en.item().to_f64_lossy());
        let mut grads = tape.backward(loss);
        Ok(PpoSample {
            grads: params.collect(&mut grads, &STAGE2_GROUPS),
            rew: out.0,
            se: out.1,
            en: out.2,
        })
    })?;
    let (mut rew, mut se, mut en) = (0.0, 0.0, 0.0);
    for s in samples {
        rew += s.rew;
        se += s.se;
        en += s.en;
        if !s.grads.is_empty() {
            buf.accumulate(s.grads);
        }
    }
    Ok((buf, LossBreakdown::stage2(rew, se, en)))
}

/// Advantages `R − V_old` per episode, normalized over the whole batch
/// when enabled.
pub fn batch_advantages<T>(episodes: &[Episode<T>], normalize: bool) -> Vec<Vec<f64>> {
    let mut flat: Vec<f64> = episodes
        .iter()
        .flat_map(|e| e.returns.iter().zip(&e.old_values).map(|(r, v)| r - v))
        .collect();
    if normalize {
        normalize_advantages(&mut flat);
    }
    let mut out = Vec::with_capacity(episodes.len());
    let mut k = 0;
    for e in episodes {
        out.push(flat[k..k + e.len()].to_vec());
        k += e.len();
    }
    out
}

/// Runs the inner PPO epochs on collected episodes; returns the losses of
/// the first inner epoch (evaluated at the collection policy).
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<T: Scalar>(
    proposer: &Proposer,
    value_head: &ValueHead,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    episodes: &[Episode<T>],
    cfg: &PpoConfig,
    normalize: bool,
    workers: usize,
    step_index: usize,
) -> Result<LossBreakdown> {
    let advantages = batch_advantages(episodes, normalize);
    let mut first = None;
    for _ in 0..cfg.ppo_epochs_per_batch {
        let (buf, losses) = ppo_gradients(proposer, value_head, store, episodes, &advantages, cfg, workers)?;
        check_finite("stage II", step_index, &losses, buf.all_finite())?;
        first.get_or_insert(losses);
        adam.update(store, &buf, &STAGE2_GROUPS);
    }
    Ok(first.unwrap_or_default())
}

struct Collected<T> {
    episode: Episode<T>,
    correct: bool,
}

fn collect_episode<T: Scalar>(
    model: &DplModel<T>,
    router: &LevelRouter,
    item: &BatchItem<'_>,
    ctx: &StepContext<'_>,
) -> Result<Collected<T>> {
    let (img, levels, mut rng) = prepare(item, router, ctx)?;
    let tape = Tape::new();
    let params = Bound::new(&tape, &model.store);
    let graph: ForwardGraph<'_, T> = model.forward(&params, &img, levels, SamplingMode::Stochastic, &mut rng)?;
    let record = graph.record();
    let traj = compute_rewards(&record, item.label, ctx.training.return_rule);
    let n = traj.rewards.len();
    let states: Vec<Matrix<T>> = graph.unrolled.pooled[..n].iter().map(|v| v.value()).collect();
    let (old_log_probs, old_values) =
        score_episode(&model.proposer, &model.value_head, &model.store, &states, &traj.draws)?;
    Ok(Collected {
        episode: Episode {
            states,
            draws: traj.draws,
            old_log_probs,
            returns: traj.returns,
            old_values,
        },
        correct: record.prediction.predicted_label() == item.label as usize,
    })
}

/// Collects trajectories with the current proposer, then optimizes
/// `L_2` for the configured number of inner epochs. Fails if any frozen
/// parameter changed.
pub fn stage2_step<T: Scalar>(
    model: &mut DplModel<T>,
    router: &LevelRouter,
    adam: &mut Adam<T>,
    batch: &[BatchItem<'_>],
    ctx: &StepContext<'_>,
    step_index: usize,
) -> Result<StepReport> {
    let frozen_before = model.store.hash_groups(&FROZEN_IN_STAGE2);
    let m: &DplModel<T> = model;
    let collected = map_items(batch, ctx.training.workers, |item| collect_episode(m, router, item, ctx))?;
    let correct = collected.iter().filter(|c| c.correct).count();
    let episodes: Vec<Episode<T>> = collected.into_iter().map(|c| c.episode).filter(|e| !e.is_empty()).collect();
    let transitions = episodes.iter().map(|e| e.len()).sum();
    let losses = ppo_update(
        &model.proposer,
        &model.value_head,
        &mut model.store,
        adam,
        &episodes,
        ctx.ppo,
        ctx.training.normalize_advantages,
        ctx.training.workers,
        step_index,
    )?;
    verify_frozen(&model.store, &frozen_before)?;
    Ok(StepReport {
        losses,
        samples: batch.len(),
        correct,
        transitions,
    })
}

pub fn verify_frozen<T: Scalar>(store: &ParamStore<T>, expected_hash: &str) -> Result<()> {
    if store.hash_groups(&FROZEN_IN_STAGE2) == expected_hash {
        return Ok(());
    }
    let changed: Vec<&str> = FROZEN_IN_STAGE2.iter().map(|g| g.name()).collect();
    Err(Error::FrozenParameterViolation(changed.join("+")))
}

// ------------------------------------------------------ rigged harness

/// Outcome of [`rigged_reward_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiggedOutcome {
    pub channels: usize,
    pub delta: usize,
    /// First PPO step after which every probe's deterministic position
    /// lies in `[0, δ)`.
    pub converged_at: Option<usize>,
    /// Mean deterministic probe position after each PPO step.
    pub positions: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiggedSettings {
    pub channels: usize,
    pub episodes_per_step: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub ppo: PpoConfig,
}

impl Default for RiggedSettings {
    fn default() -> Self {
        Self {
            channels: 12,
            episodes_per_step: 16,
            max_steps: 200,
            learning_rate: 1e-2,
            ppo: PpoConfig::default(),
        }
    }
}

/// Single-decision environment: the state is a random pooled feature and
/// the reward is 1 when the sampled window starts inside `[0, δ)`, else 0.
/// Trains a fresh proposer and value head with [`ppo_update`].
pub fn rigged_reward_run(seed: u64, settings: &RiggedSettings) -> Result<RiggedOutcome> {
    let c = settings.channels;
    let fsm = crate::fsm::FsmConfig::default();
    let delta = fsm.delta_for(c);
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let mut store = ParamStore::<f64>::new();
    let proposer = Proposer::new(&mut store, &mut init, c, &fsm);
    let value_head = ValueHead::new(&mut store, &mut init, c, 16);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: settings.learning_rate,
            ..AdamConfig::default()
        },
        store.len(),
    );
    let random_state = |rng: &mut ChaCha8Rng| Matrix::from_fn(1, c, |_, _| rng.random_range(-1.0..1.0));
    let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let probes: Vec<Matrix<f64>> = (0..8).map(|_| random_state(&mut probe_rng)).collect();
    let mut env = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut positions = Vec::new();
    let mut converged_at = None;
    for step in 0..settings.max_steps {
        let mut episodes = Vec::with_capacity(settings.episodes_per_step);
        for _ in 0..settings.episodes_per_step {
            let state = random_state(&mut env);
            let hidden = Matrix::zeros(1, proposer.hidden_dim());
            let fmap = crate::backbone::FeatureMap {
                height: 1,
                width: 1,
                values: state.clone(),
            };
            let proposal = proposer.propose(&store, &fmap, &hidden)?;
            let outcome = crate::fsm::sample_position(&proposal, c, SamplingMode::Stochastic, &mut env);
            let mask = build_mask(outcome.position, delta, (1, 1, c));
            let reward = if mask.start < delta { 1.0 } else { 0.0 };
            let states = vec![state];
            let draws = vec![outcome.draw];
            let (old_log_probs, old_values) = score_episode(&proposer, &value_head, &store, &states, &draws)?;
            episodes.push(Episode {
                states,
                draws,
                old_log_probs,
                returns: vec![reward],
                old_values,
            });
        }
        ppo_update(&proposer, &value_head, &mut store, &mut adam, &episodes, &settings.ppo, true, 1, step)?;
        let mut all_inside = true;
        let mut mean = 0.0;
        for p in &probes {
            let fmap = crate::backbone::FeatureMap {
                height: 1,
                width: 1,
                values: p.clone(),
            };
            let prop = proposer.propose(&store, &fmap, &Matrix::zeros(1, proposer.hidden_dim()))?;
            let pos = crate::fsm::sample_position(&prop, c, SamplingMode::Deterministic, &mut env).position;
            mean += pos / probes.len() as f64;
            all_inside &= build_mask(pos, delta, (1, 1, c)).start < delta;
        }
        positions.push(mean);
        if all_inside {
            converged_at = Some(step + 1);
            break;
        }
    }
    Ok(RiggedOutcome {
        channels: c,
        delta,
        converged_at,
        positions,
    })
}

// ------------------------------------------------------------- pipeline

pub fn build_indicators(config: &RunConfig) -> Result<(Indicator, Indicator)> {
    let ind = &config.indicators;
    Ok(match ind.backend {
        IndicatorBackendKind::Proxy => (Indicator::proxy(IndicatorKind::Vqi), Indicator::proxy(IndicatorKind::Fii)),
        IndicatorBackendKind::Embeddings => {
            let path = ind
                .embeddings_path
                .as_ref()
                .ok_or_else(|| Error::Config("indicators.embeddings_path is required".into()))?;
            let embedder: Arc<dyn crate::indicators::Embedder> = Arc::new(PrecomputedEmbedder::load(path)?);
            let make = |kind, prompts: &crate::indicators::PromptPair| Indicator {
                kind,
                backend: IndicatorBackend::Prompt {
                    embedder: embedder.clone(),
                    prompts: prompts.clone(),
                    temperature: ind.temperature,
                },
            };
            (make(IndicatorKind::Vqi, &ind.vqi_prompts), make(IndicatorKind::Fii, &ind.fii_prompts))
        }
    })
}

/// Fitted quantizers plus the level counts they induce on the fit set.
#[derive(Debug, Clone)]
pub struct FittedIndicators {
    pub vqi: QuantizerSpec,
    pub fii: QuantizerSpec,
    /// `[indicator][level − 1]` image counts.
    pub histogram: [Vec<usize>; 2],
}

/// Scores every (unaugmented) image with both indicators and fits
/// equal-frequency quantizers; higher scores map to fewer steps.
pub fn fit_indicators(config: &RunConfig, images: &[FaceImage]) -> Result<FittedIndicators> {
    let (vqi, fii) = build_indicators(config)?;
    let scores: Vec<(IndicatorScore, IndicatorScore)> = images
        .par_iter()
        .map(|img| Ok((vqi.score(img)?, fii.score(img)?)))
        .collect::<Result<_>>()?;
    let (sv, sf): (Vec<_>, Vec<_>) = scores.into_iter().unzip();
    let qv = fit_quantizer(&sv, config.indicators.vqi_levels, Orientation::HigherIsLower)?;
    let qf = fit_quantizer(&sf, config.indicators.fii_levels, Orientation::HigherIsLower)?;
    let hist = |scores: &[IndicatorScore], q: &QuantizerSpec| {
        let mut h = vec![0; q.levels];
        for &s in scores {
            h[crate::indicators::quantize(s, q).get() - 1] += 1;
        }
        h
    };
    Ok(FittedIndicators {
        histogram: [hist(&sv, &qv), hist(&sf, &qf)],
        vqi: qv,
        fii: qf,
    })
}

pub fn save_quantizers(dir: &Path, fitted: &FittedIndicators) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fitted.vqi.save(&quantizer_path(dir, IndicatorKind::Vqi))?;
    fitted.fii.save(&quantizer_path(dir, IndicatorKind::Fii))
}

pub fn load_quantizers(dir: &Path) -> Result<(QuantizerSpec, QuantizerSpec)> {
    Ok((
        QuantizerSpec::load(&quantizer_path(dir, IndicatorKind::Vqi))?,
        QuantizerSpec::load(&quantizer_path(dir, IndicatorKind::Fii))?,
    ))
}

pub fn build_router(config: &RunConfig, vqi_q: QuantizerSpec, fii_q: QuantizerSpec) -> Result<LevelRouter> {
    let (vqi, fii) = build_indicators(config)?;
    Ok(LevelRouter {
        vqi,
        fii,
        vqi_quantizer: vqi_q,
        fii_quantizer: fii_q,
        fixed_depth: config.model.fixed_depth,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u8,
    pub steps: usize,
    pub samples: usize,
    pub transitions: usize,
    /// Sample-weighted means over the epoch's steps.
    pub losses: LossBreakdown,
    pub train_accuracy: f64,
    /// Hash of backbone, branches, fusion and head after the epoch.
    pub frozen_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub epochs_run: usize,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn stage_of(epoch: usize, t: &TrainingConfig) -> u8 {
    if epoch <= t.stage1_epochs {
        1
    } else {
        2
    }
}

fn stage_adam<T: Scalar>(config: &RunConfig, stage: u8, n: usize) -> Adam<T> {
    let t = &config.training;
    let lr = match stage {
        1 => t.learning_rate,
        _ => t.stage2_learning_rate.unwrap_or(t.learning_rate),
    };
    Adam::new(
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        },
        n,
    )
}

/// Quantizers from the run directory, fitting them on the training
/// images first when allowed and missing.
pub fn ensure_quantizers(config: &RunConfig, train: &Dataset) -> Result<(QuantizerSpec, QuantizerSpec)> {
    match load_quantizers(&config.output_dir) {
        Ok(q) => Ok(q),
        Err(Error::MissingQuantizer(_)) if config.auto_fit_indicators => {
            let fitted = fit_indicators(config, &train.images)?;
            save_quantizers(&config.output_dir, &fitted)?;
            Ok((fitted.vqi, fitted.fii))
        }
        Err(e) => Err(e),
    }
}

/// Runs stage I then stage II, writing a checkpoint and a metrics line
/// after every epoch. With `resume`, continues after the newest
/// checkpoint in the run directory.
pub fn train<T: Scalar>(config: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train = Dataset::load(&config.data.manifest, Split::Train, config.model.image_size)?;
    if train.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (qv, qf) = ensure_quantizers(config, &train)?;
    let router = build_router(config, qv.clone(), qf.clone())?;
    let mut model = DplModel::<T>::new(&config.model, derive_seed(config.seed, &[0xD91]))?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let metrics_path = out.join(METRICS_FILE);
    let total_epochs = config.training.stage1_epochs + config.training.stage2_epochs;

    let mut start_epoch = 1;
    let mut adam: Option<Adam<T>> = None;
    let mut checkpoints = Vec::new();
    let mut metrics_lines: Vec<String> = Vec::new();
    if resume {
        if let Some((epoch, path)) = checkpoint::latest_checkpoint(&ckpt_dir)? {
            let ckpt = checkpoint::read_checkpoint(&path)?;
            if ckpt.manifest.model != config.model {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different model configuration",
                    path.display()
                )));
            }
            ckpt.restore_all(&mut model.store)?;
            let saved_stage = ckpt.manifest.progress.map_or(1, |p| p.stage);
            if epoch < total_epochs && stage_of(epoch + 1, &config.training) == saved_stage {
                adam = ckpt.adam(&model.store)?;
            }
            start_epoch = epoch + 1;
            if let Ok(text) = std::fs::read_to_string(&metrics_path) {
                metrics_lines = text.lines().take(epoch).map(str::to_string).collect();
            }
            checkpoints = (1..=epoch).map(|e| checkpoint::epoch_path(&ckpt_dir, e)).collect();
        }
    }
    let mut metrics = String::new();
    for l in &metrics_lines {
        metrics.push_str(l);
        metrics.push('\n');
    }
    std::fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;

    let fingerprint = config.fingerprint();
    let mut current_stage = if start_epoch <= total_epochs { stage_of(start_epoch, &config.training) } else { 0 };
    if current_stage != 0 && adam.is_none() {
        adam = Some(stage_adam(config, current_stage, model.store.len()));
    }
    for epoch in start_epoch..=total_epochs {
        let stage = stage_of(epoch, &config.training);
        if stage != current_stage {
            current_stage = stage;
            adam = Some(stage_adam(config, stage, model.store.len()));
        }
        let opt = adam.as_mut().expect("optimizer initialized");
        let m = run_epoch(config, &mut model, &router, opt, &train, epoch, stage)?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        let path = checkpoint::epoch_path(&ckpt_dir, epoch);
        checkpoint::write_checkpoint(
            &path,
            &CheckpointContents {
                model: &config.model,
                store: &model.store,
                config_fingerprint: &fingerprint,
                progress: Some(Progress { epoch, stage }),
                quantizers: &[("vqi", &qv), ("fii", &qf)],
                adam: Some(opt),
            },
        )?;
        checkpoints.push(path);
    }
    let last_checkpoint = match checkpoints.last() {
        Some(p) => p.clone(),
        None => {
            // nothing to train: still leave a loadable checkpoint
            let path = checkpoint::epoch_path(&ckpt_dir, 0);
            checkpoint::write_checkpoint(
                &path,
                &CheckpointContents {
                    model: &config.model,
                    store: &model.store,
                    config_fingerprint: &fingerprint,
                    progress: None,
                    quantizers: &[("vqi", &qv), ("fii", &qf)],
                    adam: None,
                },
            )?;
            path
        }
    };
    Ok(TrainOutcome {
        last_checkpoint,
        metrics_path,
        epochs_run: total_epochs.saturating_sub(start_epoch - 1),
        checkpoints,
    })
}

/// One pass over the training set in a seed-determined order.
pub fn run_epoch<T: Scalar>(
    config: &RunConfig,
    model: &mut DplModel<T>,
    router: &LevelRouter,
    adam: &mut Adam<T>,
    data: &Dataset,
    epoch: usize,
    stage: u8,
) -> Result<EpochMetrics> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xE90C, epoch as u64])));
    let mut totals = LossBreakdown::default();
    let (mut samples, mut correct, mut transitions, mut steps) = (0, 0, 0, 0);
    for (b, chunk) in order.chunks(config.training.batch_size).enumerate() {
        let batch: Vec<BatchItem<'_>> = chunk
            .iter()
            .map(|&i| BatchItem {
                image: &data.images[i],
                label: data.entries[i].label,
                key: i as u64,
            })
            .collect();
        let ctx = StepContext {
            training: &config.training,
            ppo: &config.ppo,
            compression: &config.data.train_compression,
            seed: derive_seed(config.seed, &[stage as u64, epoch as u64, b as u64]),
        };
        let report = match stage {
            1 => stage1_step(model, router, adam, &batch, &ctx, steps)?,
            _ => stage2_step(model, router, adam, &batch, &ctx, steps)?,
        };
        let w = report.samples as f64;
        totals.ce += report.losses.ce * w;
        totals.reg += report.losses.reg * w;
        totals.rew += report.losses.rew * w;
        totals.se += report.losses.se * w;
        totals.en += report.losses.en * w;
        totals.total += report.losses.total * w;
        samples += report.samples;
        correct += report.correct;
        transitions += report.transitions;
        steps += 1;
    }
    let n = samples.max(1) as f64;
    let losses = LossBreakdown {
        ce: totals.ce / n,
        reg: totals.reg / n,
        rew: totals.rew / n,
        se: totals.se / n,
        en: totals.en / n,
        total: totals.total / n,
    };
    Ok(EpochMetrics {
        epoch,
        stage,
        steps,
        samples,
        transitions,
        losses,
        train_accuracy: correct as f64 / n,
        frozen_hash: model.store.hash_groups(&FROZEN_IN_STAGE2),
    })
}

/// Model and router restored from a checkpoint; the indicator backend
/// comes from `config`.
pub fn load_detector<T: Scalar>(config: &RunConfig, checkpoint_path: &Path) -> Result<(DplModel<T>, LevelRouter)> {
    let ckpt = checkpoint::read_checkpoint(checkpoint_path)?;
    let mut model = DplModel::<T>::new(&ckpt.manifest.model, 0)?;
    ckpt.restore_all(&mut model.store)?;
    let missing = |name: &str| Error::MissingQuantizer(checkpoint_path.join(name));
    let qv = ckpt.quantizer("vqi")?.ok_or_else(|| missing("vqi"))?;
    let qf = ckpt.quantizer("fii")?.ok_or_else(|| missing("fii"))?;
    let mut router = build_router(config, qv, qf)?;
    router.fixed_depth = ckpt.manifest.model.fixed_depth;
    Ok((model, router))
}
