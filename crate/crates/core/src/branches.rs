//! The two progressive detection branches, their fusion and the shared
//! classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, GruCell, Group, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Label order used by every prediction.
pub const REAL: usize = 0;
pub const FAKE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// Quality-guided branch (step count from the quality indicator).
    Vq,
    /// Identifiability-guided branch.
    Fi,
}

impl BranchKind {
    pub fn group(self) -> Group {
        match self {
            BranchKind::Vq => Group::BranchVq,
            BranchKind::Fi => Group::BranchFi,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            BranchKind::Vq => "branch_vq",
            BranchKind::Fi => "branch_fi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Add,
    Concat,
    Attention,
}

impl FusionStrategy {
    pub fn output_dim(self, hidden: usize) -> usize {
        match self {
            FusionStrategy::Concat => 2 * hidden,
            FusionStrategy::Add | FusionStrategy::Attention => hidden,
        }
    }
}

/// Adapter `c → H` followed by a GRU over the pooled step inputs.
#[derive(Debug, Clone)]
pub struct Branch {
    pub kind: BranchKind,
    pub adapter: Linear,
    pub gru: GruCell,
}

impl Branch {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        kind: BranchKind,
        channels: usize,
        hidden: usize,
    ) -> Self {
        let prefix = kind.prefix();
        let adapter = Linear::new(
            store,
            rng,
            &format!("{prefix}.adapter"),
            kind.group(),
            channels,
            hidden,
            true,
        );
        let gru = GruCell::new(store, rng, &format!("{prefix}.gru"), kind.group(), hidden, hidden);
        Self { kind, adapter, gru }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }
}

/// Output of one branch: the per-step hidden states, their running sums
/// and the final step-sum.
#[derive(Debug, Clone)]
pub struct BranchSummary<'t, T> {
    pub per_step: Vec<Var<'t, T>>,
    /// `partial[j] = Σ_{t ≤ j+1} h_t`, summed left to right.
    pub partial: Vec<Var<'t, T>>,
    pub fused: Var<'t, T>,
    /// Number of recurrent-unit invocations.
    pub steps_executed: usize,
}

/// Runs `k` recurrent steps from `h_0 = 0` over the first `k` pooled inputs.
pub fn run_branch<'t, T: Scalar>(
    branch: &Branch,
    params: &Bound<'t, '_, T>,
    pooled_inputs: &[Var<'t, T>],
    k: usize,
) -> Result<BranchSummary<'t, T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("branch needs at least one step".into()));
    }
    if pooled_inputs.len() < k {
        return Err(Error::InsufficientInputs {
            needed: k,
            got: pooled_inputs.len(),
        });
    }
    let tape = params.tape();
    let mut h = tape.leaf(Matrix::zeros(1, branch.hidden_dim()));
    let mut per_step = Vec::with_capacity(k);
    let mut partial: Vec<Var<'t, T>> = Vec::with_capacity(k);
    let mut steps_executed = 0;
    for x in &pooled_inputs[..k] {
        let input = branch.adapter.forward(params, *x);
        h = branch.gru.step(params, input, h);
        steps_executed += 1;
        per_step.push(h);
        let sum = match partial.last() {
            Some(prev) => *prev + h,
            None => h,
        };
        partial.push(sum);
    }
    let fused = *partial.last().expect("k >= 1");
    Ok(BranchSummary {
        per_step,
        partial,
        fused,
        steps_executed,
    })
}

/// Combines the two branch features.
///
/// `attention` is the scoring vector (`H × 1`) used only by
/// [`FusionStrategy::Attention`]: weights `softmax(tanh(a·w), tanh(b·w))`.
pub fn fuse_branches<'t, T: Scalar>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    strategy: FusionStrategy,
    attention: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    match strategy {
        FusionStrategy::Add => {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    context: "fuse_branches(add)",
                    expected: format!("{:?}", a.shape()),
                    actual: format!("{:?}", b.shape()),
                });
            }
            Ok(a + b)
        }
        FusionStrategy::Concat => Ok(a.concat_cols(b)),
        FusionStrategy::Attention => {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    context: "fuse_branches(attention)",
                    expected: format!("{:?}", a.shape()),
                    actual: format!("{:?}", b.shape()),
                });
            }
            let w = attention.ok_or_else(|| {
                Error::InvalidArgument("attention fusion needs a scoring vector".into())
            })?;
            let scores = a.matmul(w).tanh().concat_cols(b.matmul(w).tanh());
            let weights = scores.log_softmax_rows().exp();
            Ok(a.mul_scalar_var(weights.slice_cols(0, 1)) + b.mul_scalar_var(weights.slice_cols(1, 1)))
        }
    }
}

/// Two logits and their softmax, ordered (real, fake).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub confidences: [f64; 2],
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let s = e0 + e1;
        Self {
            logits,
            confidences: [e0 / s, e1 / s],
        }
    }

    pub fn fake_confidence(&self) -> f64 {
        self.confidences[FAKE]
    }

    /// Predicted class; an exact tie goes to real.
    pub fn predicted_label(&self) -> usize {
        if self.confidences[FAKE] > self.confidences[REAL] {
            FAKE
        } else {
            REAL
        }
    }
}

/// Linear classifier shared by every step.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, input_dim: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, "head", Group::Head, input_dim, 2, true),
        }
    }

    pub fn logits<'t, T: Scalar>(&self, params: &Bound<'t, '_, T>, feature: Var<'t, T>) -> Result<Var<'t, T>> {
        if feature.shape() != (1, self.linear.input_dim) {
            return Err(Error::ShapeMismatch {
                context: "classify",
                expected: format!("1x{}", self.linear.input_dim),
                actual: format!("{:?}", feature.shape()),
            });
        }
        Ok(self.linear.forward(params, feature))
    }
}

/// Classifies one feature vector.
pub fn classify<'t, T: Scalar>(
    head: &ClassifierHead,
    params: &Bound<'t, '_, T>,
    feature: Var<'t, T>,
) -> Result<(Var<'t, T>, Prediction)> {
    let logits = head.logits(params, feature)?;
    let v = logits.value();
    let pred = Prediction::from_logits([v.get(0, 0).to_f64_lossy(), v.get(0, 1).to_f64_lossy()]);
    Ok((logits, pred))
}

/// Learned scoring vector for attention fusion.
pub fn attention_param<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, hidden: usize) -> ParamId {
    let bound = 1.0 / (hidden as f64).sqrt();
    store.add(
        "fusion.attention",
        Group::Fusion,
        Matrix::from_fn(hidden, 1, |_, _| T::lit(rng.random_range(-bound..bound))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(hidden: usize) -> (ParamStore<f64>, Branch, Vec<Matrix<f64>>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let branch = Branch::new(&mut store, &mut rng, BranchKind::Vq, 6, hidden);
        let inputs = (0..4)
            .map(|_| Matrix::from_fn(1, 6, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        (store, branch, inputs)
    }

    #[test]
    fn single_step_fused_is_first_hidden() {
        let (store, branch, inputs) = setup(5);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let xs: Vec<_> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let s = run_branch(&branch, &p, &xs, 1).unwrap();
        assert_eq!(s.fused.value(), s.per_step[0].value());
        assert_eq!(s.steps_executed, 1);
    }

    #[test]
    fn degenerate_recurrence_unrolls_by_hand() {
        // zero weights everywhere, b_z = 0 (z = ½), b_n = b: h_t = (1 − 2^{−t}) tanh(b)
        let (mut store, branch, inputs) = setup(3);
        for id in branch.gru.params() {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        store.value_mut(branch.gru.b_n).data_mut().iter_mut().for_each(|x| *x = 0.4);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let xs: Vec<_> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let s = run_branch(&branch, &p, &xs, 3).unwrap();
        let n = 0.4f64.tanh();
        let expected_fused = (0.5 + 0.75 + 0.875) * n;
        for &v in s.fused.value().data() {
            assert!((v - expected_fused).abs() < 1e-15);
        }
    }

    #[test]
    fn prefix_property_and_exact_sum() {
        let (store, branch, inputs) = setup(4);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let xs: Vec<_> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let s2 = run_branch(&branch, &p, &xs, 2).unwrap();
        let s3 = run_branch(&branch, &p, &xs, 3).unwrap();
        for (a, b) in s2.per_step.iter().zip(&s3.per_step) {
            assert_eq!(a.value(), b.value());
        }
        let mut sum = s3.per_step[0].value();
        for h in &s3.per_step[1..] {
            sum.add_assign(&h.value());
        }
        assert_eq!(sum, s3.fused.value());
        assert_eq!(s3.steps_executed, 3);
    }

    #[test]
    fn insufficient_inputs() {
        let (store, branch, inputs) = setup(4);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let xs: Vec<_> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        assert!(matches!(
            run_branch(&branch, &p, &xs, 5),
            Err(Error::InsufficientInputs { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn fusion_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Matrix::row_vector(vec![1.0, -2.0, 3.0]));
        let b = tape.leaf(Matrix::row_vector(vec![0.5, 0.25, -1.0]));
        let z = tape.leaf(Matrix::zeros(1, 3));
        let ab = fuse_branches(a, b, FusionStrategy::Add, None).unwrap();
        let ba = fuse_branches(b, a, FusionStrategy::Add, None).unwrap();
        assert_eq!(ab.value(), ba.value());
        assert_eq!(fuse_branches(a, z, FusionStrategy::Add, None).unwrap().value(), a.value());
        assert_eq!(fuse_branches(a, b, FusionStrategy::Concat, None).unwrap().shape(), (1, 6));
        let short = tape.leaf(Matrix::zeros(1, 2));
        assert!(fuse_branches(a, short, FusionStrategy::Add, None).is_err());
        let w = tape.leaf(Matrix::from_vec(3, 1, vec![0.1, 0.2, 0.3]).unwrap());
        let att = fuse_branches(a, b, FusionStrategy::Attention, Some(w)).unwrap().value();
        // weights are a convex pair, so every entry lies between a and b
        for i in 0..3 {
            let (lo, hi) = (a.value().get(0, i).min(b.value().get(0, i)), a.value().get(0, i).max(b.value().get(0, i)));
            assert!(att.get(0, i) >= lo - 1e-12 && att.get(0, i) <= hi + 1e-12);
        }
    }

    #[test]
    fn classify_examples() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ClassifierHead::new(&mut store, &mut rng, 4);
        for id in [head.linear.weight, head.linear.bias.unwrap()] {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let (_, pred) = classify(&head, &p, tape.leaf(Matrix::zeros(1, 4))).unwrap();
        assert_eq!(pred.confidences, [0.5, 0.5]);
        assert_eq!(Prediction::from_logits([3.3, 3.3]).confidences, [0.5, 0.5]);
        let p2 = Prediction::from_logits([2.0, 0.0]);
        let e2 = 2f64.exp();
        assert!((p2.confidences[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p2.confidences[0] - 0.8808).abs() < 5e-5);
        assert!((p2.confidences[1] - 0.1192).abs() < 5e-5);
        assert!(classify(&head, &p, tape.leaf(Matrix::zeros(1, 3))).is_err());
    }
}
