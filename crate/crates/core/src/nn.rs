//! Parameter storage, layers and the Adam optimizer.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Sub-module a parameter belongs to. Freezing and checkpoint manifests
/// operate per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Fsm,
    BranchVq,
    BranchFi,
    Fusion,
    Head,
    Value,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Backbone,
        Group::Fsm,
        Group::BranchVq,
        Group::BranchFi,
        Group::Fusion,
        Group::Head,
        Group::Value,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Fsm => "fsm",
            Group::BranchVq => "branch_vq",
            Group::BranchFi => "branch_fi",
            Group::Fusion => "fusion",
            Group::Head => "head",
            Group::Value => "value",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Matrix<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Matrix<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count_in(&self, groups: &[Group]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter in `groups`.
    pub fn hash_groups(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for &x in p.value.data() {
                h.update(x.le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Lazily records parameters as tape leaves; each parameter is copied onto
/// the tape at most once.
pub struct Bound<'t, 'p, T> {
    tape: &'t Tape<T>,
    store: &'p ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
}

impl<'t, 'p, T: Scalar> Bound<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, store: &'p ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.leaf(self.store.value(id).clone()))
    }

    /// Collects gradients for every bound parameter whose group is in
    /// `groups`, indexed like the store.
    pub fn collect(&self, grads: &mut Gradients<T>, groups: &[Group]) -> Vec<Option<Matrix<T>>> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = (*v)?;
                if !groups.contains(&self.store.params[i].group) {
                    return None;
                }
                grads.take(v)
            })
            .collect()
    }
}

/// Per-parameter gradient accumulator.
#[derive(Debug, Clone)]
pub struct GradBuffer<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn accumulate(&mut self, other: Vec<Option<Matrix<T>>>) {
        for (slot, g) in self.grads.iter_mut().zip(other) {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

fn uniform_matrix<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..bound)))
}

/// Affine layer `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        input_dim: usize,
        output_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_gain(store, rng, name, group, input_dim, output_dim, bias, 1.0)
    }

    /// Weights drawn from `U(-g/√fan_in, g/√fan_in)`; the bias keeps gain 1.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        input_dim: usize,
        output_dim: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_matrix(rng, input_dim, output_dim, gain * bound),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                group,
                uniform_matrix(rng, 1, output_dim, bound),
            )
        });
        Self {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = x.matmul(p.var(self.weight));
        match self.bias {
            Some(b) => y.add_row(p.var(b)),
            None => y,
        }
    }
}

/// Gated recurrent unit cell.
///
/// `r = σ(x·Wr + h·Ur + br)`, `z = σ(x·Wz + h·Uz + bz)`,
/// `n = tanh(x·Wn + bn + r ⊙ (h·Un + bhn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub w_n: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub u_n: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_n: ParamId,
    pub b_hn: ParamId,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut mk = |suffix: &str, rows: usize| {
            store.add(
                format!("{name}.{suffix}"),
                group,
                uniform_matrix(rng, rows, hidden_dim, bound),
            )
        };
        let w_r = mk("w_r", input_dim);
        let w_z = mk("w_z", input_dim);
        let w_n = mk("w_n", input_dim);
        let u_r = mk("u_r", hidden_dim);
        let u_z = mk("u_z", hidden_dim);
        let u_n = mk("u_n", hidden_dim);
        let b_r = mk("b_r", 1);
        let b_z = mk("b_z", 1);
        let b_n = mk("b_n", 1);
        let b_hn = mk("b_hn", 1);
        Self {
            input_dim,
            hidden_dim,
            w_r,
            w_z,
            w_n,
            u_r,
            u_z,
            u_n,
            b_r,
            b_z,
            b_n,
            b_hn,
        }
    }

    pub fn params(&self) -> [ParamId; 10] {
        [
            self.w_r, self.w_z, self.w_n, self.u_r, self.u_z, self.u_n, self.b_r, self.b_z,
            self.b_n, self.b_hn,
        ]
    }

    pub fn step<'t, T: Scalar>(
        &self,
        p: &Bound<'t, '_, T>,
        x: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Var<'t, T> {
        let r = (x.matmul(p.var(self.w_r)) + h.matmul(p.var(self.u_r)))
            .add_row(p.var(self.b_r))
            .sigmoid();
        let z = (x.matmul(p.var(self.w_z)) + h.matmul(p.var(self.u_z)))
            .add_row(p.var(self.b_z))
            .sigmoid();
        let hn = h.matmul(p.var(self.u_n)).add_row(p.var(self.b_hn));
        let n = (x.matmul(p.var(self.w_n)).add_row(p.var(self.b_n)) + r * hn).tanh();
        let one_minus_z = z.scale(-T::one()).add_scalar(T::one());
        one_minus_z * n + z * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept only for the parameters
/// it has updated.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Option<Matrix<T>>>,
    pub second: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    /// Applies one update to every parameter in `trainable` that has a
    /// gradient in `grads`.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>, trainable: &[Group]) {
        self.step += 1;
        let c = &self.config;
        let lr = T::lit(c.learning_rate);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let eps = T::lit(c.epsilon);
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let trainable: BTreeSet<Group> = trainable.iter().copied().collect();
        for i in 0..store.len() {
            let id = ParamId(i);
            if !trainable.contains(&store.get(id).group) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let value = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = b1 * m.data()[k] + (T::one() - b1) * gk;
                let vk = b2 * v.data()[k] + (T::one() - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                let w = &mut value.data_mut()[k];
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
