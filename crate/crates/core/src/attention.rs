//! Per-layer attention over warehouse cells.
//!
//! The attention module pools the layer input channel-wise, passes it through
//! FC → ReLU → FC to produce `m` rows of `q` logits, and maps each row to
//! mixture weights with
//!
//! ```text
//! α_j = τ·β_j + (1 − τ)·z_j / Σ_p |z_p|
//! ```
//!
//! where β is a fixed binary assignment and τ anneals linearly from 1 to 0.
//! The normalized term is allowed to go negative.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ops::{fc_backward, fc_forward, global_avg_pool, global_avg_pool_backward, relu, relu_backward, softmax};
use crate::partition::PartitionPlan;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, ShapeError, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttentionError {
    #[error("β strategy {strategy} infeasible for group `{group}` with n = {n}, m_t = {m_t}")]
    Infeasible {
        strategy: BetaStrategy,
        group: String,
        n: usize,
        m_t: usize,
    },
    #[error("unknown attention function `{0}`")]
    UnknownFunction(String),
    #[error("unknown β strategy `{0}`")]
    UnknownStrategy(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Row normalization applied to the logits before blending with β.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionFn {
    /// `z / Σ|z|`; zero when every logit is zero.
    #[default]
    Caf,
    Softmax,
    Sigmoid,
    /// `max(z, 0) / Σ|z|`.
    ReluNorm,
}

impl std::str::FromStr for AttentionFn {
    type Err = AttentionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "caf" => Ok(Self::Caf),
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu_norm" => Ok(Self::ReluNorm),
            _ => Err(AttentionError::UnknownFunction(s.to_string())),
        }
    }
}

impl AttentionFn {
    fn normalize<T: Scalar>(self, z: &[T]) -> Vec<T> {
        match self {
            Self::Caf => {
                let s = l1(z);
                if s == T::zero() {
                    vec![T::zero(); z.len()]
                } else {
                    z.iter().map(|&v| v / s).collect()
                }
            }
            Self::ReluNorm => {
                let s = l1(z);
                if s == T::zero() {
                    vec![T::zero(); z.len()]
                } else {
                    z.iter().map(|&v| v.max(T::zero()) / s).collect()
                }
            }
            Self::Softmax => softmax(z),
            Self::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    /// Vector-Jacobian product of the normalization term.
    fn normalize_vjp<T: Scalar>(self, g: &[T], z: &[T]) -> Vec<T> {
        match self {
            Self::Caf | Self::ReluNorm => {
                let s = l1(z);
                if s == T::zero() {
                    return vec![T::zero(); z.len()];
                }
                let numer = |v: T| if self == Self::Caf { v } else { v.max(T::zero()) };
                let dot: T = g.iter().zip(z).map(|(&gj, &zj)| gj * numer(zj)).sum();
                let s2 = s * s;
                z.iter()
                    .zip(g)
                    .map(|(&zk, &gk)| {
                        let direct = match self {
                            Self::Caf => gk / s,
                            _ if zk > T::zero() => gk / s,
                            _ => T::zero(),
                        };
                        direct - sign(zk) * dot / s2
                    })
                    .collect()
            }
            Self::Softmax => {
                let p = softmax(z);
                let dot: T = g.iter().zip(&p).map(|(&a, &b)| a * b).sum();
                p.iter().zip(g).map(|(&pk, &gk)| pk * (gk - dot)).collect()
            }
            Self::Sigmoid => z
                .iter()
                .zip(g)
                .map(|(&v, &gk)| {
                    let s = sigmoid(v);
                    gk * s * (T::one() - s)
                })
                .collect(),
        }
    }

    /// `τ·β + (1 − τ)·normalize(z)` for one row.
    pub fn apply<T: Scalar>(self, z: &[T], tau: T, beta_row: &[u8]) -> Vec<T> {
        debug_assert_eq!(z.len(), beta_row.len());
        let keep = T::one() - tau;
        self.normalize(z)
            .into_iter()
            .zip(beta_row)
            .map(|(s, &b)| tau * T::of(b as f64) + keep * s)
            .collect()
    }

    /// Gradient with respect to the logits of one row.
    pub fn backward<T: Scalar>(self, grad_alpha: &[T], z: &[T], tau: T) -> Vec<T> {
        let keep = T::one() - tau;
        self.normalize_vjp(grad_alpha, z)
            .into_iter()
            .map(|v| keep * v)
            .collect()
    }
}

fn l1<T: Scalar>(z: &[T]) -> T {
    z.iter().map(|v| v.abs()).sum()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Contrasting-driven attention for one row of logits.
pub fn caf<T: Scalar>(z: &[T], tau: T, beta_row: &[u8]) -> Vec<T> {
    AttentionFn::Caf.apply(z, tau, beta_row)
}

/// Adjoint of [`caf`] with respect to `z`; the subgradient of `|z_p|` at 0 is 0.
pub fn caf_backward<T: Scalar>(grad_alpha: &[T], z: &[T], tau: T) -> Vec<T> {
    AttentionFn::Caf.backward(grad_alpha, z, tau)
}

/// How β links mixtures to cells at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BetaStrategy {
    /// Each mixture gets its own cell, in group order, until cells run out;
    /// the remainder point at the zero cell.
    #[default]
    OneToOne,
    /// Every mixture is linked to every real cell.
    AllToOne,
    /// Each mixture gets `k` distinct cells.
    KToOne(usize),
    /// Each cell serves `r` consecutive mixtures.
    OneToMany(usize),
}

impl std::fmt::Display for BetaStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::OneToOne => write!(f, "one_to_one"),
            Self::AllToOne => write!(f, "all_to_one"),
            Self::KToOne(k) => write!(f, "k_to_one:{k}"),
            Self::OneToMany(r) => write!(f, "one_to_many:{r}"),
        }
    }
}

impl std::str::FromStr for BetaStrategy {
    type Err = AttentionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AttentionError::UnknownStrategy(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b.parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (name, arg) {
            ("one_to_one", None) => Ok(Self::OneToOne),
            ("all_to_one", None) => Ok(Self::AllToOne),
            ("k_to_one", Some(k)) => Ok(Self::KToOne(k)),
            ("one_to_many", Some(r)) => Ok(Self::OneToMany(r)),
            _ => Err(bad()),
        }
    }
}

/// Binary m × q matrix for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BetaAssignment {
    pub layer_id: String,
    pub strategy: BetaStrategy,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl BetaAssignment {
    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Builds the β matrix of every layer in `plan`, in plan order.
pub fn init_beta(plan: &PartitionPlan, strategy: BetaStrategy) -> Result<Vec<BetaAssignment>, AttentionError> {
    let (n, m_t, q) = (plan.n, plan.m_t, plan.q());
    let infeasible = || AttentionError::Infeasible {
        strategy,
        group: plan.group_id.clone(),
        n,
        m_t,
    };
    let mut group = vec![0u8; m_t * q];
    match strategy {
        BetaStrategy::OneToOne => {
            for r in 0..m_t {
                if r < n {
                    group[r * q + r] = 1;
                } else if plan.zero_cell_enabled {
                    group[r * q + n] = 1;
                } else {
                    return Err(infeasible());
                }
            }
        }
        BetaStrategy::AllToOne => {
            for r in 0..m_t {
                group[r * q..r * q + n].iter_mut().for_each(|v| *v = 1);
            }
        }
        BetaStrategy::KToOne(k) => {
            if k == 0 || k * m_t > n {
                return Err(infeasible());
            }
            for r in 0..m_t {
                group[r * q + r * k..r * q + (r + 1) * k]
                    .iter_mut()
                    .for_each(|v| *v = 1);
            }
        }
        BetaStrategy::OneToMany(per) => {
            if per == 0 || m_t > per * n {
                return Err(infeasible());
            }
            for r in 0..m_t {
                group[r * q + r / per] = 1;
            }
        }
    }
    Ok(plan
        .layers
        .iter()
        .map(|l| BetaAssignment {
            layer_id: l.spec.layer_id.clone(),
            strategy,
            rows: l.m,
            cols: q,
            data: group[l.offset * q..(l.offset + l.m) * q].to_vec(),
        })
        .collect())
}

/// Fan-in used to initialise each real cell: that of the first layer whose β
/// links to the cell, or the group's largest fan-in for unlinked cells.
pub fn cell_fan_in(plan: &PartitionPlan, betas: &[BetaAssignment]) -> Vec<usize> {
    let largest = plan
        .layers
        .iter()
        .map(|l| l.spec.k * l.spec.k * l.spec.c)
        .max()
        .unwrap_or(1);
    let mut fan = vec![None; plan.n];
    for (layer, beta) in plan.layers.iter().zip(betas) {
        let fi = layer.spec.k * layer.spec.k * layer.spec.c;
        for i in 0..beta.rows {
            for (j, slot) in fan.iter_mut().enumerate() {
                if beta.row(i)[j] == 1 && slot.is_none() {
                    *slot = Some(fi);
                }
            }
        }
    }
    fan.into_iter().map(|f| f.unwrap_or(largest)).collect()
}

/// Linear warmup of τ from 1 to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemperatureSchedule {
    pub warmup_steps: u64,
}

/// `τ = max(0, 1 − step / warmup_steps)`.
pub fn temperature(step: u64, schedule: &TemperatureSchedule) -> f64 {
    if schedule.warmup_steps == 0 {
        return 0.0;
    }
    (1.0 - step as f64 / schedule.warmup_steps as f64).max(0.0)
}

/// Hidden width of the first FC layer: `max(⌈c / reduction⌉, min_hidden)`.
pub fn hidden_width(c: usize, reduction: usize, min_hidden: usize) -> usize {
    c.div_ceil(reduction.max(1)).max(min_hidden)
}

/// How the logit-producing FC layer starts out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LogitInit {
    /// Second FC weights and bias start at zero.
    Zero,
    /// Second FC weights ~ N(0, std²), bias zero.
    Normal { std: f64 },
}

impl Default for LogitInit {
    fn default() -> Self {
        Self::Normal { std: 0.1 }
    }
}

/// SE-style attention parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub layer_id: String,
    /// Mixtures (rows of α).
    pub m: usize,
    /// Columns per mixture.
    pub q: usize,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(layer_id: &str, c: usize, hidden: usize, m: usize, q: usize, init: LogitInit, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |len: usize, std: f64| -> Vec<T> {
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(z * std)
                })
                .collect()
        };
        let w1 = Matrix {
            rows: hidden,
            cols: c,
            data: normal(hidden * c, (2.0 / c as f64).sqrt()),
        };
        let w2_data = match init {
            LogitInit::Zero => vec![T::zero(); m * q * hidden],
            LogitInit::Normal { std } => normal(m * q * hidden, std),
        };
        Self {
            layer_id: layer_id.to_string(),
            m,
            q,
            w1,
            b1: vec![T::zero(); hidden],
            w2: Matrix {
                rows: m * q,
                cols: hidden,
                data: w2_data,
            },
            b2: vec![T::zero(); m * q],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows
    }

    pub fn param_count(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x_dims: [usize; 4],
    pooled: Matrix<T>,
    hidden_pre: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    /// Raw logits per batch element, m·q each.
    pub logits: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Computes α (m × q) for every batch element of `x`.
pub fn attention_forward<T: Scalar>(
    x: &Tensor4<T>,
    params: &AttentionParams<T>,
    tau: T,
    beta: &BetaAssignment,
    func: AttentionFn,
) -> Result<(Vec<Matrix<T>>, AttentionCache<T>), AttentionError> {
    let [n, c, _, _] = x.dims();
    if c != params.in_channels() {
        return Err(crate::tensor::mismatch("attention_forward", &x.dims(), &[params.in_channels()]).into());
    }
    if beta.rows != params.m || beta.cols != params.q {
        return Err(
            crate::tensor::mismatch("attention_forward", &[beta.rows, beta.cols], &[params.m, params.q]).into(),
        );
    }
    let pooled = global_avg_pool(x)?;
    let mut cache = AttentionCache {
        x_dims: x.dims(),
        pooled,
        hidden_pre: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
        logits: Vec::with_capacity(n),
    };
    let mut alphas = Vec::with_capacity(n);
    for b in 0..n {
        let hp = fc_forward(cache.pooled.row(b), &params.w1, &params.b1)?;
        let h = relu(&hp);
        let z = fc_forward(&h, &params.w2, &params.b2)?;
        let mut alpha = Matrix::zeros(params.m, params.q);
        for i in 0..params.m {
            let row = func.apply(&z[i * params.q..(i + 1) * params.q], tau, beta.row(i));
            alpha.row_mut(i).copy_from_slice(&row);
        }
        alphas.push(alpha);
        cache.hidden_pre.push(hp);
        cache.hidden.push(h);
        cache.logits.push(z);
    }
    Ok((alphas, cache))
}

/// Back-propagates per-element α gradients to the layer input and the
/// attention parameters. Parameter gradients are summed in batch order.
pub fn attention_backward<T: Scalar>(
    grad_alpha: &[Matrix<T>],
    cache: &AttentionCache<T>,
    params: &AttentionParams<T>,
    tau: T,
    func: AttentionFn,
) -> Result<(Tensor4<T>, AttentionGrads<T>), AttentionError> {
    let n = cache.x_dims[0];
    if grad_alpha.len() != n {
        return Err(crate::tensor::mismatch("attention_backward", &[grad_alpha.len()], &[n]).into());
    }
    let mut grads = AttentionGrads {
        w1: Matrix::zeros(params.w1.rows, params.w1.cols),
        b1: vec![T::zero(); params.b1.len()],
        w2: Matrix::zeros(params.w2.rows, params.w2.cols),
        b2: vec![T::zero(); params.b2.len()],
    };
    let mut grad_pooled = Matrix::zeros(n, params.in_channels());
    let q = params.q;
    for (b, ga) in grad_alpha.iter().enumerate().take(n) {
        let z = &cache.logits[b];
        let mut gz = Vec::with_capacity(params.m * q);
        for i in 0..params.m {
            gz.extend(func.backward(ga.row(i), &z[i * q..(i + 1) * q], tau));
        }
        let (gh, gw2, gb2) = fc_backward(&gz, &cache.hidden[b], &params.w2)?;
        let ghp = relu_backward(&gh, &cache.hidden_pre[b]);
        let (gp, gw1, gb1) = fc_backward(&ghp, cache.pooled.row(b), &params.w1)?;
        add_into(&mut grads.w2.data, &gw2.data);
        add_into(&mut grads.b2, &gb2);
        add_into(&mut grads.w1.data, &gw1.data);
        add_into(&mut grads.b1, &gb1);
        grad_pooled.row_mut(b).copy_from_slice(&gp);
    }
    let gx = global_avg_pool_backward(&grad_pooled, cache.x_dims)?;
    Ok((gx, grads))
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{plan_partition, KernelSpec, ScaleDivisors};
    use crate::testutil::{central_diff, max_rel_err, rng_vec};
    use num_rational::Ratio;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn caf_hand_values() {
        assert_eq!(caf(&[0.3, -2.0, 7.0], 1.0, &[0, 1, 0]), vec![0.0, 1.0, 0.0]);
        assert!(close(&caf(&[1.0, -1.0, 2.0], 0.0, &[0, 0, 0]), &[0.25, -0.25, 0.5]));
        assert!(close(&caf(&[2.0, 2.0, 0.0], 0.5, &[1, 0, 0]), &[0.75, 0.25, 0.0]));
        assert_eq!(caf(&[0.0f64, 0.0], 0.0, &[0, 0]), vec![0.0, 0.0]);
    }

    #[test]
    fn caf_backward_cases() {
        let z = [0.4, -1.3, 2.2, 0.7];
        assert!(caf_backward(&[1.0, 2.0, 3.0, 4.0], &z, 1.0).iter().all(|&v| v == 0.0));

        for tau in [0.0, 0.3, 0.8] {
            let g = rng_vec(3, 4);
            let an = caf_backward(&g, &z, tau);
            let num = central_diff(&z, 1e-5, |v| {
                caf(v, tau, &[0, 1, 0, 0]).iter().zip(&g).map(|(a, b)| a * b).sum()
            });
            assert!(max_rel_err(&an, &num) < 1e-6);
        }

        // single logit: α = sign(z), flat almost everywhere
        assert_eq!(caf(&[-3.0], 0.0, &[0]), vec![-1.0]);
        assert_eq!(caf_backward(&[1.0], &[-3.0], 0.0), vec![0.0]);
    }

    #[test]
    fn alternative_functions_fd() {
        let z = [0.4, -1.3, 2.2, 0.7, -0.2];
        let beta = [0, 0, 1, 0, 0];
        for func in [AttentionFn::Softmax, AttentionFn::Sigmoid, AttentionFn::ReluNorm] {
            let g = rng_vec(5, 5);
            let an = func.backward(&g, &z, 0.4);
            let num = central_diff(&z, 1e-5, |v| {
                func.apply(v, 0.4, &beta).iter().zip(&g).map(|(a, b)| a * b).sum()
            });
            assert!(max_rel_err(&an, &num) < 1e-6, "{func:?}");
        }
    }

    #[test]
    fn function_names_parse() {
        assert_eq!("relu_norm".parse::<AttentionFn>().unwrap(), AttentionFn::ReluNorm);
        assert!("tanh".parse::<AttentionFn>().is_err());
        assert_eq!("k_to_one:4".parse::<BetaStrategy>().unwrap(), BetaStrategy::KToOne(4));
        assert_eq!(
            "one_to_many:2".parse::<BetaStrategy>().unwrap(),
            BetaStrategy::OneToMany(2)
        );
        assert!("k_to_one".parse::<BetaStrategy>().is_err());
    }

    fn group_plan(b: Budget, layers: usize) -> PartitionPlan {
        let specs: Vec<_> = (0..layers)
            .map(|i| KernelSpec::new(format!("l{i}"), 1, 2, 2, 1, 0))
            .collect();
        plan_partition("g", &specs, b, ScaleDivisors::default()).unwrap()
    }
    use crate::partition::Budget;

    fn stacked(betas: &[BetaAssignment]) -> Vec<Vec<u8>> {
        betas
            .iter()
            .flat_map(|b| (0..b.rows).map(|i| b.row(i).to_vec()))
            .collect()
    }

    #[test]
    fn one_to_one_square() {
        // three layers of two mixtures each, n = m_t = 6
        let specs = vec![
            KernelSpec::new("a", 1, 4, 2, 1, 0),
            KernelSpec::new("b", 1, 2, 4, 1, 0),
            KernelSpec::new("c", 1, 2, 4, 1, 0),
        ];
        let plan = plan_partition("g", &specs, Ratio::from_integer(1), ScaleDivisors::default()).unwrap();
        assert_eq!((plan.n, plan.m_t, plan.q()), (6, 6, 6));
        let rows = stacked(&init_beta(&plan, BetaStrategy::OneToOne).unwrap());
        for (r, row) in rows.iter().enumerate() {
            let expect: Vec<u8> = (0..6).map(|j| u8::from(j == r)).collect();
            assert_eq!(row, &expect);
        }
    }

    #[test]
    fn one_to_one_half_budget_uses_zero_cell() {
        let plan = group_plan(Ratio::new(1, 2), 4);
        assert_eq!((plan.n, plan.m_t, plan.q()), (2, 4, 3));
        let rows = stacked(&init_beta(&plan, BetaStrategy::OneToOne).unwrap());
        assert_eq!(rows, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1], vec![0, 0, 1]]);
    }

    #[test]
    fn one_to_one_double_budget_leaves_cells_free() {
        let plan = group_plan(Ratio::from_integer(2), 2);
        assert_eq!((plan.n, plan.m_t), (4, 2));
        let rows = stacked(&init_beta(&plan, BetaStrategy::OneToOne).unwrap());
        assert_eq!(rows, vec![vec![1, 0, 0, 0], vec![0, 1, 0, 0]]);
    }

    #[test]
    fn alternative_strategies() {
        let plan = group_plan(Ratio::from_integer(2), 2);
        let rows = stacked(&init_beta(&plan, BetaStrategy::KToOne(2)).unwrap());
        assert_eq!(rows, vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1]]);
        let rows = stacked(&init_beta(&plan, BetaStrategy::AllToOne).unwrap());
        assert_eq!(rows, vec![vec![1; 4], vec![1; 4]]);
        assert!(init_beta(&plan, BetaStrategy::KToOne(3)).is_err());

        let half = group_plan(Ratio::new(1, 2), 4);
        let rows = stacked(&init_beta(&half, BetaStrategy::OneToMany(2)).unwrap());
        assert_eq!(rows, vec![vec![1, 0, 0], vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 0]]);
        assert!(init_beta(&half, BetaStrategy::OneToMany(1)).is_err());
    }

    #[test]
    fn fan_in_follows_beta() {
        let specs = vec![KernelSpec::new("a", 3, 2, 2, 1, 1), KernelSpec::new("b", 3, 4, 2, 1, 1)];
        let plan = plan_partition("g", &specs, Ratio::from_integer(2), ScaleDivisors::default()).unwrap();
        // m = 1, 2; n = 6
        let betas = init_beta(&plan, BetaStrategy::OneToOne).unwrap();
        assert_eq!(cell_fan_in(&plan, &betas), vec![18, 36, 36, 36, 36, 36]);
    }

    #[test]
    fn temperature_schedule() {
        let s = TemperatureSchedule { warmup_steps: 100 };
        assert_eq!(temperature(0, &s), 1.0);
        assert_eq!(temperature(50, &s), 0.5);
        assert_eq!(temperature(100, &s), 0.0);
        assert_eq!(temperature(1000, &s), 0.0);
    }

    #[test]
    fn hidden_width_floor() {
        assert_eq!(hidden_width(64, 16, 16), 16);
        assert_eq!(hidden_width(512, 16, 16), 32);
        assert_eq!(hidden_width(33, 16, 2), 3);
    }

    fn toy_params(seed: u64) -> (AttentionParams<f64>, BetaAssignment) {
        let plan = group_plan(Ratio::from_integer(1), 3);
        let beta = init_beta(&plan, BetaStrategy::OneToOne).unwrap().remove(1);
        let mut p = AttentionParams::new("l1", 3, 4, beta.rows, beta.cols, LogitInit::Normal { std: 0.5 }, seed);
        p.b1 = rng_vec(seed + 1, 4);
        p.b2 = rng_vec(seed + 2, p.b2.len());
        (p, beta)
    }

    #[test]
    fn forward_at_unit_temperature_is_beta() {
        let (p, beta) = toy_params(1);
        let x = Tensor4::new([2, 3, 3, 3], rng_vec(9, 54)).unwrap();
        let (alpha, _) = attention_forward(&x, &p, 1.0, &beta, AttentionFn::Caf).unwrap();
        for a in alpha {
            assert_eq!(a.data, beta.data.iter().map(|&v| v as f64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_logits_at_zero_temperature() {
        let (mut p, beta) = toy_params(2);
        p.w2.data.iter_mut().for_each(|v| *v = 0.0);
        p.b2.iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor4::new([1, 3, 2, 2], rng_vec(4, 12)).unwrap();
        let (alpha, _) = attention_forward(&x, &p, 0.0, &beta, AttentionFn::Caf).unwrap();
        assert!(alpha[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_composed_primitives() {
        let (p, beta) = toy_params(3);
        let x = Tensor4::new([2, 3, 4, 2], rng_vec(5, 48)).unwrap();
        let tau = 0.3;
        let (alpha, _) = attention_forward(&x, &p, tau, &beta, AttentionFn::Caf).unwrap();
        for (b, ab) in alpha.iter().enumerate() {
            let item = x.item(b);
            let pooled: Vec<f64> = (0..3)
                .map(|c| item[c * 8..(c + 1) * 8].iter().sum::<f64>() / 8.0)
                .collect();
            let h: Vec<f64> = (0..4)
                .map(|j| pooled.iter().enumerate().map(|(c, v)| p.w1.at(j, c) * v).sum::<f64>() + p.b1[j])
                .map(|v| v.max(0.0))
                .collect();
            let z: Vec<f64> = (0..p.m * p.q)
                .map(|r| h.iter().enumerate().map(|(j, v)| p.w2.at(r, j) * v).sum::<f64>() + p.b2[r])
                .collect();
            for i in 0..p.m {
                let row = &z[i * p.q..(i + 1) * p.q];
                let s: f64 = row.iter().map(|v| v.abs()).sum();
                for (j, zj) in row.iter().enumerate() {
                    let expect = tau * beta.row(i)[j] as f64 + (1.0 - tau) * zj / s;
                    assert!((ab.at(i, j) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (p, beta) = toy_params(6);
        let x = Tensor4::new([2, 3, 2, 3], rng_vec(7, 36)).unwrap();
        let tau = 0.4;
        let g: Vec<Matrix<f64>> = (0..2)
            .map(|b| Matrix::from_vec(p.m, p.q, rng_vec(20 + b, p.m * p.q)).unwrap())
            .collect();
        let loss = |x: &Tensor4<f64>, p: &AttentionParams<f64>| -> f64 {
            let (a, _) = attention_forward(x, p, tau, &beta, AttentionFn::Caf).unwrap();
            a.iter()
                .zip(&g)
                .map(|(a, g)| a.data.iter().zip(&g.data).map(|(u, v)| u * v).sum::<f64>())
                .sum()
        };
        let (_, cache) = attention_forward(&x, &p, tau, &beta, AttentionFn::Caf).unwrap();
        let (gx, grads) = attention_backward(&g, &cache, &p, tau, AttentionFn::Caf).unwrap();

        let nx = central_diff(x.data(), 1e-5, |v| {
            loss(&Tensor4::new(x.dims(), v.to_vec()).unwrap(), &p)
        });
        assert!(max_rel_err(gx.data(), &nx) < 1e-6);
        let nw2 = central_diff(&p.w2.data, 1e-5, |v| {
            let mut q = p.clone();
            q.w2.data.copy_from_slice(v);
            loss(&x, &q)
        });
        assert!(max_rel_err(&grads.w2.data, &nw2) < 1e-6);
        let nw1 = central_diff(&p.w1.data, 1e-5, |v| {
            let mut q = p.clone();
            q.w1.data.copy_from_slice(v);
            loss(&x, &q)
        });
        assert!(max_rel_err(&grads.w1.data, &nw1) < 1e-6);
        let nb1 = central_diff(&p.b1, 1e-5, |v| {
            let mut q = p.clone();
            q.b1.copy_from_slice(v);
            loss(&x, &q)
        });
        assert!(max_rel_err(&grads.b1, &nb1) < 1e-6);
    }
}
