//! Synthetic data, SGD training loop, gradient checking and attention
//! statistics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{temperature, TemperatureSchedule};
use crate::exec::Exec;
use crate::model::{ModelError, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid data config: {0}")]
    Data(String),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step} (slot `{slot}`, max |grad| {max_grad:e})")]
    NonFinite {
        what: &'static str,
        step: u64,
        slot: String,
        max_grad: f64,
    },
}

fn default_classes() -> usize {
    10
}
fn default_spc() -> usize {
    64
}
fn default_size() -> usize {
    16
}
fn default_channels() -> usize {
    3
}
fn default_noise() -> f64 {
    0.5
}
fn default_shift() -> usize {
    1
}

/// Synthetic generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_spc")]
    pub samples_per_class: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Largest circular translation applied per sample, in pixels.
    #[serde(default = "default_shift")]
    pub max_shift: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: default_classes(),
            samples_per_class: default_spc(),
            image_size: default_size(),
            channels: default_channels(),
            noise: default_noise(),
            max_shift: default_shift(),
        }
    }
}

/// Labeled images of shape (channels, size, size).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub dims: [usize; 3],
    pub images: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the selected items into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let items: Vec<Vec<T>> = idx.iter().map(|&i| self.images[i].clone()).collect();
        let x = Tensor4::stack(&items, self.dims).expect("uniform item size");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// One smooth random pattern per class plus noise and a small random
/// circular shift per sample. Items are ordered class-major.
pub fn gen_synthetic<T: Scalar>(cfg: &DataConfig) -> Result<Dataset<T>, TrainError> {
    if cfg.classes < 2 {
        return Err(TrainError::Data("need at least 2 classes".into()));
    }
    if cfg.image_size == 0 || cfg.channels == 0 {
        return Err(TrainError::Data("empty images".into()));
    }
    let (c, s) = (cfg.channels, cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tau = std::f64::consts::TAU;
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let mut t = vec![0.0; c * s * s];
            for ch in 0..c {
                for _ in 0..3 {
                    let fx = rng.random_range(0..3) as f64;
                    let fy = rng.random_range(0..3) as f64;
                    let phase = rng.random_range(0.0..tau);
                    let amp: f64 = rng.random_range(0.5..1.0);
                    for y in 0..s {
                        for x in 0..s {
                            let arg = tau * (fx * x as f64 + fy * y as f64) / s as f64 + phase;
                            t[(ch * s + y) * s + x] += amp * arg.sin();
                        }
                    }
                }
            }
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64)
                .sqrt()
                .max(1e-12);
            t.iter().map(|v| (v - mean) / std).collect()
        })
        .collect();
    let mut images = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let span = 2 * cfg.max_shift + 1;
    for (label, t) in templates.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let dy = rng.random_range(0..span);
            let dx = rng.random_range(0..span);
            let mut img = Vec::with_capacity(t.len());
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let sy = (y + dy + s - cfg.max_shift % s) % s;
                        let sx = (x + dx + s - cfg.max_shift % s) % s;
                        let z: f64 = StandardNormal.sample(&mut rng);
                        img.push(T::of(t[(ch * s + sy) * s + sx] + cfg.noise * z));
                    }
                }
            }
            images.push(img);
            labels.push(label);
        }
    }
    Ok(Dataset {
        dims: [c, s, s],
        images,
        labels,
    })
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_warmup() -> f64 {
    5.0
}
fn yes() -> bool {
    true
}

/// SGD with momentum, cosine learning-rate decay and temperature warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Epochs over which τ falls from 1 to 0.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: f64,
    #[serde(default = "yes")]
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            warmup_epochs: default_warmup(),
            cosine: true,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, items: usize) -> u64 {
        items.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn schedule(&self, items: usize) -> TemperatureSchedule {
        TemperatureSchedule {
            warmup_steps: (self.warmup_epochs * self.steps_per_epoch(items) as f64).round() as u64,
        }
    }

    fn lr_at(&self, step: u64, total: u64) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Temperature at the end of the epoch.
    pub tau: f64,
}

impl std::fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} acc={:.4} tau={:.4}",
            self.epoch, self.loss, self.accuracy, self.tau
        )
    }
}

/// Momentum buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(graph: &ModelGraph<T>) -> Self {
        Self {
            velocity: graph.slots().iter().map(|s| vec![T::zero(); s.len]).collect(),
            step: 0,
        }
    }

    /// `v ← μ·v + g + λ·p` (λ only on decayed slots), `p ← p − lr·v`.
    pub fn update(&mut self, graph: &mut ModelGraph<T>, grads: &[Vec<T>], cfg: &TrainConfig, lr: f64) {
        let slots = graph.slots();
        let (lr, mu, wd) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
        for (((p, g), v), s) in graph
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(&slots)
        {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let mut d = gi;
                if s.decay {
                    d += wd * *pi;
                }
                *vi = mu * *vi + d;
                *pi -= lr * *vi;
            }
        }
        self.step += 1;
    }
}

fn check_finite<T: Scalar>(graph: &ModelGraph<T>, loss: f64, grads: &[Vec<T>], step: u64) -> Result<(), TrainError> {
    let slots = graph.slots();
    let mut worst = (0usize, 0.0f64);
    let mut bad: Option<usize> = None;
    for (i, g) in grads.iter().enumerate() {
        for v in g {
            let a = v.as_f64().abs();
            if !a.is_finite() && bad.is_none() {
                bad = Some(i);
            }
            if a > worst.1 || a.is_nan() {
                worst = (i, a);
            }
        }
    }
    if !loss.is_finite() || bad.is_some() {
        let i = bad.unwrap_or(worst.0);
        return Err(TrainError::NonFinite {
            what: if loss.is_finite() { "gradient" } else { "loss" },
            step,
            slot: slots[i].name.clone(),
            max_grad: worst.1,
        });
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs; `on_epoch` sees each epoch's metrics.
pub fn train<T: Scalar>(
    graph: &mut ModelGraph<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    if data.is_empty() {
        return Err(TrainError::Data("empty dataset".into()));
    }
    let schedule = cfg.schedule(data.len());
    let total = cfg.steps_per_epoch(data.len()) * cfg.epochs as u64;
    let mut opt = Sgd::new(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let tau = temperature(opt.step, &schedule);
            let (x, y) = data.batch(chunk);
            let out = graph.loss_and_grads(&x, &y, T::of(tau), exec)?;
            check_finite(graph, out.loss, &out.grads, opt.step)?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            let lr = cfg.lr_at(opt.step, total);
            opt.update(graph, &out.grads, cfg, lr);
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            tau: temperature(opt.step, &schedule),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Accuracy of the graph over `data` at temperature `tau`, in batches.
pub fn evaluate<T: Scalar>(
    graph: &ModelGraph<T>,
    data: &Dataset<T>,
    batch: usize,
    tau: f64,
    exec: Exec,
) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = graph.logits(&x, T::of(tau), exec)?;
        correct += y
            .iter()
            .enumerate()
            .filter(|&(b, &label)| crate::model::argmax(logits.row(b)) == label)
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Largest relative error found by [`gradcheck`] and where.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_slot: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates left out because the loss has a kink within `eps`.
    pub skipped: usize,
}

/// Entries below this magnitude in both the analytic and numeric gradient
/// are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Relative size above which a finite-difference discrepancy marks a kink.
pub const GRADCHECK_KINK: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

/// Central differences on up to `per_slot` coordinates of every slot,
/// chosen with a fixed-seed subsample, against the analytic gradient.
///
/// ReLU and the L1 normalization are not differentiable everywhere. A
/// coordinate is skipped instead of compared when the probe straddles a
/// kink: either the central differences at `eps` and `eps / 10` disagree,
/// or the gap between the one-sided slopes fails to shrink with the step.
pub fn gradcheck(
    graph: &ModelGraph<f64>,
    x: &Tensor4<f64>,
    labels: &[usize],
    tau: f64,
    eps: f64,
    per_slot: usize,
    seed: u64,
) -> Result<GradcheckReport, TrainError> {
    let out = graph.loss_and_grads(x, labels, tau, Exec::Sequential)?;
    let base = graph.loss(x, labels, tau, Exec::Sequential)?;
    let slots = graph.slots();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = graph.clone();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_slot: String::new(),
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    for (si, slot) in slots.iter().enumerate() {
        let mut coords: Vec<usize> = (0..slot.len).collect();
        coords.shuffle(&mut rng);
        coords.truncate(per_slot);
        coords.sort_unstable();
        for &ci in &coords {
            let orig = probe.params()[si][ci];
            // (central difference, forward slope minus backward slope)
            let mut probe_at = |h: f64| -> Result<(f64, f64), TrainError> {
                probe.params_mut()[si][ci] = orig + h;
                let up = probe.loss(x, labels, tau, Exec::Sequential)?;
                probe.params_mut()[si][ci] = orig - h;
                let down = probe.loss(x, labels, tau, Exec::Sequential)?;
                probe.params_mut()[si][ci] = orig;
                Ok(((up - down) / (2.0 * h), (up - 2.0 * base + down) / h))
            };
            let (numeric, gap) = probe_at(eps)?;
            let (fine, fine_gap) = probe_at(eps / 10.0)?;
            let scale = numeric.abs().max(fine.abs()).max(GRADCHECK_FLOOR);
            let kink_inside = fine_gap.abs() > 0.5 * gap.abs() && fine_gap.abs() > GRADCHECK_KINK * scale;
            if rel_err(numeric, fine) > GRADCHECK_KINK || kink_inside {
                report.skipped += 1;
                continue;
            }
            let err = rel_err(out.grads[si][ci], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_slot.is_empty() {
                report.max_rel_err = err;
                report.worst_slot = slot.name.clone();
                report.worst_index = ci;
            }
        }
    }
    Ok(report)
}

/// Mean α over a dataset for one warehouse: rows follow the group-wide
/// mixture order, columns the cells with the zero cell last.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub group_id: String,
    pub zero_cell: bool,
    pub mean: Matrix<f64>,
}

pub fn collect_attention_stats<T: Scalar>(
    graph: &ModelGraph<T>,
    data: &Dataset<T>,
    batch: usize,
    tau: f64,
    exec: Exec,
) -> Result<Vec<AttentionStats>, TrainError> {
    let mut stats: Vec<AttentionStats> = graph
        .plans()
        .iter()
        .map(|p| AttentionStats {
            group_id: p.group_id.clone(),
            zero_cell: p.zero_cell_enabled,
            mean: Matrix::zeros(p.m_t, p.q()),
        })
        .collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk);
        let (_, cache) = graph.forward(&x, T::of(tau), exec)?;
        for (li, l) in graph.manifest().layers.iter().enumerate() {
            let Some(gi) = graph.group_of(li) else {
                continue;
            };
            let plan = &graph.plans()[gi];
            let offset = plan.layer(&l.id).expect("layer in plan").offset;
            let q = plan.q();
            let acc = &mut stats[gi].mean;
            for alpha in cache.alphas(li) {
                for (k, v) in alpha.data.iter().enumerate() {
                    acc.data[offset * q + k] += v.as_f64();
                }
            }
        }
    }
    let n = data.len().max(1) as f64;
    for s in &mut stats {
        s.mean.data.iter_mut().for_each(|v| *v /= n);
    }
    Ok(stats)
}
