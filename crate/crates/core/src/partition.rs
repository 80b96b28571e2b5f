//! Kernel partition and warehouse-sharing plans.
//!
//! A sharing group is a list of convolutional layers that draw their kernel
//! cells from one warehouse. All layers of a group are cut into cells of one
//! common shape, obtained from the gcd of each kernel dimension across the
//! group, optionally divided further by per-dimension scale divisors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_integer::Integer;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// Exact convolutional parameter budget, `n / m_t`.
pub type Budget = Ratio<u64>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("group `{0}` has no layers")]
    EmptyGroup(String),
    #[error("layer `{layer}`: k, c and f must all be at least 1")]
    InvalidSpec { layer: String },
    #[error("scale divisor {divisor} does not divide common {dim} divisor {gcd}")]
    DivisorNotDividing {
        dim: &'static str,
        gcd: usize,
        divisor: usize,
    },
    #[error("layer `{layer}`: cell {cell} does not divide kernel {k}x{k}x{c}x{f}")]
    CellDoesNotDivide {
        layer: String,
        cell: CellShape,
        k: usize,
        c: usize,
        f: usize,
    },
    #[error("budget must be positive")]
    NonPositiveBudget,
    #[error("group `{group}`: b = {b} gives n = {b}·{m_t} which is not an integer; nearest valid b is {suggested}")]
    NonIntegralBudget {
        group: String,
        b: Budget,
        m_t: usize,
        suggested: Budget,
    },
    #[error("cannot parse budget `{0}`; expected an integer or `p/q`")]
    BadBudget(String),
    #[error("layer `{0}` is not assigned to any group")]
    Unmapped(String),
    #[error("layer `{0}` is assigned more than once")]
    DoublyMapped(String),
    #[error("grouping names unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("budget mismatch in group `{group}`: n/m_t = {actual}, configured {expected}")]
    BudgetViolation {
        group: String,
        actual: Budget,
        expected: Budget,
    },
}

/// Parses `"1/2"`, `"4"` or `"3/4"` into an exact budget.
pub fn parse_budget(s: &str) -> Result<Budget, PlanError> {
    let bad = || PlanError::BadBudget(s.to_string());
    let s = s.trim();
    let b = match s.split_once('/') {
        Some((p, q)) => {
            let p: u64 = p.trim().parse().map_err(|_| bad())?;
            let q: u64 = q.trim().parse().map_err(|_| bad())?;
            if q == 0 {
                return Err(bad());
            }
            Ratio::new(p, q)
        }
        None => Ratio::from_integer(s.parse().map_err(|_| bad())?),
    };
    if b == Ratio::from_integer(0) {
        return Err(PlanError::NonPositiveBudget);
    }
    Ok(b)
}

/// Static kernel dimensions of one convolutional layer (square spatial size).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(rename = "id")]
    pub layer_id: String,
    pub k: usize,
    pub c: usize,
    pub f: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

fn one() -> usize {
    1
}

impl KernelSpec {
    pub fn new(layer_id: impl Into<String>, k: usize, c: usize, f: usize, stride: usize, pad: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            k,
            c,
            f,
            stride,
            pad,
        }
    }

    pub fn volume(&self) -> usize {
        self.k * self.k * self.c * self.f
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.k == 0 || self.c == 0 || self.f == 0 || self.stride == 0 {
            return Err(PlanError::InvalidSpec {
                layer: self.layer_id.clone(),
            });
        }
        Ok(())
    }
}

/// Kernel cell dimensions (k_e, c_e, f_e).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellShape {
    pub k: usize,
    pub c: usize,
    pub f: usize,
}

impl CellShape {
    pub fn volume(&self) -> usize {
        self.k * self.k * self.c * self.f
    }

    pub fn divides(&self, spec: &KernelSpec) -> bool {
        spec.k.is_multiple_of(self.k) && spec.c.is_multiple_of(self.c) && spec.f.is_multiple_of(self.f)
    }
}

impl fmt::Display for CellShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.k, self.k, self.c, self.f)
    }
}

/// Extra divisors applied to the gcd cell shape, one per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleDivisors {
    pub spatial: usize,
    pub c: usize,
    pub f: usize,
}

impl Default for ScaleDivisors {
    fn default() -> Self {
        Self { spatial: 1, c: 1, f: 1 }
    }
}

impl ScaleDivisors {
    /// Halves the channel dimensions and leaves the spatial one untouched.
    pub fn half_channels() -> Self {
        Self { spatial: 1, c: 2, f: 2 }
    }
}

/// Common kernel dimension divisors of `specs`, scaled down by `div`.
pub fn compute_cdd(specs: &[KernelSpec], div: ScaleDivisors) -> Result<CellShape, PlanError> {
    let first = specs.first().ok_or_else(|| PlanError::EmptyGroup(String::new()))?;
    for s in specs {
        s.validate()?;
    }
    let (mut k, mut c, mut f) = (first.k, first.c, first.f);
    for s in &specs[1..] {
        k = k.gcd(&s.k);
        c = c.gcd(&s.c);
        f = f.gcd(&s.f);
    }
    let scale = |dim: &'static str, gcd: usize, divisor: usize| {
        if divisor == 0 || !gcd.is_multiple_of(divisor) {
            Err(PlanError::DivisorNotDividing { dim, gcd, divisor })
        } else {
            Ok(gcd / divisor)
        }
    };
    Ok(CellShape {
        k: scale("spatial", k, div.spatial)?,
        c: scale("input-channel", c, div.c)?,
        f: scale("output-channel", f, div.f)?,
    })
}

/// One layer's slice of a group plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerPartition {
    pub spec: KernelSpec,
    /// Number of cells the layer's kernel is cut into.
    pub m: usize,
    /// Group-wide index of the layer's first mixture.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionPlan {
    pub group_id: String,
    pub layers: Vec<LayerPartition>,
    pub cell: CellShape,
    pub m_t: usize,
    #[serde(serialize_with = "ser_ratio")]
    pub b: Budget,
    pub n: usize,
    pub zero_cell_enabled: bool,
}

fn ser_ratio<S: serde::Serializer>(b: &Budget, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&b.to_string())
}

impl PartitionPlan {
    pub fn layer(&self, layer_id: &str) -> Option<&LayerPartition> {
        self.layers.iter().find(|l| l.spec.layer_id == layer_id)
    }

    /// Attention columns per mixture: the n real cells plus the zero cell
    /// when it is enabled.
    pub fn q(&self) -> usize {
        self.n + usize::from(self.zero_cell_enabled)
    }

    pub fn warehouse_params(&self) -> usize {
        self.n * self.cell.volume()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// Nearest budget of the form p/m_t (p ≥ 1) to `b`.
fn nearest_valid_budget(b: Budget, m_t: usize) -> Budget {
    let m_t = m_t as u64;
    let scaled = b * m_t;
    let p = scaled.round().to_integer().max(1);
    Ratio::new(p, m_t)
}

/// Partitions every layer of a group with the shared cell shape and sizes the
/// warehouse as `n = b·m_t`.
pub fn plan_partition(
    group_id: &str,
    group: &[KernelSpec],
    b: Budget,
    div: ScaleDivisors,
) -> Result<PartitionPlan, PlanError> {
    if group.is_empty() {
        return Err(PlanError::EmptyGroup(group_id.to_string()));
    }
    if b == Ratio::from_integer(0) {
        return Err(PlanError::NonPositiveBudget);
    }
    let cell = compute_cdd(group, div)?;
    let mut layers = Vec::with_capacity(group.len());
    let mut m_t = 0;
    for spec in group {
        if !cell.divides(spec) {
            return Err(PlanError::CellDoesNotDivide {
                layer: spec.layer_id.clone(),
                cell,
                k: spec.k,
                c: spec.c,
                f: spec.f,
            });
        }
        let m = spec.volume() / cell.volume();
        layers.push(LayerPartition {
            spec: spec.clone(),
            m,
            offset: m_t,
        });
        m_t += m;
    }
    let n = b * m_t as u64;
    if !n.is_integer() {
        return Err(PlanError::NonIntegralBudget {
            group: group_id.to_string(),
            b,
            m_t,
            suggested: nearest_valid_budget(b, m_t),
        });
    }
    Ok(PartitionPlan {
        group_id: group_id.to_string(),
        layers,
        cell,
        m_t,
        b,
        n: n.to_integer() as usize,
        zero_cell_enabled: b < Ratio::from_integer(1),
    })
}

/// Where a layer goes when stages are regrouped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageAssignment {
    Group(String),
    /// Kept as an ordinary convolution (e.g. the stem).
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageGroup {
    pub group_id: String,
    pub specs: Vec<KernelSpec>,
}

/// Collects layers into sharing groups according to an explicit mapping.
///
/// Groups are ordered by the first layer that maps into them and keep the
/// layer order within each group.
pub fn reassign_stages(
    layers: &[KernelSpec],
    grouping: &[(String, StageAssignment)],
) -> Result<Vec<StageGroup>, PlanError> {
    let known: BTreeSet<&str> = layers.iter().map(|l| l.layer_id.as_str()).collect();
    let mut map: BTreeMap<&str, &StageAssignment> = BTreeMap::new();
    for (id, a) in grouping {
        if !known.contains(id.as_str()) {
            return Err(PlanError::UnknownLayer(id.clone()));
        }
        if map.insert(id.as_str(), a).is_some() {
            return Err(PlanError::DoublyMapped(id.clone()));
        }
    }
    let mut groups: Vec<StageGroup> = Vec::new();
    for spec in layers {
        match map.get(spec.layer_id.as_str()) {
            None => return Err(PlanError::Unmapped(spec.layer_id.clone())),
            Some(StageAssignment::Excluded) => {}
            Some(StageAssignment::Group(g)) => match groups.iter_mut().find(|s| &s.group_id == g) {
                Some(s) => s.specs.push(spec.clone()),
                None => groups.push(StageGroup {
                    group_id: g.clone(),
                    specs: vec![spec.clone()],
                }),
            },
        }
    }
    Ok(groups)
}

/// Start coordinates of one cell-sized block inside a (f, c, k, k) kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub f0: usize,
    pub c0: usize,
    pub r0: usize,
    pub s0: usize,
}

/// Cuts a kernel into cell-sized blocks.
///
/// Order: output-channel blocks outermost, then input-channel blocks, then
/// spatial rows, then spatial columns.
pub fn tile_cells(spec: &KernelSpec, cell: CellShape) -> Result<Vec<Block>, PlanError> {
    if !cell.divides(spec) || cell.k == 0 || cell.c == 0 || cell.f == 0 {
        return Err(PlanError::CellDoesNotDivide {
            layer: spec.layer_id.clone(),
            cell,
            k: spec.k,
            c: spec.c,
            f: spec.f,
        });
    }
    let mut blocks = Vec::with_capacity(spec.volume() / cell.volume());
    for fb in 0..spec.f / cell.f {
        for cb in 0..spec.c / cell.c {
            for rb in 0..spec.k / cell.k {
                for sb in 0..spec.k / cell.k {
                    blocks.push(Block {
                        f0: fb * cell.f,
                        c0: cb * cell.c,
                        r0: rb * cell.k,
                        s0: sb * cell.k,
                    });
                }
            }
        }
    }
    Ok(blocks)
}
