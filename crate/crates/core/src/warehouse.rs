//! Learnable kernel cells shared by one group of layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::partition::{CellShape, PartitionPlan};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WarehouseError {
    #[error("cell index {index} out of range for warehouse `{group}` with {n} cells (zero cell: {zero})")]
    OutOfRange {
        group: String,
        index: usize,
        n: usize,
        zero: bool,
    },
    #[error("expected {expected} per-cell fan-in values, got {got}")]
    FanInCount { expected: usize, got: usize },
}

/// How cells are filled at construction.
#[derive(Debug, Clone, PartialEq)]
pub enum InitScheme {
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`, one fan-in per cell.
    Kaiming(Vec<usize>),
    Normal {
        std: f64,
    },
    Zero,
}

/// Warehouse of `n` cells plus the implicit zero cell when `b < 1`.
///
/// The zero cell is not a parameter: it is never stored as learnable data,
/// is never counted, and never receives updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Warehouse<T> {
    group_id: String,
    cell: CellShape,
    cells: Vec<Vec<T>>,
    zero: Option<Vec<T>>,
    version: u64,
}

/// Builds the warehouse for `plan`, deterministic in `seed`.
pub fn construct_warehouse<T: Scalar>(
    plan: &PartitionPlan,
    init: &InitScheme,
    seed: u64,
) -> Result<Warehouse<T>, WarehouseError> {
    let vol = plan.cell.volume();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = match init {
        InitScheme::Zero => vec![vec![T::zero(); vol]; plan.n],
        InitScheme::Normal { std } => (0..plan.n).map(|_| gaussian(&mut rng, vol, *std)).collect(),
        InitScheme::Kaiming(fan_in) => {
            if fan_in.len() != plan.n {
                return Err(WarehouseError::FanInCount {
                    expected: plan.n,
                    got: fan_in.len(),
                });
            }
            fan_in
                .iter()
                .map(|&fi| gaussian(&mut rng, vol, (2.0 / fi.max(1) as f64).sqrt()))
                .collect()
        }
    };
    Ok(Warehouse {
        group_id: plan.group_id.clone(),
        cell: plan.cell,
        cells,
        zero: plan.zero_cell_enabled.then(|| vec![T::zero(); vol]),
        version: 0,
    })
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<T> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect()
}

impl<T: Scalar> Warehouse<T> {
    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn cell_shape(&self) -> CellShape {
        self.cell
    }

    /// Number of learnable cells.
    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn zero_cell_enabled(&self) -> bool {
        self.zero.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.cells.len() * self.cell.volume()
    }

    /// Read access to cell `j` (0-based). Index `n` addresses the zero cell
    /// when it is enabled.
    pub fn cell_view(&self, j: usize) -> Result<&[T], WarehouseError> {
        if let Some(c) = self.cells.get(j) {
            return Ok(c);
        }
        match &self.zero {
            Some(z) if j == self.cells.len() => Ok(z),
            _ => Err(WarehouseError::OutOfRange {
                group: self.group_id.clone(),
                index: j,
                n: self.cells.len(),
                zero: self.zero.is_some(),
            }),
        }
    }

    pub fn cells(&self) -> &[Vec<T>] {
        &self.cells
    }

    /// Mutable access to the learnable cells; bumps the version so kernels
    /// assembled earlier are recognised as stale.
    pub fn cells_mut(&mut self) -> &mut [Vec<T>] {
        self.version += 1;
        &mut self.cells
    }

    /// Monotone counter incremented on each mutable access.
    pub fn version(&self) -> u64 {
        self.version
    }
}
