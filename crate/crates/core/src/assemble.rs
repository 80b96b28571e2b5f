//! Kernel assembly from warehouse cells.
//!
//! Every block `i` of a layer's kernel is the mixture
//! `w_i = Σ_j α_ij e_j` over the real cells of the shared warehouse; the
//! mixtures are then placed back at their tiled positions.

use crate::partition::{tile_cells, Block, CellShape, KernelSpec, PartitionPlan, PlanError};
use crate::scalar::Scalar;
use crate::tensor::{mismatch, Matrix, ShapeError, Tensor4};
use crate::warehouse::Warehouse;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssembleError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("layer `{layer}` is not part of group `{group}`")]
    UnknownLayer { layer: String, group: String },
    #[error("warehouse `{warehouse}` does not belong to plan `{plan}`")]
    GroupMismatch { warehouse: String, plan: String },
    #[error("kernel for `{layer}` was assembled from warehouse version {assembled}, current version is {current}")]
    Stale {
        layer: String,
        assembled: u64,
        current: u64,
    },
}

/// Full kernel of one layer together with the warehouse version it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledKernel<T> {
    pub layer_id: String,
    pub kernel: Tensor4<T>,
    pub warehouse_version: u64,
}

/// Precomputed block layout of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTiling {
    pub spec: KernelSpec,
    pub cell: CellShape,
    pub blocks: Vec<Block>,
}

impl LayerTiling {
    pub fn new(spec: &KernelSpec, cell: CellShape) -> Result<Self, PlanError> {
        Ok(Self {
            spec: spec.clone(),
            cell,
            blocks: tile_cells(spec, cell)?,
        })
    }

    pub fn for_layer(plan: &PartitionPlan, layer_id: &str) -> Result<Self, AssembleError> {
        let layer = plan.layer(layer_id).ok_or_else(|| AssembleError::UnknownLayer {
            layer: layer_id.to_string(),
            group: plan.group_id.clone(),
        })?;
        Ok(Self::new(&layer.spec, plan.cell)?)
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.spec.f, self.spec.c, self.spec.k, self.spec.k]
    }

    /// Calls `visit(kernel_offset, cell_offset)` for every element of block `b`.
    #[inline]
    fn for_each_element(&self, b: &Block, mut visit: impl FnMut(usize, usize)) {
        let (s, e) = (&self.spec, &self.cell);
        let mut idx = 0;
        for fo in 0..e.f {
            for ci in 0..e.c {
                for r in 0..e.k {
                    let base = (((b.f0 + fo) * s.c + b.c0 + ci) * s.k + b.r0 + r) * s.k + b.s0;
                    for q in 0..e.k {
                        visit(base + q, idx);
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn check_alpha<T: Scalar>(alpha: &Matrix<T>, tiling: &LayerTiling, q: usize) -> Result<(), AssembleError> {
    if alpha.rows != tiling.m() || alpha.cols != q {
        return Err(mismatch("assemble", &[alpha.rows, alpha.cols], &[tiling.m(), q]).into());
    }
    Ok(())
}

fn check_group<T: Scalar>(warehouse: &Warehouse<T>, plan: &PartitionPlan) -> Result<(), AssembleError> {
    if warehouse.group_id() != plan.group_id || warehouse.n() != plan.n || warehouse.cell_shape() != plan.cell {
        return Err(AssembleError::GroupMismatch {
            warehouse: warehouse.group_id().to_string(),
            plan: plan.group_id.clone(),
        });
    }
    Ok(())
}

/// Builds the layer kernel from `alpha` (m × q) and the warehouse cells.
pub fn assemble<T: Scalar>(
    warehouse: &Warehouse<T>,
    alpha: &Matrix<T>,
    plan: &PartitionPlan,
    layer_id: &str,
) -> Result<AssembledKernel<T>, AssembleError> {
    check_group(warehouse, plan)?;
    let tiling = LayerTiling::for_layer(plan, layer_id)?;
    assemble_tiled(warehouse, alpha, &tiling)
}

/// [`assemble`] with a precomputed tiling.
pub fn assemble_tiled<T: Scalar>(
    warehouse: &Warehouse<T>,
    alpha: &Matrix<T>,
    tiling: &LayerTiling,
) -> Result<AssembledKernel<T>, AssembleError> {
    let n = warehouse.n();
    check_alpha(alpha, tiling, n + usize::from(warehouse.zero_cell_enabled()))?;
    let vol = tiling.cell.volume();
    let mut kernel = Tensor4::zeros(tiling.kernel_dims());
    let mut mix = vec![T::zero(); vol];
    for (i, block) in tiling.blocks.iter().enumerate() {
        mix.iter_mut().for_each(|v| *v = T::zero());
        let a_row = alpha.row(i);
        for (j, cell) in warehouse.cells().iter().enumerate() {
            let a = a_row[j];
            for (w, &e) in mix.iter_mut().zip(cell) {
                *w += a * e;
            }
        }
        let data = kernel.data_mut();
        tiling.for_each_element(block, |k, c| data[k] = mix[c]);
    }
    Ok(AssembledKernel {
        layer_id: tiling.spec.layer_id.clone(),
        kernel,
        warehouse_version: warehouse.version(),
    })
}

/// Errors if `warehouse` changed after `kernel` was assembled from it.
pub fn check_fresh<T: Scalar>(kernel: &AssembledKernel<T>, warehouse: &Warehouse<T>) -> Result<(), AssembleError> {
    if kernel.warehouse_version != warehouse.version() {
        return Err(AssembleError::Stale {
            layer: kernel.layer_id.clone(),
            assembled: kernel.warehouse_version,
            current: warehouse.version(),
        });
    }
    Ok(())
}

/// Gradients of [`assemble`]: per-cell gradients (n cells) and the α
/// gradient (m × q). The zero-cell column always receives zero.
pub fn assemble_backward<T: Scalar>(
    grad_kernel: &Tensor4<T>,
    warehouse: &Warehouse<T>,
    alpha: &Matrix<T>,
    plan: &PartitionPlan,
    layer_id: &str,
) -> Result<(Vec<Vec<T>>, Matrix<T>), AssembleError> {
    check_group(warehouse, plan)?;
    let tiling = LayerTiling::for_layer(plan, layer_id)?;
    assemble_backward_tiled(grad_kernel, warehouse, alpha, &tiling)
}

pub fn assemble_backward_tiled<T: Scalar>(
    grad_kernel: &Tensor4<T>,
    warehouse: &Warehouse<T>,
    alpha: &Matrix<T>,
    tiling: &LayerTiling,
) -> Result<(Vec<Vec<T>>, Matrix<T>), AssembleError> {
    let n = warehouse.n();
    let q = n + usize::from(warehouse.zero_cell_enabled());
    check_alpha(alpha, tiling, q)?;
    if grad_kernel.dims() != tiling.kernel_dims() {
        return Err(mismatch("assemble_backward", &grad_kernel.dims(), &tiling.kernel_dims()).into());
    }
    let vol = tiling.cell.volume();
    let mut grad_cells = vec![vec![T::zero(); vol]; n];
    let mut grad_alpha = Matrix::zeros(tiling.m(), q);
    let mut gmix = vec![T::zero(); vol];
    for (i, block) in tiling.blocks.iter().enumerate() {
        let gk = grad_kernel.data();
        tiling.for_each_element(block, |k, c| gmix[c] = gk[k]);
        for (j, cell) in warehouse.cells().iter().enumerate() {
            let a = alpha.at(i, j);
            let mut dot = T::zero();
            for ((gc, &g), &e) in grad_cells[j].iter_mut().zip(&gmix).zip(cell) {
                *gc += a * g;
                dot += g * e;
            }
            grad_alpha.data[i * q + j] = dot;
        }
    }
    Ok((grad_cells, grad_alpha))
}

/// Vanilla dynamic convolution: `W = Σ_j α_j W_j` over full-size kernels.
pub fn dyconv_assemble<T: Scalar>(kernels: &[Tensor4<T>], alpha: &[T]) -> Result<Tensor4<T>, ShapeError> {
    let first = kernels.first().ok_or_else(|| ShapeError::Invalid {
        op: "dyconv_assemble",
        msg: "no kernels".into(),
    })?;
    if alpha.len() != kernels.len() {
        return Err(mismatch("dyconv_assemble", &[alpha.len()], &[kernels.len()]));
    }
    let mut out = Tensor4::zeros(first.dims());
    for (k, &a) in kernels.iter().zip(alpha) {
        if k.dims() != first.dims() {
            return Err(mismatch("dyconv_assemble", &k.dims(), &first.dims()));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(k.data()) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Adjoint of [`dyconv_assemble`]: (grad per kernel, grad α).
pub fn dyconv_assemble_backward<T: Scalar>(
    grad: &Tensor4<T>,
    kernels: &[Tensor4<T>],
    alpha: &[T],
) -> (Vec<Vec<T>>, Vec<T>) {
    let gk = kernels
        .iter()
        .zip(alpha)
        .map(|(_, &a)| grad.data().iter().map(|&g| a * g).collect())
        .collect();
    let ga = kernels
        .iter()
        .map(|k| k.data().iter().zip(grad.data()).map(|(&w, &g)| w * g).sum())
        .collect();
    (gk, ga)
}
