//! Network graph built from a [`ModelManifest`].
//!
//! Each layer computes `act(norm(conv(source, W)) + residual)`, where `W`
//! is a static kernel, a per-sample dyconv mixture or a per-sample kernel
//! assembled from the layer's warehouse. A linear classifier follows global
//! average pooling of the last layer.
//!
//! Parameters are exposed as flat slots in checkpoint order: warehouse
//! cells by group, attention parameters by layer, static kernels and
//! normalization by layer, classifier last.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assemble::{
    assemble_backward_tiled, assemble_tiled, dyconv_assemble, dyconv_assemble_backward, AssembleError, LayerTiling,
};
use crate::attention::{
    attention_backward, attention_forward, cell_fan_in, hidden_width, init_beta, AttentionCache, AttentionError,
    AttentionFn, AttentionParams, BetaAssignment, BetaStrategy,
};
use crate::exec::Exec;
use crate::manifest::{AttentionDef, Binding, ManifestError, ModelManifest, Wiring};
use crate::ops::{
    batch_norm_backward, batch_norm_forward, conv_image_backward, conv_image_forward, cross_entropy,
    cross_entropy_backward, fc_backward, fc_forward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    BatchNormCache, ConvGeom,
};
use crate::partition::PartitionPlan;
use crate::scalar::Scalar;
use crate::tensor::{mismatch, Matrix, ShapeError, Tensor4};
use crate::warehouse::{construct_warehouse, InitScheme, Warehouse, WarehouseError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Warehouse(#[from] WarehouseError),
    #[error("layer `{layer}`: {source}")]
    Attention {
        layer: String,
        #[source]
        source: AttentionError,
    },
    #[error("layer `{layer}`: {source}")]
    Assemble {
        layer: String,
        #[source]
        source: AssembleError,
    },
    #[error("layer `{layer}`: {source}")]
    Shape {
        layer: String,
        #[source]
        source: ShapeError,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("unknown parameter slot `{0}`")]
    UnknownSlot(String),
    #[error("parameter slot `{name}` holds {expected} values, got {got}")]
    SlotLength { name: String, expected: usize, got: usize },
}

fn at<E>(layer: &str, wrap: fn(String, E) -> ModelError) -> impl FnOnce(E) -> ModelError {
    let layer = layer.to_string();
    move |e| wrap(layer, e)
}

fn shape_err(layer: String, source: ShapeError) -> ModelError {
    ModelError::Shape { layer, source }
}

fn attn_err(layer: String, source: AttentionError) -> ModelError {
    ModelError::Attention { layer, source }
}

fn asm_err(layer: String, source: AssembleError) -> ModelError {
    ModelError::Assemble { layer, source }
}

/// Name, length and weight-decay flag of one parameter slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotInfo {
    pub name: String,
    pub len: usize,
    pub decay: bool,
}

/// Attention state of a dynamic layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamic<T> {
    pub params: AttentionParams<T>,
    pub beta: BetaAssignment,
    pub func: AttentionFn,
}

#[derive(Debug, Clone, PartialEq)]
enum Kernel<T> {
    Plain(Tensor4<T>),
    Warehouse {
        group: usize,
        tiling: LayerTiling,
        dynamic: Dynamic<T>,
    },
    Dyconv {
        kernels: Vec<Tensor4<T>>,
        dynamic: Dynamic<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Node<T> {
    kernel: Kernel<T>,
    norm: Option<(Vec<T>, Vec<T>)>,
}

/// Slot indices of each parameter family.
#[derive(Debug, Clone, Default)]
struct Layout {
    cells: Vec<usize>,
    attention: Vec<Option<usize>>,
    kernel: Vec<Option<usize>>,
    norm: Vec<Option<usize>>,
    classifier: usize,
    infos: Vec<SlotInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    manifest: ModelManifest,
    wiring: Vec<Wiring>,
    plans: Vec<PartitionPlan>,
    warehouses: Vec<Warehouse<T>>,
    nodes: Vec<Node<T>>,
    classifier_w: Matrix<T>,
    classifier_b: Vec<T>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<T> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect()
}

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<T> {
    let fan_in = dims[1] * dims[2] * dims[3];
    let data = gaussian(rng, dims.iter().product(), (2.0 / fan_in as f64).sqrt());
    Tensor4::new(dims, data).expect("length matches dims")
}

fn parse_beta(s: &str, layer: &str) -> Result<BetaStrategy, ModelError> {
    s.parse().map_err(at(layer, attn_err))
}

fn new_dynamic<T: Scalar>(layer: &str, c: usize, def: &AttentionDef, beta: BetaAssignment, seed: u64) -> Dynamic<T> {
    let hidden = hidden_width(c, def.reduction, def.min_hidden);
    Dynamic {
        params: AttentionParams::new(layer, c, hidden, beta.rows, beta.cols, def.logit_init, seed),
        beta,
        func: def.function,
    }
}

/// Builds and initializes a graph; deterministic in `seed`.
pub fn build_model<T: Scalar>(manifest: &ModelManifest, seed: u64) -> Result<ModelGraph<T>, ModelError> {
    let wiring = manifest.wiring()?;
    let plans = manifest.plans()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut warehouses = Vec::with_capacity(plans.len());
    let mut betas = Vec::with_capacity(plans.len());
    for (plan, def) in plans.iter().zip(&manifest.groups) {
        let strategy = parse_beta(&def.beta, &plan.layers[0].spec.layer_id)?;
        let b = init_beta(plan, strategy).map_err(at(&plan.layers[0].spec.layer_id, attn_err))?;
        let fan = cell_fan_in(plan, &b);
        warehouses.push(construct_warehouse(plan, &InitScheme::Kaiming(fan), rng.next_u64())?);
        betas.push(b);
    }

    let mut nodes = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        let dims = [l.f, l.c, l.k, l.k];
        let kernel = match &l.binding {
            Binding::Plain => Kernel::Plain(kaiming(&mut rng, dims)),
            Binding::Warehouse(g) => {
                let gi = manifest
                    .groups
                    .iter()
                    .position(|d| &d.id == g)
                    .expect("validated group");
                let beta = betas[gi]
                    .iter()
                    .find(|b| b.layer_id == l.id)
                    .cloned()
                    .expect("layer belongs to its plan");
                let tiling = LayerTiling::new(&l.spec(), plans[gi].cell)
                    .map_err(|e| asm_err(l.id.clone(), AssembleError::Plan(e)))?;
                Kernel::Warehouse {
                    group: gi,
                    tiling,
                    dynamic: new_dynamic(&l.id, l.c, &manifest.groups[gi].attention, beta, rng.next_u64()),
                }
            }
            Binding::Dyconv(n) => {
                let kernels = (0..*n).map(|_| kaiming(&mut rng, dims)).collect();
                let mut data = vec![0u8; *n];
                data[0] = 1;
                let beta = BetaAssignment {
                    layer_id: l.id.clone(),
                    strategy: BetaStrategy::OneToOne,
                    rows: 1,
                    cols: *n,
                    data,
                };
                Kernel::Dyconv {
                    kernels,
                    dynamic: new_dynamic(&l.id, l.c, &manifest.dyconv, beta, rng.next_u64()),
                }
            }
        };
        let norm = l.norm.then(|| (vec![T::one(); l.f], vec![T::zero(); l.f]));
        nodes.push(Node { kernel, norm });
    }

    let feat = manifest.layers.last().expect("non-empty").f;
    let classifier_w = Matrix::from_vec(
        manifest.classes,
        feat,
        gaussian(&mut rng, manifest.classes * feat, (1.0 / feat as f64).sqrt()),
    )
    .expect("length matches");
    Ok(ModelGraph {
        manifest: manifest.clone(),
        wiring,
        plans,
        warehouses,
        nodes,
        classifier_w,
        classifier_b: vec![T::zero(); manifest.classes],
    })
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Tensor4<T>,
    outputs: Vec<Tensor4<T>>,
    nodes: Vec<NodeCache<T>>,
    features: Matrix<T>,
    tau: T,
}

#[derive(Debug, Clone)]
struct NodeCache<T> {
    kernels: Vec<Vec<T>>,
    alphas: Vec<Matrix<T>>,
    attention: Option<AttentionCache<T>>,
    norm: Option<BatchNormCache<T>>,
    pre_act: Option<Tensor4<T>>,
}

impl<T> ForwardCache<T> {
    /// Per-sample α of layer `layer` (empty for static layers).
    pub fn alphas(&self, layer: usize) -> &[Matrix<T>] {
        &self.nodes[layer].alphas
    }

    pub fn output(&self, layer: usize) -> &Tensor4<T> {
        &self.outputs[layer]
    }
}

/// Mean loss, number of correct predictions and gradients per slot.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn plans(&self) -> &[PartitionPlan] {
        &self.plans
    }

    pub fn warehouses(&self) -> &[Warehouse<T>] {
        &self.warehouses
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.manifest.layers.iter().position(|l| l.id == id)
    }

    /// Attention state of a warehouse-bound or dyconv layer.
    pub fn dynamic(&self, layer: usize) -> Option<&Dynamic<T>> {
        match &self.nodes[layer].kernel {
            Kernel::Plain(_) => None,
            Kernel::Warehouse { dynamic, .. } | Kernel::Dyconv { dynamic, .. } => Some(dynamic),
        }
    }

    /// Warehouse group index of a layer, if bound to one.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        match &self.nodes[layer].kernel {
            Kernel::Warehouse { group, .. } => Some(*group),
            _ => None,
        }
    }

    fn layout(&self) -> Layout {
        let mut lay = Layout::default();
        let push = |infos: &mut Vec<SlotInfo>, name: String, len: usize, decay: bool| {
            infos.push(SlotInfo { name, len, decay });
            infos.len() - 1
        };
        for (w, def) in self.warehouses.iter().zip(&self.manifest.groups) {
            lay.cells.push(lay.infos.len());
            for j in 0..w.n() {
                push(
                    &mut lay.infos,
                    format!("{}.cell{j}", def.id),
                    w.cell_shape().volume(),
                    true,
                );
            }
        }
        for (node, l) in self.nodes.iter().zip(&self.manifest.layers) {
            let slot = match &node.kernel {
                Kernel::Plain(_) => None,
                Kernel::Warehouse { dynamic, .. } | Kernel::Dyconv { dynamic, .. } => {
                    let p = &dynamic.params;
                    let first = push(&mut lay.infos, format!("{}.attn.w1", l.id), p.w1.data.len(), true);
                    push(&mut lay.infos, format!("{}.attn.b1", l.id), p.b1.len(), false);
                    push(&mut lay.infos, format!("{}.attn.w2", l.id), p.w2.data.len(), true);
                    push(&mut lay.infos, format!("{}.attn.b2", l.id), p.b2.len(), false);
                    Some(first)
                }
            };
            lay.attention.push(slot);
        }
        for (node, l) in self.nodes.iter().zip(&self.manifest.layers) {
            let kslot = match &node.kernel {
                Kernel::Plain(k) => Some(push(&mut lay.infos, format!("{}.kernel", l.id), k.len(), true)),
                Kernel::Dyconv { kernels, .. } => {
                    let first = lay.infos.len();
                    for (j, k) in kernels.iter().enumerate() {
                        push(&mut lay.infos, format!("{}.kernel{j}", l.id), k.len(), true);
                    }
                    Some(first)
                }
                Kernel::Warehouse { .. } => None,
            };
            lay.kernel.push(kslot);
            let nslot = node.norm.as_ref().map(|(g, b)| {
                let first = push(&mut lay.infos, format!("{}.bn.gamma", l.id), g.len(), false);
                push(&mut lay.infos, format!("{}.bn.beta", l.id), b.len(), false);
                first
            });
            lay.norm.push(nslot);
        }
        lay.classifier = push(
            &mut lay.infos,
            "classifier.w".into(),
            self.classifier_w.data.len(),
            true,
        );
        push(&mut lay.infos, "classifier.b".into(), self.classifier_b.len(), false);
        lay
    }

    /// Parameter slots in checkpoint order.
    pub fn slots(&self) -> Vec<SlotInfo> {
        self.layout().infos
    }

    pub fn param_count(&self) -> usize {
        self.slots().iter().map(|s| s.len).sum()
    }

    /// Read access to all slots, in [`Self::slots`] order.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for w in &self.warehouses {
            out.extend(w.cells().iter().map(Vec::as_slice));
        }
        for node in &self.nodes {
            if let Kernel::Warehouse { dynamic, .. } | Kernel::Dyconv { dynamic, .. } = &node.kernel {
                let p = &dynamic.params;
                out.extend([p.w1.data.as_slice(), &p.b1, &p.w2.data, &p.b2]);
            }
        }
        for node in &self.nodes {
            match &node.kernel {
                Kernel::Plain(k) => out.push(k.data()),
                Kernel::Dyconv { kernels, .. } => out.extend(kernels.iter().map(Tensor4::data)),
                Kernel::Warehouse { .. } => {}
            }
            if let Some((g, b)) = &node.norm {
                out.extend([g.as_slice(), b]);
            }
        }
        out.extend([self.classifier_w.data.as_slice(), &self.classifier_b]);
        out
    }

    /// Mutable access to all slots, in [`Self::slots`] order. Marks every
    /// warehouse as modified.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for w in &mut self.warehouses {
            out.extend(w.cells_mut().iter_mut().map(Vec::as_mut_slice));
        }
        let mut attn: Vec<&mut [T]> = Vec::new();
        let mut rest: Vec<&mut [T]> = Vec::new();
        for node in &mut self.nodes {
            match &mut node.kernel {
                Kernel::Plain(k) => rest.push(k.data_mut()),
                Kernel::Dyconv { kernels, dynamic } => {
                    let p = &mut dynamic.params;
                    attn.extend([p.w1.data.as_mut_slice(), &mut p.b1, &mut p.w2.data, &mut p.b2]);
                    rest.extend(kernels.iter_mut().map(Tensor4::data_mut));
                }
                Kernel::Warehouse { dynamic, .. } => {
                    let p = &mut dynamic.params;
                    attn.extend([p.w1.data.as_mut_slice(), &mut p.b1, &mut p.w2.data, &mut p.b2]);
                }
            }
            if let Some((g, b)) = &mut node.norm {
                rest.extend([g.as_mut_slice(), b.as_mut_slice()]);
            }
        }
        out.extend(attn);
        out.extend(rest);
        out.extend([self.classifier_w.data.as_mut_slice(), &mut self.classifier_b]);
        out
    }

    /// Copy of the named slot.
    pub fn param(&self, name: &str) -> Result<Vec<T>, ModelError> {
        let idx = self.slot_index(name)?;
        Ok(self.params()[idx].to_vec())
    }

    pub fn set_param(&mut self, name: &str, values: &[T]) -> Result<(), ModelError> {
        let idx = self.slot_index(name)?;
        let mut params = self.params_mut();
        let slot = &mut params[idx];
        if slot.len() != values.len() {
            return Err(ModelError::SlotLength {
                name: name.to_string(),
                expected: slot.len(),
                got: values.len(),
            });
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    fn slot_index(&self, name: &str) -> Result<usize, ModelError> {
        self.slots()
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| ModelError::UnknownSlot(name.to_string()))
    }

    /// Copies every slot whose name also exists in `other` with equal length.
    pub fn copy_matching_params(&mut self, other: &ModelGraph<T>) -> usize {
        let theirs: Vec<(SlotInfo, Vec<T>)> = other
            .slots()
            .into_iter()
            .zip(other.params())
            .map(|(s, p)| (s, p.to_vec()))
            .collect();
        let mine = self.slots();
        let mut copied = 0;
        for (slot, dst) in mine.iter().zip(self.params_mut()) {
            if let Some((_, src)) = theirs.iter().find(|(s, _)| s.name == slot.name && s.len == slot.len) {
                dst.copy_from_slice(src);
                copied += 1;
            }
        }
        copied
    }

    fn source<'a>(&self, cache_in: &'a Tensor4<T>, outputs: &'a [Tensor4<T>], src: Option<usize>) -> &'a Tensor4<T> {
        match src {
            Some(j) => &outputs[j],
            None => cache_in,
        }
    }

    /// Forward pass over a batch at temperature `tau`.
    pub fn forward(&self, x: &Tensor4<T>, tau: T, exec: Exec) -> Result<(Matrix<T>, ForwardCache<T>), ModelError> {
        let first = &self.manifest.layers[0];
        if x.dims()[1] != first.c {
            return Err(shape_err(
                first.id.clone(),
                mismatch("model_forward", &x.dims(), &[first.c]),
            ));
        }
        let n = x.dims()[0];
        let mut outputs: Vec<Tensor4<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for (i, (node, l)) in self.nodes.iter().zip(&self.manifest.layers).enumerate() {
            let xin = self.source(x, &outputs, self.wiring[i].source);
            let [_, c, h, w] = xin.dims();
            let g = ConvGeom::new(c, h, w, l.f, l.k, l.stride, l.pad).map_err(at(&l.id, shape_err))?;
            let mut nc = NodeCache {
                kernels: Vec::new(),
                alphas: Vec::new(),
                attention: None,
                norm: None,
                pre_act: None,
            };
            let conv_out: Vec<Vec<T>> = match &node.kernel {
                Kernel::Plain(k) => exec.map(n, |b| conv_image_forward(xin.item(b), k.data(), &g)),
                Kernel::Warehouse { group, tiling, dynamic } => {
                    let (alphas, ac) = attention_forward(xin, &dynamic.params, tau, &dynamic.beta, dynamic.func)
                        .map_err(at(&l.id, attn_err))?;
                    let wh = &self.warehouses[*group];
                    let parts = exec.map(n, |b| {
                        let k = assemble_tiled(wh, &alphas[b], tiling)?.kernel.into_data();
                        let y = conv_image_forward(xin.item(b), &k, &g);
                        Ok((k, y))
                    });
                    let parts: Vec<(Vec<T>, Vec<T>)> = parts
                        .into_iter()
                        .collect::<Result<_, AssembleError>>()
                        .map_err(at(&l.id, asm_err))?;
                    let (ks, ys) = parts.into_iter().unzip();
                    nc.kernels = ks;
                    nc.alphas = alphas;
                    nc.attention = Some(ac);
                    ys
                }
                Kernel::Dyconv { kernels, dynamic } => {
                    let (alphas, ac) = attention_forward(xin, &dynamic.params, tau, &dynamic.beta, dynamic.func)
                        .map_err(at(&l.id, attn_err))?;
                    let parts = exec.map(n, |b| {
                        let k = dyconv_assemble(kernels, alphas[b].row(0))?.into_data();
                        let y = conv_image_forward(xin.item(b), &k, &g);
                        Ok((k, y))
                    });
                    let parts: Vec<(Vec<T>, Vec<T>)> = parts
                        .into_iter()
                        .collect::<Result<_, ShapeError>>()
                        .map_err(at(&l.id, shape_err))?;
                    let (ks, ys) = parts.into_iter().unzip();
                    nc.kernels = ks;
                    nc.alphas = alphas;
                    nc.attention = Some(ac);
                    ys
                }
            };
            let mut y = Tensor4::new([n, l.f, g.oh, g.ow], conv_out.concat()).map_err(at(&l.id, shape_err))?;
            if let Some((gamma, beta)) = &node.norm {
                let (yn, bc) = batch_norm_forward(&y, gamma, beta).map_err(at(&l.id, shape_err))?;
                y = yn;
                nc.norm = Some(bc);
            }
            if let Some(r) = self.wiring[i].residual {
                y.add_assign(self.source(x, &outputs, r))
                    .map_err(at(&l.id, shape_err))?;
            }
            if l.relu {
                let out = Tensor4::new(y.dims(), relu(y.data())).expect("same dims");
                nc.pre_act = Some(y);
                y = out;
            }
            outputs.push(y);
            caches.push(nc);
        }
        let last = outputs.last().expect("non-empty");
        let features = global_avg_pool(last).map_err(at("classifier", shape_err))?;
        let mut logits = Matrix::zeros(n, self.manifest.classes);
        for b in 0..n {
            let z = fc_forward(features.row(b), &self.classifier_w, &self.classifier_b)
                .map_err(at("classifier", shape_err))?;
            logits.row_mut(b).copy_from_slice(&z);
        }
        Ok((
            logits,
            ForwardCache {
                input: x.clone(),
                outputs,
                nodes: caches,
                features,
                tau,
            },
        ))
    }

    pub fn logits(&self, x: &Tensor4<T>, tau: T, exec: Exec) -> Result<Matrix<T>, ModelError> {
        Ok(self.forward(x, tau, exec)?.0)
    }

    /// Gradients of every slot given `grad_logits` (n × classes).
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Matrix<T>,
        exec: Exec,
    ) -> Result<Vec<Vec<T>>, ModelError> {
        let lay = self.layout();
        let mut grads: Vec<Vec<T>> = lay.infos.iter().map(|s| vec![T::zero(); s.len]).collect();
        let n = cache.input.dims()[0];
        let tau = cache.tau;

        let mut grad_feat = Matrix::zeros(n, self.classifier_w.cols);
        for b in 0..n {
            let (gi, gw, gb) = fc_backward(grad_logits.row(b), cache.features.row(b), &self.classifier_w)
                .map_err(at("classifier", shape_err))?;
            add_into(&mut grads[lay.classifier], &gw.data);
            add_into(&mut grads[lay.classifier + 1], &gb);
            grad_feat.row_mut(b).copy_from_slice(&gi);
        }
        let last = self.nodes.len() - 1;
        let mut grad_out: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        grad_out[last] = Some(
            global_avg_pool_backward(&grad_feat, cache.outputs[last].dims()).map_err(at("classifier", shape_err))?,
        );

        for i in (0..self.nodes.len()).rev() {
            let Some(mut g) = grad_out[i].take() else {
                continue;
            };
            let l = &self.manifest.layers[i];
            let node = &self.nodes[i];
            let nc = &cache.nodes[i];
            if let Some(pre) = &nc.pre_act {
                g = Tensor4::new(g.dims(), relu_backward(g.data(), pre.data())).expect("same dims");
            }
            if let Some(Some(r)) = self.wiring[i].residual {
                accumulate(&mut grad_out[r], &g).map_err(at(&l.id, shape_err))?;
            }
            if let (Some((gamma, _)), Some(bc)) = (&node.norm, &nc.norm) {
                let (gx, gg, gb) = batch_norm_backward(&g, bc, gamma).map_err(at(&l.id, shape_err))?;
                let s = lay.norm[i].expect("norm slot");
                add_into(&mut grads[s], &gg);
                add_into(&mut grads[s + 1], &gb);
                g = gx;
            }
            let xin = self.source(&cache.input, &cache.outputs, self.wiring[i].source);
            let [_, c, h, w] = xin.dims();
            let geom = ConvGeom::new(c, h, w, l.f, l.k, l.stride, l.pad).map_err(at(&l.id, shape_err))?;
            let kdims = [l.f, l.c, l.k, l.k];
            let mut gx_data: Vec<T> = Vec::with_capacity(xin.len());
            match &node.kernel {
                Kernel::Plain(k) => {
                    let parts = exec.map(n, |b| conv_image_backward(g.item(b), xin.item(b), k.data(), &geom));
                    let s = lay.kernel[i].expect("kernel slot");
                    for (gi, gk) in parts {
                        gx_data.extend_from_slice(&gi);
                        add_into(&mut grads[s], &gk);
                    }
                }
                Kernel::Warehouse { group, tiling, dynamic } => {
                    let wh = &self.warehouses[*group];
                    let parts = exec.map(n, |b| {
                        let (gi, gk) = conv_image_backward(g.item(b), xin.item(b), &nc.kernels[b], &geom);
                        let gk = Tensor4::new(kdims, gk).map_err(AssembleError::Shape)?;
                        let (gc, ga) = assemble_backward_tiled(&gk, wh, &nc.alphas[b], tiling)?;
                        Ok((gi, gc, ga))
                    });
                    let base = lay.cells[*group];
                    let mut galphas = Vec::with_capacity(n);
                    for part in parts {
                        let (gi, gc, ga) = part.map_err(at(&l.id, asm_err))?;
                        gx_data.extend_from_slice(&gi);
                        for (j, gcj) in gc.iter().enumerate() {
                            add_into(&mut grads[base + j], gcj);
                        }
                        galphas.push(ga);
                    }
                    self.dynamic_backward(&mut grads, &lay, i, dynamic, nc, &galphas, tau, &mut gx_data)?;
                }
                Kernel::Dyconv { kernels, dynamic } => {
                    let parts = exec.map(n, |b| {
                        let (gi, gk) = conv_image_backward(g.item(b), xin.item(b), &nc.kernels[b], &geom);
                        let gk = Tensor4::new(kdims, gk).expect("kernel dims");
                        let (gks, ga) = dyconv_assemble_backward(&gk, kernels, nc.alphas[b].row(0));
                        (gi, gks, ga)
                    });
                    let s = lay.kernel[i].expect("kernel slot");
                    let mut galphas = Vec::with_capacity(n);
                    for (gi, gks, ga) in parts {
                        gx_data.extend_from_slice(&gi);
                        for (j, gkj) in gks.iter().enumerate() {
                            add_into(&mut grads[s + j], gkj);
                        }
                        galphas.push(Matrix::from_vec(1, ga.len(), ga).expect("row"));
                    }
                    self.dynamic_backward(&mut grads, &lay, i, dynamic, nc, &galphas, tau, &mut gx_data)?;
                }
            }
            if let Some(src) = self.wiring[i].source {
                let gx = Tensor4::new(xin.dims(), gx_data).map_err(at(&l.id, shape_err))?;
                accumulate(&mut grad_out[src], &gx).map_err(at(&l.id, shape_err))?;
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn dynamic_backward(
        &self,
        grads: &mut [Vec<T>],
        lay: &Layout,
        i: usize,
        dynamic: &Dynamic<T>,
        nc: &NodeCache<T>,
        galphas: &[Matrix<T>],
        tau: T,
        gx: &mut [T],
    ) -> Result<(), ModelError> {
        let id = &self.manifest.layers[i].id;
        let ac = nc.attention.as_ref().expect("dynamic layer cache");
        let (gxa, ag) =
            attention_backward(galphas, ac, &dynamic.params, tau, dynamic.func).map_err(at(id, attn_err))?;
        add_into(gx, gxa.data());
        let s = lay.attention[i].expect("attention slot");
        add_into(&mut grads[s], &ag.w1.data);
        add_into(&mut grads[s + 1], &ag.b1);
        add_into(&mut grads[s + 2], &ag.w2.data);
        add_into(&mut grads[s + 3], &ag.b2);
        Ok(())
    }

    /// Mean cross-entropy over the batch and its gradients.
    pub fn loss_and_grads(
        &self,
        x: &Tensor4<T>,
        labels: &[usize],
        tau: T,
        exec: Exec,
    ) -> Result<StepOutput<T>, ModelError> {
        let (logits, cache) = self.forward(x, tau, exec)?;
        let (loss, correct, grad) = self.loss_from_logits(&logits, labels)?;
        let grads = self.backward(&cache, &grad, exec)?;
        Ok(StepOutput { loss, correct, grads })
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, x: &Tensor4<T>, labels: &[usize], tau: T, exec: Exec) -> Result<f64, ModelError> {
        let logits = self.logits(x, tau, exec)?;
        Ok(self.loss_from_logits(&logits, labels)?.0)
    }

    fn loss_from_logits(&self, logits: &Matrix<T>, labels: &[usize]) -> Result<(f64, usize, Matrix<T>), ModelError> {
        let n = logits.rows;
        if labels.len() != n {
            return Err(shape_err("classifier".into(), mismatch("loss", &[labels.len()], &[n])));
        }
        let classes = self.manifest.classes;
        let scale = T::of(1.0 / n as f64);
        let mut loss = 0.0;
        let mut correct = 0;
        let mut grad = Matrix::zeros(n, classes);
        for (b, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(ModelError::Label { label: y, classes });
            }
            let row = logits.row(b);
            loss += cross_entropy(row, y).map_err(at("classifier", shape_err))?.as_f64();
            if argmax(row) == y {
                correct += 1;
            }
            let g = cross_entropy_backward(row, y).map_err(at("classifier", shape_err))?;
            for (d, v) in grad.row_mut(b).iter_mut().zip(g) {
                *d = v * scale;
            }
        }
        Ok((loss / n as f64, correct, grad))
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += *b;
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: &Tensor4<T>) -> Result<(), ShapeError> {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}
