use std::collections::HashSet;

use num_rational::Ratio;
use proptest::prelude::*;

use kernel_warehouse::accounting::{count_graph, count_params};
use kernel_warehouse::assemble::{assemble, dyconv_assemble};
use kernel_warehouse::attention::{init_beta, AttentionFn, BetaStrategy};
use kernel_warehouse::manifest::{dyconv_attention, GroupDef, LayerDef, ModelManifest};
use kernel_warehouse::ops::conv2d_forward;
use kernel_warehouse::partition::{plan_partition, tile_cells, KernelSpec, PartitionPlan, ScaleDivisors};
use kernel_warehouse::tensor::{Matrix, Tensor4};
use kernel_warehouse::train::{gen_synthetic, DataConfig, Sgd, TrainConfig};
use kernel_warehouse::warehouse::{construct_warehouse, InitScheme};
use kernel_warehouse::{build_model, Exec, ModelGraph};

fn layer(id: &str, c: usize, f: usize, binding: &str) -> LayerDef {
    LayerDef {
        id: id.into(),
        k: 3,
        c,
        f,
        stride: 1,
        pad: 1,
        binding: binding.parse().unwrap(),
        input: None,
        residual: None,
        relu: true,
        norm: true,
    }
}

fn specs() -> impl Strategy<Value = Vec<KernelSpec>> {
    (
        prop::sample::select(vec![1usize, 3]),
        prop::sample::select(vec![2usize, 4]),
        prop::collection::vec((1usize..4, 1usize..4), 1..4),
    )
        .prop_map(|(k, base, dims)| {
            dims.iter()
                .enumerate()
                .map(|(i, &(a, b))| KernelSpec::new(format!("l{i}"), k, base * a, base * b, 1, k / 2))
                .collect()
        })
}

fn budget_plan(specs: &[KernelSpec], numer: u64, half: bool) -> PartitionPlan {
    let div = if half {
        ScaleDivisors::half_channels()
    } else {
        ScaleDivisors::default()
    };
    let m_t = plan_partition("g", specs, Ratio::from_integer(1), div).unwrap().m_t as u64;
    plan_partition("g", specs, Ratio::new(numer, m_t), div).unwrap()
}

fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = x.dims();
    let [f, _, k, _] = w.dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * f * oh * ow);
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (y, xx) = (
                                    (oy * stride + ky) as isize - pad as isize,
                                    (ox * stride + kx) as isize - pad as isize,
                                );
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.at([b, ci, y as usize, xx as usize]) * w.at([fo, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_six_loop_reference(
        (n, c, h, f, k, stride, pad) in (1usize..3, 1usize..4, 3usize..7, 1usize..4, prop::sample::select(vec![1usize, 3]), 1usize..3, 0usize..2),
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let x = Tensor4::from_fn([n, c, h, h], |_| next());
        let w = Tensor4::from_fn([f, c, k, k], |_| next());
        let got = conv2d_forward(&x, &w, stride, pad).unwrap();
        prop_assert_eq!(got.data(), &naive_conv(&x, &w, stride, pad)[..]);
    }

    #[test]
    fn tiles_partition_each_kernel(specs in specs(), half in any::<bool>()) {
        let plan = budget_plan(&specs, 1, half);
        for lp in &plan.layers {
            let blocks = tile_cells(&lp.spec, plan.cell).unwrap();
            prop_assert_eq!(blocks.len(), lp.m);
            prop_assert_eq!(blocks.len() * plan.cell.volume(), lp.spec.volume());
            let mut seen = HashSet::new();
            for b in &blocks {
                for f in 0..plan.cell.f {
                    for c in 0..plan.cell.c {
                        for r in 0..plan.cell.k {
                            for s in 0..plan.cell.k {
                                prop_assert!(seen.insert((b.f0 + f, b.c0 + c, b.r0 + r, b.s0 + s)));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn warehouse_size_is_n_cells(specs in specs(), numer in 1u64..9, half in any::<bool>()) {
        let plan = budget_plan(&specs, numer, half);
        let w = construct_warehouse::<f64>(&plan, &InitScheme::Normal { std: 1.0 }, 0).unwrap();
        prop_assert_eq!(w.param_count(), plan.n * plan.cell.volume());
        prop_assert_eq!(w.zero_cell_enabled(), plan.zero_cell_enabled);
        if plan.zero_cell_enabled {
            prop_assert!(w.cell_view(plan.n).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_to_one_rows_and_columns(specs in specs(), numer in 1u64..9, half in any::<bool>()) {
        let plan = budget_plan(&specs, numer, half);
        let betas = init_beta(&plan, BetaStrategy::OneToOne).unwrap();
        let q = plan.q();
        let mut col = vec![0u32; q];
        for beta in &betas {
            for i in 0..beta.rows {
                let row = beta.row(i);
                prop_assert_eq!(row.iter().map(|&v| v as u32).sum::<u32>(), 1);
                row.iter().enumerate().for_each(|(j, &v)| col[j] += v as u32);
            }
        }
        prop_assert!(col[..plan.n].iter().all(|&s| s <= 1));
    }

    #[test]
    fn attention_affine_in_tau(z in prop::collection::vec(-5.0f64..5.0, 1..20), bits in any::<u32>()) {
        let beta: Vec<u8> = (0..z.len()).map(|j| ((bits >> (j % 32)) & 1) as u8).collect();
        for f in [AttentionFn::Caf, AttentionFn::Softmax, AttentionFn::Sigmoid, AttentionFn::ReluNorm] {
            let a0 = f.apply(&z, 0.0, &beta);
            for tau in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let a = f.apply(&z, tau, &beta);
                for j in 0..z.len() {
                    prop_assert!((a[j] - (tau * beta[j] as f64 + (1.0 - tau) * a0[j])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_sign_behaviour(pos in 0.1f64..5.0, neg in -5.0f64..-0.1, rest in prop::collection::vec(-5.0f64..5.0, 0..10)) {
        let mut z = vec![pos, neg];
        z.extend(rest);
        let beta = vec![0u8; z.len()];
        prop_assert!(AttentionFn::Caf.apply(&z, 0.0, &beta)[1] < 0.0);
        prop_assert!(AttentionFn::Softmax.apply(&z, 0.0, &beta).iter().all(|&a| a > 0.0));
        prop_assert!(AttentionFn::Sigmoid.apply(&z, 0.0, &beta).iter().all(|&a| a > 0.0));
        prop_assert!(AttentionFn::ReluNorm.apply(&z, 0.0, &beta).iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn assemble_is_linear_and_block_local(specs in specs(), numer in 1u64..5, seed in any::<u64>(), a1 in values(64), a2 in values(64)) {
        let plan = budget_plan(&specs, numer, false);
        let mut w = construct_warehouse::<f64>(&plan, &InitScheme::Normal { std: 1.0 }, seed).unwrap();
        let lp = &plan.layers[0];
        let q = plan.q();
        let alpha = |src: &[f64]| Matrix::from_vec(lp.m, q, (0..lp.m * q).map(|i| src[i % src.len()]).collect()).unwrap();
        let (x, y) = (alpha(&a1), alpha(&a2));
        let sum = Matrix::from_vec(lp.m, q, x.data.iter().zip(&y.data).map(|(u, v)| u + v).collect()).unwrap();
        let kx = assemble(&w, &x, &plan, &lp.spec.layer_id).unwrap().kernel;
        let ky = assemble(&w, &y, &plan, &lp.spec.layer_id).unwrap().kernel;
        let ks = assemble(&w, &sum, &plan, &lp.spec.layer_id).unwrap().kernel;
        for ((s, u), v) in ks.data().iter().zip(kx.data()).zip(ky.data()) {
            prop_assert!((s - (u + v)).abs() <= 1e-12 * (1.0 + s.abs()));
        }

        let j = (seed as usize) % plan.n;
        let mut sparse = x.clone();
        for i in 0..lp.m {
            if i % 2 == 0 {
                sparse.row_mut(i)[j] = 0.0;
            }
        }
        let before = assemble(&w, &sparse, &plan, &lp.spec.layer_id).unwrap().kernel;
        w.cells_mut()[j].iter_mut().for_each(|v| *v += 1.0);
        let after = assemble(&w, &sparse, &plan, &lp.spec.layer_id).unwrap().kernel;
        let blocks = tile_cells(&lp.spec, plan.cell).unwrap();
        for (i, b) in blocks.iter().enumerate() {
            let changed = (0..plan.cell.f).any(|f| {
                (0..plan.cell.c).any(|c| {
                    let at = [b.f0 + f, b.c0 + c, b.r0, b.s0];
                    before.at(at) != after.at(at)
                })
            });
            if sparse.at(i, j) == 0.0 {
                prop_assert!(!changed, "block {} changed with zero weight", i);
            }
        }
    }

    #[test]
    fn single_cell_assemble_equals_dyconv(n in 1usize..6, c in 1usize..4, f in 1usize..4, seed in any::<u64>(), a in values(8)) {
        let spec = KernelSpec::new("l", 3, c, f, 1, 1);
        let plan = plan_partition("g", std::slice::from_ref(&spec), Ratio::from_integer(n as u64), ScaleDivisors::default()).unwrap();
        prop_assert_eq!(plan.m_t, 1);
        let w = construct_warehouse::<f64>(&plan, &InitScheme::Normal { std: 1.0 }, seed).unwrap();
        let alpha = Matrix::from_vec(1, n, a[..n].to_vec()).unwrap();
        let kernels: Vec<Tensor4<f64>> = w.cells().iter().map(|cell| Tensor4::new([f, c, 3, 3], cell.clone()).unwrap()).collect();
        let kw = assemble(&w, &alpha, &plan, "l").unwrap().kernel;
        let dy = dyconv_assemble(&kernels, &a[..n]).unwrap();
        prop_assert_eq!(kw.data(), dy.data());
    }

    #[test]
    fn counting_ignores_seed(seed in any::<u64>(), b in prop::sample::select(vec!["1/2", "1", "2"])) {
        let mut g = GroupDef::new("w", b);
        g.scale_divisors = ScaleDivisors::half_channels();
        let m = ModelManifest {
            classes: 4,
            layers: vec![layer("stem", 3, 8, "plain"), layer("a", 8, 8, "w"), layer("b", 8, 16, "w"), layer("d", 16, 16, "dyconv:2")],
            groups: vec![g],
            dyconv: dyconv_attention(),
        };
        let graph: ModelGraph<f32> = build_model(&m, seed).unwrap();
        prop_assert_eq!(count_graph(&graph), count_params(&m).unwrap());
    }
}

fn tiny_data() -> DataConfig {
    DataConfig {
        seed: 1,
        classes: 3,
        samples_per_class: 6,
        image_size: 6,
        channels: 3,
        noise: 0.3,
        max_shift: 1,
    }
}

fn half_manifest() -> ModelManifest {
    let mut g = GroupDef::new("w", "1/2");
    g.scale_divisors = ScaleDivisors::half_channels();
    ModelManifest {
        classes: 3,
        layers: vec![
            layer("stem", 3, 4, "plain"),
            layer("a", 4, 4, "w"),
            layer("b", 4, 8, "w"),
        ],
        groups: vec![g],
        dyconv: dyconv_attention(),
    }
}

#[test]
fn zero_cell_and_beta_survive_training() {
    let data = gen_synthetic::<f32>(&tiny_data()).unwrap();
    let mut graph: ModelGraph<f32> = build_model(&half_manifest(), 0).unwrap();
    let betas: Vec<_> = (0..3).map(|i| graph.dynamic(i).map(|d| d.beta.clone())).collect();
    let cfg = TrainConfig::default();
    let mut opt = Sgd::new(&graph);
    let n = graph.plans()[0].n;
    for step in 0..6 {
        let idx: Vec<usize> = (0..6).map(|i| (i * 3 + step) % data.len()).collect();
        let (x, y) = data.batch(&idx);
        let out = graph
            .loss_and_grads(&x, &y, 1.0 - step as f32 / 6.0, Exec::Parallel)
            .unwrap();
        opt.update(&mut graph, &out.grads, &cfg, cfg.lr);
        assert!(graph.warehouses()[0].cell_view(n).unwrap().iter().all(|&v| v == 0.0));
    }
    let after: Vec<_> = (0..3).map(|i| graph.dynamic(i).map(|d| d.beta.clone())).collect();
    assert_eq!(betas, after);
}

/// Kernel of `layer_id` rebuilt from the cells its one-to-one β points at.
fn tiled(graph: &ModelGraph<f32>, layer_id: &str) -> Vec<f32> {
    let plan = &graph.plans()[0];
    let lp = plan.layer(layer_id).unwrap();
    let blocks = tile_cells(&lp.spec, plan.cell).unwrap();
    let mut kernel = Tensor4::zeros([lp.spec.f, lp.spec.c, lp.spec.k, lp.spec.k]);
    let cell = plan.cell;
    for (i, b) in blocks.iter().enumerate() {
        let r = lp.offset + i;
        if r >= plan.n {
            continue;
        }
        let src = graph.warehouses()[0].cell_view(r).unwrap();
        let mut it = src.iter();
        for f in 0..cell.f {
            for c in 0..cell.c {
                for y in 0..cell.k {
                    for x in 0..cell.k {
                        let off = kernel.offset([b.f0 + f, b.c0 + c, b.r0 + y, b.s0 + x]);
                        kernel.data_mut()[off] = *it.next().unwrap();
                    }
                }
            }
        }
    }
    kernel.into_data()
}

#[test]
fn first_step_at_unit_temperature_matches_plain_net() {
    for manifest in [
        ModelManifest {
            groups: vec![GroupDef::new("w", "1")],
            ..half_manifest()
        },
        half_manifest(),
    ] {
        let mut manifest = manifest;
        manifest.groups[0].attention.logit_init = kernel_warehouse::attention::LogitInit::Zero;
        let data = gen_synthetic::<f32>(&tiny_data()).unwrap();
        let mut kw: ModelGraph<f32> = build_model(&manifest, 5).unwrap();
        let mut plain: ModelGraph<f32> = build_model(&manifest.to_plain(), 6).unwrap();
        plain.copy_matching_params(&kw);
        let ids = ["a", "b"];
        for id in ids {
            plain.set_param(&format!("{id}.kernel"), &tiled(&kw, id)).unwrap();
        }
        let (x, y) = data.batch(&[0, 4, 8, 12]);
        let cfg = TrainConfig::default();
        for graph in [&mut kw, &mut plain] {
            let out = graph.loss_and_grads(&x, &y, 1.0, Exec::Sequential).unwrap();
            let mut opt = Sgd::new(graph);
            opt.update(graph, &out.grads, &cfg, cfg.lr);
        }
        for id in ids {
            let p = plain.param(&format!("{id}.kernel")).unwrap();
            let t = tiled(&kw, id);
            assert!(
                p.iter().zip(&t).all(|(u, v)| u.to_bits() == v.to_bits()),
                "b={} layer {id}",
                manifest.groups[0].b
            );
        }
        for (name, value) in ["stem.kernel", "classifier.w", "a.bn.gamma"].map(|s| (s, plain.param(s).unwrap())) {
            assert_eq!(kw.param(name).unwrap(), value, "{name}");
        }
    }
}
