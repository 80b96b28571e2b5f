//! Built-in ResNet18 manifests.
//!
//! Layer order inside each basic block is `conv1`, `downsample`, `conv2`.
//! The stem is a plain 7×7 convolution. The first two convolutions of each
//! stage after the first (its `conv1` and `downsample`) share the warehouse
//! of the preceding stage.

use num_rational::Ratio;

use crate::manifest::{dyconv_attention, Binding, GroupDef, LayerDef, ModelManifest, INPUT};
use crate::partition::{parse_budget, Budget, KernelSpec, PlanError, ScaleDivisors, StageAssignment};

pub const RESNET18_CLASSES: usize = 1000;

fn conv(id: String, k: usize, c: usize, f: usize, stride: usize) -> LayerDef {
    LayerDef {
        id,
        k,
        c,
        f,
        stride,
        pad: k / 2,
        binding: Binding::Plain,
        input: None,
        residual: None,
        relu: true,
        norm: true,
    }
}

/// Warehouse group of each layer, `None` for the stem.
fn resnet18_layers() -> Vec<(LayerDef, Option<&'static str>)> {
    const GROUPS: [&str; 4] = ["g1", "g2", "g3", "g4"];
    let widths = [64, 128, 256, 512];
    let mut out = vec![(conv("stem".into(), 7, 3, 64, 2), None)];
    let mut prev = "stem".to_string();
    for (s, &w) in widths.iter().enumerate() {
        let stage = s + 1;
        for blk in 0..2 {
            let p = format!("layer{stage}.{blk}");
            let down = stage > 1 && blk == 0;
            let c_in = if down { widths[s - 1] } else { w };
            let head_group = if down { GROUPS[s - 1] } else { GROUPS[s] };
            let mut c1 = conv(format!("{p}.conv1"), 3, c_in, w, if down { 2 } else { 1 });
            c1.input = Some(prev.clone());
            out.push((c1, Some(head_group)));
            let residual = if down {
                let mut ds = conv(format!("{p}.downsample"), 1, c_in, w, 2);
                ds.input = Some(prev.clone());
                ds.relu = false;
                out.push((ds, Some(head_group)));
                format!("{p}.downsample")
            } else {
                prev.clone()
            };
            let mut c2 = conv(format!("{p}.conv2"), 3, w, w, 1);
            c2.input = Some(format!("{p}.conv1"));
            c2.residual = Some(residual);
            out.push((c2, Some(GROUPS[s])));
            prev = format!("{p}.conv2");
        }
    }
    out[0].0.input = Some(INPUT.into());
    out
}

/// Convolution specs in network order with their stage grouping.
pub fn resnet18_specs_and_grouping() -> (Vec<KernelSpec>, Vec<(String, StageAssignment)>) {
    resnet18_layers()
        .into_iter()
        .map(|(l, g)| {
            let a = match g {
                Some(g) => StageAssignment::Group(g.to_string()),
                None => StageAssignment::Excluded,
            };
            (l.spec(), (l.id, a))
        })
        .unzip()
}

/// Standard ResNet18 without warehouses.
pub fn resnet18_baseline() -> ModelManifest {
    ModelManifest {
        classes: RESNET18_CLASSES,
        layers: resnet18_layers().into_iter().map(|(l, _)| l).collect(),
        groups: Vec::new(),
        dyconv: dyconv_attention(),
    }
}

/// Cell divisors of a ResNet18 group. The last group holds only 3×3 kernels
/// and still uses 1×1 cells; budgets below 1 halve the channel dimensions.
pub fn resnet18_divisors(group: &str, b: Budget) -> ScaleDivisors {
    let mut div = if b < Ratio::from_integer(1) {
        ScaleDivisors::half_channels()
    } else {
        ScaleDivisors::default()
    };
    if group == "g4" {
        div.spatial = 3;
    }
    div
}

/// ResNet18 with four warehouses at budget `b`.
pub fn resnet18_kw(b: &str) -> Result<ModelManifest, PlanError> {
    let budget = parse_budget(b)?;
    let mut layers = Vec::new();
    let mut groups: Vec<GroupDef> = Vec::new();
    for (mut l, g) in resnet18_layers() {
        if let Some(g) = g {
            l.binding = Binding::Warehouse(g.to_string());
            if groups.iter().all(|x| x.id != g) {
                let mut def = GroupDef::new(g, b.trim());
                def.scale_divisors = resnet18_divisors(g, budget);
                groups.push(def);
            }
        }
        layers.push(l);
    }
    Ok(ModelManifest {
        classes: RESNET18_CLASSES,
        layers,
        groups,
        dyconv: dyconv_attention(),
    })
}
