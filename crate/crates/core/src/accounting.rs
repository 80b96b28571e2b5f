//! Exact parameter counts and budget checks.

use num_rational::Ratio;
use serde::Serialize;

use crate::attention::hidden_width;
use crate::manifest::{AttentionDef, Binding, ManifestError, ModelManifest};
use crate::model::ModelGraph;
use crate::partition::{Budget, PartitionPlan, PlanError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub warehouse_cells: usize,
    pub attention_modules: usize,
    /// Static and dyconv kernels.
    pub plain_layers: usize,
    /// Normalization scale and shift.
    pub normalization: usize,
    pub classifier: usize,
    pub total: usize,
}

impl ParamBreakdown {
    /// Total in millions, rounded to two decimals.
    pub fn total_m(&self) -> String {
        format_m(self.total)
    }

    fn finish(mut self) -> Self {
        self.total =
            self.warehouse_cells + self.attention_modules + self.plain_layers + self.normalization + self.classifier;
        self
    }
}

pub fn format_m(count: usize) -> String {
    format!("{:.2}M", count as f64 / 1e6)
}

impl std::fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "  warehouse cells    {:>12}", self.warehouse_cells)?;
        writeln!(f, "  attention modules  {:>12}", self.attention_modules)?;
        writeln!(f, "  plain layers       {:>12}", self.plain_layers)?;
        writeln!(f, "  normalization      {:>12}", self.normalization)?;
        writeln!(f, "  classifier         {:>12}", self.classifier)?;
        write!(f, "  total              {:>12} ({})", self.total, self.total_m())
    }
}

fn attention_count(c: usize, def: &AttentionDef, rows: usize, cols: usize) -> usize {
    let h = hidden_width(c, def.reduction, def.min_hidden);
    h * c + h + rows * cols * h + rows * cols
}

/// Counts parameters from the manifest alone.
pub fn count_params(manifest: &ModelManifest) -> Result<ParamBreakdown, ManifestError> {
    manifest.wiring()?;
    let plans = manifest.plans()?;
    let mut out = ParamBreakdown {
        warehouse_cells: plans.iter().map(PartitionPlan::warehouse_params).sum(),
        ..Default::default()
    };
    for l in &manifest.layers {
        let vol = l.k * l.k * l.c * l.f;
        match &l.binding {
            Binding::Plain => out.plain_layers += vol,
            Binding::Dyconv(n) => {
                out.plain_layers += n * vol;
                out.attention_modules += attention_count(l.c, &manifest.dyconv, 1, *n);
            }
            Binding::Warehouse(g) => {
                let gi = manifest
                    .groups
                    .iter()
                    .position(|d| &d.id == g)
                    .expect("validated group");
                let plan = &plans[gi];
                let m = plan.layer(&l.id).expect("layer in plan").m;
                out.attention_modules += attention_count(l.c, &manifest.groups[gi].attention, m, plan.q());
            }
        }
        if l.norm {
            out.normalization += 2 * l.f;
        }
    }
    let last = manifest.layers.last().expect("validated non-empty").f;
    out.classifier = last * manifest.classes + manifest.classes;
    Ok(out.finish())
}

/// Counts the parameters actually allocated by a graph.
pub fn count_graph<T: Scalar>(graph: &ModelGraph<T>) -> ParamBreakdown {
    let mut out = ParamBreakdown::default();
    for s in graph.slots() {
        let name = s.name.as_str();
        let bucket = if name.starts_with("classifier.") {
            &mut out.classifier
        } else if name.contains(".attn.") {
            &mut out.attention_modules
        } else if name.contains(".bn.") {
            &mut out.normalization
        } else if name.contains(".kernel") {
            &mut out.plain_layers
        } else {
            &mut out.warehouse_cells
        };
        *bucket += s.len;
    }
    out.finish()
}

/// Realized budget `n / m_t` of a plan; errors unless it equals the
/// configured `b`.
pub fn verify_budget(plan: &PartitionPlan) -> Result<Budget, PlanError> {
    let actual = Ratio::new(plan.n as u64, plan.m_t as u64);
    if actual != plan.b {
        return Err(PlanError::BudgetViolation {
            group: plan.group_id.clone(),
            actual,
            expected: plan.b,
        });
    }
    Ok(actual)
}
