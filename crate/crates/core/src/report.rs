//! Plan reports and attention CSV output.

use serde::Serialize;

use crate::accounting::{count_params, verify_budget, ParamBreakdown};
use crate::manifest::{ManifestError, ModelManifest};
use crate::train::AttentionStats;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerReport {
    pub id: String,
    pub kernel: String,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupReport {
    pub group_id: String,
    pub cell: String,
    pub b: String,
    pub m_t: usize,
    pub n: usize,
    pub zero_cell: bool,
    pub warehouse_params: usize,
    pub layers: Vec<LayerReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanReport {
    pub groups: Vec<GroupReport>,
    pub params: ParamBreakdown,
    pub total_m: String,
}

/// Plans every group, checks `n / m_t = b` and counts parameters.
pub fn plan_report(manifest: &ModelManifest) -> Result<PlanReport, ManifestError> {
    let params = count_params(manifest)?;
    let plans = manifest.plans()?;
    let mut groups = Vec::with_capacity(plans.len());
    for p in &plans {
        let b = verify_budget(p).map_err(|source| ManifestError::Plan {
            group: p.group_id.clone(),
            source,
        })?;
        groups.push(GroupReport {
            group_id: p.group_id.clone(),
            cell: p.cell.to_string(),
            b: b.to_string(),
            m_t: p.m_t,
            n: p.n,
            zero_cell: p.zero_cell_enabled,
            warehouse_params: p.warehouse_params(),
            layers: p
                .layers
                .iter()
                .map(|l| LayerReport {
                    id: l.spec.layer_id.clone(),
                    kernel: format!("{}x{}x{}x{}", l.spec.k, l.spec.k, l.spec.c, l.spec.f),
                    m: l.m,
                })
                .collect(),
        });
    }
    Ok(PlanReport {
        groups,
        total_m: params.total_m(),
        params,
    })
}

impl std::fmt::Display for PlanReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "group {}: cell {}  m_t={}  n={}  b=n/m_t={}  zero cell: {}",
                g.group_id,
                g.cell,
                g.m_t,
                g.n,
                g.b,
                if g.zero_cell { "yes" } else { "no" }
            )?;
            for l in &g.layers {
                writeln!(f, "  {:<24} {:<16} m={}", l.id, l.kernel, l.m)?;
            }
        }
        writeln!(f, "parameters:")?;
        write!(f, "{}", self.params)
    }
}

/// `v` with 9 significant digits, trailing zeros trimmed; exact zero
/// prints as `0`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mant = trim(mant.to_string());
        return format!("{mant}e{exp}");
    }
    let decimals = (8 - exp).max(0) as usize;
    trim(format!(
        "{:.*}",
        decimals,
        mant.parse::<f64>().expect("mantissa") * 10f64.powi(exp)
    ))
}

fn trim(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// CSV of one warehouse's mean attention: header `e1..en[,ez]`, one row
/// per mixture, LF line endings.
pub fn attention_csv(stats: &AttentionStats) -> String {
    let m = &stats.mean;
    let n = if stats.zero_cell { m.cols - 1 } else { m.cols };
    let mut header: Vec<String> = (1..=n).map(|j| format!("e{j}")).collect();
    if stats.zero_cell {
        header.push("ez".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..m.rows {
        let row: Vec<String> = m.row(r).iter().map(|&v| format_sig9(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
