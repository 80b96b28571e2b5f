//! Network description: layers, their wiring and the warehouse groups.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionFn, BetaStrategy, LogitInit};
use crate::partition::{parse_budget, plan_partition, KernelSpec, PartitionPlan, PlanError, ScaleDivisors};

/// Source name that refers to the network input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("model has no layers")]
    Empty,
    #[error("duplicate layer id `{0}`")]
    DuplicateLayer(String),
    #[error("layer `{layer}`: unknown {what} `{name}`")]
    UnknownRef {
        layer: String,
        what: &'static str,
        name: String,
    },
    #[error("layer `{layer}`: expects {expected} input channels, source `{source_id}` provides {got}")]
    Channels {
        layer: String,
        source_id: String,
        expected: usize,
        got: usize,
    },
    #[error("layer `{layer}`: {msg}")]
    Invalid { layer: String, msg: String },
    #[error("group `{0}` has no bound layers")]
    UnusedGroup(String),
    #[error("duplicate group id `{0}`")]
    DuplicateGroup(String),
    #[error("group `{group}`: {source}")]
    Plan {
        group: String,
        #[source]
        source: PlanError,
    },
}

/// How a convolution gets its kernel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Binding {
    Plain,
    /// Vanilla dynamic convolution over `n` full kernels.
    Dyconv(usize),
    /// Kernel assembled from the named warehouse group.
    Warehouse(String),
}

impl std::fmt::Display for Binding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Plain => write!(f, "plain"),
            Self::Dyconv(n) => write!(f, "dyconv:{n}"),
            Self::Warehouse(g) => write!(f, "{g}"),
        }
    }
}

impl std::str::FromStr for Binding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "plain" || s.is_empty() {
            return Ok(Self::Plain);
        }
        if let Some(n) = s.strip_prefix("dyconv:") {
            return match n.parse::<usize>() {
                Ok(n) if n > 0 => Ok(Self::Dyconv(n)),
                _ => Err(format!("bad dyconv binding `{s}`")),
            };
        }
        Ok(Self::Warehouse(s.to_string()))
    }
}

impl Serialize for Binding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Binding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn plain() -> Binding {
    Binding::Plain
}

/// One convolution. Its output is `act(norm(conv(source)) + residual)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDef {
    pub id: String,
    pub k: usize,
    pub c: usize,
    pub f: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default = "plain")]
    pub binding: Binding,
    /// Source layer; the previous layer when absent, [`INPUT`] for the image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    /// Layer (or [`INPUT`]) whose output is added before the activation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<String>,
    #[serde(default = "yes")]
    pub relu: bool,
    #[serde(default = "yes")]
    pub norm: bool,
}

impl LayerDef {
    pub fn spec(&self) -> KernelSpec {
        KernelSpec::new(self.id.clone(), self.k, self.c, self.f, self.stride, self.pad)
    }
}

/// Attention module settings shared by warehouse groups and dyconv layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionDef {
    #[serde(default)]
    pub function: AttentionFn,
    #[serde(default = "sixteen")]
    pub reduction: usize,
    #[serde(default = "sixteen")]
    pub min_hidden: usize,
    #[serde(default)]
    pub logit_init: LogitInit,
}

fn sixteen() -> usize {
    16
}

impl Default for AttentionDef {
    fn default() -> Self {
        Self {
            function: AttentionFn::Caf,
            reduction: 16,
            min_hidden: 16,
            logit_init: LogitInit::default(),
        }
    }
}

fn one_to_one() -> String {
    BetaStrategy::OneToOne.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDef {
    pub id: String,
    /// Budget as a rational string such as "1/2".
    pub b: String,
    #[serde(default)]
    pub scale_divisors: ScaleDivisors,
    #[serde(default = "one_to_one")]
    pub beta: String,
    #[serde(default)]
    pub attention: AttentionDef,
}

impl GroupDef {
    pub fn new(id: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            b: b.into(),
            scale_divisors: ScaleDivisors::default(),
            beta: one_to_one(),
            attention: AttentionDef::default(),
        }
    }
}

/// Dyconv attention defaults: softmax over the kernels.
pub fn dyconv_attention() -> AttentionDef {
    AttentionDef {
        function: AttentionFn::Softmax,
        ..AttentionDef::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub classes: usize,
    pub layers: Vec<LayerDef>,
    #[serde(default)]
    pub groups: Vec<GroupDef>,
    /// Attention settings of `dyconv` layers.
    #[serde(default = "dyconv_attention")]
    pub dyconv: AttentionDef,
}

/// Resolved wiring for one layer: source and residual as layer indices
/// (`None` for the network input).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub source: Option<usize>,
    pub residual: Option<Option<usize>>,
}

impl ModelManifest {
    /// Checks ids, references and channel counts; returns per-layer wiring.
    pub fn wiring(&self) -> Result<Vec<Wiring>, ManifestError> {
        if self.layers.is_empty() {
            return Err(ManifestError::Empty);
        }
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.layers.len());
        let lookup = |index: &BTreeMap<&str, usize>, layer: &str, what, name: &str| {
            if name == INPUT {
                return Ok(None);
            }
            index
                .get(name)
                .copied()
                .map(Some)
                .ok_or_else(|| ManifestError::UnknownRef {
                    layer: layer.to_string(),
                    what,
                    name: name.to_string(),
                })
        };
        for (i, l) in self.layers.iter().enumerate() {
            l.spec().validate().map_err(|e| ManifestError::Invalid {
                layer: l.id.clone(),
                msg: e.to_string(),
            })?;
            if l.id == INPUT || index.contains_key(l.id.as_str()) {
                return Err(ManifestError::DuplicateLayer(l.id.clone()));
            }
            let source = match &l.input {
                Some(s) => lookup(&index, &l.id, "input", s)?,
                None => i.checked_sub(1),
            };
            let channels = |src: Option<usize>| src.map_or(self.layers[0].c, |j| self.layers[j].f);
            let src_name = |src: Option<usize>| src.map_or(INPUT.to_string(), |j| self.layers[j].id.clone());
            if channels(source) != l.c {
                return Err(ManifestError::Channels {
                    layer: l.id.clone(),
                    source_id: src_name(source),
                    expected: l.c,
                    got: channels(source),
                });
            }
            let residual = match &l.residual {
                Some(r) => {
                    let r = lookup(&index, &l.id, "residual", r)?;
                    if channels(r) != l.f {
                        return Err(ManifestError::Channels {
                            layer: l.id.clone(),
                            source_id: src_name(r),
                            expected: l.f,
                            got: channels(r),
                        });
                    }
                    Some(r)
                }
                None => None,
            };
            index.insert(&l.id, i);
            out.push(Wiring { source, residual });
        }
        if self.classes == 0 {
            return Err(ManifestError::Invalid {
                layer: "classifier".into(),
                msg: "classes must be positive".into(),
            });
        }
        Ok(out)
    }

    /// Partition plans for every group, in group order.
    pub fn plans(&self) -> Result<Vec<PartitionPlan>, ManifestError> {
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if !seen.insert(g.id.as_str()) {
                return Err(ManifestError::DuplicateGroup(g.id.clone()));
            }
        }
        for l in &self.layers {
            if let Binding::Warehouse(g) = &l.binding {
                if !seen.contains(g.as_str()) {
                    return Err(ManifestError::UnknownRef {
                        layer: l.id.clone(),
                        what: "group",
                        name: g.clone(),
                    });
                }
            }
        }
        self.groups
            .iter()
            .map(|g| {
                let specs: Vec<KernelSpec> = self
                    .layers
                    .iter()
                    .filter(|l| l.binding == Binding::Warehouse(g.id.clone()))
                    .map(LayerDef::spec)
                    .collect();
                if specs.is_empty() {
                    return Err(ManifestError::UnusedGroup(g.id.clone()));
                }
                let plan_err = |source| ManifestError::Plan {
                    group: g.id.clone(),
                    source,
                };
                let b = parse_budget(&g.b).map_err(plan_err)?;
                plan_partition(&g.id, &specs, b, g.scale_divisors).map_err(plan_err)
            })
            .collect()
    }

    /// Validates the whole manifest.
    pub fn validate(&self) -> Result<(), ManifestError> {
        self.wiring()?;
        self.plans()?;
        Ok(())
    }

    /// 64-bit digest of the canonical JSON form.
    pub fn topology_hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Same network with every binding replaced by `plain`.
    pub fn to_plain(&self) -> Self {
        let mut m = self.clone();
        m.layers.iter_mut().for_each(|l| l.binding = Binding::Plain);
        m.groups.clear();
        m
    }

    pub fn group(&self, id: &str) -> Option<&GroupDef> {
        self.groups.iter().find(|g| g.id == id)
    }
}
