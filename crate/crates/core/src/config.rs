//! TOML run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::manifest::{dyconv_attention, AttentionDef, GroupDef, LayerDef, ModelManifest};
use crate::partition::PlanError;
use crate::preset::{resnet18_baseline, resnet18_kw};
use crate::train::{DataConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("preset `{0}` does not accept an explicit layer list")]
    PresetWithLayers(String),
    #[error("preset budget: {0}")]
    PresetBudget(#[from] PlanError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Built-in network; currently only `resnet18`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Defaults to the number of data classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default)]
    pub layers: Vec<LayerDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dyconv: Option<AttentionDef>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarehouseSection {
    /// Budget applied to every group; selects the warehouse variant of a
    /// preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    #[serde(default)]
    pub groups: Vec<GroupDef>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub warehouse: WarehouseSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Resolves presets and overrides into a manifest. Validation is left
    /// to the caller.
    pub fn manifest(&self) -> Result<ModelManifest, ConfigError> {
        let mut m = match self.model.preset.as_deref() {
            Some("resnet18") => {
                if !self.model.layers.is_empty() {
                    return Err(ConfigError::PresetWithLayers("resnet18".into()));
                }
                match &self.warehouse.b {
                    Some(b) => resnet18_kw(b)?,
                    None => resnet18_baseline(),
                }
            }
            Some(other) => return Err(ConfigError::UnknownPreset(other.into())),
            None => {
                let mut groups = self.warehouse.groups.clone();
                if let Some(b) = &self.warehouse.b {
                    groups.iter_mut().for_each(|g| g.b = b.clone());
                }
                ModelManifest {
                    classes: self.data.classes,
                    layers: self.model.layers.clone(),
                    groups,
                    dyconv: dyconv_attention(),
                }
            }
        };
        if let Some(c) = self.model.classes {
            m.classes = c;
        }
        if let Some(d) = &self.model.dyconv {
            m.dyconv = d.clone();
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Binding;

    const TOY: &str = r#"
[model]
[[model.layers]]
id = "stem"
k = 3
c = 3
f = 8
pad = 1

[[model.layers]]
id = "a"
k = 3
c = 8
f = 8
pad = 1
binding = "w"

[[warehouse.groups]]
id = "w"
b = "2"
scale_divisors = { c = 2 }
beta = "one_to_one"
attention = { function = "caf", logit_init = { kind = "zero" } }

[train]
epochs = 2

[data]
classes = 4
"#;

    #[test]
    fn parses_explicit_layers() {
        let cfg = Config::from_toml(TOY).unwrap();
        let m = cfg.manifest().unwrap();
        assert_eq!(m.classes, 4);
        assert_eq!(m.layers[1].binding, Binding::Warehouse("w".into()));
        assert_eq!(m.layers[0].stride, 1);
        assert_eq!(m.groups[0].scale_divisors.c, 2);
        assert_eq!(m.groups[0].scale_divisors.f, 1);
        assert_eq!(m.groups[0].attention.logit_init, crate::attention::LogitInit::Zero);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, 0.05);
        m.validate().unwrap();
    }

    #[test]
    fn budget_override_and_presets() {
        let mut cfg = Config::from_toml(TOY).unwrap();
        cfg.warehouse.b = Some("4".into());
        assert_eq!(cfg.manifest().unwrap().groups[0].b, "4");

        let cfg = Config::from_toml("[model]\npreset = \"resnet18\"\n[warehouse]\nb = \"1/2\"\n").unwrap();
        let m = cfg.manifest().unwrap();
        assert_eq!(m.groups.len(), 4);
        assert_eq!(m.classes, 1000);
        let base = Config::from_toml("[model]\npreset = \"resnet18\"\n")
            .unwrap()
            .manifest()
            .unwrap();
        assert!(base.groups.is_empty());
    }

    #[test]
    fn errors() {
        assert!(matches!(Config::from_toml("[model"), Err(ConfigError::Parse(_))));
        assert!(matches!(Config::from_toml("[bogus]\n"), Err(ConfigError::Parse(_))));
        let cfg = Config::from_toml("[model]\npreset = \"vgg\"\n").unwrap();
        assert!(matches!(cfg.manifest(), Err(ConfigError::UnknownPreset(_))));
        let empty = Config::from_toml("").unwrap().manifest().unwrap();
        assert!(empty.layers.is_empty());
    }
}
