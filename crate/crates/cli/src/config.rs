//! Run configuration: one TOML document with a section per stage, patched by
//! `section.key=value` overrides before it is deserialized.

use std::path::Path;

use aumn::data::{Stream, SyntheticSpec};
use aumn::inference::InferenceConfig;
use aumn::losses::{Ablation, LossWeights};
use aumn::model::ModelDims;
use aumn::training::TrainConfig;
use aumn::{Error, Result};
use serde::{Deserialize, Serialize};

/// Network shape minus the dataset-dependent input width and class count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub templates: usize,
    pub key_reduction: usize,
    pub bottleneck: usize,
    pub kernel: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::new(1, 1);
        Self {
            embed_dim: d.embed_dim,
            templates: d.templates,
            key_reduction: d.key_reduction,
            bottleneck: d.bottleneck,
            kernel: d.kernel,
        }
    }
}

impl ModelSection {
    pub fn dims(&self, input_dim: usize, classes: usize) -> ModelDims {
        ModelDims {
            input_dim,
            embed_dim: self.embed_dim,
            classes,
            templates: self.templates,
            key_reduction: self.key_reduction,
            bottleneck: self.bottleneck,
            kernel: self.kernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub diversity: bool,
    pub homogeneity: bool,
    pub sparsity: bool,
    pub self_attention: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: t.seed,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            diversity: t.ablation.diversity,
            homogeneity: t.ablation.homogeneity,
            sparsity: t.ablation.sparsity,
            self_attention: t.ablation.self_attention,
        }
    }
}

impl TrainSection {
    pub fn ablation(&self) -> Ablation {
        Ablation {
            diversity: self.diversity,
            homogeneity: self.homogeneity,
            sparsity: self.sparsity,
            self_attention: self.self_attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub rgb: LossWeights,
    pub flow: LossWeights,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            rgb: LossWeights::RGB,
            flow: LossWeights::FLOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Training seeds each grid row is averaged over.
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub inference: InferenceConfig,
    pub synthetic: SyntheticSpec,
    pub ablation: AblationSection,
    pub runtime: RuntimeSection,
}

impl RunConfig {
    pub fn train_config(&self, stream: Stream) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: t.seed,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            weights: match stream {
                Stream::Rgb => self.loss.rgb,
                Stream::Flow => self.loss.flow,
            },
            ablation: t.ablation(),
        }
    }

    /// Checks every section that does not depend on a dataset.
    pub fn validate(&self) -> Result<()> {
        self.model.dims(1, 1).validate()?;
        for s in Stream::ALL {
            self.train_config(s).validate()?;
        }
        self.inference.validate()?;
        self.synthetic.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::invalid("ablation", "seeds must not be empty"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table =
            toml::from_str(text).map_err(|e| Error::invalid("config", e.message().to_string()))?;
        let mut doc = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut doc, file);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

/// Overlays `top` onto `base`, recursing into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value when possible
/// and taken as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let bad = |reason: &str| Error::invalid("override", format!("{spec:?}: {reason}"));
    let (key, raw) = spec.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| bad("key path crosses a non-table value"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
