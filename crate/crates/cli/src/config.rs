//! Run configuration: JSON file keys merged with command-line overrides.
//! Unknown keys are rejected, and every output artifact embeds the resolved
//! form verbatim.

use serde::{Deserialize, Serialize};

use casp_core::data::DatasetSpec;
use casp_core::mixup::MixupConfig;
use casp_core::plan::Protocol;
use casp_core::train::{ComponentToggles, ExperimentConfig, TrainConfig};
use casp_core::vit::VitConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub protocol: ProtocolSection,
    pub pretrain: PhaseSection,
    pub train: PhaseSection,
    pub prompts: PromptSection,
    pub mtm: MtmSection,
    pub toggles: TogglesSection,
    pub plan_seed: u64,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            protocol: ProtocolSection::default(),
            pretrain: PhaseSection {
                epochs: 12,
                learning_rate: 3e-3,
                ..PhaseSection::default()
            },
            train: PhaseSection::default(),
            prompts: PromptSection::default(),
            mtm: MtmSection::default(),
            toggles: TogglesSection::default(),
            plan_seed: 1,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub classes: u32,
    pub per_class: u32,
    pub size: u16,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            classes: d.classes,
            per_class: d.per_class,
            size: d.size,
            seed: d.seed,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            per_class: self.per_class,
            size: self.size,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let v = VitConfig::micro();
        Self {
            image_size: v.image_size,
            patch_size: v.patch_size,
            channels: v.channels,
            dim: v.dim,
            depth: v.depth,
            heads: v.heads,
            mlp_ratio: v.mlp_ratio,
        }
    }
}

impl ModelSection {
    pub fn vit(&self) -> VitConfig {
        VitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub pretrain: u32,
    pub base: u32,
    pub sessions: u32,
    pub way: u32,
    pub shot: u32,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = Protocol::default();
        Self {
            pretrain: p.pretrain,
            base: p.base,
            sessions: p.sessions,
            way: p.way,
            shot: p.shot,
        }
    }
}

impl ProtocolSection {
    pub fn protocol(&self) -> Protocol {
        Protocol {
            pretrain: self.pretrain,
            base: self.base,
            sessions: self.sessions,
            way: self.way,
            shot: self.shot,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for PhaseSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: t.seed,
        }
    }
}

impl PhaseSection {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub dropout_rate: f64,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            dropout_rate: casp_core::prompts::DEFAULT_PROMPT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MtmSection {
    pub enabled: bool,
    pub split_layer: usize,
    pub beta_alpha: f64,
    pub lambda_mix: f64,
}

impl Default for MtmSection {
    fn default() -> Self {
        Self {
            enabled: true,
            split_layer: 0,
            beta_alpha: 1.0,
            lambda_mix: 0.5,
        }
    }
}

impl MtmSection {
    pub fn mixup(&self) -> MixupConfig {
        MixupConfig {
            enabled: self.enabled,
            split_layer: self.split_layer,
            beta_alpha: self.beta_alpha,
            lambda_mix: self.lambda_mix,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TogglesSection {
    pub cagp: bool,
    pub pcap: bool,
    pub cdap: bool,
}

impl Default for TogglesSection {
    fn default() -> Self {
        Self {
            cagp: true,
            pcap: true,
            cdap: true,
        }
    }
}

impl TogglesSection {
    pub fn toggles(&self) -> ComponentToggles {
        ComponentToggles {
            cagp: self.cagp,
            pcap: self.pcap,
            cdap: self.cdap,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Resolved config as canonical JSON, embedded into every artifact.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            vit: self.model.vit(),
            pretrain: self.pretrain.train(),
            base: self.train.train(),
            toggles: self.toggles.toggles(),
            mixup: self.mtm.mixup(),
            prompt_dropout: self.prompts.dropout_rate,
            plan_seed: self.plan_seed,
        }
    }

    /// Apply a `--toggle cagp=off,mtm=on` style override list.
    pub fn apply_toggles(&mut self, spec: &str) -> Result<(), String> {
        for part in spec.split(',').filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| format!("toggle `{part}` must look like name=on|off"))?;
            let on = match value.trim() {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                other => return Err(format!("toggle value `{other}` must be on or off")),
            };
            match name.trim() {
                "cagp" => self.toggles.cagp = on,
                "pcap" => self.toggles.pcap = on,
                "cdap" => self.toggles.cdap = on,
                "mtm" => self.mtm.enabled = on,
                other => return Err(format!("unknown toggle `{other}`")),
            }
        }
        Ok(())
    }
}
