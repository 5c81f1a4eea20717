//! Built-in presets, compiled into the binary so scenario files can refer to
//! models and clusters by name.

use crate::config::{parse_scenario, ClusterConfig, ConfigError, ModelConfig, Scenario};

macro_rules! preset_dir {
    ($($name:literal => $path:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../../presets/", $path)))),*]
    };
}

pub const MODELS: &[(&str, &str)] = preset_dir! {
    "mixtral-8x7b" => "models/mixtral-8x7b.json",
    "deepseek-r1" => "models/deepseek-r1.json",
    "llama4-maverick" => "models/llama4-maverick.json",
    "llama3.3-70b" => "models/llama3.3-70b.json",
};

pub const CLUSTERS: &[(&str, &str)] = preset_dir! {
    "dgx-h100-nvlink4" => "clusters/dgx-h100-nvlink4.json",
    "dgx-h100-nvlink5" => "clusters/dgx-h100-nvlink5.json",
};

pub const SCENARIOS: &[(&str, &str)] = preset_dir! {
    "mixtral" => "mixtral.json",
    "deepseek-r1" => "deepseek-r1.json",
    "llama4-maverick" => "llama4-maverick.json",
    "llama3.3-70b" => "llama3.3-70b.json",
    "deepseek-r1_ssd_b1024" => "deepseek-r1_ssd_b1024.json",
    "mixtral_hbm_b1" => "mixtral_hbm_b1.json",
};

fn lookup(table: &[(&str, &'static str)], name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    table.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn model(name: &str) -> Result<ModelConfig, ConfigError> {
    let text = lookup(MODELS, name)
        .ok_or_else(|| ConfigError::UnknownPreset { kind: "model", name: name.to_string() })?;
    let model: ModelConfig = serde_json::from_str(text)
        .map_err(|source| ConfigError::Parse { origin: format!("model preset {name}"), source })?;
    model.validate()?;
    Ok(model)
}

pub fn cluster(name: &str) -> Result<ClusterConfig, ConfigError> {
    let text = lookup(CLUSTERS, name)
        .ok_or_else(|| ConfigError::UnknownPreset { kind: "cluster", name: name.to_string() })?;
    let cluster: ClusterConfig = serde_json::from_str(text)
        .map_err(|source| ConfigError::Parse { origin: format!("cluster preset {name}"), source })?;
    cluster.validate()?;
    Ok(cluster)
}

pub fn scenario(name: &str) -> Result<Scenario, ConfigError> {
    let text = lookup(SCENARIOS, name)
        .ok_or_else(|| ConfigError::UnknownPreset { kind: "scenario", name: name.to_string() })?;
    parse_scenario(text, &format!("scenario preset {name}"))
}
