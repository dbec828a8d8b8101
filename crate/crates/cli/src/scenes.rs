//! Scene files: a TOML document of `[[scene]]` tables, each a [`SceneSpec`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use skpp_core::model::Sample;
use skpp_core::points::{synth_scene, SceneSpec};
use skpp_core::GridSpec;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene: Vec<SceneSpec>,
}

pub fn parse_scenes(text: &str) -> CliResult<Vec<SceneSpec>> {
    let file: SceneFile = toml::from_str(text).map_err(|e| CliError::Data(format!("scene file: {}", e.message())))?;
    if file.scene.is_empty() {
        return Err(CliError::Data("scene file has no [[scene]] entries".into()));
    }
    Ok(file.scene)
}

pub fn load_scenes(path: &Path) -> CliResult<Vec<SceneSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_scenes(&text).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Synthesizes every scene over the grid extent.
pub fn samples(scenes: &[SceneSpec], extent: &GridSpec) -> CliResult<Vec<Sample>> {
    scenes
        .iter()
        .map(|s| {
            let (cloud, truth) = synth_scene(s, extent)?;
            Ok(Sample { cloud, truth })
        })
        .collect()
}
