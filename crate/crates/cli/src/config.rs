use std::path::{Path, PathBuf};

use anyhow::Context;
use planksynth_core::pcigen::{PciConfig, SyntheticPools};
use planksynth_core::tiler::TilePlan;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Where source images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolSource {
    /// Procedural backgrounds and individuals.
    Synthetic(SyntheticPools),
    /// A directory of background PNGs and an individuals manifest.
    Files { backgrounds: PathBuf, individuals: PathBuf },
}

impl Default for PoolSource {
    fn default() -> Self {
        PoolSource::Synthetic(SyntheticPools::default())
    }
}

/// `generate --config` file. Relative paths resolve against the file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub pci: PciConfig,
    pub pools: PoolSource,
    /// Taxonomy JSON; the built-in table when absent.
    pub taxonomy: Option<PathBuf>,
    pub count: Option<u64>,
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Directory that relative paths inside `file` resolve against.
pub(crate) fn base_dir(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct TileEntry {
    pub x: u32,
    pub y: u32,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<String>,
}

/// `tiles.json`: the plan plus one entry per tile, paths relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct TileManifest {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    pub plan: TilePlan,
    pub tiles: Vec<TileEntry>,
}
