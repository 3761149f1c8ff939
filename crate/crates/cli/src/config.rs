//! Run configuration: one TOML document with a section per pipeline
//! stage, environment-variable overrides, and a content hash that names
//! run directories.
//!
//! Every field has a default, so an empty document is a valid config.
//! Unknown keys are rejected. All randomness fans out from `data.seed`
//! through named substreams, one per stage, so two stages never share a
//! random sequence and any stage can be reproduced in isolation.

use std::path::{Path, PathBuf};

use cellwarp::error::{Error, Result};
use cellwarp::theory::BoundConfig;
use cellwarp::invariant::InvariantTrainConfig;
use cellwarp::mapping::MappingTrainConfig;
use cellwarp::pipeline::PipelineConfig;
use cellwarp::warp::AugmentationConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which built-in archetype set seeds the bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeSet {
    /// Square, ellipse, and two stars; no orientation labels.
    Default,
    /// Polarized ellipses carrying orientation labels.
    Oriented,
}

/// Synthetic-data and input-path settings shared by every command.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub archetypes: ArchetypeSet,
    pub patch_size: usize,
    /// Keep only this many archetypes, drawn at random; 0 keeps all.
    pub subset: usize,
    /// Evaluation pairs for `register` and `synth-bench`.
    pub pairs: usize,
    /// Queries per archetype for `match` and `orient`.
    pub queries: usize,
    /// Background exemplars sampled into the bank by `bank-build`.
    pub background_count: usize,
    /// Grid layout of the synthetic scene used when no image is given.
    pub scene_rows: usize,
    pub scene_cols: usize,
    /// Center-to-center spacing of the grid scene, pixels.
    pub scene_spacing: usize,
    /// Direct-optimization settings for the `synth-bench` reference.
    pub oracle_smoothness: f64,
    pub oracle_iterations: usize,
    /// Input artifacts; commands state which ones they need.
    pub bank: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub mapper: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub centroids: Option<PathBuf>,
    pub detections: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            archetypes: ArchetypeSet::Default,
            patch_size: 32,
            subset: 0,
            pairs: 12,
            queries: 4,
            background_count: 8,
            scene_rows: 3,
            scene_cols: 3,
            scene_spacing: 64,
            oracle_smoothness: 0.1,
            oracle_iterations: 120,
            bank: None,
            encoder: None,
            mapper: None,
            image: None,
            centroids: None,
            detections: None,
        }
    }
}

/// Bank construction settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    /// Augmented records per archetype written by `augment`.
    pub augmentations_per_entry: usize,
}

impl Default for BankSection {
    fn default() -> Self {
        BankSection { augmentations_per_entry: 16 }
    }
}

/// Where run directories are created.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub base_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { base_dir: PathBuf::from("runs") }
    }
}

/// The whole config document. Optional sections default in a
/// patch-size-aware way; [`RunConfig::resolve`] materializes them.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub bank: BankSection,
    /// Deformation ranges for bank augmentation and synthetic queries;
    /// defaults to the full ranges for `data.patch_size`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariant_net: Option<InvariantTrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapping_net: Option<MappingTrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theory: Option<BoundConfig>,
    pub output: OutputConfig,
}

/// Stage names used to derive per-stage seeds from the root seed.
pub mod streams {
    pub const SUBSET: &str = "subset";
    pub const BANK_SHAPES: &str = "bank-shapes";
    pub const BACKGROUND_SCENE: &str = "background-scene";
    pub const BACKGROUND: &str = "background";
    pub const AUGMENT: &str = "augment";
    pub const INVARIANT_TRAIN: &str = "invariant-train";
    pub const MAPPING_TRAIN: &str = "mapping-train";
    pub const MATCH_QUERIES: &str = "match-queries";
    pub const PAIRS: &str = "pairs";
    pub const SCENE: &str = "scene";
    pub const ORIENT_QUERIES: &str = "orient-queries";
    pub const THEORY: &str = "theory";
}

/// Derives a per-stage seed and masks it into the i64 range so the
/// snapshot stays representable as a TOML integer.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    cellwarp::rng::derive(root, name) & (i64::MAX as u64)
}

/// A [`RunConfig`] with every optional section made concrete and every
/// stage seed derived from the root. This is what gets hashed, snapshot,
/// and executed.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub data: DataConfig,
    pub bank: BankSection,
    pub augmentation: AugmentationConfig,
    pub invariant_net: InvariantTrainConfig,
    pub mapping_net: MappingTrainConfig,
    pub pipeline: PipelineConfig,
    pub theory: BoundConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Materializes optional sections against `data.patch_size` and fans
    /// the root seed out into the per-stage seed fields.
    pub fn resolve(&self) -> Result<Resolved> {
        let n = self.data.patch_size;
        if n == 0 {
            return Err(Error::Config("data.patch_size must be positive".to_string()));
        }
        let root = self.data.seed;
        let augmentation =
            self.augmentation.clone().unwrap_or_else(|| AugmentationConfig::for_patch(n));
        let mut invariant_net = self.invariant_net.clone().unwrap_or_else(|| {
            InvariantTrainConfig { augmentation: augmentation.clone(), ..Default::default() }
        });
        invariant_net.seed = stream_seed(root, streams::INVARIANT_TRAIN);
        let mut mapping_net =
            self.mapping_net.clone().unwrap_or_else(|| MappingTrainConfig::for_patch(n));
        mapping_net.seed = stream_seed(root, streams::MAPPING_TRAIN);
        let mut pipeline =
            self.pipeline.clone().unwrap_or_else(|| PipelineConfig::for_patch(n));
        pipeline.seed = stream_seed(root, streams::SCENE);
        let mut theory = self.theory.clone().unwrap_or_default();
        theory.seed = stream_seed(root, streams::THEORY);

        augmentation.validate()?;
        invariant_net.validate()?;
        mapping_net.validate()?;
        pipeline.validate()?;
        theory.validate()?;
        let resolved = Resolved {
            data: self.data.clone(),
            bank: self.bank.clone(),
            augmentation,
            invariant_net,
            mapping_net,
            pipeline,
            theory,
            output: self.output.clone(),
        };
        Ok(resolved)
    }
}

impl Resolved {
    /// The config as a complete document: what resolve() produced,
    /// serialized with every section present.
    pub fn to_document(&self) -> RunConfig {
        RunConfig {
            data: self.data.clone(),
            bank: self.bank.clone(),
            augmentation: Some(self.augmentation.clone()),
            invariant_net: Some(self.invariant_net.clone()),
            mapping_net: Some(self.mapping_net.clone()),
            pipeline: Some(self.pipeline.clone()),
            theory: Some(self.theory.clone()),
            output: self.output.clone(),
        }
    }

    /// Canonical TOML snapshot of the effective config.
    pub fn snapshot_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.to_document())
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of the canonical snapshot. Two documents that parse to
    /// the same effective config hash identically regardless of key
    /// order in the source file.
    pub fn hash(&self) -> Result<String> {
        let text = self.snapshot_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    pub fn root_seed(&self) -> u64 {
        self.data.seed
    }
}

/// Environment prefix for config overrides:
/// `CELLWARP_<SECTION>__<KEY>[__<SUBKEY>...]`, value in TOML syntax.
pub const ENV_PREFIX: &str = "CELLWARP_";

/// Loads a config document from the file (all defaults when `None`),
/// then applies `CELLWARP_*` environment overrides. Command-line flags
/// are layered on top by the caller.
pub fn load_config(path: Option<&Path>, env: &[(String, String)]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    apply_env_overrides(&mut table, env)?;
    let doc = toml::to_string(&table)
        .map_err(|e| Error::Config(format!("cannot re-serialize config: {e}")))?;
    toml::from_str::<RunConfig>(&doc).map_err(|e| Error::Config(e.to_string()))
}

/// Applies `CELLWARP_*` overrides onto the raw TOML table. Double
/// underscores separate nesting levels; keys are lowercased; values are
/// parsed as TOML, falling back to a plain string.
fn apply_env_overrides(table: &mut toml::Table, env: &[(String, String)]) -> Result<()> {
    let mut overrides: Vec<(&String, &String)> =
        env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).map(|(k, v)| (k, v)).collect();
    // Apply in name order so the layering is deterministic.
    overrides.sort();
    for (key, raw) in overrides {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|part| part.to_ascii_lowercase())
            .collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override name {key}")));
        }
        let value = parse_toml_value(raw);
        insert_at_path(table, &path, value)
            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
    }
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert_at_path(
    table: &mut toml::Table,
    path: &[String],
    value: toml::Value,
) -> std::result::Result<(), String> {
    match path {
        [] => Err("empty key path".to_string()),
        [last] => {
            table.insert(last.clone(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let entry = table
                .entry(head.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry.as_table_mut() {
                Some(child) => insert_at_path(child, rest, value),
                None => Err(format!("{head} is not a table")),
            }
        }
    }
}
