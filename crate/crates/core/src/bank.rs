//! The cell bank: annotated archetypes, their augmented variants, and
//! bank I/O.
//!
//! An augmented bank holds, for every archetype entry `j`, `m` records
//! produced by sampled diffeomorphisms `g_i`. Record `(j, i)` is generated
//! from a substream keyed by `(j, i)` alone, so the set of specs for a
//! smaller `m` is a prefix of the set for a larger `m` — the nesting the
//! covering-radius experiments rely on.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::patch::{CellPatch, LabelChannel, LabelKind, LabelStack, WholeImage};
use crate::rng::{derive, substream};
use crate::tensor_io;
use crate::warp::{
    apply_warp_labels, apply_warp_patch, make_warp, sample_diffeo, AugmentationConfig,
    DiffeoSpec, InterpPolicy,
};

/// One annotated archetype.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry<S: Scalar> {
    pub patch: CellPatch<S>,
    pub labels: LabelStack<S>,
}

/// One augmented variant of an archetype.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedRecord<S: Scalar> {
    /// Index of the source entry (the paper's j).
    pub entry_index: usize,
    /// The deformation that produced this record (the paper's g_i).
    pub spec: DiffeoSpec,
    pub patch: CellPatch<S>,
    pub labels: LabelStack<S>,
}

/// Archetypes plus augmentations, optional cached embeddings, and
/// background exemplars for counting.
#[derive(Clone, Debug, Default)]
pub struct CellBank<S: Scalar> {
    pub entries: Vec<BankEntry<S>>,
    pub augmentations_per_entry: usize,
    /// Records ordered j-major: index of (j, i) is j * m + i.
    pub augmented: Vec<AugmentedRecord<S>>,
    /// Cached embeddings, one row per augmented record.
    pub embeddings: Option<Array2<S>>,
    /// Patches of cell-free regions, for the counting score.
    pub background: Vec<CellPatch<S>>,
    /// Cached embeddings of the background patches.
    pub background_embeddings: Option<Array2<S>>,
}

impl<S: Scalar> CellBank<S> {
    pub fn new(entries: Vec<BankEntry<S>>) -> Result<Self> {
        let bank = CellBank {
            entries,
            augmentations_per_entry: 0,
            augmented: Vec::new(),
            embeddings: None,
            background: Vec::new(),
            background_embeddings: None,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let size = match self.entries.first() {
            Some(e) => e.patch.size(),
            None => return Ok(()),
        };
        for (j, entry) in self.entries.iter().enumerate() {
            if entry.patch.size() != size {
                return Err(Error::dimension(format!(
                    "entry {j} has patch size {}, expected {size}",
                    entry.patch.size()
                )));
            }
            if let Some((h, w)) = entry.labels.spatial_dim() {
                if (h, w) != (size, size) {
                    return Err(Error::dimension(format!(
                        "entry {j} labels are {h}x{w}, patch is {size}x{size}"
                    )));
                }
            }
            entry.labels.validate()?;
        }
        let m = self.augmentations_per_entry;
        if !self.augmented.is_empty() && self.augmented.len() != m * self.entries.len() {
            return Err(Error::dimension(format!(
                "expected {} augmented records, found {}",
                m * self.entries.len(),
                self.augmented.len()
            )));
        }
        for record in &self.augmented {
            if record.entry_index >= self.entries.len() {
                return Err(Error::bounds(format!(
                    "augmented record references entry {}, bank has {}",
                    record.entry_index,
                    self.entries.len()
                )));
            }
            if record.patch.size() != size {
                return Err(Error::dimension(
                    "augmented record patch size differs from entries".to_string(),
                ));
            }
        }
        if let Some(embeddings) = &self.embeddings {
            if embeddings.dim().0 != self.augmented.len() {
                return Err(Error::dimension(format!(
                    "cached embeddings rows {} != augmented records {}",
                    embeddings.dim().0,
                    self.augmented.len()
                )));
            }
        }
        if let Some(embeddings) = &self.background_embeddings {
            if embeddings.dim().0 != self.background.len() {
                return Err(Error::dimension(format!(
                    "cached background embeddings rows {} != background patches {}",
                    embeddings.dim().0,
                    self.background.len()
                )));
            }
        }
        Ok(())
    }

    /// Patch side length, when the bank has entries.
    pub fn patch_size(&self) -> Option<usize> {
        self.entries.first().map(|e| e.patch.size())
    }

    /// Flat record index of augmentation `i` of entry `j`.
    pub fn record_index(&self, entry: usize, augmentation: usize) -> usize {
        entry * self.augmentations_per_entry + augmentation
    }

    /// The finite deformation subset this bank realizes.
    pub fn stored_specs(&self) -> Vec<DiffeoSpec> {
        self.augmented.iter().map(|r| r.spec.clone()).collect()
    }
}

/// Policy used for warping labels during augmentation: zero padding and
/// Jacobian reorientation, so orientation vectors co-rotate with content.
pub fn augmentation_label_policy() -> InterpPolicy {
    let mut policy = InterpPolicy::for_labels();
    policy.reorient_vectors = true;
    policy
}

/// Builds the augmented bank: m records per entry, deterministic per seed.
///
/// Labels are warped by the identical field as their patch. Any cached
/// embeddings are dropped (they no longer cover the records).
pub fn build_augmented_bank<S: Scalar>(
    bank: &CellBank<S>,
    m: usize,
    config: &AugmentationConfig,
    seed: u64,
) -> Result<CellBank<S>> {
    if bank.entries.is_empty() {
        return Err(Error::Config("cannot augment an empty bank".to_string()));
    }
    if m == 0 {
        return Err(Error::argument("augmentations per entry must be >= 1".to_string()));
    }
    config.validate()?;
    let size = bank.patch_size().expect("non-empty bank");
    let root = derive(seed, "augment");
    let label_policy = augmentation_label_policy();
    let mut augmented = Vec::with_capacity(m * bank.entries.len());
    for (j, entry) in bank.entries.iter().enumerate() {
        for i in 0..m {
            let mut rng = substream(root, &format!("{j}/{i}"));
            let spec = sample_diffeo(config, &mut rng)?;
            let field = make_warp::<S>(&spec, size, size)?;
            let patch = apply_warp_patch(&field, &entry.patch, &InterpPolicy::for_images())?;
            let labels = apply_warp_labels(&field, &entry.labels, &label_policy)?;
            augmented.push(AugmentedRecord { entry_index: j, spec, patch, labels });
        }
    }
    let out = CellBank {
        entries: bank.entries.clone(),
        augmentations_per_entry: m,
        augmented,
        embeddings: None,
        background: bank.background.clone(),
        background_embeddings: None,
    };
    out.validate()?;
    Ok(out)
}

/// Samples cell-free patches: centers farther than one patch size from
/// every centroid. Returns fewer than `count` only if candidates run out.
pub fn sample_background_patches<S: Scalar>(
    image: &WholeImage<S>,
    centroids: &[[f64; 2]],
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<CellPatch<S>>> {
    let (h, w) = (image.height() as i64, image.width() as i64);
    if h < patch_size as i64 || w < patch_size as i64 {
        return Err(Error::dimension(format!(
            "image {}x{} smaller than patch size {patch_size}",
            image.width(),
            image.height()
        )));
    }
    let mut rng = substream(seed, "background");
    let mut out = Vec::with_capacity(count);
    let min_dist = patch_size as f64;
    let half = (patch_size / 2) as i64;
    let attempts = count.saturating_mul(2000).max(2000);
    use rand::Rng;
    for _ in 0..attempts {
        if out.len() >= count {
            break;
        }
        let x = rng.gen_range(half..w - half.max(1));
        let y = rng.gen_range(half..h - half.max(1));
        let clear = centroids
            .iter()
            .all(|c| ((c[0] - x as f64).powi(2) + (c[1] - y as f64).powi(2)).sqrt() > min_dist);
        if clear {
            out.push(crate::patch::extract_patch(image, [x, y], patch_size)?);
        }
    }
    if out.is_empty() {
        return Err(Error::argument(
            "no background region farther than one patch size from all centroids".to_string(),
        ));
    }
    Ok(out)
}

const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ChannelMeta {
    name: String,
    kind: LabelKind,
    planes: usize,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    source_id: String,
    center: [f64; 2],
    channels: Vec<ChannelMeta>,
}

#[derive(Serialize, Deserialize)]
struct AugMeta {
    entry_index: usize,
    spec: DiffeoSpec,
    source_id: String,
    center: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    version: u32,
    augmentations_per_entry: usize,
    entries: Vec<EntryMeta>,
    augmented: Vec<AugMeta>,
    background: Vec<[f64; 2]>,
    has_embeddings: bool,
    has_background_embeddings: bool,
}

fn channel_meta<S: Scalar>(labels: &LabelStack<S>) -> Vec<ChannelMeta> {
    labels
        .channels
        .iter()
        .map(|ch| ChannelMeta { name: ch.name.clone(), kind: ch.kind, planes: ch.data.dim().2 })
        .collect()
}

fn save_labels<S: Scalar>(dir: &Path, stem: &str, labels: &LabelStack<S>) -> Result<()> {
    for ch in &labels.channels {
        tensor_io::write_array(&dir.join(format!("{stem}.{}.cwt", ch.name)), &ch.data)?;
    }
    Ok(())
}

fn load_labels<S: Scalar>(dir: &Path, stem: &str, meta: &[ChannelMeta]) -> Result<LabelStack<S>> {
    let channels = meta
        .iter()
        .map(|ch| {
            let data = tensor_io::read_array3::<S>(&dir.join(format!("{stem}.{}.cwt", ch.name)))?;
            Ok(LabelChannel { name: ch.name.clone(), kind: ch.kind, data })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelStack::new(channels)
}

/// Writes a bank as a directory: TOML manifest plus one tensor file per
/// patch, label channel, and embedding matrix.
pub fn save_bank<S: Scalar>(path: &Path, bank: &CellBank<S>) -> Result<()> {
    bank.validate()?;
    std::fs::create_dir_all(path)?;
    let manifest = BankManifest {
        version: BANK_FORMAT_VERSION,
        augmentations_per_entry: bank.augmentations_per_entry,
        entries: bank
            .entries
            .iter()
            .map(|e| EntryMeta {
                source_id: e.patch.source_id.clone(),
                center: e.patch.center,
                channels: channel_meta(&e.labels),
            })
            .collect(),
        augmented: bank
            .augmented
            .iter()
            .map(|r| AugMeta {
                entry_index: r.entry_index,
                spec: r.spec.clone(),
                source_id: r.patch.source_id.clone(),
                center: r.patch.center,
            })
            .collect(),
        background: bank.background.iter().map(|p| p.center).collect(),
        has_embeddings: bank.embeddings.is_some(),
        has_background_embeddings: bank.background_embeddings.is_some(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("cannot encode bank manifest: {e}")))?;
    std::fs::write(path.join("manifest.toml"), text)?;

    for (j, entry) in bank.entries.iter().enumerate() {
        tensor_io::write_array(&path.join(format!("entry_{j:03}.cwt")), &entry.patch.intensities)?;
        save_labels(path, &format!("entry_{j:03}.labels"), &entry.labels)?;
    }
    for (r, record) in bank.augmented.iter().enumerate() {
        tensor_io::write_array(&path.join(format!("aug_{r:04}.cwt")), &record.patch.intensities)?;
        save_labels(path, &format!("aug_{r:04}.labels"), &record.labels)?;
    }
    for (k, patch) in bank.background.iter().enumerate() {
        tensor_io::write_array(&path.join(format!("bg_{k:03}.cwt")), &patch.intensities)?;
    }
    if let Some(embeddings) = &bank.embeddings {
        tensor_io::write_array(&path.join("embeddings.cwt"), embeddings)?;
    }
    if let Some(embeddings) = &bank.background_embeddings {
        tensor_io::write_array(&path.join("bg_embeddings.cwt"), embeddings)?;
    }
    Ok(())
}

/// Loads a bank directory written by [`save_bank`].
pub fn load_bank<S: Scalar>(path: &Path) -> Result<CellBank<S>> {
    let manifest_path = path.join("manifest.toml");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: BankManifest =
        toml::from_str(&text).map_err(|e| Error::format(format!("bad bank manifest: {e}")))?;
    if manifest.version != BANK_FORMAT_VERSION {
        return Err(Error::format(format!(
            "bank format version {} unsupported (expected {BANK_FORMAT_VERSION})",
            manifest.version
        )));
    }
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (j, meta) in manifest.entries.iter().enumerate() {
        let intensities = tensor_io::read_array3::<S>(&path.join(format!("entry_{j:03}.cwt")))?;
        let labels = load_labels(path, &format!("entry_{j:03}.labels"), &meta.channels)?;
        entries.push(BankEntry {
            patch: CellPatch::new(intensities, meta.source_id.clone(), meta.center)?,
            labels,
        });
    }
    let mut augmented = Vec::with_capacity(manifest.augmented.len());
    for (r, meta) in manifest.augmented.iter().enumerate() {
        let intensities = tensor_io::read_array3::<S>(&path.join(format!("aug_{r:04}.cwt")))?;
        let channels = &manifest
            .entries
            .get(meta.entry_index)
            .ok_or_else(|| Error::format("augmented record references missing entry".to_string()))?
            .channels;
        let labels = load_labels(path, &format!("aug_{r:04}.labels"), channels)?;
        augmented.push(AugmentedRecord {
            entry_index: meta.entry_index,
            spec: meta.spec.clone(),
            patch: CellPatch::new(intensities, meta.source_id.clone(), meta.center)?,
            labels,
        });
    }
    let mut background = Vec::with_capacity(manifest.background.len());
    for (k, center) in manifest.background.iter().enumerate() {
        let intensities = tensor_io::read_array3::<S>(&path.join(format!("bg_{k:03}.cwt")))?;
        background.push(CellPatch::new(intensities, "background", *center)?);
    }
    let embeddings = if manifest.has_embeddings {
        Some(tensor_io::read_array2::<S>(&path.join("embeddings.cwt"))?)
    } else {
        None
    };
    let background_embeddings = if manifest.has_background_embeddings {
        Some(tensor_io::read_array2::<S>(&path.join("bg_embeddings.cwt"))?)
    } else {
        None
    };
    let bank = CellBank {
        entries,
        augmentations_per_entry: manifest.augmentations_per_entry,
        augmented,
        embeddings,
        background,
        background_embeddings,
    };
    bank.validate()?;
    Ok(bank)
}
