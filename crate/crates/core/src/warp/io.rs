//! Warp field serialization: binary displacement tensor + TOML sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DiffeoSpec, WarpField};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor_io;

/// Sidecar metadata stored next to a serialized field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub version: u32,
    /// Generating spec, when the field came from [`super::make_warp`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DiffeoSpec>,
    /// Seed of the sampler draw that produced the spec, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl FieldMeta {
    pub fn new(spec: Option<DiffeoSpec>, seed: Option<u64>) -> Self {
        FieldMeta { version: 1, spec, seed }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".toml");
    PathBuf::from(os)
}

/// Writes the displacement tensor to `path` and metadata to `path.toml`.
pub fn save_field<S: Scalar>(path: &Path, field: &WarpField<S>, meta: &FieldMeta) -> Result<()> {
    tensor_io::write_array(path, field.displacement())?;
    let text = toml::to_string_pretty(meta)
        .map_err(|e| Error::format(format!("cannot encode field metadata: {e}")))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Reads a displacement tensor saved by [`save_field`].
pub fn load_field<S: Scalar>(path: &Path) -> Result<WarpField<S>> {
    let arr = tensor_io::read_array3::<S>(path)?;
    WarpField::new(arr)
}

/// Reads the sidecar metadata written by [`save_field`].
pub fn load_field_meta(path: &Path) -> Result<FieldMeta> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    toml::from_str(&text).map_err(|e| Error::format(format!("bad field metadata: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{make_warp, DiffeoKind};

    #[test]
    fn field_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.cwt");
        let spec = DiffeoSpec {
            kind: DiffeoKind::DirectionalStretch { factor: 1.2, direction: [0.6, 0.8] },
            center: [7.5, 7.5],
        };
        let field: WarpField<f32> = make_warp(&spec, 16, 16).unwrap();
        save_field(&path, &field, &FieldMeta::new(Some(spec.clone()), Some(42))).unwrap();

        let back: WarpField<f32> = load_field(&path).unwrap();
        assert_eq!(field.displacement(), back.displacement());

        let meta = load_field_meta(&path).unwrap();
        assert_eq!(meta.spec, Some(spec));
        assert_eq!(meta.seed, Some(42));
    }

    #[test]
    fn meta_without_spec_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.cwt");
        let field = WarpField::<f32>::zeros(4, 4);
        save_field(&path, &field, &FieldMeta::new(None, None)).unwrap();
        let meta = load_field_meta(&path).unwrap();
        assert_eq!(meta, FieldMeta::new(None, None));
    }
}
