//! Annotated cell patches, label stacks, and whole images.
//!
//! A [`CellPatch`] is a square H×W×C intensity crop in [0,1]. Its
//! [`LabelStack`] carries aligned pixel-level annotation channels: binary
//! masks, orientation gradients (per-pixel unit vectors), or generic
//! scalars. A [`WholeImage`] is an arbitrary-sized image patches are cut
//! from, optionally with ground-truth centroids and labels for evaluation.

use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{cast, Scalar};

/// A square intensity patch with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct CellPatch<S: Scalar> {
    /// H×W×C intensities, clamped to [0,1].
    pub intensities: Array3<S>,
    /// Identifier of the source image this patch was cut from.
    pub source_id: String,
    /// (x, y) pixel coordinates of the patch center in the source image.
    pub center: [f64; 2],
}

impl<S: Scalar> CellPatch<S> {
    /// Builds a patch, checking squareness and clamping values to [0,1].
    pub fn new(intensities: Array3<S>, source_id: impl Into<String>, center: [f64; 2]) -> Result<Self> {
        let (h, w, _c) = intensities.dim();
        if h != w {
            return Err(Error::dimension(format!("patch must be square, got {h}x{w}")));
        }
        if h == 0 {
            return Err(Error::dimension("patch must be non-empty".to_string()));
        }
        let intensities = intensities.mapv(|v| {
            if v.is_finite() {
                v.max(S::zero()).min(S::one())
            } else {
                S::zero()
            }
        });
        Ok(CellPatch { intensities, source_id: source_id.into(), center })
    }

    /// Side length in pixels.
    pub fn size(&self) -> usize {
        self.intensities.dim().0
    }

    /// Channel count.
    pub fn channels(&self) -> usize {
        self.intensities.dim().2
    }

    /// Channel-averaged intensities in `(1, h, w)` layout, the input
    /// convention of the networks.
    pub fn to_gray_chw(&self) -> Array3<S> {
        let (h, w, c) = self.intensities.dim();
        let scale = S::one() / crate::num::cast::<S>(c as f64);
        Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            let mut acc = S::zero();
            for ci in 0..c {
                acc += self.intensities[[y, x, ci]];
            }
            acc * scale
        })
    }
}

/// What an annotation channel's values mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// One plane of {0,1} values.
    BinaryMask,
    /// Two planes holding per-pixel (dx, dy) unit vectors on foreground.
    OrientationGradient,
    /// Any number of planes of unconstrained scalars.
    GenericScalar,
}

/// One named annotation channel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelChannel<S: Scalar> {
    pub name: String,
    pub kind: LabelKind,
    /// H×W×k values; k is fixed by `kind` for masks (1) and orientations (2).
    pub data: Array3<S>,
}

/// Pixel-aligned annotation channels for one patch or image.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabelStack<S: Scalar> {
    pub channels: Vec<LabelChannel<S>>,
}

const ORIENTATION_NORM_TOLERANCE: f64 = 1e-3;

impl<S: Scalar> LabelStack<S> {
    /// Builds a stack, validating per-kind channel invariants.
    pub fn new(channels: Vec<LabelChannel<S>>) -> Result<Self> {
        let stack = LabelStack { channels };
        stack.validate()?;
        Ok(stack)
    }

    /// Checks shape agreement, mask binarity, and orientation norms.
    pub fn validate(&self) -> Result<()> {
        let spatial = match self.channels.first() {
            Some(first) => (first.data.dim().0, first.data.dim().1),
            None => return Ok(()),
        };
        for ch in &self.channels {
            let (h, w, k) = ch.data.dim();
            if (h, w) != spatial {
                return Err(Error::dimension(format!(
                    "channel {} is {h}x{w}, expected {}x{}",
                    ch.name, spatial.0, spatial.1
                )));
            }
            match ch.kind {
                LabelKind::BinaryMask => {
                    if k != 1 {
                        return Err(Error::dimension(format!(
                            "binary mask {} must have 1 plane, got {k}",
                            ch.name
                        )));
                    }
                    if ch.data.iter().any(|&v| v != S::zero() && v != S::one()) {
                        return Err(Error::argument(format!(
                            "binary mask {} contains values outside {{0,1}}",
                            ch.name
                        )));
                    }
                }
                LabelKind::OrientationGradient => {
                    if k != 2 {
                        return Err(Error::dimension(format!(
                            "orientation channel {} must have 2 planes, got {k}",
                            ch.name
                        )));
                    }
                    let tol = cast::<S>(ORIENTATION_NORM_TOLERANCE);
                    for row in 0..h {
                        for col in 0..w {
                            let vx = ch.data[[row, col, 0]];
                            let vy = ch.data[[row, col, 1]];
                            let norm = (vx * vx + vy * vy).sqrt();
                            if norm > tol && (norm - S::one()).abs() > tol {
                                return Err(Error::argument(format!(
                                    "orientation channel {} has non-unit vector (norm {norm}) at ({col},{row})",
                                    ch.name
                                )));
                            }
                        }
                    }
                }
                LabelKind::GenericScalar => {}
            }
        }
        Ok(())
    }

    /// Spatial (height, width), or None when the stack is empty.
    pub fn spatial_dim(&self) -> Option<(usize, usize)> {
        self.channels.first().map(|ch| (ch.data.dim().0, ch.data.dim().1))
    }

    /// Looks up a channel by name.
    pub fn channel(&self, name: &str) -> Option<&LabelChannel<S>> {
        self.channels.iter().find(|ch| ch.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// An image patches are extracted from, with optional evaluation truth.
#[derive(Clone, Debug)]
pub struct WholeImage<S: Scalar> {
    pub id: String,
    /// H'×W'×C intensities in [0,1].
    pub intensities: Array3<S>,
    /// Ground-truth cell centroids as (x, y), when known.
    pub centroids: Option<Vec<[f64; 2]>>,
    /// Full-image ground-truth labels, when known.
    pub labels: Option<LabelStack<S>>,
}

impl<S: Scalar> WholeImage<S> {
    pub fn new(id: impl Into<String>, intensities: Array3<S>) -> Self {
        let intensities = intensities.mapv(|v| {
            if v.is_finite() {
                v.max(S::zero()).min(S::one())
            } else {
                S::zero()
            }
        });
        WholeImage { id: id.into(), intensities, centroids: None, labels: None }
    }

    /// Loads a PNG or TIFF image, rescaling integer samples to [0,1].
    ///
    /// Grayscale maps to one channel, color to three (alpha dropped).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(format!("cannot decode {}: {e}", path.display())))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        let arr = match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                    cast::<S>(g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
                })
            }
            image::DynamicImage::ImageLuma16(g) => {
                let (w, h) = g.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                    cast::<S>(g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0)
                })
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                    cast::<S>(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
                })
            }
        };
        Ok(WholeImage::new(id, arr))
    }

    /// Writes the image as PNG (8-bit; single channel as grayscale,
    /// three channels as RGB).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.intensities.dim();
        let to_u8 = |v: S| -> u8 {
            let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        match c {
            1 => {
                let mut buf = image::GrayImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(self.intensities[[y, x, 0]])]));
                    }
                }
                buf.save(path).map_err(|e| Error::format(format!("cannot encode PNG: {e}")))
            }
            3 => {
                let mut buf = image::RgbImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        let px = image::Rgb([
                            to_u8(self.intensities[[y, x, 0]]),
                            to_u8(self.intensities[[y, x, 1]]),
                            to_u8(self.intensities[[y, x, 2]]),
                        ]);
                        buf.put_pixel(x as u32, y as u32, px);
                    }
                }
                buf.save(path).map_err(|e| Error::format(format!("cannot encode PNG: {e}")))
            }
            other => Err(Error::dimension(format!("cannot save {other}-channel image as PNG"))),
        }
    }

    pub fn height(&self) -> usize {
        self.intensities.dim().0
    }

    pub fn width(&self) -> usize {
        self.intensities.dim().1
    }
}

/// Cuts a size×size patch centered at integer pixel coordinates (x, y).
///
/// Out-of-bounds area is filled by border replication. The center must lie
/// inside the image.
pub fn extract_patch<S: Scalar>(
    image: &WholeImage<S>,
    center: [i64; 2],
    size: usize,
) -> Result<CellPatch<S>> {
    let (h, w, c) = image.intensities.dim();
    let (cx, cy) = (center[0], center[1]);
    if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
        return Err(Error::bounds(format!(
            "patch center ({cx},{cy}) outside {w}x{h} image"
        )));
    }
    if size == 0 {
        return Err(Error::argument("patch size must be positive".to_string()));
    }
    let half = (size / 2) as i64;
    let (x0, y0) = (cx - half, cy - half);
    let out = Array3::from_shape_fn((size, size, c), |(py, px, ch)| {
        let sx = (x0 + px as i64).clamp(0, w as i64 - 1) as usize;
        let sy = (y0 + py as i64).clamp(0, h as i64 - 1) as usize;
        image.intensities[[sy, sx, ch]]
    });
    CellPatch::new(out, image.id.clone(), [cx as f64, cy as f64])
}

/// Cuts the same window as [`extract_patch`] out of a label stack.
pub fn extract_labels<S: Scalar>(
    labels: &LabelStack<S>,
    center: [i64; 2],
    size: usize,
) -> Result<LabelStack<S>> {
    let (h, w) = labels
        .spatial_dim()
        .ok_or_else(|| Error::argument("cannot crop an empty label stack".to_string()))?;
    let (cx, cy) = (center[0], center[1]);
    if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
        return Err(Error::bounds(format!(
            "crop center ({cx},{cy}) outside {w}x{h} labels"
        )));
    }
    let half = (size / 2) as i64;
    let (x0, y0) = (cx - half, cy - half);
    let channels = labels
        .channels
        .iter()
        .map(|ch| {
            let k = ch.data.dim().2;
            let data = Array3::from_shape_fn((size, size, k), |(py, px, plane)| {
                let sx = (x0 + px as i64).clamp(0, w as i64 - 1) as usize;
                let sy = (y0 + py as i64).clamp(0, h as i64 - 1) as usize;
                ch.data[[sy, sx, plane]]
            });
            LabelChannel { name: ch.name.clone(), kind: ch.kind, data }
        })
        .collect();
    LabelStack::new(channels)
}

/// Reads centroids from a CSV file with header "x,y".
pub fn load_centroids_csv(path: &Path) -> Result<Vec<[f64; 2]>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::format(format!("cannot open centroid CSV: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(format!("centroid CSV: {e}")))?
        .clone();
    let (xi, yi) = match (headers.iter().position(|h| h == "x"), headers.iter().position(|h| h == "y")) {
        (Some(xi), Some(yi)) => (xi, yi),
        _ => return Err(Error::format("centroid CSV must have columns x,y".to_string())),
    };
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(format!("centroid CSV: {e}")))?;
        let x: f64 = record
            .get(xi)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("centroid CSV: bad x value".to_string()))?;
        let y: f64 = record
            .get(yi)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("centroid CSV: bad y value".to_string()))?;
        out.push([x, y]);
    }
    Ok(out)
}

/// Writes centroids as a CSV file with header "x,y".
pub fn save_centroids_csv(path: &Path, centroids: &[[f64; 2]]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::format(format!("centroid CSV: {e}")))?;
    writer
        .write_record(["x", "y"])
        .map_err(|e| Error::format(format!("centroid CSV: {e}")))?;
    for c in centroids {
        writer
            .write_record([c[0].to_string(), c[1].to_string()])
            .map_err(|e| Error::format(format!("centroid CSV: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

/// Mean per-pixel L1 distance between two equally shaped patches.
pub fn mean_l1<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(format!("L1 shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.len();
    if n == 0 {
        return Ok(S::zero());
    }
    let mut total = S::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        total += (*x - *y).abs();
    }
    Ok(total / cast::<S>(n as f64))
}

/// Stacks label channel planes for serialization: all channels concatenated
/// along the plane axis, in declaration order.
pub fn labels_to_array<S: Scalar>(labels: &LabelStack<S>) -> Option<Array3<S>> {
    let views: Vec<_> = labels.channels.iter().map(|ch| ch.data.view()).collect();
    if views.is_empty() {
        return None;
    }
    ndarray::concatenate(Axis(2), &views).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ramp_image() -> WholeImage<f32> {
        // 4x4 single-channel ramp: value = y*4 + x, scaled into [0,1].
        let arr = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (y * 4 + x) as f32 / 15.0);
        WholeImage::new("ramp", arr)
    }

    #[test]
    fn full_size_extract_returns_whole_image() {
        let img = ramp_image();
        let patch = extract_patch(&img, [2, 2], 4).unwrap();
        assert_eq!(patch.intensities, img.intensities);
    }

    #[test]
    fn corner_extract_replicates_border() {
        let img = ramp_image();
        // Center (0,0), size 4, half 2: window x,y in [-2,1], clamped to 0.
        let patch = extract_patch(&img, [0, 0], 4).unwrap();
        for py in 0..4usize {
            for px in 0..4usize {
                let sx = (px as i64 - 2).clamp(0, 3) as usize;
                let sy = (py as i64 - 2).clamp(0, 3) as usize;
                assert_eq!(patch.intensities[[py, px, 0]], img.intensities[[sy, sx, 0]]);
            }
        }
    }

    #[test]
    fn center_outside_image_is_bounds_error() {
        let img = ramp_image();
        let err = extract_patch(&img, [4, 0], 2).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)), "got {err:?}");
    }

    #[test]
    fn u8_255_loads_as_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        let mut buf = image::GrayImage::new(2, 2);
        for p in buf.pixels_mut() {
            *p = image::Luma([255u8]);
        }
        buf.save(&path).unwrap();
        let img = WholeImage::<f32>::load(&path).unwrap();
        assert!(img.intensities.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ramp_image();
        img.save_png(&path).unwrap();
        let back = WholeImage::<f32>::load(&path).unwrap();
        for (a, b) in img.intensities.iter().zip(back.intensities.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn nonsquare_patch_rejected() {
        let arr = Array3::<f32>::zeros((2, 3, 1));
        assert!(CellPatch::new(arr, "p", [0.0, 0.0]).is_err());
    }

    #[test]
    fn patch_values_clamped() {
        let arr = array![[[1.5f32], [-0.25]], [[0.5], [f32::NAN]]];
        let patch = CellPatch::new(arr, "p", [0.0, 0.0]).unwrap();
        assert_eq!(patch.intensities[[0, 0, 0]], 1.0);
        assert_eq!(patch.intensities[[0, 1, 0]], 0.0);
        assert_eq!(patch.intensities[[1, 0, 0]], 0.5);
        assert_eq!(patch.intensities[[1, 1, 0]], 0.0);
    }

    #[test]
    fn mask_with_fractional_values_rejected() {
        let data = array![[[0.0f32], [0.5]], [[1.0], [0.0]]];
        let ch = LabelChannel { name: "mask".into(), kind: LabelKind::BinaryMask, data };
        assert!(LabelStack::new(vec![ch]).is_err());
    }

    #[test]
    fn orientation_norm_validated() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 0, 0]] = 0.6;
        data[[0, 0, 1]] = 0.8;
        let ok = LabelChannel {
            name: "orient".into(),
            kind: LabelKind::OrientationGradient,
            data: data.clone(),
        };
        assert!(LabelStack::new(vec![ok]).is_ok());

        data[[1, 1, 0]] = 0.5;
        let bad = LabelChannel { name: "orient".into(), kind: LabelKind::OrientationGradient, data };
        assert!(LabelStack::new(vec![bad]).is_err());
    }

    #[test]
    fn centroid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let pts = vec![[1.5, 2.0], [30.0, 4.25]];
        save_centroids_csv(&path, &pts).unwrap();
        let back = load_centroids_csv(&path).unwrap();
        assert_eq!(pts, back);
    }
}
