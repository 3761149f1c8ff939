//! End-to-end applications over whole images: cell counting by raster
//! scanning, orientation prediction, and few-shot instance segmentation,
//! plus the synthetic scenes used to evaluate them with exact ground
//! truth.
//!
//! Counting scores every stride-step window by its latent distance to
//! the cell bank versus the background exemplars, suppresses non-maxima,
//! and thresholds. Orientation and segmentation run match-then-register
//! per cell and read the answer off the transferred labels.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{augmentation_label_policy, CellBank};
use crate::error::{Error, Result};
use crate::invariant::{embed_bank, match_patch, EncoderModel};
use crate::mapping::{register, transfer_label, MapperModel};
pub use crate::nn::HardExampleSampler;
use crate::num::{cast, Scalar};
use crate::patch::{extract_patch, CellPatch, LabelStack, WholeImage};
use crate::rng::{derive, substream};
use crate::synth::{gen_shape, ShapeSpec};
use crate::warp::{
    apply_warp_labels, apply_warp_patch, make_warp, sample_diffeo, AugmentationConfig,
    InterpPolicy,
};

/// One accepted cell candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// (x, y) pixel coordinates of the window center.
    pub center: [f64; 2],
    /// Cell likelihood in [0, 1], monotone decreasing in the latent
    /// distance to the bank.
    pub score: f64,
    /// Index of the matched archetype entry.
    pub archetype: usize,
}

/// Knobs shared by the scanning pipelines.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch_size: usize,
    /// Raster step between window origins, pixels.
    pub stride: usize,
    /// Detections must score at least this much.
    pub score_threshold: f64,
    /// Suppression radius around each accepted detection, pixels.
    pub nms_radius: f64,
    /// Detections pair with ground-truth centroids within this radius.
    pub match_radius: f64,
    /// Hard-example mining ratio for the training stages.
    pub mining_ratio: f64,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn for_patch(patch_size: usize) -> Self {
        PipelineConfig {
            patch_size,
            stride: (patch_size / 4).max(1),
            score_threshold: 0.55,
            nms_radius: patch_size as f64 / 2.0,
            match_radius: patch_size as f64 / 2.0,
            mining_ratio: 0.25,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".to_string()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "score threshold {} outside [0, 1]",
                self.score_threshold
            )));
        }
        for (name, v) in [("nms_radius", self.nms_radius), ("match_radius", self.match_radius)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mining_ratio) {
            return Err(Error::Config(format!(
                "mining ratio {} outside [0, 1]",
                self.mining_ratio
            )));
        }
        Ok(())
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::for_patch(32)
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Detection order used everywhere a winner must be picked first:
/// descending score, ties by ascending (x, y).
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.center[0].total_cmp(&b.center[0]))
        .then(a.center[1].total_cmp(&b.center[1]))
}

/// Greedy non-maximum suppression: accept by descending score (ties by
/// ascending (x, y)) and drop any candidate within `radius` of an
/// accepted one. The result keeps that acceptance order.
pub fn nms(candidates: &[Detection], radius: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = candidates.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for cand in sorted {
        if kept.iter().all(|k| euclid(k.center, cand.center) > radius) {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Window origins covering [0, extent - window], stepping by `stride`
/// and always including the final origin so the image edge is scanned.
fn window_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("range is never empty") != last {
        out.push(last);
    }
    out
}

fn nearest_row_distance<S: Scalar>(
    embeddings: &Array2<S>,
    z: &ndarray::Array1<S>,
) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (idx, row) in embeddings.axis_iter(Axis(0)).enumerate() {
        let d = row
            .iter()
            .zip(z.iter())
            .map(|(&a, &b)| (a.to_f64().unwrap_or(0.0) - b.to_f64().unwrap_or(0.0)).powi(2))
            .sum::<f64>()
            .sqrt();
        if d < best_dist {
            best_dist = d;
            best = idx;
        }
    }
    (best, best_dist)
}

/// Returns a bank guaranteed to carry cached embeddings, cloning and
/// embedding only when the caller has not done so already.
fn with_embeddings<'a, S: Scalar>(
    model: &EncoderModel<S>,
    bank: &'a CellBank<S>,
    storage: &'a mut Option<CellBank<S>>,
) -> Result<&'a CellBank<S>> {
    let missing = bank.embeddings.is_none()
        || (!bank.background.is_empty() && bank.background_embeddings.is_none());
    if missing {
        let mut owned = bank.clone();
        embed_bank(model, &mut owned)?;
        Ok(storage.insert(owned))
    } else {
        Ok(bank)
    }
}

/// Scans the image in stride steps, scores every window as
/// `d_bg / (d_bg + d_cell)` from its latent distances to the nearest
/// cell record and nearest background exemplar, suppresses non-maxima
/// over all windows, and keeps scores at or above the threshold.
///
/// Suppression runs before thresholding, so raising the threshold can
/// only shrink the detection list.
pub fn scan_count<S: Scalar>(
    image: &WholeImage<S>,
    model: &EncoderModel<S>,
    bank: &CellBank<S>,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let n = cfg.patch_size;
    let (h, w) = (image.height(), image.width());
    if h < n || w < n {
        return Err(Error::dimension(format!("image {w}x{h} smaller than {n}px patch")));
    }
    if bank.augmented.is_empty() {
        return Err(Error::argument("counting needs an augmented bank".to_string()));
    }
    if bank.background.is_empty() {
        return Err(Error::argument("counting needs background exemplars in the bank".to_string()));
    }
    let mut storage = None;
    let bank = with_embeddings(model, bank, &mut storage)?;
    let cell_rows = bank.embeddings.as_ref().expect("embeddings ensured above");
    let bg_rows = bank.background_embeddings.as_ref().expect("embeddings ensured above");

    let half = (n / 2) as f64;
    let origins: Vec<(usize, usize)> = window_origins(h, n, cfg.stride)
        .into_iter()
        .flat_map(|y0| window_origins(w, n, cfg.stride).into_iter().map(move |x0| (y0, x0)))
        .collect();
    let m = bank.augmentations_per_entry.max(1);
    let candidates: Vec<Detection> = origins
        .par_iter()
        .map(|&(y0, x0)| -> Result<Detection> {
            let center = [x0 as f64 + half, y0 as f64 + half];
            let patch = extract_patch(image, [center[0] as i64, center[1] as i64], n)?;
            let z = model.embed(&patch)?;
            let (best_row, d_cell) = nearest_row_distance(cell_rows, &z);
            let (_, d_bg) = nearest_row_distance(bg_rows, &z);
            let score = if d_cell + d_bg < 1e-12 { 0.5 } else { d_bg / (d_bg + d_cell) };
            Ok(Detection { center, score, archetype: best_row / m })
        })
        .collect::<Result<_>>()?;

    let kept = nms(&candidates, cfg.nms_radius);
    Ok(kept.into_iter().filter(|d| d.score >= cfg.score_threshold).collect())
}

/// Detection-versus-centroid tallies with the derived rates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountingEval {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedily pairs detections (best score first) with the nearest still
/// unclaimed ground-truth centroid within `match_radius`.
pub fn evaluate_detections(
    detections: &[Detection],
    truth: &[[f64; 2]],
    match_radius: f64,
) -> CountingEval {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut claimed = vec![false; truth.len()];
    let mut tp = 0usize;
    for det in order {
        let mut best: Option<(usize, f64)> = None;
        for (t, &c) in truth.iter().enumerate() {
            if claimed[t] {
                continue;
            }
            let d = euclid(det.center, c);
            if d <= match_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((t, d));
            }
        }
        if let Some((t, _)) = best {
            claimed[t] = true;
            tp += 1;
        }
    }
    let fp = detections.len() - tp;
    let fn_ = truth.len() - tp;
    let precision = if detections.is_empty() { 1.0 } else { tp as f64 / detections.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { tp as f64 / truth.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    CountingEval {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        f1,
    }
}

/// Angle of the summed orientation vectors over the patch, radians in
/// (-pi, pi]. Errors when the stack has no orientation channel or the
/// vectors cancel to nothing.
pub fn circular_mean_angle<S: Scalar>(labels: &LabelStack<S>) -> Result<f64> {
    let channel = labels
        .channel("orientation")
        .ok_or_else(|| Error::Config("label stack has no orientation channel".to_string()))?;
    let (h, w, k) = channel.data.dim();
    if k != 2 {
        return Err(Error::dimension(format!("orientation channel has {k} components, need 2")));
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x in 0..w {
            sx += channel.data[[y, x, 0]].to_f64().unwrap_or(0.0);
            sy += channel.data[[y, x, 1]].to_f64().unwrap_or(0.0);
        }
    }
    if (sx * sx + sy * sy).sqrt() < 1e-9 {
        return Err(Error::argument("orientation vectors cancel; no mean angle".to_string()));
    }
    Ok(sy.atan2(sx))
}

/// Shortest circular difference between two angles, in degrees [0, 180].
pub fn angle_error_deg(a: f64, b: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let d = (a - b).rem_euclid(tau);
    d.min(tau - d).to_degrees()
}

/// Mean circular angle error over paired samples, degrees.
pub fn mean_angle_error_deg(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::dimension(format!(
            "angle lists differ in length: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::argument("no angles to compare".to_string()));
    }
    let sum: f64 = predicted.iter().zip(truth).map(|(&p, &t)| angle_error_deg(p, t)).sum();
    Ok(sum / predicted.len() as f64)
}

/// Orientation read-outs for one query patch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrientationPrediction {
    /// Circular mean of the orientation labels after registration-based
    /// transfer, radians.
    pub angle: f64,
    /// Circular mean of the matched record's labels copied unchanged.
    pub baseline_angle: f64,
    pub entry_index: usize,
    pub record_index: usize,
}

/// Predicts per-cell orientation: match each patch against the bank,
/// register the matched record onto it, transfer the orientation labels
/// through the inverse warp, and take the circular mean. Also reports
/// the copy-the-archetype-label baseline from the same matched record.
pub fn predict_orientation<S: Scalar>(
    patches: &[CellPatch<S>],
    encoder: &EncoderModel<S>,
    mapper: &MapperModel<S>,
    bank: &CellBank<S>,
) -> Result<Vec<OrientationPrediction>> {
    if bank.augmented.is_empty() {
        return Err(Error::argument("orientation needs an augmented bank".to_string()));
    }
    if bank.augmented.iter().any(|r| r.labels.channel("orientation").is_none()) {
        return Err(Error::Config("bank labels lack an orientation channel".to_string()));
    }
    let mut storage = None;
    let bank = with_embeddings(encoder, bank, &mut storage)?;
    let policy = augmentation_label_policy();
    patches
        .par_iter()
        .map(|query| -> Result<OrientationPrediction> {
            let outcome = match_patch(encoder, query, bank)?;
            let record = &bank.augmented[outcome.record_index];
            let baseline_angle = circular_mean_angle(&record.labels)?;
            let result = register(mapper, &record.patch, query)?;
            let transferred = transfer_label(&result, &record.labels, &policy)?;
            let angle = circular_mean_angle(&transferred)?;
            Ok(OrientationPrediction {
                angle,
                baseline_angle,
                entry_index: outcome.entry_index,
                record_index: outcome.record_index,
            })
        })
        .collect()
}

/// Instance labels for one image: 0 is background, k is the k-th
/// surviving detection (1-based, in detection order).
#[derive(Clone, Debug)]
pub struct SegmentationOutcome {
    pub detections: Vec<Detection>,
    pub instances: Array2<u16>,
}

/// Segments every detected cell: extract its window, match, register the
/// matched record onto it, transfer the mask, and paint it back at the
/// window location as a distinct instance. Overlapping pixels go to the
/// higher-scoring detection.
///
/// Pass `detections` from [`scan_count`] or hand-made centroids; `None`
/// runs [`scan_count`] first (which then needs background exemplars).
pub fn segment_few_shot<S: Scalar>(
    image: &WholeImage<S>,
    encoder: &EncoderModel<S>,
    mapper: &MapperModel<S>,
    bank: &CellBank<S>,
    cfg: &PipelineConfig,
    detections: Option<Vec<Detection>>,
) -> Result<SegmentationOutcome> {
    cfg.validate()?;
    if bank.augmented.iter().any(|r| r.labels.channel("mask").is_none()) {
        return Err(Error::Config("bank labels lack a mask channel".to_string()));
    }
    let mut detections = match detections {
        Some(d) => d,
        None => scan_count(image, encoder, bank, cfg)?,
    };
    detections.sort_by(detection_order);
    if detections.len() > u16::MAX as usize {
        return Err(Error::argument(format!(
            "{} detections exceed the u16 instance map",
            detections.len()
        )));
    }
    let mut storage = None;
    let bank = with_embeddings(encoder, bank, &mut storage)?;
    let policy = augmentation_label_policy();
    let n = cfg.patch_size;
    let masks: Vec<Array3<S>> = detections
        .par_iter()
        .map(|det| -> Result<Array3<S>> {
            let query =
                extract_patch(image, [det.center[0] as i64, det.center[1] as i64], n)?;
            let outcome = match_patch(encoder, &query, bank)?;
            let record = &bank.augmented[outcome.record_index];
            let result = register(mapper, &record.patch, &query)?;
            let transferred = transfer_label(&result, &record.labels, &policy)?;
            Ok(transferred.channel("mask").expect("checked above").data.clone())
        })
        .collect::<Result<_>>()?;

    let (h, w) = (image.height(), image.width());
    let mut instances = Array2::<u16>::zeros((h, w));
    let mut scores = Array2::<f64>::from_elem((h, w), f64::NEG_INFINITY);
    let half = (n / 2) as i64;
    let threshold = cast::<S>(0.5);
    for (idx, (det, mask)) in detections.iter().zip(&masks).enumerate() {
        let (x0, y0) = (det.center[0] as i64 - half, det.center[1] as i64 - half);
        for py in 0..n {
            for px in 0..n {
                if mask[[py, px, 0]] < threshold {
                    continue;
                }
                let (y, x) = (y0 + py as i64, x0 + px as i64);
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                // Strict >: on equal scores the earlier detection (by the
                // deterministic order) keeps the pixel.
                if det.score > scores[[y, x]] {
                    scores[[y, x]] = det.score;
                    instances[[y, x]] = (idx + 1) as u16;
                }
            }
        }
    }
    Ok(SegmentationOutcome { detections, instances })
}

/// Mean over ground-truth instances of the best Dice overlap achieved by
/// any single predicted instance.
pub fn mean_instance_dice(predicted: &Array2<u16>, truth: &Array2<u16>) -> Result<f64> {
    if predicted.dim() != truth.dim() {
        return Err(Error::dimension(format!(
            "instance maps differ: {:?} vs {:?}",
            predicted.dim(),
            truth.dim()
        )));
    }
    let mut truth_area: HashMap<u16, usize> = HashMap::new();
    let mut pred_area: HashMap<u16, usize> = HashMap::new();
    let mut overlap: HashMap<(u16, u16), usize> = HashMap::new();
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        if p != 0 {
            *pred_area.entry(p).or_insert(0) += 1;
        }
        if t != 0 {
            *truth_area.entry(t).or_insert(0) += 1;
        }
        if p != 0 && t != 0 {
            *overlap.entry((t, p)).or_insert(0) += 1;
        }
    }
    if truth_area.is_empty() {
        return Err(Error::argument("ground truth has no instances".to_string()));
    }
    let mut total = 0.0;
    for (&t, &t_area) in &truth_area {
        let best = pred_area
            .iter()
            .filter_map(|(&p, &p_area)| {
                overlap
                    .get(&(t, p))
                    .map(|&inter| 2.0 * inter as f64 / (t_area + p_area) as f64)
            })
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / truth_area.len() as f64)
}

/// Writes detections as CSV with the header `x,y,score,archetype`.
pub fn save_detections_csv(path: &std::path::Path, detections: &[Detection]) -> Result<()> {
    let mut text = String::from("x,y,score,archetype\n");
    for d in detections {
        text.push_str(&format!("{},{},{},{}\n", d.center[0], d.center[1], d.score, d.archetype));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads detections written by [`save_detections_csv`].
pub fn load_detections_csv(path: &std::path::Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("x,y,score,archetype") => {}
        other => {
            return Err(Error::format(format!(
                "expected detections header, got {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!("line {}: expected 4 fields", i + 2)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::format(format!("line {}: {e}", i + 2)))
        };
        out.push(Detection {
            center: [parse(fields[0])?, parse(fields[1])?],
            score: parse(fields[2])?,
            archetype: fields[3]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::format(format!("line {}: {e}", i + 2)))?,
        });
    }
    Ok(out)
}

/// Writes an instance map as a 16-bit grayscale PNG (0 = background,
/// k = instance k).
pub fn save_instances_png(path: &std::path::Path, instances: &Array2<u16>) -> Result<()> {
    let (h, w) = instances.dim();
    let mut buffer = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (y, row) in instances.outer_iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            buffer.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buffer
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(format!("cannot write instance png: {e}")))?;
    Ok(())
}

/// Reads an instance map written by [`save_instances_png`].
pub fn load_instances_png(path: &std::path::Path) -> Result<Array2<u16>> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("cannot read instance png: {e}")))?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32).0[0]))
}

/// Ground truth for one placed shape.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneInstance {
    /// Mask centroid in image coordinates (x, y).
    pub center: [f64; 2],
    /// Index into the archetype list the shape was drawn from.
    pub archetype: usize,
    /// Circular-mean orientation of the (deformed) shape, radians, when
    /// the archetype carries orientation labels.
    pub angle: Option<f64>,
}

/// A constructed image with exact per-instance ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticScene<S: Scalar> {
    pub image: WholeImage<S>,
    pub instances: Vec<SceneInstance>,
    /// Ground-truth instance map, ids matching `instances` 1-based.
    pub truth: Array2<u16>,
}

impl<S: Scalar> SyntheticScene<S> {
    pub fn centroids(&self) -> Vec<[f64; 2]> {
        self.instances.iter().map(|i| i.center).collect()
    }
}

/// Layout of a randomized scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub count: usize,
    /// Minimum center-to-center distance between shapes, pixels.
    pub min_spacing: f64,
    /// Per-instance deformation drawn for each placed shape.
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 288,
            width: 288,
            patch_size: 32,
            count: 25,
            min_spacing: 48.0,
            augmentation: AugmentationConfig::small_residual(32),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.count == 0 {
            return Err(Error::Config("patch size and count must be positive".to_string()));
        }
        if self.height < self.patch_size || self.width < self.patch_size {
            return Err(Error::Config(format!(
                "canvas {}x{} smaller than {}px patch",
                self.width, self.height, self.patch_size
            )));
        }
        if !self.min_spacing.is_finite() || self.min_spacing <= 0.0 {
            return Err(Error::Config(format!(
                "min spacing must be positive, got {}",
                self.min_spacing
            )));
        }
        self.augmentation.validate()
    }
}

/// Renders one shape per center onto a blank canvas. Each instance draws
/// its own deformation; its patch and labels are warped by the identical
/// field, so the recorded centroid, mask, and angle are exact ground
/// truth. Centers must leave the full patch window inside the canvas.
pub fn build_scene<S: Scalar>(
    archetypes: &[ShapeSpec],
    centers: &[[i64; 2]],
    canvas: (usize, usize),
    patch_size: usize,
    augmentation: &AugmentationConfig,
    seed: u64,
) -> Result<SyntheticScene<S>> {
    if archetypes.is_empty() {
        return Err(Error::argument("scene needs at least one archetype".to_string()));
    }
    if centers.len() > u16::MAX as usize {
        return Err(Error::argument("too many instances for a u16 truth map".to_string()));
    }
    augmentation.validate()?;
    let n = patch_size;
    let (h, w) = canvas;
    let half = (n / 2) as i64;
    let root = derive(seed, "scene");
    let image_policy = InterpPolicy::for_images();
    let label_policy = augmentation_label_policy();

    let mut canvas_px = Array3::<S>::zeros((h, w, 1));
    let mut truth = Array2::<u16>::zeros((h, w));
    let mut instances = Vec::with_capacity(centers.len());
    for (i, &[cx, cy]) in centers.iter().enumerate() {
        let (x0, y0) = (cx - half, cy - half);
        if x0 < 0 || y0 < 0 || x0 + n as i64 > w as i64 || y0 + n as i64 > h as i64 {
            return Err(Error::bounds(format!(
                "instance {i} at ({cx},{cy}) does not fit the {w}x{h} canvas"
            )));
        }
        let archetype = i % archetypes.len();
        let (patch, labels) =
            gen_shape::<S>(&archetypes[archetype], n, derive(root, &format!("shape/{i}")))?;
        let mut rng = substream(root, &format!("deform/{i}"));
        let spec = sample_diffeo(augmentation, &mut rng)?;
        let field = make_warp::<S>(&spec, n, n)?;
        let warped = apply_warp_patch(&field, &patch, &image_policy)?;
        let warped_labels = apply_warp_labels(&field, &labels, &label_policy)?;

        let mask = &warped_labels.channel("mask").expect("gen_shape always adds a mask").data;
        let threshold = cast::<S>(0.5);
        let (mut sum_x, mut sum_y, mut area) = (0.0f64, 0.0f64, 0usize);
        for py in 0..n {
            for px in 0..n {
                let (y, x) = ((y0 + py as i64) as usize, (x0 + px as i64) as usize);
                let v = warped.intensities[[py, px, 0]];
                if v > canvas_px[[y, x, 0]] {
                    canvas_px[[y, x, 0]] = v;
                }
                if mask[[py, px, 0]] >= threshold {
                    truth[[y, x]] = (i + 1) as u16;
                    sum_x += x as f64;
                    sum_y += y as f64;
                    area += 1;
                }
            }
        }
        let center = if area > 0 {
            [sum_x / area as f64, sum_y / area as f64]
        } else {
            [cx as f64, cy as f64]
        };
        let angle = circular_mean_angle(&warped_labels).ok();
        instances.push(SceneInstance { center, archetype, angle });
    }
    Ok(SyntheticScene {
        image: WholeImage::new(format!("scene-{seed}"), canvas_px),
        instances,
        truth,
    })
}

/// Builds a rows-by-cols grid of shapes with `spacing` pixels between
/// neighboring centers. The canvas is exactly rows x cols spacing cells.
pub fn build_grid_scene<S: Scalar>(
    archetypes: &[ShapeSpec],
    patch_size: usize,
    rows: usize,
    cols: usize,
    spacing: usize,
    augmentation: &AugmentationConfig,
    seed: u64,
) -> Result<SyntheticScene<S>> {
    if rows == 0 || cols == 0 {
        return Err(Error::argument("grid needs at least one row and column".to_string()));
    }
    if spacing < patch_size {
        return Err(Error::argument(format!(
            "grid spacing {spacing} smaller than the {patch_size}px patch"
        )));
    }
    let centers: Vec<[i64; 2]> = (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| {
                [(c * spacing + spacing / 2) as i64, (r * spacing + spacing / 2) as i64]
            })
        })
        .collect();
    build_scene(
        archetypes,
        &centers,
        (rows * spacing, cols * spacing),
        patch_size,
        augmentation,
        seed,
    )
}

const PLACEMENT_TRIES: usize = 10_000;

/// Builds a randomized scene: centers drawn uniformly, rejected until
/// every pair sits at least `min_spacing` apart.
pub fn build_random_scene<S: Scalar>(
    archetypes: &[ShapeSpec],
    cfg: &SceneConfig,
) -> Result<SyntheticScene<S>> {
    cfg.validate()?;
    let n = cfg.patch_size;
    let half = (n / 2) as i64;
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let (lo_x, hi_x) = (half, w - (n as i64 - half));
    let (lo_y, hi_y) = (half, h - (n as i64 - half));
    if lo_x > hi_x || lo_y > hi_y {
        return Err(Error::Config("canvas leaves no room for placements".to_string()));
    }
    let mut rng = substream(derive(cfg.seed, "scene"), "centers");
    let mut centers: Vec<[i64; 2]> = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let cand = [
                rand::Rng::gen_range(&mut rng, lo_x..=hi_x),
                rand::Rng::gen_range(&mut rng, lo_y..=hi_y),
            ];
            let ok = centers.iter().all(|&c| {
                euclid([c[0] as f64, c[1] as f64], [cand[0] as f64, cand[1] as f64])
                    >= cfg.min_spacing
            });
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::numeric(format!(
                "could not place instance {i} with spacing {} on {}x{}",
                cfg.min_spacing, cfg.width, cfg.height
            )));
        }
    }
    build_scene(archetypes, &centers, (cfg.height, cfg.width), n, &cfg.augmentation, cfg.seed)
}

/// Samples background exemplar patches: windows whose centers sit more
/// than one patch size away from every listed centroid.
pub fn sample_background<S: Scalar>(
    image: &WholeImage<S>,
    centroids: &[[f64; 2]],
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<CellPatch<S>>> {
    let n = patch_size;
    let (h, w) = (image.height() as i64, image.width() as i64);
    if (h as usize) < n || (w as usize) < n {
        return Err(Error::dimension(format!("image smaller than {n}px patch")));
    }
    if count == 0 {
        return Err(Error::argument("background exemplar count must be >= 1".to_string()));
    }
    let half = (n / 2) as i64;
    let (lo_x, hi_x) = (half, w - (n as i64 - half));
    let (lo_y, hi_y) = (half, h - (n as i64 - half));
    let mut rng = substream(derive(seed, "background"), "centers");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let cand = [
                rand::Rng::gen_range(&mut rng, lo_x..=hi_x),
                rand::Rng::gen_range(&mut rng, lo_y..=hi_y),
            ];
            let far = centroids.iter().all(|&c| {
                euclid(c, [cand[0] as f64, cand[1] as f64]) > n as f64
            });
            if far {
                out.push(extract_patch(image, cand, n)?);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::numeric(format!(
                "could not find background window {i} clear of {} centroids",
                centroids.len()
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{build_augmented_bank, BankEntry, CellBank};
    use crate::invariant::{train_invariant, InvariantTrainConfig};
    use crate::mapping::{train_mapping, MapperKind, MappingTrainConfig};
    use crate::synth::orientation_archetypes;
    use crate::warp::{DiffeoKind, DiffeoKindTag, DiffeoSpec, KindWeight};
    use std::sync::OnceLock;

    fn det(x: f64, y: f64, score: f64) -> Detection {
        Detection { center: [x, y], score, archetype: 0 }
    }

    #[test]
    fn nms_keeps_a_single_candidate() {
        let kept = nms(&[det(4.0, 5.0, 0.8)], 5.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].center, [4.0, 5.0]);
    }

    #[test]
    fn nms_keeps_the_higher_of_two_close_candidates() {
        let kept = nms(&[det(10.0, 10.0, 0.6), det(11.0, 10.0, 0.9)], 5.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_breaks_score_ties_by_ascending_coordinates() {
        let kept = nms(&[det(20.0, 3.0, 0.7), det(4.0, 30.0, 0.7)], 100.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].center, [4.0, 30.0]);
    }

    /// Independent implementation: repeatedly pick the global best from
    /// the remaining pool and erase its neighborhood.
    fn nms_oracle(candidates: &[Detection], radius: f64) -> Vec<Detection> {
        let mut pool: Vec<Detection> = candidates.to_vec();
        let mut kept = Vec::new();
        while !pool.is_empty() {
            let best = pool
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| detection_order(a, b))
                .map(|(i, _)| i)
                .expect("pool non-empty");
            let winner = pool.remove(best);
            pool.retain(|c| euclid(c.center, winner.center) > radius);
            kept.push(winner);
        }
        kept
    }

    #[test]
    fn nms_matches_the_exhaustive_oracle_and_is_idempotent() {
        let mut rng = substream(5, "nms");
        for round in 0..6 {
            let candidates: Vec<Detection> = (0..50)
                .map(|_| {
                    // Quantized scores force plenty of exact ties.
                    let score =
                        (rand::Rng::gen_range(&mut rng, 0..5) as f64) / 4.0;
                    det(
                        rand::Rng::gen_range(&mut rng, 0.0..100.0_f64).round(),
                        rand::Rng::gen_range(&mut rng, 0.0..100.0_f64).round(),
                        score,
                    )
                })
                .collect();
            let radius = 8.0 + round as f64;
            let fast = nms(&candidates, radius);
            let slow = nms_oracle(&candidates, radius);
            assert_eq!(fast, slow, "round {round}");
            assert_eq!(nms(&fast, radius), fast, "idempotence, round {round}");
        }
    }

    #[test]
    fn detection_evaluation_counts_matches_greedily() {
        let truth = [[10.0, 10.0], [50.0, 50.0], [90.0, 10.0]];
        let detections = vec![det(11.0, 10.0, 0.9), det(52.0, 49.0, 0.8), det(30.0, 30.0, 0.7)];
        let eval = evaluate_detections(&detections, &truth, 8.0);
        assert_eq!(eval.true_positives, 2);
        assert_eq!(eval.false_positives, 1);
        assert_eq!(eval.false_negatives, 1);
        assert!((eval.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((eval.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((eval.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_truth_claims_only_one_detection() {
        let truth = [[10.0, 10.0]];
        let detections = vec![det(9.0, 10.0, 0.9), det(11.0, 10.0, 0.8)];
        let eval = evaluate_detections(&detections, &truth, 8.0);
        assert_eq!(eval.true_positives, 1);
        assert_eq!(eval.false_positives, 1);
        assert_eq!(eval.false_negatives, 0);
    }

    #[test]
    fn angle_error_wraps_the_circle() {
        assert!((angle_error_deg(0.1, -0.1) - 0.2f64.to_degrees()).abs() < 1e-9);
        let near_wrap = angle_error_deg(3.1, -3.1);
        assert!(near_wrap < 10.0, "got {near_wrap}");
        assert!((angle_error_deg(0.0, std::f64::consts::PI) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn circular_mean_reads_the_orientation_channel() {
        let spec = &orientation_archetypes(32)[0];
        let (_, labels) = gen_shape::<f64>(spec, 32, 3).unwrap();
        let angle = circular_mean_angle(&labels).unwrap();
        let expected = match &spec.kind {
            crate::synth::ShapeKind::Ellipse { angle, .. } => *angle,
            other => panic!("expected an ellipse archetype, got {other:?}"),
        };
        assert!(angle_error_deg(angle, expected) < 1e-6);

        let (_, mask_only) = gen_shape::<f64>(
            &ShapeSpec { polarity: 0.0, ..spec.clone() },
            32,
            3,
        )
        .map(|(p, l)| {
            let mask = l.channel("mask").unwrap().clone();
            (p, LabelStack::new(vec![mask]).unwrap())
        })
        .unwrap();
        assert!(matches!(circular_mean_angle(&mask_only), Err(Error::Config(_))));
    }

    #[test]
    fn detections_csv_round_trips() {
        let detections = vec![det(12.5, 40.0, 0.75), det(99.0, 3.25, 0.5)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detections.csv");
        save_detections_csv(&path, &detections).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,y,score,archetype\n"));
        let loaded = load_detections_csv(&path).unwrap();
        assert_eq!(loaded, detections);
    }

    #[test]
    fn instance_png_round_trips() {
        let mut map = Array2::<u16>::zeros((20, 30));
        map[[3, 4]] = 1;
        map[[10, 20]] = 700;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instances.png");
        save_instances_png(&path, &map).unwrap();
        let loaded = load_instances_png(&path).unwrap();
        assert_eq!(loaded, map);
    }

    #[test]
    fn mean_instance_dice_scores_perfect_and_disjoint_maps() {
        let mut truth = Array2::<u16>::zeros((10, 10));
        for y in 2..5 {
            for x in 2..5 {
                truth[[y, x]] = 1;
            }
        }
        assert_eq!(mean_instance_dice(&truth, &truth).unwrap(), 1.0);
        let empty = Array2::<u16>::zeros((10, 10));
        assert_eq!(mean_instance_dice(&empty, &truth).unwrap(), 0.0);
        assert!(mean_instance_dice(&truth, &empty).is_err());
    }

    fn rotation_only(n: usize, range: f64) -> AugmentationConfig {
        let mut aug = AugmentationConfig::for_patch(n);
        aug.kinds = vec![KindWeight { kind: DiffeoKindTag::Rotation, weight: 1.0 }];
        aug.rotation_range = [-range, range];
        aug
    }

    fn scene_archetypes() -> Vec<ShapeSpec> {
        orientation_archetypes(32)
    }

    /// One trained encoder + mapper + bank shared by the slow tests.
    struct Fixture {
        bank: CellBank<f32>,
        encoder: EncoderModel<f32>,
        mapper: MapperModel<f32>,
    }

    fn fixture() -> &'static Fixture {
        static FIXTURE: OnceLock<Fixture> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            let n = 32;
            let entries: Vec<BankEntry<f32>> = scene_archetypes()
                .iter()
                .enumerate()
                .map(|(j, spec)| {
                    let (patch, labels) = gen_shape::<f32>(spec, n, j as u64).unwrap();
                    BankEntry { patch, labels }
                })
                .collect();
            let base = CellBank::new(entries).unwrap();
            // Records cover the full rotation range; the encoder trains
            // on small perturbations so nearby rotations stay nearby in
            // latent space and matching picks a record within a few
            // degrees of the query's pose.
            let bank = build_augmented_bank(&base, 16, &rotation_only(n, 0.9), 33).unwrap();
            let encoder_cfg = InvariantTrainConfig {
                latent_dim: 16,
                epochs: 60,
                batch_size: 4,
                augmentation: rotation_only(n, 0.2),
                seed: 7,
                ..InvariantTrainConfig::default()
            };
            let encoder = train_invariant(&bank, &encoder_cfg).unwrap();
            let mapper_cfg = MappingTrainConfig {
                kind: MapperKind::StationaryVelocity,
                epochs: 150,
                seed: 13,
                ..MappingTrainConfig::for_patch(n)
            };
            let mapper = train_mapping(&bank, &mapper_cfg).unwrap();
            Fixture { bank, encoder, mapper }
        })
    }

    #[test]
    fn blank_image_yields_zero_detections() {
        let fx = fixture();
        let blank = WholeImage::new("blank", Array3::<f32>::zeros((96, 96, 1)));
        let mut bank = fx.bank.clone();
        bank.background = sample_background(&blank, &[], 32, 4, 2).unwrap();
        let cfg = PipelineConfig::for_patch(32);
        let detections = scan_count(&blank, &fx.encoder, &bank, &cfg).unwrap();
        assert!(detections.is_empty(), "got {} detections", detections.len());
    }

    #[test]
    fn grid_scene_of_nine_is_counted_exactly() {
        let fx = fixture();
        let scene = build_grid_scene::<f32>(
            &scene_archetypes(),
            32,
            3,
            3,
            64,
            &rotation_only(32, 0.9),
            41,
        )
        .unwrap();
        let mut bank = fx.bank.clone();
        bank.background =
            sample_background(&scene.image, &scene.centroids(), 32, 6, 17).unwrap();
        let mut cfg = PipelineConfig::for_patch(32);
        cfg.nms_radius = 24.0;
        let detections = scan_count(&scene.image, &fx.encoder, &bank, &cfg).unwrap();
        let eval = evaluate_detections(&detections, &scene.centroids(), cfg.match_radius);
        assert_eq!(
            (eval.true_positives, eval.false_positives, eval.false_negatives),
            (9, 0, 0),
            "precision {} recall {}",
            eval.precision,
            eval.recall
        );
        assert_eq!(eval.f1, 1.0);
    }

    #[test]
    fn raising_the_threshold_never_increases_detections() {
        let fx = fixture();
        let scene = build_grid_scene::<f32>(
            &scene_archetypes(),
            32,
            2,
            2,
            64,
            &rotation_only(32, 0.9),
            43,
        )
        .unwrap();
        let mut bank = fx.bank.clone();
        bank.background =
            sample_background(&scene.image, &scene.centroids(), 32, 4, 19).unwrap();
        let mut counts = Vec::new();
        for threshold in [0.0, 0.3, 0.55, 0.8, 1.0] {
            let mut cfg = PipelineConfig::for_patch(32);
            cfg.score_threshold = threshold;
            counts.push(scan_count(&scene.image, &fx.encoder, &bank, &cfg).unwrap().len());
        }
        for pair in counts.windows(2) {
            assert!(pair[1] <= pair[0], "counts {counts:?} not monotone");
        }
    }

    #[test]
    fn scan_count_is_deterministic() {
        let fx = fixture();
        let scene = build_grid_scene::<f32>(
            &scene_archetypes(),
            32,
            2,
            2,
            64,
            &rotation_only(32, 0.5),
            47,
        )
        .unwrap();
        let mut bank = fx.bank.clone();
        bank.background =
            sample_background(&scene.image, &scene.centroids(), 32, 4, 23).unwrap();
        let cfg = PipelineConfig::for_patch(32);
        let a = scan_count(&scene.image, &fx.encoder, &bank, &cfg).unwrap();
        let b = scan_count(&scene.image, &fx.encoder, &bank, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scan_count_rejects_undersized_images_and_missing_background() {
        let fx = fixture();
        let tiny = WholeImage::new("tiny", Array3::<f32>::zeros((16, 16, 1)));
        let cfg = PipelineConfig::for_patch(32);
        assert!(matches!(
            scan_count(&tiny, &fx.encoder, &fx.bank, &cfg),
            Err(Error::Dimension(_))
        ));
        let blank = WholeImage::new("blank", Array3::<f32>::zeros((64, 64, 1)));
        assert!(matches!(
            scan_count(&blank, &fx.encoder, &fx.bank, &cfg),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn identity_scene_segmentation_recovers_the_archetype_mask() {
        // No deformation anywhere and an untrained identity-start
        // mapper: the transferred mask must equal the archetype mask
        // exactly after re-binarization.
        let n = 32;
        let archetypes = scene_archetypes();
        let entries: Vec<BankEntry<f32>> = archetypes
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                let (patch, labels) = gen_shape::<f32>(spec, n, j as u64).unwrap();
                BankEntry { patch, labels }
            })
            .collect();
        let base = CellBank::new(entries).unwrap();
        let identity_aug = rotation_only(n, 0.0);
        let bank = build_augmented_bank(&base, 1, &identity_aug, 1).unwrap();
        let encoder = EncoderModel::<f32>::init(n, 8, 3).unwrap();
        let mapper = MapperModel::<f32>::init(MapperKind::StationaryVelocity, n, 7, 5).unwrap();

        let scene =
            build_scene::<f32>(&archetypes[..1], &[[32, 32]], (64, 64), n, &identity_aug, 9)
                .unwrap();
        let cfg = PipelineConfig::for_patch(n);
        let provided = vec![Detection { center: [32.0, 32.0], score: 1.0, archetype: 0 }];
        let outcome =
            segment_few_shot(&scene.image, &encoder, &mapper, &bank, &cfg, Some(provided))
                .unwrap();
        assert_eq!(outcome.detections.len(), 1);
        let dice = mean_instance_dice(&outcome.instances, &scene.truth).unwrap();
        assert_eq!(dice, 1.0, "identity transfer must be exact");
    }

    #[test]
    fn warped_scene_segments_above_dice_090() {
        let fx = fixture();
        let scene = build_grid_scene::<f32>(
            &scene_archetypes(),
            32,
            3,
            3,
            64,
            &rotation_only(32, 0.9),
            53,
        )
        .unwrap();
        let cfg = PipelineConfig::for_patch(32);
        let provided: Vec<Detection> = scene
            .instances
            .iter()
            .map(|inst| Detection {
                center: [inst.center[0].round(), inst.center[1].round()],
                score: 1.0,
                archetype: inst.archetype,
            })
            .collect();
        let outcome = segment_few_shot(
            &scene.image,
            &fx.encoder,
            &fx.mapper,
            &fx.bank,
            &cfg,
            Some(provided),
        )
        .unwrap();
        assert_eq!(outcome.detections.len(), 9);
        let ids: std::collections::HashSet<u16> =
            outcome.instances.iter().copied().filter(|&v| v != 0).collect();
        assert_eq!(ids.len(), 9, "every detection paints its own instance");
        let dice = mean_instance_dice(&outcome.instances, &scene.truth).unwrap();
        assert!(dice >= 0.90, "mean instance dice {dice}");
    }

    #[test]
    fn segmentation_requires_mask_labels() {
        let fx = fixture();
        let mut bank = fx.bank.clone();
        for record in &mut bank.augmented {
            record.labels = LabelStack::new(vec![record
                .labels
                .channel("orientation")
                .unwrap()
                .clone()])
            .unwrap();
        }
        let image = WholeImage::new("img", Array3::<f32>::zeros((64, 64, 1)));
        let cfg = PipelineConfig::for_patch(32);
        let provided = vec![det(32.0, 32.0, 1.0)];
        assert!(matches!(
            segment_few_shot(&image, &fx.encoder, &fx.mapper, &bank, &cfg, Some(provided)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rotated_queries_recover_orientation_within_five_degrees() {
        let fx = fixture();
        let n = 32;
        let mut queries = Vec::new();
        let mut truth = Vec::new();
        for (i, angle) in [0.52, -0.35, 0.17].into_iter().enumerate() {
            // A rotated archetype with co-rotated ground-truth labels.
            let spec = &scene_archetypes()[i];
            let (patch, labels) = gen_shape::<f32>(spec, n, i as u64).unwrap();
            let c = (n as f64 - 1.0) / 2.0;
            let diffeo =
                DiffeoSpec { kind: DiffeoKind::Rotation { angle }, center: [c, c] };
            let field = make_warp::<f32>(&diffeo, n, n).unwrap();
            let warped = apply_warp_patch(&field, &patch, &InterpPolicy::for_images()).unwrap();
            let warped_labels =
                apply_warp_labels(&field, &labels, &augmentation_label_policy()).unwrap();
            queries.push(warped);
            truth.push(circular_mean_angle(&warped_labels).unwrap());
        }
        let predictions =
            predict_orientation(&queries, &fx.encoder, &fx.mapper, &fx.bank).unwrap();
        let angles: Vec<f64> = predictions.iter().map(|p| p.angle).collect();
        let err = mean_angle_error_deg(&angles, &truth).unwrap();
        assert!(err < 5.0, "mean angular error {err} degrees");

        // The registered transfer must not be worse than copying the
        // matched record's label outright.
        let baseline: Vec<f64> = predictions.iter().map(|p| p.baseline_angle).collect();
        let baseline_err = mean_angle_error_deg(&baseline, &truth).unwrap();
        assert!(err <= baseline_err + 1e-9, "registered {err} vs baseline {baseline_err}");
    }

    #[test]
    fn orientation_requires_orientation_labels() {
        let fx = fixture();
        let mut bank = fx.bank.clone();
        for record in &mut bank.augmented {
            record.labels =
                LabelStack::new(vec![record.labels.channel("mask").unwrap().clone()]).unwrap();
        }
        let (patch, _) = gen_shape::<f32>(&scene_archetypes()[0], 32, 0).unwrap();
        assert!(matches!(
            predict_orientation(&[patch], &fx.encoder, &fx.mapper, &bank),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scenes_are_deterministic_per_seed_and_respect_spacing() {
        let cfg = SceneConfig {
            height: 200,
            width: 200,
            patch_size: 32,
            count: 6,
            min_spacing: 48.0,
            augmentation: rotation_only(32, 0.5),
            seed: 21,
        };
        let a = build_random_scene::<f32>(&scene_archetypes(), &cfg).unwrap();
        let b = build_random_scene::<f32>(&scene_archetypes(), &cfg).unwrap();
        assert_eq!(a.image.intensities, b.image.intensities);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.instances.len(), 6);
        for (i, x) in a.instances.iter().enumerate() {
            for y in &a.instances[i + 1..] {
                assert!(euclid(x.center, y.center) >= cfg.min_spacing - 8.0);
            }
        }
        let other = build_random_scene::<f32>(
            &scene_archetypes(),
            &SceneConfig { seed: 22, ..cfg },
        )
        .unwrap();
        assert_ne!(a.image.intensities, other.image.intensities);
    }

    #[test]
    fn scene_truth_map_matches_instance_list() {
        let scene = build_grid_scene::<f32>(
            &scene_archetypes(),
            32,
            2,
            3,
            48,
            &rotation_only(32, 0.3),
            5,
        )
        .unwrap();
        assert_eq!(scene.instances.len(), 6);
        let ids: std::collections::HashSet<u16> =
            scene.truth.iter().copied().filter(|&v| v != 0).collect();
        assert_eq!(ids, (1..=6).collect());
        for inst in &scene.instances {
            assert!(inst.angle.is_some());
        }
    }

    #[test]
    fn background_windows_avoid_all_centroids() {
        let scene = build_grid_scene::<f32>(
            &scene_archetypes(),
            32,
            2,
            2,
            96,
            &rotation_only(32, 0.3),
            11,
        )
        .unwrap();
        let patches =
            sample_background(&scene.image, &scene.centroids(), 32, 5, 3).unwrap();
        assert_eq!(patches.len(), 5);
        for p in &patches {
            for c in scene.centroids() {
                assert!(euclid(p.center, c) > 32.0);
            }
        }
    }

    #[test]
    fn mining_sampler_is_reexported_with_working_ratio_bounds() {
        assert!(HardExampleSampler::new(4, 0.25).is_ok());
        assert!(HardExampleSampler::new(4, 1.5).is_err());
    }
}
