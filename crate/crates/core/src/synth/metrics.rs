//! Evaluation metrics for fields, images, masks, and orientation labels.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{cast, Scalar};
use crate::warp::WarpField;

/// Vectors shorter than this count as background in [`angular_error`].
const FOREGROUND_NORM: f64 = 0.5;

fn check_same_shape<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(format!(
            "metric shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Zero-mean normalized cross-correlation of two fields, per displacement
/// component, averaged; result lies in [-1, 1].
pub fn ncc_field<S: Scalar>(a: &WarpField<S>, b: &WarpField<S>) -> Result<f64> {
    check_same_shape(a.displacement(), b.displacement())?;
    let mut total = 0.0;
    for component in 0..2 {
        let xs: Vec<f64> = a
            .displacement()
            .index_axis(ndarray::Axis(2), component)
            .iter()
            .map(|v| v.to_f64().unwrap_or(0.0))
            .collect();
        let ys: Vec<f64> = b
            .displacement()
            .index_axis(ndarray::Axis(2), component)
            .iter()
            .map(|v| v.to_f64().unwrap_or(0.0))
            .collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in xs.iter().zip(ys.iter()) {
            let dx = x - mx;
            let dy = y - my;
            cov += dx * dy;
            vx += dx * dx;
            vy += dy * dy;
        }
        let denom = (vx * vy).sqrt();
        total += if denom > 1e-24 {
            (cov / denom).clamp(-1.0, 1.0)
        } else if vx <= 1e-24 && vy <= 1e-24 {
            // Both components constant: identical up to mean, correlate
            // perfectly by convention.
            1.0
        } else {
            0.0
        };
    }
    Ok(total / 2.0)
}

/// Mean absolute difference between two fields' displacement entries.
pub fn l1_field<S: Scalar>(a: &WarpField<S>, b: &WarpField<S>) -> Result<f64> {
    l1_image(a.displacement(), b.displacement())
}

/// Mean absolute difference between two same-shaped grids.
pub fn l1_image<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        total += (x.to_f64().unwrap_or(0.0) - y.to_f64().unwrap_or(0.0)).abs();
    }
    Ok(total / n as f64)
}

fn mask_counts<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> Result<(f64, f64, f64)> {
    check_same_shape(a, b)?;
    let half = cast::<S>(0.5);
    let mut inter = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let xa = *x >= half;
        let yb = *y >= half;
        if xa {
            na += 1.0;
        }
        if yb {
            nb += 1.0;
        }
        if xa && yb {
            inter += 1.0;
        }
    }
    Ok((inter, na, nb))
}

/// Dice similarity coefficient 2|A∩B| / (|A|+|B|).
///
/// Two empty masks score 1; one empty mask scores 0 (with a warning).
pub fn dice<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> Result<f64> {
    let (inter, na, nb) = mask_counts(a, b)?;
    if na + nb == 0.0 {
        log::warn!("dice of two empty masks, defined as 1");
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("dice with one empty mask, defined as 0");
        return Ok(0.0);
    }
    Ok(2.0 * inter / (na + nb))
}

/// Intersection over union |A∩B| / |A∪B|, same empty-mask conventions.
pub fn iou<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> Result<f64> {
    let (inter, na, nb) = mask_counts(a, b)?;
    if na + nb == 0.0 {
        log::warn!("iou of two empty masks, defined as 1");
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("iou with one empty mask, defined as 0");
        return Ok(0.0);
    }
    Ok(inter / (na + nb - inter))
}

/// Mean absolute angle in degrees between per-pixel vectors, folded to
/// [0, 180], over pixels where both labels have foreground vectors.
///
/// An empty intersection scores the maximum 180 degrees (with a warning):
/// a prediction that shares no foreground with the truth has failed.
pub fn angular_error<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, k) = a.dim();
    if k != 2 {
        return Err(Error::dimension(format!("orientation labels need 2 planes, got {k}")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let ax = a[[y, x, 0]].to_f64().unwrap_or(0.0);
            let ay = a[[y, x, 1]].to_f64().unwrap_or(0.0);
            let bx = b[[y, x, 0]].to_f64().unwrap_or(0.0);
            let by = b[[y, x, 1]].to_f64().unwrap_or(0.0);
            if ax.hypot(ay) < FOREGROUND_NORM || bx.hypot(by) < FOREGROUND_NORM {
                continue;
            }
            let dot = ax * bx + ay * by;
            let cross = ax * by - ay * bx;
            total += cross.abs().atan2(dot).to_degrees();
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("angular error with empty foreground intersection, defined as 180");
        return Ok(180.0);
    }
    Ok(total / count as f64)
}

/// One benchmark table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub architecture: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Summarizes per-pair values into a row (sample standard deviation).
pub fn summarize(architecture: &str, metric: &str, values: &[f64]) -> BenchmarkRow {
    let n = values.len();
    let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
    let std = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    };
    BenchmarkRow {
        architecture: architecture.to_string(),
        metric: metric.to_string(),
        mean,
        std,
        n,
    }
}

/// Writes rows as pretty JSON.
pub fn write_report_json(path: &std::path::Path, rows: &[BenchmarkRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::format(format!("cannot encode report: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes rows as a CSV mirror of the JSON report.
pub fn write_report_csv(path: &std::path::Path, rows: &[BenchmarkRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::format(format!("report CSV: {e}")))?;
    writer
        .write_record(["architecture", "metric", "mean", "std", "n"])
        .map_err(|e| Error::format(format!("report CSV: {e}")))?;
    for row in rows {
        writer
            .write_record([
                row.architecture.clone(),
                row.metric.clone(),
                row.mean.to_string(),
                row.std.to_string(),
                row.n.to_string(),
            ])
            .map_err(|e| Error::format(format!("report CSV: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{make_warp, DiffeoKind, DiffeoSpec};
    use ndarray::Array3;

    fn sample_field() -> WarpField<f64> {
        let spec = DiffeoSpec {
            kind: DiffeoKind::DirectionalStretch { factor: 1.2, direction: [0.8, 0.6] },
            center: [7.5, 7.5],
        };
        make_warp(&spec, 16, 16).unwrap()
    }

    fn negate(field: &WarpField<f64>) -> WarpField<f64> {
        WarpField::new(field.displacement().mapv(|v| -v)).unwrap()
    }

    #[test]
    fn ncc_self_is_one_and_negation_is_minus_one() {
        let w = sample_field();
        assert!((ncc_field(&w, &w).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc_field(&w, &negate(&w)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_is_symmetric_and_bounded() {
        let a = sample_field();
        let b = make_warp::<f64>(
            &DiffeoSpec { kind: DiffeoKind::Rotation { angle: 0.4 }, center: [7.5, 7.5] },
            16,
            16,
        )
        .unwrap();
        let ab = ncc_field(&a, &b).unwrap();
        let ba = ncc_field(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    fn strip_mask(cols: std::ops::Range<usize>) -> Array3<f64> {
        Array3::from_shape_fn((4, 8, 1), |(_, x, _)| if cols.contains(&x) { 1.0 } else { 0.0 })
    }

    #[test]
    fn dice_and_iou_of_half_overlap() {
        // Equal-area strips overlapping on half their area: intersection 8,
        // areas 16 each, union 24.
        let a = strip_mask(0..4);
        let b = strip_mask(2..6);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_conventions() {
        let empty = Array3::<f64>::zeros((4, 8, 1));
        let full = strip_mask(0..8);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &full).unwrap(), 0.0);
        assert_eq!(iou(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn iou_never_exceeds_dice() {
        let a = strip_mask(0..5);
        let b = strip_mask(3..8);
        let d = dice(&a, &b).unwrap();
        let i = iou(&a, &b).unwrap();
        assert!(i <= d + 1e-12);
    }

    #[test]
    fn angular_error_of_rotated_field_is_the_angle()  {
        let deg30 = 30.0f64.to_radians();
        let a = Array3::from_shape_fn((4, 4, 2), |(_, _, c)| if c == 0 { 1.0 } else { 0.0 });
        let b = Array3::from_shape_fn((4, 4, 2), |(_, _, c)| {
            if c == 0 {
                deg30.cos()
            } else {
                deg30.sin()
            }
        });
        assert!((angular_error(&a, &b).unwrap() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn angular_error_folds_to_180() {
        let a = Array3::from_shape_fn((2, 2, 2), |(_, _, c)| if c == 0 { 1.0 } else { 0.0 });
        let b = a.mapv(|v: f64| -v);
        assert!((angular_error(&a, &b).unwrap() - 180.0).abs() < 1e-9);
    }

    #[test]
    fn angular_error_uses_foreground_intersection() {
        let mut a = Array3::<f64>::zeros((2, 2, 2));
        let mut b = Array3::<f64>::zeros((2, 2, 2));
        // Only (0,0) is foreground in both; (0,1) is foreground in a only.
        a[[0, 0, 0]] = 1.0;
        b[[0, 0, 1]] = 1.0;
        a[[0, 1, 0]] = 1.0;
        assert!((angular_error(&a, &b).unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn empty_intersection_scores_max_error() {
        let a = Array3::<f64>::zeros((2, 2, 2));
        let b = Array3::<f64>::zeros((2, 2, 2));
        assert_eq!(angular_error(&a, &b).unwrap(), 180.0);
    }

    #[test]
    fn summarize_mean_and_std() {
        let row = summarize("svf", "dsc", &[0.9, 1.0, 0.95]);
        assert!((row.mean - 0.95).abs() < 1e-12);
        assert!((row.std - 0.05).abs() < 1e-12);
        assert_eq!(row.n, 3);
    }

    #[test]
    fn report_writers_round_trip_json() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("report.json");
        let csv_path = dir.path().join("report.csv");
        let rows = vec![summarize("svf", "dsc", &[0.96, 0.97])];
        write_report_json(&json, &rows).unwrap();
        write_report_csv(&csv_path, &rows).unwrap();
        let text = std::fs::read_to_string(&json).unwrap();
        let back: Vec<BenchmarkRow> = serde_json::from_str(&text).unwrap();
        assert_eq!(rows, back);
        assert!(std::fs::read_to_string(&csv_path).unwrap().contains("architecture"));
    }
}
