//! Dense diffeomorphic warping fields.
//!
//! A [`WarpField`] stores one (dx, dy) displacement per output pixel under
//! the pull-back convention: `output(p) = input(p + displacement(p))`. The
//! coordinate map it realizes is `phi(p) = p + displacement(p)`, with
//! `p = (x, y)`, x along columns and y along rows.
//!
//! Five generators produce closed-form fields ([`make_warp`]): rotation,
//! uniform stretch, directional stretch, volume-preserving stretch, and
//! partial (regional) stretch. Fields compose ([`compose`]), invert by
//! fixed-point iteration ([`invert`]), resample patches and label stacks
//! ([`apply_warp_patch`], [`apply_warp_labels`]), and report local area
//! change ([`jacobian_det`]).

mod io;

pub use io::{load_field, load_field_meta, save_field, FieldMeta};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{cast, Scalar};
use crate::patch::{CellPatch, LabelChannel, LabelKind, LabelStack};

/// Warped orientation vectors shorter than this are treated as background;
/// longer ones are renormalized to unit length.
pub const ORIENTATION_NORM_FLOOR: f64 = 0.35;

/// Jacobian factors below this fail the partial-stretch fold check.
const FOLD_MARGIN: f64 = 0.02;

/// One of the five realistic deformation kinds, with its parameters.
///
/// Every kind acts about the owning [`DiffeoSpec`]'s center; for
/// `PartialStretch` that center is the stretched region's center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffeoKind {
    /// Rigid rotation by `angle` radians, counterclockwise in (x, y).
    Rotation { angle: f64 },
    /// Isotropic scaling by `factor`.
    UniformStretch { factor: f64 },
    /// Scaling by `factor` along `direction`, identity orthogonally.
    DirectionalStretch { factor: f64, direction: [f64; 2] },
    /// Scaling by `factor` along `direction` and `1/factor` orthogonally.
    VolumePreservingStretch { factor: f64, direction: [f64; 2] },
    /// Isotropic scaling by `factor` inside a disk of `region_radius`
    /// pixels, identity outside, cosine-blended over `blend_width`.
    PartialStretch { factor: f64, region_radius: f64, blend_width: f64 },
}

impl DiffeoKind {
    /// Short stable name, used in manifests and reports.
    pub fn tag(&self) -> DiffeoKindTag {
        match self {
            DiffeoKind::Rotation { .. } => DiffeoKindTag::Rotation,
            DiffeoKind::UniformStretch { .. } => DiffeoKindTag::UniformStretch,
            DiffeoKind::DirectionalStretch { .. } => DiffeoKindTag::DirectionalStretch,
            DiffeoKind::VolumePreservingStretch { .. } => DiffeoKindTag::VolumePreservingStretch,
            DiffeoKind::PartialStretch { .. } => DiffeoKindTag::PartialStretch,
        }
    }
}

/// Kind selector without parameters, for configs and sampling weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffeoKindTag {
    Rotation,
    UniformStretch,
    DirectionalStretch,
    VolumePreservingStretch,
    PartialStretch,
}

impl DiffeoKindTag {
    pub const ALL: [DiffeoKindTag; 5] = [
        DiffeoKindTag::Rotation,
        DiffeoKindTag::UniformStretch,
        DiffeoKindTag::DirectionalStretch,
        DiffeoKindTag::VolumePreservingStretch,
        DiffeoKindTag::PartialStretch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DiffeoKindTag::Rotation => "rotation",
            DiffeoKindTag::UniformStretch => "uniform_stretch",
            DiffeoKindTag::DirectionalStretch => "directional_stretch",
            DiffeoKindTag::VolumePreservingStretch => "volume_preserving_stretch",
            DiffeoKindTag::PartialStretch => "partial_stretch",
        }
    }
}

/// Symbolic parameterization of one deformation: kind plus the pixel
/// coordinates it acts about.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffeoSpec {
    pub kind: DiffeoKind,
    /// (x, y) fixed point of the map (region center for partial stretch).
    pub center: [f64; 2],
}

fn unit_direction(direction: [f64; 2]) -> Result<[f64; 2]> {
    let norm = (direction[0] * direction[0] + direction[1] * direction[1]).sqrt();
    if !norm.is_finite() || norm < 1e-9 {
        return Err(Error::parameter(format!("direction {direction:?} is degenerate")));
    }
    Ok([direction[0] / norm, direction[1] / norm])
}

fn check_stretch(factor: f64) -> Result<()> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(Error::parameter(format!("stretch factor must be positive, got {factor}")));
    }
    Ok(())
}

impl DiffeoSpec {
    /// Checks parameter legality: angle in (-pi, pi], positive stretch
    /// factors, non-degenerate directions, fold-free partial stretch.
    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::parameter(format!("center {:?} not finite", self.center)));
        }
        match &self.kind {
            DiffeoKind::Rotation { angle } => {
                if !angle.is_finite() || angle.abs() > std::f64::consts::PI + 1e-12 {
                    return Err(Error::parameter(format!(
                        "rotation angle {angle} outside (-pi, pi]"
                    )));
                }
            }
            DiffeoKind::UniformStretch { factor } => check_stretch(*factor)?,
            DiffeoKind::DirectionalStretch { factor, direction }
            | DiffeoKind::VolumePreservingStretch { factor, direction } => {
                check_stretch(*factor)?;
                unit_direction(*direction)?;
            }
            DiffeoKind::PartialStretch { factor, region_radius, blend_width } => {
                check_stretch(*factor)?;
                if !region_radius.is_finite() || *region_radius <= 0.0 {
                    return Err(Error::parameter(format!(
                        "region radius must be positive, got {region_radius}"
                    )));
                }
                if !blend_width.is_finite() || *blend_width <= 0.0 {
                    return Err(Error::parameter(format!(
                        "blend width must be positive, got {blend_width}"
                    )));
                }
                check_partial_stretch_folds(*factor, *region_radius, *blend_width)?;
            }
        }
        Ok(())
    }

    /// Forward coordinate map of this spec at (x, y), in f64.
    fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = (self.center[0], self.center[1]);
        let (rx, ry) = (x - cx, y - cy);
        match &self.kind {
            DiffeoKind::Rotation { angle } => {
                let (s, c) = angle.sin_cos();
                (cx + c * rx - s * ry, cy + s * rx + c * ry)
            }
            DiffeoKind::UniformStretch { factor } => (cx + factor * rx, cy + factor * ry),
            DiffeoKind::DirectionalStretch { factor, direction } => {
                let u = unit_direction(*direction).expect("validated direction");
                let along = rx * u[0] + ry * u[1];
                let gain = (factor - 1.0) * along;
                (x + gain * u[0], y + gain * u[1])
            }
            DiffeoKind::VolumePreservingStretch { factor, direction } => {
                let u = unit_direction(*direction).expect("validated direction");
                let v = [-u[1], u[0]];
                let along = rx * u[0] + ry * u[1];
                let across = rx * v[0] + ry * v[1];
                let (sa, sb) = (factor * along, across / factor);
                (cx + sa * u[0] + sb * v[0], cy + sa * u[1] + sb * v[1])
            }
            DiffeoKind::PartialStretch { factor, region_radius, blend_width } => {
                let t = (rx * rx + ry * ry).sqrt();
                let w = blend_weight(t, *region_radius, *blend_width);
                let gain = w * (factor - 1.0);
                (x + gain * rx, y + gain * ry)
            }
        }
    }

    /// The exact inverse spec, when one exists in closed form.
    ///
    /// Partial stretch has no closed-form inverse; use [`invert`].
    pub fn closed_form_inverse(&self) -> Option<DiffeoSpec> {
        let kind = match &self.kind {
            DiffeoKind::Rotation { angle } => DiffeoKind::Rotation { angle: -angle },
            DiffeoKind::UniformStretch { factor } => {
                DiffeoKind::UniformStretch { factor: 1.0 / factor }
            }
            DiffeoKind::DirectionalStretch { factor, direction } => {
                DiffeoKind::DirectionalStretch { factor: 1.0 / factor, direction: *direction }
            }
            DiffeoKind::VolumePreservingStretch { factor, direction } => {
                DiffeoKind::VolumePreservingStretch { factor: 1.0 / factor, direction: *direction }
            }
            DiffeoKind::PartialStretch { .. } => return None,
        };
        Some(DiffeoSpec { kind, center: self.center })
    }
}

/// Blending weight of the partial stretch: 1 inside the region, 0 outside
/// region + blend, cosine ramp between (C1 at both ends).
fn blend_weight(t: f64, region_radius: f64, blend_width: f64) -> f64 {
    if t <= region_radius {
        1.0
    } else if t >= region_radius + blend_width {
        0.0
    } else {
        0.5 * (1.0 + ((t - region_radius) * std::f64::consts::PI / blend_width).cos())
    }
}

/// Rejects partial-stretch parameters whose radial map folds.
///
/// The radial coordinate maps as t -> t(1 + (s-1)w(t)); its derivative
/// 1 + (s-1)(w + t w') and the tangential factor 1 + (s-1)w must stay
/// positive. Both are checked on a dense sample of the blend band.
fn check_partial_stretch_folds(factor: f64, region_radius: f64, blend_width: f64) -> Result<()> {
    let s1 = factor - 1.0;
    let steps = 257;
    for i in 0..steps {
        let t = region_radius + blend_width * i as f64 / (steps - 1) as f64;
        let w = blend_weight(t, region_radius, blend_width);
        let wprime = if t <= region_radius || t >= region_radius + blend_width {
            0.0
        } else {
            -(std::f64::consts::PI / (2.0 * blend_width))
                * ((t - region_radius) * std::f64::consts::PI / blend_width).sin()
        };
        let radial = 1.0 + s1 * (w + t * wprime);
        let tangential = 1.0 + s1 * w;
        if radial <= FOLD_MARGIN || tangential <= FOLD_MARGIN {
            return Err(Error::parameter(format!(
                "partial stretch folds: factor {factor}, radius {region_radius}, blend {blend_width}"
            )));
        }
    }
    Ok(())
}

/// Interpolation used when sampling at non-integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// What a sample outside the source grid reads as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zeros,
    Replicate,
}

/// How [`apply_warp_patch`] and [`apply_warp_labels`] resample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpPolicy {
    pub interpolation: Interpolation,
    pub padding: Padding,
    /// Warped binary masks are re-binarized at this threshold in (0,1).
    pub mask_rebinarize_threshold: f64,
    /// Multiply warped orientation vectors by the inverse local Jacobian,
    /// so directions co-rotate with the deformation.
    pub reorient_vectors: bool,
}

impl InterpPolicy {
    /// Default for intensity patches: bilinear, border-replicate.
    pub fn for_images() -> Self {
        InterpPolicy {
            interpolation: Interpolation::Bilinear,
            padding: Padding::Replicate,
            mask_rebinarize_threshold: 0.5,
            reorient_vectors: false,
        }
    }

    /// Default for label stacks: bilinear, zero padding (labels outside
    /// the source field are unknown).
    pub fn for_labels() -> Self {
        InterpPolicy {
            interpolation: Interpolation::Bilinear,
            padding: Padding::Zeros,
            mask_rebinarize_threshold: 0.5,
            reorient_vectors: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rebinarize_threshold > 0.0 && self.mask_rebinarize_threshold < 1.0) {
            return Err(Error::parameter(format!(
                "mask threshold must lie in (0,1), got {}",
                self.mask_rebinarize_threshold
            )));
        }
        Ok(())
    }
}

impl Default for InterpPolicy {
    fn default() -> Self {
        InterpPolicy::for_images()
    }
}

/// Dense per-pixel displacement grid under the pull-back convention.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField<S: Scalar> {
    /// (H, W, 2) displacements; plane 0 is dx, plane 1 is dy.
    displacement: Array3<S>,
}

impl<S: Scalar> WarpField<S> {
    /// Wraps a displacement grid, checking shape and finiteness.
    pub fn new(displacement: Array3<S>) -> Result<Self> {
        let (h, w, c) = displacement.dim();
        if c != 2 {
            return Err(Error::dimension(format!("displacement must have 2 planes, got {c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::dimension(format!("field must be at least 2x2, got {h}x{w}")));
        }
        if displacement.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("displacement contains non-finite values".to_string()));
        }
        Ok(WarpField { displacement })
    }

    /// The identity field.
    pub fn zeros(height: usize, width: usize) -> Self {
        WarpField { displacement: Array3::zeros((height, width, 2)) }
    }

    pub fn height(&self) -> usize {
        self.displacement.dim().0
    }

    pub fn width(&self) -> usize {
        self.displacement.dim().1
    }

    pub fn displacement(&self) -> &Array3<S> {
        &self.displacement
    }

    pub fn into_displacement(self) -> Array3<S> {
        self.displacement
    }

    /// Displacement vector at integer pixel (x, y).
    pub fn at(&self, x: usize, y: usize) -> [S; 2] {
        [self.displacement[[y, x, 0]], self.displacement[[y, x, 1]]]
    }

    /// Largest displacement magnitude over pixels at least `margin` away
    /// from every edge. Returns zero when the margin leaves no pixels.
    pub fn max_magnitude_inside(&self, margin: usize) -> S {
        let (h, w, _) = self.displacement.dim();
        let mut best = S::zero();
        if 2 * margin >= h || 2 * margin >= w {
            return best;
        }
        for y in margin..h - margin {
            for x in margin..w - margin {
                let dx = self.displacement[[y, x, 0]];
                let dy = self.displacement[[y, x, 1]];
                let mag = (dx * dx + dy * dy).sqrt();
                if mag > best {
                    best = mag;
                }
            }
        }
        best
    }

    /// Converts the scalar type (f32 fields to f64 for checks and back).
    pub fn cast<T: Scalar>(&self) -> WarpField<T> {
        WarpField {
            displacement: self.displacement.mapv(|v| T::from(v).expect("scalar convert")),
        }
    }
}

/// Realizes a spec as a dense field: displacement(p) = phi(p) - p.
pub fn make_warp<S: Scalar>(spec: &DiffeoSpec, height: usize, width: usize) -> Result<WarpField<S>> {
    spec.validate()?;
    if height < 2 || width < 2 {
        return Err(Error::dimension(format!("field must be at least 2x2, got {height}x{width}")));
    }
    let mut displacement = Array3::zeros((height, width, 2));
    for iy in 0..height {
        for ix in 0..width {
            let (x, y) = (ix as f64, iy as f64);
            let (px, py) = spec.map_point(x, y);
            displacement[[iy, ix, 0]] = cast::<S>(px - x);
            displacement[[iy, ix, 1]] = cast::<S>(py - y);
        }
    }
    Ok(WarpField { displacement })
}

#[derive(Clone, Copy)]
struct Tap {
    y: isize,
    x: isize,
    weight: f64,
}

/// Bilinear or nearest taps for a sample at (x, y); `inside` is false for
/// taps that fell outside the grid (their indices come back clamped).
fn sample_taps(
    x: f64,
    y: f64,
    h: usize,
    w: usize,
    interp: Interpolation,
    taps: &mut [(Tap, bool); 4],
) -> usize {
    let clamp_tap = |ix: isize, iy: isize, weight: f64| -> (Tap, bool) {
        let inside = ix >= 0 && iy >= 0 && ix < w as isize && iy < h as isize;
        let tap = Tap {
            x: ix.clamp(0, w as isize - 1),
            y: iy.clamp(0, h as isize - 1),
            weight,
        };
        (tap, inside)
    };
    match interp {
        Interpolation::Nearest => {
            taps[0] = clamp_tap(x.round() as isize, y.round() as isize, 1.0);
            1
        }
        Interpolation::Bilinear => {
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            taps[0] = clamp_tap(x0, y0, (1.0 - fx) * (1.0 - fy));
            taps[1] = clamp_tap(x0 + 1, y0, fx * (1.0 - fy));
            taps[2] = clamp_tap(x0, y0 + 1, (1.0 - fx) * fy);
            taps[3] = clamp_tap(x0 + 1, y0 + 1, fx * fy);
            4
        }
    }
}

/// Samples one channel of a (H, W, C) grid at fractional (x, y).
fn sample_channel<S: Scalar>(
    data: &Array3<S>,
    channel: usize,
    x: f64,
    y: f64,
    interp: Interpolation,
    padding: Padding,
) -> S {
    let (h, w, _) = data.dim();
    let mut taps = [(Tap { y: 0, x: 0, weight: 0.0 }, false); 4];
    let n = sample_taps(x, y, h, w, interp, &mut taps);
    let mut acc = S::zero();
    for (tap, inside) in taps.iter().take(n) {
        if tap.weight == 0.0 {
            continue;
        }
        let value = match (padding, inside) {
            (Padding::Zeros, false) => S::zero(),
            _ => data[[tap.y as usize, tap.x as usize, channel]],
        };
        acc += value * cast::<S>(tap.weight);
    }
    acc
}

/// Bilinear sample of a displacement grid with border replication.
fn sample_field<S: Scalar>(displacement: &Array3<S>, x: f64, y: f64) -> (S, S) {
    let dx = sample_channel(displacement, 0, x, y, Interpolation::Bilinear, Padding::Replicate);
    let dy = sample_channel(displacement, 1, x, y, Interpolation::Bilinear, Padding::Replicate);
    (dx, dy)
}

/// Resamples every channel of a (H, W, C) grid through the field.
pub fn warp_grid<S: Scalar>(
    field: &WarpField<S>,
    data: &Array3<S>,
    interp: Interpolation,
    padding: Padding,
) -> Result<Array3<S>> {
    let (h, w, c) = data.dim();
    if (field.height(), field.width()) != (h, w) {
        return Err(Error::dimension(format!(
            "field {}x{} does not match data {h}x{w}",
            field.height(),
            field.width()
        )));
    }
    let mut out = Array3::zeros((h, w, c));
    for iy in 0..h {
        for ix in 0..w {
            let sx = ix as f64 + field.displacement[[iy, ix, 0]].to_f64().unwrap_or(0.0);
            let sy = iy as f64 + field.displacement[[iy, ix, 1]].to_f64().unwrap_or(0.0);
            for ch in 0..c {
                out[[iy, ix, ch]] = sample_channel(data, ch, sx, sy, interp, padding);
            }
        }
    }
    Ok(out)
}

/// Warps an intensity patch under the policy.
pub fn apply_warp_patch<S: Scalar>(
    field: &WarpField<S>,
    patch: &CellPatch<S>,
    policy: &InterpPolicy,
) -> Result<CellPatch<S>> {
    policy.validate()?;
    let out = warp_grid(field, &patch.intensities, policy.interpolation, policy.padding)?;
    CellPatch::new(out, patch.source_id.clone(), patch.center)
}

/// 2x2 Jacobian of phi(p) = p + d(p) at pixel (x, y), by central
/// differences with replicated borders. Row-major [[a,b],[c,d]] meaning
/// [[dphix/dx, dphix/dy], [dphiy/dx, dphiy/dy]].
fn jacobian_at<S: Scalar>(displacement: &Array3<S>, x: usize, y: usize) -> [f64; 4] {
    let (h, w, _) = displacement.dim();
    let get = |yy: isize, xx: isize, c: usize| -> f64 {
        let yy = yy.clamp(0, h as isize - 1) as usize;
        let xx = xx.clamp(0, w as isize - 1) as usize;
        displacement[[yy, xx, c]].to_f64().unwrap_or(0.0)
    };
    let (xi, yi) = (x as isize, y as isize);
    let span_x = (xi + 1).min(w as isize - 1) - (xi - 1).max(0);
    let span_y = (yi + 1).min(h as isize - 1) - (yi - 1).max(0);
    let inv_sx = 1.0 / span_x as f64;
    let inv_sy = 1.0 / span_y as f64;
    let dxdx = (get(yi, xi + 1, 0) - get(yi, xi - 1, 0)) * inv_sx;
    let dxdy = (get(yi + 1, xi, 0) - get(yi - 1, xi, 0)) * inv_sy;
    let dydx = (get(yi, xi + 1, 1) - get(yi, xi - 1, 1)) * inv_sx;
    let dydy = (get(yi + 1, xi, 1) - get(yi - 1, xi, 1)) * inv_sy;
    [1.0 + dxdx, dxdy, dydx, 1.0 + dydy]
}

/// Warps a label stack: masks are re-binarized, orientation vectors are
/// optionally reoriented by the inverse local Jacobian and renormalized,
/// generic scalars pass through the plain resampler.
pub fn apply_warp_labels<S: Scalar>(
    field: &WarpField<S>,
    labels: &LabelStack<S>,
    policy: &InterpPolicy,
) -> Result<LabelStack<S>> {
    policy.validate()?;
    let mut channels = Vec::with_capacity(labels.channels.len());
    for ch in &labels.channels {
        let warped = warp_grid(field, &ch.data, policy.interpolation, policy.padding)?;
        let data = match ch.kind {
            LabelKind::BinaryMask => {
                let thr = cast::<S>(policy.mask_rebinarize_threshold);
                warped.mapv(|v| if v >= thr { S::one() } else { S::zero() })
            }
            LabelKind::OrientationGradient => {
                let (h, w, _) = warped.dim();
                let floor = cast::<S>(ORIENTATION_NORM_FLOOR);
                let mut out = warped;
                for y in 0..h {
                    for x in 0..w {
                        let mut vx = out[[y, x, 0]];
                        let mut vy = out[[y, x, 1]];
                        if policy.reorient_vectors {
                            let j = jacobian_at(&field.displacement, x, y);
                            let det = j[0] * j[3] - j[1] * j[2];
                            if det.abs() > 1e-6 {
                                let (fx, fy) = (vx.to_f64().unwrap_or(0.0), vy.to_f64().unwrap_or(0.0));
                                let inv_det = 1.0 / det;
                                let rx = (j[3] * fx - j[1] * fy) * inv_det;
                                let ry = (-j[2] * fx + j[0] * fy) * inv_det;
                                vx = cast::<S>(rx);
                                vy = cast::<S>(ry);
                            }
                        }
                        let norm = (vx * vx + vy * vy).sqrt();
                        if norm >= floor {
                            out[[y, x, 0]] = vx / norm;
                            out[[y, x, 1]] = vy / norm;
                        } else {
                            out[[y, x, 0]] = S::zero();
                            out[[y, x, 1]] = S::zero();
                        }
                    }
                }
                out
            }
            LabelKind::GenericScalar => warped,
        };
        channels.push(LabelChannel { name: ch.name.clone(), kind: ch.kind, data });
    }
    LabelStack::new(channels)
}

/// Composes two fields into one realizing phi_outer after phi_inner:
/// applying the result equals applying `outer` first, then `inner`.
pub fn compose<S: Scalar>(outer: &WarpField<S>, inner: &WarpField<S>) -> Result<WarpField<S>> {
    let (h, w) = (outer.height(), outer.width());
    if (inner.height(), inner.width()) != (h, w) {
        return Err(Error::dimension(format!(
            "cannot compose {}x{} with {h}x{w}",
            inner.height(),
            inner.width()
        )));
    }
    let mut displacement = Array3::zeros((h, w, 2));
    for iy in 0..h {
        for ix in 0..w {
            let dix = inner.displacement[[iy, ix, 0]];
            let diy = inner.displacement[[iy, ix, 1]];
            let sx = ix as f64 + dix.to_f64().unwrap_or(0.0);
            let sy = iy as f64 + diy.to_f64().unwrap_or(0.0);
            let (ox, oy) = sample_field(&outer.displacement, sx, sy);
            displacement[[iy, ix, 0]] = dix + ox;
            displacement[[iy, ix, 1]] = diy + oy;
        }
    }
    Ok(WarpField { displacement })
}

/// Convergence record returned alongside the inverse field.
#[derive(Clone, Copy, Debug)]
pub struct InvertReport<S: Scalar> {
    /// Fixed-point iterations actually run.
    pub iterations: usize,
    /// Max update magnitude at the returned iterate, in pixels.
    pub residual: S,
    /// Whether the residual fell below the tolerance.
    pub converged: bool,
}

/// Default iteration budget for [`invert`].
pub const INVERT_DEFAULT_ITERATIONS: usize = 20;
/// Default update tolerance for [`invert`], in pixels.
pub const INVERT_DEFAULT_TOLERANCE: f64 = 0.01;

/// Inverts a field by fixed-point iteration v <- -d(p + v), starting from
/// zero. Returns the best iterate seen (smallest max update) plus a
/// convergence report; a non-converged result is still returned.
pub fn invert<S: Scalar>(
    field: &WarpField<S>,
    iterations: usize,
    tolerance: f64,
) -> (WarpField<S>, InvertReport<S>) {
    let (h, w) = (field.height(), field.width());
    let mut v = Array3::<S>::zeros((h, w, 2));
    let mut best = v.clone();
    let mut best_residual = S::infinity();
    let mut used = 0;
    let mut converged = false;
    for k in 0..iterations {
        used = k + 1;
        let mut next = Array3::<S>::zeros((h, w, 2));
        let mut max_update = S::zero();
        for iy in 0..h {
            for ix in 0..w {
                let sx = ix as f64 + v[[iy, ix, 0]].to_f64().unwrap_or(0.0);
                let sy = iy as f64 + v[[iy, ix, 1]].to_f64().unwrap_or(0.0);
                let (dx, dy) = sample_field(&field.displacement, sx, sy);
                let nx = -dx;
                let ny = -dy;
                let ux = nx - v[[iy, ix, 0]];
                let uy = ny - v[[iy, ix, 1]];
                let update = (ux * ux + uy * uy).sqrt();
                if update > max_update {
                    max_update = update;
                }
                next[[iy, ix, 0]] = nx;
                next[[iy, ix, 1]] = ny;
            }
        }
        v = next;
        if max_update < best_residual {
            best_residual = max_update;
            best = v.clone();
        }
        if max_update.to_f64().unwrap_or(f64::INFINITY) < tolerance {
            converged = true;
            break;
        }
    }
    if used == 0 {
        best_residual = S::zero();
    }
    (
        WarpField { displacement: best },
        InvertReport { iterations: used, residual: best_residual, converged },
    )
}

/// Finite-difference Jacobian determinant of phi(p) = p + d(p) at interior
/// pixels; output is (H-2, W-2).
pub fn jacobian_det<S: Scalar>(field: &WarpField<S>) -> Result<Array2<S>> {
    let (h, w) = (field.height(), field.width());
    if h < 3 || w < 3 {
        return Err(Error::dimension(format!("need at least 3x3 for Jacobians, got {h}x{w}")));
    }
    let mut out = Array2::zeros((h - 2, w - 2));
    for iy in 1..h - 1 {
        for ix in 1..w - 1 {
            let j = jacobian_at(&field.displacement, ix, iy);
            out[[iy - 1, ix - 1]] = cast::<S>(j[0] * j[3] - j[1] * j[2]);
        }
    }
    Ok(out)
}

/// Relative weight of one deformation kind in the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindWeight {
    pub kind: DiffeoKindTag,
    pub weight: f64,
}

/// Parameter ranges and kind weights for [`sample_diffeo`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub kinds: Vec<KindWeight>,
    /// Rotation angle range in radians, within [-pi, pi].
    pub rotation_range: [f64; 2],
    /// Stretch factor range [s_min, s_max] with 0 < s_min <= 1 <= s_max.
    pub stretch_range: [f64; 2],
    /// Partial-stretch region radius range, in pixels.
    pub region_radius_range: [f64; 2],
    /// Partial-stretch blend width as a multiple of the region radius.
    pub blend_width_factor: f64,
    /// (x, y) the sampled deformations act about.
    pub center: [f64; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig::for_patch(32)
    }
}

impl AugmentationConfig {
    /// Full-range defaults for a size×size patch, centered on the patch:
    /// any rotation, stretches in [0.7, 1.4], regions 25-50% of the patch.
    pub fn for_patch(size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        AugmentationConfig {
            kinds: DiffeoKindTag::ALL
                .iter()
                .map(|&kind| KindWeight { kind, weight: 1.0 })
                .collect(),
            rotation_range: [-std::f64::consts::PI, std::f64::consts::PI],
            stretch_range: [0.7, 1.4],
            region_radius_range: [0.25 * size as f64, 0.5 * size as f64],
            blend_width_factor: 1.0,
            center: [c, c],
        }
    }

    /// Mid-range parameters: rotations up to 0.9 rad, stretches in
    /// [0.75, 1.35]. Every kind produced from these ranges is invertible
    /// by the default fixed-point budget on patch-sized grids.
    pub fn mid_range(size: usize) -> Self {
        AugmentationConfig {
            rotation_range: [-0.9, 0.9],
            stretch_range: [0.75, 1.35],
            ..AugmentationConfig::for_patch(size)
        }
    }

    /// Residual-scale deformations: what remains after a query has been
    /// matched to a nearby archetype, and what a mapper is trained to undo.
    pub fn small_residual(size: usize) -> Self {
        AugmentationConfig {
            rotation_range: [-0.35, 0.35],
            stretch_range: [0.85, 1.18],
            ..AugmentationConfig::for_patch(size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("augmentation kind set is empty".to_string()));
        }
        if self.kinds.iter().any(|k| !k.weight.is_finite() || k.weight < 0.0) {
            return Err(Error::Config("kind weights must be finite and >= 0".to_string()));
        }
        let total: f64 = self.kinds.iter().map(|k| k.weight).sum();
        if total <= 0.0 {
            return Err(Error::Config("kind weights sum to zero".to_string()));
        }
        let [r0, r1] = self.rotation_range;
        if !(r0 <= r1) || r0 < -std::f64::consts::PI - 1e-12 || r1 > std::f64::consts::PI + 1e-12 {
            return Err(Error::Config(format!("bad rotation range [{r0}, {r1}]")));
        }
        let [s0, s1] = self.stretch_range;
        if !(s0 > 0.0 && s0 <= 1.0 && 1.0 <= s1 && s0 <= s1) {
            return Err(Error::Config(format!(
                "stretch range [{s0}, {s1}] must satisfy 0 < s_min <= 1 <= s_max"
            )));
        }
        let [g0, g1] = self.region_radius_range;
        if !(g0 > 0.0 && g0 <= g1) {
            return Err(Error::Config(format!("bad region radius range [{g0}, {g1}]")));
        }
        if !(self.blend_width_factor > 0.0) {
            return Err(Error::Config("blend width factor must be positive".to_string()));
        }
        Ok(())
    }
}

fn draw_range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws one legal spec from the config. Deterministic given the RNG state.
pub fn sample_diffeo<S: Rng>(config: &AugmentationConfig, rng: &mut S) -> Result<DiffeoSpec> {
    config.validate()?;
    let total: f64 = config.kinds.iter().map(|k| k.weight).sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut chosen = config.kinds[config.kinds.len() - 1].kind;
    for kw in &config.kinds {
        if pick < kw.weight {
            chosen = kw.kind;
            break;
        }
        pick -= kw.weight;
    }
    let [s0, s1] = config.stretch_range;
    let kind = match chosen {
        DiffeoKindTag::Rotation => DiffeoKind::Rotation {
            angle: draw_range(rng, config.rotation_range[0], config.rotation_range[1]),
        },
        DiffeoKindTag::UniformStretch => {
            DiffeoKind::UniformStretch { factor: draw_range(rng, s0, s1) }
        }
        DiffeoKindTag::DirectionalStretch => {
            let factor = draw_range(rng, s0, s1);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            DiffeoKind::DirectionalStretch { factor, direction: [theta.cos(), theta.sin()] }
        }
        DiffeoKindTag::VolumePreservingStretch => {
            let factor = draw_range(rng, s0, s1);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            DiffeoKind::VolumePreservingStretch { factor, direction: [theta.cos(), theta.sin()] }
        }
        DiffeoKindTag::PartialStretch => {
            let factor = draw_range(rng, s0, s1);
            let region_radius =
                draw_range(rng, config.region_radius_range[0], config.region_radius_range[1]);
            DiffeoKind::PartialStretch {
                factor,
                region_radius,
                blend_width: config.blend_width_factor * region_radius,
            }
        }
    };
    let spec = DiffeoSpec { kind, center: config.center };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::array;

    fn center_spec(kind: DiffeoKind, n: usize) -> DiffeoSpec {
        let c = (n as f64 - 1.0) / 2.0;
        DiffeoSpec { kind, center: [c, c] }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let spec = center_spec(DiffeoKind::Rotation { angle: 0.0 }, 8);
        let field: WarpField<f64> = make_warp(&spec, 8, 8).unwrap();
        assert!(field.displacement().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn pi_rotation_maps_p_to_reflected_point() {
        // theta = pi about c sends p to 2c - p; checked on the full 5x5 grid.
        let spec = center_spec(DiffeoKind::Rotation { angle: std::f64::consts::PI }, 5);
        let field: WarpField<f64> = make_warp(&spec, 5, 5).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let d = field.at(x, y);
                let target = [2.0 * 2.0 - x as f64, 2.0 * 2.0 - y as f64];
                assert!((x as f64 + d[0] - target[0]).abs() < 1e-9);
                assert!((y as f64 + d[1] - target[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn volume_preserving_stretch_has_unit_jacobian() {
        let spec = center_spec(
            DiffeoKind::VolumePreservingStretch { factor: 2.0, direction: [1.0, 0.0] },
            16,
        );
        let field: WarpField<f64> = make_warp(&spec, 16, 16).unwrap();
        let dets = jacobian_det(&field).unwrap();
        for &d in dets.iter() {
            assert!((d - 1.0).abs() < 1e-2, "jacdet {d} should be 1");
        }
    }

    #[test]
    fn uniform_stretch_jacobian_is_s_squared() {
        let spec = center_spec(DiffeoKind::UniformStretch { factor: 1.3 }, 16);
        let field: WarpField<f64> = make_warp(&spec, 16, 16).unwrap();
        let dets = jacobian_det(&field).unwrap();
        for &d in dets.iter() {
            assert!((d - 1.69).abs() < 1e-2, "jacdet {d} should be 1.69");
        }
    }

    #[test]
    fn rotation_jacobian_is_one() {
        let spec = center_spec(DiffeoKind::Rotation { angle: 0.7 }, 16);
        let field: WarpField<f64> = make_warp(&spec, 16, 16).unwrap();
        let dets = jacobian_det(&field).unwrap();
        for &d in dets.iter() {
            assert!((d - 1.0).abs() < 1e-6, "jacdet {d} should be 1");
        }
    }

    #[test]
    fn zero_field_jacobian_is_one() {
        let field = WarpField::<f64>::zeros(6, 6);
        let dets = jacobian_det(&field).unwrap();
        assert!(dets.iter().all(|&d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_field_apply_is_identity() {
        let field = WarpField::<f64>::zeros(4, 4);
        let data = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| (y * 8 + x * 2 + c) as f64);
        let out = warp_grid(&field, &data, Interpolation::Bilinear, Padding::Replicate).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn constant_shift_moves_ramp_one_pixel() {
        // displacement (1, 0): output(x) = input(x + 1), replicated border.
        let mut disp = Array3::<f64>::zeros((4, 4, 2));
        disp.index_axis_mut(ndarray::Axis(2), 0).fill(1.0);
        let field = WarpField::new(disp).unwrap();
        let data = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (y * 4 + x) as f64);
        let out = warp_grid(&field, &data, Interpolation::Bilinear, Padding::Replicate).unwrap();
        for y in 0..4usize {
            for x in 0..4usize {
                let sx = (x + 1).min(3);
                assert!((out[[y, x, 0]] - data[[y, sx, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_rotation_permutes_3x3_pixels() {
        // Asymmetric 3x3 patch rotated by 90 degrees about its center.
        // phi(p) = c + R(p - c); output(p) = input(phi(p)). Every phi(p)
        // lands on an integer pixel, so the warp is an exact permutation.
        let data = array![[[1.0f64], [2.0], [3.0]], [[4.0], [5.0], [6.0]], [[7.0], [8.0], [9.0]]];
        let spec = center_spec(DiffeoKind::Rotation { angle: std::f64::consts::FRAC_PI_2 }, 3);
        let field: WarpField<f64> = make_warp(&spec, 3, 3).unwrap();
        let out = warp_grid(&field, &data, Interpolation::Bilinear, Padding::Replicate).unwrap();
        // phi rotates (x,y) counterclockwise in (x, y) coordinates; with y
        // down that reads clockwise on screen. output(0,0) samples
        // phi(0,0) = (2,0): input value 3.
        let expected = array![[[3.0f64], [6.0], [9.0]], [[2.0], [5.0], [8.0]], [[1.0], [4.0], [7.0]]];
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9, "rotation permutation mismatch");
        }
    }

    #[test]
    fn compose_with_zero_returns_other() {
        let spec = center_spec(DiffeoKind::Rotation { angle: 0.5 }, 16);
        let w: WarpField<f64> = make_warp(&spec, 16, 16).unwrap();
        let z = WarpField::<f64>::zeros(16, 16);
        let a = compose(&z, &w).unwrap();
        let b = compose(&w, &z).unwrap();
        for (x, y) in a.displacement().iter().zip(w.displacement().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in b.displacement().iter().zip(w.displacement().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn composed_rotations_add_angles() {
        let n = 64;
        let w1: WarpField<f64> = make_warp(&center_spec(DiffeoKind::Rotation { angle: 0.3 }, n), n, n).unwrap();
        let w2: WarpField<f64> = make_warp(&center_spec(DiffeoKind::Rotation { angle: 0.4 }, n), n, n).unwrap();
        let sum: WarpField<f64> = make_warp(&center_spec(DiffeoKind::Rotation { angle: 0.7 }, n), n, n).unwrap();
        let got = compose(&w1, &w2).unwrap();
        // Interior only: near the border the resampled displacement is
        // clamped where phi leaves the grid.
        let margin = 16;
        let mut max_err: f64 = 0.0;
        for y in margin..n - margin {
            for x in margin..n - margin {
                let g = got.at(x, y);
                let e = sum.at(x, y);
                let err = ((g[0] - e[0]).powi(2) + (g[1] - e[1]).powi(2)).sqrt();
                max_err = max_err.max(err);
            }
        }
        assert!(max_err < 0.1, "composed rotation error {max_err}");
    }

    #[test]
    fn invert_zero_is_zero() {
        let z = WarpField::<f64>::zeros(8, 8);
        let (inv, report) = invert(&z, 20, 0.01);
        assert!(report.converged);
        assert!(inv.displacement().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invert_rotation_matches_closed_form() {
        let n = 64;
        let spec = center_spec(DiffeoKind::Rotation { angle: 0.5 }, n);
        let w: WarpField<f64> = make_warp(&spec, n, n).unwrap();
        let (inv, report) = invert(&w, 100, 1e-3);
        assert!(report.converged, "residual {}", report.residual);
        let closed: WarpField<f64> =
            make_warp(&spec.closed_form_inverse().unwrap(), n, n).unwrap();
        let margin = 16;
        let mut max_err: f64 = 0.0;
        for y in margin..n - margin {
            for x in margin..n - margin {
                let g = inv.at(x, y);
                let e = closed.at(x, y);
                max_err = max_err.max(((g[0] - e[0]).powi(2) + (g[1] - e[1]).powi(2)).sqrt());
            }
        }
        assert!(max_err < 0.1, "inverse rotation error {max_err}");
    }

    #[test]
    fn invert_uniform_stretch_matches_closed_form() {
        let n = 64;
        let spec = center_spec(DiffeoKind::UniformStretch { factor: 1.3 }, n);
        let w: WarpField<f64> = make_warp(&spec, n, n).unwrap();
        let (inv, report) = invert(&w, 100, 1e-3);
        assert!(report.converged);
        let closed: WarpField<f64> =
            make_warp(&spec.closed_form_inverse().unwrap(), n, n).unwrap();
        let margin = 16;
        let mut max_err: f64 = 0.0;
        for y in margin..n - margin {
            for x in margin..n - margin {
                let g = inv.at(x, y);
                let e = closed.at(x, y);
                max_err = max_err.max(((g[0] - e[0]).powi(2) + (g[1] - e[1]).powi(2)).sqrt());
            }
        }
        assert!(max_err < 0.1, "inverse stretch error {max_err}");
    }

    #[test]
    fn cycle_consistency_all_kinds_mid_range() {
        // compose(W, invert(W)) should be near-zero on the interior for
        // each generator kind at mid-range parameters.
        let n = 64;
        let config = AugmentationConfig::mid_range(n);
        for tag in DiffeoKindTag::ALL {
            let mut cfg = config.clone();
            cfg.kinds = vec![KindWeight { kind: tag, weight: 1.0 }];
            let mut rng = substream(11, tag.name());
            let spec = sample_diffeo(&cfg, &mut rng).unwrap();
            let w: WarpField<f64> = make_warp(&spec, n, n).unwrap();
            let (inv, _) = invert(&w, 100, 1e-3);
            let cycle = compose(&w, &inv).unwrap();
            let residual = cycle.max_magnitude_inside(n / 4);
            assert!(residual < 0.25, "{} cycle residual {residual}", tag.name());
        }
    }

    #[test]
    fn closed_form_inverse_composes_to_identity() {
        let n = 48;
        let specs = [
            center_spec(DiffeoKind::Rotation { angle: 0.8 }, n),
            center_spec(DiffeoKind::UniformStretch { factor: 0.8 }, n),
            center_spec(
                DiffeoKind::DirectionalStretch { factor: 1.3, direction: [0.6, 0.8] },
                n,
            ),
            center_spec(
                DiffeoKind::VolumePreservingStretch { factor: 1.25, direction: [1.0, 1.0] },
                n,
            ),
        ];
        for spec in &specs {
            let w: WarpField<f64> = make_warp(spec, n, n).unwrap();
            let wi: WarpField<f64> =
                make_warp(&spec.closed_form_inverse().unwrap(), n, n).unwrap();
            let cycle = compose(&w, &wi).unwrap();
            let residual = cycle.max_magnitude_inside(n / 4);
            assert!(residual < 0.1, "{:?} closed-form cycle residual {residual}", spec.kind);
        }
    }

    #[test]
    fn sampled_specs_have_positive_jacobian() {
        let n = 32;
        let config = AugmentationConfig::for_patch(n);
        let mut rng = substream(3, "jacdet");
        for _ in 0..40 {
            let spec = sample_diffeo(&config, &mut rng).unwrap();
            let field: WarpField<f64> = make_warp(&spec, n, n).unwrap();
            let dets = jacobian_det(&field).unwrap();
            assert!(
                dets.iter().all(|&d| d > 0.0),
                "non-positive jacdet for {:?}",
                spec.kind
            );
        }
    }

    #[test]
    fn partial_stretch_is_identity_outside_region() {
        let n = 64;
        let spec = center_spec(
            DiffeoKind::PartialStretch { factor: 1.3, region_radius: 8.0, blend_width: 8.0 },
            n,
        );
        let field: WarpField<f64> = make_warp(&spec, n, n).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        for y in 0..n {
            for x in 0..n {
                let t = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                let d = field.at(x, y);
                if t >= 16.0 {
                    assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12);
                }
                if t <= 8.0 {
                    let expected = [(x as f64 - c) * 0.3, (y as f64 - c) * 0.3];
                    assert!((d[0] - expected[0]).abs() < 1e-9);
                    assert!((d[1] - expected[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn folding_partial_stretch_rejected() {
        let spec = center_spec(
            DiffeoKind::PartialStretch { factor: 3.0, region_radius: 10.0, blend_width: 2.0 },
            64,
        );
        assert!(matches!(make_warp::<f64>(&spec, 64, 64), Err(Error::Parameter(_))));
    }

    #[test]
    fn out_of_range_rotation_rejected() {
        let spec = center_spec(DiffeoKind::Rotation { angle: 4.0 }, 8);
        assert!(matches!(make_warp::<f64>(&spec, 8, 8), Err(Error::Parameter(_))));
    }

    #[test]
    fn nonpositive_stretch_rejected() {
        let spec = center_spec(DiffeoKind::UniformStretch { factor: 0.0 }, 8);
        assert!(matches!(make_warp::<f64>(&spec, 8, 8), Err(Error::Parameter(_))));
    }

    #[test]
    fn sampler_is_deterministic() {
        let config = AugmentationConfig::for_patch(32);
        let a = sample_diffeo(&config, &mut substream(9, "draw")).unwrap();
        let b = sample_diffeo(&config, &mut substream(9, "draw")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_respects_concentrated_weights() {
        let mut config = AugmentationConfig::for_patch(32);
        config.kinds = vec![KindWeight { kind: DiffeoKindTag::Rotation, weight: 1.0 }];
        let mut rng = substream(1, "only-rotation");
        for _ in 0..20 {
            let spec = sample_diffeo(&config, &mut rng).unwrap();
            assert!(matches!(spec.kind, DiffeoKind::Rotation { .. }));
        }
    }

    #[test]
    fn sampler_kind_frequencies_are_uniform() {
        // 10^4 draws over 5 equally weighted kinds: each frequency within
        // 5 sigma of 0.2, sigma = sqrt(0.2 * 0.8 / 10^4).
        let config = AugmentationConfig::for_patch(32);
        let mut rng = substream(5, "frequencies");
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let spec = sample_diffeo(&config, &mut rng).unwrap();
            *counts.entry(spec.kind.tag()).or_insert(0usize) += 1;
        }
        let sigma = (0.2 * 0.8 / draws as f64).sqrt();
        for tag in DiffeoKindTag::ALL {
            let freq = *counts.get(&tag).unwrap_or(&0) as f64 / draws as f64;
            assert!(
                (freq - 0.2).abs() < 5.0 * sigma,
                "{} frequency {freq} outside 5 sigma",
                tag.name()
            );
        }
    }

    #[test]
    fn empty_kind_set_is_config_error() {
        let mut config = AugmentationConfig::for_patch(32);
        config.kinds.clear();
        let err = sample_diffeo(&config, &mut substream(0, "none")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn integer_translation_is_exact_under_replicate() {
        let mut disp = Array3::<f64>::zeros((6, 6, 2));
        disp.index_axis_mut(ndarray::Axis(2), 0).fill(2.0);
        disp.index_axis_mut(ndarray::Axis(2), 1).fill(-1.0);
        let field = WarpField::new(disp).unwrap();
        let data = Array3::from_shape_fn((6, 6, 1), |(y, x, _)| (y * 17 + x * 3) as f64);
        let out = warp_grid(&field, &data, Interpolation::Bilinear, Padding::Replicate).unwrap();
        for y in 0..6usize {
            for x in 0..6usize {
                let sx = (x + 2).min(5);
                let sy = y.saturating_sub(1);
                assert_eq!(out[[y, x, 0]], data[[sy, sx, 0]]);
            }
        }
    }

    #[test]
    fn zero_padding_reads_zero_outside() {
        let mut disp = Array3::<f64>::zeros((3, 3, 2));
        disp.index_axis_mut(ndarray::Axis(2), 0).fill(5.0);
        let field = WarpField::new(disp).unwrap();
        let data = Array3::from_elem((3, 3, 1), 7.0);
        let out = warp_grid(&field, &data, Interpolation::Bilinear, Padding::Zeros).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warped_mask_stays_binary() {
        let n = 16;
        let mut mask = Array3::<f64>::zeros((n, n, 1));
        for y in 5..11 {
            for x in 5..11 {
                mask[[y, x, 0]] = 1.0;
            }
        }
        let labels = LabelStack::new(vec![LabelChannel {
            name: "mask".into(),
            kind: LabelKind::BinaryMask,
            data: mask,
        }])
        .unwrap();
        let spec = center_spec(DiffeoKind::Rotation { angle: 0.4 }, n);
        let field: WarpField<f64> = make_warp(&spec, n, n).unwrap();
        let warped = apply_warp_labels(&field, &labels, &InterpPolicy::for_labels()).unwrap();
        let data = &warped.channels[0].data;
        assert!(data.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(data.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn reoriented_vectors_follow_rotation() {
        // A uniform unit vector field rotated by theta should come back
        // rotated by -theta (the content rotates by -theta under pull-back).
        let n = 17;
        let theta = 0.6;
        let mut data = Array3::<f64>::zeros((n, n, 2));
        for y in 0..n {
            for x in 0..n {
                data[[y, x, 0]] = 1.0;
            }
        }
        let labels = LabelStack::new(vec![LabelChannel {
            name: "orient".into(),
            kind: LabelKind::OrientationGradient,
            data,
        }])
        .unwrap();
        let spec = center_spec(DiffeoKind::Rotation { angle: theta }, n);
        let field: WarpField<f64> = make_warp(&spec, n, n).unwrap();
        let mut policy = InterpPolicy::for_labels();
        policy.reorient_vectors = true;
        let warped = apply_warp_labels(&field, &labels, &policy).unwrap();
        let c = n / 2;
        let vx = warped.channels[0].data[[c, c, 0]];
        let vy = warped.channels[0].data[[c, c, 1]];
        // J = R(theta), J^-1 (1,0) = (cos theta, -sin theta).
        assert!((vx - theta.cos()).abs() < 1e-3, "vx {vx}");
        assert!((vy + theta.sin()).abs() < 1e-3, "vy {vy}");
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = WarpField::<f64>::zeros(4, 4);
        let b = WarpField::<f64>::zeros(5, 5);
        assert!(matches!(compose(&a, &b), Err(Error::Dimension(_))));
        let data = Array3::<f64>::zeros((5, 5, 1));
        assert!(matches!(
            warp_grid(&a, &data, Interpolation::Bilinear, Padding::Zeros),
            Err(Error::Dimension(_))
        ));
    }
}
