//! Synthetic shapes with exact ground truth, and evaluation metrics.
//!
//! Shapes are rasterized with 4x supersampling so masks and metrics are
//! stable across seeds. [`gen_pair`] produces (fixed, moving) patches
//! related by a known deformation, the unit-test protocol every
//! registration claim is checked against.

pub mod metrics;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{cast, Scalar};
use crate::patch::{CellPatch, LabelChannel, LabelKind, LabelStack};
use crate::rng::substream;
use crate::warp::{
    apply_warp_labels, apply_warp_patch, make_warp, DiffeoSpec, InterpPolicy, WarpField,
};

/// Geometry of one synthetic shape, centered in its patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Axis-aligned square of the given side length.
    Square { side: f64 },
    /// Ellipse with the major axis rotated by `angle` radians.
    Ellipse { semi_major: f64, semi_minor: f64, angle: f64 },
    /// Smooth star: boundary radius oscillates between `inner_radius`
    /// and `outer_radius` with `points`-fold symmetry.
    Star { points: usize, outer_radius: f64, inner_radius: f64, angle: f64 },
}

/// A shape plus its rendering intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Foreground intensity in [0,1].
    pub fg: f64,
    /// Background intensity in [0,1].
    pub bg: f64,
    /// When set, modulates the foreground with a smooth seeded texture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture_seed: Option<u64>,
    /// Intensity ramp along the major axis, in [-1, 1]. Nonzero values
    /// make one end of an oriented shape brighter than the other, so an
    /// orientation and its opposite render differently.
    #[serde(default)]
    pub polarity: f64,
}

/// Ellipses rounder than this have no major axis, hence no orientation.
const ELLIPSE_DEGENERATE_RATIO: f64 = 1.0 + 1e-6;
const SUPERSAMPLE: usize = 4;
const TEXTURE_AMPLITUDE: f64 = 0.25;

impl ShapeSpec {
    /// Largest distance from the shape center to its boundary, in pixels.
    pub fn extent(&self) -> f64 {
        match &self.kind {
            // The square is axis-aligned; its reach is measured per axis.
            ShapeKind::Square { side } => side / 2.0,
            ShapeKind::Ellipse { semi_major, semi_minor, .. } => semi_major.max(*semi_minor),
            ShapeKind::Star { outer_radius, inner_radius, .. } => {
                outer_radius.max(*inner_radius)
            }
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let legal_intensity = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !legal_intensity(self.fg) || !legal_intensity(self.bg) {
            return Err(Error::parameter(format!(
                "intensities must lie in [0,1], got fg {} bg {}",
                self.fg, self.bg
            )));
        }
        if !self.polarity.is_finite() || self.polarity.abs() > 1.0 {
            return Err(Error::parameter(format!(
                "polarity must lie in [-1, 1], got {}",
                self.polarity
            )));
        }
        let positive = |v: f64, name: &str| -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::parameter(format!("{name} must be positive, got {v}")));
            }
            Ok(())
        };
        match &self.kind {
            ShapeKind::Square { side } => positive(*side, "square side")?,
            ShapeKind::Ellipse { semi_major, semi_minor, angle } => {
                positive(*semi_major, "semi-major axis")?;
                positive(*semi_minor, "semi-minor axis")?;
                if *semi_major < *semi_minor {
                    return Err(Error::parameter(
                        "semi-major axis must be >= semi-minor axis".to_string(),
                    ));
                }
                if !angle.is_finite() {
                    return Err(Error::parameter("ellipse angle must be finite".to_string()));
                }
            }
            ShapeKind::Star { points, outer_radius, inner_radius, angle } => {
                if *points < 3 {
                    return Err(Error::parameter(format!("star needs >= 3 points, got {points}")));
                }
                positive(*outer_radius, "outer radius")?;
                positive(*inner_radius, "inner radius")?;
                if inner_radius >= outer_radius {
                    return Err(Error::parameter(
                        "star inner radius must be < outer radius".to_string(),
                    ));
                }
                if !angle.is_finite() {
                    return Err(Error::parameter("star angle must be finite".to_string()));
                }
            }
        }
        let half = patch_size as f64 / 2.0;
        if self.extent() + 2.0 > half {
            return Err(Error::parameter(format!(
                "shape extent {} leaves less than 2 px margin in a {patch_size} px patch",
                self.extent()
            )));
        }
        Ok(())
    }

    /// Whether (x, y) relative to the shape center is inside the shape.
    fn contains(&self, rx: f64, ry: f64) -> bool {
        match &self.kind {
            ShapeKind::Square { side } => rx.abs() <= side / 2.0 && ry.abs() <= side / 2.0,
            ShapeKind::Ellipse { semi_major, semi_minor, angle } => {
                let (s, c) = angle.sin_cos();
                let a = c * rx + s * ry;
                let b = -s * rx + c * ry;
                (a / semi_major).powi(2) + (b / semi_minor).powi(2) <= 1.0
            }
            ShapeKind::Star { points, outer_radius, inner_radius, angle } => {
                let t = (rx * rx + ry * ry).sqrt();
                let phi = ry.atan2(rx);
                let boundary = inner_radius
                    + (outer_radius - inner_radius)
                        * (0.5 + 0.5 * ((*points as f64) * (phi - angle)).cos());
                t <= boundary
            }
        }
    }

    /// Major-axis unit vector, when the shape defines one.
    fn orientation(&self) -> Option<[f64; 2]> {
        match &self.kind {
            ShapeKind::Ellipse { semi_major, semi_minor, angle } => {
                if semi_major / semi_minor < ELLIPSE_DEGENERATE_RATIO {
                    None
                } else {
                    Some([angle.cos(), angle.sin()])
                }
            }
            _ => None,
        }
    }
}

/// Renders a shape into a patch and its label stack.
///
/// The label stack always holds the binary mask; ellipses with a genuine
/// major axis additionally get an orientation-gradient channel holding the
/// axis direction on foreground pixels.
pub fn gen_shape<S: Scalar>(
    spec: &ShapeSpec,
    patch_size: usize,
    seed: u64,
) -> Result<(CellPatch<S>, LabelStack<S>)> {
    spec.validate(patch_size)?;
    let n = patch_size;
    let center = (n as f64 - 1.0) / 2.0;

    // Smooth multiplicative texture: one seeded sinusoidal ridge pattern.
    let texture = spec.texture_seed.map(|tseed| {
        let mut rng = substream(seed ^ tseed.rotate_left(17), "texture");
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let freq = rng.gen_range(1.0..2.5) * std::f64::consts::TAU / n as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        (theta.cos() * freq, theta.sin() * freq, phase)
    });

    let ramp_axis = if spec.polarity != 0.0 { spec.orientation() } else { None };
    let ramp_extent = spec.extent();

    let mut intensities = Array3::<S>::zeros((n, n, 1));
    let mut mask = Array3::<S>::zeros((n, n, 1));
    let sub = SUPERSAMPLE;
    for iy in 0..n {
        for ix in 0..n {
            let mut hits = 0usize;
            for sy in 0..sub {
                for sx in 0..sub {
                    let x = ix as f64 + (sx as f64 + 0.5) / sub as f64 - 0.5;
                    let y = iy as f64 + (sy as f64 + 0.5) / sub as f64 - 0.5;
                    if spec.contains(x - center, y - center) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (sub * sub) as f64;
            let fg = match texture {
                Some((kx, ky, phase)) => {
                    let wave = (kx * ix as f64 + ky * iy as f64 + phase).sin();
                    self_clamp(spec.fg * (1.0 - TEXTURE_AMPLITUDE * (0.5 + 0.5 * wave)))
                }
                None => spec.fg,
            };
            let fg = match ramp_axis {
                Some(axis) => {
                    let t = ((ix as f64 - center) * axis[0] + (iy as f64 - center) * axis[1])
                        / ramp_extent;
                    self_clamp(fg * (1.0 + 0.5 * spec.polarity * t.clamp(-1.0, 1.0)))
                }
                None => fg,
            };
            intensities[[iy, ix, 0]] = cast::<S>(spec.bg + coverage * (fg - spec.bg));
            if coverage >= 0.5 {
                mask[[iy, ix, 0]] = S::one();
            }
        }
    }

    let mut channels = vec![LabelChannel {
        name: "mask".to_string(),
        kind: LabelKind::BinaryMask,
        data: mask.clone(),
    }];
    if let Some(axis) = spec.orientation() {
        let mut orient = Array3::<S>::zeros((n, n, 2));
        for iy in 0..n {
            for ix in 0..n {
                if mask[[iy, ix, 0]] == S::one() {
                    orient[[iy, ix, 0]] = cast::<S>(axis[0]);
                    orient[[iy, ix, 1]] = cast::<S>(axis[1]);
                }
            }
        }
        channels.push(LabelChannel {
            name: "orientation".to_string(),
            kind: LabelKind::OrientationGradient,
            data: orient,
        });
    }

    let patch = CellPatch::new(intensities, shape_id(spec), [center, center])?;
    let labels = LabelStack::new(channels)?;
    Ok((patch, labels))
}

fn self_clamp(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn shape_id(spec: &ShapeSpec) -> String {
    match &spec.kind {
        ShapeKind::Square { .. } => "square".to_string(),
        ShapeKind::Ellipse { .. } => "ellipse".to_string(),
        ShapeKind::Star { points, .. } => format!("star{points}"),
    }
}

/// A registration test case with exact ground truth.
#[derive(Clone, Debug)]
pub struct EvalPair<S: Scalar> {
    pub fixed: CellPatch<S>,
    pub fixed_labels: LabelStack<S>,
    /// moving = apply_warp(gt_field, fixed), bit-reproducible per seed.
    pub moving: CellPatch<S>,
    pub moving_labels: LabelStack<S>,
    pub gt_field: WarpField<S>,
    pub gt_inverse: WarpField<S>,
    pub diffeo: DiffeoSpec,
}

/// Generates a (fixed, moving) pair related by `diffeo`.
pub fn gen_pair<S: Scalar>(
    shape: &ShapeSpec,
    diffeo: &DiffeoSpec,
    patch_size: usize,
    seed: u64,
) -> Result<EvalPair<S>> {
    let (fixed, fixed_labels) = gen_shape::<S>(shape, patch_size, seed)?;
    let gt_field = make_warp::<S>(diffeo, patch_size, patch_size)?;
    let gt_inverse = match diffeo.closed_form_inverse() {
        Some(inv) => make_warp::<S>(&inv, patch_size, patch_size)?,
        None => crate::warp::invert(&gt_field, 60, 1e-3).0,
    };
    let moving = apply_warp_patch(&gt_field, &fixed, &InterpPolicy::for_images())?;
    // Orientation vectors must co-rotate with the content, or the moving
    // labels would claim the unrotated axis as ground truth.
    let mut label_policy = InterpPolicy::for_labels();
    label_policy.reorient_vectors = true;
    let moving_labels = apply_warp_labels(&gt_field, &fixed_labels, &label_policy)?;
    Ok(EvalPair {
        fixed,
        fixed_labels,
        moving,
        moving_labels,
        gt_field,
        gt_inverse,
        diffeo: diffeo.clone(),
    })
}

/// The four stock archetype shapes used by synthetic benchmarks: square,
/// ellipse, and two stars whose lobe counts stretches cannot confuse.
pub fn default_archetypes(patch_size: usize) -> Vec<ShapeSpec> {
    let s = patch_size as f64 / 32.0;
    vec![
        ShapeSpec {
            kind: ShapeKind::Square { side: 16.0 * s },
            fg: 0.85,
            bg: 0.15,
            texture_seed: Some(1),
            polarity: 0.0,
        },
        ShapeSpec {
            kind: ShapeKind::Ellipse {
                semi_major: 10.0 * s,
                semi_minor: 5.5 * s,
                angle: 0.0,
            },
            fg: 0.9,
            bg: 0.15,
            texture_seed: Some(2),
            polarity: 0.0,
        },
        ShapeSpec {
            kind: ShapeKind::Star {
                points: 5,
                outer_radius: 10.0 * s,
                inner_radius: 4.5 * s,
                angle: 0.0,
            },
            fg: 0.8,
            bg: 0.15,
            texture_seed: Some(3),
            polarity: 0.0,
        },
        ShapeSpec {
            kind: ShapeKind::Star {
                points: 6,
                outer_radius: 9.5 * s,
                inner_radius: 5.0 * s,
                angle: 0.0,
            },
            fg: 0.75,
            bg: 0.15,
            texture_seed: Some(4),
            polarity: 0.0,
        },
    ]
}

/// Polarized ellipses for orientation experiments: the intensity ramp
/// makes an axis direction and its opposite distinguishable, and the
/// aspect ratios differ enough that matching is non-trivial.
pub fn orientation_archetypes(patch_size: usize) -> Vec<ShapeSpec> {
    let s = patch_size as f64 / 32.0;
    let ellipse = |major: f64, minor: f64, fg: f64, tex: u64| ShapeSpec {
        kind: ShapeKind::Ellipse { semi_major: major * s, semi_minor: minor * s, angle: 0.0 },
        fg,
        bg: 0.15,
        texture_seed: Some(tex),
        polarity: 0.6,
    };
    vec![
        ellipse(10.0, 4.5, 0.9, 11),
        ellipse(9.0, 6.0, 0.8, 12),
        ellipse(11.0, 3.5, 0.7, 13),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::metrics::dice;
    use crate::warp::DiffeoKind;

    fn mask_of(labels: &LabelStack<f64>) -> Array3<f64> {
        labels.channel("mask").unwrap().data.clone()
    }

    #[test]
    fn square_mask_area_matches_side_squared() {
        // Sides aligned to the half-pixel grid of a 32-patch center, so
        // the rasterized area is exact.
        for side in [16.0, 10.0] {
            let spec = ShapeSpec {
                kind: ShapeKind::Square { side },
                fg: 1.0,
                bg: 0.0,
                texture_seed: None,
            polarity: 0.0,
            };
            let (_, labels) = gen_shape::<f64>(&spec, 32, 0).unwrap();
            let area: f64 = mask_of(&labels).sum();
            let expected = side * side;
            assert!(
                (area - expected).abs() <= 0.02 * expected,
                "side {side}: area {area} vs {expected}"
            );
        }
    }

    #[test]
    fn circle_has_no_orientation_channel() {
        let spec = ShapeSpec {
            kind: ShapeKind::Ellipse { semi_major: 8.0, semi_minor: 8.0, angle: 0.3 },
            fg: 0.9,
            bg: 0.1,
            texture_seed: None,
            polarity: 0.0,
        };
        let (_, labels) = gen_shape::<f64>(&spec, 32, 0).unwrap();
        assert!(labels.channel("orientation").is_none());
        assert!(labels.channel("mask").is_some());
    }

    #[test]
    fn proper_ellipse_has_unit_orientation_on_foreground() {
        let spec = ShapeSpec {
            kind: ShapeKind::Ellipse { semi_major: 10.0, semi_minor: 5.0, angle: 0.5 },
            fg: 0.9,
            bg: 0.1,
            texture_seed: None,
            polarity: 0.0,
        };
        let (_, labels) = gen_shape::<f64>(&spec, 32, 0).unwrap();
        let mask = mask_of(&labels);
        let orient = &labels.channel("orientation").unwrap().data;
        for y in 0..32 {
            for x in 0..32 {
                let norm =
                    (orient[[y, x, 0]].powi(2) + orient[[y, x, 1]].powi(2)).sqrt();
                if mask[[y, x, 0]] == 1.0 {
                    assert!((norm - 1.0).abs() < 1e-9);
                    assert!((orient[[y, x, 0]] - 0.5f64.cos()).abs() < 1e-9);
                } else {
                    assert_eq!(norm, 0.0);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_patch() {
        let spec = &default_archetypes(32)[1];
        let (a, _) = gen_shape::<f64>(spec, 32, 7).unwrap();
        let (b, _) = gen_shape::<f64>(spec, 32, 7).unwrap();
        assert_eq!(a.intensities, b.intensities);
        let (c, _) = gen_shape::<f64>(spec, 32, 8).unwrap();
        assert_ne!(a.intensities, c.intensities);
    }

    #[test]
    fn oversized_shape_rejected() {
        let spec = ShapeSpec {
            kind: ShapeKind::Square { side: 30.0 },
            fg: 1.0,
            bg: 0.0,
            texture_seed: None,
            polarity: 0.0,
        };
        assert!(matches!(gen_shape::<f64>(&spec, 32, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn identity_pair_has_equal_patches() {
        let shape = &default_archetypes(32)[0];
        let diffeo = DiffeoSpec { kind: DiffeoKind::Rotation { angle: 0.0 }, center: [15.5, 15.5] };
        let pair = gen_pair::<f64>(shape, &diffeo, 32, 3).unwrap();
        assert_eq!(pair.fixed.intensities, pair.moving.intensities);
    }

    #[test]
    fn quarter_turn_square_keeps_mask_but_not_field() {
        let shape = ShapeSpec {
            kind: ShapeKind::Square { side: 16.0 },
            fg: 1.0,
            bg: 0.0,
            texture_seed: None,
            polarity: 0.0,
        };
        let diffeo = DiffeoSpec {
            kind: DiffeoKind::Rotation { angle: std::f64::consts::FRAC_PI_2 },
            center: [15.5, 15.5],
        };
        let pair = gen_pair::<f64>(&shape, &diffeo, 32, 0).unwrap();
        let fixed_mask = mask_of(&pair.fixed_labels);
        let moving_mask = mask_of(&pair.moving_labels);
        assert_eq!(fixed_mask, moving_mask);
        assert!(pair.gt_field.displacement().iter().any(|&v| v.abs() > 1.0));
    }

    #[test]
    fn ground_truth_inverse_recovers_fixed_mask() {
        // DSC(fixed mask, apply_warp(gt_inverse, moving mask)) >= 0.98 for
        // every kind, including the fixed-point-inverted partial stretch.
        // 64 px keeps re-binarization noise well under the margin.
        let shape = &default_archetypes(64)[1];
        let specs = [
            DiffeoKind::Rotation { angle: 0.6 },
            DiffeoKind::UniformStretch { factor: 1.25 },
            DiffeoKind::DirectionalStretch { factor: 0.8, direction: [0.6, 0.8] },
            DiffeoKind::VolumePreservingStretch { factor: 1.2, direction: [1.0, 0.0] },
            DiffeoKind::PartialStretch { factor: 1.25, region_radius: 18.0, blend_width: 18.0 },
        ];
        for kind in specs {
            let diffeo = DiffeoSpec { kind, center: [31.5, 31.5] };
            let pair = gen_pair::<f64>(shape, &diffeo, 64, 5).unwrap();
            let recovered = apply_warp_labels(
                &pair.gt_inverse,
                &pair.moving_labels,
                &InterpPolicy::for_labels(),
            )
            .unwrap();
            let d = dice(&mask_of(&pair.fixed_labels), &mask_of(&recovered)).unwrap();
            assert!(d >= 0.98, "{:?}: cycle DSC {d}", pair.diffeo.kind);
        }
    }

    #[test]
    fn archetypes_fit_their_patch() {
        for spec in default_archetypes(32) {
            assert!(spec.validate(32).is_ok());
        }
        for spec in default_archetypes(64) {
            assert!(spec.validate(64).is_ok());
        }
    }

    #[test]
    fn polarity_breaks_axis_symmetry() {
        let base = ShapeSpec {
            kind: ShapeKind::Ellipse { semi_major: 10.0, semi_minor: 5.0, angle: 0.0 },
            fg: 0.9,
            bg: 0.1,
            texture_seed: None,
            polarity: 0.0,
        };
        let mut flipped = base.clone();
        flipped.kind =
            ShapeKind::Ellipse { semi_major: 10.0, semi_minor: 5.0, angle: std::f64::consts::PI };
        let render = |s: &ShapeSpec| gen_shape::<f64>(s, 32, 7).unwrap().0.intensities;
        // Without polarity the ellipse is symmetric under a half turn.
        let l1_same: f64 = render(&base)
            .iter()
            .zip(render(&flipped).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(l1_same < 1e-9, "unpolarized half-turn should match, L1 {l1_same}");

        let mut polar = base.clone();
        polar.polarity = 0.6;
        let mut polar_flipped = flipped.clone();
        polar_flipped.polarity = 0.6;
        let l1_polar: f64 = render(&polar)
            .iter()
            .zip(render(&polar_flipped).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(l1_polar > 1.0, "polarity should break the symmetry, L1 {l1_polar}");
    }

    #[test]
    fn polarity_defaults_to_zero_when_absent() {
        let text = r#"
            fg = 0.8
            bg = 0.2

            [kind.ellipse]
            semi_major = 8.0
            semi_minor = 4.0
            angle = 0.0
        "#;
        let spec: ShapeSpec = toml::from_str(text).unwrap();
        assert_eq!(spec.polarity, 0.0);
        assert!(spec.validate(32).is_ok());
    }

    #[test]
    fn orientation_archetypes_validate_and_stay_oriented() {
        for spec in orientation_archetypes(32) {
            assert!(spec.validate(32).is_ok());
            let (_, labels) = gen_shape::<f64>(&spec, 32, 1).unwrap();
            assert!(labels.channel("orientation").is_some());
        }
    }
}
