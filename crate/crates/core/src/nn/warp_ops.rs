//! Differentiable warping, field composition, and velocity integration.
//!
//! Fields here are `(2, h, w)` with plane 0 the x displacement and plane 1
//! the y displacement, matching [`crate::warp::WarpField`] semantics:
//! `out(p) = input(p + d(p))` with bilinear sampling and border replicate.
//! Replicate padding is realized by clamping the sample coordinate, so the
//! coordinate gradient vanishes once a sample leaves the grid.

use ndarray::Array3;

use crate::num::{cast, Scalar};

struct Taps {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    /// Coordinate gradients survive only strictly inside the grid.
    dx_inside: bool,
    dy_inside: bool,
}

fn taps(xs: f64, ys: f64, h: usize, w: usize) -> Taps {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let cx = xs.clamp(0.0, max_x);
    let cy = ys.clamp(0.0, max_y);
    let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
    Taps {
        x0,
        y0,
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        dx_inside: xs > 0.0 && xs < max_x,
        dy_inside: ys > 0.0 && ys < max_y,
    }
}

/// Warps every channel of `image` by `field`: bilinear, border replicate.
pub fn warp_image<S: Scalar>(image: &Array3<S>, field: &Array3<S>) -> Array3<S> {
    let (c, h, w) = image.dim();
    debug_assert_eq!(field.dim(), (2, h, w), "field/image shape mismatch");
    let mut out = Array3::<S>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let xs = x as f64 + field[[0, y, x]].to_f64().unwrap_or(0.0);
            let ys = y as f64 + field[[1, y, x]].to_f64().unwrap_or(0.0);
            let t = taps(xs, ys, h, w);
            let (x1, y1) = (t.x0 + 1, t.y0 + 1);
            let (fx, fy) = (cast::<S>(t.fx), cast::<S>(t.fy));
            let one = S::one();
            for ci in 0..c {
                let v00 = image[[ci, t.y0, t.x0]];
                let v01 = image[[ci, t.y0, x1]];
                let v10 = image[[ci, y1, t.x0]];
                let v11 = image[[ci, y1, x1]];
                let top = v00 * (one - fx) + v01 * fx;
                let bottom = v10 * (one - fx) + v11 * fx;
                out[[ci, y, x]] = top * (one - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Backward of [`warp_image`]: gradients with respect to the image and the
/// field, recomputed from the forward inputs.
pub fn warp_image_backward<S: Scalar>(
    image: &Array3<S>,
    field: &Array3<S>,
    grad_out: &Array3<S>,
) -> (Array3<S>, Array3<S>) {
    let (c, h, w) = image.dim();
    let mut grad_image = Array3::<S>::zeros((c, h, w));
    let mut grad_field = Array3::<S>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let xs = x as f64 + field[[0, y, x]].to_f64().unwrap_or(0.0);
            let ys = y as f64 + field[[1, y, x]].to_f64().unwrap_or(0.0);
            let t = taps(xs, ys, h, w);
            let (x1, y1) = (t.x0 + 1, t.y0 + 1);
            let (fx, fy) = (cast::<S>(t.fx), cast::<S>(t.fy));
            let one = S::one();
            let mut gx_acc = S::zero();
            let mut gy_acc = S::zero();
            for ci in 0..c {
                let g = grad_out[[ci, y, x]];
                if g == S::zero() {
                    continue;
                }
                grad_image[[ci, t.y0, t.x0]] += g * (one - fx) * (one - fy);
                grad_image[[ci, t.y0, x1]] += g * fx * (one - fy);
                grad_image[[ci, y1, t.x0]] += g * (one - fx) * fy;
                grad_image[[ci, y1, x1]] += g * fx * fy;
                let v00 = image[[ci, t.y0, t.x0]];
                let v01 = image[[ci, t.y0, x1]];
                let v10 = image[[ci, y1, t.x0]];
                let v11 = image[[ci, y1, x1]];
                // d out / d xs at fixed taps, then masked by the clamp.
                let dxs = (v01 - v00) * (one - fy) + (v11 - v10) * fy;
                let dys = (v10 - v00) * (one - fx) + (v11 - v01) * fx;
                gx_acc += g * dxs;
                gy_acc += g * dys;
            }
            if t.dx_inside {
                grad_field[[0, y, x]] = gx_acc;
            }
            if t.dy_inside {
                grad_field[[1, y, x]] = gy_acc;
            }
        }
    }
    (grad_image, grad_field)
}

/// Composition `outer after inner`: `d(p) = d_in(p) + d_out(p + d_in(p))`,
/// so applying the result equals applying `outer` then `inner` to an image.
pub fn compose_fields<S: Scalar>(outer: &Array3<S>, inner: &Array3<S>) -> Array3<S> {
    let sampled = warp_image(outer, inner);
    sampled + inner
}

/// Backward of [`compose_fields`]; returns `(grad_outer, grad_inner)`.
pub fn compose_fields_backward<S: Scalar>(
    outer: &Array3<S>,
    inner: &Array3<S>,
    grad_out: &Array3<S>,
) -> (Array3<S>, Array3<S>) {
    let (grad_outer, grad_field) = warp_image_backward(outer, inner, grad_out);
    (grad_outer, grad_field + grad_out)
}

/// Integrates a stationary velocity field by scaling and squaring.
pub fn expmap<S: Scalar>(velocity: &Array3<S>, steps: usize) -> Array3<S> {
    expmap_with_cache(velocity, steps).0
}

/// As [`expmap`], also returning the intermediate fields needed by the
/// backward pass: `cache[k]` is the field before squaring step `k`.
pub fn expmap_with_cache<S: Scalar>(
    velocity: &Array3<S>,
    steps: usize,
) -> (Array3<S>, Vec<Array3<S>>) {
    let scale = cast::<S>((0.5f64).powi(steps as i32));
    let mut field = velocity.mapv(|v| v * scale);
    let mut cache = Vec::with_capacity(steps);
    for _ in 0..steps {
        cache.push(field.clone());
        field = compose_fields(&field, &field);
    }
    (field, cache)
}

/// Backward of [`expmap`], from the cache produced alongside the forward.
pub fn expmap_backward<S: Scalar>(cache: &[Array3<S>], grad_out: &Array3<S>) -> Array3<S> {
    let mut grad = grad_out.clone();
    for field in cache.iter().rev() {
        let (g_outer, g_inner) = compose_fields_backward(field, field, &grad);
        grad = g_outer + g_inner;
    }
    let scale = cast::<S>((0.5f64).powi(cache.len() as i32));
    grad.mapv(|v| v * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::warp::{compose, make_warp, DiffeoKind, DiffeoSpec, WarpField};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;

    fn smooth_field(h: usize, w: usize, amp: f64, phase: f64) -> Array3<f64> {
        Array3::from_shape_fn((2, h, w), |(p, y, x)| {
            let fy = y as f64 / h as f64;
            let fx = x as f64 / w as f64;
            amp * ((fx * 5.0 + fy * 3.0 + phase + p as f64).sin())
        })
    }

    fn smooth_image(c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            ((x as f64 * 0.7 + y as f64 * 0.31 + ci as f64).sin() + 1.0) * 0.4
        })
    }

    #[test]
    fn zero_field_is_identity() {
        let image = smooth_image(2, 7, 9);
        let field = Array3::<f64>::zeros((2, 7, 9));
        assert_eq!(warp_image(&image, &field), image);
    }

    #[test]
    fn matches_label_free_warp_module() {
        // Cross-check against the (h, w, c)-layout resampler on a rotation.
        let spec = DiffeoSpec { kind: DiffeoKind::Rotation { angle: 0.4 }, center: [7.5, 7.5] };
        let field = make_warp::<f64>(&spec, 16, 16).unwrap();
        let image_hwc = ndarray::Array3::from_shape_fn((16, 16, 1), |(y, x, _)| {
            ((x as f64 * 0.5 + y as f64 * 0.23).sin() + 1.0) * 0.35
        });
        let warped_hwc = crate::warp::warp_grid(
            &field,
            &image_hwc,
            crate::warp::Interpolation::Bilinear,
            crate::warp::Padding::Replicate,
        )
        .unwrap();
        let image_chw = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| image_hwc[[y, x, 0]]);
        let field_chw = Array3::from_shape_fn((2, 16, 16), |(p, y, x)| field.at(x, y)[p]);
        let warped_chw = warp_image(&image_chw, &field_chw);
        for y in 0..16 {
            for x in 0..16 {
                assert_abs_diff_eq!(
                    warped_chw[[0, y, x]],
                    warped_hwc[[y, x, 0]],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn warp_backward_matches_finite_differences() {
        let image = smooth_image(2, 8, 8);
        let field = smooth_field(8, 8, 0.8, 0.3);
        let weights = Array3::from_shape_fn((2, 8, 8), |(c, y, x)| {
            ((c * 64 + y * 8 + x) as f64 * 0.17).cos()
        });
        let loss =
            |img: &Array3<f64>, fld: &Array3<f64>| (&warp_image(img, fld) * &weights).sum();
        let (grad_image, grad_field) = warp_image_backward(&image, &field, &weights);
        let eps = 1e-6;
        let mut rng = substream(8, "fd");
        for _ in 0..40 {
            let idx = (rng.gen_range(0..2), rng.gen_range(0..8), rng.gen_range(0..8));
            let mut bumped = image.clone();
            bumped[idx] += eps;
            let up = loss(&bumped, &field);
            bumped[idx] -= 2.0 * eps;
            let down = loss(&bumped, &field);
            assert_abs_diff_eq!(grad_image[idx], (up - down) / (2.0 * eps), epsilon = 1e-6);

            let mut bumped = field.clone();
            bumped[idx] += eps;
            let up = loss(&image, &bumped);
            bumped[idx] -= 2.0 * eps;
            let down = loss(&image, &bumped);
            assert_abs_diff_eq!(grad_field[idx], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
    }

    #[test]
    fn compose_matches_warp_module_compose() {
        let ha = smooth_field(12, 12, 0.7, 0.1);
        let hb = smooth_field(12, 12, 0.5, 1.7);
        let outer = WarpField::new(ndarray::Array3::from_shape_fn((12, 12, 2), |(y, x, p)| {
            ha[[p, y, x]]
        }))
        .unwrap();
        let inner = WarpField::new(ndarray::Array3::from_shape_fn((12, 12, 2), |(y, x, p)| {
            hb[[p, y, x]]
        }))
        .unwrap();
        let expected = compose(&outer, &inner).unwrap();
        let got = compose_fields(&ha, &hb);
        for y in 0..12 {
            for x in 0..12 {
                assert_abs_diff_eq!(got[[0, y, x]], expected.at(x, y)[0], epsilon = 1e-12);
                assert_abs_diff_eq!(got[[1, y, x]], expected.at(x, y)[1], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn compose_backward_matches_finite_differences() {
        let outer = smooth_field(8, 8, 0.6, 0.9);
        let inner = smooth_field(8, 8, 0.4, 2.1);
        let weights = Array3::from_shape_fn((2, 8, 8), |(c, y, x)| {
            ((c * 64 + y * 8 + x) as f64 * 0.23).sin()
        });
        let loss = |o: &Array3<f64>, i: &Array3<f64>| (&compose_fields(o, i) * &weights).sum();
        let (grad_outer, grad_inner) = compose_fields_backward(&outer, &inner, &weights);
        let eps = 1e-6;
        let mut rng = substream(9, "fd");
        for _ in 0..40 {
            let idx = (rng.gen_range(0..2), rng.gen_range(0..8), rng.gen_range(0..8));
            let mut bumped = outer.clone();
            bumped[idx] += eps;
            let up = loss(&bumped, &inner);
            bumped[idx] -= 2.0 * eps;
            let down = loss(&bumped, &inner);
            assert_abs_diff_eq!(grad_outer[idx], (up - down) / (2.0 * eps), epsilon = 1e-6);

            let mut bumped = inner.clone();
            bumped[idx] += eps;
            let up = loss(&outer, &bumped);
            bumped[idx] -= 2.0 * eps;
            let down = loss(&outer, &bumped);
            assert_abs_diff_eq!(grad_inner[idx], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
    }

    #[test]
    fn expmap_of_zero_velocity_is_identity() {
        let v = Array3::<f64>::zeros((2, 10, 10));
        let field = expmap(&v, 7);
        assert!(field.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expmap_plus_minus_are_mutually_inverse() {
        let v = smooth_field(24, 24, 1.5, 0.4);
        let fwd = expmap(&v, 7);
        let bwd = expmap(&v.mapv(|x| -x), 7);
        let cycle = compose_fields(&fwd, &bwd);
        // Interior displacement of the round trip stays tiny.
        let mut max_mag: f64 = 0.0;
        for y in 4..20 {
            for x in 4..20 {
                let m = (cycle[[0, y, x]].powi(2) + cycle[[1, y, x]].powi(2)).sqrt();
                max_mag = max_mag.max(m);
            }
        }
        assert!(max_mag < 0.05, "expmap cycle residual {max_mag}");
    }

    #[test]
    fn expmap_backward_matches_finite_differences() {
        let v = smooth_field(6, 6, 0.5, 1.1);
        let weights = Array3::from_shape_fn((2, 6, 6), |(c, y, x)| {
            ((c * 36 + y * 6 + x) as f64 * 0.41).cos()
        });
        let steps = 4;
        let (_, cache) = expmap_with_cache(&v, steps);
        let grad = expmap_backward(&cache, &weights);
        let eps = 1e-6;
        let mut rng = substream(10, "fd");
        for _ in 0..30 {
            let idx = (rng.gen_range(0..2), rng.gen_range(0..6), rng.gen_range(0..6));
            let mut bumped = v.clone();
            bumped[idx] += eps;
            let up = (&expmap(&bumped, steps) * &weights).sum();
            bumped[idx] -= 2.0 * eps;
            let down = (&expmap(&bumped, steps) * &weights).sum();
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(grad[idx], fd, epsilon = 1e-5);
        }
    }
}
