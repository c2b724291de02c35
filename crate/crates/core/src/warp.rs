//! Differentiable cross-view warping of logit maps.
//!
//! Warping is target-driven: every pixel of the target view `b` is lifted with
//! `b`'s depth, moved into the source view `a` and projected there, giving a
//! continuous source location that is then bilinearly sampled. Pixels without
//! depth, behind the source camera or projecting outside the source image are
//! invalid and carry the fill value.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    apply_transform, back_project, project, relative_transform, Extrinsics, Intrinsics, PixelCoord,
};
use crate::grid::{DepthMap, Grid, LogitMap, Mask};

/// Source-pixel lookup table for warping a source view into a target view.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    /// Continuous source coordinates per target pixel; NaN where invalid.
    pub src_coords: Grid<PixelCoord>,
    pub valid: Mask,
    /// `(height, width)` of the source image.
    pub src_dims: (usize, usize),
}

/// Optional occlusion test: a target pixel stays valid only if the transformed
/// depth agrees with the source depth map within `tolerance` meters.
#[derive(Debug, Clone, Copy)]
pub struct DepthCheck<'a> {
    pub source_depth: &'a DepthMap,
    pub tolerance: f64,
}

impl<'a> DepthCheck<'a> {
    pub const DEFAULT_TOLERANCE: f64 = 0.05;

    pub fn new(source_depth: &'a DepthMap) -> Self {
        DepthCheck {
            source_depth,
            tolerance: Self::DEFAULT_TOLERANCE,
        }
    }
}

impl WarpField {
    pub fn dims(&self) -> (usize, usize) {
        self.valid.dims()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.count()
    }

    /// Identity lookup over an `height × width` image restricted to `valid`.
    pub fn identity(valid: Mask) -> Self {
        let (h, w) = valid.dims();
        let src_coords = Grid::from_fn(h, w, |r, c| {
            if valid[(r, c)] {
                PixelCoord::new(c as f64, r as f64)
            } else {
                PixelCoord::new(f64::NAN, f64::NAN)
            }
        });
        WarpField {
            src_coords,
            valid,
            src_dims: (h, w),
        }
    }
}

const INVALID: PixelCoord = PixelCoord {
    u: f64::NAN,
    v: f64::NAN,
};

/// Builds the field that pulls values from view `a` into view `b` using `b`'s depth.
pub fn compute_warp_field(
    depth_b: &DepthMap,
    k_a: &Intrinsics,
    k_b: &Intrinsics,
    e_a: &Extrinsics,
    e_b: &Extrinsics,
) -> Result<WarpField> {
    compute_warp_field_with(depth_b, k_a, k_b, e_a, e_b, None)
}

pub fn compute_warp_field_with(
    depth_b: &DepthMap,
    k_a: &Intrinsics,
    k_b: &Intrinsics,
    e_a: &Extrinsics,
    e_b: &Extrinsics,
    depth_check: Option<DepthCheck<'_>>,
) -> Result<WarpField> {
    let (h, w) = depth_b.dims();
    if (k_b.height, k_b.width) != (h, w) {
        return Err(Error::Config(format!(
            "depth map is {h}x{w} but target intrinsics describe {}x{}",
            k_b.height, k_b.width
        )));
    }
    if let Some(check) = &depth_check {
        if check.source_depth.dims() != (k_a.height, k_a.width) {
            return Err(Error::Config("source depth does not match source intrinsics".into()));
        }
    }
    let src_dims = (k_a.height, k_a.width);

    if k_a == k_b && e_a == e_b && depth_check.is_none() {
        return Ok(WarpField::identity(depth_b.map(|&d| d > 0.0)));
    }

    let b_to_a = relative_transform(e_b, e_a);
    let mut coords = vec![INVALID; h * w];
    let mut valid = vec![false; h * w];
    coords
        .par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (coord_row, valid_row))| {
            for col in 0..w {
                let depth = depth_b[(row, col)];
                if !(depth > 0.0) {
                    continue;
                }
                let Ok(p) = back_project(PixelCoord::new(col as f64, row as f64), depth, k_b) else {
                    continue;
                };
                let q = apply_transform(&b_to_a, p);
                let Ok(src) = project(q, k_a) else {
                    continue;
                };
                if !k_a.contains(src) {
                    continue;
                }
                if let Some(check) = &depth_check {
                    let observed = check.source_depth[(src.v.round() as usize, src.u.round() as usize)];
                    if !(observed > 0.0) || (q.z - observed).abs() >= check.tolerance {
                        continue;
                    }
                }
                coord_row[col] = src;
                valid_row[col] = true;
            }
        });

    Ok(WarpField {
        src_coords: Grid::from_vec(h, w, coords)?,
        valid: Grid::from_vec(h, w, valid)?,
        src_dims,
    })
}

/// Bilinear taps `(row, col, weight)` of a continuous coordinate, in a fixed order.
#[inline]
pub(crate) fn bilinear_taps(p: PixelCoord) -> [(isize, isize, f64); 4] {
    let x0 = p.u.floor();
    let y0 = p.v.floor();
    let fx = p.u - x0;
    let fy = p.v - y0;
    let (c, r) = (x0 as isize, y0 as isize);
    [
        (r, c, (1.0 - fx) * (1.0 - fy)),
        (r, c + 1, fx * (1.0 - fy)),
        (r + 1, c, (1.0 - fx) * fy),
        (r + 1, c + 1, fx * fy),
    ]
}

#[inline]
fn tap_index(r: isize, c: isize, (h, w): (usize, usize)) -> Option<usize> {
    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
        Some(r as usize * w + c as usize)
    } else {
        None
    }
}

/// Samples `src` at every valid field location. Taps outside the source image
/// contribute `fill` with their bilinear weight; invalid pixels are `fill`.
pub fn bilinear_sample(src: &LogitMap, field: &WarpField, fill: f64) -> Result<LogitMap> {
    if src.dims() != field.src_dims {
        return Err(Error::shape(
            "bilinear_sample",
            &[field.src_dims.0, field.src_dims.1],
            &[src.height(), src.width()],
        ));
    }
    let (h, w) = field.dims();
    let values = src.as_slice();
    let out = field
        .src_coords
        .as_slice()
        .iter()
        .zip(field.valid.as_slice())
        .map(|(&p, &ok)| {
            if !ok {
                return fill;
            }
            bilinear_taps(p).iter().fold(0.0, |acc, &(r, c, wt)| {
                let v = tap_index(r, c, field.src_dims).map_or(fill, |i| values[i]);
                acc + wt * v
            })
        })
        .collect();
    Grid::from_vec(h, w, out)
}

/// Warps logits of view `a` into view `b`; returns the warped map and its validity mask.
pub fn warp_logits(p_a: &LogitMap, field_a_to_b: &WarpField) -> Result<(LogitMap, Mask)> {
    let warped = bilinear_sample(p_a, field_a_to_b, 0.0)?;
    Ok((warped, field_a_to_b.valid.clone()))
}

/// Vector-Jacobian product of [`bilinear_sample`] with respect to the source
/// values: scatters each valid target gradient onto its in-bounds taps.
pub fn warp_vjp(field: &WarpField, upstream: &Grid<f64>) -> Result<Grid<f64>> {
    field.valid.same_dims(upstream, "warp_vjp")?;
    let (sh, sw) = field.src_dims;
    let mut grad = vec![0.0; sh * sw];
    for ((&p, &ok), &g) in field
        .src_coords
        .as_slice()
        .iter()
        .zip(field.valid.as_slice())
        .zip(upstream.as_slice())
    {
        if !ok {
            continue;
        }
        for (r, c, wt) in bilinear_taps(p) {
            if let Some(i) = tap_index(r, c, field.src_dims) {
                grad[i] += wt * g;
            }
        }
    }
    Grid::from_vec(sh, sw, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LogitMap {
        Grid::from_fn(h, w, |_, _| rng.random_range(-3.0..3.0))
    }

    fn single_pixel_field(h: usize, w: usize, at: (usize, usize), coord: PixelCoord) -> WarpField {
        let mut valid = Grid::filled(h, w, false);
        valid[at] = true;
        let mut src_coords = Grid::filled(h, w, INVALID);
        src_coords[at] = coord;
        WarpField {
            src_coords,
            valid,
            src_dims: (h, w),
        }
    }

    #[test]
    fn identity_cameras_give_identity_field() {
        let k = Intrinsics::centered(40.0, 16, 12).unwrap();
        let e = Extrinsics::look_at(Vector3::new(0.3, -0.2, -2.0), Vector3::zeros(), Vector3::y()).unwrap();
        let mut depth = Grid::filled(12, 16, 1.5);
        depth[(3, 4)] = 0.0;
        let field = compute_warp_field(&depth, &k, &k, &e, &e).unwrap();
        assert!(!field.valid[(3, 4)]);
        assert_eq!(field.valid_count(), 16 * 12 - 1);
        for r in 0..12 {
            for c in 0..16 {
                if field.valid[(r, c)] {
                    assert_eq!(field.src_coords[(r, c)], PixelCoord::new(c as f64, r as f64));
                }
            }
        }
    }

    #[test]
    fn zero_depth_is_all_invalid() {
        let k = Intrinsics::centered(40.0, 8, 8).unwrap();
        let e_b = Extrinsics::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let field = compute_warp_field(&Grid::filled(8, 8, 0.0), &k, &k, &Extrinsics::identity(), &e_b).unwrap();
        assert_eq!(field.valid_count(), 0);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let k = Intrinsics::centered(40.0, 8, 8).unwrap();
        let e = Extrinsics::identity();
        let err = compute_warp_field(&Grid::filled(4, 8, 1.0), &k, &k, &e, &e).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identity_sample_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_map(&mut rng, 9, 7);
        let field = WarpField::identity(Grid::filled(9, 7, true));
        let out = bilinear_sample(&src, &field, 0.0).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn midpoint_sample_averages() {
        let src = Grid::from_vec(2, 3, vec![2.0, 4.0, 8.0, 1.0, 1.0, 1.0]).unwrap();
        let field = single_pixel_field(2, 3, (0, 0), PixelCoord::new(0.5, 0.0));
        let out = bilinear_sample(&src, &field, 0.0).unwrap();
        assert_eq!(out[(0, 0)], 3.0);
        assert_eq!(out[(1, 2)], 0.0);
    }

    #[test]
    fn out_of_bounds_taps_use_fill() {
        let src = Grid::filled(2, 2, 1.0);
        // Last column: the right-hand taps fall outside and take the fill value.
        let field = single_pixel_field(2, 2, (0, 0), PixelCoord::new(1.0, 0.5));
        let out = bilinear_sample(&src, &field, 5.0).unwrap();
        assert_eq!(out[(0, 0)], 1.0);
        assert_eq!(out[(1, 1)], 5.0);
    }

    #[test]
    fn vjp_examples() {
        let field = WarpField::identity(Grid::from_fn(4, 4, |r, _| r < 2));
        let g = warp_vjp(&field, &Grid::filled(4, 4, 1.0)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(g[(r, c)], if r < 2 { 1.0 } else { 0.0 });
            }
        }

        let field = single_pixel_field(3, 3, (2, 2), PixelCoord::new(0.25, 0.0));
        let g = warp_vjp(&field, &Grid::filled(3, 3, 1.0)).unwrap();
        assert_eq!(g[(0, 0)], 0.75);
        assert_eq!(g[(0, 1)], 0.25);
        assert_eq!(g.as_slice().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let src = random_map(&mut rng, 8, 8);
            let coords = Grid::from_fn(8, 8, |_, _| {
                PixelCoord::new(rng.random_range(-0.5..7.5), rng.random_range(-0.5..7.5))
            });
            let valid = Grid::from_fn(8, 8, |_, _| rng.random_bool(0.8));
            let field = WarpField {
                src_coords: coords,
                valid,
                src_dims: (8, 8),
            };
            let upstream = random_map(&mut rng, 8, 8);
            let grad = warp_vjp(&field, &upstream).unwrap();
            let objective = |s: &LogitMap| {
                let out = bilinear_sample(s, &field, 0.0).unwrap();
                out.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum::<f64>()
            };
            let eps = 1e-4;
            for i in 0..64 {
                let mut plus = src.clone();
                plus.as_mut_slice()[i] += eps;
                let mut minus = src.clone();
                minus.as_mut_slice()[i] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let an = grad.as_slice()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-5, "pixel {i}: fd {fd} vs vjp {an}");
            }
        }
    }

    #[test]
    fn linearity_with_zero_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_map(&mut rng, 6, 6);
        let q = random_map(&mut rng, 6, 6);
        let field = WarpField {
            src_coords: Grid::from_fn(6, 6, |_, _| {
                PixelCoord::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0))
            }),
            valid: Grid::filled(6, 6, true),
            src_dims: (6, 6),
        };
        let (alpha, beta) = (0.7, -1.3);
        let combo = Grid::from_fn(6, 6, |r, c| alpha * p[(r, c)] + beta * q[(r, c)]);
        let (wc, _) = warp_logits(&combo, &field).unwrap();
        let (wp, _) = warp_logits(&p, &field).unwrap();
        let (wq, _) = warp_logits(&q, &field).unwrap();
        for i in 0..36 {
            let expect = alpha * wp.as_slice()[i] + beta * wq.as_slice()[i];
            assert!((wc.as_slice()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shrinking_source_never_grows_valid_set() {
        let k_b = Intrinsics::centered(30.0, 20, 20).unwrap();
        let k_a_big = Intrinsics::new(30.0, 30.0, 9.5, 9.5, 20, 20).unwrap();
        let k_a_small = Intrinsics::new(30.0, 30.0, 9.5, 9.5, 14, 12).unwrap();
        let e_a = Extrinsics::look_at(Vector3::new(0.4, 0.0, -2.0), Vector3::zeros(), Vector3::y()).unwrap();
        let e_b = Extrinsics::look_at(Vector3::new(-0.4, 0.1, -2.0), Vector3::zeros(), Vector3::y()).unwrap();
        let depth = Grid::from_fn(20, 20, |r, c| 1.8 + 0.01 * (r + c) as f64);
        let big = compute_warp_field(&depth, &k_a_big, &k_b, &e_a, &e_b).unwrap();
        let small = compute_warp_field(&depth, &k_a_small, &k_b, &e_a, &e_b).unwrap();
        assert!(small.valid_count() < big.valid_count());
        for (s, b) in small.valid.iter().zip(big.valid.iter()) {
            assert!(!s || *b);
        }
    }
}
