//! RGBA prompts and the point-cloud lifting proxy for the frozen reconstructor.
//!
//! The proxy back-projects every prompt pixel whose alpha passes a cut and has
//! valid depth, then moves it to the world frame.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgba, RgbaImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::{back_project, Extrinsics, Intrinsics, PixelCoord};
use crate::grid::{DepthMap, Grid, LogitMap, Mask, RgbImage};
use crate::ingest::quantize_unit;
use crate::warp::{bilinear_sample, WarpField};

pub const DEFAULT_TAU: f64 = 0.5;

/// `σ(P) > τ`, strictly.
pub fn threshold_mask(p: &LogitMap, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(p.map(|&x| sigmoid(x) > tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Binary,
    Soft,
}

/// Mask source for a prompt: a hard mask or logits turned into probabilities.
#[derive(Debug, Clone, Copy)]
pub enum PromptAlpha<'a> {
    Binary(&'a Mask),
    Soft(&'a LogitMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbaPrompt {
    pub rgb: RgbImage,
    pub alpha: Grid<f64>,
    pub mode: PromptMode,
}

impl RgbaPrompt {
    pub fn dims(&self) -> (usize, usize) {
        self.alpha.dims()
    }

    /// Interleaved H×W×4 values.
    pub fn channels(&self) -> Vec<[f64; 4]> {
        self.rgb
            .pixels()
            .iter()
            .zip(self.alpha.iter())
            .map(|(p, &a)| [p[0], p[1], p[2], a])
            .collect()
    }

    /// 8-bit RGBA PNG; alpha is `mask * 255` or `round(σ(P) * 255)`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let img = RgbaImage::from_fn(w as u32, h as u32, |c, r| {
            let (r, c) = (r as usize, c as usize);
            let [red, green, blue] = self.rgb[(r, c)].map(quantize_unit);
            Rgba([red, green, blue, quantize_unit(self.alpha[(r, c)])])
        });
        img.save(path).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn make_rgba_prompt(rgb: &RgbImage, alpha: PromptAlpha<'_>) -> Result<RgbaPrompt> {
    let (alpha, mode) = match alpha {
        PromptAlpha::Binary(m) => {
            m.same_dims_as(rgb.dims(), "make_rgba_prompt")?;
            (m.map(|&b| if b { 1.0 } else { 0.0 }), PromptMode::Binary)
        }
        PromptAlpha::Soft(p) => {
            p.same_dims_as(rgb.dims(), "make_rgba_prompt")?;
            (p.map(|&x| sigmoid(x)), PromptMode::Soft)
        }
    };
    Ok(RgbaPrompt {
        rgb: rgb.clone(),
        alpha,
        mode,
    })
}

/// World-frame points; weights are carried only for soft prompts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub weights: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        PointCloud { points, weights: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding-box diagonal; 0 for an empty cloud.
    pub fn bbox_diagonal(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }

    /// ASCII XYZ: one `x y z [w]` line per point, 9 significant digits.
    pub fn to_xyz(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.points.iter().enumerate() {
            let _ = write!(out, "{:.8e} {:.8e} {:.8e}", p.x, p.y, p.z);
            if let Some(w) = &self.weights {
                let _ = write!(out, " {:.8e}", w[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_xyz()).map_err(|e| Error::io(path, e))
    }
}

/// Back-projects pixels with `alpha > alpha_cut` and positive depth into the world frame.
pub fn lift_to_pointcloud(
    prompt: &RgbaPrompt,
    depth: &DepthMap,
    k: &Intrinsics,
    e: &Extrinsics,
    alpha_cut: f64,
) -> Result<PointCloud> {
    depth.same_dims_as(prompt.dims(), "lift_to_pointcloud")?;
    if (k.height, k.width) != prompt.dims() {
        return Err(Error::shape(
            "lift_to_pointcloud",
            &[prompt.dims().0, prompt.dims().1],
            &[k.height, k.width],
        ));
    }
    if !(0.0..1.0).contains(&alpha_cut) {
        return Err(Error::Config(format!("alpha_cut {alpha_cut} outside [0, 1)")));
    }
    let (h, w) = prompt.dims();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let a = prompt.alpha[(r, c)];
            let d = depth[(r, c)];
            if a > alpha_cut && d > 0.0 {
                let p = back_project(PixelCoord::new(c as f64, r as f64), d, k)?;
                points.push(e.camera_to_world(p));
                weights.push(a);
            }
        }
    }
    Ok(PointCloud {
        points,
        weights: (prompt.mode == PromptMode::Soft).then_some(weights),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionRule::Mean),
            "max" => Ok(FusionRule::Max),
            _ => Err(Error::Config(format!("unknown fusion rule {s:?} (mean|max)"))),
        }
    }
}

/// Fuses the reference logits with auxiliary views warped into the reference.
/// Invalid warped pixels do not contribute.
pub fn fuse_multiview(p_ref: &LogitMap, aux: &[(&LogitMap, &WarpField)], rule: FusionRule) -> Result<LogitMap> {
    let mut acc = p_ref.clone();
    let mut count = Grid::filled(p_ref.height(), p_ref.width(), 1usize);
    for (logits, field) in aux {
        field.valid.same_dims(p_ref, "fuse_multiview")?;
        let warped = bilinear_sample(logits, field, 0.0)?;
        for i in 0..acc.len() {
            if !field.valid.as_slice()[i] {
                continue;
            }
            let v = warped.as_slice()[i];
            let slot = &mut acc.as_mut_slice()[i];
            match rule {
                FusionRule::Mean => *slot += v,
                FusionRule::Max => *slot = slot.max(v),
            }
            count.as_mut_slice()[i] += 1;
        }
    }
    if rule == FusionRule::Mean {
        for (v, &n) in acc.as_mut_slice().iter_mut().zip(count.iter()) {
            *v /= n as f64;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{render_view, Primitive, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_boundaries() {
        let zero = Grid::filled(3, 3, 0.0);
        assert_eq!(threshold_mask(&zero, 0.5).unwrap().count(), 0);
        assert_eq!(threshold_mask(&Grid::filled(3, 3, 3.0), 0.5).unwrap().count(), 9);
        assert!(threshold_mask(&zero, 1.0).is_err());
        assert!(threshold_mask(&zero, 0.0).is_err());
    }

    #[test]
    fn threshold_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Grid::from_fn(16, 16, |_, _| rng.random_range(-4.0..4.0));
        for i in 1..10 {
            let tau = i as f64 / 10.0;
            let m = threshold_mask(&p, tau).unwrap();
            for (x, b) in p.iter().zip(m.iter()) {
                assert_eq!(*b, 1.0 / (1.0 + (-x).exp()) > tau);
            }
        }
    }

    #[test]
    fn prompt_planes() {
        let rgb = RgbImage::filled(4, 5, [0.1, 0.2, 0.3]);
        let empty = Grid::filled(4, 5, false);
        let prompt = make_rgba_prompt(&rgb, PromptAlpha::Binary(&empty)).unwrap();
        assert_eq!(prompt.channels().len(), 20);
        assert!(prompt.alpha.iter().all(|&a| a == 0.0));
        assert_eq!(prompt.rgb, rgb);

        let logits = Grid::from_fn(4, 5, |r, c| r as f64 - c as f64);
        let hard = threshold_mask(&logits, 0.5).unwrap();
        let a = make_rgba_prompt(&rgb, PromptAlpha::Binary(&hard)).unwrap();
        let b = make_rgba_prompt(&rgb, PromptAlpha::Soft(&logits)).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_ne!(a.alpha, b.alpha);
        assert!(make_rgba_prompt(&rgb, PromptAlpha::Binary(&Grid::filled(5, 4, true))).is_err());
    }

    #[test]
    fn lift_single_pixel() {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0, 5, 5).unwrap();
        let mut m = Grid::filled(5, 5, false);
        m[(2, 2)] = true;
        let prompt = make_rgba_prompt(&RgbImage::filled(5, 5, [0.0; 3]), PromptAlpha::Binary(&m)).unwrap();
        let cloud = lift_to_pointcloud(&prompt, &Grid::filled(5, 5, 2.0), &k, &Extrinsics::identity(), 0.0).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(0.0, 0.0, 2.0)]);
        assert!(cloud.weights.is_none());

        let none = make_rgba_prompt(&RgbImage::filled(5, 5, [0.0; 3]), PromptAlpha::Binary(&Grid::filled(5, 5, false))).unwrap();
        assert!(lift_to_pointcloud(&none, &Grid::filled(5, 5, 2.0), &k, &Extrinsics::identity(), 0.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn lifted_sphere_stays_on_sphere() {
        let center = Vector3::new(0.3, -0.2, 4.0);
        let scene = SceneSpec {
            background: [0.0; 3],
            primitives: vec![Primitive::sphere(center.into(), 0.8, [1.0, 0.0, 0.0], "red sphere")],
        };
        let k = Intrinsics::centered(60.0, 48, 48).unwrap();
        let e = Extrinsics::look_at(Vector3::new(1.0, 0.5, 0.0), center, Vector3::y()).unwrap();
        let view = render_view(&scene, &k, &e);
        let full = Grid::filled(48, 48, true);
        let prompt = make_rgba_prompt(&view.frame.rgb, PromptAlpha::Binary(&full)).unwrap();
        let cloud = lift_to_pointcloud(&prompt, &view.frame.depth, &k, &e, 0.0).unwrap();
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            assert!((p - center).norm() <= 0.8 + 1e-6);
        }
    }

    #[test]
    fn soft_lift_carries_weights() {
        let k = Intrinsics::centered(10.0, 3, 3).unwrap();
        let logits = Grid::from_vec(3, 3, vec![-1.0, 0.0, 1.0, 2.0, -3.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let prompt = make_rgba_prompt(&RgbImage::filled(3, 3, [0.5; 3]), PromptAlpha::Soft(&logits)).unwrap();
        let cloud = lift_to_pointcloud(&prompt, &Grid::filled(3, 3, 1.0), &k, &Extrinsics::identity(), 0.0).unwrap();
        assert_eq!(cloud.len(), 9);
        assert_eq!(cloud.weights.as_ref().unwrap()[2], sigmoid(1.0));
        let xyz = cloud.to_xyz();
        assert_eq!(xyz.lines().count(), 9);
        assert_eq!(xyz.lines().next().unwrap().split(' ').count(), 4);
    }

    #[test]
    fn fusion_examples() {
        let p_ref = Grid::filled(2, 2, 2.0);
        assert_eq!(fuse_multiview(&p_ref, &[], FusionRule::Mean).unwrap(), p_ref);
        let id = WarpField::identity(Grid::filled(2, 2, true));
        assert_eq!(fuse_multiview(&p_ref, &[(&p_ref, &id)], FusionRule::Mean).unwrap(), p_ref);
        let zero = Grid::filled(2, 2, 0.0);
        assert_eq!(fuse_multiview(&p_ref, &[(&zero, &id)], FusionRule::Mean).unwrap(), Grid::filled(2, 2, 1.0));
        assert_eq!(fuse_multiview(&p_ref, &[(&zero, &id)], FusionRule::Max).unwrap(), p_ref);
        let mut valid = Grid::filled(2, 2, true);
        valid[(0, 0)] = false;
        let partial = WarpField::identity(valid);
        let fused = fuse_multiview(&p_ref, &[(&zero, &partial)], FusionRule::Mean).unwrap();
        assert_eq!(fused[(0, 0)], 2.0);
        assert_eq!(fused[(1, 1)], 1.0);
    }
}
