//! Analytic RGB-D scenes: flat-shaded spheres and axis-aligned boxes rendered
//! by closed-form ray casting, camera rigs on a circular arc, and an exact
//! cross-view correspondence oracle.
//!
//! World frame is y-up. Rays are parameterised so that the ray parameter of a
//! hit equals its z-depth in the rendering camera.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, Extrinsics, Intrinsics, PixelCoord};
use crate::grid::{Grid, Mask, RgbImage};
use crate::ingest::FrameSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub color: [f64; 3],
    /// Referring expression for this primitive; empty for unlabeled scenery.
    #[serde(default)]
    pub label: String,
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, color: [f64; 3], label: &str) -> Self {
        Primitive {
            shape: Shape::Sphere { radius },
            center,
            color,
            label: label.to_string(),
        }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3], color: [f64; 3], label: &str) -> Self {
        Primitive {
            shape: Shape::Box { half_extents },
            center,
            color,
            label: label.to_string(),
        }
    }

    /// Nearest ray parameter `t > t_min` where `origin + t dir` meets the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<f64> {
        let c = Vector3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = origin - c;
                let a = dir.dot(dir);
                let half_b = oc.dot(dir);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = half_b * half_b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-half_b - sq) / a;
                let t1 = (-half_b + sq) / a;
                [t0, t1].into_iter().find(|&t| t > t_min)
            }
            Shape::Box { half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for i in 0..3 {
                    let lo = c[i] - half_extents[i];
                    let hi = c[i] + half_extents[i];
                    if dir[i].abs() < 1e-300 {
                        if origin[i] < lo || origin[i] > hi {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (lo - origin[i]) / dir[i];
                    let t2 = (hi - origin[i]) / dir[i];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                if t_near > t_far {
                    return None;
                }
                [t_near, t_far].into_iter().find(|&t| t > t_min)
            }
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let c = Vector3::from(self.center);
        let h = match self.shape {
            Shape::Sphere { radius } => Vector3::repeat(radius),
            Shape::Box { half_extents } => Vector3::from(half_extents),
        };
        (c - h, c + h)
    }

    /// Uniform-ish samples on the surface, used as ground-truth geometry.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        let c = Vector3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => (0..n)
                .map(|_| {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let s = (1.0 - z * z).sqrt();
                    c + radius * Vector3::new(s * phi.cos(), s * phi.sin(), z)
                })
                .collect(),
            Shape::Box { half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                (0..n)
                    .map(|_| {
                        let pick = rng.random_range(0.0..total);
                        let axis = if pick < areas[0] {
                            0
                        } else if pick < areas[0] + areas[1] {
                            1
                        } else {
                            2
                        };
                        let mut p = Vector3::zeros();
                        for i in 0..3 {
                            p[i] = if i == axis {
                                if rng.random_bool(0.5) {
                                    h[i]
                                } else {
                                    -h[i]
                                }
                            } else {
                                rng.random_range(-h[i]..h[i])
                            };
                        }
                        c + p
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: [f64; 3],
    #[serde(rename = "primitive")]
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("scene needs at least one primitive".into()));
        }
        for p in &self.primitives {
            let size_ok = match p.shape {
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            };
            let color_ok = p.color.iter().all(|c| (0.0..=1.0).contains(c));
            if !size_ok || !color_ok || !p.center.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("invalid primitive {p:?}")));
            }
        }
        Ok(())
    }

    /// Nearest hit `(t, primitive index)` along a ray.
    pub fn first_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(origin, dir, 1e-9) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    /// Bounding box of all labeled primitives.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in self.primitives.iter().filter(|p| !p.label.is_empty()) {
            let (a, b) = p.bounds();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        (lo, hi)
    }

    /// Indices and labels of referable primitives.
    pub fn expressions(&self) -> Vec<(usize, &str)> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.label.is_empty())
            .map(|(i, p)| (i, p.label.as_str()))
            .collect()
    }
}

/// Camera ray through pixel `p`: origin at the camera center and a direction
/// whose camera-frame z component is 1.
pub fn pixel_ray(k: &Intrinsics, e: &Extrinsics, p: PixelCoord) -> (Vector3<f64>, Vector3<f64>) {
    let d_cam = Vector3::new((p.u - k.cx) / k.fx, (p.v - k.cy) / k.fy, 1.0);
    (e.center(), e.rotation.transpose() * d_cam)
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub frame: FrameSample,
    /// Index of the first primitive hit at each pixel.
    pub hits: Grid<Option<usize>>,
}

impl RenderedView {
    /// First-hit mask of one primitive.
    pub fn mask_of(&self, primitive: usize) -> Mask {
        self.hits.map(|h| *h == Some(primitive))
    }
}

/// Ray casts every pixel; misses get the background color and depth 0.
pub fn render_view(scene: &SceneSpec, k: &Intrinsics, e: &Extrinsics) -> RenderedView {
    let (h, w) = (k.height, k.width);
    let mut rgb = vec![scene.background; h * w];
    let mut depth = vec![0.0; h * w];
    let mut hits = vec![None; h * w];
    rgb.par_chunks_mut(w)
        .zip(depth.par_chunks_mut(w))
        .zip(hits.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, ((rgb_row, depth_row), hit_row))| {
            for col in 0..w {
                let (o, d) = pixel_ray(k, e, PixelCoord::new(col as f64, row as f64));
                if let Some((t, i)) = scene.first_hit(&o, &d) {
                    rgb_row[col] = scene.primitives[i].color;
                    depth_row[col] = t;
                    hit_row[col] = Some(i);
                }
            }
        });
    RenderedView {
        frame: FrameSample {
            scene_id: String::new(),
            frame_id: String::new(),
            rgb: RgbImage::from_vec(h, w, rgb).expect("render dims"),
            depth: Grid::from_vec(h, w, depth).expect("render dims"),
            intrinsics: *k,
            extrinsics: *e,
        },
        hits: Grid::from_vec(h, w, hits).expect("render dims"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Azimuth step between consecutive cameras, degrees.
    pub arc_step_deg: f64,
    pub elevation_deg: f64,
    /// Uniform jitter amplitude on azimuth/elevation, degrees.
    pub jitter_deg: f64,
    /// Relative jitter amplitude on the radius.
    pub radius_jitter: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            width: 64,
            height: 64,
            focal: 64.0,
            arc_step_deg: 15.0,
            elevation_deg: 25.0,
            jitter_deg: 2.0,
            radius_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<(Intrinsics, Extrinsics)>,
}

pub fn generate_rig(n_views: usize, look_at: [f64; 3], radius: f64, seed: u64) -> Result<CameraRig> {
    generate_rig_with(&RigConfig::default(), n_views, look_at, radius, seed)
}

/// Cameras on a horizontal arc around `look_at`, all aimed at it.
pub fn generate_rig_with(cfg: &RigConfig, n_views: usize, look_at: [f64; 3], radius: f64, seed: u64) -> Result<CameraRig> {
    if n_views == 0 {
        return Err(Error::Config("rig needs at least one view".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Config("rig radius must be positive".into()));
    }
    let k = Intrinsics::centered(cfg.focal, cfg.width, cfg.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: f64 = rng.random_range(0.0..360.0);
    let target = Vector3::from(look_at);
    let mut cameras = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let jitter = |rng: &mut ChaCha8Rng| {
            if cfg.jitter_deg > 0.0 {
                rng.random_range(-cfg.jitter_deg..cfg.jitter_deg)
            } else {
                0.0
            }
        };
        let az = (start + i as f64 * cfg.arc_step_deg + jitter(&mut rng)).to_radians();
        let el = (cfg.elevation_deg + jitter(&mut rng)).to_radians();
        let r = if cfg.radius_jitter > 0.0 {
            radius * (1.0 + rng.random_range(-cfg.radius_jitter..cfg.radius_jitter))
        } else {
            radius
        };
        let eye = target + r * Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
        let e = Extrinsics::look_at(eye, target, Vector3::y())?;
        cameras.push((k, e));
    }
    Ok(CameraRig { cameras })
}

/// Fraction of box samples visible to camera `a` that camera `b` also sees.
pub fn frustum_overlap(
    cam_a: &(Intrinsics, Extrinsics),
    cam_b: &(Intrinsics, Extrinsics),
    bounds: (Vector3<f64>, Vector3<f64>),
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sees = |cam: &(Intrinsics, Extrinsics), x: Vector3<f64>| {
        project(cam.1.world_to_camera(x), &cam.0).is_ok_and(|p| cam.0.contains(p))
    };
    let (lo, hi) = bounds;
    let mut in_a = 0usize;
    let mut in_both = 0usize;
    for _ in 0..samples {
        let x = Vector3::from_fn(|i, _| if hi[i] > lo[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] });
        if sees(cam_a, x) {
            in_a += 1;
            if sees(cam_b, x) {
                in_both += 1;
            }
        }
    }
    if in_a == 0 {
        0.0
    } else {
        in_both as f64 / in_a as f64
    }
}

/// Exact correspondences from view `b` into view `a`.
#[derive(Debug, Clone)]
pub struct Correspondence {
    /// Projection into `a` of the surface point seen at each `b` pixel, when it lands in `a`'s image.
    pub coords: Grid<Option<PixelCoord>>,
    /// The point lands in `a`'s image but another surface is in front of it there.
    pub occluded: Mask,
}

impl Correspondence {
    /// Pixels whose surface point is visible in both views.
    pub fn co_visible(&self) -> Mask {
        Grid::from_fn(self.coords.height(), self.coords.width(), |r, c| {
            self.coords[(r, c)].is_some() && !self.occluded[(r, c)]
        })
    }
}

/// Ray casts each pixel of `b` against the scene and projects the hit point
/// into `a`, with no depth-map lookups.
pub fn cross_view_oracle(
    scene: &SceneSpec,
    cam_a: (&Intrinsics, &Extrinsics),
    cam_b: (&Intrinsics, &Extrinsics),
) -> Correspondence {
    let (k_a, e_a) = cam_a;
    let (k_b, e_b) = cam_b;
    let (h, w) = (k_b.height, k_b.width);
    let mut coords = Grid::filled(h, w, None);
    let mut occluded = Grid::filled(h, w, false);
    for r in 0..h {
        for c in 0..w {
            let (o, d) = pixel_ray(k_b, e_b, PixelCoord::new(c as f64, r as f64));
            let Some((t, _)) = scene.first_hit(&o, &d) else {
                continue;
            };
            let x = o + t * d;
            let in_a = e_a.world_to_camera(x);
            let Ok(p) = project(in_a, k_a) else {
                continue;
            };
            if !k_a.contains(p) {
                continue;
            }
            coords[(r, c)] = Some(p);
            let (oa, da) = pixel_ray(k_a, e_a, p);
            if let Some((ta, _)) = scene.first_hit(&oa, &da) {
                if ta < in_a.z - 1e-6 * in_a.z.max(1.0) {
                    occluded[(r, c)] = true;
                }
            }
        }
    }
    Correspondence { coords, occluded }
}

/// Parameters of the random scene generator used by `synth` and the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Objects are placed on a ground plane inside this half-width square.
    pub spread: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub floor: bool,
    pub floor_color: [f64; 3],
    pub background: [f64; 3],
    pub rig_radius: f64,
    pub rig: RigConfig,
    /// Std of per-pixel Gaussian noise added to rendered RGB, independently per view.
    pub pixel_noise: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            min_objects: 2,
            max_objects: 3,
            spread: 0.7,
            min_size: 0.2,
            max_size: 0.35,
            floor: true,
            floor_color: [0.5, 0.5, 0.5],
            background: [0.0, 0.0, 0.0],
            rig_radius: 3.0,
            rig: RigConfig::default(),
            pixel_noise: 0.0,
        }
    }
}

pub fn color_rgb(word: &str) -> Option<[f64; 3]> {
    Some(match word {
        "red" => [1.0, 0.0, 0.0],
        "green" => [0.0, 1.0, 0.0],
        "blue" => [0.0, 0.0, 1.0],
        "yellow" => [1.0, 1.0, 0.0],
        "cyan" => [0.0, 1.0, 1.0],
        "magenta" => [1.0, 0.0, 1.0],
        _ => return None,
    })
}

/// A random tabletop scene with distinct-colored labeled objects on a floor.
pub fn random_scene(cfg: &SceneGenConfig, seed: u64) -> Result<SceneSpec> {
    use crate::segmenter::{COLOR_WORDS, SHAPE_WORDS};
    if cfg.min_objects == 0 || cfg.max_objects < cfg.min_objects || cfg.max_objects > COLOR_WORDS.len() {
        return Err(Error::Config("invalid object count range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut colors: Vec<&str> = COLOR_WORDS.to_vec();
    let mut primitives: Vec<Primitive> = Vec::new();
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while primitives.len() < n {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config("could not place scene objects without overlap".into()));
        }
        let size = rng.random_range(cfg.min_size..cfg.max_size);
        let x = rng.random_range(-cfg.spread..cfg.spread);
        let z = rng.random_range(-cfg.spread..cfg.spread);
        if placed.iter().any(|&(px, pz, ps)| ((px - x).powi(2) + (pz - z).powi(2)).sqrt() < (ps + size) * 1.2 + 0.05) {
            continue;
        }
        let color_word = colors.remove(rng.random_range(0..colors.len()));
        let shape_word = SHAPE_WORDS[rng.random_range(0..SHAPE_WORDS.len())];
        let color = color_rgb(color_word).expect("palette color");
        let label = format!("{color_word} {shape_word}");
        let p = if shape_word == "sphere" {
            Primitive::sphere([x, size, z], size, color, &label)
        } else {
            Primitive::cuboid([x, size, z], [size, size, size], color, &label)
        };
        placed.push((x, z, size));
        primitives.push(p);
    }
    if cfg.floor {
        let half = cfg.spread + cfg.max_size * 2.0 + 0.3;
        primitives.push(Primitive::cuboid([0.0, -0.05, 0.0], [half, 0.05, half], cfg.floor_color, ""));
    }
    let scene = SceneSpec {
        background: cfg.background,
        primitives,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn scene_from_toml(s: &str) -> Result<SceneSpec> {
    let scene: SceneSpec = toml::from_str(s).map_err(|e| Error::Config(format!("scene file: {e}")))?;
    scene.validate()?;
    Ok(scene)
}

pub fn scene_to_toml(scene: &SceneSpec) -> String {
    toml::to_string(scene).expect("scene serializes")
}
