//! On-disk RGB-D scene format and pre-processing.
//!
//! ```text
//! scene_<id>/
//!   intrinsics.txt          3 lines x 3 floats, row-major K shared by all frames
//!   K_<fid>.txt             optional per-frame K, takes precedence
//!   frames/<fid>_rgb.png    8-bit RGB
//!   frames/<fid>_depth.png  16-bit gray, millimeters, 0 = invalid
//!   frames/<fid>_pose.txt   4 lines x 4 floats, row-major world-to-camera E
//!   masks/<expr_id>/<fid>.png  8-bit gray, > 127 = foreground
//!   expressions.txt         <expr_id> TAB <target label> TAB <utterance>
//! ```
//!
//! Depth is z-depth along the optical axis. Pixel centers are at integer
//! coordinates. Poses stored camera-to-world can be read with
//! [`IngestConfig::invert_poses`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage as PngRgb};
use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Extrinsics, Intrinsics};
use crate::grid::{DepthMap, Grid, Mask, RgbImage};

pub const DEFAULT_CLIP: (f64, f64) = (0.2, 5.0);

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub scene_id: String,
    pub frame_id: String,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Resize every frame to `[height, width]` with aspect-preserving padding.
    pub target_size: Option<[usize; 2]>,
    /// Pose files hold camera-to-world matrices.
    pub invert_poses: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            clip_lo: DEFAULT_CLIP.0,
            clip_hi: DEFAULT_CLIP.1,
            target_size: None,
            invert_poses: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub id: String,
    pub label: String,
    pub utterance: String,
    /// Ground-truth masks keyed by frame id.
    pub masks: BTreeMap<String, Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub scene_id: String,
    pub frame_ids: Vec<String>,
    pub expressions: Vec<Expression>,
}

/// Marks depths outside `[lo, hi]` (and non-positive values) invalid. Valid values pass through untouched.
pub fn clip_depth(depth: &DepthMap, lo: f64, hi: f64) -> Result<DepthMap> {
    if !(lo < hi) {
        return Err(Error::Config(format!("depth clip range [{lo}, {hi}] is empty")));
    }
    Ok(depth.map(|&d| if d > 0.0 && d >= lo && d <= hi { d } else { 0.0 }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resized {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub masks: Vec<Mask>,
    pub intrinsics: Intrinsics,
}

/// Placement of the scaled image inside the padded target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeMap {
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_left: usize,
    pub pad_top: usize,
    pub content: (usize, usize),
}

impl ResizeMap {
    pub fn new(src: (usize, usize), target: (usize, usize)) -> Result<Self> {
        let ((h, w), (th, tw)) = (src, target);
        if th == 0 || tw == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("degenerate resize {h}x{w} -> {th}x{tw}")));
        }
        let s = (th as f64 / h as f64).min(tw as f64 / w as f64);
        let nh = ((h as f64 * s).round() as usize).clamp(1, th);
        let nw = ((w as f64 * s).round() as usize).clamp(1, tw);
        Ok(ResizeMap {
            scale_x: nw as f64 / w as f64,
            scale_y: nh as f64 / h as f64,
            pad_left: (tw - nw) / 2,
            pad_top: (th - nh) / 2,
            content: (nh, nw),
        })
    }

    /// Continuous source pixel -> target pixel, keeping pixel areas aligned.
    pub fn forward(&self, u: f64, v: f64) -> (f64, f64) {
        (
            (u + 0.5) * self.scale_x - 0.5 + self.pad_left as f64,
            (v + 0.5) * self.scale_y - 0.5 + self.pad_top as f64,
        )
    }

    pub fn inverse(&self, u: f64, v: f64) -> (f64, f64) {
        (
            (u - self.pad_left as f64 + 0.5) / self.scale_x - 0.5,
            (v - self.pad_top as f64 + 0.5) / self.scale_y - 0.5,
        )
    }

    fn in_content(&self, r: usize, c: usize) -> bool {
        r >= self.pad_top && r < self.pad_top + self.content.0 && c >= self.pad_left && c < self.pad_left + self.content.1
    }

    pub fn intrinsics(&self, k: &Intrinsics, target: (usize, usize)) -> Result<Intrinsics> {
        let (cx, cy) = self.forward(k.cx, k.cy);
        Intrinsics::new(k.fx * self.scale_x, k.fy * self.scale_y, cx, cy, target.1, target.0)
    }
}

/// Aspect-preserving resize with symmetric zero padding. RGB is bilinear;
/// depth and masks use nearest neighbor so no values are invented.
pub fn resize_with_padding(
    rgb: &RgbImage,
    depth: &DepthMap,
    masks: &[Mask],
    k: &Intrinsics,
    target: (usize, usize),
) -> Result<Resized> {
    let dims = rgb.dims();
    depth.same_dims_as(dims, "resize_with_padding")?;
    for m in masks {
        m.same_dims_as(dims, "resize_with_padding")?;
    }
    if (k.height, k.width) != dims {
        return Err(Error::shape("resize_with_padding", &[dims.0, dims.1], &[k.height, k.width]));
    }
    let map = ResizeMap::new(dims, target)?;
    if dims == target {
        return Ok(Resized {
            rgb: rgb.clone(),
            depth: depth.clone(),
            masks: masks.to_vec(),
            intrinsics: *k,
        });
    }
    let (h, w) = dims;
    let (th, tw) = target;
    let nearest = |r: usize, c: usize| -> Option<(usize, usize)> {
        if !map.in_content(r, c) {
            return None;
        }
        let (u, v) = map.inverse(c as f64, r as f64);
        Some((
            (v.round().max(0.0) as usize).min(h - 1),
            (u.round().max(0.0) as usize).min(w - 1),
        ))
    };
    let mut out_rgb = RgbImage::filled(th, tw, [0.0; 3]);
    for r in 0..th {
        for c in 0..tw {
            if !map.in_content(r, c) {
                continue;
            }
            let (u, v) = map.inverse(c as f64, r as f64);
            let u = u.clamp(0.0, (w - 1) as f64);
            let v = v.clamp(0.0, (h - 1) as f64);
            let (c0, r0) = (u.floor() as usize, v.floor() as usize);
            let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
            let (fu, fv) = (u - c0 as f64, v - r0 as f64);
            let mut px = [0.0; 3];
            for (ch, out) in px.iter_mut().enumerate() {
                let top = rgb[(r0, c0)][ch] * (1.0 - fu) + rgb[(r0, c1)][ch] * fu;
                let bottom = rgb[(r1, c0)][ch] * (1.0 - fu) + rgb[(r1, c1)][ch] * fu;
                *out = top * (1.0 - fv) + bottom * fv;
            }
            out_rgb[(r, c)] = px;
        }
    }
    let out_depth = Grid::from_fn(th, tw, |r, c| nearest(r, c).map_or(0.0, |p| depth[p]));
    let out_masks = masks
        .iter()
        .map(|m| Grid::from_fn(th, tw, |r, c| nearest(r, c).is_some_and(|p| m[p])))
        .collect();
    Ok(Resized {
        rgb: out_rgb,
        depth: out_depth,
        masks: out_masks,
        intrinsics: map.intrinsics(k, target)?,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_matrix<const N: usize>(path: &Path) -> Result<[[f64; N]; N]> {
    let text = read_text(path)?;
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != N {
        return Err(Error::format(path, format!("expected {N} rows, found {}", rows.len())));
    }
    let mut m = [[0.0; N]; N];
    for (i, row) in rows.iter().enumerate() {
        let vals: Vec<f64> = row
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::format(path, format!("row {}: bad number {t:?}", i + 1))))
            .collect::<Result<_>>()?;
        if vals.len() != N {
            return Err(Error::format(path, format!("row {}: expected {N} values, found {}", i + 1, vals.len())));
        }
        m[i].copy_from_slice(&vals);
    }
    Ok(m)
}

fn write_matrix<const N: usize>(path: &Path, m: [[f64; N]; N]) -> Result<()> {
    let text: String = m
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing file")));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

fn save_image<I: Into<image::DynamicImage>>(path: &Path, img: I) -> Result<()> {
    img.into().save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn check_dims(path: &Path, got: (u32, u32), want: (usize, usize)) -> Result<()> {
    if (got.1 as usize, got.0 as usize) != want {
        return Err(Error::format(
            path,
            format!("image is {}x{}, expected {}x{}", got.1, got.0, want.0, want.1),
        ));
    }
    Ok(())
}

pub fn read_mask(path: &Path, dims: Option<(usize, usize)>) -> Result<Mask> {
    let img = open_image(path)?.to_luma8();
    if let Some(d) = dims {
        check_dims(path, img.dimensions(), d)?;
    }
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(h as usize, w as usize, |r, c| img.get_pixel(c as u32, r as u32)[0] > 127))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| Luma([if mask[(r as usize, c as usize)] { 255 } else { 0 }]));
    save_image(path, img)
}

pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, rgb: &RgbImage) -> Result<()> {
    let (h, w) = rgb.dims();
    let img = PngRgb::from_fn(w as u32, h as u32, |c, r| Rgb(rgb[(r as usize, c as usize)].map(quantize_unit)));
    save_image(path, img)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    RgbImage::from_vec(h as usize, w as usize, data)
}

/// Meters to 16-bit millimeters; invalid or unrepresentable depths become 0.
pub fn depth_to_mm(d: f64) -> u16 {
    let mm = (d * 1000.0).round();
    if d > 0.0 && mm >= 1.0 && mm <= u16::MAX as f64 {
        mm as u16
    } else {
        0
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.dims();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |c, r| Luma([depth_to_mm(depth[(r as usize, c as usize)])]));
    save_image(path, img)
}

pub fn read_depth(path: &Path, dims: (usize, usize)) -> Result<DepthMap> {
    let img = open_image(path)?;
    if !matches!(img.color(), image::ColorType::L16 | image::ColorType::L8) {
        return Err(Error::format(path, format!("depth must be single-channel, found {:?}", img.color())));
    }
    let img = img.to_luma16();
    check_dims(path, img.dimensions(), dims)?;
    let data = img.pixels().map(|p| p[0] as f64 / 1000.0).collect();
    DepthMap::from_vec(dims.0, dims.1, data)
}

fn frame_ids(frames_dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(frames_dir).map_err(|e| Error::io(frames_dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(frames_dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(|n| n.strip_suffix("_rgb.png")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

fn parse_expressions(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::format(path, format!("line {}: expected <id> TAB <label> TAB <utterance>", i + 1)));
        }
        out.push((parts[0].to_string(), parts[1].to_string(), parts[2].to_string()));
    }
    Ok(out)
}

fn load_frame(dir: &Path, scene_id: &str, fid: &str, cfg: &IngestConfig) -> Result<FrameSample> {
    let frames = dir.join("frames");
    let rgb = read_rgb(&frames.join(format!("{fid}_rgb.png")))?;
    let dims = rgb.dims();
    let depth = read_depth(&frames.join(format!("{fid}_depth.png")), dims)?;
    let depth = clip_depth(&depth, cfg.clip_lo, cfg.clip_hi)?;
    let k_path = {
        let own = dir.join(format!("K_{fid}.txt"));
        if own.is_file() {
            own
        } else {
            dir.join("intrinsics.txt")
        }
    };
    let k = Matrix3::from(parse_matrix::<3>(&k_path)?).transpose();
    let intrinsics = Intrinsics::from_matrix(&k, dims.1, dims.0).map_err(|e| Error::format(&k_path, e.to_string()))?;
    let pose_path = frames.join(format!("{fid}_pose.txt"));
    let mut e = Matrix4::from(parse_matrix::<4>(&pose_path)?).transpose();
    if cfg.invert_poses {
        e = e
            .try_inverse()
            .ok_or_else(|| Error::format(&pose_path, "pose matrix is singular"))?;
    }
    let extrinsics = Extrinsics::from_matrix4(&e).map_err(|err| Error::format(&pose_path, err.to_string()))?;
    Ok(FrameSample {
        scene_id: scene_id.to_string(),
        frame_id: fid.to_string(),
        rgb,
        depth,
        intrinsics,
        extrinsics,
    })
}

/// Loads a scene directory. Expressions keep only frames where the target is
/// visible with valid depth; expressions visible nowhere are dropped.
pub fn load_scene(dir: &Path, cfg: &IngestConfig) -> Result<(SceneManifest, Vec<FrameSample>)> {
    let scene_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_prefix("scene_").unwrap_or(n).to_string())
        .ok_or_else(|| Error::format(dir, "scene directory has no name"))?;
    let frames_dir = dir.join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::EmptyManifest { path: dir.to_path_buf() });
    }
    let ids = frame_ids(&frames_dir)?;
    if ids.is_empty() {
        return Err(Error::EmptyManifest { path: dir.to_path_buf() });
    }
    let mut frames: Vec<FrameSample> = ids
        .par_iter()
        .map(|fid| load_frame(dir, &scene_id, fid, cfg))
        .collect::<Result<_>>()?;

    let mut expressions = Vec::new();
    for (id, label, utterance) in parse_expressions(&dir.join("expressions.txt"))? {
        let mut masks = BTreeMap::new();
        for frame in &frames {
            let path = dir.join("masks").join(&id).join(format!("{}.png", frame.frame_id));
            if path.is_file() {
                masks.insert(frame.frame_id.clone(), read_mask(&path, Some(frame.rgb.dims()))?);
            }
        }
        if masks.is_empty() {
            return Err(Error::format(dir.join("masks").join(&id), "expression has no mask files"));
        }
        expressions.push(Expression {
            id,
            label,
            utterance,
            masks,
        });
    }

    if let Some([th, tw]) = cfg.target_size {
        for frame in &mut frames {
            let keys: Vec<String> = expressions
                .iter()
                .filter(|e| e.masks.contains_key(&frame.frame_id))
                .map(|e| e.id.clone())
                .collect();
            let masks: Vec<Mask> = expressions
                .iter()
                .filter_map(|e| e.masks.get(&frame.frame_id).cloned())
                .collect();
            let resized = resize_with_padding(&frame.rgb, &frame.depth, &masks, &frame.intrinsics, (th, tw))?;
            frame.rgb = resized.rgb;
            frame.depth = resized.depth;
            frame.intrinsics = resized.intrinsics;
            for (key, mask) in keys.iter().zip(resized.masks) {
                let expr = expressions.iter_mut().find(|e| &e.id == key).expect("expression id");
                expr.masks.insert(frame.frame_id.clone(), mask);
            }
        }
    }

    for expr in &mut expressions {
        expr.masks.retain(|fid, mask| {
            let frame = frames.iter().find(|f| &f.frame_id == fid).expect("frame id");
            mask.iter().zip(frame.depth.iter()).any(|(&m, &d)| m && d > 0.0)
        });
    }
    expressions.retain(|e| !e.masks.is_empty());

    Ok((
        SceneManifest {
            scene_id,
            frame_ids: ids,
            expressions,
        },
        frames,
    ))
}

/// Scene directories (`scene_*`) under `root`, sorted.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let is_scene = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("scene_"));
        if is_scene && path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyManifest { path: root.to_path_buf() });
    }
    Ok(dirs)
}

fn matrix_rows<const N: usize>(m: impl Fn(usize, usize) -> f64) -> [[f64; N]; N] {
    let mut out = [[0.0; N]; N];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m(r, c);
        }
    }
    out
}

/// Writes a scene in the ingest layout. A shared `intrinsics.txt` is written
/// when all frames agree, per-frame `K_<fid>.txt` files otherwise.
pub fn write_scene(dir: &Path, frames: &[FrameSample], expressions: &[Expression]) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let shared = frames.windows(2).all(|w| w[0].intrinsics == w[1].intrinsics);
    for (i, f) in frames.iter().enumerate() {
        let k = f.intrinsics.matrix();
        let k_rows = matrix_rows::<3>(|r, c| k[(r, c)]);
        if shared {
            if i == 0 {
                write_matrix(&dir.join("intrinsics.txt"), k_rows)?;
            }
        } else {
            write_matrix(&dir.join(format!("K_{}.txt", f.frame_id)), k_rows)?;
        }
        let e = f.extrinsics.to_matrix4();
        write_matrix(&frames_dir.join(format!("{}_pose.txt", f.frame_id)), matrix_rows::<4>(|r, c| e[(r, c)]))?;
        write_rgb(&frames_dir.join(format!("{}_rgb.png", f.frame_id)), &f.rgb)?;
        write_depth(&frames_dir.join(format!("{}_depth.png", f.frame_id)), &f.depth)?;
    }
    let mut listing = String::new();
    for expr in expressions {
        listing.push_str(&format!("{}\t{}\t{}\n", expr.id, expr.label, expr.utterance));
        let mask_dir = dir.join("masks").join(&expr.id);
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        for (fid, mask) in &expr.masks {
            write_mask(&mask_dir.join(format!("{fid}.png")), mask)?;
        }
    }
    let path = dir.join("expressions.txt");
    fs::write(&path, listing).map_err(|e| Error::io(&path, e))
}
