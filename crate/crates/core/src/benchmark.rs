//! Synthetic benchmark and the view-count / geometric-loss ablation.
//!
//! Each scene is rendered from `train_views + 1` arc cameras. The last frame is
//! held out: it never contributes a training mask and is the reference view at
//! evaluation. A method with `n` views fuses the held-out prediction with the
//! first `n - 1` training frames.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RgbImage;
use crate::ingest::{clip_depth, Expression, FrameSample, SceneManifest, DEFAULT_CLIP};
use crate::metrics::{evaluate_run, MetricConfig, MetricReport, Sample};
use crate::prompt_lifting::{lift_to_pointcloud, make_rgba_prompt, FusionRule, PromptAlpha};
use crate::segmenter::{SegmenterModel, TextInstruction};
use crate::synthscene::{generate_rig_with, random_scene, render_view, SceneGenConfig, SceneSpec};
use crate::trainer::{infer_multiview, train_loop, Dataset, RunOutput, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenes: usize,
    pub train_views: usize,
    /// Seed of the scene generator; training seeds are separate.
    pub seed: u64,
    pub scene: SceneGenConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        // larger objects than the generator default so every target covers a
        // few hundred pixels at 64x64
        let mut scene = SceneGenConfig {
            min_size: 0.3,
            max_size: 0.45,
            spread: 0.8,
            rig_radius: 2.6,
            ..SceneGenConfig::default()
        };
        scene.rig.focal = 80.0;
        BenchmarkConfig {
            scenes: 20,
            train_views: 3,
            seed: 1000,
            scene,
        }
    }
}

/// Training settings of the ablation grid: the library defaults with a larger
/// learning rate and a budget that keeps the five-seed grid under half an hour
/// on one core.
pub fn default_train_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.optimizer.lr = 1e-3;
    cfg.iterations = 1200;
    cfg
}

pub fn frame_id(i: usize) -> String {
    format!("{i:03}")
}

pub fn scene_id(i: usize) -> String {
    format!("{i:04}")
}

/// Renders one scene's frames and per-expression masks. Frames are named
/// `000`, `001`, ...; expressions keep frames where the target is visible
/// with valid depth, and are dropped when it is visible in none.
pub fn render_scene(spec: &SceneSpec, id: &str, gen: &SceneGenConfig, views: usize, seed: u64) -> Result<(SceneManifest, Vec<FrameSample>)> {
    let (lo, hi) = spec.bounds();
    let look_at = ((lo + hi) / 2.0).into();
    let rig = generate_rig_with(&gen.rig, views, look_at, gen.rig_radius, seed)?;
    let mut frames = Vec::with_capacity(views);
    let mut renders = Vec::with_capacity(views);
    for (i, (k, e)) in rig.cameras.iter().enumerate() {
        let mut view = render_view(spec, k, e);
        view.frame.scene_id = id.to_string();
        view.frame.frame_id = frame_id(i);
        view.frame.depth = clip_depth(&view.frame.depth, DEFAULT_CLIP.0, DEFAULT_CLIP.1)?;
        if gen.pixel_noise > 0.0 {
            add_pixel_noise(&mut view.frame.rgb, gen.pixel_noise, seed.wrapping_mul(31).wrapping_add(i as u64));
        }
        frames.push(view.frame.clone());
        renders.push(view);
    }
    let mut expressions = Vec::new();
    for (n, (prim, label)) in spec.expressions().into_iter().enumerate() {
        let masks = renders
            .iter()
            .map(|v| (v.frame.frame_id.clone(), v.mask_of(prim)))
            .filter(|(_, m)| m.count() > 0)
            .collect::<std::collections::BTreeMap<_, _>>();
        // ingestion rejects expressions without masks
        if masks.is_empty() {
            continue;
        }
        expressions.push(Expression {
            id: format!("e{n}"),
            label: label.to_string(),
            utterance: label.to_string(),
            masks,
        });
    }
    let manifest = SceneManifest {
        scene_id: id.to_string(),
        frame_ids: frames.iter().map(|f| f.frame_id.clone()).collect(),
        expressions,
    };
    Ok((manifest, frames))
}

/// Adds clamped Gaussian noise to every channel.
pub fn add_pixel_noise(rgb: &mut RgbImage, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite noise std");
    for px in rgb.pixels_mut() {
        for c in px.iter_mut() {
            *c = (*c + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
}

/// Generator seed of scene `i` in a set seeded with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Generates and renders `scenes` random scenes with `views` frames each.
pub fn build_scenes(
    gen: &SceneGenConfig,
    scenes: usize,
    views: usize,
    seed: u64,
) -> Result<Vec<(SceneSpec, SceneManifest, Vec<FrameSample>)>> {
    (0..scenes)
        .map(|i| {
            let seed = scene_seed(seed, i);
            let spec = random_scene(gen, seed)?;
            let (manifest, frames) = render_scene(&spec, &scene_id(i), gen, views, seed)?;
            Ok((spec, manifest, frames))
        })
        .collect()
}

/// The full benchmark: every scene rendered from `train_views + 1` cameras.
pub fn build_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<(SceneManifest, Vec<FrameSample>)>> {
    if cfg.scenes == 0 || cfg.train_views == 0 {
        return Err(Error::Config("benchmark needs at least one scene and one training view".into()));
    }
    let scenes = build_scenes(&cfg.scene, cfg.scenes, cfg.train_views + 1, cfg.seed)?;
    Ok(scenes.into_iter().map(|(_, m, f)| (m, f)).collect())
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub views: usize,
    pub geo_loss: bool,
}

impl Method {
    pub const GRID: [Method; 4] = [
        Method { views: 1, geo_loss: false },
        Method { views: 1, geo_loss: true },
        Method { views: 2, geo_loss: true },
        Method { views: 3, geo_loss: true },
    ];

    pub fn name(&self) -> String {
        let v = if self.views == 1 { "view" } else { "views" };
        let g = if self.geo_loss { "w/ geo" } else { "w/o geo" };
        format!("{} {v}, {g}", self.views)
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub seed: u64,
    pub report: MetricReport,
    /// Median wall time of one training iteration.
    pub secs_per_iter: f64,
    pub train_secs: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Which frames train and which frame is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub held_out: String,
}

impl Split {
    /// Frames `000..n` train, frame `n` is held out.
    pub fn standard(train_views: usize) -> Self {
        Split {
            train: (0..train_views).map(frame_id).collect(),
            held_out: frame_id(train_views),
        }
    }

    /// Holds out `held_out`, or the last frame id in sorted order, and trains on the rest.
    pub fn from_frame_ids(ids: &[String], held_out: Option<&str>) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort();
        ids.dedup();
        let held = match held_out {
            Some(h) if ids.iter().any(|i| i == h) => h.to_string(),
            Some(h) => return Err(Error::Data(format!("held-out frame {h} not among frames {}", ids.join(",")))),
            None => ids.last().cloned().ok_or_else(|| Error::Data("no frames to split".into()))?,
        };
        let train: Vec<String> = ids.into_iter().filter(|i| *i != held).collect();
        if train.is_empty() {
            return Err(Error::Data("split leaves no training frames".into()));
        }
        Ok(Split { train, held_out: held })
    }
}

/// Trains one method from scratch and scores it on the held-out frames.
pub fn run_method(
    data: &[(SceneManifest, Vec<FrameSample>)],
    split: &Split,
    base: &TrainConfig,
    method: Method,
    seed: u64,
) -> Result<MethodResult> {
    let mut cfg = base.clone();
    cfg.views_per_sample = method.views;
    cfg.geo_loss = method.geo_loss;
    cfg.seed = seed;
    cfg.model.lora_seed = seed.wrapping_mul(7919).wrapping_add(1);
    cfg.validate()?;
    let mut model = SegmenterModel::new(cfg.model.clone())?;
    let mut dataset = Dataset::new(data.to_vec(), model.vocabulary(), Some(&split.train))?;
    let mut state = TrainState::new(&model, cfg.seed);
    let start = Instant::now();
    let log = train_loop(&mut model, &mut dataset, &cfg, &mut state, &RunOutput::default())?;
    let train_secs = start.elapsed().as_secs_f64();
    let report = evaluate_held_out(&model, data, split, method.views, &method.name())?;
    Ok(MethodResult {
        method,
        seed,
        report,
        secs_per_iter: median(log.iter().map(|r| r.secs).collect()),
        train_secs,
    })
}

/// Held-out evaluation: the reference is the held-out frame, fused with the
/// first `views - 1` training frames.
pub fn evaluate_held_out(
    model: &SegmenterModel,
    data: &[(SceneManifest, Vec<FrameSample>)],
    split: &Split,
    views: usize,
    method: &str,
) -> Result<MetricReport> {
    evaluate_with(model, data, method, |id| id == split.held_out, |_, frames| {
        split
            .train
            .iter()
            .filter_map(|id| frames.iter().find(|f| f.frame_id == *id))
            .take(views.saturating_sub(1))
            .collect()
    })
}

/// Scores every frame that has a ground-truth mask as a reference, fused with
/// up to `views - 1` of the scene's other frames in id order.
pub fn evaluate_all_frames(
    model: &SegmenterModel,
    data: &[(SceneManifest, Vec<FrameSample>)],
    views: usize,
    method: &str,
) -> Result<MetricReport> {
    evaluate_with(model, data, method, |_| true, |reference, frames| {
        frames
            .iter()
            .filter(|f| f.frame_id != reference)
            .take(views.saturating_sub(1))
            .collect()
    })
}

fn evaluate_with<'d>(
    model: &SegmenterModel,
    data: &'d [(SceneManifest, Vec<FrameSample>)],
    method: &str,
    is_reference: impl Fn(&str) -> bool,
    aux_for: impl Fn(&str, &'d [FrameSample]) -> Vec<&'d FrameSample>,
) -> Result<MetricReport> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (manifest, frames) in data {
        for reference in frames.iter().filter(|f| is_reference(&f.frame_id)) {
            let mut views_used = vec![reference];
            views_used.extend(aux_for(&reference.frame_id, frames));
            for expr in &manifest.expressions {
                let Some(gt_mask) = expr.masks.get(&reference.frame_id) else {
                    continue;
                };
                let text = TextInstruction::parse(&expr.utterance, model.vocabulary())?;
                let out = infer_multiview(model, &views_used, &text, FusionRule::Mean)?;
                let gt_prompt = make_rgba_prompt(&reference.rgb, PromptAlpha::Binary(gt_mask))?;
                let gt_cloud =
                    lift_to_pointcloud(&gt_prompt, &reference.depth, &reference.intrinsics, &reference.extrinsics, 0.0)?;
                let sample = |mask, cloud| Sample {
                    scene: manifest.scene_id.clone(),
                    expression: expr.id.clone(),
                    view: reference.frame_id.clone(),
                    mask,
                    cloud: Some(cloud),
                };
                preds.push(sample(out.mask, out.cloud));
                gts.push(sample(gt_mask.clone(), gt_cloud));
            }
        }
    }
    evaluate_run(method, &preds, &gts, &MetricConfig::default())
}

/// Aggregated ablation grid over several training seeds.
#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub results: Vec<MethodResult>,
    /// Rows that errored: method, seed, message.
    pub failures: Vec<(Method, u64, String)>,
}

impl AblationSummary {
    pub fn for_method(&self, m: Method) -> impl Iterator<Item = &MethodResult> {
        self.results.iter().filter(move |r| r.method == m)
    }

    pub fn mean_miou(&self, m: Method) -> f64 {
        let v: Vec<f64> = self.for_method(m).map(|r| r.report.miou).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn miou_for(&self, m: Method, seed: u64) -> Option<f64> {
        self.for_method(m).find(|r| r.seed == seed).map(|r| r.report.miou)
    }

    pub fn median_secs(&self, m: Method) -> f64 {
        median(self.for_method(m).map(|r| r.secs_per_iter).collect())
    }

    /// Mean over seeds per method: mIoU, F-score, CD, seconds per iteration.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>8} {:>8} {:>10} {:>12}\n",
            "method", "miou", "fscore", "cd_x100", "secs_per_it"
        );
        let mut methods: Vec<Method> = Vec::new();
        let all = self.results.iter().map(|r| r.method).chain(self.failures.iter().map(|f| f.0));
        for m in all {
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
        methods.sort_by_key(|m| Method::GRID.iter().position(|g| g == m).unwrap_or(usize::MAX));
        for m in methods {
            let rs: Vec<&MethodResult> = self.for_method(m).collect();
            if rs.is_empty() {
                let _ = writeln!(out, "{:<20} failed", m.name());
                continue;
            }
            let n = rs.len() as f64;
            let mean_of = |f: &dyn Fn(&MethodResult) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let _ = writeln!(
                out,
                "{:<20} {:>8.4} {:>8.4} {:>10.4} {:>12.4}",
                m.name(),
                rs.iter().map(|r| r.report.miou).sum::<f64>() / n,
                mean_of(&|r| r.report.fscore),
                mean_of(&|r| r.report.chamfer_x100),
                self.median_secs(m)
            );
        }
        out
    }
}

/// Runs every method for every seed on the standard benchmark.
pub fn run_ablation(
    bench: &BenchmarkConfig,
    base: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    progress: impl FnMut(Method, u64, &Result<MethodResult>),
) -> Result<AblationSummary> {
    let data = build_benchmark(bench)?;
    Ok(run_grid(&data, &Split::standard(bench.train_views), base, methods, seeds, progress))
}

/// Runs every method for every seed, in seed-major order. A failing row is
/// recorded and the grid continues.
pub fn run_grid(
    data: &[(SceneManifest, Vec<FrameSample>)],
    split: &Split,
    base: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    mut progress: impl FnMut(Method, u64, &Result<MethodResult>),
) -> AblationSummary {
    let mut summary = AblationSummary {
        results: Vec::new(),
        failures: Vec::new(),
    };
    for &seed in seeds {
        for &m in methods {
            let r = run_method(data, split, base, m, seed);
            progress(m, seed, &r);
            match r {
                Ok(r) => summary.results.push(r),
                Err(e) => summary.failures.push((m, seed, e.to_string())),
            }
        }
    }
    summary
}
