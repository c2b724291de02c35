//! LoRA fine-tuning loop, AdamW, checkpoint/resume and the inference pipelines.
//!
//! A training sample is one scene, one expression and `views_per_sample`
//! distinct frames. Every drawn frame gets the segmentation loss; the
//! geometric loss runs over every ordered pair of drawn frames. With a single
//! view and the geometric loss on, a partner frame is drawn and evaluated
//! without gradients, and only the primary frame receives the consistency term.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{self, MatrixRecord, Section};
use crate::error::{Error, Result};
use crate::grid::{LogitMap, Mask};
use crate::ingest::{Expression, FrameSample, SceneManifest};
use crate::losses::{geo_direction_on_tape, seg_view_on_tape, GeoNormalization, LossBreakdown, DEFAULT_LAMBDA};
use crate::prompt_lifting::{
    fuse_multiview, lift_to_pointcloud, make_rgba_prompt, threshold_mask, FusionRule, PointCloud, PromptAlpha,
    RgbaPrompt, DEFAULT_TAU,
};
use crate::segmenter::{SegmenterConfig, SegmenterModel, TextInstruction};
use crate::warp::{compute_warp_field, WarpField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First/second moments per parameter buffer and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamWState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &SegmenterModel) -> Self {
        let sizes: Vec<usize> = model.adapters().flat_map(|a| [a.a.len(), a.b.len()]).collect();
        Self::new(&sizes)
    }
}

/// One decoupled-weight-decay Adam step:
/// `θ ← θ - lr (m̂ / (√v̂ + ε) + wd θ)`.
pub fn adamw_update(params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw_update", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape("adamw_update", &[p.len()], &[g.len(), state.m[i].len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub optimizer: AdamWConfig,
    pub lambda: f64,
    pub views_per_sample: usize,
    pub geo_loss: bool,
    pub geo_normalization: GeoNormalization,
    /// Samples whose gradients are averaged into one update.
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Write adapter/optimizer checkpoints every this many iterations; 0 = only at the end.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Occlusion-aware warp fields for the geometric loss.
    pub depth_check: bool,
    pub model: SegmenterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            lambda: DEFAULT_LAMBDA,
            views_per_sample: 2,
            geo_loss: true,
            geo_normalization: GeoNormalization::default(),
            batch_size: 1,
            iterations: 200,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            depth_check: false,
            model: SegmenterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.model.validate()?;
        if !(1..=3).contains(&self.views_per_sample) {
            return Err(Error::Config(format!("views_per_sample must be 1, 2 or 3, got {}", self.views_per_sample)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Frames that must be drawn per sample (a geometric-loss partner counts).
    pub fn frames_needed(&self) -> usize {
        if self.geo_loss {
            self.views_per_sample.max(2)
        } else {
            self.views_per_sample
        }
    }
}

/// Training expression with its parsed instruction and per-frame masks.
#[derive(Debug, Clone)]
pub struct TrainExpression {
    pub id: String,
    pub text: TextInstruction,
    /// `(frame index, mask)` for frames allowed in training.
    pub masks: Vec<(usize, Mask)>,
}

#[derive(Debug, Clone)]
pub struct SceneData {
    pub manifest: SceneManifest,
    pub frames: Vec<FrameSample>,
    pub expressions: Vec<TrainExpression>,
    fields: HashMap<(usize, usize), Arc<WarpField>>,
}

impl SceneData {
    /// Field pulling frame `src` into frame `dst`, cached.
    pub fn field(&mut self, src: usize, dst: usize, depth_check: bool) -> Result<Arc<WarpField>> {
        if let Some(f) = self.fields.get(&(src, dst)) {
            return Ok(f.clone());
        }
        let (a, b) = (&self.frames[src], &self.frames[dst]);
        let field = if depth_check {
            crate::warp::compute_warp_field_with(
                &b.depth,
                &a.intrinsics,
                &b.intrinsics,
                &a.extrinsics,
                &b.extrinsics,
                Some(crate::warp::DepthCheck::new(&a.depth)),
            )?
        } else {
            compute_warp_field(&b.depth, &a.intrinsics, &b.intrinsics, &a.extrinsics, &b.extrinsics)?
        };
        let field = Arc::new(field);
        self.fields.insert((src, dst), field.clone());
        Ok(field)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SceneData>,
}

impl Dataset {
    /// Builds a training set. `train_frames`, when given, restricts which
    /// frame ids may be drawn; expressions keep only masks on those frames.
    pub fn new(
        scenes: Vec<(SceneManifest, Vec<FrameSample>)>,
        vocabulary: &[String],
        train_frames: Option<&[String]>,
    ) -> Result<Self> {
        let mut out = Vec::new();
        for (manifest, frames) in scenes {
            let expressions = manifest
                .expressions
                .iter()
                .map(|e: &Expression| {
                    let text = TextInstruction::parse(&e.utterance, vocabulary)?;
                    let masks = e
                        .masks
                        .iter()
                        .filter(|(fid, _)| train_frames.is_none_or(|allowed| allowed.contains(fid)))
                        .filter_map(|(fid, m)| {
                            frames.iter().position(|f| &f.frame_id == fid).map(|i| (i, m.clone()))
                        })
                        .collect();
                    Ok(TrainExpression {
                        id: e.id.clone(),
                        text,
                        masks,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SceneData {
                manifest,
                frames,
                expressions,
                fields: HashMap::new(),
            });
        }
        if out.is_empty() {
            return Err(Error::Data("training set has no scenes".into()));
        }
        Ok(Dataset { scenes: out })
    }

    /// Scenes that can supply `n` distinct frames for at least one expression.
    pub fn usable_scenes(&self, n: usize) -> Vec<usize> {
        (0..self.scenes.len())
            .filter(|&s| self.scenes[s].expressions.iter().any(|e| e.masks.len() >= n))
            .collect()
    }
}

/// Indices of one drawn training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSample {
    pub scene: usize,
    pub expression: usize,
    /// Positions into the expression's mask list; distinct.
    pub views: Vec<usize>,
}

/// Uniform scene, then uniform expression, then `n` distinct frames without replacement.
pub fn sample_views(dataset: &Dataset, usable: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<ViewSample> {
    if usable.is_empty() {
        return Err(Error::Data(format!("no scene has {n} frames with a visible target")));
    }
    let scene = usable[rng.random_range(0..usable.len())];
    let candidates: Vec<usize> = dataset.scenes[scene]
        .expressions
        .iter()
        .enumerate()
        .filter(|(_, e)| e.masks.len() >= n)
        .map(|(i, _)| i)
        .collect();
    let expression = candidates[rng.random_range(0..candidates.len())];
    let mut pool: Vec<usize> = (0..dataset.scenes[scene].expressions[expression].masks.len()).collect();
    let mut views = Vec::with_capacity(n);
    for _ in 0..n {
        views.push(pool.remove(rng.random_range(0..pool.len())));
    }
    Ok(ViewSample {
        scene,
        expression,
        views,
    })
}

/// Two distinct frames of one scene with the instruction and both masks.
pub fn sample_view_pair<'d>(
    dataset: &'d Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(&'d FrameSample, &'d FrameSample, &'d TextInstruction, &'d Mask, &'d Mask)> {
    let s = sample_views(dataset, &dataset.usable_scenes(2), 2, rng)?;
    let scene = &dataset.scenes[s.scene];
    let expr = &scene.expressions[s.expression];
    let (fa, ma) = &expr.masks[s.views[0]];
    let (fb, mb) = &expr.masks[s.views[1]];
    Ok((&scene.frames[*fa], &scene.frames[*fb], &expr.text, ma, mb))
}

/// Loss breakdown plus the averaged gradient of one step.
struct StepResult {
    loss: LossBreakdown,
    grads: Vec<Vec<f64>>,
}

fn sample_gradients(model: &SegmenterModel, dataset: &mut Dataset, sample: &ViewSample, cfg: &TrainConfig) -> Result<StepResult> {
    let scene = &mut dataset.scenes[sample.scene];
    let expr = scene.expressions[sample.expression].clone();
    let frames: Vec<usize> = sample.views.iter().map(|&v| expr.masks[v].0).collect();
    let n_grad = cfg.views_per_sample;

    let mut tape = Tape::new();
    let vars = model.attach(&mut tape, true);
    let mut logits: Vec<Var> = Vec::new();
    let mut seg_terms: Vec<Var> = Vec::new();
    let mut loss = LossBreakdown::default();
    for (k, &f) in frames.iter().enumerate() {
        let frame = &scene.frames[f];
        let feats = model.features(&frame.rgb, &expr.text)?;
        let dims = frame.rgb.dims();
        if k < n_grad {
            let x = tape.constant(feats);
            let p = model.forward(&mut tape, &vars, x, dims)?;
            let seg = seg_view_on_tape(&mut tape, p, &expr.masks[sample.views[k]].1)?;
            if k == 0 {
                loss.seg_a += tape.value(seg).item();
            } else {
                loss.seg_b += tape.value(seg).item();
            }
            logits.push(p);
            seg_terms.push(seg);
        } else {
            // gradient-free partner of a single-view geometric sample
            let p = model.predict_from_features(&feats, dims)?;
            logits.push(tape.constant(Tensor::from_grid(&p)));
        }
    }
    let mut total = seg_terms[0];
    for &s in &seg_terms[1..] {
        total = tape.add(total, s)?;
    }

    if cfg.geo_loss && frames.len() >= 2 {
        let mut geo_terms = Vec::new();
        let pairs: Vec<(usize, usize)> = (0..frames.len())
            .flat_map(|i| (0..frames.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && j < n_grad)
            .collect();
        for &(i, j) in &pairs {
            let field = scene.field(frames[i], frames[j], cfg.depth_check)?;
            let valid = field.valid_count();
            let term = geo_direction_on_tape(&mut tape, logits[j], logits[i], field, cfg.geo_normalization)?;
            let v = tape.value(term).item();
            if i < j {
                loss.geo_ab += v;
                loss.valid_ab += valid;
            } else {
                loss.geo_ba += v;
                loss.valid_ba += valid;
            }
            geo_terms.push(term);
        }
        let mut geo = geo_terms[0];
        for &g in &geo_terms[1..] {
            geo = tape.add(geo, g)?;
        }
        // average per unordered pair so two views give the plain two-direction sum
        let unordered = (frames.len() * (frames.len() - 1) / 2) as f64;
        let scale = if n_grad == 1 { cfg.lambda } else { cfg.lambda / unordered };
        if n_grad > 1 {
            loss.geo_ab /= unordered;
            loss.geo_ba /= unordered;
        }
        let geo = tape.scale(geo, scale)?;
        total = tape.add(total, geo)?;
    }
    loss.total = tape.value(total).item();
    if !loss.total.is_finite() {
        return Err(Error::NumericFault {
            op: format!("total loss (seg {} + geo {})", loss.seg(), loss.geo()),
        });
    }
    let g = tape.backward(total)?;
    let grads = vars
        .iter()
        .flat_map(|v| [g.wrt(v.a).data().to_vec(), g.wrt(v.b).data().to_vec()])
        .collect();
    Ok(StepResult { loss, grads })
}

/// One optimizer update from `cfg.batch_size` drawn samples.
pub fn train_step(
    model: &mut SegmenterModel,
    dataset: &mut Dataset,
    cfg: &TrainConfig,
    opt: &mut AdamWState,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let usable = dataset.usable_scenes(cfg.frames_needed());
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let mut loss = LossBreakdown::default();
    for _ in 0..cfg.batch_size {
        let sample = sample_views(dataset, &usable, cfg.frames_needed(), rng)?;
        let r = sample_gradients(model, dataset, &sample, cfg)?;
        loss.seg_a += r.loss.seg_a;
        loss.seg_b += r.loss.seg_b;
        loss.geo_ab += r.loss.geo_ab;
        loss.geo_ba += r.loss.geo_ba;
        loss.total += r.loss.total;
        loss.valid_ab += r.loss.valid_ab;
        loss.valid_ba += r.loss.valid_ba;
        match &mut acc {
            None => acc = Some(r.grads),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&r.grads) {
                    for (p, q) in x.iter_mut().zip(y) {
                        *p += q;
                    }
                }
            }
        }
    }
    let n = cfg.batch_size as f64;
    let mut grads = acc.expect("batch_size >= 1");
    if cfg.batch_size > 1 {
        for g in grads.iter_mut().flatten() {
            *g /= n;
        }
        loss.seg_a /= n;
        loss.seg_b /= n;
        loss.geo_ab /= n;
        loss.geo_ba /= n;
        loss.total /= n;
    }
    if let Some(max_norm) = cfg.grad_clip {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    let mut params = model.trainable_buffers_mut();
    adamw_update(&mut params, &grads, opt, &cfg.optimizer)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub secs: f64,
    pub param_norm: f64,
}

impl TrainLogRecord {
    pub const TSV_HEADER: &'static str = "iter\tseg_a\tseg_b\tgeo_ab\tgeo_ba\ttotal\tsecs";

    pub fn tsv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
            self.iteration, l.seg_a, l.seg_b, l.geo_ab, l.geo_ba, l.total, self.secs
        )
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub optimizer: AdamWState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &SegmenterModel, seed: u64) -> Self {
        TrainState {
            iteration: 0,
            optimizer: AdamWState::for_model(model),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn to_records(&self) -> Vec<MatrixRecord> {
        let mut out = vec![MatrixRecord::new("iteration", 1, 1, vec![self.iteration as f64])];
        out.push(MatrixRecord::new("adam.step", 1, 1, vec![self.optimizer.step as f64]));
        for (i, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            out.push(MatrixRecord::new(format!("adam.m.{i}"), 1, m.len(), m.clone()));
            out.push(MatrixRecord::new(format!("adam.v.{i}"), 1, v.len(), v.clone()));
        }
        let seed = self.rng.get_seed();
        let seed_words: Vec<f64> = seed
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push(MatrixRecord::new("rng.seed", 1, seed_words.len(), seed_words));
        let pos = self.rng.get_word_pos();
        let pos_words: Vec<f64> = (0..4).map(|k| ((pos >> (32 * k)) & 0xffff_ffff) as f64).collect();
        out.push(MatrixRecord::new("rng.word_pos", 1, 4, pos_words));
        out
    }

    fn from_records(recs: &[MatrixRecord], path: &Path) -> Result<Self> {
        let get = |name: &str| {
            recs.iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::format(path, format!("missing optimizer record {name:?}")))
        };
        let iteration = get("iteration")?.data[0] as usize;
        let step = get("adam.step")?.data[0] as u64;
        let n = recs.iter().filter(|r| r.name.starts_with("adam.m.")).count();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(get(&format!("adam.m.{i}"))?.data.clone());
            v.push(get(&format!("adam.v.{i}"))?.data.clone());
        }
        let seed_words = &get("rng.seed")?.data;
        let mut seed = [0u8; 32];
        for (chunk, &w) in seed.chunks_mut(4).zip(seed_words) {
            chunk.copy_from_slice(&(w as u32).to_le_bytes());
        }
        let pos = get("rng.word_pos")?
            .data
            .iter()
            .enumerate()
            .fold(0u128, |acc, (k, &w)| acc | ((w as u128) << (32 * k)));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(TrainState {
            iteration,
            optimizer: AdamWState { m, v, step },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &checkpoint::encode_matrices(Section::Optimizer, &self.to_records()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let recs = checkpoint::decode_matrices(Section::Optimizer, &checkpoint::read_file(path)?, path)?;
        Self::from_records(&recs, path)
    }
}

pub const ADAPTERS_FILE: &str = "adapters.gwck";
pub const OPTIMIZER_FILE: &str = "optimizer.gwck";
pub const BASE_FILE: &str = "base.gwck";
pub const LOG_FILE: &str = "train_log.tsv";

/// Where and how often a run persists itself.
#[derive(Debug, Clone, Default)]
pub struct RunOutput<'a> {
    pub dir: Option<&'a Path>,
    /// Print one progress line per this many iterations to stderr; 0 = silent.
    pub progress_every: usize,
}

fn save_run(model: &SegmenterModel, state: &TrainState, dir: &Path) -> Result<()> {
    model.save_adapters(&dir.join(ADAPTERS_FILE))?;
    state.save(&dir.join(OPTIMIZER_FILE))
}

/// Keeps freed activation buffers in the process heap. Every step allocates and
/// drops several megabytes of tape values; with glibc's default trim and mmap
/// thresholds each step faults those pages in again, which costs about as much
/// as the arithmetic on a small model.
pub fn keep_heap_resident() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        // SAFETY: mallopt only adjusts allocator tuning parameters.
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        });
    }
}

/// Runs iterations `state.iteration..cfg.iterations`, continuing from `state`.
pub fn train_loop(
    model: &mut SegmenterModel,
    dataset: &mut Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    out: &RunOutput<'_>,
) -> Result<Vec<TrainLogRecord>> {
    cfg.validate()?;
    keep_heap_resident();
    if dataset.usable_scenes(cfg.frames_needed()).is_empty() {
        return Err(Error::Data(format!(
            "no scene offers {} frames with a visible target",
            cfg.frames_needed()
        )));
    }
    let mut log = Vec::new();
    let mut log_text = String::new();
    if let Some(dir) = out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let base = dir.join(BASE_FILE);
        if state.iteration == 0 || !base.exists() {
            model.save_frozen(&base)?;
        } else {
            model.verify_frozen(&base)?;
        }
        let log_path = dir.join(LOG_FILE);
        if state.iteration > 0 && log_path.exists() {
            log_text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        } else {
            log_text = format!("{}\n", TrainLogRecord::TSV_HEADER);
        }
    }
    while state.iteration < cfg.iterations {
        let start = Instant::now();
        let loss = train_step(model, dataset, cfg, &mut state.optimizer, &mut state.rng)?;
        let secs = start.elapsed().as_secs_f64();
        state.iteration += 1;
        let record = TrainLogRecord {
            iteration: state.iteration,
            loss,
            secs,
            param_norm: model.trainable_parameters().iter().map(|p| p * p).sum::<f64>().sqrt(),
        };
        if out.progress_every > 0 && state.iteration % out.progress_every == 0 {
            eprintln!(
                "iter {:>6}  total {:.5}  seg {:.5}  geo {:.5}  {:.3}s",
                record.iteration,
                loss.total,
                loss.seg(),
                loss.geo(),
                secs
            );
        }
        if let Some(dir) = out.dir {
            let _ = writeln!(log_text, "{}", record.tsv_line());
            let periodic = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
            if periodic || state.iteration == cfg.iterations {
                save_run(model, state, dir)?;
                let log_path = dir.join(LOG_FILE);
                fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
            }
        }
        log.push(record);
    }
    if let Some(dir) = out.dir {
        if log.is_empty() {
            save_run(model, state, dir)?;
            let log_path = dir.join(LOG_FILE);
            fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    Ok(log)
}

/// Restores adapters and optimizer/rng state written by [`train_loop`].
pub fn resume(model: &mut SegmenterModel, dir: &Path) -> Result<TrainState> {
    model.verify_frozen(&dir.join(BASE_FILE))?;
    model.load_adapters(&dir.join(ADAPTERS_FILE))?;
    TrainState::load(&dir.join(OPTIMIZER_FILE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: LogitMap,
    pub mask: Mask,
    pub prompt: RgbaPrompt,
    pub cloud: PointCloud,
}

fn finish(frame: &FrameSample, logits: LogitMap) -> Result<Inference> {
    let mask = threshold_mask(&logits, DEFAULT_TAU)?;
    let prompt = make_rgba_prompt(&frame.rgb, PromptAlpha::Binary(&mask))?;
    let cloud = lift_to_pointcloud(&prompt, &frame.depth, &frame.intrinsics, &frame.extrinsics, 0.0)?;
    Ok(Inference {
        logits,
        mask,
        prompt,
        cloud,
    })
}

/// Predict, threshold at 0.5, build the prompt and lift it.
pub fn infer_single(model: &SegmenterModel, frame: &FrameSample, text: &TextInstruction) -> Result<Inference> {
    let logits = model.predict_logits(&frame.rgb, text)?;
    finish(frame, logits)
}

/// Predicts every view, warps the others into `views[0]`, fuses, thresholds and lifts.
pub fn infer_multiview(
    model: &SegmenterModel,
    views: &[&FrameSample],
    text: &TextInstruction,
    rule: FusionRule,
) -> Result<Inference> {
    let Some((reference, aux)) = views.split_first() else {
        return Err(Error::Config("multi-view inference needs at least one view".into()));
    };
    let p_ref = model.predict_logits(&reference.rgb, text)?;
    let mut warped = Vec::with_capacity(aux.len());
    for f in aux {
        let field = compute_warp_field(
            &reference.depth,
            &f.intrinsics,
            &reference.intrinsics,
            &f.extrinsics,
            &reference.extrinsics,
        )?;
        warped.push((model.predict_logits(&f.rgb, text)?, field));
    }
    let pairs: Vec<(&LogitMap, &WarpField)> = warped.iter().map(|(p, f)| (p, f)).collect();
    let fused = fuse_multiview(&p_ref, &pairs, rule)?;
    finish(reference, fused)
}
