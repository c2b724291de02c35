//! Command-line front end. `run` parses arguments and returns the process exit
//! code: 0 success, 1 usage or configuration error, 2 data error, 3 numeric fault.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::benchmark::{build_scenes, evaluate_all_frames, run_grid, BenchmarkConfig, Method, Split};
use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::ingest::{list_scenes, load_scene, write_mask, write_rgb, write_scene, FrameSample, IngestConfig, SceneManifest};
use crate::metrics::MetricReport;
use crate::prompt_lifting::{lift_to_pointcloud, make_rgba_prompt, FusionRule, PromptAlpha};
use crate::segmenter::SegmenterModel;
use crate::synthscene::{cross_view_oracle, scene_from_toml, scene_to_toml, SceneGenConfig};
use crate::trainer::{infer_multiview, resume, train_loop, Dataset, RunOutput, TrainConfig, TrainState};
use crate::warp::{bilinear_sample, compute_warp_field_with, DepthCheck};

/// Name of the effective configuration written next to a run's checkpoints.
pub const RUN_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "geowarp", version, about = "Multi-view consistent text-conditioned segmentation toolkit")]
struct Cli {
    /// Worker threads for parallel rendering, loading and warping.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render random synthetic scenes in the ingest layout.
    Synth(SynthArgs),
    /// Train LoRA adapters on a scene set.
    Train(TrainArgs),
    /// Score adapters on every annotated frame.
    Eval(EvalArgs),
    /// Write warp diagnostics for one frame pair.
    WarpCheck(WarpCheckArgs),
    /// Export the RGBA prompt and lifted cloud for one instruction.
    ExportPrompt(ExportArgs),
    /// Run the view-count / geometric-loss grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene generator settings (TOML); defaults to the benchmark's.
    #[arg(long)]
    scene_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (TOML with optional [train] and [ingest] tables).
    #[arg(long, env = "GEOWARP_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    views: Option<u8>,
    #[arg(long)]
    no_geo_loss: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Comma-separated frame ids to train on; all frames when absent.
    #[arg(long, value_delimiter = ',')]
    train_frames: Option<Vec<String>>,
    /// Continue from the checkpoints already in --out.
    #[arg(long)]
    resume: bool,
    /// Progress line every N iterations (0 = quiet).
    #[arg(long, default_value_t = 50)]
    progress: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    adapters: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Fuse each reference frame with the scene's other frames.
    #[arg(long)]
    multiview: bool,
    /// Views used with --multiview, reference included; all frames when absent.
    #[arg(long)]
    views: Option<usize>,
    /// Method label in the report.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Debug, Args)]
struct WarpCheckArgs {
    /// A scene directory, or a root with --scene.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: Option<String>,
    /// Source and target frame ids: values of A are pulled into B.
    #[arg(long, value_delimiter = ',', required = true)]
    pair: Vec<String>,
    #[arg(long)]
    depth_check: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    adapters: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    frame: String,
    #[arg(long)]
    text: String,
    /// Extra frames fused into the reference.
    #[arg(long, value_delimiter = ',')]
    aux: Vec<String>,
    /// Soft alpha σ(P) instead of the thresholded mask.
    #[arg(long)]
    soft: bool,
    /// Soft-mode lifting keeps pixels with alpha above this.
    #[arg(long, default_value_t = 0.0)]
    alpha_cut: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Scene root; the synthetic benchmark from the grid's [bench] table when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("size must be positive, got {s:?}"));
    }
    Ok((h, w))
}

/// The run configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub ingest: IngestConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// The ablation grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub seeds: Vec<u64>,
    /// Frame scored at evaluation; the last frame id when absent.
    pub held_out: Option<String>,
    #[serde(rename = "row")]
    pub rows: Vec<Method>,
    pub train: TrainConfig,
    pub ingest: IngestConfig,
    pub bench: BenchmarkConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            seeds: vec![0, 1, 2, 3, 4],
            held_out: None,
            rows: Method::GRID.to_vec(),
            train: crate::benchmark::default_train_config(),
            ingest: IngestConfig::default(),
            bench: BenchmarkConfig::default(),
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 1;
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::WarpCheck(a) => warp_check(a),
        Command::ExportPrompt(a) => export_prompt(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.scenes == 0 || a.views == 0 {
        return Err(Error::Config("--scenes and --views must be positive".into()));
    }
    let mut gen = match &a.scene_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SceneGenConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => BenchmarkConfig::default().scene,
    };
    gen.rig.height = a.size.0;
    gen.rig.width = a.size.1;
    create_dir(&a.out)?;
    for (spec, manifest, frames) in build_scenes(&gen, a.scenes, a.views, a.seed)? {
        let dir = a.out.join(format!("scene_{}", manifest.scene_id));
        write_scene(&dir, &frames, &manifest.expressions)?;
        write_text(&dir.join("scene.toml"), &scene_to_toml(&spec))?;
        eprintln!("wrote {} ({} frames, {} expressions)", dir.display(), frames.len(), manifest.expressions.len());
    }
    Ok(())
}

/// Loads one scene directory or every `scene_*` directory under a root.
pub fn load_data(dir: &Path, cfg: &IngestConfig) -> Result<Vec<(SceneManifest, Vec<FrameSample>)>> {
    if dir.join("frames").is_dir() {
        return Ok(vec![load_scene(dir, cfg)?]);
    }
    list_scenes(dir)?.iter().map(|d| load_scene(d, cfg)).collect()
}

fn load_one_scene(dir: &Path, scene: Option<&str>, cfg: &IngestConfig) -> Result<(PathBuf, SceneManifest, Vec<FrameSample>)> {
    let dir = match scene {
        Some(id) => dir.join(format!("scene_{id}")),
        None => dir.to_path_buf(),
    };
    if !dir.join("frames").is_dir() {
        return Err(Error::Data(format!("{} is not a scene directory (use --scene with a root)", dir.display())));
    }
    let (m, f) = load_scene(&dir, cfg)?;
    Ok((dir, m, f))
}

fn train(a: TrainArgs) -> Result<()> {
    let run_cfg = RunConfig::load(a.config.config.as_deref())?;
    let mut cfg = run_cfg.train.clone();
    if let Some(v) = a.views {
        cfg.views_per_sample = v as usize;
    }
    if a.no_geo_loss {
        cfg.geo_loss = false;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;

    let data = load_data(&a.data, &run_cfg.ingest)?;
    let mut model = SegmenterModel::new(cfg.model.clone())?;
    let mut dataset = Dataset::new(data, model.vocabulary(), a.train_frames.as_deref())?;
    create_dir(&a.out)?;
    let mut state = if a.resume {
        resume(&mut model, &a.out)?
    } else {
        TrainState::new(&model, cfg.seed)
    };
    let saved = RunConfig {
        train: cfg.clone(),
        ingest: run_cfg.ingest,
    };
    write_text(&a.out.join(RUN_CONFIG_FILE), &toml::to_string(&saved).expect("run config serializes"))?;
    eprintln!(
        "training {} views per sample, geometric loss {}, {} iterations from {}",
        cfg.views_per_sample,
        if cfg.geo_loss { "on" } else { "off" },
        cfg.iterations,
        state.iteration
    );
    let out = RunOutput {
        dir: Some(&a.out),
        progress_every: a.progress,
    };
    train_loop(&mut model, &mut dataset, &cfg, &mut state, &out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// Model for `adapters`: config from the flag, else the run's saved config, else defaults.
fn load_model(adapters: &Path, config: Option<&Path>) -> Result<(SegmenterModel, RunConfig)> {
    let sibling = adapters.parent().map(|p| p.join(RUN_CONFIG_FILE));
    let path = config.map(Path::to_path_buf).or(sibling.filter(|p| p.is_file()));
    let run_cfg = RunConfig::load(path.as_deref())?;
    let mut model = SegmenterModel::new(run_cfg.train.model.clone())?;
    model.load_adapters(adapters)?;
    Ok((model, run_cfg))
}

fn samples_path(report: &Path) -> PathBuf {
    let mut name = report.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".samples.tsv");
    report.with_file_name(name)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, run_cfg) = load_model(&a.adapters, a.config.config.as_deref())?;
    let data = load_data(&a.data, &run_cfg.ingest)?;
    let views = if a.multiview { a.views.unwrap_or(usize::MAX) } else { 1 };
    if views == 0 {
        return Err(Error::Config("--views must be positive".into()));
    }
    let method = a.method.unwrap_or_else(|| if a.multiview { "multi-view".into() } else { "single-view".into() });
    let report = evaluate_all_frames(&model, &data, views, &method)?;
    if report.samples.is_empty() {
        return Err(Error::Data("no annotated frames to evaluate".into()));
    }
    if let Some(dir) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(&a.report, &MetricReport::table(std::slice::from_ref(&report)))?;
    write_text(&samples_path(&a.report), &report.per_sample_tsv())?;
    eprint!("{}", MetricReport::table(std::slice::from_ref(&report)));
    if report.undefined_3d > 0 {
        eprintln!("{} samples had undefined 3-d metrics", report.undefined_3d);
    }
    Ok(())
}

/// Percentiles by nearest rank of sorted `v`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn overlay(base: &RgbImage, warped: &Grid<bool>, gt: Option<&Grid<bool>>) -> RgbImage {
    let (h, w) = base.dims();
    let mut out = base.clone();
    for r in 0..h {
        for c in 0..w {
            let px = &mut out.pixels_mut()[r * w + c];
            if warped[(r, c)] {
                px[0] = 0.5 * px[0] + 0.5;
            }
            if gt.is_some_and(|g| g[(r, c)]) {
                px[1] = 0.5 * px[1] + 0.5;
            }
        }
    }
    out
}

fn warp_check(a: WarpCheckArgs) -> Result<()> {
    let [src, dst] = &a.pair[..] else {
        return Err(Error::Config("--pair needs exactly two frame ids, as A,B".into()));
    };
    let (dir, manifest, frames) = load_one_scene(&a.data, a.scene.as_deref(), &IngestConfig::default())?;
    let find = |id: &str| {
        frames
            .iter()
            .find(|f| f.frame_id == id)
            .ok_or_else(|| Error::Data(format!("frame {id} not in {}", dir.display())))
    };
    let (fa, fb) = (find(src)?, find(dst)?);
    let check = a.depth_check.then(|| DepthCheck::new(&fa.depth));
    let field = compute_warp_field_with(&fb.depth, &fa.intrinsics, &fb.intrinsics, &fa.extrinsics, &fb.extrinsics, check)?;
    create_dir(&a.out)?;
    write_mask(&a.out.join("valid.png"), &field.valid)?;
    for expr in &manifest.expressions {
        let Some(mask_a) = expr.masks.get(src) else {
            continue;
        };
        let soft = mask_a.map(|&m| if m { 1.0 } else { 0.0 });
        let warped = bilinear_sample(&soft, &field, 0.0)?.map(|&p| p >= 0.5);
        let img = overlay(&fb.rgb, &warped, expr.masks.get(dst));
        write_rgb(&a.out.join(format!("overlay_{}.png", expr.id)), &img)?;
    }

    let mut stats = format!("pair\t{src}->{dst}\nvalid_pixels\t{}\n", field.valid_count());
    let spec_path = dir.join("scene.toml");
    if spec_path.is_file() {
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec = scene_from_toml(&text)?;
        let oracle = cross_view_oracle(&spec, (&fa.intrinsics, &fa.extrinsics), (&fb.intrinsics, &fb.extrinsics));
        let co = oracle.co_visible();
        let mut errors: Vec<f64> = Vec::new();
        let (h, w) = field.dims();
        for r in 0..h {
            for c in 0..w {
                if !(co[(r, c)] && field.valid[(r, c)]) {
                    continue;
                }
                let (Some(o), p) = (oracle.coords[(r, c)], field.src_coords[(r, c)]) else {
                    continue;
                };
                errors.push(((o.u - p.u).powi(2) + (o.v - p.v).powi(2)).sqrt());
            }
        }
        errors.sort_by(f64::total_cmp);
        let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
        let _ = writeln!(stats, "compared_pixels\t{}", errors.len());
        let _ = writeln!(stats, "max_px\t{:.6}", errors.last().copied().unwrap_or(0.0));
        let _ = writeln!(stats, "mean_px\t{mean:.6}");
        for q in [50.0, 90.0, 95.0, 99.0, 100.0] {
            let _ = writeln!(stats, "p{q:.0}_px\t{:.6}", percentile(&errors, q));
        }
    } else {
        stats.push_str("oracle\tunavailable (no scene.toml)\n");
    }
    write_text(&a.out.join("stats.tsv"), &stats)?;
    eprint!("{stats}");
    Ok(())
}

fn export_prompt(a: ExportArgs) -> Result<()> {
    let (model, run_cfg) = load_model(&a.adapters, a.config.config.as_deref())?;
    let (dir, _, frames) = load_one_scene(&a.data, a.scene.as_deref(), &run_cfg.ingest)?;
    let find = |id: &str| {
        frames
            .iter()
            .find(|f| f.frame_id == id)
            .ok_or_else(|| Error::Data(format!("frame {id} not in {}", dir.display())))
    };
    let mut views = vec![find(&a.frame)?];
    for id in &a.aux {
        views.push(find(id)?);
    }
    let text = model.parse_text(&a.text)?;
    let inference = infer_multiview(&model, &views, &text, FusionRule::Mean)?;
    let reference = views[0];
    let (prompt, cut) = if a.soft {
        (make_rgba_prompt(&reference.rgb, PromptAlpha::Soft(&inference.logits))?, a.alpha_cut)
    } else {
        (inference.prompt.clone(), 0.0)
    };
    let cloud = lift_to_pointcloud(&prompt, &reference.depth, &reference.intrinsics, &reference.extrinsics, cut)?;
    create_dir(&a.out)?;
    prompt.write_png(&a.out.join("prompt.png"))?;
    write_mask(&a.out.join("mask.png"), &inference.mask)?;
    cloud.write_xyz(&a.out.join("cloud.xyz"))?;
    eprintln!("{} foreground pixels, {} points", inference.mask.count(), cloud.len());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.grid).map_err(|e| Error::io(&a.grid, e))?;
    let grid: GridConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.grid.display())))?;
    if grid.rows.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Config("grid needs at least one row and one seed".into()));
    }
    grid.train.validate()?;
    let data = match &a.data {
        Some(dir) => load_data(dir, &grid.ingest)?,
        None => {
            let b = &grid.bench;
            if b.train_views == 0 {
                return Err(Error::Config("bench.train_views must be positive".into()));
            }
            build_scenes(&b.scene, b.scenes, b.train_views + 1, b.seed)?
                .into_iter()
                .map(|(_, m, f)| (m, f))
                .collect()
        }
    };
    let ids = data.first().map(|(m, _)| m.frame_ids.clone()).unwrap_or_default();
    let split = Split::from_frame_ids(&ids, grid.held_out.as_deref())?;
    eprintln!("training on frames {}, scoring frame {}", split.train.join(","), split.held_out);
    create_dir(&a.out)?;
    let rows_dir = a.out.join("rows");
    create_dir(&rows_dir)?;
    let mut results = String::from("method\tseed\tstatus\tmiou\tfscore\tcd_x100\tsecs_per_it\n");
    let mut write_err = None;
    let summary = run_grid(&data, &split, &grid.train, &grid.rows, &grid.seeds, |m, seed, r| match r {
        Ok(r) => {
            eprintln!("{:<16} seed {seed}: miou {:.4}  {:.4}s/it", m.name(), r.report.miou, r.secs_per_iter);
            let _ = writeln!(
                results,
                "{}\t{seed}\tok\t{}\t{}\t{}\t{}",
                m.name(),
                r.report.miou,
                r.report.fscore.map_or("NA".into(), |v| v.to_string()),
                r.report.chamfer_x100.map_or("NA".into(), |v| v.to_string()),
                r.secs_per_iter
            );
            let name = format!("{}v_{}_seed{seed}.tsv", m.views, if m.geo_loss { "geo" } else { "nogeo" });
            if let Err(e) = write_text(&rows_dir.join(name), &r.report.per_sample_tsv()) {
                write_err.get_or_insert(e);
            }
        }
        Err(e) => {
            eprintln!("{:<16} seed {seed}: failed: {e}", m.name());
            let _ = writeln!(results, "{}\t{seed}\tfailed: {e}\tNA\tNA\tNA\tNA", m.name());
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    write_text(&a.out.join("results.tsv"), &results)?;
    write_text(&a.out.join("summary.txt"), &summary.table())?;
    eprint!("{}", summary.table());
    if summary.results.is_empty() {
        return Err(Error::Data("every grid row failed".into()));
    }
    Ok(())
}
