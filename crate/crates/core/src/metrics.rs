//! Evaluation metrics: mask IoU, normalized Chamfer distance and F-score.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::prompt_lifting::PointCloud;

/// `|pred ∧ gt| / |pred ∨ gt|`; two empty masks score 1.
pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_dims(gt, "miou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Static 3-d tree with exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // node at position `mid` of a range splits it on `axes[mid]`
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axes: vec![0; points.len()],
        };
        tree.build(0, points.len());
        tree
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Euclidean distance to the nearest stored point; `None` when empty.
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(q, 0, self.points.len(), &mut best);
        Some(best.sqrt())
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.order[mid]];
        let d = (p - q).norm_squared();
        if d < *best {
            *best = d;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// O(n) nearest distance, the reference for [`KdTree`].
pub fn brute_nearest_distance(points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<f64> {
    points.iter().map(|p| (p - q).norm_squared()).min_by(f64::total_cmp).map(f64::sqrt)
}

fn nonempty(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::UndefinedMetric("point cloud is empty"));
    }
    Ok(())
}

fn directed_mean(from: &PointCloud, to: &KdTree, squared: bool) -> f64 {
    let total: f64 = from
        .points
        .iter()
        .map(|p| {
            let d = to.nearest_distance(p).expect("non-empty tree");
            if squared {
                d * d
            } else {
                d
            }
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric Chamfer distance divided by `norm_scale`, times 100.
pub fn chamfer(x: &PointCloud, y: &PointCloud, norm_scale: f64) -> Result<f64> {
    chamfer_with(x, y, norm_scale, false)
}

/// As [`chamfer`]; `squared` averages squared nearest distances instead.
pub fn chamfer_with(x: &PointCloud, y: &PointCloud, norm_scale: f64, squared: bool) -> Result<f64> {
    nonempty(x, y)?;
    if !(norm_scale > 0.0) {
        return Err(Error::UndefinedMetric("chamfer normalization scale must be positive"));
    }
    let tx = KdTree::new(&x.points);
    let ty = KdTree::new(&y.points);
    let xy = directed_mean(x, &ty, squared);
    let yx = directed_mean(y, &tx, squared);
    // sorted operands keep chamfer(x, y) == chamfer(y, x) bit for bit
    let (a, b) = if xy <= yx { (xy, yx) } else { (yx, xy) };
    Ok((a + b) / norm_scale * 100.0)
}

/// Harmonic mean of precision (x near y) and recall (y near x) at distance `d`.
pub fn fscore(x: &PointCloud, y: &PointCloud, d: f64) -> Result<f64> {
    nonempty(x, y)?;
    if !(d > 0.0) {
        return Err(Error::UndefinedMetric("f-score threshold must be positive"));
    }
    let within = |from: &PointCloud, to: &KdTree| {
        from.points.iter().filter(|p| to.nearest_distance(p).expect("non-empty") <= d).count() as f64
            / from.len() as f64
    };
    let precision = within(x, &KdTree::new(&y.points));
    let recall = within(y, &KdTree::new(&x.points));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// F-score threshold as a fraction of the GT bounding-box diagonal.
    pub fscore_ratio: f64,
    pub squared_chamfer: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            fscore_ratio: 0.01,
            squared_chamfer: false,
        }
    }
}

/// One predicted or ground-truth sample. Clouds are optional: samples
/// without geometry are scored on mIoU only.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: String,
    pub expression: String,
    pub view: String,
    pub mask: Mask,
    pub cloud: Option<PointCloud>,
}

impl Sample {
    fn key(&self) -> (String, String, String) {
        (self.scene.clone(), self.expression.clone(), self.view.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub scene: String,
    pub expression: String,
    pub view: String,
    pub miou: f64,
    pub fscore: Option<f64>,
    pub chamfer_x100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub samples: Vec<SampleMetrics>,
    pub miou: f64,
    pub fscore: Option<f64>,
    pub chamfer_x100: Option<f64>,
    /// Samples whose 3-d metrics were undefined (e.g. an empty predicted cloud).
    pub undefined_3d: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.digits$}"))
}

impl MetricReport {
    /// Table row labels: method, mIoU, F-score, CD(x100).
    pub fn table(reports: &[MetricReport]) -> String {
        let mut out = format!("{:<28} {:>8} {:>8} {:>10}\n", "method", "miou", "fscore", "cd_x100");
        for r in reports {
            let _ = writeln!(
                out,
                "{:<28} {:>8.4} {:>8} {:>10}",
                r.method,
                r.miou,
                fmt_opt(r.fscore, 4),
                fmt_opt(r.chamfer_x100, 4)
            );
        }
        out
    }

    /// Per-sample TSV: scene, expression, view, miou, fscore, cd.
    pub fn per_sample_tsv(&self) -> String {
        let mut out = String::from("scene\texpression\tview\tmiou\tfscore\tcd_x100\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.scene,
                s.expression,
                s.view,
                s.miou,
                s.fscore.map_or("NA".into(), |v| v.to_string()),
                s.chamfer_x100.map_or("NA".into(), |v| v.to_string())
            );
        }
        out
    }
}

/// Scores predictions against ground truth matched by (scene, expression, view).
/// Chamfer is normalized by the GT cloud's bounding-box diagonal.
pub fn evaluate_run(method: &str, predictions: &[Sample], ground_truth: &[Sample], cfg: &MetricConfig) -> Result<MetricReport> {
    let pred_keys: BTreeSet<_> = predictions.iter().map(Sample::key).collect();
    let gt_keys: BTreeSet<_> = ground_truth.iter().map(Sample::key).collect();
    if pred_keys.len() != predictions.len() || gt_keys.len() != ground_truth.len() {
        return Err(Error::Data("duplicate sample ids in evaluation input".into()));
    }
    let orphans: Vec<_> = pred_keys.symmetric_difference(&gt_keys).collect();
    if !orphans.is_empty() {
        let list: Vec<String> = orphans.iter().map(|(s, e, v)| format!("{s}/{e}/{v}")).collect();
        return Err(Error::Data(format!("unmatched samples: {}", list.join(", "))));
    }
    let mut samples = Vec::with_capacity(predictions.len());
    let mut undefined_3d = 0;
    for gt in ground_truth {
        let pred = predictions.iter().find(|p| p.key() == gt.key()).expect("matched key");
        let m = miou(&pred.mask, &gt.mask)?;
        let (mut fs, mut cd) = (None, None);
        if let (Some(pc), Some(gc)) = (&pred.cloud, &gt.cloud) {
            let diag = gc.bbox_diagonal();
            let scored = chamfer_with(pc, gc, diag, cfg.squared_chamfer)
                .and_then(|c| fscore(pc, gc, cfg.fscore_ratio * diag).map(|f| (f, c)));
            match scored {
                Ok((f, c)) => {
                    fs = Some(f);
                    cd = Some(c);
                }
                Err(Error::UndefinedMetric(_)) => undefined_3d += 1,
                Err(e) => return Err(e),
            }
        }
        samples.push(SampleMetrics {
            scene: gt.scene.clone(),
            expression: gt.expression.clone(),
            view: gt.view.clone(),
            miou: m,
            fscore: fs,
            chamfer_x100: cd,
        });
    }
    Ok(MetricReport {
        method: method.to_string(),
        miou: mean(samples.iter().map(|s| s.miou)).unwrap_or(f64::NAN),
        fscore: mean(samples.iter().filter_map(|s| s.fscore)),
        chamfer_x100: mean(samples.iter().filter_map(|s| s.chamfer_x100)),
        samples,
        undefined_3d,
    })
}
