//! Segmentation and cross-view consistency objectives.
//!
//! `seg = BCE(P_a, M_a) + Dice(P_a, M_a) + BCE(P_b, M_b) + Dice(P_b, M_b)`,
//! `geo = |P_b - sg(warp(P_a))| + |P_a - sg(warp(P_b))|` averaged over each
//! direction's valid pixels, and `total = seg + λ geo`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{LogitMap, Mask};
use crate::warp::WarpField;

pub const DICE_EPS: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.4;

/// How the per-direction L1 consistency term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoNormalization {
    #[default]
    MeanOverValid,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub seg_a: f64,
    pub seg_b: f64,
    pub geo_ab: f64,
    pub geo_ba: f64,
    pub total: f64,
    pub valid_ab: usize,
    pub valid_ba: usize,
}

impl LossBreakdown {
    pub fn seg(&self) -> f64 {
        self.seg_a + self.seg_b
    }

    pub fn geo(&self) -> f64 {
        self.geo_ab + self.geo_ba
    }
}

fn targets(mask: &Mask) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross-entropy of logits against a binary mask.
pub fn bce_loss(p: &LogitMap, m: &Mask) -> Result<f64> {
    p.same_dims(m, "bce_loss")?;
    let n = p.len() as f64;
    Ok(p
        .iter()
        .zip(m.iter())
        .map(|(&x, &t)| softplus(x) - if t { x } else { 0.0 })
        .sum::<f64>()
        / n)
}

pub fn dice_loss(p: &LogitMap, m: &Mask) -> Result<f64> {
    p.same_dims(m, "dice_loss")?;
    let mut inter = 0.0;
    let mut probs = 0.0;
    let mut fg = 0.0;
    for (&x, &t) in p.iter().zip(m.iter()) {
        let s = sigmoid(x);
        probs += s;
        if t {
            inter += s;
            fg += 1.0;
        }
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (probs + fg + DICE_EPS))
}

pub fn seg_loss(p_a: &LogitMap, p_b: &LogitMap, m_a: &Mask, m_b: &Mask) -> Result<f64> {
    let view_a = bce_loss(p_a, m_a)? + dice_loss(p_a, m_a)?;
    let view_b = bce_loss(p_b, m_b)? + dice_loss(p_b, m_b)?;
    Ok(view_a + view_b)
}

/// One direction of the consistency term: `|direct - warped|` over `valid`.
pub fn geo_direction(direct: &LogitMap, warped: &LogitMap, valid: &Mask, norm: GeoNormalization) -> Result<f64> {
    direct.same_dims(warped, "geo_loss")?;
    direct.same_dims(valid, "geo_loss")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&d, &w), &ok) in direct.iter().zip(warped.iter()).zip(valid.iter()) {
        if ok {
            sum += (d - w).abs();
            count += 1;
        }
    }
    Ok(match norm {
        GeoNormalization::Sum => sum,
        GeoNormalization::MeanOverValid if count == 0 => 0.0,
        GeoNormalization::MeanOverValid => sum / count as f64,
    })
}

/// Bidirectional consistency loss from the two warped predictions.
pub fn geo_loss(
    p_a: &LogitMap,
    p_b: &LogitMap,
    warp_ab: (&LogitMap, &Mask),
    warp_ba: (&LogitMap, &Mask),
    norm: GeoNormalization,
) -> Result<f64> {
    Ok(geo_direction(p_b, warp_ab.0, warp_ab.1, norm)? + geo_direction(p_a, warp_ba.0, warp_ba.1, norm)?)
}

pub fn total_loss(seg: f64, geo: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(seg + lambda * geo)
}

/// `BCE + Dice` of one view, recorded on the tape.
pub fn seg_view_on_tape(tape: &mut Tape, logits: Var, mask: &Mask) -> Result<Var> {
    let t = targets(mask);
    let bce = tape.bce_with_logits(logits, &t)?;
    let dice = tape.dice_soft(logits, &t, DICE_EPS)?;
    tape.add(bce, dice)
}

/// `|direct - sg(warp(source))|` on the tape. The warped operand sits behind a
/// stop-gradient, so only `direct` receives a gradient.
pub fn geo_direction_on_tape(
    tape: &mut Tape,
    direct: Var,
    source: Var,
    field: Arc<WarpField>,
    norm: GeoNormalization,
) -> Result<Var> {
    let valid: Vec<bool> = field.valid.as_slice().to_vec();
    let count = valid.iter().filter(|&&v| v).count();
    let warped = tape.bilinear_sample(source, field, 0.0)?;
    let warped = tape.stop_grad(warped);
    let diff = tape.sub(direct, warped)?;
    let abs = tape.abs(diff)?;
    let mean = tape.mean_over_mask(abs, &valid)?;
    match norm {
        GeoNormalization::MeanOverValid => Ok(mean),
        GeoNormalization::Sum => tape.scale(mean, count as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn sp(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    fn random_logits(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LogitMap {
        Grid::from_fn(h, w, |_, _| rng.random_range(-4.0..4.0))
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
        Grid::from_fn(h, w, |_, _| rng.random_bool(0.4))
    }

    #[test]
    fn bce_examples() {
        let m = Grid::from_fn(3, 3, |r, c| (r + c) % 2 == 0);
        assert!((bce_loss(&Grid::filled(3, 3, 0.0), &m).unwrap() - LN_2).abs() < 1e-15);
        let v = bce_loss(&Grid::filled(2, 2, 20.0), &Grid::filled(2, 2, true)).unwrap();
        assert!(v <= 1e-8 && v > 2.0e-9, "{v}");

        let p = Grid::from_vec(2, 2, vec![0.0, 1.0, -1.0, 2.0]).unwrap();
        let m = Grid::from_vec(2, 2, vec![true, true, false, false]).unwrap();
        // -log σ(1) = softplus(-1); -log(1-σ(-1)) = softplus(-1); -log(1-σ(2)) = softplus(2)
        let oracle = (LN_2 + sp(-1.0) + sp(-1.0) + sp(2.0)) / 4.0;
        assert!((bce_loss(&p, &m).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn bce_is_finite_at_extreme_logits() {
        let p = Grid::from_vec(1, 4, vec![1e6, -1e6, 800.0, -800.0]).unwrap();
        let m = Grid::from_vec(1, 4, vec![false, true, false, true]).unwrap();
        let v = bce_loss(&p, &m).unwrap();
        assert!(v.is_finite());
        assert!((v - (1e6 + 1e6 + 800.0 + 800.0) / 4.0).abs() < 1e-6);
    }

    #[test]
    fn dice_examples() {
        let all = Grid::filled(4, 4, true);
        assert!(dice_loss(&Grid::filled(4, 4, 20.0), &all).unwrap() < 1e-3);
        let n = 16.0;
        let v = dice_loss(&Grid::filled(4, 4, -40.0), &all).unwrap();
        assert!((v - (1.0 - DICE_EPS / (n + DICE_EPS))).abs() < 1e-12);
        assert_eq!(dice_loss(&Grid::filled(2, 2, -50.0), &Grid::filled(2, 2, false)).unwrap(), 0.0);
    }

    fn dice_oracle(p: &LogitMap, m: &Mask) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..p.height() {
            for c in 0..p.width() {
                let s = 1.0 / (1.0 + (-p[(r, c)]).exp());
                let t = if m[(r, c)] { 1.0 } else { 0.0 };
                num += 2.0 * s * t;
                den += s + t;
            }
        }
        1.0 - (num + 1.0) / (den + 1.0)
    }

    fn bce_oracle(p: &LogitMap, m: &Mask) -> f64 {
        let mut acc = 0.0;
        for r in 0..p.height() {
            for c in 0..p.width() {
                let s = 1.0 / (1.0 + (-p[(r, c)]).exp());
                acc -= if m[(r, c)] { s.ln() } else { (1.0 - s).ln() };
            }
        }
        acc / p.len() as f64
    }

    #[test]
    fn random_instances_match_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let (pa, pb) = (random_logits(&mut rng, 4, 4), random_logits(&mut rng, 4, 4));
            let (ma, mb) = (random_mask(&mut rng, 4, 4), random_mask(&mut rng, 4, 4));
            assert!((dice_loss(&pa, &ma).unwrap() - dice_oracle(&pa, &ma)).abs() < 1e-12);
            assert!((bce_loss(&pa, &ma).unwrap() - bce_oracle(&pa, &ma)).abs() < 1e-12);
            let seg = seg_loss(&pa, &pb, &ma, &mb).unwrap();
            let parts = bce_oracle(&pa, &ma) + dice_oracle(&pa, &ma) + bce_oracle(&pb, &mb) + dice_oracle(&pb, &mb);
            assert!((seg - parts).abs() < 1e-12);
            assert_eq!(seg, seg_loss(&pb, &pa, &mb, &ma).unwrap());
        }
    }

    #[test]
    fn saturated_predictions_have_small_seg_loss() {
        let m = Grid::from_fn(6, 6, |r, _| r < 3);
        let p = m.map(|&t| if t { 30.0 } else { -30.0 });
        assert!(seg_loss(&p, &p, &m, &m).unwrap() < 1e-2);
    }

    #[test]
    fn geo_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_logits(&mut rng, 5, 5);
        let valid = Grid::filled(5, 5, true);
        let norm = GeoNormalization::MeanOverValid;
        assert_eq!(geo_loss(&p, &p, (&p, &valid), (&p, &valid), norm).unwrap(), 0.0);

        let shifted = p.map(|v| v + 0.75);
        let v = geo_loss(&shifted, &shifted, (&p, &valid), (&p, &valid), norm).unwrap();
        assert!((v - 1.5).abs() < 1e-12);

        let none = Grid::filled(5, 5, false);
        assert_eq!(geo_loss(&shifted, &p, (&p, &none), (&p, &none), norm).unwrap(), 0.0);
        let sum = geo_direction(&shifted, &p, &valid, GeoNormalization::Sum).unwrap();
        assert!((sum - 0.75 * 25.0).abs() < 1e-12);
    }

    #[test]
    fn geo_value_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pa, pb) = (random_logits(&mut rng, 4, 6), random_logits(&mut rng, 4, 6));
        let (wa, wb) = (random_logits(&mut rng, 4, 6), random_logits(&mut rng, 4, 6));
        let (va, vb) = (random_mask(&mut rng, 4, 6), random_mask(&mut rng, 4, 6));
        let n = GeoNormalization::MeanOverValid;
        assert_eq!(
            geo_loss(&pa, &pb, (&wa, &va), (&wb, &vb), n).unwrap(),
            geo_loss(&pb, &pa, (&wb, &vb), (&wa, &va), n).unwrap()
        );
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.3, 7.0, 0.0).unwrap(), 1.3);
        assert!((total_loss(1.0, 0.5, 0.4).unwrap() - 1.2).abs() < 1e-15);
        assert!(matches!(total_loss(1.0, 1.0, -0.1), Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (s, g, l) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..2.0));
            assert!((total_loss(s, g, l).unwrap() - (s + l * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_losses_match_scalar_versions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_logits(&mut rng, 4, 4);
        let m = random_mask(&mut rng, 4, 4);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_grid(&p));
        let s = seg_view_on_tape(&mut tape, v, &m).unwrap();
        let scalar = bce_loss(&p, &m).unwrap() + dice_loss(&p, &m).unwrap();
        assert!((tape.value(s).item() - scalar).abs() < 1e-14);
    }

    #[test]
    fn geo_gradient_flows_only_through_direct_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (5, 5);
        let pa = random_logits(&mut rng, h, w);
        let pb = random_logits(&mut rng, h, w);
        let field = Arc::new(WarpField {
            src_coords: Grid::from_fn(h, w, |_, _| {
                crate::geometry::PixelCoord::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0))
            }),
            valid: Grid::from_fn(h, w, |_, _| rng.random_bool(0.7)),
            src_dims: (h, w),
        });
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_grid(&pa));
        let b = tape.leaf(Tensor::from_grid(&pb));
        let loss = geo_direction_on_tape(&mut tape, b, a, field.clone(), GeoNormalization::MeanOverValid).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(a).data().iter().all(|&v| v == 0.0));

        let warped = crate::warp::bilinear_sample(&pa, &field, 0.0).unwrap();
        let count = field.valid.count() as f64;
        for i in 0..h * w {
            let expect = if field.valid.as_slice()[i] {
                (pb.as_slice()[i] - warped.as_slice()[i]).signum() / count
            } else {
                0.0
            };
            assert_eq!(g.wrt(b).data()[i], expect);
        }
        let scalar = geo_direction(&pb, &warped, &field.valid, GeoNormalization::MeanOverValid).unwrap();
        assert!((tape.value(loss).item() - scalar).abs() < 1e-14);
    }
}
