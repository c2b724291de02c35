//! Low-rank adapters on frozen linear layers: `W' = W + s A B^T`.
//!
//! `A` is `d_out × r`, `B` is `d_in × r`. `B` starts at zero so a fresh
//! adapter reproduces the frozen layer bit for bit; `A` is drawn from
//! `N(0, 0.02²)`. The scale `s` is `alpha / r` by default, or the raw `alpha`
//! under [`ScaleConvention::Alpha`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::LoraRecord;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    #[default]
    AlphaOverR,
    Alpha,
}

impl ScaleConvention {
    pub fn scale(self, alpha: f64, rank: usize) -> f64 {
        match self {
            ScaleConvention::AlphaOverR => alpha / rank as f64,
            ScaleConvention::Alpha => alpha,
        }
    }
}

impl std::str::FromStr for ScaleConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_over_r" => Ok(ScaleConvention::AlphaOverR),
            "alpha" => Ok(ScaleConvention::Alpha),
            other => Err(Error::Config(format!(
                "unknown lora scale convention {other:?} (expected alpha_over_r or alpha)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    convention: ScaleConvention,
    frozen_w: Tensor,
    frozen_w_t: Tensor,
    /// `d_out × r`, trainable.
    pub a: Vec<f64>,
    /// `d_in × r`, trainable.
    pub b: Vec<f64>,
}

/// Tape handles of one adapter's factors during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transpose shape")
}

impl LoraAdapter {
    /// Attaches a fresh adapter of the given rank to `frozen_w` (`d_out × d_in`).
    pub fn init(frozen_w: Tensor, rank: usize, alpha: f64, convention: ScaleConvention, seed: u64) -> Result<Self> {
        let [d_out, d_in] = frozen_w.shape()[..] else {
            return Err(Error::shape("LoraAdapter::init", &[0, 0], frozen_w.shape()));
        };
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} outside [1, {}] for a {d_out}x{d_in} layer",
                d_in.min(d_out)
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let a = (0..d_out * rank).map(|_| normal.sample(&mut rng)).collect();
        Ok(LoraAdapter {
            d_in,
            d_out,
            rank,
            alpha,
            convention,
            frozen_w_t: transpose(&frozen_w),
            frozen_w,
            a,
            b: vec![0.0; d_in * rank],
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn convention(&self) -> ScaleConvention {
        self.convention
    }

    pub fn scale(&self) -> f64 {
        self.convention.scale(self.alpha, self.rank)
    }

    pub fn frozen_weight(&self) -> &Tensor {
        &self.frozen_w
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    /// Records the factors on `tape`, trainable or as constants.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        let a = Tensor::new(&[self.d_out, self.rank], self.a.clone()).expect("A shape");
        let b = Tensor::new(&[self.d_in, self.rank], self.b.clone()).expect("B shape");
        if trainable {
            AdapterVars {
                a: tape.leaf(a),
                b: tape.leaf(b),
            }
        } else {
            AdapterVars {
                a: tape.constant(a),
                b: tape.constant(b),
            }
        }
    }

    /// Applies the adapted layer to the rows of `x` (`n × d_in`):
    /// `x (W + s A B^T)^T`. Gradients reach only `A` and `B`.
    ///
    /// The low-rank update is merged into a dense `d_out × d_in` matrix on the
    /// tape first, so the per-row cost is a single product with `W'`.
    pub fn forward(&self, tape: &mut Tape, vars: AdapterVars, x: Var) -> Result<Var> {
        let width = tape.value(x).shape().get(1).copied();
        if tape.value(x).shape().len() != 2 || width != Some(self.d_in) {
            return Err(Error::shape("lora forward", &[0, self.d_in], tape.value(x).shape()));
        }
        let w_t = tape.constant(self.frozen_w_t.clone());
        let a_t = tape.transpose(vars.a)?;
        let ba = tape.matmul(vars.b, a_t)?;
        let ba = tape.scale(ba, self.scale())?;
        let merged_t = tape.add(w_t, ba)?;
        tape.matmul(x, merged_t)
    }

    /// Dense `W + s A B^T`.
    pub fn merge(&self) -> Tensor {
        let s = self.scale();
        let mut out = self.frozen_w.data().to_vec();
        for i in 0..self.d_out {
            for j in 0..self.d_in {
                let mut acc = 0.0;
                for k in 0..self.rank {
                    acc += self.a[i * self.rank + k] * self.b[j * self.rank + k];
                }
                out[i * self.d_in + j] += s * acc;
            }
        }
        Tensor::new(&[self.d_out, self.d_in], out).expect("merge shape")
    }

    pub fn to_record(&self, name: &str) -> LoraRecord {
        LoraRecord {
            name: name.to_string(),
            d_in: self.d_in,
            d_out: self.d_out,
            rank: self.rank,
            alpha: self.alpha,
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    /// Replaces the factors with a stored record after checking it fits this layer.
    pub fn load_record(&mut self, rec: &LoraRecord) -> Result<()> {
        if (rec.d_in, rec.d_out, rec.rank) != (self.d_in, self.d_out, self.rank) {
            return Err(Error::Config(format!(
                "adapter {:?} is {}x{} rank {} but the layer is {}x{} rank {}",
                rec.name, rec.d_out, rec.d_in, rec.rank, self.d_out, self.d_in, self.rank
            )));
        }
        self.alpha = rec.alpha;
        self.a = rec.a.clone();
        self.b = rec.b.clone();
        Ok(())
    }
}

/// `Σ r (d_in + d_out)` over all adapters.
pub fn param_count<'a>(adapters: impl IntoIterator<Item = &'a LoraAdapter>) -> usize {
    adapters.into_iter().map(LoraAdapter::param_count).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run_forward(ad: &LoraAdapter, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let vars = ad.attach(&mut tape, true);
        let xv = tape.constant(x.clone());
        let y = ad.forward(&mut tape, vars, xv).unwrap();
        tape.value(y).clone()
    }

    fn dense_forward(w: &Tensor, x: &Tensor) -> Vec<f64> {
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        let n = x.shape()[0];
        let mut out = vec![0.0; n * d_out];
        for r in 0..n {
            for o in 0..d_out {
                out[r * d_out + o] = (0..d_in).map(|i| w.data()[o * d_in + i] * x.data()[r * d_in + i]).sum();
            }
        }
        out
    }

    #[test]
    fn fresh_adapter_is_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random_tensor(&mut rng, &[5, 7]);
        let ad = LoraAdapter::init(w.clone(), 3, 32.0, ScaleConvention::AlphaOverR, 1).unwrap();
        let x = random_tensor(&mut rng, &[4, 7]);
        let y = run_forward(&ad, &x);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wt = tape.constant(transpose(&w));
        let base = tape.matmul(xv, wt).unwrap();
        assert_eq!(y.data(), tape.value(base).data());
        assert_eq!(ad.merge(), w);
    }

    #[test]
    fn rank_bounds() {
        let w = Tensor::zeros(&[4, 6]);
        assert!(LoraAdapter::init(w.clone(), 4, 1.0, ScaleConvention::AlphaOverR, 0).is_ok());
        assert!(matches!(
            LoraAdapter::init(w.clone(), 5, 1.0, ScaleConvention::AlphaOverR, 0),
            Err(Error::Config(_))
        ));
        assert!(LoraAdapter::init(w, 0, 1.0, ScaleConvention::AlphaOverR, 0).is_err());
    }

    #[test]
    fn equal_seeds_are_bit_identical() {
        let w = Tensor::zeros(&[8, 8]);
        let a = LoraAdapter::init(w.clone(), 4, 8.0, ScaleConvention::AlphaOverR, 42).unwrap();
        let b = LoraAdapter::init(w.clone(), 4, 8.0, ScaleConvention::AlphaOverR, 42).unwrap();
        let c = LoraAdapter::init(w, 4, 8.0, ScaleConvention::AlphaOverR, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.a, c.a);
        let sd = (a.a.iter().map(|v| v * v).sum::<f64>() / a.a.len() as f64).sqrt();
        assert!(sd > 0.005 && sd < 0.05, "{sd}");
    }

    #[test]
    fn identity_factors_double_input() {
        let d = 3;
        let mut ad = LoraAdapter::init(Tensor::zeros(&[d, d]), d, 2.0 * d as f64, ScaleConvention::AlphaOverR, 0).unwrap();
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        ad.a = eye.clone();
        ad.b = eye;
        assert_eq!(ad.scale(), 2.0);
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap();
        let y = run_forward(&ad, &x);
        let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn raw_alpha_convention() {
        let ad = LoraAdapter::init(Tensor::zeros(&[4, 4]), 2, 32.0, ScaleConvention::Alpha, 0).unwrap();
        assert_eq!(ad.scale(), 32.0);
        assert_eq!("alpha".parse::<ScaleConvention>().unwrap(), ScaleConvention::Alpha);
        assert!("nope".parse::<ScaleConvention>().is_err());
    }

    #[test]
    fn factored_matches_merged_and_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (d_in, d_out) = (rng.random_range(2..9), rng.random_range(2..9));
            let r = rng.random_range(1..=d_in.min(d_out));
            let w = random_tensor(&mut rng, &[d_out, d_in]);
            let mut ad = LoraAdapter::init(w.clone(), r, 16.0, ScaleConvention::AlphaOverR, 5).unwrap();
            ad.b = (0..d_in * r).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = random_tensor(&mut rng, &[6, d_in]);
            let factored = run_forward(&ad, &x);

            // oracle: explicit W + s A B^T built entry by entry
            let s = 16.0 / r as f64;
            let dense: Vec<f64> = (0..d_out * d_in)
                .map(|idx| {
                    let (o, i) = (idx / d_in, idx % d_in);
                    w.data()[idx] + s * (0..r).map(|k| ad.a[o * r + k] * ad.b[i * r + k]).sum::<f64>()
                })
                .collect();
            let dense = Tensor::new(&[d_out, d_in], dense).unwrap();
            let via_oracle = dense_forward(&dense, &x);
            let via_merge = dense_forward(&ad.merge(), &x);
            for ((f, o), m) in factored.data().iter().zip(&via_oracle).zip(&via_merge) {
                assert!((f - o).abs() < 1e-12);
                assert!((f - m).abs() < 1e-12);
            }
            assert_eq!(ad.merge(), ad.merge());
        }
    }

    #[test]
    fn param_count_formula() {
        let ad = LoraAdapter::init(Tensor::zeros(&[32, 32]), 4, 8.0, ScaleConvention::AlphaOverR, 0).unwrap();
        assert_eq!(param_count([&ad]), 256);
        assert_eq!(param_count(std::iter::empty::<&LoraAdapter>()), 0);
    }

    #[test]
    fn gradients_reach_only_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_tensor(&mut rng, &[3, 4]);
        let mut ad = LoraAdapter::init(w, 2, 4.0, ScaleConvention::AlphaOverR, 1).unwrap();
        ad.b = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let vars = ad.attach(&mut tape, true);
        let x = tape.constant(random_tensor(&mut rng, &[5, 4]));
        let y = ad.forward(&mut tape, vars, x).unwrap();
        let y = tape.sigmoid(y).unwrap();
        let root = tape.sum(y).unwrap();
        let g = tape.backward(root).unwrap();
        assert!(g.wrt(vars.a).data().iter().any(|v| *v != 0.0));
        assert!(g.wrt(vars.b).data().iter().any(|v| *v != 0.0));
        assert!(!g.reached(x));
    }
}
