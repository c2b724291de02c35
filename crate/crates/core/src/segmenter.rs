//! A small text-conditioned per-pixel segmenter: frozen token embeddings,
//! frozen random Fourier features of the pixel position, RGB, and a stack of
//! LoRA-adapted linear layers with sigmoid activations ending in a scalar head.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{self, LoraRecord, MatrixRecord, Section};
use crate::error::{Error, Result};
use crate::grid::{LogitMap, RgbImage};
use crate::lora::{AdapterVars, LoraAdapter, ScaleConvention};

pub const COLOR_WORDS: [&str; 6] = ["red", "green", "blue", "yellow", "cyan", "magenta"];
pub const SHAPE_WORDS: [&str; 2] = ["sphere", "box"];
pub const SPATIAL_WORDS: [&str; 3] = ["left", "right", "center"];

pub fn default_vocabulary() -> Vec<String> {
    COLOR_WORDS
        .iter()
        .chain(SHAPE_WORDS.iter())
        .chain(SPATIAL_WORDS.iter())
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub hidden_widths: Vec<usize>,
    /// Number of Fourier features (sines plus cosines); must be even.
    pub fourier_dim: usize,
    /// Standard deviation of the Fourier frequency matrix, in cycles per image half-width.
    pub fourier_scale: f64,
    pub text_dim: usize,
    pub vocabulary: Vec<String>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_scale_convention: ScaleConvention,
    pub base_seed: u64,
    pub lora_seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            hidden_widths: vec![64, 64, 64],
            fourier_dim: 32,
            fourier_scale: 1.0,
            text_dim: 16,
            vocabulary: default_vocabulary(),
            lora_rank: 16,
            lora_alpha: 32.0,
            lora_scale_convention: ScaleConvention::AlphaOverR,
            base_seed: 0,
            lora_seed: 1,
        }
    }
}

impl SegmenterConfig {
    pub fn input_dim(&self) -> usize {
        self.fourier_dim + 3 + self.text_dim
    }

    /// `(d_in, d_out)` of every linear layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut d_in = self.input_dim();
        for &w in &self.hidden_widths {
            dims.push((d_in, w));
            d_in = w;
        }
        dims.push((d_in, 1));
        dims
    }

    /// Rank used on each layer: the configured rank clamped to the layer size.
    pub fn layer_ranks(&self) -> Vec<usize> {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| self.lora_rank.min(i).min(o))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden_widths must be non-empty and positive".into()));
        }
        if self.fourier_dim == 0 || self.fourier_dim % 2 != 0 {
            return Err(Error::Config("fourier_dim must be a positive even number".into()));
        }
        if self.text_dim == 0 || self.vocabulary.is_empty() {
            return Err(Error::Config("text_dim and vocabulary must be non-empty".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        if !(self.fourier_scale > 0.0) {
            return Err(Error::Config("fourier_scale must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for w in &self.vocabulary {
            if w.is_empty() || w.contains(char::is_whitespace) || !seen.insert(w) {
                return Err(Error::Config(format!("invalid or duplicate vocabulary word {w:?}")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SegmenterConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A referring expression over the closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextInstruction {
    tokens: Vec<String>,
}

impl TextInstruction {
    pub fn parse(text: &str, vocabulary: &[String]) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(|t| t.to_lowercase()).collect();
        if tokens.is_empty() {
            return Err(Error::Config("empty text instruction".into()));
        }
        for t in &tokens {
            if !vocabulary.contains(t) {
                return Err(Error::Vocabulary {
                    token: t.clone(),
                    vocabulary: vocabulary.join(" "),
                });
            }
        }
        Ok(TextInstruction { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    adapter: LoraAdapter,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    config: SegmenterConfig,
    /// `V × text_dim`
    embeddings: Tensor,
    /// `fourier_dim/2 × 2`
    frequencies: Tensor,
    layers: Vec<Layer>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl SegmenterModel {
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.base_seed);
        let v = config.vocabulary.len();
        let embeddings = Tensor::new(&[v, config.text_dim], normal_vec(&mut rng, v * config.text_dim, 1.0))?;
        let half = config.fourier_dim / 2;
        let frequencies = Tensor::new(&[half, 2], normal_vec(&mut rng, half * 2, config.fourier_scale))?;

        let mut layers = Vec::new();
        let ranks = config.layer_ranks();
        for (i, (&(d_in, d_out), &rank)) in config.layer_dims().iter().zip(&ranks).enumerate() {
            // sigmoid slope is at most 1/4, so layers fed by a sigmoid get gain 4
            let gain = if i == 0 { 1.0 } else { 4.0 };
            let w = normal_vec(&mut rng, d_in * d_out, gain / (d_in as f64).sqrt());
            // Layers after a sigmoid see inputs centred on 0.5; re-centre them.
            let bias: Vec<f64> = if i == 0 {
                normal_vec(&mut rng, d_out, 0.1)
            } else {
                (0..d_out).map(|o| -0.5 * w[o * d_in..(o + 1) * d_in].iter().sum::<f64>()).collect()
            };
            // Keep s = alpha / r uniform when a layer's rank is clamped.
            let alpha = config.lora_alpha * rank as f64 / config.lora_rank as f64;
            let alpha = match config.lora_scale_convention {
                ScaleConvention::AlphaOverR => alpha,
                ScaleConvention::Alpha => config.lora_alpha,
            };
            let adapter = LoraAdapter::init(
                Tensor::new(&[d_out, d_in], w)?,
                rank,
                alpha,
                config.lora_scale_convention,
                config.lora_seed.wrapping_add(i as u64),
            )?;
            layers.push(Layer { adapter, bias });
        }
        Ok(SegmenterModel {
            config,
            embeddings,
            frequencies,
            layers,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.config.vocabulary
    }

    pub fn parse_text(&self, text: &str) -> Result<TextInstruction> {
        TextInstruction::parse(text, &self.config.vocabulary)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.layers.iter().map(|l| &l.adapter)
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.layers.iter_mut().map(|l| &mut l.adapter)
    }

    pub fn layer_name(i: usize) -> String {
        format!("layer{i}")
    }

    /// Mean of the frozen embedding rows of the instruction's tokens.
    pub fn embed_text(&self, text: &TextInstruction) -> Result<Vec<f64>> {
        let d = self.config.text_dim;
        let mut acc = vec![0.0; d];
        for t in text.tokens() {
            let row = self
                .config
                .vocabulary
                .iter()
                .position(|w| w == t)
                .ok_or_else(|| Error::Vocabulary {
                    token: t.clone(),
                    vocabulary: self.config.vocabulary.join(" "),
                })?;
            for (a, e) in acc.iter_mut().zip(&self.embeddings.data()[row * d..(row + 1) * d]) {
                *a += e;
            }
        }
        let n = text.tokens().len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }

    /// Per-pixel input features `[fourier(u, v), 2 rgb - 1, text]`, one row per pixel.
    pub fn features(&self, image: &RgbImage, text: &TextInstruction) -> Result<Tensor> {
        let (h, w) = image.dims();
        let emb = self.embed_text(text)?;
        let half = self.config.fourier_dim / 2;
        let d = self.config.input_dim();
        let freqs = self.frequencies.data();
        let mut out = Vec::with_capacity(h * w * d);
        let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        for r in 0..h {
            let y = norm(r, h);
            for c in 0..w {
                let x = norm(c, w);
                let angles: Vec<f64> = (0..half)
                    .map(|j| PI * (freqs[2 * j] * x + freqs[2 * j + 1] * y))
                    .collect();
                out.extend(angles.iter().map(|a| a.sin()));
                out.extend(angles.iter().map(|a| a.cos()));
                out.extend(image[(r, c)].iter().map(|v| 2.0 * v - 1.0));
                out.extend_from_slice(&emb);
            }
        }
        Tensor::new(&[h * w, d], out)
    }

    /// Records every adapter's factors on `tape`.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Vec<AdapterVars> {
        self.layers.iter().map(|l| l.adapter.attach(tape, trainable)).collect()
    }

    /// Forward pass over a feature matrix; returns an `[h, w]` logit tensor.
    pub fn forward(&self, tape: &mut Tape, vars: &[AdapterVars], features: Var, dims: (usize, usize)) -> Result<Var> {
        let mut x = features;
        let last = self.layers.len() - 1;
        for (i, (layer, v)) in self.layers.iter().zip(vars).enumerate() {
            let y = layer.adapter.forward(tape, *v, x)?;
            let bias = tape.constant(Tensor::new(&[layer.bias.len()], layer.bias.clone())?);
            let y = tape.add_bias(y, bias)?;
            x = if i == last { y } else { tape.sigmoid(y)? };
        }
        tape.reshape(x, &[dims.0, dims.1])
    }

    pub fn predict_logits(&self, image: &RgbImage, text: &TextInstruction) -> Result<LogitMap> {
        let feats = self.features(image, text)?;
        self.predict_from_features(&feats, image.dims())
    }

    pub fn predict_from_features(&self, features: &Tensor, dims: (usize, usize)) -> Result<LogitMap> {
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, false);
        let f = tape.constant(features.clone());
        let out = self.forward(&mut tape, &vars, f, dims)?;
        tape.value(out).to_grid()
    }

    /// All trainable entries (every adapter's `A` then `B`), flattened in layer order.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.adapter.a.iter().chain(l.adapter.b.iter()).copied())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        crate::lora::param_count(self.adapters())
    }

    /// Mutable access to the trainable buffers in the order of [`Self::trainable_parameters`].
    pub fn trainable_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.adapter.a, &mut l.adapter.b])
            .collect()
    }

    pub fn lora_records(&self) -> Vec<LoraRecord> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.adapter.to_record(&Self::layer_name(i)))
            .collect()
    }

    pub fn load_lora_records(&mut self, records: &[LoraRecord]) -> Result<()> {
        if records.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} adapters, model has {} layers",
                records.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, rec)) in self.layers.iter_mut().zip(records).enumerate() {
            if rec.name != Self::layer_name(i) {
                return Err(Error::Config(format!("unexpected adapter name {:?} at position {i}", rec.name)));
            }
            layer.adapter.load_record(rec)?;
        }
        Ok(())
    }

    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &checkpoint::encode_lora(&self.lora_records()))
    }

    pub fn load_adapters(&mut self, path: &Path) -> Result<()> {
        let recs = checkpoint::decode_lora(&checkpoint::read_file(path)?, path)?;
        self.load_lora_records(&recs)
    }

    /// Every frozen tensor, as stored in a `BASE` checkpoint.
    pub fn frozen_records(&self) -> Vec<MatrixRecord> {
        let mut out = vec![
            MatrixRecord::new("embeddings", self.embeddings.shape()[0], self.embeddings.shape()[1], self.embeddings.data().to_vec()),
            MatrixRecord::new("fourier", self.frequencies.shape()[0], 2, self.frequencies.data().to_vec()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let w = l.adapter.frozen_weight();
            out.push(MatrixRecord::new(format!("{}.weight", Self::layer_name(i)), w.shape()[0], w.shape()[1], w.data().to_vec()));
            out.push(MatrixRecord::new(format!("{}.bias", Self::layer_name(i)), 1, l.bias.len(), l.bias.clone()));
        }
        out
    }

    pub fn save_frozen(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &checkpoint::encode_matrices(Section::Base, &self.frozen_records()))
    }

    /// Checks a stored frozen base against this model's (seed-derived) base.
    pub fn verify_frozen(&self, path: &Path) -> Result<()> {
        let recs = checkpoint::decode_matrices(Section::Base, &checkpoint::read_file(path)?, path)?;
        if recs != self.frozen_records() {
            return Err(Error::format(path, "frozen base does not match the configured model"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SegmenterConfig {
        SegmenterConfig {
            hidden_widths: vec![8, 6],
            fourier_dim: 4,
            text_dim: 3,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..SegmenterConfig::default()
        }
    }

    fn image(h: usize, w: usize) -> RgbImage {
        let mut img = RgbImage::filled(h, w, [0.1, 0.2, 0.3]);
        img[(1, 1)] = [1.0, 0.0, 0.0];
        img
    }

    #[test]
    fn embedding_is_order_invariant_mean() {
        let m = SegmenterModel::new(SegmenterConfig::default()).unwrap();
        let red = m.embed_text(&m.parse_text("red").unwrap()).unwrap();
        let sphere = m.embed_text(&m.parse_text("sphere").unwrap()).unwrap();
        let both = m.embed_text(&m.parse_text("red sphere").unwrap()).unwrap();
        let swapped = m.embed_text(&m.parse_text("sphere red").unwrap()).unwrap();
        assert_eq!(both, swapped);
        let row = |w: &str| {
            let i = m.vocabulary().iter().position(|v| v == w).unwrap();
            m.embeddings.data()[i * 16..(i + 1) * 16].to_vec()
        };
        assert_eq!(red, row("red"));
        for i in 0..16 {
            assert!((both[i] - 0.5 * (red[i] + sphere[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_token_is_listed() {
        let m = SegmenterModel::new(SegmenterConfig::default()).unwrap();
        match m.parse_text("red chair") {
            Err(Error::Vocabulary { token, .. }) => assert_eq!(token, "chair"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(m.parse_text("   ").is_err());
    }

    #[test]
    fn fresh_model_equals_frozen_base() {
        let m = SegmenterModel::new(small_config()).unwrap();
        let text = m.parse_text("red sphere").unwrap();
        let img = image(5, 4);
        let logits = m.predict_logits(&img, &text).unwrap();
        assert_eq!(logits.dims(), (5, 4));

        // frozen-only forward: x W^T + b with sigmoids, no adapter terms at all
        let feats = m.features(&img, &text).unwrap();
        let mut tape = Tape::new();
        let mut x = tape.constant(feats);
        for (i, l) in m.layers.iter().enumerate() {
            let w = l.adapter.frozen_weight();
            let wt = tape.constant(w.clone());
            let wt = tape.transpose(wt).unwrap();
            let y = tape.matmul(x, wt).unwrap();
            let b = tape.constant(Tensor::new(&[l.bias.len()], l.bias.clone()).unwrap());
            let y = tape.add_bias(y, b).unwrap();
            x = if i + 1 == m.layers.len() { y } else { tape.sigmoid(y).unwrap() };
        }
        assert_eq!(tape.value(x).data(), logits.as_slice());
        assert_eq!(logits, m.predict_logits(&img, &text).unwrap());
    }

    #[test]
    fn text_changes_prediction() {
        let m = SegmenterModel::new(small_config()).unwrap();
        let img = image(4, 4);
        let a = m.predict_logits(&img, &m.parse_text("red").unwrap()).unwrap();
        let b = m.predict_logits(&img, &m.parse_text("blue").unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn trainable_count_matches_formula() {
        let m = SegmenterModel::new(SegmenterConfig::default()).unwrap();
        // by hand: 51->64, 64->64, 64->64 at r=16 and 64->1 at r=1
        let expected = 16 * (51 + 64) + 16 * (64 + 64) * 2 + (64 + 1);
        assert_eq!(m.trainable_count(), expected);
        assert_eq!(m.trainable_parameters().len(), expected);
    }

    #[test]
    fn frozen_perturbation_does_not_touch_trainable_view() {
        let m = SegmenterModel::new(small_config()).unwrap();
        let before = m.trainable_parameters();
        let mut other = m.clone();
        other.layers[0].bias[0] += 1.0;
        assert_eq!(other.trainable_parameters(), before);
        assert_ne!(other.frozen_records(), m.frozen_records());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = small_config();
        let text = cfg.to_toml_string();
        assert_eq!(SegmenterConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(SegmenterConfig::from_toml_str("fourier_dim = 3").is_err());
        assert!(SegmenterConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SegmenterModel::new(small_config()).unwrap();
        for buf in m.trainable_buffers_mut() {
            for (i, v) in buf.iter_mut().enumerate() {
                *v += 0.01 * i as f64;
            }
        }
        let p = dir.path().join("a.lora");
        m.save_adapters(&p).unwrap();
        let mut fresh = SegmenterModel::new(small_config()).unwrap();
        fresh.load_adapters(&p).unwrap();
        assert_eq!(fresh, m);

        let base = dir.path().join("base.ckpt");
        m.save_frozen(&base).unwrap();
        fresh.verify_frozen(&base).unwrap();
        let other = SegmenterModel::new(SegmenterConfig { base_seed: 9, ..small_config() }).unwrap();
        assert!(other.verify_frozen(&base).is_err());
    }
}
