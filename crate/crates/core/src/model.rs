//! Toy decoder-only transformer, visual projector and byte embedder.
//!
//! Weights are a pure function of [`ModelConfig`]. One splitmix64 stream
//! seeded with `config.seed` is consumed in this order, each matrix
//! row-major:
//!
//! 1. byte embedding `E` (256 × d)
//! 2. projector `Wp` (d_p × d)
//! 3. for each layer: `Wq`, `Wk`, `Wv`, `Wo` (d × d), `W1` (d × d_ff), `W2` (d_ff × d)
//!
//! A draw becomes a float as `(2u - 1)·a` with `u` the top 24 bits mapped to
//! `[0, 1)` and `a = sqrt(6 / (rows + cols))`. `Wq`, `Wk`, `Wv`, `Wo` and `Wp`
//! are identity (zero-padded for `Wp`) plus `init_epsilon` times the draw,
//! `W2` is `init_epsilon` times the draw, `E` and `W1` are the raw draw.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    causal_attention, gelu, layer_norm_rows, matmul, Matrix, Scalar,
};
use crate::rng::{fnv1a64, Gaussian, SplitMix64};
use crate::tensor_io::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Frames per segment; 16 matches the default frame count of common video LLMs.
    pub frames_per_segment: usize,
    pub patches_per_frame: usize,
    pub patch_dim: usize,
    pub init_epsilon: f64,
    pub ln_eps: f64,
    /// L2 norm of every positional encoding row. The textbook sinusoid has
    /// norm `sqrt(d/2)`, which swamps unit-scale patch features; 1.0 keeps
    /// content and position on the same scale.
    pub position_norm: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 8,
            d_ff: 256,
            frames_per_segment: 16,
            patches_per_frame: 16,
            patch_dim: 32,
            init_epsilon: 0.05,
            ln_eps: 1e-5,
            position_norm: 1.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_ff", self.d_ff),
            ("frames_per_segment", self.frames_per_segment),
            ("patches_per_frame", self.patches_per_frame),
            ("patch_dim", self.patch_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if !(self.init_epsilon.is_finite() && self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return Err(Error::Config("init_epsilon and ln_eps must be finite, ln_eps > 0".into()));
        }
        if !(self.position_norm.is_finite() && self.position_norm >= 0.0) {
            return Err(Error::Config(format!(
                "position_norm = {} must be finite and non-negative",
                self.position_norm
            )));
        }
        Ok(())
    }

    /// Factor applied to the unit-amplitude sinusoid so that rows have
    /// norm `position_norm` (exact for even `d`).
    pub fn position_scale(&self) -> f64 {
        self.position_norm * (2.0 / self.d as f64).sqrt()
    }

    /// Visual tokens contributed by one segment.
    pub fn tokens_per_segment(&self) -> usize {
        self.frames_per_segment * self.patches_per_frame
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub config: ModelConfig,
    pub embedding: Matrix<T>,
    pub projector: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
}

enum Init {
    Raw,
    Scaled,
    IdentityPlusScaled,
}

fn draw_matrix<T: Scalar>(
    rng: &mut SplitMix64,
    rows: usize,
    cols: usize,
    init: Init,
    epsilon: f64,
) -> Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let x = (2.0 * rng.next_unit24() - 1.0) * a;
            let v = match init {
                Init::Raw => x,
                Init::Scaled => epsilon * x,
                Init::IdentityPlusScaled => (if r == c { 1.0 } else { 0.0 }) + epsilon * x,
            };
            m[(r, c)] = T::narrow(v);
        }
    }
    m
}

pub fn init_weights<T: Scalar>(config: &ModelConfig) -> Result<Weights<T>> {
    config.validate()?;
    let eps = config.init_epsilon;
    let (d, d_ff) = (config.d, config.d_ff);
    let mut rng = SplitMix64::new(config.seed);
    let embedding = draw_matrix(&mut rng, 256, d, Init::Raw, eps);
    let projector = draw_matrix(&mut rng, config.patch_dim, d, Init::IdentityPlusScaled, eps);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: draw_matrix(&mut rng, d, d, Init::IdentityPlusScaled, eps),
            wk: draw_matrix(&mut rng, d, d, Init::IdentityPlusScaled, eps),
            wv: draw_matrix(&mut rng, d, d, Init::IdentityPlusScaled, eps),
            wo: draw_matrix(&mut rng, d, d, Init::IdentityPlusScaled, eps),
            w1: draw_matrix(&mut rng, d, d_ff, Init::Raw, eps),
            w2: draw_matrix(&mut rng, d_ff, d, Init::Scaled, eps),
        })
        .collect();
    Ok(Weights {
        config: config.clone(),
        embedding,
        projector,
        layers,
    })
}

/// Sinusoidal encoding of one position: `pe[2i] = sin(p·ω_i)`,
/// `pe[2i+1] = cos(p·ω_i)` with `ω_i = 10000^(-2i/d)`.
pub fn positional_encoding(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = j / 2;
            let omega = 10000f64.powf(-((2 * i) as f64) / d as f64);
            let angle = position as f64 * omega;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Adds `scale` times the encodings of positions `start, start+1, ...` to
/// successive rows.
pub fn add_positions<T: Scalar>(m: &mut Matrix<T>, start: usize, scale: f64) {
    let d = m.cols();
    for i in 0..m.rows() {
        let pe = positional_encoding(start + i, d);
        for (x, p) in m.row_mut(i).iter_mut().zip(pe) {
            *x = T::narrow(x.widen() + scale * p);
        }
    }
}

/// One row per ASCII byte, positions starting at `start`.
pub fn embed_bytes_at<T: Scalar>(text: &str, start: usize, weights: &Weights<T>) -> Result<Matrix<T>> {
    if text.is_empty() {
        return Err(Error::Input("cannot embed empty text".into()));
    }
    if let Some((i, b)) = text.bytes().enumerate().find(|(_, b)| !b.is_ascii()) {
        return Err(Error::Input(format!("non-ASCII byte 0x{b:02x} at offset {i}")));
    }
    let idx: Vec<usize> = text.bytes().map(usize::from).collect();
    let mut m = weights.embedding.select_rows(&idx);
    add_positions(&mut m, start, weights.config.position_scale());
    Ok(m)
}

pub fn embed_bytes<T: Scalar>(text: &str, weights: &Weights<T>) -> Result<Matrix<T>> {
    embed_bytes_at(text, 0, weights)
}

/// `patches × Wp`. Positions are added by the caller.
pub fn project_visual<T: Scalar>(patches: &Matrix<T>, weights: &Weights<T>) -> Result<Matrix<T>> {
    if patches.cols() != weights.config.patch_dim {
        return Err(Error::Shape {
            op: "project_visual",
            left: patches.shape(),
            right: weights.projector.shape(),
        });
    }
    matmul(patches, &weights.projector)
}

#[derive(Debug, Clone)]
pub struct LayerOutput<T> {
    pub hidden: Matrix<T>,
    pub last_row_weights: Vec<f64>,
}

/// One pre-norm block:
/// `h1 = x + Attn(LN(x)Wq, LN(x)Wk, LN(x)Wv)·Wo`, `out = h1 + GELU(LN(h1)W1)·W2`.
pub fn forward_layer<T: Scalar>(
    hidden: &Matrix<T>,
    layer_index: usize,
    weights: &Weights<T>,
) -> Result<LayerOutput<T>> {
    let cfg = &weights.config;
    let lw = weights.layers.get(layer_index).ok_or_else(|| {
        Error::Usage(format!(
            "layer {layer_index} out of range for {} layers",
            cfg.layers
        ))
    })?;
    if hidden.cols() != cfg.d {
        return Err(Error::Shape {
            op: "forward_layer",
            left: hidden.shape(),
            right: lw.wq.shape(),
        });
    }
    let x = layer_norm_rows(hidden, cfg.ln_eps);
    let q = matmul(&x, &lw.wq)?;
    let k = matmul(&x, &lw.wk)?;
    let v = matmul(&x, &lw.wv)?;
    let attn = causal_attention(&q, &k, &v, cfg.heads)?;
    let h1 = hidden.add(&matmul(&attn.out, &lw.wo)?)?;

    let x2 = layer_norm_rows(&h1, cfg.ln_eps);
    let inner = matmul(&x2, &lw.w1)?.map(|v| T::narrow(gelu(v.widen())));
    let out = h1.add(&matmul(&inner, &lw.w2)?)?;
    debug_assert!(out.is_finite());
    Ok(LayerOutput {
        hidden: out,
        last_row_weights: attn.last_row_weights,
    })
}

/// Unit-norm anchor vector of a class in patch space.
///
/// Gaussian draws seeded with `config.seed ^ fnv1a64(lowercase name)`,
/// normalized.
pub fn class_prototype(class_name: &str, config: &ModelConfig) -> Result<Vec<f32>> {
    if class_name.trim().is_empty() {
        return Err(Error::Input("class name is empty".into()));
    }
    let key = fnv1a64(class_name.to_lowercase().as_bytes());
    let mut g = Gaussian::new(config.seed ^ key);
    let raw: Vec<f64> = (0..config.patch_dim).map(|_| g.next()).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(raw.iter().map(|x| (x / norm) as f32).collect())
}

/// Writes every weight matrix as an SRST file. Returns the written paths.
///
/// Names: `embedding.srst`, `projector.srst`, `layer{NN}_{role}.srst` with
/// role one of `wq wk wv wo w1 w2`.
pub fn dump_weights<T: Scalar>(weights: &Weights<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named: Vec<(String, &Matrix<T>)> = vec![
        ("embedding".into(), &weights.embedding),
        ("projector".into(), &weights.projector),
    ];
    for (i, l) in weights.layers.iter().enumerate() {
        for (role, m) in [
            ("wq", &l.wq),
            ("wk", &l.wk),
            ("wv", &l.wv),
            ("wo", &l.wo),
            ("w1", &l.w1),
            ("w2", &l.w2),
        ] {
            named.push((format!("layer{i:02}_{role}"), m));
        }
    }
    let mut paths = Vec::with_capacity(named.len());
    for (name, m) in named {
        let p = dir.join(format!("{name}.srst"));
        Tensor::from_matrix(m).write(&p)?;
        paths.push(p);
    }
    Ok(paths)
}
