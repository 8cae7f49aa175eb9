//! GPT-2-style decoder stack: pre-norm causal multi-head self-attention and
//! GELU feed-forward blocks with residual connections, plus a final layer
//! norm. The token-vocabulary embedding is deliberately absent; modality
//! front-ends produce the input sequence instead.
//!
//! Forward and backward are hand-written with per-layer caches. Everything
//! is generic over [`Real`]: training runs at `f32`, gradient checking and
//! oracle tests instantiate the same code at `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::lora::{AdapterSet, LayerAdapters, LoraAdapter};
use crate::matrix::Matrix;
use crate::num::{Real, Rng};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub ln_eps: f64,
    pub preset_name: Option<String>,
}

pub const GPT2_LN_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        max_positions: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            max_positions,
            ln_eps: GPT2_LN_EPS,
            preset_name: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(GraftError::Config(
                "model dimensions must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(GraftError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(GraftError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Named presets. `small`..`xl` mirror the public GPT-2 family
    /// (d_ff = 4·d_model, 1024 positions); `tiny` and `tiny-2x` are desk-
    /// scale configurations used by the test suite and scaling sweeps.
    pub fn preset(name: &str) -> Result<Self> {
        let (n_layers, n_heads, d_model, max_positions) = match name {
            "tiny" => (2, 2, 16, 128),
            "tiny-2x" => (4, 4, 32, 128),
            "small" => (12, 12, 768, 1024),
            "medium" => (24, 16, 1024, 1024),
            "large" => (36, 20, 1280, 1024),
            "xl" => (48, 25, 1600, 1024),
            other => {
                return Err(GraftError::Config(format!(
                    "unknown preset {other:?}; known presets: {}",
                    Self::preset_names().join(", ")
                )))
            }
        };
        Ok(ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            max_positions,
            ln_eps: GPT2_LN_EPS,
            preset_name: Some(name.to_string()),
        })
    }

    pub fn preset_names() -> Vec<&'static str> {
        vec!["tiny", "tiny-2x", "small", "medium", "large", "xl"]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one decoder layer. Projection matrices are stored
/// `[d_in × d_out]` (GPT-2 conv-style orientation): activations multiply
/// from the left as row vectors.
#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub qkv_weight: Matrix<T>,
    pub qkv_bias: Matrix<T>,
    pub attn_out_weight: Matrix<T>,
    pub attn_out_bias: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
    pub mlp_fc_weight: Matrix<T>,
    pub mlp_fc_bias: Matrix<T>,
    pub mlp_out_weight: Matrix<T>,
    pub mlp_out_bias: Matrix<T>,
}

impl<T: Real> LayerWeights<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        LayerWeights {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            qkv_weight: Matrix::zeros(d, 3 * d),
            qkv_bias: Matrix::zeros(1, 3 * d),
            attn_out_weight: Matrix::zeros(d, d),
            attn_out_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            mlp_fc_weight: Matrix::zeros(d, ff),
            mlp_fc_bias: Matrix::zeros(1, ff),
            mlp_out_weight: Matrix::zeros(ff, d),
            mlp_out_bias: Matrix::zeros(1, d),
        }
    }

    fn random(cfg: &ModelConfig, std_dev: f64, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let mut lw = LayerWeights::zeros(cfg);
        lw.ln1_gain.fill(T::ONE);
        lw.ln2_gain.fill(T::ONE);
        lw.qkv_weight = Matrix::gaussian(d, 3 * d, std_dev, rng);
        lw.attn_out_weight = Matrix::gaussian(d, d, std_dev, rng);
        lw.mlp_fc_weight = Matrix::gaussian(d, ff, std_dev, rng);
        lw.mlp_out_weight = Matrix::gaussian(ff, d, std_dev, rng);
        lw
    }
}

/// Full backbone parameter set: frozen GPT-2 positional rows plus the
/// layer stack and final layer norm.
#[derive(Debug, Clone)]
pub struct BackboneWeights<T> {
    pub pos_embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: Matrix<T>,
    pub lnf_bias: Matrix<T>,
}

impl<T: Real> BackboneWeights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        BackboneWeights {
            pos_embedding: Matrix::zeros(cfg.max_positions, cfg.d_model),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            lnf_gain: Matrix::zeros(1, cfg.d_model),
            lnf_bias: Matrix::zeros(1, cfg.d_model),
        }
    }

    /// Scratch-mode initialization: GPT-2-style N(0, 0.02) weights, unit
    /// gains, zero biases.
    pub fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let std_dev = 0.02;
        let mut w = BackboneWeights::zeros(cfg);
        w.pos_embedding = Matrix::gaussian(cfg.max_positions, cfg.d_model, std_dev, rng);
        w.layers = (0..cfg.n_layers)
            .map(|_| LayerWeights::random(cfg, std_dev, rng))
            .collect();
        w.lnf_gain.fill(T::ONE);
        w
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        f("backbone.pos".into(), &self.pos_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("backbone.h{i}.ln1_g"), &l.ln1_gain);
            f(format!("backbone.h{i}.ln1_b"), &l.ln1_bias);
            f(format!("backbone.h{i}.qkv_w"), &l.qkv_weight);
            f(format!("backbone.h{i}.qkv_b"), &l.qkv_bias);
            f(format!("backbone.h{i}.attn_out_w"), &l.attn_out_weight);
            f(format!("backbone.h{i}.attn_out_b"), &l.attn_out_bias);
            f(format!("backbone.h{i}.ln2_g"), &l.ln2_gain);
            f(format!("backbone.h{i}.ln2_b"), &l.ln2_bias);
            f(format!("backbone.h{i}.mlp_fc_w"), &l.mlp_fc_weight);
            f(format!("backbone.h{i}.mlp_fc_b"), &l.mlp_fc_bias);
            f(format!("backbone.h{i}.mlp_out_w"), &l.mlp_out_weight);
            f(format!("backbone.h{i}.mlp_out_b"), &l.mlp_out_bias);
        }
        f("backbone.lnf_g".into(), &self.lnf_gain);
        f("backbone.lnf_b".into(), &self.lnf_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f("backbone.pos".into(), &mut self.pos_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("backbone.h{i}.ln1_g"), &mut l.ln1_gain);
            f(format!("backbone.h{i}.ln1_b"), &mut l.ln1_bias);
            f(format!("backbone.h{i}.qkv_w"), &mut l.qkv_weight);
            f(format!("backbone.h{i}.qkv_b"), &mut l.qkv_bias);
            f(format!("backbone.h{i}.attn_out_w"), &mut l.attn_out_weight);
            f(format!("backbone.h{i}.attn_out_b"), &mut l.attn_out_bias);
            f(format!("backbone.h{i}.ln2_g"), &mut l.ln2_gain);
            f(format!("backbone.h{i}.ln2_b"), &mut l.ln2_bias);
            f(format!("backbone.h{i}.mlp_fc_w"), &mut l.mlp_fc_weight);
            f(format!("backbone.h{i}.mlp_fc_b"), &mut l.mlp_fc_bias);
            f(format!("backbone.h{i}.mlp_out_w"), &mut l.mlp_out_weight);
            f(format!("backbone.h{i}.mlp_out_b"), &mut l.mlp_out_bias);
        }
        f("backbone.lnf_g".into(), &mut self.lnf_gain);
        f("backbone.lnf_b".into(), &mut self.lnf_bias);
    }

    pub fn validate_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        if self.layers.len() != cfg.n_layers {
            return Err(GraftError::ShapeMismatch(format!(
                "backbone has {} layers, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let check = |name: String, m: &Matrix<T>, want: (usize, usize)| -> Result<()> {
            if m.shape() != want {
                return Err(GraftError::TensorShape {
                    name,
                    expected: vec![want.0, want.1],
                    got: vec![m.shape().0, m.shape().1],
                });
            }
            Ok(())
        };
        check("backbone.pos".into(), &self.pos_embedding, (cfg.max_positions, d))?;
        for (i, l) in self.layers.iter().enumerate() {
            check(format!("backbone.h{i}.ln1_g"), &l.ln1_gain, (1, d))?;
            check(format!("backbone.h{i}.ln1_b"), &l.ln1_bias, (1, d))?;
            check(format!("backbone.h{i}.qkv_w"), &l.qkv_weight, (d, 3 * d))?;
            check(format!("backbone.h{i}.qkv_b"), &l.qkv_bias, (1, 3 * d))?;
            check(format!("backbone.h{i}.attn_out_w"), &l.attn_out_weight, (d, d))?;
            check(format!("backbone.h{i}.attn_out_b"), &l.attn_out_bias, (1, d))?;
            check(format!("backbone.h{i}.ln2_g"), &l.ln2_gain, (1, d))?;
            check(format!("backbone.h{i}.ln2_b"), &l.ln2_bias, (1, d))?;
            check(format!("backbone.h{i}.mlp_fc_w"), &l.mlp_fc_weight, (d, ff))?;
            check(format!("backbone.h{i}.mlp_fc_b"), &l.mlp_fc_bias, (1, ff))?;
            check(format!("backbone.h{i}.mlp_out_w"), &l.mlp_out_weight, (ff, d))?;
            check(format!("backbone.h{i}.mlp_out_b"), &l.mlp_out_bias, (1, d))?;
        }
        check("backbone.lnf_g".into(), &self.lnf_gain, (1, d))?;
        check("backbone.lnf_b".into(), &self.lnf_bias, (1, d))?;
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        let mut bad: Option<String> = None;
        self.visit(&mut |name, m| {
            if bad.is_none() && !m.all_finite() {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(GraftError::NonFinite(name)),
            None => Ok(()),
        }
    }

    pub fn cast<U: Real>(&self) -> BackboneWeights<U> {
        BackboneWeights {
            pos_embedding: self.pos_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    qkv_weight: l.qkv_weight.cast(),
                    qkv_bias: l.qkv_bias.cast(),
                    attn_out_weight: l.attn_out_weight.cast(),
                    attn_out_bias: l.attn_out_bias.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    mlp_fc_weight: l.mlp_fc_weight.cast(),
                    mlp_fc_bias: l.mlp_fc_bias.cast(),
                    mlp_out_weight: l.mlp_out_weight.cast(),
                    mlp_out_bias: l.mlp_out_bias.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
        }
    }
}

/// Output of the backbone: `[seq_len × d_model]`, seq_len ≤ max_positions.
#[derive(Debug, Clone)]
pub struct HiddenStates<T> {
    values: Matrix<T>,
}

impl<T: Real> HiddenStates<T> {
    pub fn new(values: Matrix<T>) -> Self {
        HiddenStates { values }
    }

    pub fn seq_len(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn into_values(self) -> Matrix<T> {
        self.values
    }
}

/// Layer norm of a single vector with population variance:
/// `out_i = gain_i·(x_i − mean)/sqrt(var + eps) + bias_i`.
pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.is_empty() || x.len() != gain.len() || x.len() != bias.len() {
        return Err(GraftError::ShapeMismatch(format!(
            "layer_norm: x {} gain {} bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / n;
    let inv_std = T::ONE / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv_std + b)
        .collect())
}

struct LnCache<T> {
    /// Normalized inputs (x − mean)/std, one row per sequence position.
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

fn layer_norm_rows<T: Real>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> (Matrix<T>, LnCache<T>) {
    let d = x.cols();
    let n = T::from_f64(d as f64);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_stds = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::ONE / (var + eps).sqrt();
        inv_stds.push(inv_std);
        for c in 0..d {
            let h = (row[c] - mean) * inv_std;
            *xhat.at_mut(r, c) = h;
            *out.at_mut(r, c) = gain.data()[c] * h + bias.data()[c];
        }
    }
    (
        out,
        LnCache {
            xhat,
            inv_std: inv_stds,
        },
    )
}

/// Returns d_x; accumulates d_gain/d_bias into the provided rows.
fn layer_norm_rows_backward<T: Real>(
    d_out: &Matrix<T>,
    cache: &LnCache<T>,
    gain: &Matrix<T>,
    d_gain: Option<&mut Matrix<T>>,
    d_bias: Option<&mut Matrix<T>>,
) -> Matrix<T> {
    let d = d_out.cols();
    let n = T::from_f64(d as f64);
    let mut d_x = Matrix::zeros(d_out.rows(), d);
    let mut dg_local = Matrix::zeros(1, d);
    let mut db_local = Matrix::zeros(1, d);
    for r in 0..d_out.rows() {
        let dy = d_out.row(r);
        let xhat = cache.xhat.row(r);
        let inv_std = cache.inv_std[r];
        let mut sum_dxhat = T::ZERO;
        let mut sum_dxhat_xhat = T::ZERO;
        for c in 0..d {
            let dxhat = dy[c] * gain.data()[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat[c];
            dg_local.data_mut()[c] += dy[c] * xhat[c];
            db_local.data_mut()[c] += dy[c];
        }
        let mean_dxhat = sum_dxhat / n;
        let mean_dxhat_xhat = sum_dxhat_xhat / n;
        for c in 0..d {
            let dxhat = dy[c] * gain.data()[c];
            *d_x.at_mut(r, c) = inv_std * (dxhat - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    if let Some(dg) = d_gain {
        dg.add_assign(&dg_local);
    }
    if let Some(db) = d_bias {
        db.add_assign(&db_local);
    }
    d_x
}

/// GELU via the tanh approximation (GPT-2 convention).
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

pub fn gelu_derivative<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

fn column_block<T: Real>(m: &Matrix<T>, start: usize, width: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), width, |r, c| m.at(r, start + c))
}

fn add_into_column_block<T: Real>(dst: &mut Matrix<T>, start: usize, src: &Matrix<T>) {
    for r in 0..src.rows() {
        for c in 0..src.cols() {
            *dst.at_mut(r, start + c) += src.at(r, c);
        }
    }
}

/// Adds `scale·(x·Aᵀ)·Bᵀ` into `out`, returning the cached `u = x·Aᵀ`.
fn apply_adapter_rows<T: Real>(
    x: &Matrix<T>,
    adapter: &LoraAdapter<T>,
    out: &mut Matrix<T>,
    out_col_start: usize,
) -> Matrix<T> {
    let u = x.matmul_transpose_rhs(&adapter.a);
    let mut delta = u.matmul_transpose_rhs(&adapter.b);
    delta.scale(adapter.scale());
    add_into_column_block(out, out_col_start, &delta);
    u
}

pub struct AttnCache<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Per-head attention probabilities, entries above the diagonal zero.
    probs: Vec<Matrix<T>>,
    /// Concatenated head outputs before the output projection.
    att: Matrix<T>,
    u_q: Option<Matrix<T>>,
    u_k: Option<Matrix<T>>,
    u_v: Option<Matrix<T>>,
    u_o: Option<Matrix<T>>,
}

fn attention_forward<T: Real>(
    xn: &Matrix<T>,
    layer: &LayerWeights<T>,
    adapters: Option<&LayerAdapters<T>>,
    n_heads: usize,
) -> (Matrix<T>, AttnCache<T>) {
    let n = xn.rows();
    let d = xn.cols();
    let head_dim = d / n_heads;
    let inv_sqrt = T::from_f64(1.0 / (head_dim as f64).sqrt());

    let mut qkv = xn.matmul(&layer.qkv_weight);
    qkv.add_row_broadcast(&layer.qkv_bias);
    let (u_q, u_k, u_v) = match adapters {
        Some(ad) => (
            Some(apply_adapter_rows(xn, &ad.q, &mut qkv, 0)),
            Some(apply_adapter_rows(xn, &ad.k, &mut qkv, d)),
            Some(apply_adapter_rows(xn, &ad.v, &mut qkv, 2 * d)),
        ),
        None => (None, None, None),
    };

    let q = column_block(&qkv, 0, d);
    let k = column_block(&qkv, d, d);
    let v = column_block(&qkv, 2 * d, d);

    let mut att = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let start = h * head_dim;
        let mut p = Matrix::zeros(n, n);
        for t in 0..n {
            let q_row = &q.row(t)[start..start + head_dim];
            // causal: keys at positions 0..=t only
            let mut max_score = T::from_f64(f64::NEG_INFINITY);
            let mut scores = Vec::with_capacity(t + 1);
            for s in 0..=t {
                let k_row = &k.row(s)[start..start + head_dim];
                let mut dot = T::ZERO;
                for (&a, &b) in q_row.iter().zip(k_row.iter()) {
                    dot += a * b;
                }
                let sc = dot * inv_sqrt;
                if sc > max_score {
                    max_score = sc;
                }
                scores.push(sc);
            }
            let mut total = T::ZERO;
            for sc in scores.iter_mut() {
                *sc = (*sc - max_score).exp();
                total += *sc;
            }
            for (s, sc) in scores.iter().enumerate() {
                *p.at_mut(t, s) = *sc / total;
            }
            // weighted sum of values
            for s in 0..=t {
                let w = p.at(t, s);
                let v_row = &v.row(s)[start..start + head_dim];
                for (c, &vv) in v_row.iter().enumerate() {
                    *att.at_mut(t, start + c) += w * vv;
                }
            }
        }
        probs.push(p);
    }

    let mut y = att.matmul(&layer.attn_out_weight);
    y.add_row_broadcast(&layer.attn_out_bias);
    let u_o = adapters.map(|ad| apply_adapter_rows(&att, &ad.o, &mut y, 0));

    (
        y,
        AttnCache {
            q,
            k,
            v,
            probs,
            att,
            u_q,
            u_k,
            u_v,
            u_o,
        },
    )
}

/// Standalone causal attention (layer norm not included): scaled dot-product
/// with strictly-lower-triangular-plus-diagonal visibility and the output
/// projection applied. Adapters, if present, target Q/K/V/O.
pub fn causal_attention<T: Real>(
    x: &Matrix<T>,
    layer: &LayerWeights<T>,
    adapters: Option<&LayerAdapters<T>>,
    config: &ModelConfig,
) -> Result<Matrix<T>> {
    if x.rows() > config.max_positions {
        return Err(GraftError::SequenceTooLong {
            len: x.rows(),
            max: config.max_positions,
        });
    }
    if x.cols() != config.d_model {
        return Err(GraftError::ShapeMismatch(format!(
            "attention input width {} vs d_model {}",
            x.cols(),
            config.d_model
        )));
    }
    let (y, _) = attention_forward(x, layer, adapters, config.n_heads);
    y.ensure_finite("attention output")?;
    Ok(y)
}

/// Gradient bundle produced by [`attention_backward`]; accumulated into the
/// caller's parameter-gradient containers when requested.
#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    d_y: &Matrix<T>,
    xn: &Matrix<T>,
    layer: &LayerWeights<T>,
    adapters: Option<&LayerAdapters<T>>,
    cache: &AttnCache<T>,
    n_heads: usize,
    mut grad_layer: Option<&mut LayerWeights<T>>,
    mut grad_adapters: Option<&mut LayerAdapters<T>>,
) -> Matrix<T> {
    let n = d_y.rows();
    let d = d_y.cols();
    let head_dim = d / n_heads;
    let inv_sqrt = T::from_f64(1.0 / (head_dim as f64).sqrt());

    // output projection (+ O adapter)
    let mut d_att = d_y.matmul_transpose_rhs(&layer.attn_out_weight);
    if let Some(g) = grad_layer.as_deref_mut() {
        g.attn_out_weight.add_assign(&cache.att.transpose_matmul(d_y));
        g.attn_out_bias.add_assign(&d_y.column_sums());
    }
    if let (Some(ad), Some(u_o)) = (adapters, cache.u_o.as_ref()) {
        let scale = ad.o.scale();
        let mut d_u = d_y.matmul(&ad.o.b);
        d_u.scale(scale);
        if let Some(g) = grad_adapters.as_deref_mut() {
            let mut d_b = d_y.transpose_matmul(u_o);
            d_b.scale(scale);
            g.o.b.add_assign(&d_b);
            g.o.a.add_assign(&d_u.transpose_matmul(&cache.att));
        }
        d_att.add_assign(&d_u.matmul(&ad.o.a));
    }

    // per-head attention backward
    let mut d_qkv = Matrix::zeros(n, 3 * d);
    for h in 0..n_heads {
        let start = h * head_dim;
        let p = &cache.probs[h];
        for t in 0..n {
            // d_p[t, s] = d_att_h[t] · v_h[s];  d_v accumulates p[t,s]·d_att_h[t]
            let d_att_row = &d_att.row(t)[start..start + head_dim];
            let mut d_p = vec![T::ZERO; t + 1];
            for (s, dp) in d_p.iter_mut().enumerate() {
                let v_row = &cache.v.row(s)[start..start + head_dim];
                for (&da, &vv) in d_att_row.iter().zip(v_row.iter()) {
                    *dp += da * vv;
                }
            }
            for s in 0..=t {
                let w = p.at(t, s);
                for (c, &da) in d_att_row.iter().enumerate() {
                    *d_qkv.at_mut(s, 2 * d + start + c) += w * da;
                }
            }
            // softmax backward on the visible slice
            let mut dot = T::ZERO;
            for (s, &dp) in d_p.iter().enumerate() {
                dot += dp * p.at(t, s);
            }
            for (s, &dp) in d_p.iter().enumerate() {
                let ds = p.at(t, s) * (dp - dot);
                let ds_scaled = ds * inv_sqrt;
                let k_row = &cache.k.row(s)[start..start + head_dim];
                let q_row = &cache.q.row(t)[start..start + head_dim];
                for c in 0..head_dim {
                    *d_qkv.at_mut(t, start + c) += ds_scaled * k_row[c];
                    *d_qkv.at_mut(s, d + start + c) += ds_scaled * q_row[c];
                }
            }
        }
    }

    // fused projection (+ Q/K/V adapters on column blocks)
    let mut d_xn = d_qkv.matmul_transpose_rhs(&layer.qkv_weight);
    if let Some(g) = grad_layer {
        g.qkv_weight.add_assign(&xn.transpose_matmul(&d_qkv));
        g.qkv_bias.add_assign(&d_qkv.column_sums());
    }
    if let Some(ad) = adapters {
        let blocks = [
            (0, &ad.q, cache.u_q.as_ref()),
            (d, &ad.k, cache.u_k.as_ref()),
            (2 * d, &ad.v, cache.u_v.as_ref()),
        ];
        for (start, adapter, u) in blocks {
            let u = u.expect("adapter cache populated when adapters present");
            let d_block = column_block(&d_qkv, start, d);
            let scale = adapter.scale();
            let mut d_u = d_block.matmul(&adapter.b);
            d_u.scale(scale);
            if let Some(g) = grad_adapters.as_deref_mut() {
                let target = g.get_mut(adapter.target);
                let mut d_b = d_block.transpose_matmul(u);
                d_b.scale(scale);
                target.b.add_assign(&d_b);
                target.a.add_assign(&d_u.transpose_matmul(xn));
            }
            d_xn.add_assign(&d_u.matmul(&adapter.a));
        }
    }
    d_xn
}

/// `out = W_out·GELU(W_fc·x + b_fc) + b_out` for a single vector.
pub fn mlp_block<T: Real>(
    x: &[T],
    fc_weight: &Matrix<T>,
    fc_bias: &Matrix<T>,
    out_weight: &Matrix<T>,
    out_bias: &Matrix<T>,
) -> Result<Vec<T>> {
    if x.len() != fc_weight.rows() || fc_weight.cols() != out_weight.rows() {
        return Err(GraftError::ShapeMismatch(format!(
            "mlp_block: x {} fc {}x{} out {}x{}",
            x.len(),
            fc_weight.rows(),
            fc_weight.cols(),
            out_weight.rows(),
            out_weight.cols()
        )));
    }
    let mut hidden: Vec<T> = fc_bias.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (h, &w) in hidden.iter_mut().zip(fc_weight.row(i).iter()) {
            *h += xi * w;
        }
    }
    for h in hidden.iter_mut() {
        *h = gelu(*h);
    }
    let mut out: Vec<T> = out_bias.data().to_vec();
    for (i, &hi) in hidden.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(out_weight.row(i).iter()) {
            *o += hi * w;
        }
    }
    Ok(out)
}

pub struct LayerCache<T> {
    xn1: Matrix<T>,
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    xn2: Matrix<T>,
    ln2: LnCache<T>,
    /// Pre-GELU activations.
    pre: Matrix<T>,
    /// Post-GELU activations.
    act: Matrix<T>,
}

pub struct BackboneCache<T> {
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
}

fn run_backbone<T: Real>(
    x_e: &Matrix<T>,
    weights: &BackboneWeights<T>,
    adapters: Option<&AdapterSet<T>>,
    config: &ModelConfig,
    mut caches: Option<&mut Vec<LayerCache<T>>>,
) -> Result<(Matrix<T>, LnCache<T>)> {
    if x_e.rows() == 0 {
        return Err(GraftError::ShapeMismatch("empty input sequence".into()));
    }
    if x_e.rows() > config.max_positions {
        return Err(GraftError::SequenceTooLong {
            len: x_e.rows(),
            max: config.max_positions,
        });
    }
    if x_e.cols() != config.d_model {
        return Err(GraftError::ShapeMismatch(format!(
            "input width {} vs d_model {}",
            x_e.cols(),
            config.d_model
        )));
    }
    if let Some(ad) = adapters {
        if ad.layers.len() != weights.layers.len() {
            return Err(GraftError::Config(format!(
                "adapter set covers {} layers, backbone has {}",
                ad.layers.len(),
                weights.layers.len()
            )));
        }
    }
    let eps = T::from_f64(config.ln_eps);
    let mut h = x_e.clone();
    for (i, layer) in weights.layers.iter().enumerate() {
        let layer_adapters = adapters.map(|a| &a.layers[i]);
        let (xn1, ln1) = layer_norm_rows(&h, &layer.ln1_gain, &layer.ln1_bias, eps);
        let (attn_y, attn) = attention_forward(&xn1, layer, layer_adapters, config.n_heads);
        h.add_assign(&attn_y);

        let (xn2, ln2) = layer_norm_rows(&h, &layer.ln2_gain, &layer.ln2_bias, eps);
        let mut pre = xn2.matmul(&layer.mlp_fc_weight);
        pre.add_row_broadcast(&layer.mlp_fc_bias);
        let mut act = pre.clone();
        for v in act.data_mut().iter_mut() {
            *v = gelu(*v);
        }
        let mut mlp_y = act.matmul(&layer.mlp_out_weight);
        mlp_y.add_row_broadcast(&layer.mlp_out_bias);
        h.add_assign(&mlp_y);
        h.ensure_finite(&format!("layer {i} output"))?;

        if let Some(store) = caches.as_deref_mut() {
            store.push(LayerCache {
                xn1,
                ln1,
                attn,
                xn2,
                ln2,
                pre,
                act,
            });
        }
    }
    let (out, lnf) = layer_norm_rows(&h, &weights.lnf_gain, &weights.lnf_bias, eps);
    out.ensure_finite("final layer norm output")?;
    Ok((out, lnf))
}

/// Inference-only forward pass. `x_e` must already contain positional
/// information; that is the front-ends' responsibility.
pub fn forward_backbone<T: Real>(
    x_e: &Matrix<T>,
    weights: &BackboneWeights<T>,
    adapters: Option<&AdapterSet<T>>,
    config: &ModelConfig,
) -> Result<HiddenStates<T>> {
    let (out, _) = run_backbone(x_e, weights, adapters, config, None)?;
    Ok(HiddenStates::new(out))
}

/// Forward pass that retains everything the backward pass needs.
pub fn forward_backbone_cached<T: Real>(
    x_e: &Matrix<T>,
    weights: &BackboneWeights<T>,
    adapters: Option<&AdapterSet<T>>,
    config: &ModelConfig,
) -> Result<(HiddenStates<T>, BackboneCache<T>)> {
    let mut layer_caches = Vec::with_capacity(config.n_layers);
    let (out, lnf) = run_backbone(x_e, weights, adapters, config, Some(&mut layer_caches))?;
    Ok((
        HiddenStates::new(out),
        BackboneCache {
            layers: layer_caches,
            lnf,
        },
    ))
}

/// Reverse pass through the whole stack. Returns the gradient with respect
/// to the input embeddings; parameter gradients are accumulated into
/// `grad_weights` / `grad_adapters` when given (gradients always flow
/// *through* frozen parameters either way).
pub fn backward_backbone<T: Real>(
    d_out: &Matrix<T>,
    weights: &BackboneWeights<T>,
    adapters: Option<&AdapterSet<T>>,
    config: &ModelConfig,
    cache: &BackboneCache<T>,
    mut grad_weights: Option<&mut BackboneWeights<T>>,
    mut grad_adapters: Option<&mut AdapterSet<T>>,
) -> Matrix<T> {
    let (lnf_dg, lnf_db) = match grad_weights.as_deref_mut() {
        Some(g) => (Some(&mut g.lnf_gain), Some(&mut g.lnf_bias)),
        None => (None, None),
    };
    let mut d_h = layer_norm_rows_backward(d_out, &cache.lnf, &weights.lnf_gain, lnf_dg, lnf_db);

    for i in (0..weights.layers.len()).rev() {
        let layer = &weights.layers[i];
        let lc = &cache.layers[i];
        let layer_adapters = adapters.map(|a| &a.layers[i]);

        // MLP sub-block
        let d_mlp_y = d_h.clone();
        let d_act = d_mlp_y.matmul_transpose_rhs(&layer.mlp_out_weight);
        let mut d_pre = d_act;
        for (dp, &pre) in d_pre.data_mut().iter_mut().zip(lc.pre.data().iter()) {
            *dp *= gelu_derivative(pre);
        }
        if let Some(g) = grad_weights.as_deref_mut() {
            let gl = &mut g.layers[i];
            gl.mlp_out_weight.add_assign(&lc.act.transpose_matmul(&d_mlp_y));
            gl.mlp_out_bias.add_assign(&d_mlp_y.column_sums());
            gl.mlp_fc_weight.add_assign(&lc.xn2.transpose_matmul(&d_pre));
            gl.mlp_fc_bias.add_assign(&d_pre.column_sums());
        }
        let d_xn2 = d_pre.matmul_transpose_rhs(&layer.mlp_fc_weight);
        let (ln2_dg, ln2_db) = match grad_weights.as_deref_mut() {
            Some(g) => {
                let gl = &mut g.layers[i];
                (Some(&mut gl.ln2_gain), Some(&mut gl.ln2_bias))
            }
            None => (None, None),
        };
        let d_from_ln2 =
            layer_norm_rows_backward(&d_xn2, &lc.ln2, &layer.ln2_gain, ln2_dg, ln2_db);
        d_h.add_assign(&d_from_ln2);

        // attention sub-block
        let d_attn_y = d_h.clone();
        let grad_layer = grad_weights.as_deref_mut().map(|g| &mut g.layers[i]);
        let grad_layer_adapters = grad_adapters.as_deref_mut().map(|g| &mut g.layers[i]);
        let d_xn1 = attention_backward(
            &d_attn_y,
            &lc.xn1,
            layer,
            layer_adapters,
            &lc.attn,
            config.n_heads,
            grad_layer,
            grad_layer_adapters,
        );
        let (ln1_dg, ln1_db) = match grad_weights.as_deref_mut() {
            Some(g) => {
                let gl = &mut g.layers[i];
                (Some(&mut gl.ln1_gain), Some(&mut gl.ln1_bias))
            }
            None => (None, None),
        };
        let d_from_ln1 =
            layer_norm_rows_backward(&d_xn1, &lc.ln1, &layer.ln1_gain, ln1_dg, ln1_db);
        d_h.add_assign(&d_from_ln1);
    }
    d_h
}
