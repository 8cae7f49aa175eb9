//! Modality front-ends: map images, raw waveforms, or discrete token
//! sequences into the backbone's embedding space and add the (frozen)
//! pretrained positional rows.
//!
//! All three front-ends are trainable in every mode; the positional rows
//! they consume belong to the backbone and are never updated outside
//! scratch mode.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::matrix::Matrix;
use crate::num::{Real, Rng};

/// Raw image, row-major `(y, x, channel)`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Zero-pads to `(height, width)`, content anchored top-left.
    pub fn zero_pad_to(&self, height: usize, width: usize) -> Image {
        assert!(height >= self.height && width >= self.width);
        let mut data = vec![0.0; height * width * self.channels];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    data[(y * width + x) * self.channels + c] = self.at(y, x, c);
                }
            }
        }
        Image {
            height,
            width,
            channels: self.channels,
            data,
        }
    }
}

/// One example's model input.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Image(Image),
    Wave(Vec<f32>),
    Tokens(Vec<u32>),
}

impl Payload {
    pub fn modality(&self) -> &'static str {
        match self {
            Payload::Image(_) => "image",
            Payload::Wave(_) => "wave",
            Payload::Tokens(_) => "token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePatchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl ImagePatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 {
            return Err(GraftError::Config("patch and channels must be positive".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(GraftError::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    /// N = H·W / P²
    pub fn n_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// P²·C, the flattened patch length.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Row k is the raster-order flattening of patch k; patches enumerated
/// row-major across the image.
pub fn patchify_image<T: Real>(image: &Image, cfg: &ImagePatchConfig) -> Result<Matrix<T>> {
    cfg.validate()?;
    if image.height != cfg.height || image.width != cfg.width || image.channels != cfg.channels {
        return Err(GraftError::ShapeMismatch(format!(
            "image {}x{}x{} vs patch config {}x{}x{}",
            image.height, image.width, image.channels, cfg.height, cfg.width, cfg.channels
        )));
    }
    let p = cfg.patch;
    let per_row = cfg.width / p;
    let mut out = Matrix::zeros(cfg.n_patches(), cfg.patch_dim());
    for k in 0..cfg.n_patches() {
        let py = (k / per_row) * p;
        let px = (k % per_row) * p;
        let row = out.row_mut(k);
        let mut idx = 0;
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..cfg.channels {
                    row[idx] = T::from_f32(image.at(py + dy, px + dx, c));
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Linear projection into the embedding space (the relearned per-modality
/// input matrix). Weight is `[feature_dim × d_model]`.
#[derive(Debug, Clone)]
pub struct PatchEmbedder<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> PatchEmbedder<T> {
    pub fn init(feature_dim: usize, d_model: usize, rng: &mut Rng) -> Self {
        PatchEmbedder {
            weight: Matrix::gaussian(feature_dim, d_model, 0.02, rng),
            bias: Matrix::zeros(1, d_model),
        }
    }

    pub fn zeros(feature_dim: usize, d_model: usize) -> Self {
        PatchEmbedder {
            weight: Matrix::zeros(feature_dim, d_model),
            bias: Matrix::zeros(1, d_model),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `X_e[k] = tokens[k]·W_e + b_e + pos[k]`. Positional rows come from the
/// imported backbone and are never touched by the optimizer here.
pub fn embed_sequence<T: Real>(
    tokens: &Matrix<T>,
    embedder: &PatchEmbedder<T>,
    pos: &Matrix<T>,
) -> Result<Matrix<T>> {
    if tokens.rows() > pos.rows() {
        return Err(GraftError::SequenceTooLong {
            len: tokens.rows(),
            max: pos.rows(),
        });
    }
    if tokens.cols() != embedder.weight.rows() {
        return Err(GraftError::ShapeMismatch(format!(
            "embed_sequence: feature dim {} vs embedder input {}",
            tokens.cols(),
            embedder.weight.rows()
        )));
    }
    let mut out = tokens.matmul(&embedder.weight);
    out.add_row_broadcast(&embedder.bias);
    for k in 0..out.rows() {
        let pos_row = pos.row(k);
        for (o, &p) in out.row_mut(k).iter_mut().zip(pos_row.iter()) {
            *o += p;
        }
    }
    Ok(out)
}

/// One bank of 1-D filters sharing a kernel size. `filters` is
/// `[n_filters × kernel]`.
#[derive(Debug, Clone)]
pub struct FilterBank<T> {
    pub filters: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> FilterBank<T> {
    pub fn init(n_filters: usize, kernel: usize, rng: &mut Rng) -> Self {
        let std_dev = (2.0 / kernel as f64).sqrt();
        FilterBank {
            filters: Matrix::gaussian(n_filters, kernel, std_dev, rng),
            bias: Matrix::zeros(1, n_filters),
        }
    }

    pub fn n_filters(&self) -> usize {
        self.filters.rows()
    }

    pub fn kernel(&self) -> usize {
        self.filters.cols()
    }
}

pub const WAVE_PATCH_SAMPLES: usize = 400; // 25 ms at 16 kHz
pub const WAVE_KERNELS: [usize; 4] = [16, 32, 64, 128];
pub const WAVE_FILTERS_PER_BANK: usize = 64;

/// Raw-waveform front-end: per 25 ms patch, each bank's filters are
/// convolved within the patch (same padding, stride 1), collapsed by a
/// per-filter max over time followed by ReLU, concatenated across banks,
/// then projected to the embedding space.
#[derive(Debug, Clone)]
pub struct WaveFrontend<T> {
    pub banks: Vec<FilterBank<T>>,
    pub patch_samples: usize,
    pub proj: PatchEmbedder<T>,
}

#[derive(Debug)]
pub struct WaveCache<T> {
    /// Patch rows `[n_patches × patch_samples]` as fed to the banks.
    patches: Matrix<T>,
    /// Concatenated per-patch features `[n_patches × total_filters]`.
    pub features: Matrix<T>,
    /// Pre-ReLU max per (patch, filter column).
    max_values: Matrix<T>,
    /// Arg-max time index per (patch, filter column); first max wins.
    argmax: Vec<usize>,
}

impl<T: Real> WaveFrontend<T> {
    /// The standard configuration: 4 banks of 64 filters with kernel sizes
    /// 16/32/64/128 over 400-sample patches, projected from 256 features.
    pub fn standard(d_model: usize, rng: &mut Rng) -> Self {
        let banks = WAVE_KERNELS
            .iter()
            .map(|&k| FilterBank::init(WAVE_FILTERS_PER_BANK, k, rng))
            .collect::<Vec<_>>();
        let total: usize = banks.iter().map(|b| b.n_filters()).sum();
        WaveFrontend {
            banks,
            patch_samples: WAVE_PATCH_SAMPLES,
            proj: PatchEmbedder::init(total, d_model, rng),
        }
    }

    /// Arbitrary bank layout, used by tests and experiments.
    pub fn custom(banks: Vec<FilterBank<T>>, patch_samples: usize, d_model: usize, rng: &mut Rng) -> Self {
        let total: usize = banks.iter().map(|b| b.n_filters()).sum();
        WaveFrontend {
            banks,
            patch_samples,
            proj: PatchEmbedder::init(total, d_model, rng),
        }
    }

    pub fn total_filters(&self) -> usize {
        self.banks.iter().map(|b| b.n_filters()).sum()
    }

    /// Per-patch feature extraction: `[n_patches × total_filters]`.
    pub fn wave_features(&self, wave: &[f32]) -> Result<(Matrix<T>, WaveCache<T>)> {
        if wave.is_empty() || wave.len() % self.patch_samples != 0 {
            return Err(GraftError::DataFormat(format!(
                "waveform length {} not a positive multiple of patch size {}",
                wave.len(),
                self.patch_samples
            )));
        }
        if wave.iter().any(|v| !v.is_finite()) {
            return Err(GraftError::NonFinite("input waveform".into()));
        }
        let n_patches = wave.len() / self.patch_samples;
        let total = self.total_filters();
        let mut patches = Matrix::zeros(n_patches, self.patch_samples);
        for p in 0..n_patches {
            for (dst, &s) in patches
                .row_mut(p)
                .iter_mut()
                .zip(wave[p * self.patch_samples..(p + 1) * self.patch_samples].iter())
            {
                *dst = T::from_f32(s);
            }
        }
        let mut features = Matrix::zeros(n_patches, total);
        let mut max_values = Matrix::zeros(n_patches, total);
        let mut argmax = vec![0usize; n_patches * total];
        for p in 0..n_patches {
            let samples = patches.row(p);
            let mut col = 0;
            for bank in &self.banks {
                let kernel = bank.kernel();
                let pad_left = (kernel - 1) / 2;
                for f in 0..bank.n_filters() {
                    let filt = bank.filters.row(f);
                    let bias = bank.bias.data()[f];
                    let mut best = T::from_f64(f64::NEG_INFINITY);
                    let mut best_t = 0usize;
                    for t in 0..self.patch_samples {
                        let mut acc = bias;
                        for (k, &w) in filt.iter().enumerate() {
                            let idx = t as isize - pad_left as isize + k as isize;
                            if idx >= 0 && (idx as usize) < self.patch_samples {
                                acc += w * samples[idx as usize];
                            }
                        }
                        if acc > best {
                            best = acc;
                            best_t = t;
                        }
                    }
                    *max_values.at_mut(p, col) = best;
                    argmax[p * total + col] = best_t;
                    *features.at_mut(p, col) = best.maximum(T::ZERO);
                    col += 1;
                }
            }
        }
        let cache = WaveCache {
            patches,
            features: features.clone(),
            max_values,
            argmax,
        };
        Ok((features, cache))
    }

    fn backward_features(
        &self,
        cache: &WaveCache<T>,
        d_features: &Matrix<T>,
        grad: &mut WaveFrontend<T>,
    ) {
        let total = self.total_filters();
        for p in 0..d_features.rows() {
            let samples = cache.patches.row(p);
            let mut col = 0;
            for (bi, bank) in self.banks.iter().enumerate() {
                let kernel = bank.kernel();
                let pad_left = (kernel - 1) / 2;
                for f in 0..bank.n_filters() {
                    let d = d_features.at(p, col);
                    // ReLU gate on the pre-activation max
                    if d != T::ZERO && cache.max_values.at(p, col) > T::ZERO {
                        let t = cache.argmax[p * total + col];
                        grad.banks[bi].bias.data_mut()[f] += d;
                        let g_row = grad.banks[bi].filters.row_mut(f);
                        for (k, g) in g_row.iter_mut().enumerate() {
                            let idx = t as isize - pad_left as isize + k as isize;
                            if idx >= 0 && (idx as usize) < self.patch_samples {
                                *g += d * samples[idx as usize];
                            }
                        }
                    }
                    col += 1;
                }
            }
        }
    }
}

/// Embedding table for discrete acoustic tokens, trained from scratch.
#[derive(Debug, Clone)]
pub struct TokenEmbedder<T> {
    pub table: Matrix<T>,
}

pub const ENCODEC_COARSE_VOCAB: usize = 1024;

impl<T: Real> TokenEmbedder<T> {
    pub fn init(vocab: usize, d_model: usize, rng: &mut Rng) -> Self {
        TokenEmbedder {
            table: Matrix::gaussian(vocab, d_model, 0.02, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }
}

/// `row t = table[ids[t]] + pos[t]`.
pub fn embed_tokens<T: Real>(
    ids: &[u32],
    embedder: &TokenEmbedder<T>,
    pos: &Matrix<T>,
) -> Result<Matrix<T>> {
    if ids.len() > pos.rows() {
        return Err(GraftError::SequenceTooLong {
            len: ids.len(),
            max: pos.rows(),
        });
    }
    let vocab = embedder.vocab() as u32;
    let mut out = Matrix::zeros(ids.len(), embedder.table.cols());
    for (t, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(GraftError::TokenOutOfRange { id, vocab });
        }
        let emb = embedder.table.row(id as usize);
        let pos_row = pos.row(t);
        for ((o, &e), &p) in out.row_mut(t).iter_mut().zip(emb.iter()).zip(pos_row.iter()) {
            *o = e + p;
        }
    }
    Ok(out)
}

/// Declarative description of a front-end, stored in checkpoints and
/// resolved back into a concrete front-end by [`Frontend::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontendSpec {
    Patch {
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    },
    Wave,
    Token {
        vocab: usize,
    },
}

impl FrontendSpec {
    pub fn modality(&self) -> &'static str {
        match self {
            FrontendSpec::Patch { .. } => "image",
            FrontendSpec::Wave => "wave",
            FrontendSpec::Token { .. } => "token",
        }
    }

    /// Trainable parameter count, in closed form.
    pub fn param_count(&self, d_model: usize) -> usize {
        match self {
            FrontendSpec::Patch {
                height,
                width,
                channels,
                patch,
            } => {
                let cfg = ImagePatchConfig {
                    height: *height,
                    width: *width,
                    channels: *channels,
                    patch: *patch,
                };
                cfg.patch_dim() * d_model + d_model
            }
            FrontendSpec::Wave => {
                let filters: usize = WAVE_KERNELS.iter().map(|k| WAVE_FILTERS_PER_BANK * k).sum();
                let biases = WAVE_KERNELS.len() * WAVE_FILTERS_PER_BANK;
                let total = WAVE_KERNELS.len() * WAVE_FILTERS_PER_BANK;
                filters + biases + total * d_model + d_model
            }
            FrontendSpec::Token { vocab } => vocab * d_model,
        }
    }
}

/// Everything the front-end backward pass needs from its forward pass.
#[derive(Debug)]
pub enum FrontendCache<T> {
    Patch {
        tokens: Matrix<T>,
    },
    Wave {
        cache: WaveCache<T>,
    },
    Token {
        ids: Vec<u32>,
    },
}

/// The three modality front-ends behind one interface. Gradient
/// containers reuse the same enum via [`Frontend::zeros_like`].
#[derive(Debug, Clone)]
pub enum Frontend<T> {
    Patch {
        cfg: ImagePatchConfig,
        embedder: PatchEmbedder<T>,
    },
    Wave(WaveFrontend<T>),
    Token(TokenEmbedder<T>),
}

impl<T: Real> Frontend<T> {
    pub fn build(spec: &FrontendSpec, d_model: usize, rng: &mut Rng) -> Result<Frontend<T>> {
        match spec {
            FrontendSpec::Patch {
                height,
                width,
                channels,
                patch,
            } => {
                let cfg = ImagePatchConfig {
                    height: *height,
                    width: *width,
                    channels: *channels,
                    patch: *patch,
                };
                cfg.validate()?;
                Ok(Frontend::Patch {
                    embedder: PatchEmbedder::init(cfg.patch_dim(), d_model, rng),
                    cfg,
                })
            }
            FrontendSpec::Wave => Ok(Frontend::Wave(WaveFrontend::standard(d_model, rng))),
            FrontendSpec::Token { vocab } => {
                if *vocab == 0 {
                    return Err(GraftError::Config("vocab must be positive".into()));
                }
                Ok(Frontend::Token(TokenEmbedder::init(*vocab, d_model, rng)))
            }
        }
    }

    pub fn spec(&self) -> FrontendSpec {
        match self {
            Frontend::Patch { cfg, .. } => FrontendSpec::Patch {
                height: cfg.height,
                width: cfg.width,
                channels: cfg.channels,
                patch: cfg.patch,
            },
            Frontend::Wave(_) => FrontendSpec::Wave,
            Frontend::Token(t) => FrontendSpec::Token { vocab: t.vocab() },
        }
    }

    /// Maps a payload to `[seq_len × d_model]` with positions added.
    pub fn forward(
        &self,
        payload: &Payload,
        pos: &Matrix<T>,
    ) -> Result<(Matrix<T>, FrontendCache<T>)> {
        match (self, payload) {
            (Frontend::Patch { cfg, embedder }, Payload::Image(image)) => {
                let tokens = patchify_image::<T>(image, cfg)?;
                let x_e = embed_sequence(&tokens, embedder, pos)?;
                Ok((x_e, FrontendCache::Patch { tokens }))
            }
            (Frontend::Wave(wf), Payload::Wave(wave)) => {
                let (features, cache) = wf.wave_features(wave)?;
                let x_e = embed_sequence(&features, &wf.proj, pos)?;
                Ok((x_e, FrontendCache::Wave { cache }))
            }
            (Frontend::Token(te), Payload::Tokens(ids)) => {
                let x_e = embed_tokens(ids, te, pos)?;
                Ok((x_e, FrontendCache::Token { ids: ids.clone() }))
            }
            (fe, payload) => Err(GraftError::Config(format!(
                "front-end expects {} payloads, got {}",
                fe.spec().modality(),
                payload.modality()
            ))),
        }
    }

    /// Accumulates parameter gradients into `grad` (a zeroed clone of this
    /// front-end). The gradient of the positional rows is `d_xe` itself and
    /// is handled by the caller.
    pub fn backward(&self, cache: &FrontendCache<T>, d_xe: &Matrix<T>, grad: &mut Frontend<T>) {
        match (self, cache, grad) {
            (
                Frontend::Patch { .. },
                FrontendCache::Patch { tokens },
                Frontend::Patch { embedder: g, .. },
            ) => {
                g.weight.add_assign(&tokens.transpose_matmul(d_xe));
                g.bias.add_assign(&d_xe.column_sums());
            }
            (Frontend::Wave(wf), FrontendCache::Wave { cache }, Frontend::Wave(g)) => {
                g.proj.weight.add_assign(&cache.features.transpose_matmul(d_xe));
                g.proj.bias.add_assign(&d_xe.column_sums());
                let d_features = d_xe.matmul_transpose_rhs(&wf.proj.weight);
                wf.backward_features(cache, &d_features, g);
            }
            (Frontend::Token(_), FrontendCache::Token { ids }, Frontend::Token(g)) => {
                for (t, &id) in ids.iter().enumerate() {
                    let d_row = d_xe.row(t);
                    for (gv, &d) in g.table.row_mut(id as usize).iter_mut().zip(d_row.iter()) {
                        *gv += d;
                    }
                }
            }
            _ => unreachable!("front-end, cache and gradient container kinds always match"),
        }
    }

    pub fn zeros_like(&self) -> Frontend<T> {
        match self {
            Frontend::Patch { cfg, embedder } => Frontend::Patch {
                cfg: *cfg,
                embedder: PatchEmbedder::zeros(embedder.weight.rows(), embedder.weight.cols()),
            },
            Frontend::Wave(wf) => Frontend::Wave(WaveFrontend {
                banks: wf
                    .banks
                    .iter()
                    .map(|b| FilterBank {
                        filters: Matrix::zeros(b.filters.rows(), b.filters.cols()),
                        bias: Matrix::zeros(1, b.n_filters()),
                    })
                    .collect(),
                patch_samples: wf.patch_samples,
                proj: PatchEmbedder::zeros(wf.proj.weight.rows(), wf.proj.weight.cols()),
            }),
            Frontend::Token(te) => Frontend::Token(TokenEmbedder {
                table: Matrix::zeros(te.table.rows(), te.table.cols()),
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        match self {
            Frontend::Patch { embedder, .. } => {
                f("frontend.patch_w".into(), &embedder.weight);
                f("frontend.patch_b".into(), &embedder.bias);
            }
            Frontend::Wave(wf) => {
                for (i, bank) in wf.banks.iter().enumerate() {
                    f(format!("frontend.wave.bank{i}.f"), &bank.filters);
                    f(format!("frontend.wave.bank{i}.b"), &bank.bias);
                }
                f("frontend.wave.proj_w".into(), &wf.proj.weight);
                f("frontend.wave.proj_b".into(), &wf.proj.bias);
            }
            Frontend::Token(te) => {
                f("frontend.token_table".into(), &te.table);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        match self {
            Frontend::Patch { embedder, .. } => {
                f("frontend.patch_w".into(), &mut embedder.weight);
                f("frontend.patch_b".into(), &mut embedder.bias);
            }
            Frontend::Wave(wf) => {
                for (i, bank) in wf.banks.iter_mut().enumerate() {
                    f(format!("frontend.wave.bank{i}.f"), &mut bank.filters);
                    f(format!("frontend.wave.bank{i}.b"), &mut bank.bias);
                }
                f("frontend.wave.proj_w".into(), &mut wf.proj.weight);
                f("frontend.wave.proj_b".into(), &mut wf.proj.bias);
            }
            Frontend::Token(te) => {
                f("frontend.token_table".into(), &mut te.table);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Frontend<U> {
        match self {
            Frontend::Patch { cfg, embedder } => Frontend::Patch {
                cfg: *cfg,
                embedder: PatchEmbedder {
                    weight: embedder.weight.cast(),
                    bias: embedder.bias.cast(),
                },
            },
            Frontend::Wave(wf) => Frontend::Wave(WaveFrontend {
                banks: wf
                    .banks
                    .iter()
                    .map(|b| FilterBank {
                        filters: b.filters.cast(),
                        bias: b.bias.cast(),
                    })
                    .collect(),
                patch_samples: wf.patch_samples,
                proj: PatchEmbedder {
                    weight: wf.proj.weight.cast(),
                    bias: wf.proj.bias.cast(),
                },
            }),
            Frontend::Token(te) => Frontend::Token(TokenEmbedder {
                table: te.table.cast(),
            }),
        }
    }
}
