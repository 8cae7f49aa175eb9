//! Low-rank adaptation: adapter creation, adapted linear application,
//! merging, and the trainable-parameter ledger.
//!
//! An adapter holds `A: [r × d_in]` and `B: [d_out × r]` with effective
//! update `ΔW = (alpha/r)·B·A`. `B` starts at zero so a freshly attached
//! adapter is an exact no-op. Adapters target the four attention
//! projections Q, K, V, O of every layer; the fused qkv weight is adapted
//! as three logical adapters acting on its column blocks.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::frontends::FrontendSpec;
use crate::heads::HeadSpec;
use crate::matrix::Matrix;
use crate::num::{Real, Rng};
use crate::transformer::ModelConfig;

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterTarget {
    Q,
    K,
    V,
    O,
}

impl AdapterTarget {
    pub fn label(self) -> &'static str {
        match self {
            AdapterTarget::Q => "q",
            AdapterTarget::K => "k",
            AdapterTarget::V => "v",
            AdapterTarget::O => "o",
        }
    }

    pub const ALL: [AdapterTarget; 4] = [
        AdapterTarget::Q,
        AdapterTarget::K,
        AdapterTarget::V,
        AdapterTarget::O,
    ];
}

#[derive(Debug, Clone)]
pub struct LoraAdapter<T> {
    /// Down-projection, `[rank × d_in]`, Gaussian(0, 1/rank) at init.
    pub a: Matrix<T>,
    /// Up-projection, `[d_out × rank]`, zero at init so ΔW = 0.
    pub b: Matrix<T>,
    pub rank: usize,
    pub alpha: f64,
    pub target: AdapterTarget,
}

impl<T: Real> LoraAdapter<T> {
    /// `alpha / rank`; equals 1 exactly for the default rank = alpha = 8.
    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn zeros_like(&self) -> LoraAdapter<T> {
        LoraAdapter {
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
            rank: self.rank,
            alpha: self.alpha,
            target: self.target,
        }
    }
}

/// Creates a fresh adapter: `A ~ Gaussian(0, 1/rank)` seeded, `B = 0`.
pub fn init_adapter<T: Real>(
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    target: AdapterTarget,
    rng: &mut Rng,
) -> Result<LoraAdapter<T>> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(GraftError::Config(format!(
            "adapter rank {rank} must be in 1..={}",
            d_in.min(d_out)
        )));
    }
    let std_dev = (1.0 / rank as f64).sqrt();
    Ok(LoraAdapter {
        a: Matrix::gaussian(rank, d_in, std_dev, rng),
        b: Matrix::zeros(d_out, rank),
        rank,
        alpha,
        target,
    })
}

/// `y = W·x + b + scale·B·(A·x)`; plain affine when no adapter is given.
/// `w` is stored `[d_in × d_out]` (inputs hit it from the left as rows).
pub fn adapted_linear<T: Real>(
    x: &[T],
    w: &Matrix<T>,
    bias: &Matrix<T>,
    adapter: Option<&LoraAdapter<T>>,
) -> Result<Vec<T>> {
    if x.len() != w.rows() {
        return Err(GraftError::ShapeMismatch(format!(
            "adapted_linear: input length {} vs weight rows {}",
            x.len(),
            w.rows()
        )));
    }
    if bias.cols() != w.cols() {
        return Err(GraftError::ShapeMismatch(format!(
            "adapted_linear: bias width {} vs weight cols {}",
            bias.cols(),
            w.cols()
        )));
    }
    let mut y: Vec<T> = bias.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in y.iter_mut().zip(w.row(i).iter()) {
            *o += xi * wij;
        }
    }
    if let Some(ad) = adapter {
        if ad.d_in() != x.len() || ad.d_out() != w.cols() {
            return Err(GraftError::ShapeMismatch(format!(
                "adapter shaped for {}→{} applied to {}→{}",
                ad.d_in(),
                ad.d_out(),
                x.len(),
                w.cols()
            )));
        }
        let scale = ad.scale();
        // u = A·x, then y += scale·B·u
        let mut u = vec![T::ZERO; ad.rank];
        for (ur, arow) in u.iter_mut().zip((0..ad.rank).map(|r| ad.a.row(r))) {
            for (&ai, &xi) in arow.iter().zip(x.iter()) {
                *ur += ai * xi;
            }
        }
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for (&bj, &ur) in ad.b.row(j).iter().zip(u.iter()) {
                acc += bj * ur;
            }
            *yj += scale * acc;
        }
    }
    Ok(y)
}

/// `W′ = W + scale·B·A`, returned in the same `[d_in × d_out]` storage
/// orientation as `w`, so the adapter can be dropped for inference.
pub fn merge_adapter<T: Real>(w: &Matrix<T>, adapter: &LoraAdapter<T>) -> Result<Matrix<T>> {
    if adapter.d_in() != w.rows() || adapter.d_out() != w.cols() {
        return Err(GraftError::ShapeMismatch(format!(
            "merge_adapter: adapter {}→{} vs weight {}x{}",
            adapter.d_in(),
            adapter.d_out(),
            w.rows(),
            w.cols()
        )));
    }
    let scale = adapter.scale();
    let mut merged = w.clone();
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            // ΔW[out=j, in=i] = Σ_ρ B[j,ρ]·A[ρ,i]
            let mut acc = T::ZERO;
            for r in 0..adapter.rank {
                acc += adapter.b.at(j, r) * adapter.a.at(r, i);
            }
            *merged.at_mut(i, j) += scale * acc;
        }
    }
    Ok(merged)
}

/// The four per-layer adapters.
#[derive(Debug, Clone)]
pub struct LayerAdapters<T> {
    pub q: LoraAdapter<T>,
    pub k: LoraAdapter<T>,
    pub v: LoraAdapter<T>,
    pub o: LoraAdapter<T>,
}

impl<T: Real> LayerAdapters<T> {
    pub fn get(&self, target: AdapterTarget) -> &LoraAdapter<T> {
        match target {
            AdapterTarget::Q => &self.q,
            AdapterTarget::K => &self.k,
            AdapterTarget::V => &self.v,
            AdapterTarget::O => &self.o,
        }
    }

    pub fn get_mut(&mut self, target: AdapterTarget) -> &mut LoraAdapter<T> {
        match target {
            AdapterTarget::Q => &mut self.q,
            AdapterTarget::K => &mut self.k,
            AdapterTarget::V => &mut self.v,
            AdapterTarget::O => &mut self.o,
        }
    }
}

/// Adapters for every layer of a backbone.
#[derive(Debug, Clone)]
pub struct AdapterSet<T> {
    pub layers: Vec<LayerAdapters<T>>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Real> AdapterSet<T> {
    pub fn init(config: &ModelConfig, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerAdapters {
                q: init_adapter(d, d, rank, alpha, AdapterTarget::Q, rng)?,
                k: init_adapter(d, d, rank, alpha, AdapterTarget::K, rng)?,
                v: init_adapter(d, d, rank, alpha, AdapterTarget::V, rng)?,
                o: init_adapter(d, d, rank, alpha, AdapterTarget::O, rng)?,
            });
        }
        Ok(AdapterSet {
            layers,
            rank,
            alpha,
        })
    }

    pub fn zeros_like(&self) -> AdapterSet<T> {
        AdapterSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapters {
                    q: l.q.zeros_like(),
                    k: l.k.zeros_like(),
                    v: l.v.zeros_like(),
                    o: l.o.zeros_like(),
                })
                .collect(),
            rank: self.rank,
            alpha: self.alpha,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.q.param_count() + l.k.param_count() + l.v.param_count() + l.o.param_count()
            })
            .sum()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            for target in AdapterTarget::ALL {
                let ad = layer.get(target);
                f(format!("adapters.h{i}.{}.a", target.label()), &ad.a);
                f(format!("adapters.h{i}.{}.b", target.label()), &ad.b);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for target in AdapterTarget::ALL {
                let label = target.label();
                let ad = layer.get_mut(target);
                f(format!("adapters.h{i}.{label}.a"), &mut ad.a);
                f(format!("adapters.h{i}.{label}.b"), &mut ad.b);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> AdapterSet<U> {
        AdapterSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapters {
                    q: cast_adapter(&l.q),
                    k: cast_adapter(&l.k),
                    v: cast_adapter(&l.v),
                    o: cast_adapter(&l.o),
                })
                .collect(),
            rank: self.rank,
            alpha: self.alpha,
        }
    }
}

fn cast_adapter<T: Real, U: Real>(ad: &LoraAdapter<T>) -> LoraAdapter<U> {
    LoraAdapter {
        a: ad.a.cast(),
        b: ad.b.cast(),
        rank: ad.rank,
        alpha: ad.alpha,
        target: ad.target,
    }
}

/// Trainable-parameter bookkeeping per group for a given mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLedger {
    pub mode: crate::model::TrainMode,
    /// Trainable counts per group (zero when the group is frozen or absent).
    pub backbone: usize,
    pub adapters: usize,
    pub frontend: usize,
    pub head: usize,
    pub total_trainable: usize,
    /// Every parameter in the assembled model, trainable or not.
    pub total_params: usize,
}

impl ParamLedger {
    pub fn groups(&self) -> [(&'static str, usize); 4] {
        [
            ("backbone", self.backbone),
            ("adapters", self.adapters),
            ("frontend", self.frontend),
            ("head", self.head),
        ]
    }
}

/// Closed-form backbone parameter count (positional rows, per-layer
/// norms/attention/MLP, final norm).
pub fn backbone_param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let ff = config.d_ff;
    let per_layer = 2 * d            // ln1 gain+bias
        + d * 3 * d + 3 * d          // fused qkv
        + d * d + d                  // attention output projection
        + 2 * d                      // ln2
        + d * ff + ff                // mlp fc
        + ff * d + d; // mlp out
    config.max_positions * d + config.n_layers * per_layer + 2 * d
}

/// Closed-form adapter count: Q, K, V, O on every layer, each contributing
/// `r·d_model + d_model·r` parameters.
pub fn adapter_param_count(config: &ModelConfig, rank: usize) -> usize {
    4 * config.n_layers * (rank * config.d_model + config.d_model * rank)
}

/// Exact closed-form ledger for a (config, mode, front-end, head) choice.
pub fn count_params(
    config: &ModelConfig,
    mode: crate::model::TrainMode,
    frontend: &FrontendSpec,
    head: &HeadSpec,
    rank: usize,
) -> ParamLedger {
    use crate::model::TrainMode;
    let backbone_total = backbone_param_count(config);
    let adapters_total = adapter_param_count(config, rank);
    let frontend_count = frontend.param_count(config.d_model);
    let head_count = head.param_count(config.d_model);

    let (backbone_trainable, adapters_trainable, model_total) = match mode {
        TrainMode::Frozen => (0, 0, backbone_total + frontend_count + head_count),
        TrainMode::Lora => (
            0,
            adapters_total,
            backbone_total + adapters_total + frontend_count + head_count,
        ),
        TrainMode::Scratch => (
            backbone_total,
            0,
            backbone_total + frontend_count + head_count,
        ),
    };
    ParamLedger {
        mode,
        backbone: backbone_trainable,
        adapters: adapters_trainable,
        frontend: frontend_count,
        head: head_count,
        total_trainable: backbone_trainable + adapters_trainable + frontend_count + head_count,
        total_params: model_total,
    }
}

/// Paper-reported trainable-parameter figures for known (task, preset)
/// pairs under LoRA, printed beside computed ledgers for comparison.
pub fn paper_reported_params(task: &str, preset: &str) -> Option<&'static str> {
    match (task, preset) {
        ("cifar10", "small") => Some("0.64M"),
        ("cifar10", "medium") => Some("1.4M"),
        ("fashion-mnist", "small") => Some("0.6M"),
        ("fashion-mnist", "medium") => Some("1.4M"),
        ("gtzan-tokens", "small") => Some("1.2M"),
        ("gtzan-tokens", "medium") => Some("1.9M"),
        ("wave-dir", "small") => Some("1.2M"),
        ("wave-dir", "large") => Some("1.9M"),
        ("wave-dir", "xl") => Some("2.4M"),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_adapter_update_is_zero() {
        let mut rng = Rng::new(42);
        let ad: LoraAdapter<f64> = init_adapter(6, 6, 3, 3.0, AdapterTarget::Q, &mut rng).unwrap();
        // effective update scale·B·A must be the zero matrix
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = 0.0;
                for r in 0..3 {
                    acc += ad.b.at(j, r) * ad.a.at(r, i);
                }
                assert_eq!(acc, 0.0);
            }
        }
    }

    #[test]
    fn default_rank_alpha_gives_unit_scale() {
        let mut rng = Rng::new(1);
        let ad: LoraAdapter<f64> =
            init_adapter(16, 16, DEFAULT_RANK, DEFAULT_ALPHA, AdapterTarget::K, &mut rng).unwrap();
        assert_eq!(ad.scale(), 1.0);
    }

    #[test]
    fn init_variance_tracks_one_over_rank() {
        // 10^4 seeded draws of A entries; sample variance within 10% of 1/r
        let rank = 8;
        let mut rng = Rng::new(99);
        let ad: LoraAdapter<f64> =
            init_adapter(1250, 1250, rank, 8.0, AdapterTarget::Q, &mut rng).unwrap();
        let entries = ad.a.data();
        assert_eq!(entries.len(), 10_000);
        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
        let var = entries.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
            / entries.len() as f64;
        let expected = 1.0 / rank as f64;
        assert!(
            (var - expected).abs() / expected < 0.10,
            "sample variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn rank_exceeding_min_dimension_is_rejected() {
        let mut rng = Rng::new(0);
        let err = init_adapter::<f64>(4, 16, 5, 5.0, AdapterTarget::V, &mut rng).unwrap_err();
        assert!(matches!(err, GraftError::Config(_)));
    }

    #[test]
    fn zero_b_adapter_is_identity_on_linear() {
        let mut rng = Rng::new(5);
        let w: Matrix<f64> = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let bias = Matrix::row_vector(vec![0.5, -0.25, 1.0]);
        let ad = init_adapter(4, 3, 2, 2.0, AdapterTarget::O, &mut rng).unwrap();
        let x = [1.0, -2.0, 0.5, 3.0];
        let plain = adapted_linear(&x, &w, &bias, None).unwrap();
        let adapted = adapted_linear(&x, &w, &bias, Some(&ad)).unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn rank_one_hand_case() {
        // A=[[1,2]], B=[[3],[4]], scale=1, W=0, b=0, x=[1,0] → y = B·(A·x) = [3,4]
        let ad = LoraAdapter::<f64> {
            a: Matrix::from_vec(1, 2, vec![1.0, 2.0]),
            b: Matrix::from_vec(2, 1, vec![3.0, 4.0]),
            rank: 1,
            alpha: 1.0,
            target: AdapterTarget::Q,
        };
        let w = Matrix::zeros(2, 2);
        let bias = Matrix::zeros(1, 2);
        let y = adapted_linear(&[1.0, 0.0], &w, &bias, Some(&ad)).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);

        // ΔW in math orientation [d_out × d_in] is [[3,6],[4,8]]; our storage
        // is [d_in × d_out], so the merged matrix holds its transpose.
        let merged = merge_adapter(&w, &ad).unwrap();
        assert_eq!(merged.data(), &[3.0, 4.0, 6.0, 8.0]);
        // behavioural check on both basis vectors
        let e0 = adapted_linear(&[1.0, 0.0], &merged, &bias, None).unwrap();
        let e1 = adapted_linear(&[0.0, 1.0], &merged, &bias, None).unwrap();
        assert_eq!(e0, vec![3.0, 4.0]);
        assert_eq!(e1, vec![6.0, 8.0]);
    }

    #[test]
    fn merge_matches_adapted_forward_on_random_cases() {
        let mut rng = Rng::new(2024);
        for case in 0..50 {
            let d_in = 2 + rng.below(6);
            let d_out = 2 + rng.below(6);
            let rank = 1 + rng.below(d_in.min(d_out));
            let w: Matrix<f64> = Matrix::gaussian(d_in, d_out, 0.7, &mut rng);
            let bias: Matrix<f64> = Matrix::gaussian(1, d_out, 0.3, &mut rng);
            let mut ad = init_adapter(d_in, d_out, rank, rank as f64, AdapterTarget::Q, &mut rng)
                .unwrap();
            // give B real content so the update is non-trivial
            ad.b = Matrix::gaussian(d_out, rank, 0.5, &mut rng);
            let x: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();

            let adapted = adapted_linear(&x, &w, &bias, Some(&ad)).unwrap();
            let merged = merge_adapter(&w, &ad).unwrap();
            let via_merged = adapted_linear(&x, &merged, &bias, None).unwrap();
            for (a, b) in adapted.iter().zip(via_merged.iter()) {
                assert!((a - b).abs() < 1e-5, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn cifar_lora_small_ledger_reproduces_closed_form() {
        use crate::model::TrainMode;
        // small preset, LoRA r=8 on Q/K/V/O, P=4 CIFAR front-end, linear
        // 10-class head: adapters 589,824 + patch embed 37,632 + head 7,690
        let cfg = ModelConfig::preset("small").unwrap();
        let fe = FrontendSpec::Patch {
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
        };
        let head = HeadSpec::Linear { classes: 10 };
        let ledger = count_params(&cfg, TrainMode::Lora, &fe, &head, 8);
        assert_eq!(ledger.adapters, 589_824);
        assert_eq!(ledger.frontend, 37_632);
        assert_eq!(ledger.head, 7_690);
        assert_eq!(ledger.total_trainable, 635_146);
        // within 1% of the reported 0.64M
        let reported = 640_000.0;
        assert!((ledger.total_trainable as f64 - reported).abs() / reported < 0.01);
    }

    #[test]
    fn frozen_mode_trains_frontend_and_head_only() {
        use crate::model::TrainMode;
        let cfg = ModelConfig::preset("small").unwrap();
        let fe = FrontendSpec::Token { vocab: 1024 };
        let head = HeadSpec::Mlp {
            hidden: cfg.d_model,
            classes: 10,
        };
        let ledger = count_params(&cfg, TrainMode::Frozen, &fe, &head, 8);
        assert_eq!(ledger.adapters, 0);
        assert_eq!(ledger.backbone, 0);
        assert_eq!(ledger.total_trainable, ledger.frontend + ledger.head);
    }

    #[test]
    fn scratch_mode_trains_every_parameter() {
        use crate::model::TrainMode;
        let cfg = ModelConfig::preset("tiny").unwrap();
        let fe = FrontendSpec::Wave;
        let head = HeadSpec::Linear { classes: 4 };
        let ledger = count_params(&cfg, TrainMode::Scratch, &fe, &head, 8);
        assert_eq!(ledger.total_trainable, ledger.total_params);
    }

    #[test]
    fn trainable_sets_are_nested_frozen_lora_scratch() {
        use crate::model::TrainMode;
        for preset in ["tiny", "small"] {
            let cfg = ModelConfig::preset(preset).unwrap();
            let fe = FrontendSpec::Token { vocab: 1024 };
            let head = HeadSpec::Linear { classes: 10 };
            let frozen = count_params(&cfg, TrainMode::Frozen, &fe, &head, 8);
            let lora = count_params(&cfg, TrainMode::Lora, &fe, &head, 8);
            let scratch = count_params(&cfg, TrainMode::Scratch, &fe, &head, 8);
            assert!(frozen.total_trainable < lora.total_trainable);
            assert!(lora.total_trainable < scratch.total_trainable);
            for ledger in [&frozen, &lora, &scratch] {
                let sum: usize = ledger.groups().iter().map(|(_, n)| n).sum();
                assert_eq!(sum, ledger.total_trainable, "ledger additivity");
            }
        }
    }

    #[test]
    fn small_backbone_matches_published_scale() {
        // GPT-2 small less the token embedding is ~85.8M parameters,
        // consistent with the published "87M" backbone size
        let cfg = ModelConfig::preset("small").unwrap();
        let n = backbone_param_count(&cfg);
        assert_eq!(n, 85_842_432);
    }

    #[test]
    fn merged_update_has_rank_at_most_r() {
        // singular values of ΔW beyond index r must vanish; checked via
        // Gram-matrix eigenvalues on a small instance
        let mut rng = Rng::new(7);
        let (d, rank) = (5, 2);
        let mut ad: LoraAdapter<f64> =
            init_adapter(d, d, rank, rank as f64, AdapterTarget::V, &mut rng).unwrap();
        ad.b = Matrix::gaussian(d, rank, 1.0, &mut rng);
        let zero = Matrix::zeros(d, d);
        let delta = merge_adapter(&zero, &ad).unwrap();
        // Gram = ΔWᵀ·ΔW has rank ≤ r, so trace of its square-free remainder
        // after removing top-r eigen directions ~ 0. A cheap equivalent:
        // every 3x3 minor determinant of ΔW must be ~0 when r = 2.
        let idx = [0usize, 1, 2, 3, 4];
        for &r0 in &idx[..3] {
            for &c0 in &idx[..3] {
                let rs = [r0, (r0 + 1) % d, (r0 + 2) % d];
                let cs = [c0, (c0 + 1) % d, (c0 + 2) % d];
                let m = |i: usize, j: usize| delta.at(rs[i], cs[j]);
                let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                    - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                    + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
                assert!(det.abs() < 1e-9, "3x3 minor {det} should vanish for rank 2");
            }
        }
    }
}
