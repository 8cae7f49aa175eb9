//! Assembled classifier: modality front-end → causal transformer backbone
//! (optionally LoRA-adapted) → last-token MLP head, with the end-to-end
//! backward pass and the parameter-group bookkeeping the trainer needs.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::frontends::{Frontend, FrontendCache, FrontendSpec, Payload};
use crate::heads::{ClassifierHead, HeadCache, HeadSpec};
use crate::lora::{AdapterSet, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::matrix::Matrix;
use crate::num::{Real, Rng};
use crate::transformer::{
    backward_backbone, forward_backbone_cached, BackboneCache, BackboneWeights, ModelConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Backbone and positional rows fixed; front-end and head train.
    Frozen,
    /// Frozen backbone plus trainable LoRA adapters on Q/K/V/O.
    Lora,
    /// Everything trains from random initialization.
    Scratch,
}

impl TrainMode {
    pub fn label(&self) -> &'static str {
        match self {
            TrainMode::Frozen => "frozen",
            TrainMode::Lora => "lora",
            TrainMode::Scratch => "scratch",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(TrainMode::Frozen),
            "lora" => Ok(TrainMode::Lora),
            "scratch" => Ok(TrainMode::Scratch),
            other => Err(GraftError::Config(format!(
                "unknown mode {other:?} (expected frozen|lora|scratch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Adapters,
    Frontend,
    Head,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Frontend => "frontend",
            ParamGroup::Head => "head",
        }
    }

    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("backbone.") {
            ParamGroup::Backbone
        } else if name.starts_with("adapters.") {
            ParamGroup::Adapters
        } else if name.starts_with("frontend.") {
            ParamGroup::Frontend
        } else {
            ParamGroup::Head
        }
    }
}

/// Which parameter groups receive gradients / optimizer updates. Gradients
/// always flow *through* every group; this only gates accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    pub backbone: bool,
    pub adapters: bool,
    pub frontend: bool,
    pub head: bool,
}

impl GradScope {
    pub fn for_mode(mode: TrainMode) -> GradScope {
        match mode {
            TrainMode::Frozen => GradScope {
                backbone: false,
                adapters: false,
                frontend: true,
                head: true,
            },
            TrainMode::Lora => GradScope {
                backbone: false,
                adapters: true,
                frontend: true,
                head: true,
            },
            // scratch trains every parameter present, adapters included
            TrainMode::Scratch => GradScope {
                backbone: true,
                adapters: true,
                frontend: true,
                head: true,
            },
        }
    }

    pub fn all() -> GradScope {
        GradScope {
            backbone: true,
            adapters: true,
            frontend: true,
            head: true,
        }
    }

    pub fn includes(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Adapters => self.adapters,
            ParamGroup::Frontend => self.frontend,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel<T> {
    pub config: ModelConfig,
    pub frontend: Frontend<T>,
    pub backbone: BackboneWeights<T>,
    pub adapters: Option<AdapterSet<T>>,
    pub head: ClassifierHead<T>,
}

pub struct ForwardCache<T> {
    frontend: FrontendCache<T>,
    backbone: BackboneCache<T>,
    /// Head input: the last backbone output row.
    readout: Vec<T>,
    head: HeadCache<T>,
    seq_len: usize,
}

impl<T: Real> ClassifierModel<T> {
    /// Builds a model for a mode. Frozen and lora modes require imported
    /// (or otherwise provided) backbone weights; scratch ignores them and
    /// initializes randomly from the seed.
    pub fn assemble(
        config: ModelConfig,
        frontend_spec: &FrontendSpec,
        head_spec: &HeadSpec,
        mode: TrainMode,
        backbone: Option<BackboneWeights<T>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = match (mode, backbone) {
            (TrainMode::Scratch, _) => {
                let mut rng = Rng::from_seed_stream(seed, 0);
                BackboneWeights::random(&config, &mut rng)
            }
            (_, Some(w)) => {
                w.validate_shapes(&config)?;
                w
            }
            (mode, None) => {
                return Err(GraftError::Config(format!(
                    "{} mode requires backbone weights",
                    mode.label()
                )))
            }
        };
        let mut frontend_rng = Rng::from_seed_stream(seed, 1);
        let frontend = Frontend::build(frontend_spec, config.d_model, &mut frontend_rng)?;
        let mut head_rng = Rng::from_seed_stream(seed, 2);
        let head = ClassifierHead::build(head_spec, config.d_model, &mut head_rng)?;
        let adapters = match mode {
            TrainMode::Lora => {
                let mut adapter_rng = Rng::from_seed_stream(seed, 3);
                Some(AdapterSet::init(
                    &config,
                    DEFAULT_RANK,
                    DEFAULT_ALPHA,
                    &mut adapter_rng,
                )?)
            }
            _ => None,
        };
        Ok(ClassifierModel {
            config,
            frontend,
            backbone,
            adapters,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Inference: logits for one payload.
    pub fn forward_logits(&self, payload: &Payload) -> Result<Vec<T>> {
        let (logits, _) = self.forward_train(payload)?;
        Ok(logits)
    }

    /// Forward pass retaining caches for the backward pass.
    pub fn forward_train(&self, payload: &Payload) -> Result<(Vec<T>, ForwardCache<T>)> {
        let (x_e, frontend_cache) = self
            .frontend
            .forward(payload, &self.backbone.pos_embedding)?;
        x_e.ensure_finite("front-end output")?;
        let (hidden, backbone_cache) = forward_backbone_cached(
            &x_e,
            &self.backbone,
            self.adapters.as_ref(),
            &self.config,
        )?;
        let seq_len = hidden.seq_len();
        let readout = crate::heads::readout_last(&hidden)?.to_vec();
        let (logits, head_cache) = self.head.classify(&readout)?;
        for (i, l) in logits.iter().enumerate() {
            if !l.is_finite() {
                return Err(GraftError::NonFinite(format!("logit {i}")));
            }
        }
        Ok((
            logits,
            ForwardCache {
                frontend: frontend_cache,
                backbone: backbone_cache,
                readout,
                head: head_cache,
                seq_len,
            },
        ))
    }

    /// Accumulates parameter gradients for one example into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_logits: &[T],
        scope: &GradScope,
        grads: &mut Gradients<T>,
    ) {
        let d_readout = self
            .head
            .backward(&cache.readout, &cache.head, d_logits, &mut grads.head);
        // only the last sequence position feeds the head
        let mut d_hidden = Matrix::zeros(cache.seq_len, self.config.d_model);
        for (dst, &src) in d_hidden
            .row_mut(cache.seq_len - 1)
            .iter_mut()
            .zip(d_readout.iter())
        {
            *dst = src;
        }
        let d_xe = backward_backbone(
            &d_hidden,
            &self.backbone,
            self.adapters.as_ref(),
            &self.config,
            &cache.backbone,
            if scope.backbone {
                grads.backbone.as_mut()
            } else {
                None
            },
            if scope.adapters {
                grads.adapters.as_mut()
            } else {
                None
            },
        );
        if scope.frontend {
            self.frontend
                .backward(&cache.frontend, &d_xe, &mut grads.frontend);
        }
        // positional rows: X_e adds pos[k] directly, so d_pos = d_xe rows.
        // They live in the backbone group and train only in scratch mode.
        if scope.backbone {
            if let Some(gb) = grads.backbone.as_mut() {
                for k in 0..d_xe.rows() {
                    for (g, &d) in gb
                        .pos_embedding
                        .row_mut(k)
                        .iter_mut()
                        .zip(d_xe.row(k).iter())
                    {
                        *g += d;
                    }
                }
            }
        }
    }

    /// Visits every parameter tensor as (name, matrix); names are stable
    /// and group membership is recoverable via [`ParamGroup::of`].
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.backbone.visit(f);
        if let Some(ad) = &self.adapters {
            ad.visit(f);
        }
        self.frontend.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.backbone.visit_mut(f);
        if let Some(ad) = &mut self.adapters {
            ad.visit_mut(f);
        }
        self.frontend.visit_mut(f);
        self.head.visit_mut(f);
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        let mut n = 0;
        self.visit(&mut |name, m| {
            if ParamGroup::of(&name) == group {
                n += m.len();
            }
        });
        n
    }

    pub fn total_param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    pub fn cast<U: Real>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            config: self.config.clone(),
            frontend: self.frontend.cast(),
            backbone: self.backbone.cast(),
            adapters: self.adapters.as_ref().map(|a| a.cast()),
            head: self.head.cast(),
        }
    }
}

/// Same-shaped gradient containers per parameter group. Backbone and
/// adapter slots exist only when the scope can reach them.
pub struct Gradients<T> {
    pub backbone: Option<BackboneWeights<T>>,
    pub adapters: Option<AdapterSet<T>>,
    pub frontend: Frontend<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_for(model: &ClassifierModel<T>, scope: &GradScope) -> Gradients<T> {
        Gradients {
            backbone: scope
                .backbone
                .then(|| BackboneWeights::zeros(&model.config)),
            adapters: if scope.adapters {
                model.adapters.as_ref().map(|a| a.zeros_like())
            } else {
                None
            },
            frontend: model.frontend.zeros_like(),
            head: model.head.zeros_like(),
        }
    }

    pub fn reset(&mut self) {
        self.visit_mut(&mut |_, m| m.fill(T::ZERO));
    }

    pub fn scale(&mut self, factor: T) {
        self.visit_mut(&mut |_, m| m.scale(factor));
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        if let Some(b) = &self.backbone {
            b.visit(f);
        }
        if let Some(a) = &self.adapters {
            a.visit(f);
        }
        self.frontend.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        if let Some(b) = &mut self.backbone {
            b.visit_mut(f);
        }
        if let Some(a) = &mut self.adapters {
            a.visit_mut(f);
        }
        self.frontend.visit_mut(f);
        self.head.visit_mut(f);
    }

    /// First non-finite gradient tensor, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit(&mut |name, m| {
            if bad.is_none() && !m.all_finite() {
                bad = Some(name);
            }
        });
        bad
    }
}
