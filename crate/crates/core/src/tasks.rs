//! Task registry: every classification task (real or synthetic) sits
//! behind the [`Task`] trait and is resolved by name at runtime, so the
//! CLI and trainer stay agnostic of modality and data source.

use std::path::PathBuf;

use crate::datasets::{
    self, make_synthetic, LabeledExample, SynthKind, TaskData, SYNTH_CLASSES, TOKENS_PER_SECOND,
    TOKEN_VOCAB,
};
use crate::error::{GraftError, Result};
use crate::frontends::{FrontendSpec, Payload};
use crate::heads::{HeadSpec, LossKind, MetricKind};

/// Where a task's examples come from.
#[derive(Debug, Clone, Default)]
pub struct DataSource {
    /// Directory holding dataset files (real datasets and WAV dirs).
    pub dir: Option<PathBuf>,
    /// Synthetic training-set size.
    pub synth_n: usize,
    /// Seed for synthetic generation.
    pub seed: u64,
}

impl DataSource {
    pub fn synthetic(n: usize, seed: u64) -> Self {
        DataSource {
            dir: None,
            synth_n: n,
            seed,
        }
    }

    fn require_dir(&self, task: &str) -> Result<&PathBuf> {
        self.dir.as_ref().ok_or_else(|| {
            GraftError::Config(format!("task {task:?} needs --data pointing at its files"))
        })
    }
}

/// One classification task: dataset access plus the front-end, head, loss
/// and metric it trains with.
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn classes(&self) -> usize;
    fn loss(&self) -> LossKind;
    fn metric(&self) -> MetricKind;
    fn frontend_spec(&self) -> FrontendSpec;
    fn head_spec(&self, d_model: usize) -> HeadSpec;
    fn load(&self, source: &DataSource) -> Result<TaskData>;
}

struct Cifar10;

impl Task for Cifar10 {
    fn name(&self) -> &'static str {
        "cifar10"
    }
    fn description(&self) -> &'static str {
        "CIFAR-10 binary batches, 32x32x3, 10 classes"
    }
    fn classes(&self) -> usize {
        10
    }
    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }
    fn metric(&self) -> MetricKind {
        MetricKind::Accuracy
    }
    fn frontend_spec(&self) -> FrontendSpec {
        FrontendSpec::Patch {
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
        }
    }
    // linear head: reproduces the published trainable-parameter figure
    fn head_spec(&self, _d_model: usize) -> HeadSpec {
        HeadSpec::Linear { classes: 10 }
    }
    fn load(&self, source: &DataSource) -> Result<TaskData> {
        datasets::load_cifar10(source.require_dir(self.name())?)
    }
}

struct FashionMnist;

impl Task for FashionMnist {
    fn name(&self) -> &'static str {
        "fashion-mnist"
    }
    fn description(&self) -> &'static str {
        "Fashion-MNIST IDX files, 28x28 grayscale zero-padded to 32x32"
    }
    fn classes(&self) -> usize {
        10
    }
    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }
    fn metric(&self) -> MetricKind {
        MetricKind::Accuracy
    }
    fn frontend_spec(&self) -> FrontendSpec {
        FrontendSpec::Patch {
            height: 32,
            width: 32,
            channels: 1,
            patch: 4,
        }
    }
    fn head_spec(&self, _d_model: usize) -> HeadSpec {
        HeadSpec::Linear { classes: 10 }
    }
    fn load(&self, source: &DataSource) -> Result<TaskData> {
        let mut data = datasets::load_fashion_mnist(source.require_dir(self.name())?)?;
        let pad = |examples: &mut Vec<LabeledExample>| {
            for ex in examples.iter_mut() {
                if let Payload::Image(img) = &ex.payload {
                    ex.payload = Payload::Image(img.zero_pad_to(32, 32));
                }
            }
        };
        pad(&mut data.train);
        pad(&mut data.test);
        Ok(data)
    }
}

struct GtzanTokens;

impl Task for GtzanTokens {
    fn name(&self) -> &'static str {
        "gtzan-tokens"
    }
    fn description(&self) -> &'static str {
        "1 s coarse acoustic-token sequences (75 ids, vocab 1024), 10 genres"
    }
    fn classes(&self) -> usize {
        10
    }
    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }
    fn metric(&self) -> MetricKind {
        MetricKind::Accuracy
    }
    fn frontend_spec(&self) -> FrontendSpec {
        FrontendSpec::Token {
            vocab: TOKEN_VOCAB as usize,
        }
    }
    fn head_spec(&self, d_model: usize) -> HeadSpec {
        HeadSpec::Mlp {
            hidden: d_model,
            classes: 10,
        }
    }
    fn load(&self, source: &DataSource) -> Result<TaskData> {
        let dir = source.require_dir(self.name())?;
        Ok(TaskData {
            train: datasets::load_token_file(
                &dir.join("train.txt"),
                TOKENS_PER_SECOND,
                TOKEN_VOCAB,
                10,
            )?,
            test: datasets::load_token_file(
                &dir.join("test.txt"),
                TOKENS_PER_SECOND,
                TOKEN_VOCAB,
                10,
            )?,
            classes: 10,
        })
    }
}

/// User-supplied directory of 1 s, 16 kHz mono PCM WAV files with
/// `train_labels.csv` / `test_labels.csv` sidecars; multi-label Huber
/// training with top-5 any-hit evaluation (the FSD-style pipeline).
struct WaveDir {
    classes: usize,
}

impl Task for WaveDir {
    fn name(&self) -> &'static str {
        "wave-dir"
    }
    fn description(&self) -> &'static str {
        "WAV directory with multi-hot sidecar labels; Huber loss, top-5 any-hit"
    }
    fn classes(&self) -> usize {
        self.classes
    }
    fn loss(&self) -> LossKind {
        LossKind::Huber
    }
    fn metric(&self) -> MetricKind {
        MetricKind::Top5AnyHit
    }
    fn frontend_spec(&self) -> FrontendSpec {
        FrontendSpec::Wave
    }
    fn head_spec(&self, _d_model: usize) -> HeadSpec {
        HeadSpec::Linear {
            classes: self.classes,
        }
    }
    fn load(&self, source: &DataSource) -> Result<TaskData> {
        let dir = source.require_dir(self.name())?;
        Ok(TaskData {
            train: datasets::load_wav_dataset(dir, &dir.join("train_labels.csv"), self.classes)?,
            test: datasets::load_wav_dataset(dir, &dir.join("test_labels.csv"), self.classes)?,
            classes: self.classes,
        })
    }
}

/// Seeded synthetic tasks; the test split uses an independent stream.
struct Synth {
    kind: SynthKind,
}

impl Task for Synth {
    fn name(&self) -> &'static str {
        match self.kind {
            SynthKind::QuadrantImages => "quadrant-images",
            SynthKind::ToneWaves => "tone-waves",
            SynthKind::MotifTokens => "motif-tokens",
        }
    }
    fn description(&self) -> &'static str {
        match self.kind {
            SynthKind::QuadrantImages => "synthetic 32x32x3 images; class = brightest quadrant",
            SynthKind::ToneWaves => "synthetic 0.1 s sinusoids; class = frequency band",
            SynthKind::MotifTokens => "synthetic token sequences; class = planted motif",
        }
    }
    fn classes(&self) -> usize {
        SYNTH_CLASSES
    }
    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }
    fn metric(&self) -> MetricKind {
        MetricKind::Accuracy
    }
    fn frontend_spec(&self) -> FrontendSpec {
        match self.kind {
            // patch 8: each token sits wholly inside one quadrant, which
            // keeps the task learnable for the 16-wide tiny preset
            SynthKind::QuadrantImages => FrontendSpec::Patch {
                height: 32,
                width: 32,
                channels: 3,
                patch: 8,
            },
            SynthKind::ToneWaves => FrontendSpec::Wave,
            SynthKind::MotifTokens => FrontendSpec::Token {
                vocab: TOKEN_VOCAB as usize,
            },
        }
    }
    fn head_spec(&self, d_model: usize) -> HeadSpec {
        HeadSpec::Mlp {
            hidden: d_model,
            classes: SYNTH_CLASSES,
        }
    }
    fn load(&self, source: &DataSource) -> Result<TaskData> {
        let n = if source.synth_n == 0 { 256 } else { source.synth_n };
        let test_n = (n / 4).max(SYNTH_CLASSES);
        Ok(TaskData {
            train: make_synthetic(self.kind, n, source.seed),
            // independent stream so train and test never share examples
            test: make_synthetic(self.kind, test_n, source.seed ^ 0x7E57_DA7A),
            classes: SYNTH_CLASSES,
        })
    }
}

static CIFAR10: Cifar10 = Cifar10;
static FASHION: FashionMnist = FashionMnist;
static GTZAN: GtzanTokens = GtzanTokens;
static QUADRANT: Synth = Synth {
    kind: SynthKind::QuadrantImages,
};
static TONE: Synth = Synth {
    kind: SynthKind::ToneWaves,
};
static MOTIF: Synth = Synth {
    kind: SynthKind::MotifTokens,
};

/// Every statically known task. `wave-dir` is constructed via
/// [`resolve_task`] because its class count comes from the caller.
pub fn registry() -> Vec<&'static dyn Task> {
    vec![&CIFAR10, &FASHION, &GTZAN, &QUADRANT, &TONE, &MOTIF]
}

pub fn task_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = registry().iter().map(|t| t.name()).collect();
    names.push("wave-dir");
    names
}

/// Looks a task up by name. `classes` applies only to `wave-dir` (default
/// 4 at desk scale); for fixed tasks a conflicting override is an error.
pub fn resolve_task(name: &str, classes: Option<usize>) -> Result<Box<dyn Task>> {
    if name == "wave-dir" {
        let classes = classes.unwrap_or(4);
        if classes < 2 {
            return Err(GraftError::Config("wave-dir needs at least 2 classes".into()));
        }
        return Ok(Box::new(WaveDir { classes }));
    }
    for task in registry() {
        if task.name() == name {
            if let Some(k) = classes {
                if k != task.classes() {
                    return Err(GraftError::Config(format!(
                        "task {name:?} has a fixed class count of {}",
                        task.classes()
                    )));
                }
            }
            // re-box the static reference behind the uniform return type
            return Ok(Box::new(StaticTask(task)));
        }
    }
    Err(GraftError::Config(format!(
        "unknown task {name:?}; known tasks: {}",
        task_names().join(", ")
    )))
}

struct StaticTask(&'static dyn Task);

impl Task for StaticTask {
    fn name(&self) -> &'static str {
        self.0.name()
    }
    fn description(&self) -> &'static str {
        self.0.description()
    }
    fn classes(&self) -> usize {
        self.0.classes()
    }
    fn loss(&self) -> LossKind {
        self.0.loss()
    }
    fn metric(&self) -> MetricKind {
        self.0.metric()
    }
    fn frontend_spec(&self) -> FrontendSpec {
        self.0.frontend_spec()
    }
    fn head_spec(&self, d_model: usize) -> HeadSpec {
        self.0.head_spec(d_model)
    }
    fn load(&self, source: &DataSource) -> Result<TaskData> {
        self.0.load(source)
    }
}
