//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{json, Value};

use graft_core::archive::{
    export_gpt2, import_gpt2, load_experiment_from, save_experiment_to, ExperimentMeta,
    TensorArchive, CHECKPOINT_VERSION,
};
use graft_core::datasets::{
    dataset_digest, make_synthetic, write_cifar_batch, write_token_file, write_wav_mono16,
    SynthKind, TaskData,
};
use graft_core::error::{GraftError, Result};
use graft_core::frontends::Payload;
use graft_core::lora::{adapter_param_count, count_params, paper_reported_params, AdapterSet};
use graft_core::model::{ClassifierModel, TrainMode};
use graft_core::num::Rng;
use graft_core::tasks::{resolve_task, DataSource, Task};
use graft_core::trainer::{
    evaluate, grad_check, train_loop, AdamState, SweepRow, TrainConfig,
};
use graft_core::transformer::{BackboneWeights, ModelConfig};

use crate::report::{file_digest, loss_svg, thousands};
use crate::{resolve_seed, SweepArgs, TrainArgs};

// ---------------------------------------------------------------------------
// import
// ---------------------------------------------------------------------------

pub fn import(weights: &Path, preset: &str, out: &Path) -> Result<()> {
    let config = ModelConfig::preset(preset)?;
    let backbone = read_backbone(weights, &config)?;
    let bytes = export_gpt2(&backbone, &config)?;
    fs::write(out, bytes)?;
    println!(
        "imported {} -> {}",
        weights.display(),
        out.display()
    );
    println!(
        "preset {preset}: {} layers, d_model {}, backbone parameters {}",
        config.n_layers,
        config.d_model,
        thousands(backbone.param_count())
    );
    Ok(())
}

/// Reads a backbone from a GPT-2-named archive or from a previously saved
/// experiment checkpoint (detected via its `__meta__` header entry).
fn read_backbone(path: &Path, config: &ModelConfig) -> Result<BackboneWeights<f32>> {
    let archive = TensorArchive::from_file(path)?;
    if archive.meta.is_some() {
        let (model, _, meta) = load_experiment_from(path)?;
        if meta.config != *config {
            return Err(GraftError::Config(format!(
                "checkpoint was trained with preset {:?}, not {:?}",
                meta.config.preset_name, config.preset_name
            )));
        }
        return Ok(model.backbone);
    }
    import_gpt2(&archive, config)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn set_if<T: serde::Serialize>(
    map: &mut serde_json::Map<String, Value>,
    key: &str,
    value: &Option<T>,
) {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v).unwrap());
    }
}

/// Config file < command-line flags; env seed fills last.
fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut map: serde_json::Map<String, Value> = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| GraftError::Config(format!("config file {}: {e}", path.display())))?
        }
        None => serde_json::Map::new(),
    };
    set_if(&mut map, "task", &args.task);
    set_if(&mut map, "mode", &args.mode);
    set_if(&mut map, "preset", &args.preset);
    set_if(&mut map, "max_steps", &args.steps);
    set_if(&mut map, "batch_size", &args.batch);
    set_if(&mut map, "learning_rate", &args.lr);
    set_if(&mut map, "seed", &args.seed);
    set_if(&mut map, "eval_every", &args.eval_every);
    set_if(&mut map, "checkpoint_every", &args.checkpoint_every);
    set_if(&mut map, "synth_n", &args.synth_n);
    set_if(&mut map, "eval_split", &args.eval_split);
    set_if(&mut map, "stop_at_metric", &args.stop_at);
    if !map.contains_key("seed") {
        map.insert("seed".into(), json!(resolve_seed(None)));
    }
    for key in ["task", "mode", "preset"] {
        if !map.contains_key(key) {
            return Err(GraftError::Config(format!(
                "missing {key:?}: pass --{key} or set it in the config file"
            )));
        }
    }
    let config: TrainConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| GraftError::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn build_model(
    task: &dyn Task,
    config: &TrainConfig,
    backbone: Option<BackboneWeights<f32>>,
) -> Result<ClassifierModel<f32>> {
    let model_config = ModelConfig::preset(&config.preset)?;
    let mut model = ClassifierModel::assemble(
        model_config.clone(),
        &task.frontend_spec(),
        &task.head_spec(model_config.d_model),
        config.mode,
        backbone,
        config.seed,
    )?;
    if config.mode == TrainMode::Lora
        && (config.adapter_rank != graft_core::lora::DEFAULT_RANK
            || config.adapter_alpha != graft_core::lora::DEFAULT_ALPHA)
    {
        let mut rng = Rng::from_seed_stream(config.seed, 3);
        model.adapters = Some(AdapterSet::init(
            &model_config,
            config.adapter_rank,
            config.adapter_alpha,
            &mut rng,
        )?);
    }
    Ok(model)
}

fn checkpoint_meta(
    config: &TrainConfig,
    model: &ClassifierModel<f32>,
    task: &dyn Task,
    data_dir: Option<&Path>,
    step: u64,
) -> ExperimentMeta {
    ExperimentMeta {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        frontend: model.frontend.spec(),
        head: model.head.spec(),
        mode: config.mode,
        adapter_rank: config.adapter_rank,
        adapter_alpha: config.adapter_alpha,
        step,
        extra: json!({
            "task": task.name(),
            "classes": task.classes(),
            "train_config": config,
            "data_dir": data_dir.map(|p| p.display().to_string()),
        }),
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = resolve_train_config(args)?;
    let task = resolve_task(&config.task, args.classes)?;
    let source = DataSource {
        dir: args.data.clone(),
        synth_n: config.synth_n,
        seed: config.seed,
    };
    let data = task.load(&source)?;

    // resume beats fresh assembly; otherwise frozen/lora need --weights
    let (mut model, mut state, start_step) = match &args.resume {
        Some(path) => {
            let (model, moments, meta) = load_experiment_from(path)?;
            if meta.extra.get("task").and_then(Value::as_str) != Some(task.name()) {
                return Err(GraftError::Config(format!(
                    "checkpoint {} was not trained on task {:?}",
                    path.display(),
                    task.name()
                )));
            }
            let step = meta.step;
            (model, AdamState::resume(moments, step), step)
        }
        None => {
            let backbone = match config.mode {
                TrainMode::Scratch => None,
                _ => {
                    let weights = args.weights.as_ref().ok_or_else(|| {
                        GraftError::Config(format!(
                            "{} mode requires --weights",
                            config.mode.label()
                        ))
                    })?;
                    Some(read_backbone(weights, &ModelConfig::preset(&config.preset)?)?)
                }
            };
            (build_model(task.as_ref(), &config, backbone)?, AdamState::default(), 0)
        }
    };

    fs::create_dir_all(&args.out)?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "task": task.name(),
        "classes": task.classes(),
        "seed": config.seed,
        "start_step": start_step,
        "inputs": {
            "weights": args.weights.as_ref().map(|p| file_digest(p)).transpose()?,
            "config_file": args.config.as_ref().map(|p| file_digest(p)).transpose()?,
            "resume": args.resume.as_ref().map(|p| file_digest(p)).transpose()?,
            "train_data": dataset_digest(&data.train),
            "test_data": dataset_digest(&data.test),
        },
        "outputs": {
            "metrics": "metrics.csv",
            "summary": "summary.json",
            "loss_chart": "loss.svg",
            "checkpoint": "checkpoint_final.bin",
        },
    });
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;

    let out_dir = args.out.clone();
    let task_ref = task.as_ref();
    let config_for_sink = config.clone();
    let data_dir = args.data.clone();
    let mut sink = move |step: u64, model: &ClassifierModel<f32>, state: &AdamState| {
        let meta = checkpoint_meta(&config_for_sink, model, task_ref, data_dir.as_deref(), step);
        save_experiment_to(
            &out_dir.join(format!("checkpoint_{step}.bin")),
            model,
            &state.moments,
            &meta,
        )
    };
    let use_sink = config.checkpoint_every > 0;
    let outcome = train_loop(
        &mut model,
        &data,
        task.loss(),
        task.metric(),
        &config,
        &mut state,
        start_step,
        use_sink.then_some(&mut sink as _),
    )?;

    let final_meta = checkpoint_meta(
        &config,
        &model,
        task.as_ref(),
        args.data.as_deref(),
        outcome.steps_run,
    );
    save_experiment_to(
        &args.out.join("checkpoint_final.bin"),
        &model,
        &state.moments,
        &final_meta,
    )?;
    fs::write(args.out.join("metrics.csv"), outcome.metrics.to_csv())?;
    fs::write(
        args.out.join("loss.svg"),
        loss_svg(&outcome.metrics),
    )?;
    let summary = json!({
        "task": task.name(),
        "mode": config.mode.label(),
        "preset": config.preset,
        "steps_run": outcome.steps_run,
        "final_loss": outcome.metrics.final_loss(),
        "final_metric": outcome.final_metric,
        "metric_kind": task.metric().label(),
        "ledger": outcome.ledger,
        "metrics_digest": outcome.metrics.digest(),
    });
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!(
        "{} on {} ({} preset, {} mode): {} steps, final loss {:.4}, {} {:.4}",
        env!("CARGO_PKG_NAME"),
        task.name(),
        config.preset,
        config.mode.label(),
        outcome.steps_run,
        outcome.metrics.final_loss().unwrap_or(f64::NAN),
        task.metric().label(),
        outcome.final_metric
    );
    println!("trainable parameters: {}", thousands(outcome.ledger.total_trainable));
    println!("artifacts in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval(
    checkpoint: &Path,
    data: Option<&Path>,
    synth_n: Option<usize>,
    seed: Option<u64>,
    split: &str,
) -> Result<()> {
    let (model, _, meta) = load_experiment_from(checkpoint)?;
    let task_name = meta
        .extra
        .get("task")
        .and_then(Value::as_str)
        .ok_or_else(|| GraftError::Config("checkpoint lacks a task name".into()))?;
    let classes = meta.extra.get("classes").and_then(Value::as_u64);
    let task = resolve_task(task_name, classes.map(|c| c as usize))?;
    let stored_config: Option<TrainConfig> = meta
        .extra
        .get("train_config")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let source = DataSource {
        dir: data.map(Path::to_path_buf).or_else(|| {
            meta.extra
                .get("data_dir")
                .and_then(Value::as_str)
                .map(PathBuf::from)
        }),
        synth_n: synth_n
            .or(stored_config.as_ref().map(|c| c.synth_n))
            .unwrap_or(256),
        seed: seed
            .or(stored_config.as_ref().map(|c| c.seed))
            .unwrap_or(0),
    };
    let task_data = task.load(&source)?;
    let examples = match split {
        "train" => &task_data.train,
        "test" => &task_data.test,
        other => {
            return Err(GraftError::Config(format!(
                "unknown split {other:?} (train|test)"
            )))
        }
    };
    let metric = evaluate(&model, examples, task.metric())?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "task": task.name(),
            "split": split,
            "examples": examples.len(),
            "metric_kind": task.metric().label(),
            "metric": metric,
            "checkpoint_step": meta.step,
        }))
        .unwrap()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

const GRADCHECK_BOUND: f64 = 1e-3;

pub fn gradcheck(
    preset: &str,
    modality: &str,
    mode: &str,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<()> {
    let config = ModelConfig::preset(preset)?;
    let modalities: Vec<&str> = match modality {
        "all" => vec!["image", "wave", "token"],
        one @ ("image" | "wave" | "token") => vec![one],
        other => {
            return Err(GraftError::Config(format!(
                "unknown modality {other:?} (image|wave|token|all)"
            )))
        }
    };
    let modes: Vec<TrainMode> = match mode {
        // scratch + lora together cover every parameter group
        "all" => vec![TrainMode::Scratch, TrainMode::Lora],
        one => vec![one.parse()?],
    };
    let samples = samples.max(5);

    let mut all_ok = true;
    println!("finite-difference gradient check (eps {eps}, {samples} scalars/group, f64)");
    for m in &modalities {
        let (task_name, kind) = match *m {
            "image" => ("quadrant-images", SynthKind::QuadrantImages),
            "wave" => ("tone-waves", SynthKind::ToneWaves),
            _ => ("motif-tokens", SynthKind::MotifTokens),
        };
        let task = resolve_task(task_name, None)?;
        let mut example = make_synthetic(kind, 1, seed ^ 0xE7).remove(0);
        if let Payload::Wave(w) = &example.payload {
            // two patches are plenty for the check and keep FD probing fast
            example.payload = Payload::Wave(w[..800.min(w.len())].to_vec());
        }
        for train_mode in &modes {
            let backbone = match train_mode {
                TrainMode::Scratch => None,
                _ => Some({
                    let mut rng = Rng::from_seed_stream(seed, 0xF0);
                    BackboneWeights::<f64>::random(&config, &mut rng)
                }),
            };
            let model = ClassifierModel::<f64>::assemble(
                config.clone(),
                &task.frontend_spec(),
                &task.head_spec(config.d_model),
                *train_mode,
                backbone,
                seed,
            )?;
            let report = grad_check(
                &model,
                &example,
                task.loss(),
                *train_mode,
                eps,
                samples,
                seed,
            )?;
            for (group, err) in &report.groups {
                match err {
                    Some(e) => {
                        let ok = *e <= GRADCHECK_BOUND;
                        all_ok &= ok;
                        println!(
                            "  {m:<6} {:<8} {group:<9} max rel err {e:.3e}  {}",
                            train_mode.label(),
                            if ok { "ok" } else { "FAIL" }
                        );
                    }
                    None => println!(
                        "  {m:<6} {:<8} {group:<9} excluded (frozen or absent, gradient not materialized)",
                        train_mode.label()
                    ),
                }
            }
        }
    }
    if all_ok {
        println!("all groups within {GRADCHECK_BOUND:.0e}");
        Ok(())
    } else {
        Err(GraftError::NonFinite(format!(
            "gradient check exceeded {GRADCHECK_BOUND:.0e}"
        )))
    }
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

pub fn params(
    task_name: &str,
    mode: &str,
    preset: &str,
    classes: Option<usize>,
    rank: usize,
) -> Result<()> {
    let mode: TrainMode = mode.parse()?;
    let task = resolve_task(task_name, classes)?;
    let config = ModelConfig::preset(preset)?;
    let ledger = count_params(
        &config,
        mode,
        &task.frontend_spec(),
        &task.head_spec(config.d_model),
        rank,
    );
    println!(
        "task {} | preset {preset} | mode {} | adapter rank {rank}",
        task.name(),
        mode.label()
    );
    for (group, count) in ledger.groups() {
        println!("  {group:<9} trainable: {:>12}", thousands(count));
    }
    print!("  total trainable: {}", thousands(ledger.total_trainable));
    if mode == TrainMode::Lora {
        if let Some(paper) = paper_reported_params(task.name(), preset) {
            print!(" (paper reports {paper})");
        }
    }
    println!();
    println!("  total parameters: {}", thousands(ledger.total_params));
    if mode == TrainMode::Lora {
        println!(
            "  adapter breakdown: 4 projections x {} layers x 2·r·d = {}",
            config.n_layers,
            thousands(adapter_param_count(&config, rank))
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let presets: Vec<String> = args
        .presets
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if presets.is_empty() {
        return Err(GraftError::Config("no presets given".into()));
    }
    let mode: TrainMode = args.mode.parse()?;
    let seed = resolve_seed(args.seed);
    let task = resolve_task(&args.task, args.classes)?;
    let source = DataSource {
        dir: args.data.clone(),
        synth_n: args.synth_n.unwrap_or(256),
        seed,
    };
    let data = task.load(&source)?;

    let jobs: Vec<(usize, String)> = presets.iter().cloned().enumerate().collect();
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<std::result::Result<SweepRow, String>>>> =
        Mutex::new(vec![None; presets.len()]);
    let workers = args.workers.clamp(1, presets.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = {
                    let mut idx = next.lock().unwrap();
                    if *idx >= jobs.len() {
                        break;
                    }
                    let job = jobs[*idx].clone();
                    *idx += 1;
                    job
                };
                let (slot, preset) = job;
                let outcome = sweep_one(args, &preset, mode, seed, task.as_ref(), &data)
                    .map_err(|e| format!("{e}"));
                results.lock().unwrap()[slot] = Some(outcome);
            });
        }
    });

    let mut rows = Vec::with_capacity(presets.len());
    for (preset, slot) in presets.iter().zip(results.into_inner().unwrap()) {
        match slot.expect("every job ran") {
            Ok(row) => rows.push(row),
            Err(e) => {
                return Err(GraftError::Config(format!(
                    "sweep run for preset {preset:?} failed: {e}"
                )))
            }
        }
    }

    fs::create_dir_all(&args.out)?;
    let csv = graft_core::trainer::sweep_csv(&rows);
    fs::write(args.out.join("sweep.csv"), &csv)?;
    let table = graft_core::trainer::sweep_table(&rows, args.threshold);
    fs::write(args.out.join("sweep.txt"), &table)?;
    print!("{table}");
    println!("rows written to {}", args.out.join("sweep.csv").display());
    Ok(())
}

fn sweep_one(
    args: &SweepArgs,
    preset: &str,
    mode: TrainMode,
    seed: u64,
    task: &dyn Task,
    data: &TaskData,
) -> Result<SweepRow> {
    let mut config = TrainConfig::new(task.name(), mode, preset);
    config.seed = seed;
    config.max_steps = args.steps.unwrap_or(300);
    config.batch_size = args.batch.unwrap_or(16);
    config.learning_rate = args.lr.unwrap_or(3e-3);
    config.eval_every = args.eval_every.unwrap_or(25);
    config.synth_n = args.synth_n.unwrap_or(256);
    let backbone = match mode {
        TrainMode::Scratch => None,
        _ => {
            let dir = args.weights_dir.as_ref().ok_or_else(|| {
                GraftError::Config(format!(
                    "{} sweep requires --weights-dir with <preset>.weights files",
                    mode.label()
                ))
            })?;
            Some(read_backbone(
                &dir.join(format!("{preset}.weights")),
                &ModelConfig::preset(preset)?,
            )?)
        }
    };
    let mut model = build_model(task, &config, backbone)?;
    let mut state = AdamState::default();
    let outcome = train_loop(
        &mut model,
        data,
        task.loss(),
        task.metric(),
        &config,
        &mut state,
        0,
        None,
    )?;
    Ok(SweepRow {
        preset: preset.to_string(),
        total_params: outcome.ledger.total_params,
        trainable_params: outcome.ledger.total_trainable,
        final_metric: outcome.final_metric,
        steps_to_threshold: outcome.metrics.steps_to_threshold(args.threshold),
    })
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn synth(kind: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let kind: SynthKind = kind.parse()?;
    let examples = make_synthetic(kind, n, seed);
    fs::create_dir_all(out)?;
    match kind {
        SynthKind::QuadrantImages => {
            let path = out.join("quadrant_batch.bin");
            write_cifar_batch(&path, &examples)?;
            println!("wrote {} ({} records)", path.display(), examples.len());
        }
        SynthKind::ToneWaves => {
            let mut labels = String::new();
            for (i, ex) in examples.iter().enumerate() {
                let Payload::Wave(w) = &ex.payload else { unreachable!() };
                let name = format!("wave_{i:04}.wav");
                write_wav_mono16(&out.join(&name), w)?;
                let graft_core::heads::LabelTarget::Class(c) = &ex.target else {
                    unreachable!()
                };
                labels.push_str(&format!("{name},{c}\n"));
            }
            fs::write(out.join("labels.csv"), labels)?;
            println!(
                "wrote {} wav files + labels.csv to {}",
                examples.len(),
                out.display()
            );
        }
        SynthKind::MotifTokens => {
            let path = out.join("tokens.txt");
            write_token_file(&path, &examples)?;
            println!("wrote {} ({} sequences)", path.display(), examples.len());
        }
    }
    println!("digest {}", dataset_digest(&examples));
    Ok(())
}

