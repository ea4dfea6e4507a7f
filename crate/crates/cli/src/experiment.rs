//! The continual training protocol: build streams, train step by step,
//! evaluate after every step, persist checkpoints and records, resume from
//! any step boundary, and drive ablations and reduced-supervision sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use panlab_core::analysis::{
    class_prototypes_from_data, future_confusion_profile, prototype_congruence,
    ConfusionProfile, CongruenceRecord,
};
use panlab_core::autodiff::Tensor;
use panlab_core::future_aware::{train_step, AuxState, TrainRecord, TrainStepConfig};
use panlab_core::io::{read_checkpoint, write_checkpoint, Checkpoint};
use panlab_core::metrics::{EvalAccumulator, MetricReport};
use panlab_core::model::{panoptic_inference, QueryModel};
use panlab_core::optim::AdamWState;
use panlab_core::panoptic::{ClassId, LabelSpace, PanopticMap};
use panlab_core::rng::{derive_seed, rng_for};
use panlab_core::scenes::{generate_dataset, SceneSample};
use panlab_core::stream::{
    assign_images, build_schedule, subsample_steps, ClassSchedule, StepDataset, StreamManifest,
    StreamMode,
};

use crate::config::{ExperimentConfig, Variant};
use crate::report;

pub const HOLDOUT_RULE: &str = "train/val/test are generated independently from \
dataset.seed via the derived seeds (train, 0), (val, 0), (test, 0); the held-out \
splits never enter any training pool";

/// Everything persisted about one completed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub val: MetricReport,
    pub test: MetricReport,
    pub confusion_val: Option<ConfusionProfile>,
    pub congruence: Option<CongruenceRecord>,
    pub classifier_congruence: Option<CongruenceRecord>,
    /// Data-side base-class prototypes at this step (congruence reference).
    pub base_prototypes: BTreeMap<ClassId, Vec<f64>>,
    pub train_records: Vec<TrainRecord>,
}

/// A full run: the per-step records plus the config identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub num_steps: usize,
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    pub fn final_step(&self) -> Option<&StepRecord> {
        self.steps.last().filter(|s| s.step == self.num_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub labels: LabelSpace,
    pub schedule: ClassSchedule,
    pub stream: StreamManifest,
    pub holdout_rule: String,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
}

fn ckpt_path(out: &Path, step: usize) -> PathBuf {
    out.join(format!("step_{step}.ckpt"))
}

fn record_path(out: &Path, step: usize) -> PathBuf {
    out.join(format!("step_{step}_record.json"))
}

fn load_record(out: &Path, step: usize) -> anyhow::Result<StepRecord> {
    let text = std::fs::read_to_string(record_path(out, step))?;
    Ok(serde_json::from_str(&text)?)
}

struct PreparedData {
    labels: LabelSpace,
    schedule: ClassSchedule,
    steps: Vec<StepDataset>,
    train: Vec<SceneSample>,
    val: Vec<SceneSample>,
    test: Vec<SceneSample>,
}

fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<PreparedData> {
    let spec = cfg.dataset.scene_spec()?;
    let ds = &cfg.dataset;
    let train = generate_dataset(
        &spec,
        ds.train_images,
        derive_seed(ds.seed, "train", 0),
        ds.presence_plan(ds.train_images).as_ref(),
    )?;
    let val = generate_dataset(
        &spec,
        ds.val_images,
        derive_seed(ds.seed, "val", 0),
        ds.presence_plan(ds.val_images).as_ref(),
    )?;
    let test = generate_dataset(
        &spec,
        ds.test_images,
        derive_seed(ds.seed, "test", 0),
        ds.presence_plan(ds.test_images).as_ref(),
    )?;
    let schedule = build_schedule(
        ds.num_classes(),
        cfg.schedule.base_count,
        cfg.schedule.increment_size,
        cfg.schedule.class_order_seed,
    )?;
    let stream_cfg = cfg.stream.stream_config();
    let steps = assign_images(&train, &schedule, &stream_cfg)?;
    let steps = subsample_steps(steps, stream_cfg.subsample_fraction, stream_cfg.seed)?;
    Ok(PreparedData { labels: spec.labels.clone(), schedule, steps, train, val, test })
}

fn image_tensor(sample: &SceneSample) -> Tensor {
    let (h, w) = (sample.annotation.height(), sample.annotation.width());
    Tensor::from_vec(&[3, h, w], sample.image.clone())
}

fn classifier_row_prototypes(
    model: &QueryModel,
    classes: &std::collections::BTreeSet<ClassId>,
) -> BTreeMap<ClassId, Vec<f64>> {
    let w = model.classifier();
    let d = w.shape[1];
    classes
        .iter()
        .map(|&c| (c, w.data[(c - 1) as usize * d..(c as usize) * d].to_vec()))
        .collect()
}

fn evaluate_split(
    model: &QueryModel,
    samples: &[SceneSample],
    labels: &LabelSpace,
    infer: &panlab_core::model::InferenceConfig,
    base: &std::collections::BTreeSet<ClassId>,
    new_seen: &std::collections::BTreeSet<ClassId>,
) -> anyhow::Result<MetricReport> {
    let mut acc = EvalAccumulator::new();
    for sample in samples {
        let out = model.infer(&image_tensor(sample))?;
        let pred = panoptic_inference(&out, labels, infer);
        acc.add_pair(&pred, &sample.annotation, labels)?;
    }
    Ok(acc.report(base, new_seen))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_step(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    model: &QueryModel,
    t: usize,
    step_one: Option<&StepRecord>,
    step_one_classifier: Option<&BTreeMap<ClassId, Vec<f64>>>,
    train_records: Vec<TrainRecord>,
    skip_metrics: bool,
) -> anyhow::Result<StepRecord> {
    let infer = cfg.inference.inference();
    let base = data.schedule.base_classes();
    let known = data.schedule.known_classes(t);
    let new_seen: std::collections::BTreeSet<ClassId> =
        known.difference(&base).copied().collect();
    let empty_report = || EvalAccumulator::new().report(&base, &new_seen);

    let (val, test) = if skip_metrics {
        (empty_report(), empty_report())
    } else {
        (
            evaluate_split(model, &data.val, &data.labels, &infer, &base, &new_seen)?,
            evaluate_split(model, &data.test, &data.labels, &infer, &base, &new_seen)?,
        )
    };

    let all_known = known.len() == data.labels.num_classes() as usize;
    let has_future_pixels = !all_known
        && data.val.iter().any(|s| s.present_classes.iter().any(|c| !known.contains(c)));
    let confusion_val = if skip_metrics || !has_future_pixels {
        None
    } else {
        Some(future_confusion_profile(model, &data.val, &data.labels, &known, t, &infer)?)
    };

    let (base_prototypes, _missing) = if skip_metrics {
        (BTreeMap::new(), Vec::new())
    } else {
        class_prototypes_from_data(model, &data.val, &base)?
    };
    let congruence = match (t, step_one, skip_metrics) {
        (1, _, _) | (_, None, _) | (_, _, true) => None,
        (_, Some(first), false) => {
            Some(prototype_congruence(t, &base_prototypes, &first.base_prototypes))
        }
    };
    let classifier_congruence = match (t, step_one_classifier, skip_metrics) {
        (1, _, _) | (_, None, _) | (_, _, true) => None,
        (_, Some(first), false) => {
            let now = classifier_row_prototypes(model, &base);
            Some(prototype_congruence(t, &now, first))
        }
    };

    Ok(StepRecord {
        step: t,
        val,
        test,
        confusion_val,
        congruence,
        classifier_congruence,
        base_prototypes,
        train_records,
    })
}

/// Run (or resume) the full protocol, optionally stopping after a step
/// boundary. Every artifact lands under `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> anyhow::Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let started = Instant::now();

    let manifest_path = out.join("manifest.json");
    if manifest_path.exists() {
        let existing: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
                .context("parsing existing manifest")?;
        if !resume {
            bail!(
                "{} already contains a run (pass --resume to continue it)",
                out.display()
            );
        }
        if existing.config_hash != hash {
            bail!(
                "refusing to resume: config hash {} does not match the stored run {}",
                hash,
                existing.config_hash
            );
        }
    }

    let data = prepare(cfg)?;
    let t_total = data.schedule.num_steps();
    let t_end = stop_after.map(|s| s.min(t_total)).unwrap_or(t_total);

    if !manifest_path.exists() {
        let manifest = RunManifest {
            config: cfg.clone(),
            config_hash: hash.clone(),
            labels: data.labels.clone(),
            schedule: data.schedule.clone(),
            stream: StreamManifest::from_steps(&data.steps, &cfg.stream.stream_config()),
            holdout_rule: HOLDOUT_RULE.to_string(),
            train_images: data.train.len(),
            val_images: data.val.len(),
            test_images: data.test.len(),
        };
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    }

    // resume point: longest prefix of steps with checkpoint + record on disk
    let mut last_completed = 0usize;
    for t in 1..=t_total {
        if ckpt_path(out, t).exists() && record_path(out, t).exists() {
            last_completed = t;
        } else {
            break;
        }
    }

    let model_cfg = cfg.model_config()?;
    let (mut model, mut opt, mut aux, mut global_step) = if last_completed == 0 {
        let model = QueryModel::init(model_cfg.clone(), cfg.model.init_seed)?;
        let opt = AdamWState::new(model.tensors());
        (model, opt, AuxState::default(), 0u64)
    } else {
        let ckpt = read_checkpoint(&ckpt_path(out, last_completed))?;
        if ckpt.completed_step != last_completed {
            bail!("checkpoint step mismatch at {}", last_completed);
        }
        let model = ckpt.restore_model()?;
        (model, ckpt.optimizer, ckpt.aux, ckpt.global_step)
    };

    let mut records: Vec<StepRecord> = Vec::new();
    for t in 1..=last_completed.min(t_end) {
        records.push(load_record(out, t)?);
    }
    let mut step_one_classifier: Option<BTreeMap<ClassId, Vec<f64>>> = if last_completed >= 1 {
        let ckpt = read_checkpoint(&ckpt_path(out, 1))?;
        let m = ckpt.restore_model()?;
        Some(classifier_row_prototypes(&m, &data.schedule.base_classes()))
    } else {
        None
    };

    let train_images: Vec<Tensor> = data.train.iter().map(image_tensor).collect();
    let fa = cfg.future_aware.future_aware();
    let weights = cfg.loss.weights();
    let adamw = cfg.optimizer.adamw();

    for t in (last_completed + 1)..=t_end {
        let sd = &data.steps[t - 1];
        if sd.entries.is_empty() {
            bail!("step {t} has no training images");
        }
        let iters =
            if t == 1 { cfg.run.base_iterations } else { cfg.run.increment_iterations };
        let known = data.schedule.known_classes(t);
        let mut batch_rng = rng_for(cfg.run.seed, "batch", t as u64);
        let batch_size = cfg.optimizer.batch_size;
        let mut train_records = Vec::with_capacity(iters);
        for _ in 0..iters {
            let idx =
                panlab_core::rng::sample_batch_indices(&mut batch_rng, sd.entries.len(), batch_size);
            let batch: Vec<(&Tensor, &PanopticMap)> = idx
                .iter()
                .map(|&i| {
                    let e = &sd.entries[i];
                    (&train_images[e.sample_id], &e.training)
                })
                .collect();
            let tc = TrainStepConfig {
                fa: &fa,
                weights,
                adamw,
                protocol_step: t,
                global_step,
                seed: cfg.run.seed,
                known: &known,
            };
            let rec = train_step(&mut model, &mut opt, &mut aux, &batch, &data.labels, &tc)?;
            global_step += 1;
            train_records.push(rec);
        }

        write_checkpoint(
            &ckpt_path(out, t),
            &Checkpoint::of(&model, &opt, &aux, t, global_step),
        )?;
        if t == 1 {
            step_one_classifier =
                Some(classifier_row_prototypes(&model, &data.schedule.base_classes()));
        }
        let skip_metrics = cfg.run.eval_final_only && t < t_total;
        let record = evaluate_step(
            cfg,
            &data,
            &model,
            t,
            records.first(),
            step_one_classifier.as_ref(),
            train_records,
            skip_metrics,
        )?;
        std::fs::write(record_path(out, t), serde_json::to_string(&record)?)?;
        records.push(record);
    }

    let run = RunRecord { config_hash: hash, num_steps: t_total, steps: records };
    report::render_run(out, &run)?;
    let info = serde_json::json!({
        "wall_seconds": started.elapsed().as_secs_f64(),
        "completed_steps": run.steps.len(),
        "total_steps": t_total,
    });
    std::fs::write(out.join("run_info.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(run)
}

/// Load a completed (or partial) run back from its output directory.
pub fn load_run(out: &Path) -> anyhow::Result<(RunManifest, RunRecord)> {
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json"))?)?;
    let t_total = manifest.schedule.num_steps();
    let mut steps = Vec::new();
    for t in 1..=t_total {
        if record_path(out, t).exists() {
            steps.push(load_record(out, t)?);
        } else {
            break;
        }
    }
    Ok((
        manifest.clone(),
        RunRecord { config_hash: manifest.config_hash.clone(), num_steps: t_total, steps },
    ))
}

/// Final-step headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalTriple {
    pub pq_base: Option<f64>,
    pub pq_new: Option<f64>,
    pub pq_all: Option<f64>,
}

impl FinalTriple {
    fn from_report(r: &MetricReport) -> Self {
        FinalTriple { pq_base: r.pq_base, pq_new: r.pq_new, pq_all: r.pq_all }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub rc: bool,
    pub kfr: bool,
    pub overlap: FinalTriple,
    pub disjoint: FinalTriple,
    pub avg_pq_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Four variants by two streams, all sharing the base config's seeds.
/// Final-step validation PQ per variant and stream, paper-table shaped.
pub fn run_ablation_suite(base: &ExperimentConfig, out: &Path) -> anyhow::Result<AblationReport> {
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for variant in Variant::all() {
        let mut per_mode = Vec::new();
        for mode in [StreamMode::Overlap, StreamMode::Disjoint] {
            let mut cfg = base.clone();
            cfg.apply_variant(variant);
            cfg.stream.mode = mode;
            let tag = match mode {
                StreamMode::Overlap => "overlap",
                StreamMode::Disjoint => "disjoint",
            };
            let dir = out.join(format!("{}_{}", variant.name(), tag));
            let run = run_experiment(&cfg, &dir, true, None)?;
            let report = run
                .final_step()
                .map(|s| s.val.clone())
                .ok_or_else(|| anyhow::anyhow!("variant {} incomplete", variant.name()))?;
            per_mode.push(FinalTriple::from_report(&report));
        }
        let disjoint = per_mode.pop().expect("two modes");
        let overlap = per_mode.pop().expect("two modes");
        let avg_pq_all = match (overlap.pq_all, disjoint.pq_all) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            _ => None,
        };
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            rc: variant.rc(),
            kfr: variant.kfr(),
            overlap,
            disjoint,
            avg_pq_all,
        });
    }
    let table = AblationReport { rows };
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    report::render_ablation(out, &table)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub stream: String,
    pub pq_all: Option<f64>,
    pub images_per_step: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Reduced-supervision sweep: one run per (fraction, stream) with identical
/// schedule and seeds; reports final-step test PQ_all.
pub fn run_reduced_supervision_sweep(
    base: &ExperimentConfig,
    fractions: &[f64],
    out: &Path,
) -> anyhow::Result<SweepReport> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        bail!("fractions must lie in (0, 1]");
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &fraction in fractions {
        for mode in [StreamMode::Overlap, StreamMode::Disjoint] {
            let mut cfg = base.clone();
            cfg.stream.mode = mode;
            cfg.stream.subsample_fraction = fraction;
            let tag = match mode {
                StreamMode::Overlap => "overlap",
                StreamMode::Disjoint => "disjoint",
            };
            let dir = out.join(format!("frac_{fraction}_{tag}"));
            let run = run_experiment(&cfg, &dir, true, None)?;
            let (manifest, _) = load_run(&dir)?;
            let report = run
                .final_step()
                .map(|s| s.test.clone())
                .ok_or_else(|| anyhow::anyhow!("sweep run incomplete"))?;
            rows.push(SweepRow {
                fraction,
                stream: tag.to_string(),
                pq_all: report.pq_all,
                images_per_step: manifest
                    .stream
                    .steps
                    .iter()
                    .map(|s| s.sample_ids.len())
                    .collect(),
            });
        }
    }
    let table = SweepReport { rows };
    std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&table)?)?;
    report::render_sweep(out, &table)?;
    Ok(table)
}
