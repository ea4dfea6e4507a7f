//! Future-aware diagnostics: where do future-class pixels go, how much do
//! old-class prototypes drift, and how does the stability/plasticity
//! trade-off evolve over steps. All functions are read-only over a frozen
//! model and dataset.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::future_aware::downsample_labels_majority;
use crate::metrics::MetricReport;
use crate::model::{panoptic_inference, InferenceConfig, QueryModel};
use crate::panoptic::{ClassId, LabelSpace};
use crate::scenes::SceneSample;

/// How pixels of not-yet-introduced classes are predicted at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionProfile {
    pub step: usize,
    pub fraction_to_old: f64,
    pub fraction_to_background: f64,
    pub fraction_to_future: f64,
}

/// Run inference over an evaluation set with ORIGINAL (unmasked) annotations
/// and profile the predictions on pixels whose ground-truth class has not
/// been introduced yet. Errors when no such pixel exists (profile undefined).
pub fn future_confusion_profile(
    model: &QueryModel,
    eval: &[SceneSample],
    labels: &LabelSpace,
    known: &BTreeSet<ClassId>,
    step: usize,
    infer_cfg: &InferenceConfig,
) -> Result<ConfusionProfile> {
    let mut to_old = 0u64;
    let mut to_background = 0u64;
    let mut to_future = 0u64;
    for sample in eval {
        let image = crate::autodiff::Tensor::from_vec(
            &[3, sample.annotation.height(), sample.annotation.width()],
            sample.image.clone(),
        );
        let out = model.infer(&image)?;
        let pred = panoptic_inference(&out, labels, infer_cfg);
        for (p, g) in pred.semantic().iter().zip(sample.annotation.semantic()) {
            if *g == 0 || known.contains(g) {
                continue;
            }
            if *p == 0 {
                to_background += 1;
            } else if known.contains(p) {
                to_old += 1;
            } else {
                to_future += 1;
            }
        }
    }
    let total = to_old + to_background + to_future;
    if total == 0 {
        return Err(Error::validation(
            "no future-class pixels in the evaluation set; confusion profile undefined",
        ));
    }
    let t = total as f64;
    Ok(ConfusionProfile {
        step,
        fraction_to_old: to_old as f64 / t,
        fraction_to_background: to_background as f64 / t,
        fraction_to_future: to_future as f64 / t,
    })
}

/// Per-class mean of dense features over ground-truth pixels at feature
/// resolution, pooled across the whole evaluation set (pixel-count weighted).
/// Classes without any feature-resolution pixel are reported in `missing`.
pub fn class_prototypes_from_data(
    model: &QueryModel,
    eval: &[SceneSample],
    classes: &BTreeSet<ClassId>,
) -> Result<(BTreeMap<ClassId, Vec<f64>>, Vec<ClassId>)> {
    let factor = model.cfg.downscale();
    let cf = model.cfg.feat_channels;
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for sample in eval {
        let (h, w) = (sample.annotation.height(), sample.annotation.width());
        let image =
            crate::autodiff::Tensor::from_vec(&[3, h, w], sample.image.clone());
        let out = model.infer(&image)?;
        let (fh, fw) = (out.features.shape[1], out.features.shape[2]);
        let feat_labels = downsample_labels_majority(&sample.annotation, factor);
        for i in 0..fh {
            for j in 0..fw {
                let c = feat_labels[i * fw + j];
                if c == 0 || !classes.contains(&c) {
                    continue;
                }
                let entry = sums.entry(c).or_insert_with(|| (vec![0.0; cf], 0));
                for ch in 0..cf {
                    entry.0[ch] += out.features.data[ch * fh * fw + i * fw + j];
                }
                entry.1 += 1;
            }
        }
    }
    let mut protos = BTreeMap::new();
    let mut missing = Vec::new();
    for &c in classes {
        match sums.get(&c) {
            Some((sum, n)) if *n > 0 => {
                protos.insert(c, sum.iter().map(|v| v / *n as f64).collect());
            }
            _ => missing.push(c),
        }
    }
    Ok((protos, missing))
}

/// Cosine agreement between a class's prototypes at two steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongruenceRecord {
    pub step: usize,
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean: Option<f64>,
    /// Classes skipped because a prototype was missing or zero-norm.
    pub flagged: Vec<ClassId>,
}

/// Compare prototypes at step `t` against the step-1 reference, class by
/// class; zero-norm prototypes are excluded and flagged.
pub fn prototype_congruence(
    step: usize,
    protos_t: &BTreeMap<ClassId, Vec<f64>>,
    protos_1: &BTreeMap<ClassId, Vec<f64>>,
) -> CongruenceRecord {
    let mut per_class = BTreeMap::new();
    let mut flagged = Vec::new();
    for (c, a) in protos_t {
        let Some(b) = protos_1.get(c) else { continue };
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            flagged.push(*c);
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        per_class.insert(*c, dot / (na * nb));
    }
    let mean = if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    };
    CongruenceRecord { step, per_class, mean, flagged }
}

/// One point of the stability/plasticity trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// `PQ_base(t) / PQ_base(1)`; 0 when the base run scored 0.
    pub retention: f64,
    pub pq_new: f64,
}

/// Derive trajectory points for steps `2..=T` from per-step reports
/// (index 0 = step 1).
pub fn stability_plasticity(history: &[MetricReport]) -> Result<Vec<TrajectoryPoint>> {
    if history.is_empty() {
        return Err(Error::validation("history must contain the base step"));
    }
    let base_ref = history[0]
        .pq_base
        .ok_or_else(|| Error::validation("step 1 report lacks pq_base"))?;
    let mut out = Vec::new();
    for (i, report) in history.iter().enumerate().skip(1) {
        let step = i + 1;
        let pq_base = report
            .pq_base
            .ok_or_else(|| Error::validation(format!("step {step} report lacks pq_base")))?;
        let retention = if base_ref == 0.0 { 0.0 } else { pq_base / base_ref };
        let pq_new = report.pq_new.unwrap_or(0.0);
        out.push(TrajectoryPoint { step, retention, pq_new });
    }
    Ok(out)
}
