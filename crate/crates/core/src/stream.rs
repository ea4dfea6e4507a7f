//! Class-incremental schedules and image streams.
//!
//! A [`ClassSchedule`] partitions the label space into a base group and
//! ordered increments. [`assign_images`] turns a dataset plus schedule into
//! per-step training sets under the overlap or disjoint-image regime, with
//! training annotations masked to the current classes (old-class and
//! future-class pixels both become void). [`subsample_steps`] implements the
//! reduced-supervision protocol: proportional per-step subsampling that never
//! drops the last image of a current class.

use std::collections::BTreeSet;

use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{ClassId, PanopticMap};
use crate::rng::rng_for;
use crate::scenes::SceneSample;

/// Partition of `{1..K}` into base classes and ordered increment groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSchedule {
    pub base: Vec<ClassId>,
    pub increments: Vec<Vec<ClassId>>,
}

impl ClassSchedule {
    /// Total number of steps `T` (base step included).
    pub fn num_steps(&self) -> usize {
        1 + self.increments.len()
    }

    /// Classes introduced at step `t` (1-based).
    pub fn current_classes(&self, t: usize) -> &[ClassId] {
        assert!(t >= 1 && t <= self.num_steps(), "step {t} out of range");
        if t == 1 {
            &self.base
        } else {
            &self.increments[t - 2]
        }
    }

    /// Cumulative classes seen up to and including step `t`.
    pub fn known_classes(&self, t: usize) -> BTreeSet<ClassId> {
        (1..=t).flat_map(|s| self.current_classes(s).iter().copied()).collect()
    }

    /// All classes introduced after the base step.
    pub fn new_classes(&self) -> BTreeSet<ClassId> {
        self.increments.iter().flatten().copied().collect()
    }

    pub fn base_classes(&self) -> BTreeSet<ClassId> {
        self.base.iter().copied().collect()
    }
}

/// Chunk a (seeded or identity) class order into base + increments.
///
/// `order_seed = None` keeps ids in ascending order; `Some(seed)` applies a
/// deterministic permutation. The last group may be smaller when `K` forces it.
pub fn build_schedule(
    k: u32,
    base_count: usize,
    increment_size: usize,
    order_seed: Option<u64>,
) -> Result<ClassSchedule> {
    if base_count >= k as usize {
        return Err(Error::validation(format!(
            "base_count ({base_count}) must be smaller than K ({k})"
        )));
    }
    if increment_size == 0 {
        return Err(Error::validation("increment_size must be >= 1"));
    }
    let mut order: Vec<ClassId> = (1..=k).collect();
    if let Some(seed) = order_seed {
        let mut rng = rng_for(seed, "class-order", 0);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
    }
    let base = order[..base_count].to_vec();
    let increments = order[base_count..]
        .chunks(increment_size)
        .map(|c| c.to_vec())
        .collect();
    Ok(ClassSchedule { base, increments })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    Overlap,
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub mode: StreamMode,
    /// Target average image count per incremental step; `None` keeps all
    /// eligible images.
    pub images_per_increment: Option<usize>,
    /// Proportional reduced-supervision fraction in (0, 1].
    pub subsample_fraction: f64,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "subsample_fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        Ok(())
    }
}

/// One training sample of a step: dataset index plus masked annotation.
/// The untouched original annotation stays with the dataset and is used only
/// for evaluation and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub sample_id: usize,
    pub training: PanopticMap,
}

/// Training data visible at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDataset {
    /// 1-based step index.
    pub step: usize,
    pub current: Vec<ClassId>,
    pub known: BTreeSet<ClassId>,
    pub entries: Vec<StepEntry>,
}

impl StepDataset {
    pub fn sample_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.sample_id).collect()
    }
}

/// Replace every pixel whose class is outside `current` with void; pixels of
/// current classes are preserved verbatim (semantic and instance).
pub fn mask_labels(annotation: &PanopticMap, current: &BTreeSet<ClassId>) -> PanopticMap {
    let (h, w) = (annotation.height(), annotation.width());
    let mut out = PanopticMap::new_void(h, w);
    for y in 0..h {
        for x in 0..w {
            let c = annotation.semantic_at(y, x);
            if c != 0 && current.contains(&c) {
                out.set(y, x, c, annotation.instance_at(y, x));
            }
        }
    }
    out
}

/// Build per-step training sets from a dataset under a stream regime.
pub fn assign_images(
    samples: &[SceneSample],
    schedule: &ClassSchedule,
    config: &StreamConfig,
) -> Result<Vec<StepDataset>> {
    config.validate()?;
    let t_total = schedule.num_steps();
    // every scheduled class must exist somewhere
    for t in 1..=t_total {
        for &c in schedule.current_classes(t) {
            if !samples.iter().any(|s| s.present_classes.contains(&c)) {
                return Err(Error::Stream(format!(
                    "class {c} of step {t} appears in no dataset image"
                )));
            }
        }
    }
    let eligible = |t: usize| -> Vec<usize> {
        let current: BTreeSet<ClassId> =
            schedule.current_classes(t).iter().copied().collect();
        (0..samples.len())
            .filter(|&i| samples[i].present_classes.iter().any(|c| current.contains(c)))
            .collect()
    };

    let base_pool = eligible(1);
    let base_ids: BTreeSet<usize> = base_pool.iter().copied().collect();
    let mut steps = Vec::with_capacity(t_total);
    for t in 1..=t_total {
        let pool: Vec<usize> = if t == 1 {
            base_pool.clone()
        } else {
            match config.mode {
                StreamMode::Overlap => eligible(t),
                StreamMode::Disjoint => {
                    let p: Vec<usize> =
                        eligible(t).into_iter().filter(|i| !base_ids.contains(i)).collect();
                    for &c in schedule.current_classes(t) {
                        if !p.iter().any(|&i| samples[i].present_classes.contains(&c)) {
                            return Err(Error::Stream(format!(
                                "disjoint stream: class {c} of step {t} appears only in \
                                 base-pool images"
                            )));
                        }
                    }
                    p
                }
            }
        };
        let current: BTreeSet<ClassId> =
            schedule.current_classes(t).iter().copied().collect();
        let entries = pool
            .into_iter()
            .map(|i| StepEntry {
                sample_id: i,
                training: mask_labels(&samples[i].annotation, &current),
            })
            .collect();
        steps.push(StepDataset {
            step: t,
            current: schedule.current_classes(t).to_vec(),
            known: schedule.known_classes(t),
            entries,
        });
    }

    if let Some(avg) = config.images_per_increment {
        let total: usize = steps[1..].iter().map(|s| s.entries.len()).sum();
        let target = avg * (t_total - 1);
        if total > 0 && target < total {
            let fraction = target as f64 / total as f64;
            steps = proportional_subsample(steps, fraction, config.seed, "target")?;
        }
    }
    Ok(steps)
}

/// Reduced-supervision subsampling: each incremental step keeps
/// `round(fraction * |step|)` images drawn uniformly without replacement;
/// the base step is untouched. The draw is repaired deterministically so
/// every current class keeps at least one image.
pub fn subsample_steps(
    steps: Vec<StepDataset>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<StepDataset>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(steps);
    }
    proportional_subsample(steps, fraction, seed, "subsample")
}

fn proportional_subsample(
    mut steps: Vec<StepDataset>,
    fraction: f64,
    seed: u64,
    tag: &str,
) -> Result<Vec<StepDataset>> {
    for step in steps.iter_mut().skip(1) {
        let n = step.entries.len();
        if n == 0 {
            continue;
        }
        let keep = (fraction * n as f64).round() as usize;
        if keep == 0 {
            return Err(Error::Stream(format!(
                "fraction {fraction} empties step {} ({n} images)",
                step.step
            )));
        }
        if keep >= n {
            continue;
        }
        let mut rng = rng_for(seed, tag, step.step as u64);
        let mut kept: Vec<usize> = index_sample(&mut rng, n, keep).into_iter().collect();
        kept.sort_unstable();
        let mut kept_set: BTreeSet<usize> = kept.iter().copied().collect();

        // guarantee every current class keeps at least one image
        let current: BTreeSet<ClassId> = step.current.iter().copied().collect();
        let entry_classes: Vec<BTreeSet<ClassId>> = step
            .entries
            .iter()
            .map(|e| {
                e.training
                    .present_classes()
                    .intersection(&current)
                    .copied()
                    .collect()
            })
            .collect();
        for &c in &current {
            if kept_set.iter().any(|&i| entry_classes[i].contains(&c)) {
                continue;
            }
            let donor = (0..n)
                .find(|i| !kept_set.contains(i) && entry_classes[*i].contains(&c))
                .ok_or_else(|| {
                    Error::Stream(format!("class {c} missing from step {} entirely", step.step))
                })?;
            // evict the first kept image whose classes all stay covered elsewhere
            let mut coverage: std::collections::BTreeMap<ClassId, usize> = Default::default();
            for &i in &kept_set {
                for &cc in &entry_classes[i] {
                    *coverage.entry(cc).or_default() += 1;
                }
            }
            let victim = kept_set
                .iter()
                .copied()
                .find(|&i| entry_classes[i].iter().all(|cc| coverage[cc] >= 2))
                .ok_or_else(|| {
                    Error::Stream(format!(
                        "cannot rebalance step {} to cover class {c} at fraction {fraction}",
                        step.step
                    ))
                })?;
            kept_set.remove(&victim);
            kept_set.insert(donor);
        }
        let kept: Vec<usize> = kept_set.into_iter().collect();
        step.entries = kept.into_iter().map(|i| step.entries[i].clone()).collect();
    }
    Ok(steps)
}

/// Round-trippable description of a built stream, written next to run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub mode: StreamMode,
    pub seed: u64,
    pub subsample_fraction: f64,
    pub steps: Vec<StepManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub step: usize,
    pub current: Vec<ClassId>,
    pub known: Vec<ClassId>,
    pub sample_ids: Vec<usize>,
}

impl StreamManifest {
    pub fn from_steps(steps: &[StepDataset], config: &StreamConfig) -> Self {
        StreamManifest {
            mode: config.mode,
            seed: config.seed,
            subsample_fraction: config.subsample_fraction,
            steps: steps
                .iter()
                .map(|s| StepManifest {
                    step: s.step,
                    current: s.current.clone(),
                    known: s.known.iter().copied().collect(),
                    sample_ids: s.sample_ids(),
                })
                .collect(),
        }
    }
}
