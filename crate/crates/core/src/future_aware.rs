//! Future-aware training: discovery of confident query regions supported on
//! unlabeled pixels, pixel-to-region contrast over their pooled prototypes,
//! repulsion of unlabeled features from known-class prototypes, and the
//! combined objective executed as one training step.
//!
//! "Unlabeled" always means void (class 0) in the step's masked training
//! annotation: at the base step that is exactly the not-yet-introduced
//! classes; at later steps it also covers old-class pixels, which receive no
//! supervision under this protocol.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    panoptic_loss, AuxHeadVars, ForwardVars, LossWeights, ModelOutput, QueryModel,
};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::panoptic::{ClassId, LabelSpace, PanopticMap};
use crate::rng::rng_for;

/// Where known-class prototypes `w_c` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    /// Normalized rows of the shared classifier (default).
    ClassifierRows,
    /// Normalized per-class centroids of labeled batch features.
    FeatureCentroids,
}

/// Optional prototype-clustering branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub enabled: bool,
    pub k_aux: usize,
    pub buffer_capacity: usize,
    pub lambda_bal: f64,
    /// Cluster centers are re-estimated every this many training steps.
    pub refresh_period: u64,
    /// Hidden width of the auxiliary MLP head.
    pub hidden: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            enabled: false,
            k_aux: 8,
            buffer_capacity: 256,
            lambda_bal: 0.5,
            refresh_period: 50,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureAwareConfig {
    /// Region contrast on/off.
    pub rc_enabled: bool,
    /// Known-class repulsion on/off.
    pub kfr_enabled: bool,
    /// Mask support threshold.
    pub tau_mask: f64,
    /// Contrast temperature.
    pub temperature: f64,
    /// Repulsion margin.
    pub margin: f64,
    pub lambda_contrast: f64,
    pub lambda_repulsion: f64,
    /// Anchor pixels sampled per region.
    pub pixels_per_region: usize,
    /// Minimum support size (feature-resolution pixels).
    pub min_region_pixels: usize,
    /// Minimum mean mask probability over the support.
    pub confidence_min: f64,
    /// Strictly-more-than this fraction of the support must be unlabeled.
    pub majority_fraction: f64,
    /// Unlabeled pixels sampled per batch for repulsion.
    pub unlabeled_samples: usize,
    /// Apply contrast/repulsion only at the base step.
    pub base_step_only: bool,
    pub prototype_source: PrototypeSource,
    pub aux: AuxConfig,
}

impl Default for FutureAwareConfig {
    fn default() -> Self {
        FutureAwareConfig {
            rc_enabled: true,
            kfr_enabled: true,
            tau_mask: 0.5,
            temperature: 0.07,
            margin: 0.0,
            lambda_contrast: 0.5,
            lambda_repulsion: 0.5,
            pixels_per_region: 70,
            min_region_pixels: 10,
            confidence_min: 0.7,
            majority_fraction: 0.5,
            unlabeled_samples: 256,
            base_step_only: false,
            prototype_source: PrototypeSource::ClassifierRows,
            aux: AuxConfig::default(),
        }
    }
}

impl FutureAwareConfig {
    /// Plain supervised baseline: neither mechanism runs.
    pub fn disabled() -> Self {
        FutureAwareConfig { rc_enabled: false, kfr_enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::validation("temperature must be positive"));
        }
        if !(self.tau_mask > 0.0 && self.tau_mask < 1.0) {
            return Err(Error::validation("tau_mask must lie in (0, 1)"));
        }
        if !(0.5..=1.0).contains(&self.majority_fraction) {
            return Err(Error::validation("majority_fraction must lie in [0.5, 1]"));
        }
        if self.pixels_per_region == 0
            || self.min_region_pixels == 0
            || self.unlabeled_samples == 0
        {
            return Err(Error::validation("sample counts must be positive"));
        }
        if self.aux.enabled && self.aux.k_aux < 2 {
            return Err(Error::validation("aux clustering needs k_aux >= 2"));
        }
        Ok(())
    }
}

/// Majority-vote downsampling of a semantic grid to feature resolution.
/// Ties resolve to the lowest class id (void participates as id 0).
pub fn downsample_labels_majority(map: &PanopticMap, factor: usize) -> Vec<ClassId> {
    let (h, w) = (map.height(), map.width());
    assert!(h % factor == 0 && w % factor == 0, "canvas not divisible by factor");
    let (fh, fw) = (h / factor, w / factor);
    let mut out = vec![0; fh * fw];
    let mut counts: std::collections::BTreeMap<ClassId, usize> = Default::default();
    for fy in 0..fh {
        for fx in 0..fw {
            counts.clear();
            for dy in 0..factor {
                for dx in 0..factor {
                    *counts.entry(map.semantic_at(fy * factor + dy, fx * factor + dx)).or_default() +=
                        1;
                }
            }
            // max count, ties to lowest id (BTreeMap iterates ascending)
            let mut best = (0u32, 0usize);
            for (&c, &n) in counts.iter() {
                if n > best.1 {
                    best = (c, n);
                }
            }
            out[fy * fw + fx] = best.0;
        }
    }
    out
}

/// A discovered future-like region: one `(image, query)` pair with its
/// thresholded support at feature resolution. Prototypes are pooled later.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FutureRegion {
    pub image: usize,
    pub query: usize,
    pub support: Vec<(usize, usize)>,
}

/// Thresholded support of one query mask at feature resolution.
pub fn region_support(masks_feat: &Tensor, query: usize, tau_mask: f64) -> Vec<(usize, usize)> {
    let (h, w) = (masks_feat.shape[1], masks_feat.shape[2]);
    let base = query * h * w;
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if masks_feat.data[base + i * w + j] > tau_mask {
                out.push((i, j));
            }
        }
    }
    out
}

/// Select queries whose mask support is sufficiently large, confident on
/// average, and majority-supported on unlabeled pixels. Deterministic; output
/// ordered by `(image, query)`.
pub fn discover_future_regions(
    outputs: &[ModelOutput],
    training_annotations: &[PanopticMap],
    cfg: &FutureAwareConfig,
) -> Result<Vec<FutureRegion>> {
    if outputs.len() != training_annotations.len() {
        return Err(Error::shape("one annotation per model output required"));
    }
    let mut regions = Vec::new();
    for (b, out) in outputs.iter().enumerate() {
        let (fh, fw) = (out.masks_feat.shape[1], out.masks_feat.shape[2]);
        let ann = &training_annotations[b];
        if ann.height() % fh != 0 || ann.width() % fw != 0 {
            return Err(Error::shape(format!(
                "annotation {}x{} incompatible with feature grid {fh}x{fw}",
                ann.height(),
                ann.width()
            )));
        }
        let factor = ann.height() / fh;
        let feat_labels = downsample_labels_majority(ann, factor);
        for q in 0..out.num_queries() {
            let support = region_support(&out.masks_feat, q, cfg.tau_mask);
            if support.len() < cfg.min_region_pixels {
                continue;
            }
            let mean_prob: f64 = support
                .iter()
                .map(|&(i, j)| out.masks_feat.data[q * fh * fw + i * fw + j])
                .sum::<f64>()
                / support.len() as f64;
            if mean_prob < cfg.confidence_min {
                continue;
            }
            let unlabeled =
                support.iter().filter(|&&(i, j)| feat_labels[i * fw + j] == 0).count();
            if (unlabeled as f64) <= cfg.majority_fraction * support.len() as f64 {
                continue;
            }
            regions.push(FutureRegion { image: b, query: q, support });
        }
    }
    Ok(regions)
}

/// Mean-pool dense features over a support set: differentiable with respect
/// to the feature map.
pub fn region_prototype(tape: &mut Tape, features: Var, support: &[(usize, usize)]) -> Result<Var> {
    if support.is_empty() {
        return Err(Error::validation("empty region support"));
    }
    let gathered = tape.gather_pixels(features, support);
    Ok(tape.mean_rows(gathered))
}

/// Sample anchor coordinates from a support set: without replacement when the
/// support is large enough, with replacement otherwise.
pub fn sample_anchor_coords(
    support: &[(usize, usize)],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    assert!(!support.is_empty(), "empty support");
    if support.len() >= n {
        index_sample(rng, support.len(), n).into_iter().map(|i| support[i]).collect()
    } else {
        (0..n).map(|_| support[rng.random_range(0..support.len())]).collect()
    }
}

/// InfoNCE over cosine similarities between anchor features and region
/// prototypes: anchors pull toward their own prototype and push away from the
/// others. Zero when only one prototype exists.
pub fn region_contrast_loss(
    tape: &mut Tape,
    anchors: Var,
    prototypes: Var,
    region_of: &[usize],
    temperature: f64,
) -> Result<Var> {
    let n = tape.value(anchors).shape[0];
    let p = tape.value(prototypes).shape[0];
    if p == 0 {
        return Err(Error::validation("contrast needs at least one prototype"));
    }
    if region_of.len() != n {
        return Err(Error::shape("one region index per anchor required"));
    }
    if let Some(bad) = region_of.iter().find(|&&r| r >= p) {
        return Err(Error::validation(format!("region index {bad} out of range")));
    }
    let sims = tape.cosine_rows(anchors, prototypes)?;
    let scaled = tape.scale(sims, 1.0 / temperature);
    Ok(tape.cross_entropy_mean(scaled, region_of, &vec![1.0; n]))
}

/// Unit-normalized classifier rows for the known classes, ascending by id.
/// The no-object row is never included.
pub fn known_class_prototypes(
    classifier: &Tensor,
    known: &BTreeSet<ClassId>,
) -> Result<Tensor> {
    if known.is_empty() {
        return Err(Error::validation("known class set is empty"));
    }
    let (rows, d) = (classifier.shape[0], classifier.shape[1]);
    let mut data = Vec::with_capacity(known.len() * d);
    for &c in known {
        let r = (c - 1) as usize;
        if r + 1 >= rows {
            return Err(Error::validation(format!("class {c} outside classifier rows")));
        }
        let row = &classifier.data[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::validation(format!("classifier row of class {c} has zero norm")));
        }
        data.extend(row.iter().map(|v| v / norm));
    }
    Ok(Tensor::from_vec(&[known.len(), d], data))
}

/// Unit-normalized centroids of labeled batch features per known class.
/// Classes without labeled pixels in the batch are skipped.
pub fn feature_centroid_prototypes(
    outputs: &[ModelOutput],
    feat_labels: &[Vec<ClassId>],
    known: &BTreeSet<ClassId>,
) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let cf = outputs[0].features.shape[0];
    let mut rows: Vec<f64> = Vec::new();
    let mut count_rows = 0usize;
    for &c in known {
        let mut sum = vec![0.0; cf];
        let mut n = 0usize;
        for (out, labels) in outputs.iter().zip(feat_labels) {
            let (fh, fw) = (out.features.shape[1], out.features.shape[2]);
            for i in 0..fh {
                for j in 0..fw {
                    if labels[i * fw + j] == c {
                        for ch in 0..cf {
                            sum[ch] += out.features.data[ch * fh * fw + i * fw + j];
                        }
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            continue;
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        rows.extend(sum.iter().map(|v| v / norm));
        count_rows += 1;
    }
    if count_rows == 0 {
        return Err(Error::validation("no labeled pixels for any known class in batch"));
    }
    Ok(Tensor::from_vec(&[count_rows, cf], rows))
}

/// Coordinates of unlabeled (void) feature pixels of one image, sampled
/// uniformly without replacement up to `n`. Empty when nothing is unlabeled.
pub fn sample_unlabeled_coords(
    feat_labels: &[ClassId],
    fh: usize,
    fw: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let pool: Vec<(usize, usize)> = (0..fh)
        .flat_map(|i| (0..fw).map(move |j| (i, j)))
        .filter(|&(i, j)| feat_labels[i * fw + j] == 0)
        .collect();
    if pool.is_empty() {
        return Vec::new();
    }
    if pool.len() <= n {
        return pool;
    }
    let mut picked: Vec<usize> = index_sample(rng, pool.len(), n).into_iter().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i]).collect()
}

/// Hinge repulsion: each unlabeled feature pays `max(0, cos(z, w_best) - margin)`
/// against its most similar known-class prototype. Prototypes are constants;
/// gradients reach the features only. Ties in the argmax break to the lowest
/// prototype index (ascending class id).
pub fn repulsion_loss(
    tape: &mut Tape,
    unlabeled: Var,
    prototypes: &Tensor,
    margin: f64,
) -> Result<Var> {
    let sims = tape.cosine_rows_const(unlabeled, prototypes.clone())?;
    let (n, c) = (tape.value(sims).shape[0], tape.value(sims).shape[1]);
    let mut best_cols = Vec::with_capacity(n);
    for i in 0..n {
        let row = &tape.value(sims).data[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        best_cols.push(best);
    }
    let picked = tape.select_per_row(sims, &best_cols);
    let shifted = tape.add_const(picked, -margin);
    let hinged = tape.relu(shifted);
    Ok(tape.mean_all(hinged))
}

/// Exact weighted combination of the loss terms; zero weights drop a term
/// outright so the result equals the supervised loss bit-for-bit.
pub fn total_loss_value(
    loss_pan: f64,
    loss_contrast: f64,
    loss_repulsion: f64,
    cfg: &FutureAwareConfig,
) -> Result<f64> {
    for (name, v) in [
        ("panoptic", loss_pan),
        ("contrast", loss_contrast),
        ("repulsion", loss_repulsion),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    let mut total = loss_pan;
    if cfg.lambda_contrast != 0.0 {
        total += cfg.lambda_contrast * loss_contrast;
    }
    if cfg.lambda_repulsion != 0.0 {
        total += cfg.lambda_repulsion * loss_repulsion;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// auxiliary prototype clustering
// ---------------------------------------------------------------------------

/// Spherical k-means: assign by maximum cosine, recompute unit-normalized
/// means, repeat to convergence or an iteration cap. Empty clusters are
/// re-seeded from the worst-served point.
pub fn spherical_kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if points.len() < k {
        return Err(Error::validation(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    if k == 0 {
        return Err(Error::validation("k must be positive"));
    }
    let d = points[0].len();
    let mut unit: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::validation(format!("point {i} has zero norm")));
        }
        unit.push(p.iter().map(|v| v / norm).collect());
    }
    let mut rng = rng_for(seed, "kmeans-init", 0);
    let mut centers: Vec<Vec<f64>> = index_sample(&mut rng, unit.len(), k)
        .into_iter()
        .map(|i| unit[i].clone())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut assignment = vec![usize::MAX; unit.len()];
    for _ in 0..100 {
        let mut next = vec![0usize; unit.len()];
        for (i, p) in unit.iter().enumerate() {
            let mut best = 0usize;
            let mut best_sim = dot(p, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let s = dot(p, center);
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            next[i] = best;
        }
        // recompute centers; re-seed empties from the worst-served point
        let mut fresh: Vec<Vec<f64>> = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in next.iter().enumerate() {
            for (acc, v) in fresh[c].iter_mut().zip(&unit[i]) {
                *acc += v;
            }
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let farthest = (0..unit.len())
                    .min_by(|&a, &b| {
                        let sa = dot(&unit[a], &centers[next[a]]);
                        let sb = dot(&unit[b], &centers[next[b]]);
                        sa.partial_cmp(&sb).unwrap().then(a.cmp(&b))
                    })
                    .expect("non-empty point set");
                fresh[c] = unit[farthest].clone();
                continue;
            }
            let norm = fresh[c].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                // antipodal degenerate mean: keep the previous center
                fresh[c] = centers[c].clone();
            } else {
                for v in fresh[c].iter_mut() {
                    *v /= norm;
                }
            }
        }
        centers = fresh;
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(centers)
}

/// Pseudo-label each point with its most similar center (ties to lowest index).
pub fn assign_pseudo_labels(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let s: f64 =
                    p.iter().zip(center).map(|(x, y)| x * y).sum::<f64>() / norm.max(1e-300);
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Cross-entropy of the auxiliary head against cluster pseudo-labels plus a
/// batch balance term `lambda_bal * KL(mean softmax || uniform)`.
pub fn aux_loss(
    tape: &mut Tape,
    prototypes: Var,
    pseudo_labels: &[usize],
    head: &AuxHeadVars,
    k_aux: usize,
    lambda_bal: f64,
) -> Result<Var> {
    if k_aux < 2 {
        return Err(Error::validation("aux balance term needs k_aux >= 2"));
    }
    let n = tape.value(prototypes).shape[0];
    if pseudo_labels.len() != n {
        return Err(Error::shape("one pseudo-label per prototype required"));
    }
    let h1 = tape.matmul(prototypes, head.w1, true);
    let h1 = tape.add_row_vec(h1, head.b1);
    let h1 = tape.relu(h1);
    let logits = tape.matmul(h1, head.w2, true);
    let logits = tape.add_row_vec(logits, head.b2);
    let ce = tape.cross_entropy_mean(logits, pseudo_labels, &vec![1.0; n]);
    let probs = tape.softmax_rows(logits);
    let pbar = tape.mean_rows(probs);
    let safe = tape.add_const(pbar, 1e-12);
    let logp = tape.log(safe);
    let shifted = tape.add_const(logp, (k_aux as f64).ln());
    let terms = tape.mul_elem(pbar, shifted);
    let kl = tape.sum_all(terms);
    Ok(tape.weighted_sum(&[(ce, 1.0), (kl, lambda_bal)]))
}

/// Rolling buffer of region prototypes plus the current cluster centers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxState {
    pub buffer: VecDeque<Vec<f64>>,
    pub centers: Option<Vec<Vec<f64>>>,
}

/// Per-step log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub global_step: u64,
    pub protocol_step: usize,
    pub loss_total: f64,
    pub loss_pan: f64,
    pub loss_contrast: f64,
    pub loss_repulsion: f64,
    pub loss_aux: f64,
    pub num_regions: usize,
    pub num_unlabeled: usize,
}

/// Everything a single training step needs besides model and data.
pub struct TrainStepConfig<'a> {
    pub fa: &'a FutureAwareConfig,
    pub weights: LossWeights,
    pub adamw: AdamWConfig,
    /// 1-based protocol step `t` (for the base-step-only switch).
    pub protocol_step: usize,
    /// Global training-iteration counter (drives per-step RNG streams).
    pub global_step: u64,
    pub seed: u64,
    pub known: &'a BTreeSet<ClassId>,
}

/// One combined training step: forward, supervised loss, region discovery,
/// prototypes and anchors, contrast, unlabeled sampling and repulsion,
/// optional aux clustering, one optimizer update.
///
/// Loss terms whose weight is zero (or whose mechanism is disabled) are never
/// attached to the objective, so a zero-weight configuration reproduces the
/// plain supervised trajectory bit-for-bit.
pub fn train_step(
    model: &mut QueryModel,
    opt: &mut AdamWState,
    aux_state: &mut AuxState,
    batch: &[(&Tensor, &PanopticMap)],
    labels: &LabelSpace,
    cfg: &TrainStepConfig,
) -> Result<TrainRecord> {
    cfg.fa.validate()?;
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);

    let mut fvs: Vec<ForwardVars> = Vec::with_capacity(batch.len());
    let mut outputs: Vec<ModelOutput> = Vec::with_capacity(batch.len());
    let mut pan_terms: Vec<(Var, f64)> = Vec::with_capacity(batch.len());
    let inv_b = 1.0 / batch.len() as f64;
    for (image, annotation) in batch {
        let fv = model.forward(&mut tape, &bound, image)?;
        let out = ModelOutput::from_vars(&mut tape, &fv);
        let (loss, _assignment) =
            panoptic_loss(&mut tape, &fv, &out, annotation, labels, &cfg.weights)?;
        pan_terms.push((loss, inv_b));
        fvs.push(fv);
        outputs.push(out);
    }
    let l_pan = tape.weighted_sum(&pan_terms);

    let stage_active = !cfg.fa.base_step_only || cfg.protocol_step == 1;
    let rc_active = cfg.fa.rc_enabled && stage_active;
    let kfr_active = cfg.fa.kfr_enabled && stage_active;
    let aux_active = cfg.fa.aux.enabled && stage_active;

    let mut terms: Vec<(Var, f64)> = vec![(l_pan, 1.0)];
    let mut loss_contrast = 0.0;
    let mut loss_repulsion = 0.0;
    let mut loss_aux = 0.0;
    let mut num_regions = 0usize;
    let mut num_unlabeled = 0usize;

    let factor = model.cfg.downscale();
    let feat_labels: Vec<Vec<ClassId>> = if rc_active || kfr_active || aux_active {
        batch.iter().map(|(_, ann)| downsample_labels_majority(ann, factor)).collect()
    } else {
        Vec::new()
    };

    // --- region discovery + contrast (+ aux) ---
    let mut prototypes_var: Option<Var> = None;
    if rc_active || aux_active {
        let annotations: Vec<PanopticMap> =
            batch.iter().map(|(_, ann)| (*ann).clone()).collect();
        let regions = discover_future_regions(&outputs, &annotations, cfg.fa)?;
        num_regions = regions.len();
        if !regions.is_empty() {
            let mut proto_vars = Vec::with_capacity(regions.len());
            for region in &regions {
                proto_vars.push(region_prototype(
                    &mut tape,
                    fvs[region.image].features,
                    &region.support,
                )?);
            }
            let protos = tape.stack_rows(&proto_vars);
            prototypes_var = Some(protos);
            if rc_active {
                let mut rng = rng_for(cfg.seed, "anchors", cfg.global_step);
                let mut anchor_parts = Vec::with_capacity(regions.len());
                let mut region_of = Vec::new();
                for (ri, region) in regions.iter().enumerate() {
                    let coords =
                        sample_anchor_coords(&region.support, cfg.fa.pixels_per_region, &mut rng);
                    anchor_parts.push(tape.gather_pixels(fvs[region.image].features, &coords));
                    region_of.extend(std::iter::repeat(ri).take(coords.len()));
                }
                let anchors = tape.concat_rows(&anchor_parts);
                let l_reg = region_contrast_loss(
                    &mut tape,
                    anchors,
                    protos,
                    &region_of,
                    cfg.fa.temperature,
                )?;
                loss_contrast = tape.value(l_reg).item();
                if cfg.fa.lambda_contrast != 0.0 {
                    terms.push((l_reg, cfg.fa.lambda_contrast));
                }
            }
        }
    }

    // --- known-class repulsion ---
    if kfr_active && !cfg.known.is_empty() {
        let mut pool: Vec<(usize, (usize, usize))> = Vec::new();
        for (b, labels_b) in feat_labels.iter().enumerate() {
            let (fh, fw) = (outputs[b].features.shape[1], outputs[b].features.shape[2]);
            for i in 0..fh {
                for j in 0..fw {
                    if labels_b[i * fw + j] == 0 {
                        pool.push((b, (i, j)));
                    }
                }
            }
        }
        if pool.len() > cfg.fa.unlabeled_samples {
            let mut rng = rng_for(cfg.seed, "unlabeled", cfg.global_step);
            let mut picked: Vec<usize> =
                index_sample(&mut rng, pool.len(), cfg.fa.unlabeled_samples)
                    .into_iter()
                    .collect();
            picked.sort_unstable();
            pool = picked.into_iter().map(|i| pool[i].clone()).collect();
        }
        num_unlabeled = pool.len();
        if !pool.is_empty() {
            let prototypes = match cfg.fa.prototype_source {
                PrototypeSource::ClassifierRows => {
                    Some(known_class_prototypes(model.classifier(), cfg.known)?)
                }
                PrototypeSource::FeatureCentroids => {
                    feature_centroid_prototypes(&outputs, &feat_labels, cfg.known).ok()
                }
            };
            if let Some(prototypes) = prototypes {
                let mut parts = Vec::new();
                let mut start = 0usize;
                while start < pool.len() {
                    let image = pool[start].0;
                    let mut end = start;
                    while end < pool.len() && pool[end].0 == image {
                        end += 1;
                    }
                    let coords: Vec<(usize, usize)> =
                        pool[start..end].iter().map(|&(_, c)| c).collect();
                    parts.push(tape.gather_pixels(fvs[image].features, &coords));
                    start = end;
                }
                let z = tape.concat_rows(&parts);
                let l_rep = repulsion_loss(&mut tape, z, &prototypes, cfg.fa.margin)?;
                loss_repulsion = tape.value(l_rep).item();
                if cfg.fa.lambda_repulsion != 0.0 {
                    terms.push((l_rep, cfg.fa.lambda_repulsion));
                }
            }
        }
    }

    // --- auxiliary clustering branch ---
    if aux_active {
        if let Some(protos) = prototypes_var {
            let proto_values: Vec<Vec<f64>> = {
                let t = tape.value(protos);
                let d = t.shape[1];
                (0..t.shape[0]).map(|i| t.data[i * d..(i + 1) * d].to_vec()).collect()
            };
            for p in &proto_values {
                if aux_state.buffer.len() == cfg.fa.aux.buffer_capacity {
                    aux_state.buffer.pop_front();
                }
                aux_state.buffer.push_back(p.clone());
            }
            if cfg.global_step % cfg.fa.aux.refresh_period == 0
                && aux_state.buffer.len() >= cfg.fa.aux.k_aux
            {
                let pts: Vec<Vec<f64>> = aux_state.buffer.iter().cloned().collect();
                aux_state.centers = Some(spherical_kmeans(
                    &pts,
                    cfg.fa.aux.k_aux,
                    crate::rng::derive_seed(cfg.seed, "aux-centers", cfg.global_step),
                )?);
            }
            if let Some(centers) = &aux_state.centers {
                let head = model.aux_head_vars(&bound).ok_or_else(|| {
                    Error::validation("aux branch enabled but model has no aux head")
                })?;
                let pseudo = assign_pseudo_labels(&proto_values, centers);
                let l_aux = aux_loss(
                    &mut tape,
                    protos,
                    &pseudo,
                    &head,
                    cfg.fa.aux.k_aux,
                    cfg.fa.aux.lambda_bal,
                )?;
                loss_aux = tape.value(l_aux).item();
                terms.push((l_aux, 1.0));
            }
        }
    }

    let total = tape.weighted_sum(&terms);
    let loss_total = tape.value(total).item();
    if !loss_total.is_finite() {
        return Err(Error::NonFinite(format!("total loss at step {}", cfg.global_step)));
    }

    let mut grads = tape.backward(total)?;
    let grad_list: Vec<Option<Tensor>> = bound.iter().map(|&v| grads.take(v)).collect();
    adamw_step(model.tensors_mut(), &grad_list, opt, &cfg.adamw)?;

    Ok(TrainRecord {
        global_step: cfg.global_step,
        protocol_step: cfg.protocol_step,
        loss_total,
        loss_pan: tape.value(l_pan).item(),
        loss_contrast,
        loss_repulsion,
        loss_aux,
        num_regions,
        num_unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn unit_cfg() -> FutureAwareConfig {
        FutureAwareConfig::default()
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = unit_cfg();
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = unit_cfg();
        cfg.majority_fraction = 0.4;
        assert!(cfg.validate().is_err());
        let mut cfg = unit_cfg();
        cfg.tau_mask = 1.0;
        assert!(cfg.validate().is_err());
        assert!(unit_cfg().validate().is_ok());
    }

    #[test]
    fn majority_downsample_breaks_ties_to_lowest_id() {
        // 2x2 blocks; one block half void half class 3 -> tie -> void (0)
        let mut map = PanopticMap::new_void(2, 4);
        map.set(0, 2, 3, 1);
        map.set(1, 2, 3, 1);
        map.set(0, 3, 3, 1);
        map.set(1, 3, 3, 1);
        let grid = downsample_labels_majority(&map, 2);
        assert_eq!(grid, vec![0, 3]);
        let mut map = PanopticMap::new_void(2, 2);
        map.set(0, 0, 3, 1);
        map.set(0, 1, 3, 1);
        let grid = downsample_labels_majority(&map, 2);
        assert_eq!(grid, vec![0]); // 2 void vs 2 class-3: tie -> 0
    }

    fn synthetic_output(
        q: usize,
        fh: usize,
        fw: usize,
        cf: usize,
        mask_fill: &dyn Fn(usize, usize, usize) -> f64,
    ) -> ModelOutput {
        let hw = fh * fw;
        let mut masks = vec![0.0; q * hw];
        for qi in 0..q {
            for i in 0..fh {
                for j in 0..fw {
                    masks[qi * hw + i * fw + j] = mask_fill(qi, i, j);
                }
            }
        }
        let canvas = (fh * 4, fw * 4);
        ModelOutput {
            features: Tensor::from_vec(
                &[cf, fh, fw],
                (0..cf * hw).map(|i| (i % 7) as f64 * 0.1 + 0.05).collect(),
            ),
            query_features: Tensor::zeros(&[q, 4]),
            masks_feat: Tensor::from_vec(&[q, fh, fw], masks.clone()),
            masks_full: Tensor::from_vec(
                &[q, canvas.0, canvas.1],
                vec![0.0; q * canvas.0 * canvas.1],
            ),
            logits: Tensor::zeros(&[q, 9]),
        }
    }

    #[test]
    fn discovery_selects_confident_unlabeled_majority_regions() {
        let cfg = unit_cfg();
        // query 0: confident over a 6x6 block (36 px, all unlabeled) -> selected
        // query 1: confident over 4 px (< min 10) -> rejected
        // query 2: support 0.55 probability (mean < 0.7) -> rejected
        let out = synthetic_output(3, 8, 8, 4, &|qi, i, j| match qi {
            0 => {
                if i < 6 && j < 6 {
                    0.9
                } else {
                    0.1
                }
            }
            1 => {
                if i < 2 && j < 2 {
                    0.9
                } else {
                    0.1
                }
            }
            _ => {
                if i >= 2 && j >= 2 {
                    0.55
                } else {
                    0.1
                }
            }
        });
        let ann = PanopticMap::new_void(32, 32); // fully unlabeled
        let regions = discover_future_regions(&[out], &[ann], &cfg).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].query, 0);
        assert_eq!(regions[0].support.len(), 36);
    }

    #[test]
    fn discovery_rejects_majority_labeled_support() {
        let cfg = unit_cfg();
        let out = synthetic_output(1, 8, 8, 4, &|_, i, j| {
            if i < 5 && j < 4 {
                0.9
            } else {
                0.1
            }
        });
        // label 60% of the support pixels (12 of 20 feature pixels => blocks)
        let mut ann = PanopticMap::new_void(32, 32);
        for fi in 0..3usize {
            for fj in 0..4usize {
                for dy in 0..4 {
                    for dx in 0..4 {
                        ann.set(fi * 4 + dy, fj * 4 + dx, 4, 0);
                    }
                }
            }
        }
        let regions = discover_future_regions(&[out], &[ann], &cfg).unwrap();
        assert!(regions.is_empty(), "60% labeled support must be rejected");
    }

    #[test]
    fn prototype_is_mean_of_support_features() {
        let mut tape = Tape::new();
        // 2 channels, 2x2 grid
        let f = tape.leaf(Tensor::from_vec(
            &[2, 2, 2],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ));
        // support = (0,0) and (0,1): features (1,0) and (0,1) -> mean (0.5, 0.5)
        let p = region_prototype(&mut tape, f, &[(0, 0), (0, 1)]).unwrap();
        assert_eq!(tape.value(p).data, vec![0.5, 0.5]);
        // constant feature map -> prototype equals the constant
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::from_vec(&[2, 2, 2], vec![3.0; 8]));
        let p = region_prototype(&mut tape, f, &[(0, 0), (1, 1), (0, 1)]).unwrap();
        assert_eq!(tape.value(p).data, vec![3.0, 3.0]);
        // empty support errors
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        assert!(region_prototype(&mut tape, f, &[]).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let masks = Tensor::from_vec(&[1, 1, 2], vec![0.6, 0.5]);
        let support = region_support(&masks, 0, 0.5);
        assert_eq!(support, vec![(0, 0)]);
    }

    #[test]
    fn anchor_sampling_modes() {
        let support: Vec<(usize, usize)> = (0..5).map(|i| (0, i)).collect();
        let mut rng = rng_for(1, "t", 0);
        let exact = sample_anchor_coords(&support, 5, &mut rng);
        let mut sorted = exact.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, support, "n == support: exactly the support in some order");

        let mut rng = rng_for(1, "t", 1);
        let small: Vec<(usize, usize)> = (0..3).map(|i| (1, i)).collect();
        let drawn = sample_anchor_coords(&small, 70, &mut rng);
        assert_eq!(drawn.len(), 70);
        assert!(drawn.iter().all(|c| small.contains(c)));
    }

    #[test]
    fn anchor_inclusion_rate_matches_without_replacement_draw() {
        // |support| = 200, n = 70 -> per-pixel inclusion 0.35 over many reseeds
        let support: Vec<(usize, usize)> = (0..200).map(|i| (i / 20, i % 20)).collect();
        let mut hits = vec![0usize; 200];
        let reseeds = 10_000;
        for s in 0..reseeds {
            let mut rng = rng_for(33, "mc", s);
            let drawn = sample_anchor_coords(&support, 70, &mut rng);
            assert_eq!(drawn.len(), 70);
            let distinct: std::collections::BTreeSet<_> = drawn.iter().collect();
            assert_eq!(distinct.len(), 70, "without replacement draw");
            for c in distinct {
                let idx = c.0 * 20 + c.1;
                hits[idx] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let rate = h as f64 / reseeds as f64;
            assert!(
                (rate - 0.35).abs() <= 0.02,
                "pixel {i}: inclusion rate {rate}"
            );
        }
    }

    #[test]
    fn contrast_loss_special_values() {
        // single prototype -> 0
        let mut tape = Tape::new();
        let anchors = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]));
        let protos = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.0]));
        let l = region_contrast_loss(&mut tape, anchors, protos, &[0, 0], 0.07).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // one anchor equidistant to two prototypes -> ln 2
        let mut tape = Tape::new();
        let anchors = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let protos =
            tape.leaf(Tensor::from_vec(&[2, 2], vec![0.6, 0.8, 0.6, -0.8]));
        let l = region_contrast_loss(&mut tape, anchors, protos, &[0], 0.07).unwrap();
        assert!((tape.value(l).item() - (2.0f64).ln()).abs() < 1e-9);

        // sim-to-positive 1, sim-to-negative 0, tau = 0.07
        let mut tape = Tape::new();
        let anchors = tape.leaf(Tensor::from_vec(&[1, 2], vec![2.0, 0.0]));
        let protos = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let l = region_contrast_loss(&mut tape, anchors, protos, &[0], 0.07).unwrap();
        let expect = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn classifier_prototypes_are_normalized_rows() {
        let w = Tensor::from_vec(&[4, 2], vec![3.0, 4.0, 1.0, 0.0, 0.0, 2.0, 9.0, 9.0]);
        let known: BTreeSet<ClassId> = [1u32, 3].into_iter().collect();
        let protos = known_class_prototypes(&w, &known).unwrap();
        assert_eq!(protos.shape, vec![2, 2]);
        assert!((protos.data[0] - 0.6).abs() < 1e-12);
        assert!((protos.data[1] - 0.8).abs() < 1e-12);
        assert_eq!(&protos.data[2..4], &[0.0, 1.0]);
        // zero-norm row errors
        let w = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]);
        let known: BTreeSet<ClassId> = [1u32].into_iter().collect();
        assert!(known_class_prototypes(&w, &known).is_err());
        // no-object row (last) is out of bounds for classes
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let known: BTreeSet<ClassId> = [2u32].into_iter().collect();
        assert!(known_class_prototypes(&w, &known).is_err());
    }

    #[test]
    fn unlabeled_sampling_respects_labels() {
        let fh = 4;
        let fw = 4;
        // half labeled: rows 0..2 labeled class 5
        let mut labels = vec![0u32; fh * fw];
        for i in 0..2 {
            for j in 0..fw {
                labels[i * fw + j] = 5;
            }
        }
        let mut rng = rng_for(2, "u", 0);
        let coords = sample_unlabeled_coords(&labels, fh, fw, 6, &mut rng);
        assert_eq!(coords.len(), 6);
        assert!(coords.iter().all(|&(i, j)| labels[i * fw + j] == 0));

        let full = vec![7u32; fh * fw];
        let mut rng = rng_for(2, "u", 1);
        assert!(sample_unlabeled_coords(&full, fh, fw, 4, &mut rng).is_empty());

        let none = vec![0u32; fh * fw];
        let mut rng = rng_for(2, "u", 2);
        let all = sample_unlabeled_coords(&none, fh, fw, 4, &mut rng);
        assert_eq!(all.len(), 4);
        let distinct: BTreeSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn repulsion_values_match_hand_computation() {
        // all sims <= margin -> 0
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]));
        let protos = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]);
        let l = repulsion_loss(&mut tape, z, &protos, 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // collinear feature, margin 0 -> contribution 1
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[1, 2], vec![2.0, 0.0]));
        let l = repulsion_loss(&mut tape, z, &protos, 0.0).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-9);

        // two pixels with max sims 0.3 and -0.2 -> (0.3 + 0) / 2
        let mut tape = Tape::new();
        let s1 = 0.3f64;
        let s2 = -0.2f64;
        let z = tape.leaf(Tensor::from_vec(
            &[2, 2],
            vec![s1, (1.0 - s1 * s1).sqrt(), s2, (1.0 - s2 * s2).sqrt()],
        ));
        let l = repulsion_loss(&mut tape, z, &protos, 0.0).unwrap();
        assert!((tape.value(l).item() - 0.15).abs() < 1e-9, "{}", tape.value(l).item());
    }

    #[test]
    fn repulsion_gradient_decreases_best_similarity() {
        // single active-hinge feature: one gradient step must lower max cosine
        let protos = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let z0 = vec![0.8, 0.1, 0.4];
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(&[1, 3], z0.clone()));
        let l = repulsion_loss(&mut tape, z, &protos, 0.0).unwrap();
        let grads = tape.backward(l).unwrap();
        let g = grads.get(z).unwrap();
        let step = 0.1;
        let z1: Vec<f64> = z0.iter().zip(&g.data).map(|(v, d)| v - step * d).collect();
        let cos = |z: &[f64], w: &[f64]| {
            let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / nz
        };
        let best0 = cos(&z0, &[1.0, 0.0, 0.0]).max(cos(&z0, &[0.0, 1.0, 0.0]));
        let best1 = cos(&z1, &[1.0, 0.0, 0.0]).max(cos(&z1, &[0.0, 1.0, 0.0]));
        assert!(best1 < best0, "{best1} vs {best0}");
    }

    #[test]
    fn total_loss_combines_exactly() {
        let cfg = unit_cfg();
        let v = total_loss_value(1.0, 0.4, 0.2, &cfg).unwrap();
        assert!((v - 1.3).abs() < 1e-15);
        let mut zero = unit_cfg();
        zero.lambda_contrast = 0.0;
        zero.lambda_repulsion = 0.0;
        let p = 0.123456789;
        assert_eq!(total_loss_value(p, 9.9, 9.9, &zero).unwrap(), p);
        assert!(total_loss_value(f64::NAN, 0.0, 0.0, &cfg).is_err());
    }

    #[test]
    fn kmeans_single_center_is_normalized_mean() {
        let points = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let centers = spherical_kmeans(&points, 1, 7).unwrap();
        let e = (0.5f64).sqrt();
        assert!((centers[0][0] - e).abs() < 1e-12);
        assert!((centers[0][1] - e).abs() < 1e-12);
    }

    #[test]
    fn kmeans_separates_antipodal_clusters() {
        let mut points = Vec::new();
        for i in 0..6 {
            let eps = 0.01 * i as f64;
            points.push(vec![1.0, eps]);
            points.push(vec![-1.0, -eps]);
        }
        let centers = spherical_kmeans(&points, 2, 3).unwrap();
        // exhaustive check over the 2-partitions of 12 points is overkill here:
        // the two optimal centers are (+-1, ~0); check against normalized means
        let mut plus = vec![0.0; 2];
        let mut minus = vec![0.0; 2];
        for p in &points {
            let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if p[0] > 0.0 {
                plus[0] += p[0] / n;
                plus[1] += p[1] / n;
            } else {
                minus[0] += p[0] / n;
                minus[1] += p[1] / n;
            }
        }
        for v in [&mut plus, &mut minus] {
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            v[0] /= n;
            v[1] /= n;
        }
        let close_to = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) < 1e-3
        };
        let ok = (close_to(&centers[0], &plus) && close_to(&centers[1], &minus))
            || (close_to(&centers[0], &minus) && close_to(&centers[1], &plus));
        assert!(ok, "centers {centers:?}");
    }

    #[test]
    fn kmeans_identical_points_collapse() {
        let points = vec![vec![0.0, 3.0]; 5];
        let centers = spherical_kmeans(&points, 1, 1).unwrap();
        assert!((centers[0][1] - 1.0).abs() < 1e-12);
        let labels = assign_pseudo_labels(&points, &centers);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn aux_loss_balance_term_behaviour() {
        let cfg = ModelConfig {
            canvas: (16, 16),
            conv_channels: [4, 4],
            feat_channels: 4,
            embed_dim: 4,
            num_queries: 4,
            num_classes: 3,
            aux_head: Some((8, 2)),
        };
        let model = QueryModel::init(cfg, 5).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let head = model.aux_head_vars(&bound).unwrap();
        let protos = tape.leaf(Tensor::from_vec(&[2, 4], vec![0.4; 8]));
        // k_aux < 2 rejected
        assert!(aux_loss(&mut tape, protos, &[0, 1], &head, 1, 1.0).is_err());
        let l = aux_loss(&mut tape, protos, &[0, 1], &head, 2, 0.5).unwrap();
        assert!(tape.value(l).item().is_finite());
    }

    #[test]
    fn aux_loss_one_hot_aligned_with_uniform_mean_is_near_zero() {
        // two prototypes, two clusters: saturated logits agreeing with the
        // pseudo-labels, one per cluster, make both CE and the KL term vanish
        let cfg = ModelConfig {
            canvas: (16, 16),
            conv_channels: [4, 4],
            feat_channels: 2,
            embed_dim: 4,
            num_queries: 4,
            num_classes: 3,
            aux_head: Some((2, 2)),
        };
        let mut model = QueryModel::init(cfg, 5).unwrap();
        // hand-craft the head: identity-ish map from 2-d prototypes to logits
        let n = model.tensors().len();
        model.tensors_mut()[n - 4] =
            Tensor::from_vec(&[2, 2], vec![30.0, 0.0, 0.0, 30.0]); // w1
        model.tensors_mut()[n - 3] = Tensor::from_vec(&[2], vec![0.0, 0.0]); // b1
        model.tensors_mut()[n - 2] =
            Tensor::from_vec(&[2, 2], vec![2.0, -2.0, -2.0, 2.0]); // w2
        model.tensors_mut()[n - 1] = Tensor::from_vec(&[2], vec![0.0, 0.0]); // b2
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let head = model.aux_head_vars(&bound).unwrap();
        let protos = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let l = aux_loss(&mut tape, protos, &[0, 1], &head, 2, 1.0).unwrap();
        assert!(tape.value(l).item() < 1e-3, "joint optimum: {}", tape.value(l).item());
    }

    #[test]
    fn aux_loss_degenerate_mean_distribution_is_ln_k() {
        // logits put all mass on cluster 0 for every row; with lambda_bal = 1
        // the balance term alone is ln 2; the CE term is ~0 for label 0.
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[2, 2], vec![40.0, -40.0, 40.0, -40.0]));
        let probs = tape.softmax_rows(logits);
        let pbar = tape.mean_rows(probs);
        let safe = tape.add_const(pbar, 1e-12);
        let logp = tape.log(safe);
        let shifted = tape.add_const(logp, (2.0f64).ln());
        let terms = tape.mul_elem(pbar, shifted);
        let kl = tape.sum_all(terms);
        assert!((tape.value(kl).item() - (2.0f64).ln()).abs() < 1e-9);

        // uniform mean distribution -> 0
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[2, 2], vec![40.0, -40.0, -40.0, 40.0]));
        let probs = tape.softmax_rows(logits);
        let pbar = tape.mean_rows(probs);
        let safe = tape.add_const(pbar, 1e-12);
        let logp = tape.log(safe);
        let shifted = tape.add_const(logp, (2.0f64).ln());
        let terms = tape.mul_elem(pbar, shifted);
        let kl = tape.sum_all(terms);
        assert!(tape.value(kl).item().abs() < 1e-9);
    }
}
