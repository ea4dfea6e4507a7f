//! A minimal differentiable query-based panoptic segmenter.
//!
//! Three conv stages (total stride 4) produce a dense mask-feature map `F`.
//! `Q` learned queries read it out through single-head dot-product attention,
//! giving per-query features `h`. Per-query mask logits are the dot product of
//! a projection of `h` with `F`, bilinearly upsampled to the input canvas.
//! A shared classifier covers the entire label space at every step plus one
//! extra "no-object" slot for set prediction.

use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::panoptic::{ClassId, LabelSpace, PanopticMap, Segment};
use crate::rng::rng_for;

pub const CONV_KERNEL: usize = 3;
pub const CONV_PAD: usize = 1;
/// Stage strides; the product is the feature-map downscale factor.
pub const CONV_STRIDES: [usize; 3] = [2, 2, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canvas: (usize, usize),
    /// Channel widths of the first two conv stages.
    pub conv_channels: [usize; 2],
    /// Mask-feature channels `C_f` (third stage output).
    pub feat_channels: usize,
    /// Query/classifier embedding dimension `d`.
    pub embed_dim: usize,
    pub num_queries: usize,
    /// Real classes `K`; the classifier has `K + 1` rows (last = no-object).
    pub num_classes: u32,
    /// Optional auxiliary clustering head: (hidden width, cluster count).
    pub aux_head: Option<(usize, usize)>,
}

impl ModelConfig {
    pub fn downscale(&self) -> usize {
        CONV_STRIDES.iter().product()
    }

    /// Feature-map spatial size.
    pub fn feat_hw(&self) -> (usize, usize) {
        (self.canvas.0 / self.downscale(), self.canvas.1 / self.downscale())
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.downscale();
        if self.canvas.0 % ds != 0 || self.canvas.1 % ds != 0 {
            return Err(Error::validation(format!(
                "canvas {}x{} must be divisible by the feature stride {ds}",
                self.canvas.0, self.canvas.1
            )));
        }
        if self.num_classes == 0 || self.num_queries == 0 || self.embed_dim == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        Ok(())
    }
}

/// Parameter tensors in registry order (see `param_shapes`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryModel {
    pub cfg: ModelConfig,
    tensors: Vec<Tensor>,
}

// registry indices
const P_CONV1_W: usize = 0;
const P_CONV1_B: usize = 1;
const P_CONV2_W: usize = 2;
const P_CONV2_B: usize = 3;
const P_CONV3_W: usize = 4;
const P_CONV3_B: usize = 5;
const P_QUERIES: usize = 6;
const P_KEY: usize = 7;
const P_VAL: usize = 8;
const P_MASK_W: usize = 9;
const P_MASK_B: usize = 10;
const P_CLS: usize = 11;
const P_AUX1_W: usize = 12;
const P_AUX1_B: usize = 13;
const P_AUX2_W: usize = 14;
const P_AUX2_B: usize = 15;

fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let [c1, c2] = cfg.conv_channels;
    let cf = cfg.feat_channels;
    let d = cfg.embed_dim;
    let q = cfg.num_queries;
    let k1 = cfg.num_classes as usize + 1;
    let mut shapes = vec![
        vec![c1, 3, CONV_KERNEL, CONV_KERNEL],
        vec![c1],
        vec![c2, c1, CONV_KERNEL, CONV_KERNEL],
        vec![c2],
        vec![cf, c2, CONV_KERNEL, CONV_KERNEL],
        vec![cf],
        vec![q, d],
        vec![d, cf],
        vec![d, cf],
        vec![cf, d],
        vec![cf],
        vec![k1, d],
    ];
    if let Some((hidden, k_aux)) = cfg.aux_head {
        shapes.push(vec![hidden, cf]);
        shapes.push(vec![hidden]);
        shapes.push(vec![k_aux, hidden]);
        shapes.push(vec![k_aux]);
    }
    shapes
}

impl QueryModel {
    /// Fresh model with fan-scaled uniform init, deterministic in `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shapes = param_shapes(&cfg);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let mut rng = rng_for(seed, "init", i as u64);
            let data = if shape.len() == 1 {
                vec![0.0; shape[0]]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let fan_out = shape[0];
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..shape.iter().product::<usize>())
                    .map(|_| rand::Rng::random_range(&mut rng, -limit..limit))
                    .collect()
            };
            tensors.push(Tensor::from_vec(shape, data));
        }
        Ok(QueryModel { cfg, tensors })
    }

    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = param_shapes(&cfg);
        if shapes.len() != tensors.len()
            || shapes.iter().zip(&tensors).any(|(s, t)| *s != t.shape)
        {
            return Err(Error::shape("tensor list does not match model configuration"));
        }
        Ok(QueryModel { cfg, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Classifier weights `[(K+1), d]`; row `c - 1` belongs to class `c`,
    /// the last row is the no-object slot.
    pub fn classifier(&self) -> &Tensor {
        &self.tensors[P_CLS]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    /// Put every parameter on a tape as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Run the model on one image (`[3, H, W]` constant node).
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], image: &Tensor) -> Result<ForwardVars> {
        let (hh, ww) = self.cfg.canvas;
        if image.shape != vec![3, hh, ww] {
            return Err(Error::shape(format!(
                "expected image [3, {hh}, {ww}], got {:?}",
                image.shape
            )));
        }
        if !image.is_finite() {
            return Err(Error::NonFinite("image contains non-finite values".into()));
        }
        let img = tape.constant(image.clone());
        let x1 = tape.conv2d(img, bound[P_CONV1_W], bound[P_CONV1_B], CONV_STRIDES[0], CONV_PAD);
        let x1 = tape.relu(x1);
        let x2 = tape.conv2d(x1, bound[P_CONV2_W], bound[P_CONV2_B], CONV_STRIDES[1], CONV_PAD);
        let x2 = tape.relu(x2);
        // linear output: mask features stay signed
        let features =
            tape.conv2d(x2, bound[P_CONV3_W], bound[P_CONV3_B], CONV_STRIDES[2], CONV_PAD);

        let (fh, fw) = self.cfg.feat_hw();
        let cf = self.cfg.feat_channels;
        let d = self.cfg.embed_dim;
        let spatial = fh * fw;
        let f_flat = tape.reshape(features, &[cf, spatial]);
        let keys = tape.matmul(bound[P_KEY], f_flat, false); // [d, S]
        let scores = tape.matmul(bound[P_QUERIES], keys, false); // [Q, S]
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let values = tape.matmul(bound[P_VAL], f_flat, false); // [d, S]
        let readout = tape.matmul(attn, values, true); // [Q, d]
        let query_feats = tape.add(readout, bound[P_QUERIES]);

        let class_logits = tape.matmul(query_feats, bound[P_CLS], true); // [Q, K+1]
        let mask_embed = tape.matmul(query_feats, bound[P_MASK_W], true); // [Q, Cf]
        let mask_embed = tape.add_row_vec(mask_embed, bound[P_MASK_B]);
        let mask_logits_flat = tape.matmul(mask_embed, f_flat, false); // [Q, S]
        let q = self.cfg.num_queries;
        let mask_logits_feat = tape.reshape(mask_logits_flat, &[q, fh, fw]);
        let mask_logits_full = tape.bilinear_up(mask_logits_feat, self.cfg.downscale());

        Ok(ForwardVars { features, query_feats, mask_logits_feat, mask_logits_full, class_logits })
    }

    /// Forward pass without gradients, returning plain values.
    pub fn infer(&self, image: &Tensor) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let bound: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let fv = self.forward(&mut tape, &bound, image)?;
        Ok(ModelOutput::from_vars(&mut tape, &fv))
    }

    pub fn aux_head_vars(&self, bound: &[Var]) -> Option<AuxHeadVars> {
        self.cfg.aux_head.map(|_| AuxHeadVars {
            w1: bound[P_AUX1_W],
            b1: bound[P_AUX1_B],
            w2: bound[P_AUX2_W],
            b2: bound[P_AUX2_B],
        })
    }
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    /// `[C_f, h', w']` dense mask features.
    pub features: Var,
    /// `[Q, d]` per-query features.
    pub query_feats: Var,
    /// `[Q, h', w']` mask logits at feature resolution.
    pub mask_logits_feat: Var,
    /// `[Q, H, W]` mask logits at canvas resolution.
    pub mask_logits_full: Var,
    /// `[Q, K+1]` class logits, last column no-object.
    pub class_logits: Var,
}

pub struct AuxHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain-value view of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[C_f, h', w']`
    pub features: Tensor,
    /// `[Q, d]`
    pub query_features: Tensor,
    /// Sigmoid mask probabilities at feature resolution `[Q, h', w']`.
    pub masks_feat: Tensor,
    /// Sigmoid mask probabilities at canvas resolution `[Q, H, W]`.
    pub masks_full: Tensor,
    /// `[Q, K+1]` class logits.
    pub logits: Tensor,
}

impl ModelOutput {
    pub fn from_vars(tape: &mut Tape, fv: &ForwardVars) -> Self {
        let sig = |t: &Tensor| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| sigmoid_val(x)).collect(),
        };
        ModelOutput {
            features: tape.value(fv.features).clone(),
            query_features: tape.value(fv.query_feats).clone(),
            masks_feat: sig(tape.value(fv.mask_logits_feat)),
            masks_full: sig(tape.value(fv.mask_logits_full)),
            logits: tape.value(fv.class_logits).clone(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.logits.shape[0]
    }

    /// Softmax class probabilities of one query (over K+1 slots).
    pub fn class_probs(&self, q: usize) -> Vec<f64> {
        let k1 = self.logits.shape[1];
        let row = &self.logits.data[q * k1..(q + 1) * k1];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }
}

/// Loss weights for matching and the supervised panoptic objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    /// Cross-entropy weight of unmatched (no-object) queries.
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 2.0, lambda_bce: 5.0, lambda_dice: 5.0, no_object_weight: 0.1 }
    }
}

const PROB_EPS: f64 = 1e-12;

fn bce_value(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Match ground-truth segments to queries by minimum assignment cost
/// (classification + mask BCE + dice, fixed weights). Returns
/// `(query, segment)` pairs; unmatched queries are implicitly no-object.
pub fn hungarian_match(
    output: &ModelOutput,
    gt_segments: &[Segment],
    weights: &LossWeights,
) -> Result<Vec<(usize, usize)>> {
    let q = output.num_queries();
    if gt_segments.len() > q {
        return Err(Error::validation(format!(
            "{} ground-truth segments exceed {q} queries",
            gt_segments.len()
        )));
    }
    if gt_segments.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (output.masks_full.shape[1], output.masks_full.shape[2]);
    let hw = h * w;
    let mask_sums: Vec<f64> = (0..q)
        .map(|qi| output.masks_full.data[qi * hw..(qi + 1) * hw].iter().sum())
        .collect();
    // all-background BCE per query; per-segment costs only correct on-segment pixels
    let bce_zero: Vec<f64> = (0..q)
        .map(|qi| {
            output.masks_full.data[qi * hw..(qi + 1) * hw]
                .iter()
                .map(|&m| bce_value(m, 0.0))
                .sum()
        })
        .collect();
    let probs: Vec<Vec<f64>> = (0..q).map(|qi| output.class_probs(qi)).collect();

    let mut cost = vec![vec![0.0f64; q]; gt_segments.len()];
    for (si, seg) in gt_segments.iter().enumerate() {
        let spix: Vec<usize> = seg
            .pixels
            .iter()
            .map(|&(r, c)| r as usize * w + c as usize)
            .collect();
        for qi in 0..q {
            let mask = &output.masks_full.data[qi * hw..(qi + 1) * hw];
            let mut bce_on = 0.0;
            let mut bce_off_correction = 0.0;
            let mut inter = 0.0;
            for &px in &spix {
                bce_on += bce_value(mask[px], 1.0);
                bce_off_correction += bce_value(mask[px], 0.0);
                inter += mask[px];
            }
            let bce = (bce_on + bce_zero[qi] - bce_off_correction) / hw as f64;
            let dice = 1.0 - (2.0 * inter + 1.0) / (mask_sums[qi] + spix.len() as f64 + 1.0);
            let cls = -probs[qi][(seg.class_id - 1) as usize];
            cost[si][qi] = weights.lambda_cls * cls
                + weights.lambda_bce * bce
                + weights.lambda_dice * dice;
        }
    }
    let assignment = min_cost_assignment(&cost);
    Ok(assignment.into_iter().enumerate().map(|(si, qi)| (qi, si)).collect())
}

/// Supervised panoptic loss for one image with a fixed assignment.
///
/// `L = lambda_cls * CE(class logits) + mean over matched pairs of
/// (lambda_bce * BCE + lambda_dice * Dice)` on canvas-resolution masks.
/// The assignment is treated as constant; gradients flow through logits and
/// mask logits only.
pub fn panoptic_loss_with_match(
    tape: &mut Tape,
    fv: &ForwardVars,
    gt_segments: &[Segment],
    assignment: &[(usize, usize)],
    num_classes: u32,
    weights: &LossWeights,
) -> Result<Var> {
    let q = tape.value(fv.class_logits).shape[0];
    let no_object = num_classes as usize;
    let mut targets = vec![no_object; q];
    let mut ce_weights = vec![weights.no_object_weight; q];
    for &(qi, si) in assignment {
        targets[qi] = (gt_segments[si].class_id - 1) as usize;
        ce_weights[qi] = 1.0;
    }
    let ce = tape.cross_entropy_mean(fv.class_logits, &targets, &ce_weights);

    let mut terms = vec![(ce, weights.lambda_cls)];
    if !assignment.is_empty() {
        let shape = tape.value(fv.mask_logits_full).shape.clone();
        let (h, w) = (shape[1], shape[2]);
        let hw = h * w;
        let flat = tape.reshape(fv.mask_logits_full, &[q, hw]);
        let per_pair = 1.0 / assignment.len() as f64;
        for &(qi, si) in assignment {
            let seg = &gt_segments[si];
            let mut target = vec![0.0f64; hw];
            for &(r, c) in &seg.pixels {
                target[r as usize * w + c as usize] = 1.0;
            }
            let row = tape.gather_rows(flat, &[qi]);
            let bce = tape.bce_with_logits_mean(row, &target);
            terms.push((bce, weights.lambda_bce * per_pair));

            let probs = tape.sigmoid(row);
            let tconst = tape.constant(Tensor::from_vec(&[1, hw], target.clone()));
            let pt = tape.mul_elem(probs, tconst);
            let inter = tape.sum_all(pt);
            let num = tape.scale(inter, 2.0);
            let num = tape.add_const(num, 1.0);
            let psum = tape.sum_all(probs);
            let tsum: f64 = target.iter().sum();
            let den = tape.add_const(psum, tsum + 1.0);
            let frac = tape.div_elem(num, den);
            let neg = tape.scale(frac, -1.0);
            let dice = tape.add_const(neg, 1.0);
            terms.push((dice, weights.lambda_dice * per_pair));
        }
    }
    Ok(tape.weighted_sum(&terms))
}

/// Match then score: the full supervised objective for one image whose
/// annotation is already masked to the current classes.
pub fn panoptic_loss(
    tape: &mut Tape,
    fv: &ForwardVars,
    output: &ModelOutput,
    gt: &PanopticMap,
    labels: &LabelSpace,
    weights: &LossWeights,
) -> Result<(Var, Vec<(usize, usize)>)> {
    if !output.logits.is_finite() || !output.masks_full.is_finite() {
        return Err(Error::NonFinite("model output contains NaN or Inf".into()));
    }
    let gt_segments = crate::panoptic::segments_from_map(gt, labels)?;
    let assignment = hungarian_match(output, &gt_segments, weights)?;
    let loss = panoptic_loss_with_match(
        tape,
        fv,
        &gt_segments,
        &assignment,
        labels.num_classes(),
        weights,
    )?;
    Ok((loss, assignment))
}

/// Thresholds used to turn query outputs into a panoptic map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Minimum best-class probability for a query to be kept.
    pub score_threshold: f64,
    /// Minimum mask probability for a pixel to be claimed.
    pub mask_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { score_threshold: 0.5, mask_threshold: 0.5 }
    }
}

/// Greedy panoptic inference: keep confident queries, give each pixel to the
/// kept query maximizing `score * mask`, merge stuff queries of equal class,
/// give thing queries distinct instance ids.
pub fn panoptic_inference(
    output: &ModelOutput,
    labels: &LabelSpace,
    cfg: &InferenceConfig,
) -> PanopticMap {
    let q = output.num_queries();
    let (h, w) = (output.masks_full.shape[1], output.masks_full.shape[2]);
    let hw = h * w;
    let k = labels.num_classes() as usize;

    struct Kept {
        query: usize,
        class: ClassId,
        score: f64,
    }
    let mut kept = Vec::new();
    for qi in 0..q {
        let probs = output.class_probs(qi);
        let (mut best_c, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (c, &p) in probs.iter().take(k).enumerate() {
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        if best_p >= cfg.score_threshold {
            kept.push(Kept { query: qi, class: (best_c + 1) as ClassId, score: best_p });
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; hw]; // index into kept
    for px in 0..hw {
        let mut best = f64::NEG_INFINITY;
        let mut who = None;
        for (ki, kq) in kept.iter().enumerate() {
            let m = output.masks_full.data[kq.query * hw + px];
            if m < cfg.mask_threshold {
                continue;
            }
            let v = kq.score * m;
            if v > best {
                best = v;
                who = Some(ki);
            }
        }
        owner[px] = who;
    }

    // instance ids in query order for thing queries that own pixels
    let mut instance_of: Vec<u32> = vec![0; kept.len()];
    let mut next_instance = 1u32;
    for (ki, kq) in kept.iter().enumerate() {
        if labels.is_thing(kq.class) && owner.iter().any(|o| *o == Some(ki)) {
            instance_of[ki] = next_instance;
            next_instance += 1;
        }
    }

    let mut map = PanopticMap::new_void(h, w);
    for px in 0..hw {
        if let Some(ki) = owner[px] {
            let kq = &kept[ki];
            map.set(px / w, px % w, kq.class, instance_of[ki]);
        }
    }
    map
}
