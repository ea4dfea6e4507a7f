//! Experiment configuration: flat TOML with dotted keys, every hyperparameter
//! explicit and seeded. Unknown keys are rejected so typos fail fast.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use panlab_core::future_aware::{AuxConfig, FutureAwareConfig, PrototypeSource};
use panlab_core::model::{InferenceConfig, LossWeights, ModelConfig};
use panlab_core::optim::AdamWConfig;
use panlab_core::scenes::{PresencePlan, SceneSpec};
use panlab_core::stream::{StreamConfig, StreamMode};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub stream: StreamSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub future_aware: FutureAwareSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub base_iterations: usize,
    pub increment_iterations: usize,
    /// Evaluate only after the final step (sweeps); default evaluates per step.
    #[serde(default)]
    pub eval_final_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    #[serde(default = "DatasetSection::default_canvas")]
    pub canvas: usize,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    #[serde(default = "DatasetSection::default_min_things")]
    pub min_things: usize,
    #[serde(default = "DatasetSection::default_max_things")]
    pub max_things: usize,
    #[serde(default = "DatasetSection::default_stuff_regions")]
    pub stuff_regions: usize,
    #[serde(default = "DatasetSection::default_min_visible")]
    pub min_visible_pixels: usize,
    #[serde(default = "DatasetSection::default_jitter")]
    pub color_jitter: f64,
    #[serde(default = "DatasetSection::default_noise")]
    pub pixel_noise: f64,
    #[serde(default = "DatasetSection::default_margin")]
    pub color_margin: f64,
    /// Force every class into at least this fraction of images (0 disables).
    #[serde(default)]
    pub presence_fraction: f64,
    /// Pairs `[a, b]`: class `a` takes a color close to class `b`'s
    /// (offset by `mimic_offset` on one channel).
    #[serde(default)]
    pub mimic: Vec<[u32; 2]>,
    #[serde(default = "DatasetSection::default_mimic_offset")]
    pub mimic_offset: f64,
}

impl DatasetSection {
    fn default_canvas() -> usize {
        64
    }
    fn default_min_things() -> usize {
        1
    }
    fn default_max_things() -> usize {
        4
    }
    fn default_stuff_regions() -> usize {
        2
    }
    fn default_min_visible() -> usize {
        12
    }
    fn default_jitter() -> f64 {
        0.04
    }
    fn default_noise() -> f64 {
        0.02
    }
    fn default_margin() -> f64 {
        0.05
    }
    fn default_mimic_offset() -> f64 {
        0.08
    }

    pub fn num_classes(&self) -> u32 {
        (self.thing_classes + self.stuff_classes) as u32
    }

    pub fn scene_spec(&self) -> anyhow::Result<SceneSpec> {
        let mut spec = SceneSpec::toy(self.thing_classes, self.stuff_classes, self.canvas, self.canvas);
        spec.min_things = self.min_things;
        spec.max_things = self.max_things;
        spec.stuff_regions = self.stuff_regions;
        spec.min_visible_pixels = self.min_visible_pixels;
        spec.pixel_noise = self.pixel_noise;
        spec.color_margin = self.color_margin;
        for app in spec.appearance.iter_mut() {
            app.jitter = self.color_jitter;
        }
        for &[a, b] in &self.mimic {
            if a == 0 || b == 0 || a > self.num_classes() || b > self.num_classes() {
                anyhow::bail!("mimic pair [{a}, {b}] references unknown classes");
            }
            let base = spec.appearance[(b - 1) as usize].color;
            // shift one channel, picking the one with the most headroom
            let ch = base
                .iter()
                .enumerate()
                .max_by(|(_, x), (_, y)| {
                    let hx = (1.0 - **x).max(**x);
                    let hy = (1.0 - **y).max(**y);
                    hx.partial_cmp(&hy).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut color = base;
            color[ch] = if color[ch] + self.mimic_offset <= 1.0 {
                color[ch] + self.mimic_offset
            } else {
                color[ch] - self.mimic_offset
            };
            spec.appearance[(a - 1) as usize].color = color;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn presence_plan(&self, n_images: usize) -> Option<PresencePlan> {
        if self.presence_fraction <= 0.0 {
            return None;
        }
        let per_class = ((self.presence_fraction * n_images as f64).ceil() as usize).min(n_images);
        Some((1..=self.num_classes()).map(|c| (c, per_class)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub base_count: usize,
    pub increment_size: usize,
    /// Absent = ascending class ids.
    #[serde(default)]
    pub class_order_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub mode: StreamMode,
    pub seed: u64,
    #[serde(default)]
    pub images_per_increment: Option<usize>,
    #[serde(default = "StreamSection::default_fraction")]
    pub subsample_fraction: f64,
}

impl StreamSection {
    fn default_fraction() -> f64 {
        1.0
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            mode: self.mode,
            images_per_increment: self.images_per_increment,
            subsample_fraction: self.subsample_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "ModelSection::default_conv")]
    pub conv_channels: [usize; 2],
    #[serde(default = "ModelSection::default_feat")]
    pub feat_channels: usize,
    #[serde(default = "ModelSection::default_dim")]
    pub embed_dim: usize,
    #[serde(default = "ModelSection::default_queries")]
    pub num_queries: usize,
    #[serde(default = "ModelSection::default_init_seed")]
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            conv_channels: Self::default_conv(),
            feat_channels: Self::default_feat(),
            embed_dim: Self::default_dim(),
            num_queries: Self::default_queries(),
            init_seed: Self::default_init_seed(),
        }
    }
}

impl ModelSection {
    fn default_conv() -> [usize; 2] {
        [16, 32]
    }
    fn default_feat() -> usize {
        32
    }
    fn default_dim() -> usize {
        32
    }
    fn default_queries() -> usize {
        16
    }
    fn default_init_seed() -> u64 {
        9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "OptimizerSection::default_lr")]
    pub lr: f64,
    #[serde(default = "OptimizerSection::default_wd")]
    pub weight_decay: f64,
    #[serde(default = "OptimizerSection::default_beta1")]
    pub beta1: f64,
    #[serde(default = "OptimizerSection::default_beta2")]
    pub beta2: f64,
    #[serde(default = "OptimizerSection::default_eps")]
    pub eps: f64,
    #[serde(default = "OptimizerSection::default_batch")]
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: Self::default_lr(),
            weight_decay: Self::default_wd(),
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
            batch_size: Self::default_batch(),
        }
    }
}

impl OptimizerSection {
    fn default_lr() -> f64 {
        5e-5
    }
    fn default_wd() -> f64 {
        1e-4
    }
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }
    fn default_batch() -> usize {
        8
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "LossSection::default_cls")]
    pub lambda_cls: f64,
    #[serde(default = "LossSection::default_bce")]
    pub lambda_bce: f64,
    #[serde(default = "LossSection::default_dice")]
    pub lambda_dice: f64,
    #[serde(default = "LossSection::default_no_object")]
    pub no_object_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_cls: Self::default_cls(),
            lambda_bce: Self::default_bce(),
            lambda_dice: Self::default_dice(),
            no_object_weight: Self::default_no_object(),
        }
    }
}

impl LossSection {
    fn default_cls() -> f64 {
        2.0
    }
    fn default_bce() -> f64 {
        5.0
    }
    fn default_dice() -> f64 {
        5.0
    }
    fn default_no_object() -> f64 {
        0.1
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_bce: self.lambda_bce,
            lambda_dice: self.lambda_dice,
            no_object_weight: self.no_object_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    #[serde(default = "InferenceSection::default_score")]
    pub score_threshold: f64,
    #[serde(default = "InferenceSection::default_mask")]
    pub mask_threshold: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            score_threshold: Self::default_score(),
            mask_threshold: Self::default_mask(),
        }
    }
}

impl InferenceSection {
    fn default_score() -> f64 {
        0.5
    }
    fn default_mask() -> f64 {
        0.5
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            score_threshold: self.score_threshold,
            mask_threshold: self.mask_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FutureAwareSection {
    #[serde(default = "default_true")]
    pub rc: bool,
    #[serde(default = "default_true")]
    pub kfr: bool,
    #[serde(default = "FutureAwareSection::default_tau_mask")]
    pub tau_mask: f64,
    #[serde(default = "FutureAwareSection::default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "FutureAwareSection::default_lambda")]
    pub lambda_contrast: f64,
    #[serde(default = "FutureAwareSection::default_lambda")]
    pub lambda_repulsion: f64,
    #[serde(default = "FutureAwareSection::default_ppr")]
    pub pixels_per_region: usize,
    #[serde(default = "FutureAwareSection::default_min_region")]
    pub min_region_pixels: usize,
    #[serde(default = "FutureAwareSection::default_confidence")]
    pub confidence_min: f64,
    #[serde(default = "FutureAwareSection::default_majority")]
    pub majority_fraction: f64,
    #[serde(default = "FutureAwareSection::default_unlabeled")]
    pub unlabeled_samples: usize,
    #[serde(default)]
    pub base_step_only: bool,
    #[serde(default = "FutureAwareSection::default_source")]
    pub prototype_source: PrototypeSource,
    #[serde(default)]
    pub aux: AuxSection,
}

impl Default for FutureAwareSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

impl FutureAwareSection {
    fn default_tau_mask() -> f64 {
        0.5
    }
    fn default_temperature() -> f64 {
        0.07
    }
    fn default_lambda() -> f64 {
        0.5
    }
    fn default_ppr() -> usize {
        70
    }
    fn default_min_region() -> usize {
        10
    }
    fn default_confidence() -> f64 {
        0.7
    }
    fn default_majority() -> f64 {
        0.5
    }
    fn default_unlabeled() -> usize {
        256
    }
    fn default_source() -> PrototypeSource {
        PrototypeSource::ClassifierRows
    }

    pub fn future_aware(&self) -> FutureAwareConfig {
        FutureAwareConfig {
            rc_enabled: self.rc,
            kfr_enabled: self.kfr,
            tau_mask: self.tau_mask,
            temperature: self.temperature,
            margin: self.margin,
            lambda_contrast: self.lambda_contrast,
            lambda_repulsion: self.lambda_repulsion,
            pixels_per_region: self.pixels_per_region,
            min_region_pixels: self.min_region_pixels,
            confidence_min: self.confidence_min,
            majority_fraction: self.majority_fraction,
            unlabeled_samples: self.unlabeled_samples,
            base_step_only: self.base_step_only,
            prototype_source: self.prototype_source,
            aux: self.aux.aux_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "AuxSection::default_k")]
    pub k_aux: usize,
    #[serde(default = "AuxSection::default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "AuxSection::default_bal")]
    pub lambda_bal: f64,
    #[serde(default = "AuxSection::default_refresh")]
    pub refresh_period: u64,
    #[serde(default = "AuxSection::default_hidden")]
    pub hidden: usize,
}

impl Default for AuxSection {
    fn default() -> Self {
        AuxSection {
            enabled: false,
            k_aux: Self::default_k(),
            buffer_capacity: Self::default_capacity(),
            lambda_bal: Self::default_bal(),
            refresh_period: Self::default_refresh(),
            hidden: Self::default_hidden(),
        }
    }
}

impl AuxSection {
    fn default_k() -> usize {
        8
    }
    fn default_capacity() -> usize {
        256
    }
    fn default_bal() -> f64 {
        0.5
    }
    fn default_refresh() -> u64 {
        50
    }
    fn default_hidden() -> usize {
        32
    }

    pub fn aux_config(&self) -> AuxConfig {
        AuxConfig {
            enabled: self.enabled,
            k_aux: self.k_aux,
            buffer_capacity: self.buffer_capacity,
            lambda_bal: self.lambda_bal,
            refresh_period: self.refresh_period,
            hidden: self.hidden,
        }
    }
}

/// Ablation variants: which of the two mechanisms run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Rc,
    Kfr,
    Full,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::Baseline, Variant::Rc, Variant::Kfr, Variant::Full]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Rc => "rc",
            Variant::Kfr => "kfr",
            Variant::Full => "full",
        }
    }

    pub fn rc(&self) -> bool {
        matches!(self, Variant::Rc | Variant::Full)
    }

    pub fn kfr(&self) -> bool {
        matches!(self, Variant::Kfr | Variant::Full)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let k = self.dataset.num_classes();
        if self.schedule.base_count >= k as usize {
            anyhow::bail!(
                "schedule.base_count ({}) must be below the class count ({k})",
                self.schedule.base_count
            );
        }
        if self.schedule.increment_size == 0 {
            anyhow::bail!("schedule.increment_size must be >= 1");
        }
        if !(self.stream.subsample_fraction > 0.0 && self.stream.subsample_fraction <= 1.0) {
            anyhow::bail!("stream.subsample_fraction must lie in (0, 1]");
        }
        if self.optimizer.batch_size == 0 {
            anyhow::bail!("optimizer.batch_size must be >= 1");
        }
        if self.run.base_iterations == 0 || self.run.increment_iterations == 0 {
            anyhow::bail!("iteration counts must be >= 1");
        }
        self.dataset.scene_spec()?;
        let fa = self.future_aware.future_aware();
        fa.validate()?;
        if fa.kfr_enabled
            && fa.prototype_source == PrototypeSource::ClassifierRows
            && self.model.feat_channels != self.model.embed_dim
        {
            anyhow::bail!(
                "classifier-row prototypes compare dense features against classifier rows, \
                 which requires model.feat_channels == model.embed_dim \
                 ({} != {})",
                self.model.feat_channels,
                self.model.embed_dim
            );
        }
        self.model_config()?.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let aux = &self.future_aware.aux;
        Ok(ModelConfig {
            canvas: (self.dataset.canvas, self.dataset.canvas),
            conv_channels: self.model.conv_channels,
            feat_channels: self.model.feat_channels,
            embed_dim: self.model.embed_dim,
            num_queries: self.model.num_queries,
            num_classes: self.dataset.num_classes(),
            aux_head: aux.enabled.then_some((aux.hidden, aux.k_aux)),
        })
    }

    pub fn apply_variant(&mut self, variant: Variant) {
        self.future_aware.rc = variant.rc();
        self.future_aware.kfr = variant.kfr();
    }

    /// Stable content hash of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
seed = 7
base_iterations = 10
increment_iterations = 5

[dataset]
seed = 1
train_images = 12
val_images = 4
test_images = 4
thing_classes = 6
stuff_classes = 2

[schedule]
base_count = 6
increment_size = 1

[stream]
mode = "overlap"
seed = 3
"#;

    #[test]
    fn minimal_config_parses_with_paper_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.future_aware.lambda_contrast, 0.5);
        assert_eq!(cfg.future_aware.lambda_repulsion, 0.5);
        assert_eq!(cfg.future_aware.tau_mask, 0.5);
        assert_eq!(cfg.future_aware.temperature, 0.07);
        assert_eq!(cfg.future_aware.margin, 0.0);
        assert_eq!(cfg.future_aware.pixels_per_region, 70);
        assert_eq!(cfg.optimizer.lr, 5e-5);
        assert_eq!(cfg.optimizer.batch_size, 8);
        assert!(cfg.schedule.class_order_seed.is_none());
        assert!(!cfg.future_aware.aux.enabled);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[funky]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("mode = \"overlap\"", "mode = \"overlap\"\ntypo_key = 2");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn variant_switches() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.apply_variant(Variant::Baseline);
        assert!(!cfg.future_aware.rc && !cfg.future_aware.kfr);
        cfg.apply_variant(Variant::Rc);
        assert!(cfg.future_aware.rc && !cfg.future_aware.kfr);
        cfg.apply_variant(Variant::Kfr);
        assert!(!cfg.future_aware.rc && cfg.future_aware.kfr);
        cfg.apply_variant(Variant::Full);
        assert!(cfg.future_aware.rc && cfg.future_aware.kfr);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_dims_with_classifier_prototypes_rejected() {
        let bad = format!("{MINIMAL}\n[model]\nfeat_channels = 16\nembed_dim = 32\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        // fine when repulsion is off
        let ok = format!(
            "{MINIMAL}\n[model]\nfeat_channels = 16\nembed_dim = 32\n\n[future_aware]\nkfr = false\n"
        );
        assert!(ExperimentConfig::from_toml(&ok).is_ok());
    }

    #[test]
    fn mimic_pulls_colors_together() {
        let cfg_toml = MINIMAL.replace(
            "thing_classes = 6",
            "thing_classes = 6\nmimic = [[7, 1]]",
        );
        let cfg = ExperimentConfig::from_toml(&cfg_toml).unwrap();
        let spec = cfg.dataset.scene_spec().unwrap();
        let d: f64 = spec.appearance[6]
            .color
            .iter()
            .zip(&spec.appearance[0].color)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((d - cfg.dataset.mimic_offset).abs() < 1e-9);
    }
}
