//! Lossless persistence: map containers, dataset directories, versioned
//! checkpoints, and deterministic CSV rendering.
//!
//! Binary layouts are little-endian with an 8-byte magic prefix. Floating
//! point values travel as raw IEEE-754 bits in binary containers and as
//! shortest round-trip decimal in JSON/CSV, so every format reproduces the
//! in-memory values exactly.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::future_aware::AuxState;
use crate::model::{ModelConfig, QueryModel};
use crate::optim::AdamWState;
use crate::panoptic::{ClassId, LabelSpace, PanopticMap};
use crate::scenes::SceneSample;

const MAP_MAGIC: &[u8; 8] = b"PANMAP01";
const SAMPLE_MAGIC: &[u8; 8] = b"PANSMP01";
const CKPT_MAGIC: &[u8; 8] = b"PLCKPT01";
const CKPT_VERSION: u32 = 1;

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Serialize a map together with its label space header.
pub fn write_map(w: &mut impl Write, map: &PanopticMap, labels: &LabelSpace) -> Result<()> {
    w.write_all(MAP_MAGIC)?;
    write_u32(w, labels.num_classes())?;
    for c in labels.class_ids() {
        w.write_all(&[labels.is_thing(c) as u8])?;
        let name = labels.name(c).as_bytes();
        write_u32(w, name.len() as u32)?;
        w.write_all(name)?;
    }
    write_u32(w, map.height() as u32)?;
    write_u32(w, map.width() as u32)?;
    for &v in map.semantic() {
        write_u32(w, v)?;
    }
    for &v in map.instance() {
        write_u32(w, v)?;
    }
    Ok(())
}

pub fn read_map(r: &mut impl Read) -> Result<(PanopticMap, LabelSpace)> {
    let magic = read_exact(r, 8)?;
    if magic != MAP_MAGIC {
        return Err(Error::Format("bad map magic".into()));
    }
    let k = read_u32(r)?;
    let mut entries = Vec::with_capacity(k as usize);
    for _ in 0..k {
        let thing = read_exact(r, 1)?[0] != 0;
        let len = read_u32(r)? as usize;
        let name = String::from_utf8(read_exact(r, len)?)
            .map_err(|_| Error::Format("invalid class name".into()))?;
        entries.push((name, thing));
    }
    let labels = LabelSpace::new(entries)?;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let mut semantic = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        semantic.push(read_u32(r)?);
    }
    let mut instance = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        instance.push(read_u32(r)?);
    }
    Ok((PanopticMap::from_grids(h, w, semantic, instance)?, labels))
}

/// One sample file: image grid as raw f64 bits plus the embedded map container.
pub fn write_sample(w: &mut impl Write, sample: &SceneSample, labels: &LabelSpace) -> Result<()> {
    w.write_all(SAMPLE_MAGIC)?;
    let (h, ww) = (sample.annotation.height(), sample.annotation.width());
    write_u32(w, h as u32)?;
    write_u32(w, ww as u32)?;
    if sample.image.len() != 3 * h * ww {
        return Err(Error::shape("image length does not match annotation canvas"));
    }
    for &v in &sample.image {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    write_map(w, &sample.annotation, labels)
}

pub fn read_sample(r: &mut impl Read) -> Result<(SceneSample, LabelSpace)> {
    let magic = read_exact(r, 8)?;
    if magic != SAMPLE_MAGIC {
        return Err(Error::Format("bad sample magic".into()));
    }
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let mut image = Vec::with_capacity(3 * h * w);
    for _ in 0..3 * h * w {
        let b = read_exact(r, 8)?;
        image.push(f64::from_bits(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ])));
    }
    let (annotation, labels) = read_map(r)?;
    let present_classes = annotation.present_classes();
    Ok((SceneSample { image, annotation, present_classes }, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_samples: usize,
    pub samples: Vec<DatasetSampleInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSampleInfo {
    pub id: usize,
    pub seed: u64,
    pub present_classes: Vec<ClassId>,
}

fn sample_file_name(id: usize) -> String {
    format!("sample_{id:05}.bin")
}

/// Persist a dataset: one file per sample plus a manifest.
pub fn save_dataset(
    dir: &Path,
    samples: &[SceneSample],
    labels: &LabelSpace,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, sample) in samples.iter().enumerate() {
        let mut f = std::fs::File::create(dir.join(sample_file_name(i)))?;
        write_sample(&mut f, sample, labels)?;
    }
    let manifest = DatasetManifest {
        seed,
        num_samples: samples.len(),
        samples: samples
            .iter()
            .enumerate()
            .map(|(i, s)| DatasetSampleInfo {
                id: i,
                seed: crate::rng::derive_seed(seed, "sample", i as u64),
                present_classes: s.present_classes.iter().copied().collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("dataset_manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<SceneSample>, LabelSpace, DatasetManifest)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("dataset_manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.num_samples);
    let mut space: Option<LabelSpace> = None;
    for i in 0..manifest.num_samples {
        let mut f = std::fs::File::open(dir.join(sample_file_name(i)))?;
        let (sample, labels) = read_sample(&mut f)?;
        match &space {
            Some(existing) if *existing != labels => {
                return Err(Error::Format("inconsistent label spaces across samples".into()))
            }
            None => space = Some(labels),
            _ => {}
        }
        samples.push(sample);
    }
    let labels = space.ok_or_else(|| Error::Format("empty dataset".into()))?;
    Ok((samples, labels, manifest))
}

/// Everything needed to resume a run from a step boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub tensors: Vec<Tensor>,
    pub optimizer: AdamWState,
    pub aux: AuxState,
    /// Last completed protocol step.
    pub completed_step: usize,
    /// Global training-iteration counter after that step.
    pub global_step: u64,
}

impl Checkpoint {
    pub fn of(
        model: &QueryModel,
        optimizer: &AdamWState,
        aux: &AuxState,
        completed_step: usize,
        global_step: u64,
    ) -> Self {
        Checkpoint {
            model_cfg: model.cfg.clone(),
            tensors: model.tensors().to_vec(),
            optimizer: optimizer.clone(),
            aux: aux.clone(),
            completed_step,
            global_step,
        }
    }

    pub fn restore_model(&self) -> Result<QueryModel> {
        QueryModel::from_tensors(self.model_cfg.clone(), self.tensors.clone())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    write_u32(&mut f, CKPT_VERSION)?;
    let payload = serde_json::to_vec(ckpt)?;
    write_u32(&mut f, payload.len() as u32)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_exact(&mut f, 8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut f)? as usize;
    let payload = read_exact(&mut f, len)?;
    Ok(serde_json::from_slice(&payload)?)
}

/// Shortest round-trip decimal rendering (empty string for absent values).
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write a CSV file with fixed header and rows; values must be pre-rendered.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Flat key/value rendering of a metric report (CSV columns + JSON object).
pub fn metric_report_csv_row(report: &crate::metrics::MetricReport) -> Vec<(String, String)> {
    report
        .kv_pairs()
        .into_iter()
        .map(|(k, v)| (k, fmt_opt(v)))
        .collect()
}

/// Classes present in any of the given maps (helper for eval subsets).
pub fn classes_present(maps: &[&PanopticMap]) -> BTreeSet<ClassId> {
    maps.iter().flat_map(|m| m.present_classes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;
    use crate::scenes::{generate_dataset, SceneSpec};

    #[test]
    fn map_container_round_trips() {
        let spec = SceneSpec::toy(3, 2, 24, 24);
        let sample = crate::scenes::generate_scene(&spec, 4).unwrap();
        let mut buf = Vec::new();
        write_map(&mut buf, &sample.annotation, &spec.labels).unwrap();
        let (map, labels) = read_map(&mut buf.as_slice()).unwrap();
        assert_eq!(map, sample.annotation);
        assert_eq!(labels, spec.labels);
    }

    #[test]
    fn sample_container_round_trips_bitwise() {
        let spec = SceneSpec::toy(3, 2, 24, 24);
        let sample = crate::scenes::generate_scene(&spec, 9).unwrap();
        let mut buf = Vec::new();
        write_sample(&mut buf, &sample, &spec.labels).unwrap();
        let (back, labels) = read_sample(&mut buf.as_slice()).unwrap();
        assert_eq!(back, sample);
        assert_eq!(labels, spec.labels);
    }

    #[test]
    fn dataset_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::toy(3, 2, 24, 24);
        let data = generate_dataset(&spec, 4, 77, None).unwrap();
        save_dataset(dir.path(), &data, &spec.labels, 77).unwrap();
        let (back, labels, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(labels, spec.labels);
        assert_eq!(manifest.num_samples, 4);
        assert_eq!(manifest.samples[2].id, 2);
        assert_eq!(
            manifest.samples[1].present_classes,
            data[1].present_classes.iter().copied().collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        use crate::model::ModelConfig;
        let cfg = ModelConfig {
            canvas: (16, 16),
            conv_channels: [4, 4],
            feat_channels: 8,
            embed_dim: 8,
            num_queries: 4,
            num_classes: 5,
            aux_head: None,
        };
        let model = QueryModel::init(cfg, 3).unwrap();
        let mut opt = AdamWState::new(model.tensors());
        opt.step = 17;
        opt.m[0].data[0] = 0.1234567890123456789;
        let aux = AuxState::default();
        let ckpt = Checkpoint::of(&model, &opt, &aux, 2, 350);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step_2.ckpt");
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.restore_model().unwrap();
        assert_eq!(restored.tensors(), model.tensors());
        let _ = AdamWConfig::default();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOTMAGIC".to_vec();
        assert!(read_map(&mut buf.as_slice()).is_err());
        assert!(read_checkpoint(Path::new("/nonexistent/x.ckpt")).is_err());
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 123456.789, 1e-17, 0.4] {
            let s = fmt_opt(Some(v));
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_opt(None), "");
    }
}
