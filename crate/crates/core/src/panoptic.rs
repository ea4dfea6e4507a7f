//! Canonical panoptic data model: label spaces, per-pixel annotation maps,
//! and segment extraction.
//!
//! Conventions shared by every module:
//! - class ids are `1..=K`; id `0` is reserved for void/unlabeled pixels,
//! - coordinates are `(row, col)` with the origin at the top-left,
//! - stuff pixels carry instance id `0`, thing pixels carry instance id `>= 1`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic class identifier. `0` is void and never part of a label space.
pub type ClassId = u32;

/// The fixed semantic label space: `K` classes, each either thing or stuff.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
    thing: Vec<bool>,
}

impl LabelSpace {
    /// Build from `(name, is_thing)` entries; entry `i` becomes class id `i + 1`.
    pub fn new(entries: Vec<(String, bool)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::validation("label space must contain at least one class"));
        }
        let (names, thing) = entries.into_iter().unzip();
        Ok(LabelSpace { names, thing })
    }

    pub fn num_classes(&self) -> u32 {
        self.names.len() as u32
    }

    pub fn contains(&self, class: ClassId) -> bool {
        class >= 1 && class <= self.num_classes()
    }

    /// Whether `class` is a thing class. Panics on ids outside `1..=K`.
    pub fn is_thing(&self, class: ClassId) -> bool {
        assert!(self.contains(class), "class id {class} outside label space");
        self.thing[(class - 1) as usize]
    }

    pub fn name(&self, class: ClassId) -> &str {
        assert!(self.contains(class), "class id {class} outside label space");
        &self.names[(class - 1) as usize]
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        1..=self.num_classes()
    }

    pub fn thing_ids(&self) -> Vec<ClassId> {
        self.class_ids().filter(|&c| self.is_thing(c)).collect()
    }

    pub fn stuff_ids(&self) -> Vec<ClassId> {
        self.class_ids().filter(|&c| !self.is_thing(c)).collect()
    }
}

/// Per-pixel panoptic annotation: a semantic grid and an instance grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticMap {
    height: usize,
    width: usize,
    semantic: Vec<ClassId>,
    instance: Vec<u32>,
}

impl PanopticMap {
    pub fn new_void(height: usize, width: usize) -> Self {
        PanopticMap {
            height,
            width,
            semantic: vec![0; height * width],
            instance: vec![0; height * width],
        }
    }

    pub fn from_grids(
        height: usize,
        width: usize,
        semantic: Vec<ClassId>,
        instance: Vec<u32>,
    ) -> Result<Self> {
        if semantic.len() != height * width || instance.len() != height * width {
            return Err(Error::shape(format!(
                "grids must be {}x{} = {} entries, got {} semantic / {} instance",
                height,
                width,
                height * width,
                semantic.len(),
                instance.len()
            )));
        }
        Ok(PanopticMap { height, width, semantic, instance })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    #[inline]
    pub fn semantic_at(&self, row: usize, col: usize) -> ClassId {
        self.semantic[self.idx(row, col)]
    }

    #[inline]
    pub fn instance_at(&self, row: usize, col: usize) -> u32 {
        self.instance[self.idx(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, class: ClassId, instance: u32) {
        let i = self.idx(row, col);
        self.semantic[i] = class;
        self.instance[i] = instance;
    }

    pub fn semantic(&self) -> &[ClassId] {
        &self.semantic
    }

    pub fn instance(&self) -> &[u32] {
        &self.instance
    }

    /// Check the map invariants against a label space:
    /// void pixels carry no instance, stuff pixels have instance 0, thing
    /// pixels have instance >= 1, and all ids lie inside the space.
    pub fn validate(&self, labels: &LabelSpace) -> Result<()> {
        for i in 0..self.semantic.len() {
            let (sem, inst) = (self.semantic[i], self.instance[i]);
            if sem == 0 {
                if inst != 0 {
                    return Err(Error::validation(format!(
                        "void pixel at index {i} carries instance id {inst}"
                    )));
                }
                continue;
            }
            if !labels.contains(sem) {
                return Err(Error::validation(format!(
                    "pixel at index {i} has class id {sem} outside 1..={}",
                    labels.num_classes()
                )));
            }
            if labels.is_thing(sem) {
                if inst == 0 {
                    return Err(Error::validation(format!(
                        "thing pixel of class {sem} at index {i} has instance id 0"
                    )));
                }
            } else if inst != 0 {
                return Err(Error::validation(format!(
                    "stuff pixel of class {sem} at index {i} has instance id {inst}"
                )));
            }
        }
        Ok(())
    }

    /// Class ids (excluding void) that appear anywhere in the map.
    pub fn present_classes(&self) -> BTreeSet<ClassId> {
        self.semantic.iter().copied().filter(|&c| c != 0).collect()
    }
}

/// A maximal group of pixels sharing one `(class_id, instance_id)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub class_id: ClassId,
    pub instance_id: u32,
    /// Sorted row-major `(row, col)` coordinates; never empty.
    pub pixels: Vec<(u16, u16)>,
}

/// Decompose a map into segments: one per distinct `(class, instance)` pair,
/// void pixels excluded. Segments come out sorted by `(class_id, instance_id)`.
pub fn segments_from_map(map: &PanopticMap, labels: &LabelSpace) -> Result<Vec<Segment>> {
    map.validate(labels)?;
    let mut groups: BTreeMap<(ClassId, u32), Vec<(u16, u16)>> = BTreeMap::new();
    for row in 0..map.height() {
        for col in 0..map.width() {
            let sem = map.semantic_at(row, col);
            if sem == 0 {
                continue;
            }
            let inst = map.instance_at(row, col);
            groups
                .entry((sem, inst))
                .or_default()
                .push((row as u16, col as u16));
        }
    }
    Ok(groups
        .into_iter()
        .map(|((class_id, instance_id), pixels)| Segment { class_id, instance_id, pixels })
        .collect())
}

/// Paint segments onto a void canvas; inverse of [`segments_from_map`].
pub fn map_from_segments(height: usize, width: usize, segments: &[Segment]) -> PanopticMap {
    let mut map = PanopticMap::new_void(height, width);
    for seg in segments {
        for &(r, c) in &seg.pixels {
            map.set(r as usize, c as usize, seg.class_id, seg.instance_id);
        }
    }
    map
}

/// Intersection-over-union of two sorted pixel sets. Empty union yields 0.
pub fn iou(a: &[(u16, u16)], b: &[(u16, u16)]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}
