//! Dataset manifest loading, fold management, and episode types.
//!
//! The harness never touches raw benchmark archives; it consumes a single
//! JSON manifest describing classes, folds, images, and per-instance
//! box/mask annotations. Image files are PNG, paths relative to the
//! manifest location.

mod sampler;
mod synth;

pub use sampler::{EpisodeSampler, SamplerParams};
pub use synth::{class_color, generate_synthetic_dataset, SceneSpec, ShapeKind, SYNTH_BACKGROUND};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskcore::{BinaryMask, BoundingBox, RleMask};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse: {0}")]
    Parse(String),
    #[error("manifest invariant: {0}")]
    Invariant(String),
    #[error("sampling capacity: {0}")]
    Capacity(String),
    #[error("synthetic generation: {0}")]
    Synth(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRecord {
    pub id: u32,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub mask: RleMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceRecord>,
}

impl ImageRecord {
    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.instances.iter().map(|i| i.class_id).collect()
    }

    pub fn contains_class(&self, class_id: u32) -> bool {
        self.instances.iter().any(|i| i.class_id == class_id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    name: String,
    classes: Vec<ClassRecord>,
    #[serde(default)]
    folds: Option<Vec<Vec<u32>>>,
    images: Vec<ImageRecord>,
}

/// Fully validated dataset: every invariant is checked eagerly at load.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub name: String,
    pub classes: Vec<ClassRecord>,
    pub folds: Vec<Vec<u32>>,
    pub images: Vec<ImageRecord>,
    /// Directory the manifest was loaded from; image paths resolve against it.
    pub root: PathBuf,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl DatasetIndex {
    pub fn load_manifest(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| DatasetError::Parse(format!("{}: {e}", path.display())))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_manifest(manifest, root)
    }

    fn from_manifest(manifest: Manifest, root: PathBuf) -> Result<Self, DatasetError> {
        let Manifest {
            name,
            classes,
            folds,
            images,
        } = manifest;

        let mut class_ids = BTreeSet::new();
        let mut labels_lower = BTreeSet::new();
        for c in &classes {
            if !class_ids.insert(c.id) {
                return Err(DatasetError::Invariant(format!(
                    "duplicate class id {}",
                    c.id
                )));
            }
            let lower = c.label.trim().to_lowercase();
            if lower.is_empty() || lower == "none" {
                return Err(DatasetError::Invariant(format!(
                    "class {} label {:?} collides with the answer grammar",
                    c.id, c.label
                )));
            }
            if !labels_lower.insert(lower) {
                return Err(DatasetError::Invariant(format!(
                    "class label {:?} is not unique (labels are matched case-insensitively)",
                    c.label
                )));
            }
        }

        let folds = match folds {
            Some(folds) => folds,
            None => default_folds(&classes),
        };
        let mut seen = BTreeSet::new();
        for (fi, fold) in folds.iter().enumerate() {
            for &cid in fold {
                if !class_ids.contains(&cid) {
                    return Err(DatasetError::Invariant(format!(
                        "fold {fi} references unknown class id {cid}"
                    )));
                }
                if !seen.insert(cid) {
                    return Err(DatasetError::Invariant(format!(
                        "class id {cid} appears in more than one fold"
                    )));
                }
            }
        }

        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut image_ids = BTreeSet::new();
        for (idx, img) in images.iter().enumerate() {
            if !image_ids.insert(img.image_id.clone()) {
                return Err(DatasetError::Invariant(format!(
                    "duplicate image id {:?}",
                    img.image_id
                )));
            }
            for inst in &img.instances {
                if !class_ids.contains(&inst.class_id) {
                    return Err(DatasetError::Invariant(format!(
                        "image {:?} references unknown class id {}",
                        img.image_id, inst.class_id
                    )));
                }
                if inst.mask.width != img.width || inst.mask.height != img.height {
                    return Err(DatasetError::Invariant(format!(
                        "image {:?}: instance mask is {}x{}, image is {}x{}",
                        img.image_id, inst.mask.width, inst.mask.height, img.width, img.height
                    )));
                }
                if inst.mask.area() == 0 {
                    return Err(DatasetError::Invariant(format!(
                        "image {:?}: instance of class {} has an empty mask",
                        img.image_id, inst.class_id
                    )));
                }
                if !inst.bbox.fits_in(img.width, img.height) {
                    return Err(DatasetError::Invariant(format!(
                        "image {:?}: instance box outside image bounds",
                        img.image_id
                    )));
                }
            }
            for cid in img.class_ids() {
                by_class.entry(cid).or_default().push(idx);
            }
        }

        Ok(Self {
            name,
            classes,
            folds,
            images,
            root,
            by_class,
        })
    }

    pub fn class_label(&self, class_id: u32) -> Option<&str> {
        self.classes
            .iter()
            .find(|c| c.id == class_id)
            .map(|c| c.label.as_str())
    }

    /// Indices of images containing at least one instance of `class_id`,
    /// in manifest order.
    pub fn images_with_class(&self, class_id: u32) -> &[usize] {
        self.by_class
            .get(&class_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn resolve_path(&self, image: &ImageRecord) -> PathBuf {
        self.root.join(&image.path)
    }
}

/// Fold layout used when the manifest omits `folds`: four contiguous
/// near-equal blocks in class-id order when there are at least four
/// classes (the 20-class benchmark splits into 4 sets of 5), otherwise a
/// single fold holding everything.
pub fn default_folds(classes: &[ClassRecord]) -> Vec<Vec<u32>> {
    let mut ids: Vec<u32> = classes.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.len() < 4 {
        return vec![ids];
    }
    contiguous_folds(&ids, 4)
}

/// Contiguous blocks in class-id order (Pascal-style partition).
pub fn contiguous_folds(sorted_ids: &[u32], n_folds: usize) -> Vec<Vec<u32>> {
    let chunk = sorted_ids.len().div_ceil(n_folds);
    sorted_ids.chunks(chunk).map(|c| c.to_vec()).collect()
}

/// Interleaved partition by `class_id % n_folds` (COCO-style).
pub fn interleaved_folds(ids: &[u32], n_folds: u32) -> Vec<Vec<u32>> {
    let mut folds = vec![Vec::new(); n_folds as usize];
    let mut sorted: Vec<u32> = ids.to_vec();
    sorted.sort_unstable();
    for id in sorted {
        folds[(id % n_folds) as usize].push(id);
    }
    folds
}

/// One labeled support exemplar: the k-th image of the n-th episode class.
#[derive(Debug, Clone)]
pub struct SupportExample {
    /// Episode class position, 1-based.
    pub class_position: u32,
    pub image_id: String,
    pub path: PathBuf,
    pub label: String,
    /// Carried for completeness but not handed to any backend in the
    /// default profile: the method works from image-level labels alone.
    pub mask: Option<RleMask>,
}

/// A ground-truth instance of one episode class inside the query image.
#[derive(Debug, Clone)]
pub struct QueryInstance {
    pub class_position: u32,
    pub bbox: BoundingBox,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    /// Episode-class positions present in the query (`y'`).
    pub true_label_set: BTreeSet<u32>,
    /// Per-class ground-truth masks, index `n-1`; empty when absent.
    pub truth_masks: Vec<BinaryMask>,
    /// All episode-class instances, for oracle backends.
    pub instances: Vec<QueryInstance>,
}

/// One N-way K-shot task: N*K support exemplars plus a query record.
#[derive(Debug, Clone)]
pub struct Episode {
    pub episode_index: u64,
    pub fold: u32,
    pub n_ways: u32,
    pub k_shots: u32,
    /// Global class ids; episode class `n` is position `n` (1-based).
    pub class_ids: Vec<u32>,
    /// Class labels aligned with `class_ids`.
    pub labels: Vec<String>,
    pub support: Vec<SupportExample>,
    pub query: QueryRecord,
}

impl Episode {
    pub fn label_of(&self, class_position: u32) -> &str {
        &self.labels[(class_position - 1) as usize]
    }
}
