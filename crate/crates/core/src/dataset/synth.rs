//! Synthetic scene generator for oracle testing.
//!
//! Scenes are flat-colored shapes (rectangles, diamonds, crosses) on a dark
//! background; every instance's box and mask are exact by construction, so
//! a pipeline built from oracle backends must score perfectly on them.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{default_folds, ClassRecord, DatasetError, ImageRecord, InstanceRecord};
use crate::maskcore::{BinaryMask, BoundingBox};
use crate::seeding::rng_from_parts;

/// Background color of generated scenes; the stub server relies on it to
/// tell shape pixels apart from empty canvas.
pub const SYNTH_BACKGROUND: [u8; 3] = [24, 24, 24];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Diamond,
    Cross,
}

impl ShapeKind {
    fn word(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub name: String,
    pub image_width: u32,
    pub image_height: u32,
    pub num_classes: u32,
    pub num_images: u32,
    /// Inclusive range of distinct classes appearing per image.
    pub classes_per_image: [u32; 2],
    /// Inclusive range of instances per present class.
    pub instances_per_class: [u32; 2],
    /// Inclusive range of shape extents in pixels.
    pub instance_size: [u32; 2],
    pub allow_overlap: bool,
    /// Per-class shapes; defaults to cycling rectangle/diamond/cross.
    pub shapes: Option<Vec<ShapeKind>>,
    /// Fold layout written into the manifest; defaults to [`default_folds`].
    pub folds: Option<Vec<Vec<u32>>>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            image_width: 64,
            image_height: 64,
            num_classes: 2,
            num_images: 20,
            classes_per_image: [1, 2],
            instances_per_class: [1, 2],
            instance_size: [8, 16],
            allow_overlap: false,
            shapes: None,
            folds: None,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        let err = |msg: String| Err(DatasetError::Synth(msg));
        if self.num_classes == 0 || self.num_images == 0 {
            return err("spec must declare at least one class and one image".into());
        }
        if self.classes_per_image[0] == 0
            || self.classes_per_image[0] > self.classes_per_image[1]
            || self.classes_per_image[1] > self.num_classes
        {
            return err(format!(
                "classes_per_image {:?} invalid for {} classes",
                self.classes_per_image, self.num_classes
            ));
        }
        if self.instances_per_class[0] == 0
            || self.instances_per_class[0] > self.instances_per_class[1]
        {
            return err(format!("instances_per_class {:?} invalid", self.instances_per_class));
        }
        let max_side = self.image_width.min(self.image_height);
        if self.instance_size[0] < 3
            || self.instance_size[0] > self.instance_size[1]
            || self.instance_size[1] > max_side
        {
            return err(format!(
                "instance_size {:?} invalid for {}x{} images",
                self.instance_size, self.image_width, self.image_height
            ));
        }
        if let Some(shapes) = &self.shapes {
            if shapes.len() != self.num_classes as usize {
                return err("shapes list must have one entry per class".into());
            }
        }
        Ok(())
    }

    fn shape_of(&self, class_index: usize) -> ShapeKind {
        match &self.shapes {
            Some(shapes) => shapes[class_index],
            None => [ShapeKind::Rectangle, ShapeKind::Diamond, ShapeKind::Cross]
                [class_index % 3],
        }
    }
}

/// Distinct flat fill color per class, spaced around the hue wheel.
pub fn class_color(class_index: usize, num_classes: usize) -> [u8; 3] {
    let hue = (class_index as f64 * 360.0 / num_classes.max(1) as f64 + 17.0) % 360.0;
    hsv_to_rgb(hue, 0.8, 0.85)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

struct Placement {
    class_id: u32,
    bbox: BoundingBox,
    mask: BinaryMask,
}

/// Write PNG scenes plus a valid manifest under `out_dir`; returns the
/// manifest path. Byte-identical output for identical (spec, seed).
pub fn generate_synthetic_dataset(
    spec: &SceneSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, DatasetError> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let classes: Vec<ClassRecord> = (0..spec.num_classes as usize)
        .map(|i| ClassRecord {
            id: (i + 1) as u32,
            label: format!("{} {}", spec.shape_of(i).word(), i + 1),
        })
        .collect();
    let colors: Vec<[u8; 3]> = (0..spec.num_classes as usize)
        .map(|i| class_color(i, spec.num_classes as usize))
        .collect();

    let mut rng = rng_from_parts("vise.synth", &[&seed.to_le_bytes()]);
    let mut images = Vec::with_capacity(spec.num_images as usize);
    for img_idx in 0..spec.num_images {
        let placements = place_scene(spec, &mut rng)
            .map_err(|e| DatasetError::Synth(format!("image {img_idx}: {e}")))?;

        let mut canvas = image::RgbImage::from_pixel(
            spec.image_width,
            spec.image_height,
            image::Rgb(SYNTH_BACKGROUND),
        );
        for p in &placements {
            let color = image::Rgb(colors[(p.class_id - 1) as usize]);
            for y in p.bbox.y_min..p.bbox.y_max {
                for x in p.bbox.x_min..p.bbox.x_max {
                    if p.mask.get(x, y) {
                        canvas.put_pixel(x, y, color);
                    }
                }
            }
        }
        let rel_path = format!("images/img_{img_idx:05}.png");
        canvas
            .save(out_dir.join(&rel_path))
            .map_err(|e| DatasetError::Synth(format!("png write: {e}")))?;

        images.push(ImageRecord {
            image_id: format!("img_{img_idx:05}"),
            path: rel_path,
            width: spec.image_width,
            height: spec.image_height,
            instances: placements
                .into_iter()
                .map(|p| InstanceRecord {
                    class_id: p.class_id,
                    bbox: p.bbox,
                    mask: p.mask.to_rle(),
                })
                .collect(),
        });
    }

    let manifest = serde_json::json!({
        "name": spec.name,
        "classes": classes,
        "folds": spec.folds.clone().unwrap_or_else(|| default_folds(&classes)),
        "images": images,
    });
    let manifest_path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatasetError::Synth(e.to_string()))?;
    text.push('\n');
    std::fs::write(&manifest_path, text)?;
    Ok(manifest_path)
}

fn place_scene(
    spec: &SceneSpec,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<Placement>, String> {
    'attempt: for _ in 0..50 {
        let n_classes = rng.random_range(spec.classes_per_image[0]..=spec.classes_per_image[1]);
        let mut pool: Vec<u32> = (1..=spec.num_classes).collect();
        for i in 0..n_classes as usize {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(n_classes as usize);

        let mut placements: Vec<Placement> = Vec::new();
        for &class_id in &pool {
            let count = rng.random_range(spec.instances_per_class[0]..=spec.instances_per_class[1]);
            let mut placed_any = false;
            for _ in 0..count {
                if let Some(p) = try_place(spec, class_id, &placements, rng) {
                    placements.push(p);
                    placed_any = true;
                }
            }
            if !placed_any {
                continue 'attempt; // a chosen class must appear at least once
            }
        }
        return Ok(placements);
    }
    Err("could not place every chosen class; shrink instances or grow the canvas".into())
}

fn try_place(
    spec: &SceneSpec,
    class_id: u32,
    existing: &[Placement],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<Placement> {
    let shape = spec.shape_of((class_id - 1) as usize);
    for _ in 0..100 {
        let (bw, bh) = match shape {
            ShapeKind::Rectangle => (
                rng.random_range(spec.instance_size[0]..=spec.instance_size[1]),
                rng.random_range(spec.instance_size[0]..=spec.instance_size[1]),
            ),
            ShapeKind::Diamond | ShapeKind::Cross => {
                // odd extent keeps diamonds symmetric
                let s = rng.random_range(spec.instance_size[0]..=spec.instance_size[1]);
                let s = if s % 2 == 0 { s - 1 } else { s };
                (s, s)
            }
        };
        let x0 = rng.random_range(0..=spec.image_width - bw);
        let y0 = rng.random_range(0..=spec.image_height - bh);
        let bbox = BoundingBox::new(x0, y0, x0 + bw, y0 + bh).ok()?;
        if !spec.allow_overlap
            && existing.iter().any(|p| boxes_intersect(p.bbox, bbox))
        {
            continue;
        }
        let mask = rasterize(shape, bbox, spec.image_width, spec.image_height);
        return Some(Placement {
            class_id,
            bbox,
            mask,
        });
    }
    None
}

fn boxes_intersect(a: BoundingBox, b: BoundingBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

fn rasterize(shape: ShapeKind, bbox: BoundingBox, width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height).expect("positive dims");
    match shape {
        ShapeKind::Rectangle => {
            mask = BinaryMask::from_box(bbox, width, height).expect("in bounds");
        }
        ShapeKind::Diamond => {
            let r = (bbox.width() - 1) / 2;
            let (cx, cy) = (bbox.x_min + r, bbox.y_min + r);
            for y in bbox.y_min..bbox.y_max {
                for x in bbox.x_min..bbox.x_max {
                    let d = x.abs_diff(cx) + y.abs_diff(cy);
                    if d <= r {
                        mask.set(x, y, true).expect("in bounds");
                    }
                }
            }
        }
        ShapeKind::Cross => {
            let s = bbox.width();
            let t = (s / 3).max(1);
            let off = (s - t) / 2;
            for y in bbox.y_min..bbox.y_max {
                for x in bbox.x_min..bbox.x_max {
                    let in_h = y >= bbox.y_min + off && y < bbox.y_min + off + t;
                    let in_v = x >= bbox.x_min + off && x < bbox.x_min + off + t;
                    if in_h || in_v {
                        mask.set(x, y, true).expect("in bounds");
                    }
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetIndex;

    #[test]
    fn generated_manifest_validates() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default(); // 2 classes, 20 images, 1-2 instances
        let manifest = generate_synthetic_dataset(&spec, 11, dir.path()).unwrap();
        let index = DatasetIndex::load_manifest(&manifest).unwrap();
        assert_eq!(index.classes.len(), 2);
        assert_eq!(index.images.len(), 20);
        for img in &index.images {
            for inst in &img.instances {
                assert!(inst.mask.area() > 0);
            }
            assert!(dir.path().join(&img.path).exists());
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let m1 = generate_synthetic_dataset(&spec, 42, d1.path()).unwrap();
        let m2 = generate_synthetic_dataset(&spec, 42, d2.path()).unwrap();
        assert_eq!(
            std::fs::read(&m1).unwrap(),
            std::fs::read(&m2).unwrap(),
            "manifests differ between identical runs"
        );
        let m3 = generate_synthetic_dataset(&spec, 43, d2.path()).unwrap();
        assert_ne!(std::fs::read(&m1).unwrap(), std::fs::read(&m3).unwrap());
    }

    #[test]
    fn non_overlapping_per_class_mask_is_sum_of_instances() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            allow_overlap: false,
            num_images: 10,
            ..SceneSpec::default()
        };
        let manifest = generate_synthetic_dataset(&spec, 7, dir.path()).unwrap();
        let index = DatasetIndex::load_manifest(&manifest).unwrap();
        for img in &index.images {
            for cid in img.class_ids() {
                let mut union = BinaryMask::empty(img.width, img.height).unwrap();
                let mut total = 0u64;
                for inst in img.instances.iter().filter(|i| i.class_id == cid) {
                    let m = inst.mask.to_mask().unwrap();
                    total += m.area();
                    union = union.union(&m).unwrap();
                }
                assert_eq!(union.area(), total);
            }
        }
    }

    #[test]
    fn degenerate_spec_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            num_classes: 0,
            ..SceneSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec, 1, dir.path()).is_err());
        let spec = SceneSpec {
            instance_size: [3, 200],
            ..SceneSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec, 1, dir.path()).is_err());
    }

    #[test]
    fn diamond_masks_are_not_box_shaped() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            num_classes: 1,
            shapes: Some(vec![ShapeKind::Diamond]),
            classes_per_image: [1, 1],
            num_images: 3,
            ..SceneSpec::default()
        };
        let manifest = generate_synthetic_dataset(&spec, 5, dir.path()).unwrap();
        let index = DatasetIndex::load_manifest(&manifest).unwrap();
        let inst = &index.images[0].instances[0];
        assert!(inst.mask.area() < inst.bbox.area());
    }
}
