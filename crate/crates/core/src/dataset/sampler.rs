//! N-way K-shot episode sampling.
//!
//! Sampling is a pure function of (index, fold, N, K, seed, episode_index):
//! two processes given equal arguments produce field-for-field equal
//! episodes, which is what makes runs resumable and order-independent.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, DatasetIndex, Episode, QueryInstance, QueryRecord, SupportExample};
use crate::maskcore::BinaryMask;
use crate::seeding::episode_rng;

#[derive(Debug, Clone)]
pub struct SamplerParams {
    pub n_ways: u32,
    pub k_shots: u32,
    pub seed: u64,
    /// Probability that the query contains none of the episode classes.
    pub negative_query_rate: f64,
}

pub struct EpisodeSampler<'a> {
    index: &'a DatasetIndex,
    params: SamplerParams,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(index: &'a DatasetIndex, params: SamplerParams) -> Self {
        Self { index, params }
    }

    pub fn sample(&self, fold: u32, episode_index: u64) -> Result<Episode, DatasetError> {
        let SamplerParams {
            n_ways,
            k_shots,
            seed,
            negative_query_rate,
        } = self.params;
        let fold_classes = self
            .index
            .folds
            .get(fold as usize)
            .ok_or_else(|| DatasetError::Capacity(format!("fold {fold} does not exist")))?;
        if (fold_classes.len() as u32) < n_ways {
            return Err(DatasetError::Capacity(format!(
                "fold {fold} has {} classes, need N={n_ways}",
                fold_classes.len()
            )));
        }

        let mut rng = episode_rng(seed, fold, n_ways, k_shots, episode_index);

        let mut sorted_classes = fold_classes.clone();
        sorted_classes.sort_unstable();
        let class_ids = choose_distinct(&sorted_classes, n_ways as usize, &mut rng);
        let class_set: BTreeSet<u32> = class_ids.iter().copied().collect();

        let negative = negative_query_rate > 0.0 && rng.random::<f64>() < negative_query_rate;
        let query_candidates: Vec<usize> = self
            .index
            .images
            .iter()
            .enumerate()
            .filter(|(_, img)| {
                let has_episode_class = img.instances.iter().any(|i| class_set.contains(&i.class_id));
                has_episode_class != negative
            })
            .map(|(i, _)| i)
            .collect();
        if query_candidates.is_empty() {
            return Err(DatasetError::Capacity(format!(
                "no {} query candidates for classes {class_ids:?}",
                if negative { "negative" } else { "positive" }
            )));
        }
        let query_idx = query_candidates[rng.random_range(0..query_candidates.len())];

        let mut support = Vec::with_capacity((n_ways * k_shots) as usize);
        for (pos0, &class_id) in class_ids.iter().enumerate() {
            let candidates: Vec<usize> = self
                .index
                .images_with_class(class_id)
                .iter()
                .copied()
                .filter(|&i| i != query_idx)
                .collect();
            if (candidates.len() as u32) < k_shots {
                return Err(DatasetError::Capacity(format!(
                    "class {class_id} has {} support candidates excluding the query, need K={k_shots}",
                    candidates.len()
                )));
            }
            let label = self
                .index
                .class_label(class_id)
                .expect("validated class id")
                .to_string();
            for img_idx in choose_distinct(&candidates, k_shots as usize, &mut rng) {
                let img = &self.index.images[img_idx];
                // union of this class's instance masks, serialized alongside
                // the image-level label (unused by the default profile)
                let mut mask = BinaryMask::empty(img.width, img.height)
                    .map_err(|e| DatasetError::Invariant(e.to_string()))?;
                for inst in img.instances.iter().filter(|i| i.class_id == class_id) {
                    let m = inst
                        .mask
                        .to_mask()
                        .map_err(|e| DatasetError::Invariant(e.to_string()))?;
                    mask = mask
                        .union(&m)
                        .map_err(|e| DatasetError::Invariant(e.to_string()))?;
                }
                support.push(SupportExample {
                    class_position: (pos0 + 1) as u32,
                    image_id: img.image_id.clone(),
                    path: self.index.resolve_path(img),
                    label: label.clone(),
                    mask: Some(mask.to_rle()),
                });
            }
        }

        let query = self.build_query(query_idx, &class_ids)?;
        debug_assert!(support.iter().all(|s| s.image_id != query.image_id));

        Ok(Episode {
            episode_index,
            fold,
            n_ways,
            k_shots,
            labels: class_ids
                .iter()
                .map(|&id| self.index.class_label(id).expect("validated").to_string())
                .collect(),
            class_ids,
            support,
            query,
        })
    }

    fn build_query(&self, query_idx: usize, class_ids: &[u32]) -> Result<QueryRecord, DatasetError> {
        let img = &self.index.images[query_idx];
        let n = class_ids.len();
        let mut truth_masks = Vec::with_capacity(n);
        for _ in 0..n {
            truth_masks.push(
                BinaryMask::empty(img.width, img.height)
                    .map_err(|e| DatasetError::Invariant(e.to_string()))?,
            );
        }
        let mut instances = Vec::new();
        for inst in &img.instances {
            let Some(pos0) = class_ids.iter().position(|&c| c == inst.class_id) else {
                continue; // not an episode class
            };
            let mask = inst
                .mask
                .to_mask()
                .map_err(|e| DatasetError::Invariant(e.to_string()))?;
            truth_masks[pos0] = truth_masks[pos0]
                .union(&mask)
                .map_err(|e| DatasetError::Invariant(e.to_string()))?;
            instances.push(QueryInstance {
                class_position: (pos0 + 1) as u32,
                bbox: inst.bbox,
                mask,
            });
        }
        let true_label_set: BTreeSet<u32> = truth_masks
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(i, _)| (i + 1) as u32)
            .collect();

        Ok(QueryRecord {
            image_id: img.image_id.clone(),
            path: self.index.resolve_path(img),
            width: img.width,
            height: img.height,
            true_label_set,
            truth_masks,
            instances,
        })
    }
}

/// First `count` items of a partial Fisher-Yates shuffle.
fn choose_distinct<T: Copy>(items: &[T], count: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    debug_assert!(count <= items.len());
    let mut pool: Vec<T> = items.to_vec();
    for i in 0..count {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}
