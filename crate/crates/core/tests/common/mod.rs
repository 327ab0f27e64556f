//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use std::path::PathBuf;

use vise_core::dataset::{
    generate_synthetic_dataset, DatasetIndex, Episode, EpisodeSampler, SamplerParams, SceneSpec,
};
use vise_core::runner::{BackendProfile, RunConfig};

/// Generate a synthetic dataset under a fresh temp dir and load it.
pub fn dataset(spec: SceneSpec, seed: u64) -> (tempfile::TempDir, PathBuf, DatasetIndex) {
    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = generate_synthetic_dataset(&spec, seed, dir.path()).expect("synth dataset");
    let index = DatasetIndex::load_manifest(&manifest).expect("manifest loads");
    (dir, manifest, index)
}

/// Two classes per scene, both always visible.
pub fn two_class_spec(num_images: u32) -> SceneSpec {
    SceneSpec {
        num_classes: 2,
        num_images,
        classes_per_image: [2, 2],
        instances_per_class: [1, 2],
        ..SceneSpec::default()
    }
}

pub fn sample_episodes(
    index: &DatasetIndex,
    n_ways: u32,
    k_shots: u32,
    seed: u64,
    fold: u32,
    count: u64,
) -> Vec<Episode> {
    let sampler = EpisodeSampler::new(
        index,
        SamplerParams {
            n_ways,
            k_shots,
            seed,
            negative_query_rate: 0.0,
        },
    );
    (0..count)
        .map(|i| sampler.sample(fold, i).expect("sampling"))
        .collect()
}

/// Oracle run config over a manifest, writing into `out`.
pub fn oracle_config(manifest: PathBuf, out: PathBuf, n_ways: u32, episodes: u64) -> RunConfig {
    RunConfig {
        manifest,
        output_dir: out,
        n_ways,
        k_shots: 1,
        episodes_per_fold: episodes,
        seed: 7,
        backend: BackendProfile::Oracle,
        parallelism: 2,
        ..RunConfig::default()
    }
}
