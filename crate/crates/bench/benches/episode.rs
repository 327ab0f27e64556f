//! Full-pipeline benchmarks over the oracle backends.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vise_core::backends::BackendSet;
use vise_core::dataset::{
    generate_synthetic_dataset, DatasetIndex, Episode, EpisodeSampler, SamplerParams, SceneSpec,
};
use vise_core::pipeline::{run_episode, PipelineConfig};
use vise_core::vqa::{build_prompt, parse_answer, PromptTemplate};

struct Fixture {
    _dir: tempfile::TempDir,
    episodes: Vec<Episode>,
}

fn fixture(side: u32) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        num_classes: 2,
        num_images: 12,
        classes_per_image: [2, 2],
        instances_per_class: [1, 2],
        image_width: side,
        image_height: side,
        instance_size: [side / 12, side / 4],
        ..SceneSpec::default()
    };
    let manifest = generate_synthetic_dataset(&spec, 5, dir.path()).unwrap();
    let index = DatasetIndex::load_manifest(&manifest).unwrap();
    let sampler = EpisodeSampler::new(
        &index,
        SamplerParams {
            n_ways: 2,
            k_shots: 1,
            seed: 1,
            negative_query_rate: 0.0,
        },
    );
    let episodes = (0..16).map(|i| sampler.sample(0, i).unwrap()).collect();
    Fixture {
        _dir: dir,
        episodes,
    }
}

fn bench_oracle_episode(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_episode");
    group.sample_size(40);
    for side in [128u32, 512] {
        let fx = fixture(side);
        let backends = BackendSet::oracle();
        let template = PromptTemplate::default();
        let config = PipelineConfig::default();
        let mut cursor = 0usize;
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |bench, _| {
            bench.iter(|| {
                let episode = &fx.episodes[cursor % fx.episodes.len()];
                cursor += 1;
                run_episode(episode, &backends, &config, &template).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_prompt_and_parse(c: &mut Criterion) {
    let fx = fixture(128);
    let backends = BackendSet::oracle();
    let template = PromptTemplate::default();
    let episode = &fx.episodes[0];
    let ctx = vise_core::backends::EpisodeContext::new(episode);
    use vise_core::backends::{DetectorBackend, VlmBackend};
    let raw = backends.detector.detect(&ctx).unwrap();
    let detections = vise_core::pipeline::filter_detections(raw, 0.5, 20);
    c.bench_function("build_prompt", |bench| {
        bench.iter(|| build_prompt(episode, &detections, &template).unwrap())
    });
    let prompt = build_prompt(episode, &detections, &template).unwrap();
    let answer = backends.vlm.chat(&prompt, &ctx).unwrap();
    c.bench_function("parse_answer", |bench| {
        bench.iter(|| parse_answer(&answer.text, prompt.m_boxes, &episode.labels, false).unwrap())
    });
}

criterion_group!(benches, bench_oracle_episode, bench_prompt_and_parse);
criterion_main!(benches);
