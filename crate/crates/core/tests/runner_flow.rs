//! Runner integration: determinism, resumability, report merging, and
//! transcript inspection.

mod common;

use std::sync::atomic::{AtomicI64, AtomicU32, Ordering};
use std::sync::Arc;

use vise_core::backends::{
    BackendError, BackendSet, DetectorBackend, EpisodeContext, NoiseProfile,
};
use vise_core::pipeline::{DetectionResult, Variant};
use vise_core::runner::{
    cmd_inspect, cmd_report, run_with_backends, BackendProfile, RunConfig, RunnerError,
};

/// Delegates to the oracle detector, counting calls; after `allowed` calls
/// every further call fails like a dead backend.
struct CountingDetector {
    inner: Arc<dyn DetectorBackend>,
    calls: Arc<AtomicU32>,
    allowed: AtomicI64,
}

impl CountingDetector {
    fn unlimited(calls: Arc<AtomicU32>) -> Self {
        Self {
            inner: BackendSet::oracle().detector,
            calls,
            allowed: AtomicI64::new(i64::MAX),
        }
    }

    fn failing_after(allowed: i64) -> Self {
        Self {
            inner: BackendSet::oracle().detector,
            calls: Arc::new(AtomicU32::new(0)),
            allowed: AtomicI64::new(allowed),
        }
    }
}

impl DetectorBackend for CountingDetector {
    fn detect(&self, ctx: &EpisodeContext) -> Result<DetectionResult, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.allowed.fetch_sub(1, Ordering::SeqCst) <= 0 {
            return Err(BackendError::Transport {
                endpoint: "http://injected.example/v1/detect".into(),
                attempts: 3,
                reason: "injected outage".into(),
            });
        }
        self.inner.detect(ctx)
    }
}

fn with_detector(detector: Arc<dyn DetectorBackend>) -> BackendSet {
    let mut backends = BackendSet::oracle();
    backends.detector = detector;
    backends
}

#[test]
fn oracle_run_reports_perfect_scores() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(16), 3);
    let config = common::oracle_config(manifest, dir.path().join("run"), 2, 30);
    let summary = run_with_backends(&config, BackendSet::oracle(), false).unwrap();
    assert_eq!(summary.episodes, 30);
    assert_eq!(summary.failed, 0);
    let run = &summary.report.runs[0];
    assert_eq!(run.folds[0].er, 1.0);
    assert_eq!(run.folds[0].miou, Some(1.0));
    for name in ["results.jsonl", "ledger.jsonl", "report.json", "report.csv", "report.txt", "config.json", "timings.jsonl"] {
        assert!(dir.path().join("run").join(name).exists(), "{name}");
    }
}

#[test]
fn identical_configs_are_byte_identical() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(14), 5);
    let mut config_a = common::oracle_config(manifest.clone(), dir.path().join("a"), 2, 20);
    config_a.parallelism = 4;
    let mut config_b = common::oracle_config(manifest, dir.path().join("b"), 2, 20);
    config_b.parallelism = 1; // parallelism must not leak into outputs
    run_with_backends(&config_a, BackendSet::oracle(), false).unwrap();
    run_with_backends(&config_b, BackendSet::oracle(), false).unwrap();
    let a = std::fs::read(dir.path().join("a/results.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/results.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    // transcripts too
    let ta = std::fs::read(dir.path().join("a/transcripts/ep_f0_e00007.json")).unwrap();
    let tb = std::fs::read(dir.path().join("b/transcripts/ep_f0_e00007.json")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn interrupted_run_resumes_to_identical_bytes() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(14), 7);

    // uninterrupted reference
    let mut reference = common::oracle_config(manifest.clone(), dir.path().join("ref"), 2, 100);
    reference.parallelism = 1;
    run_with_backends(&reference, BackendSet::oracle(), false).unwrap();

    // interrupt after 30 episodes: worker order equals plan order at
    // parallelism 1, so exactly episodes 0..29 land
    let mut interrupted = common::oracle_config(manifest, dir.path().join("int"), 2, 100);
    interrupted.parallelism = 1;
    let failing = with_detector(Arc::new(CountingDetector::failing_after(30)));
    let err = run_with_backends(&interrupted, failing, false).unwrap_err();
    assert!(err.is_backend_unreachable(), "{err}");
    let partial = std::fs::read_to_string(dir.path().join("int/results.jsonl")).unwrap();
    assert_eq!(partial.lines().count(), 30);

    // resume executes exactly the 70 missing episodes
    let calls = Arc::new(AtomicU32::new(0));
    let counting = with_detector(Arc::new(CountingDetector::unlimited(calls.clone())));
    let summary = run_with_backends(&interrupted, counting, true).unwrap();
    assert_eq!(summary.episodes, 100);
    assert_eq!(calls.load(Ordering::SeqCst), 70);

    let reference_bytes = std::fs::read(dir.path().join("ref/results.jsonl")).unwrap();
    let resumed_bytes = std::fs::read(dir.path().join("int/results.jsonl")).unwrap();
    assert_eq!(reference_bytes, resumed_bytes);
}

#[test]
fn resume_of_a_complete_run_is_a_noop() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(12), 9);
    let config = common::oracle_config(manifest, dir.path().join("run"), 2, 10);
    run_with_backends(&config, BackendSet::oracle(), false).unwrap();
    let before = std::fs::read(dir.path().join("run/results.jsonl")).unwrap();

    let calls = Arc::new(AtomicU32::new(0));
    let counting = with_detector(Arc::new(CountingDetector::unlimited(calls.clone())));
    let summary = run_with_backends(&config, counting, true).unwrap();
    assert_eq!(summary.episodes, 10);
    assert_eq!(calls.load(Ordering::SeqCst), 0, "no episode re-runs");
    let after = std::fs::read(dir.path().join("run/results.jsonl")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn resume_with_changed_seed_is_refused() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(12), 11);
    let mut config = common::oracle_config(manifest, dir.path().join("run"), 2, 10);
    run_with_backends(&config, BackendSet::oracle(), false).unwrap();
    config.seed = 999;
    let err = run_with_backends(&config, BackendSet::oracle(), true).unwrap_err();
    match err {
        RunnerError::ConfigMismatch(diff) => {
            assert!(diff.contains("seed"), "diff should name the field:\n{diff}")
        }
        other => panic!("expected ConfigMismatch, got {other}"),
    }
}

#[test]
fn unreachable_backend_fails_before_any_result() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(12), 13);
    let mut config = common::oracle_config(manifest, dir.path().join("run"), 2, 10);
    config.parallelism = 1;
    let dead = with_detector(Arc::new(CountingDetector::failing_after(0)));
    let err = run_with_backends(&config, dead, false).unwrap_err();
    assert!(err.is_backend_unreachable());
    assert!(err.to_string().contains("http://injected.example/v1/detect"));
    let results = std::fs::read_to_string(dir.path().join("run/results.jsonl")).unwrap();
    assert!(results.is_empty(), "no results may be fabricated");
}

#[test]
fn report_merges_variant_runs_into_one_table() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(16), 15);
    let mut dirs = Vec::new();
    for variant in [Variant::Full, Variant::VlmBoxes, Variant::BoxFill] {
        let out = dir.path().join(variant.as_str());
        let mut config = common::oracle_config(manifest.clone(), out.clone(), 2, 10);
        config.pipeline.variant = variant;
        run_with_backends(&config, BackendSet::oracle(), false).unwrap();
        dirs.push(out);
    }
    let report = cmd_report(&dirs, true).unwrap();
    assert_eq!(report.runs.len(), 3);
    let variants: Vec<&str> = report.runs.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, vec!["full", "vlm_boxes", "box_fill"]);
    let table = vise_core::metrics::render_table(&report);
    assert_eq!(table.matches("box_fill").count(), 2); // ER and mIoU rows
    // full and vlm_boxes stay exact; box_fill on non-box shapes does not
    assert_eq!(report.runs[0].folds[0].miou, Some(1.0));
    assert!(report.runs[2].folds[0].miou.unwrap() < 1.0);
}

#[test]
fn report_on_empty_directory_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cmd_report(&[dir.path().to_path_buf()], false).is_err());
    assert!(cmd_report(&[], false).is_err());
}

#[test]
fn inspect_dumps_the_exchange_and_writes_images() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(12), 17);
    let config = common::oracle_config(manifest, dir.path().join("run"), 2, 3);
    run_with_backends(&config, BackendSet::oracle(), false).unwrap();
    let transcript = dir.path().join("run/transcripts/ep_f0_e00001.json");
    let report = cmd_inspect(&transcript).unwrap();
    assert!(report.text.contains("--- prompt ---"));
    assert!(report.text.contains("--- raw answer ---"));
    assert!(report.text.contains("ANSWER:"));
    assert!(report.text.contains("IoU 1.0000"));
    assert!(!report.written.is_empty());
    for path in &report.written {
        assert!(path.exists());
    }
    assert!(report
        .written
        .iter()
        .any(|p| p.to_string_lossy().ends_with("_overlay.png")));
}

#[test]
fn inspect_zero_detection_episode_says_so() {
    let (dir, manifest, _index) = common::dataset(common::two_class_spec(12), 19);
    let mut config = common::oracle_config(manifest, dir.path().join("run"), 2, 1);
    config.backend = BackendProfile::Noisy {
        noise: NoiseProfile {
            p_miss: 1.0,
            ..NoiseProfile::default()
        },
    };
    let backends = BackendSet::noisy(NoiseProfile {
        p_miss: 1.0,
        ..NoiseProfile::default()
    });
    run_with_backends(&config, backends, false).unwrap();
    let report = cmd_inspect(&dir.path().join("run/transcripts/ep_f0_e00000.json")).unwrap();
    assert!(report.text.contains("no boxes proposed"));
}

#[test]
fn failed_episodes_flip_exit_semantics_not_results() {
    use vise_core::backends::VlmBackend;
    use vise_core::vqa::{RawAnswer, VqaPrompt};

    struct GarbageVlm;
    impl VlmBackend for GarbageVlm {
        fn chat(
            &self,
            _prompt: &VqaPrompt,
            _ctx: &EpisodeContext,
        ) -> Result<RawAnswer, BackendError> {
            Ok(RawAnswer::new("no structured answer here"))
        }
    }

    let (dir, manifest, _index) = common::dataset(common::two_class_spec(12), 21);
    let mut config = common::oracle_config(manifest, dir.path().join("run"), 2, 8);
    config.pipeline.strict_parse = true;
    let mut backends = BackendSet::oracle();
    backends.vlm = Arc::new(GarbageVlm);
    let summary = run_with_backends(&config, backends, false).unwrap();
    assert_eq!(summary.failed, 8);
    // failed episodes are scored as empty predictions, not dropped
    let run = &summary.report.runs[0];
    assert_eq!(run.folds[0].episodes, 8);
    assert!(run.folds[0].er < 1.0);
}
