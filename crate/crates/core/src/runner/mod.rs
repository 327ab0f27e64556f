//! Run orchestration: configuration, deterministic episode plans, bounded
//! parallel execution with in-order result emission, an append-only ledger
//! for resumability, and report generation.
//!
//! One coordinator owns the ledger and the results file; workers hand
//! completed episodes back over a channel and the coordinator writes them
//! in plan order, so two runs with equal config and seed produce
//! byte-identical results files. Timestamps live in a sidecar, never in
//! the primary outputs.

mod inspect;

pub use inspect::{cmd_inspect, InspectReport};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendSet, NoiseProfile, RemoteDetector, RemoteEndpoints, RemoteOptions,
    RemoteSegmenter, RemoteVlm, ReqwestTransport, ResponseCache,
};
use crate::dataset::{DatasetError, DatasetIndex, Episode, EpisodeSampler, SamplerParams};
use crate::maskcore::BinaryMask;
use crate::metrics::{fold_report, MetricError, MiouMode, Report, RunReport};
use crate::pipeline::{run_episode, EpisodeStatus, PipelineConfig, PipelineError, ResultLine};
use crate::seeding::{noise_rng, sha256_hex};
use crate::vqa::PromptTemplate;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {0}")]
    Config(String),
    #[error("config mismatch, refusing to resume:\n{0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("episode {episode} of fold {fold}: {source}")]
    Episode {
        fold: u32,
        episode: u64,
        source: PipelineError,
    },
    #[error("verification: {0}")]
    Verification(String),
}

impl RunnerError {
    /// True when the failure is a backend outage: partial results are
    /// preserved and the run can be resumed once the backend returns.
    pub fn is_backend_unreachable(&self) -> bool {
        matches!(
            self,
            RunnerError::Episode {
                source: PipelineError::Backend(e),
                ..
            } if e.is_transport()
        )
    }
}

/// Backend selection: exact oracles, a parameterized noise model, or
/// remote endpoints speaking the wire protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum BackendProfile {
    Oracle,
    Noisy {
        noise: NoiseProfile,
    },
    Remote {
        endpoints: RemoteEndpoints,
        /// Name of the environment variable holding the bearer token;
        /// secrets never live in the config file.
        #[serde(default = "default_auth_env")]
        auth_env: String,
        /// Opaque generation parameters forwarded to the chat endpoint.
        #[serde(default)]
        params: Option<serde_json::Value>,
        #[serde(default = "default_attempts")]
        attempts: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
        #[serde(default = "default_inflight")]
        inflight_limit: usize,
    },
}

fn default_auth_env() -> String {
    "VISE_VLM_TOKEN".into()
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_inflight() -> usize {
    4
}

impl BackendProfile {
    pub fn name(&self) -> &'static str {
        match self {
            BackendProfile::Oracle => "oracle",
            BackendProfile::Noisy { .. } => "noisy",
            BackendProfile::Remote { .. } => "remote",
        }
    }

    fn noise(&self) -> Option<&NoiseProfile> {
        match self {
            BackendProfile::Noisy { noise } => Some(noise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Label used in report rows.
    pub method: String,
    /// Folds to evaluate; `None` means every fold in the manifest.
    pub folds: Option<Vec<u32>>,
    pub n_ways: u32,
    pub k_shots: u32,
    pub episodes_per_fold: u64,
    pub seed: u64,
    pub negative_query_rate: f64,
    pub backend: BackendProfile,
    pub pipeline: PipelineConfig,
    /// Prompt template file; the built-in default when omitted.
    pub template: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub cache_detector: bool,
    pub cache_segmenter: bool,
    pub miou_mode: MiouMode,
    /// Score failed episodes as empty predictions (default) instead of
    /// dropping them.
    pub include_failed: bool,
    /// Run still exits zero with at most this many failed episodes.
    pub failure_tolerance: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            method: "vise".into(),
            folds: None,
            n_ways: 1,
            k_shots: 1,
            episodes_per_fold: 50,
            seed: 0,
            negative_query_rate: 0.0,
            backend: BackendProfile::Oracle,
            pipeline: PipelineConfig::default(),
            template: None,
            output_dir: PathBuf::from("runs/out"),
            parallelism: 4,
            cache_dir: None,
            cache_detector: false,
            cache_segmenter: false,
            miou_mode: MiouMode::Accumulate,
            include_failed: true,
            failure_tolerance: 0,
        }
    }
}

/// Strip `//` line and `/* */` block comments outside string literals, so
/// hand-maintained config files can carry commentary.
pub fn strip_json_comments(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut in_string = false;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if in_string {
            out.push(c);
            if c == '\\' && i + 1 < bytes.len() {
                out.push(bytes[i + 1] as char);
                i += 1;
            } else if c == '"' {
                in_string = false;
            }
            i += 1;
        } else if c == '"' {
            in_string = true;
            out.push(c);
            i += 1;
        } else if c == '/' && i + 1 < bytes.len() && bytes[i + 1] == b'/' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else if c == '/' && i + 1 < bytes.len() && bytes[i + 1] == b'*' {
            i += 2;
            while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                i += 1;
            }
            i = (i + 2).min(bytes.len());
        } else {
            out.push(c);
            i += 1;
        }
    }
    out
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let stripped = strip_json_comments(&text);
        let config: RunConfig = serde_json::from_str(&stripped)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.episodes_per_fold == 0 {
            return Err(RunnerError::Config("episodes_per_fold must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(RunnerError::Config("parallelism must be >= 1".into()));
        }
        if self.n_ways == 0 || self.k_shots == 0 {
            return Err(RunnerError::Config("n_ways and k_shots must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_query_rate) {
            return Err(RunnerError::Config(
                "negative_query_rate outside [0,1]".into(),
            ));
        }
        if !self.manifest.exists() {
            return Err(RunnerError::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        if let Some(template) = &self.template {
            if !template.exists() {
                return Err(RunnerError::Config(format!(
                    "template {} does not exist",
                    template.display()
                )));
            }
        }
        self.pipeline
            .validate()
            .map_err(|e| RunnerError::Config(e.to_string()))?;
        if let Some(noise) = self.backend.noise() {
            noise
                .validate(self.n_ways)
                .map_err(|e| RunnerError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn load_template(&self) -> Result<PromptTemplate, RunnerError> {
        match &self.template {
            None => Ok(PromptTemplate::default()),
            Some(path) => PromptTemplate::load(path).map_err(|e| RunnerError::Config(e.to_string())),
        }
    }

    fn resolved_folds(&self, index: &DatasetIndex) -> Result<Vec<u32>, RunnerError> {
        let folds = match &self.folds {
            Some(folds) => folds.clone(),
            None => (0..index.folds.len() as u32).collect(),
        };
        for &f in &folds {
            if f as usize >= index.folds.len() {
                return Err(RunnerError::Config(format!(
                    "fold {f} does not exist in the manifest ({} folds)",
                    index.folds.len()
                )));
            }
        }
        if folds.is_empty() {
            return Err(RunnerError::Config("no folds selected".into()));
        }
        Ok(folds)
    }

    /// Hash of everything that shapes the results file: manifest content,
    /// template content, sampling parameters, backend profile, pipeline
    /// config. Output paths, parallelism, caching, and report flags stay
    /// out so they can change between resume invocations.
    pub fn semantic_hash(&self, index: &DatasetIndex) -> Result<String, RunnerError> {
        let manifest_bytes = std::fs::read(&self.manifest)?;
        let template_text = match &self.template {
            None => include_str!("../../templates/default_prompt.txt").to_string(),
            Some(path) => std::fs::read_to_string(path)?,
        };
        let view = serde_json::json!({
            "manifest_sha256": sha256_hex(&manifest_bytes),
            "template_sha256": sha256_hex(template_text.as_bytes()),
            "folds": self.resolved_folds(index)?,
            "n_ways": self.n_ways,
            "k_shots": self.k_shots,
            "episodes_per_fold": self.episodes_per_fold,
            "seed": self.seed,
            "negative_query_rate": self.negative_query_rate,
            "backend": &self.backend,
            "pipeline": &self.pipeline,
        });
        Ok(sha256_hex(view.to_string().as_bytes()))
    }
}

/// Build the configured backends. Remote profiles wire the cache in for
/// the chat endpoint by default; detector/segmenter caching is opt-in.
pub fn build_backends(config: &RunConfig) -> Result<BackendSet, RunnerError> {
    match &config.backend {
        BackendProfile::Oracle => Ok(BackendSet::oracle()),
        BackendProfile::Noisy { noise } => Ok(BackendSet::noisy(noise.clone())),
        BackendProfile::Remote {
            endpoints,
            auth_env,
            params,
            attempts,
            backoff_ms,
            inflight_limit,
        } => {
            let token = std::env::var(auth_env).ok();
            let transport = Arc::new(
                ReqwestTransport::new(token).map_err(|e| RunnerError::Config(e.to_string()))?,
            );
            let options = RemoteOptions {
                attempts: (*attempts).max(1),
                backoff_initial: std::time::Duration::from_millis(*backoff_ms),
                inflight_limit: *inflight_limit,
            };
            let cache_dir = std::env::var("VISE_CACHE_DIR")
                .ok()
                .map(PathBuf::from)
                .or_else(|| config.cache_dir.clone());
            let cache = cache_dir
                .map(ResponseCache::open)
                .transpose()?
                .map(Arc::new);
            let detector_cache = config.cache_detector.then(|| cache.clone()).flatten();
            let segmenter_cache = config.cache_segmenter.then(|| cache.clone()).flatten();
            Ok(BackendSet {
                detector: Arc::new(RemoteDetector::new(
                    endpoints.detect.clone(),
                    transport.clone(),
                    options.clone(),
                    detector_cache,
                )),
                vlm: Arc::new(RemoteVlm::new(
                    endpoints.chat.clone(),
                    transport.clone(),
                    options.clone(),
                    cache,
                    params.clone(),
                )),
                segmenter: Arc::new(RemoteSegmenter::new(
                    endpoints.segment.clone(),
                    transport,
                    options,
                    segmenter_cache,
                )),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LedgerHeader {
    schema: u32,
    config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LedgerEntry {
    fold: u32,
    episode: u64,
    /// Length of the results file after this episode's line.
    end_offset: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub episodes: u64,
    pub failed: u64,
    pub report: Report,
    pub output_dir: PathBuf,
}

pub fn cmd_run(config: &RunConfig) -> Result<RunSummary, RunnerError> {
    let backends = build_backends(config)?;
    run_with_backends(config, backends, false)
}

pub fn cmd_resume(config: &RunConfig) -> Result<RunSummary, RunnerError> {
    let backends = build_backends(config)?;
    run_with_backends(config, backends, true)
}

/// Entry point that accepts injected backends (tests use counting stubs).
pub fn run_with_backends(
    config: &RunConfig,
    backends: BackendSet,
    resume: bool,
) -> Result<RunSummary, RunnerError> {
    config.validate()?;
    let index = DatasetIndex::load_manifest(&config.manifest)?;
    let template = config.load_template()?;
    let folds = config.resolved_folds(&index)?;
    let config_hash = config.semantic_hash(&index)?;

    let plan: Vec<(u32, u64)> = folds
        .iter()
        .flat_map(|&fold| (0..config.episodes_per_fold).map(move |e| (fold, e)))
        .collect();

    let out = &config.output_dir;
    let results_path = out.join("results.jsonl");
    let ledger_path = out.join("ledger.jsonl");
    std::fs::create_dir_all(out.join("transcripts"))?;

    let completed = if resume {
        let done = read_ledger(&ledger_path, &config_hash, config, out)?;
        verify_prefix(&plan, &done)?;
        truncate_results(&results_path, done.last().map(|e| e.end_offset).unwrap_or(0))?;
        done.len()
    } else {
        write_config_snapshot(config, out)?;
        std::fs::write(&results_path, b"")?;
        let header = serde_json::to_string(&LedgerHeader {
            schema: 1,
            config_hash: config_hash.clone(),
        })
        .expect("header encodes");
        std::fs::write(&ledger_path, format!("{header}\n"))?;
        0
    };

    let mut results_file = std::fs::OpenOptions::new().append(true).open(&results_path)?;
    let mut ledger_file = std::fs::OpenOptions::new().append(true).open(&ledger_path)?;
    let mut timings_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("timings.jsonl"))?;
    let mut results_len = std::fs::metadata(&results_path)?.len();

    if completed < plan.len() {
        let next = AtomicUsize::new(completed);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, Result<WorkItem, RunnerError>)>();
        let sampler = EpisodeSampler::new(
            &index,
            SamplerParams {
                n_ways: config.n_ways,
                k_shots: config.k_shots,
                seed: config.seed,
                negative_query_rate: config.negative_query_rate,
            },
        );

        let worker_error: Result<(), RunnerError> = std::thread::scope(|scope| {
            for _ in 0..config.parallelism.min(plan.len() - completed) {
                let tx = tx.clone();
                let sampler = &sampler;
                let plan = &plan;
                let next = &next;
                let stop = &stop;
                let backends = &backends;
                let template = &template;
                scope.spawn(move || {
                    loop {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= plan.len() {
                            break;
                        }
                        let (fold, episode_index) = plan[i];
                        let started = std::time::Instant::now();
                        let outcome = execute_one(
                            sampler,
                            fold,
                            episode_index,
                            config,
                            backends,
                            template,
                        );
                        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
                        let item = outcome.map(|outcome| WorkItem {
                            outcome,
                            elapsed_ms,
                        });
                        if tx.send((i, item)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(tx);

            // in-order emission regardless of completion order
            let mut pending: BTreeMap<usize, Result<WorkItem, RunnerError>> = BTreeMap::new();
            let mut expected = completed;
            let mut first_error: Option<RunnerError> = None;
            for (i, item) in rx {
                pending.insert(i, item);
                while let Some(item) = pending.remove(&expected) {
                    match item {
                        Err(e) => {
                            stop.store(true, Ordering::SeqCst);
                            first_error = Some(e);
                            pending.clear();
                            break;
                        }
                        Ok(work) => {
                            let (fold, episode_index) = plan[expected];
                            results_len = persist_episode(
                                out,
                                &mut results_file,
                                &mut ledger_file,
                                results_len,
                                work.outcome,
                            )?;
                            writeln!(
                                timings_file,
                                "{}",
                                serde_json::json!({
                                    "fold": fold,
                                    "episode": episode_index,
                                    "ms": work.elapsed_ms,
                                })
                            )?;
                            expected += 1;
                        }
                    }
                }
                if first_error.is_some() {
                    break;
                }
            }
            match first_error {
                Some(e) => Err(e),
                None => Ok(()),
            }
        });
        worker_error?;
    }

    results_file.flush()?;
    ledger_file.flush()?;

    let lines = read_results(&results_path)?;
    let report = build_report(config, &folds, &lines)?;
    write_reports(out, &report)?;
    Ok(RunSummary {
        episodes: lines.len() as u64,
        failed: lines
            .iter()
            .filter(|l| l.status == EpisodeStatus::Failed)
            .count() as u64,
        report,
        output_dir: out.clone(),
    })
}

struct WorkItem {
    outcome: crate::pipeline::EpisodeOutcome,
    elapsed_ms: f64,
}

fn execute_one(
    sampler: &EpisodeSampler,
    fold: u32,
    episode_index: u64,
    config: &RunConfig,
    backends: &BackendSet,
    template: &PromptTemplate,
) -> Result<crate::pipeline::EpisodeOutcome, RunnerError> {
    let mut episode = sampler.sample(fold, episode_index).map_err(|e| {
        RunnerError::Episode {
            fold,
            episode: episode_index,
            source: PipelineError::Contract(e.to_string()),
        }
    })?;
    if let Some(noise) = config.backend.noise() {
        apply_label_noise(&mut episode, noise);
    }
    run_episode(&episode, backends, &config.pipeline, template).map_err(|source| {
        RunnerError::Episode {
            fold,
            episode: episode_index,
            source,
        }
    })
}

/// Annotation-noise simulation: with probability `p_label_noise` a present
/// class's ground-truth annotation disappears while the scene (and thus
/// what the oracle tools see) still contains the object, mirroring datasets
/// whose labels miss real instances.
fn apply_label_noise(episode: &mut Episode, noise: &NoiseProfile) {
    if noise.p_label_noise <= 0.0 {
        return;
    }
    let mut rng = noise_rng(noise.seed, episode.episode_index, "labels");
    for class in 1..=episode.n_ways {
        let present = episode.query.true_label_set.contains(&class);
        let flip = rng.random::<f64>() < noise.p_label_noise;
        if present && flip {
            episode.query.true_label_set.remove(&class);
            episode.query.truth_masks[(class - 1) as usize] =
                BinaryMask::empty(episode.query.width, episode.query.height)
                    .expect("query dims are positive");
        }
    }
}

fn persist_episode(
    out: &Path,
    results_file: &mut std::fs::File,
    ledger_file: &mut std::fs::File,
    results_len: u64,
    outcome: crate::pipeline::EpisodeOutcome,
) -> Result<u64, RunnerError> {
    let crate::pipeline::EpisodeOutcome {
        mut line,
        transcript,
    } = outcome;
    let rel = format!(
        "transcripts/ep_f{}_e{:05}.json",
        transcript.fold, transcript.episode
    );
    std::fs::write(
        out.join(&rel),
        serde_json::to_string(&transcript).expect("transcript encodes"),
    )?;
    line.transcript = rel;

    let encoded = serde_json::to_string(&line).expect("result line encodes");
    results_file.write_all(encoded.as_bytes())?;
    results_file.write_all(b"\n")?;
    results_file.flush()?;
    let new_len = results_len + encoded.len() as u64 + 1;

    let entry = serde_json::to_string(&LedgerEntry {
        fold: line.fold,
        episode: line.episode,
        end_offset: new_len,
    })
    .expect("ledger entry encodes");
    ledger_file.write_all(entry.as_bytes())?;
    ledger_file.write_all(b"\n")?;
    ledger_file.flush()?;
    Ok(new_len)
}

fn write_config_snapshot(config: &RunConfig, out: &Path) -> Result<(), RunnerError> {
    let mut text = serde_json::to_string_pretty(config).expect("config encodes");
    text.push('\n');
    std::fs::write(out.join("config.json"), text)?;
    Ok(())
}

fn read_ledger(
    path: &Path,
    expected_hash: &str,
    config: &RunConfig,
    out: &Path,
) -> Result<Vec<LedgerEntry>, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunnerError::Config(format!(
            "cannot resume: ledger {} unreadable: {e}",
            path.display()
        ))
    })?;
    let mut lines = text.lines();
    let header: LedgerHeader = lines
        .next()
        .ok_or_else(|| RunnerError::Config("ledger is empty".into()))
        .and_then(|l| {
            serde_json::from_str(l).map_err(|e| RunnerError::Config(format!("ledger header: {e}")))
        })?;
    if header.config_hash != expected_hash {
        return Err(RunnerError::ConfigMismatch(config_diff(config, out)));
    }
    let mut entries = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        // a torn trailing entry from an interrupt is simply dropped; its
        // episode reruns deterministically
        match serde_json::from_str::<LedgerEntry>(line) {
            Ok(entry) => entries.push(entry),
            Err(_) => break,
        }
    }
    Ok(entries)
}

/// Human-readable summary of which top-level config fields changed.
fn config_diff(config: &RunConfig, out: &Path) -> String {
    let stored: Option<serde_json::Value> = std::fs::read_to_string(out.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let current = serde_json::to_value(config).expect("config encodes");
    match stored {
        None => "stored config.json is missing or unreadable".into(),
        Some(stored) => {
            let mut diffs = Vec::new();
            if let (Some(a), Some(b)) = (stored.as_object(), current.as_object()) {
                for key in a.keys().chain(b.keys()).collect::<std::collections::BTreeSet<_>>() {
                    let old = a.get(key.as_str());
                    let new = b.get(key.as_str());
                    if old != new {
                        diffs.push(format!(
                            "  {key}: {} -> {}",
                            old.map(|v| v.to_string()).unwrap_or_else(|| "?".into()),
                            new.map(|v| v.to_string()).unwrap_or_else(|| "?".into())
                        ));
                    }
                }
            }
            if diffs.is_empty() {
                "semantic inputs changed (manifest or template content)".into()
            } else {
                diffs.join("\n")
            }
        }
    }
}

fn verify_prefix(plan: &[(u32, u64)], done: &[LedgerEntry]) -> Result<(), RunnerError> {
    if done.len() > plan.len() {
        return Err(RunnerError::Config(format!(
            "ledger has {} episodes, plan has {}",
            done.len(),
            plan.len()
        )));
    }
    for (entry, &(fold, episode)) in done.iter().zip(plan) {
        if entry.fold != fold || entry.episode != episode {
            return Err(RunnerError::Config(format!(
                "ledger diverges from the episode plan at fold {} episode {}",
                entry.fold, entry.episode
            )));
        }
    }
    Ok(())
}

fn truncate_results(path: &Path, len: u64) -> Result<(), RunnerError> {
    let file = std::fs::OpenOptions::new().write(true).open(path)?;
    file.set_len(len)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultLine>, RunnerError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ResultLine = serde_json::from_str(line).map_err(|e| {
            RunnerError::Verification(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        lines.push(parsed);
    }
    Ok(lines)
}

fn build_report(
    config: &RunConfig,
    folds: &[u32],
    lines: &[ResultLine],
) -> Result<Report, RunnerError> {
    let run = run_report_from_lines(
        config.method.clone(),
        config.pipeline.variant.as_str().to_string(),
        config.n_ways,
        config.k_shots,
        folds.to_vec(),
        config.miou_mode,
        config.include_failed,
        lines,
    )?;
    Ok(Report::new(vec![run]))
}

/// Group result lines by fold and assemble one run's report row.
#[allow(clippy::too_many_arguments)]
pub fn run_report_from_lines(
    method: String,
    variant: String,
    n_ways: u32,
    k_shots: u32,
    configured_folds: Vec<u32>,
    miou_mode: MiouMode,
    include_failed: bool,
    lines: &[ResultLine],
) -> Result<RunReport, RunnerError> {
    let mut by_fold: BTreeMap<u32, Vec<ResultLine>> = BTreeMap::new();
    for line in lines {
        by_fold.entry(line.fold).or_default().push(line.clone());
    }
    let mut folds = Vec::new();
    for (fold, fold_lines) in by_fold {
        folds.push(fold_report(
            fold,
            &fold_lines,
            n_ways,
            miou_mode,
            include_failed,
        )?);
    }
    Ok(RunReport::assemble(
        method,
        variant,
        n_ways,
        k_shots,
        configured_folds,
        folds,
    )?)
}

fn write_reports(out: &Path, report: &Report) -> Result<(), RunnerError> {
    std::fs::write(out.join("report.json"), crate::metrics::report_to_json(report))?;
    std::fs::write(out.join("report.csv"), crate::metrics::render_csv(report))?;
    std::fs::write(out.join("report.txt"), crate::metrics::render_table(report))?;
    Ok(())
}

/// Merge several run directories into one comparison report (the ablation
/// table shape). Each directory must carry `config.json` + `results.jsonl`.
pub fn cmd_report(dirs: &[PathBuf], verify: bool) -> Result<Report, RunnerError> {
    if dirs.is_empty() {
        return Err(RunnerError::Config("no run directories given".into()));
    }
    let mut runs = Vec::new();
    for dir in dirs {
        let config_text = std::fs::read_to_string(dir.join("config.json")).map_err(|e| {
            RunnerError::Config(format!("{}: config.json: {e}", dir.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&config_text)
            .map_err(|e| RunnerError::Config(format!("{}: config.json: {e}", dir.display())))?;
        let lines = read_results(&dir.join("results.jsonl"))?;
        if lines.is_empty() {
            return Err(RunnerError::Config(format!(
                "{}: results.jsonl is empty",
                dir.display()
            )));
        }
        if verify {
            verify_run(dir, &lines)?;
        }
        let configured = config
            .folds
            .clone()
            .unwrap_or_else(|| lines.iter().map(|l| l.fold).collect::<std::collections::BTreeSet<_>>().into_iter().collect());
        runs.push(run_report_from_lines(
            config.method.clone(),
            config.pipeline.variant.as_str().to_string(),
            config.n_ways,
            config.k_shots,
            configured,
            config.miou_mode,
            config.include_failed,
            &lines,
        )?);
    }
    Ok(Report::new(runs))
}

/// Re-derive every line's TP/FP/FN from the persisted masks and check the
/// pixel bookkeeping identity.
pub fn verify_run(dir: &Path, lines: &[ResultLine]) -> Result<(), RunnerError> {
    for line in lines {
        let transcript_path = dir.join(&line.transcript);
        let text = std::fs::read_to_string(&transcript_path).map_err(|e| {
            RunnerError::Verification(format!("{}: {e}", transcript_path.display()))
        })?;
        let transcript: crate::pipeline::Transcript = serde_json::from_str(&text)
            .map_err(|e| RunnerError::Verification(format!("{}: {e}", transcript_path.display())))?;
        for counts in &line.per_class {
            let idx = (counts.class - 1) as usize;
            let predicted = transcript.predicted_masks[idx]
                .to_mask()
                .map_err(|e| RunnerError::Verification(e.to_string()))?;
            let truth = transcript.truth_masks[idx]
                .to_mask()
                .map_err(|e| RunnerError::Verification(e.to_string()))?;
            let tp = predicted
                .intersection_area(&truth)
                .map_err(|e| RunnerError::Verification(e.to_string()))?;
            let fp = predicted.area() - tp;
            let fn_ = truth.area() - tp;
            if tp != counts.tp || fp != counts.fp || fn_ != counts.fn_ {
                return Err(RunnerError::Verification(format!(
                    "episode {} fold {} class {}: stored ({}, {}, {}) != derived ({tp}, {fp}, {fn_})",
                    line.episode, line.fold, counts.class, counts.tp, counts.fp, counts.fn_
                )));
            }
        }
    }
    Ok(())
}
