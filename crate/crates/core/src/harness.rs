//! Experiment commands behind the CLI: knowledge-base builds, calibration,
//! evaluation, sweeps, coverage verification and single-scenario planning.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backends::cassette::Cassette;
use crate::backends::openai::{OpenAiClient, OpenAiConfig};
use crate::backends::synthetic::{HashEmbedder, SyntheticGenerator, SyntheticModelParams};
use crate::backends::{Embedder, LabelConfidences, TextGenerator};
use crate::conformal::{
    choose_epsilon_hat, powerset, simulate_coverage, simulate_marginal_coverage, CalibrationResult, CoverageReport,
    CoverageSimulation, EpsilonMode, MarginalCoverageReport, SetConfidences,
};
use crate::domain::{annotate_candidates, load_dataset, load_dataset_lenient, LabelSet, PredictionMode, PredictionOutcome, Scenario};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::knowledge::{build_knowledge_base, load_kb, save_kb, KnowledgeBase};
use crate::metrics::{aggregate, evaluate_all, write_classification_csv, write_metrics_csv, MetricsReport, Rate};
use crate::planner::{decide, introspect, score_options, score_subset, Backends, Introspection, PlannerConfig, RunRecord};
use crate::prompting::{template_version, PromptConfig};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Seeded simulated model answering from dataset ground truth.
    #[default]
    Synthetic,
    /// OpenAI-compatible HTTP service.
    Openai,
    /// Recorded completions only; misses are errors.
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(BackendKind::Synthetic),
            "openai" => Ok(BackendKind::Openai),
            "replay" | "cassette" => Ok(BackendKind::Replay),
            _ => Err(Error::Config(format!("unknown backend `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub valid_concentration: f64,
    pub invalid_concentration: f64,
    pub escape_mass: f64,
    pub noise_scale: f64,
    pub direct_ratio: f64,
    pub embedding_dim: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let p = SyntheticModelParams::default();
        Self {
            valid_concentration: p.valid_concentration,
            invalid_concentration: p.invalid_concentration,
            escape_mass: p.escape_mass,
            noise_scale: p.noise_scale,
            direct_ratio: 0.5,
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CassetteConfig {
    /// Replay source, and the file new OpenAI responses are appended to.
    pub path: Option<PathBuf>,
    /// Record live responses while running against OpenAI.
    pub record: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: BackendKind,
    /// Refuse network backends.
    pub offline: bool,
    pub mode: PredictionMode,
    /// Exemplars retrieved per query.
    pub m: usize,
    pub target_success: Vec<f64>,
    /// When set, ε̂ is chosen so coverage reaches the target with
    /// probability 1 − δ; otherwise ε̂ = 1 − target.
    pub delta: Option<f64>,
    pub max_in_flight: usize,
    /// Scenario failures tolerated before a command aborts.
    pub skip_budget: usize,
    /// Knowledge-base sizes for the size sweep.
    pub kb_sizes: Vec<usize>,
    pub output_dir: PathBuf,
    pub kb_path: Option<PathBuf>,
    pub calibration_path: Option<PathBuf>,
    pub data: DataPaths,
    pub prompts: PromptConfig,
    pub synthetic: SyntheticConfig,
    pub openai: OpenAiConfig,
    pub cassette: CassetteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend: BackendKind::Synthetic,
            offline: false,
            mode: PredictionMode::ConformalSingle,
            m: 3,
            target_success: default_targets(),
            delta: None,
            max_in_flight: 8,
            skip_budget: 0,
            kb_sizes: vec![10, 50, 100, 200],
            output_dir: PathBuf::from("out"),
            kb_path: None,
            calibration_path: None,
            data: DataPaths::default(),
            prompts: PromptConfig::default(),
            synthetic: SyntheticConfig::default(),
            openai: OpenAiConfig::default(),
            cassette: CassetteConfig::default(),
        }
    }
}

/// 0.60, 0.65, …, 0.95.
pub fn default_targets() -> Vec<f64> {
    (12..=19).map(|i| i as f64 * 0.05).map(|t| (t * 100.0).round() / 100.0).collect()
}

impl RunConfig {
    /// Reads TOML; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.kb_path,
            &mut self.calibration_path,
            &mut self.data.train,
            &mut self.data.calibration,
            &mut self.data.test,
            &mut self.cassette.path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.target_success.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("target success {t} is outside (0, 1)")));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("δ = {d} is outside (0, 1)")));
            }
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.offline && self.backend == BackendKind::Openai {
            return Err(Error::Config("the openai backend is not available offline".into()));
        }
        for p in [&self.data.train, &self.data.calibration, &self.data.test].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        if self.backend == BackendKind::Replay && self.cassette.path.as_ref().is_none_or(|p| !p.exists()) {
            return Err(Error::Config("the replay backend needs an existing cassette.path".into()));
        }
        Ok(())
    }

    pub fn kb_path(&self) -> PathBuf {
        self.kb_path.clone().unwrap_or_else(|| self.output_dir.join("kb.jsonl"))
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.calibration_path.clone().unwrap_or_else(|| self.output_dir.join("calibration.json"))
    }

    fn dataset(&self, which: &str, path: &Option<PathBuf>) -> Result<Vec<Scenario>> {
        let p = path.as_ref().ok_or_else(|| Error::Config(format!("data.{which} is not set")))?;
        load_dataset(p)
    }

    fn first_target(&self) -> Result<f64> {
        self.target_success
            .first()
            .copied()
            .ok_or_else(|| Error::Config("target_success is empty".into()))
    }

    fn prepare_output(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))
    }

    fn synthetic_params(&self) -> SyntheticModelParams {
        SyntheticModelParams {
            seed: self.seed,
            valid_concentration: self.synthetic.valid_concentration,
            invalid_concentration: self.synthetic.invalid_concentration,
            escape_mass: self.synthetic.escape_mass,
            noise_scale: self.synthetic.noise_scale,
        }
    }
}

// ---------------------------------------------------------------------------
// Backends

pub struct BackendSet {
    pub generator: Box<dyn TextGenerator>,
    pub embedder: Box<dyn Embedder>,
}

impl BackendSet {
    pub fn backends(&self) -> Backends<'_> {
        Backends {
            generator: self.generator.as_ref(),
            embedder: self.embedder.as_ref(),
        }
    }
}

/// Every scenario the configured datasets mention, for the synthetic model.
fn known_scenarios(cfg: &RunConfig) -> Result<Vec<Scenario>> {
    let mut all = Vec::new();
    for p in [&cfg.data.train, &cfg.data.calibration, &cfg.data.test].into_iter().flatten() {
        all.extend(load_dataset_lenient(p)?.0);
    }
    Ok(all)
}

pub fn make_backends(cfg: &RunConfig, extra: &[Scenario]) -> Result<BackendSet> {
    let hash_embedder = || Box::new(HashEmbedder::new(cfg.seed, cfg.synthetic.embedding_dim)) as Box<dyn Embedder>;
    match cfg.backend {
        BackendKind::Synthetic => {
            let params = cfg.synthetic_params();
            params.validate()?;
            let mut scenarios = known_scenarios(cfg)?;
            scenarios.extend(extra.iter().cloned());
            let gen = SyntheticGenerator::new(params, scenarios).with_direct_ratio(cfg.synthetic.direct_ratio);
            Ok(BackendSet {
                generator: Box::new(gen),
                embedder: hash_embedder(),
            })
        }
        BackendKind::Openai => {
            if cfg.offline {
                return Err(Error::Config("the openai backend is not available offline".into()));
            }
            let client = OpenAiClient::new(cfg.openai.clone())?;
            let generator: Box<dyn TextGenerator> = match (&cfg.cassette.path, cfg.cassette.record) {
                (Some(p), true) => Box::new(Cassette::record(p, Box::new(client.clone()))?),
                _ => Box::new(client.clone()),
            };
            Ok(BackendSet {
                generator,
                embedder: Box::new(client),
            })
        }
        BackendKind::Replay => {
            let p = cfg
                .cassette
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("the replay backend needs cassette.path".into()))?;
            Ok(BackendSet {
                generator: Box::new(Cassette::replay(p)?),
                embedder: hash_embedder(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Score cache

/// Model outputs for one scenario under one (templates, backend, knowledge
/// base, prompt settings) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredScenario {
    pub scenario_id: String,
    pub introspection: Introspection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_token_prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<LabelConfidences>,
    /// ĥ for the subsets queried so far.
    #[serde(default)]
    pub subset_scores: Vec<(LabelSet, f64)>,
}

impl ScoredScenario {
    fn subset_map(&self) -> SetConfidences {
        self.subset_scores.iter().cloned().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    value: ScoredScenario,
}

/// Append-only JSONL cache of [`ScoredScenario`]s; the last line for a key wins.
pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, ScoredScenario>>,
    writer: Mutex<()>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(()),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(c) => {
                        entries.insert(c.key, c.value);
                    }
                    // a torn final write only loses that entry
                    Err(e) => warn!("{}: ignoring cache line {}: {e}", path.display(), i + 1),
                }
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &str) -> Option<ScoredScenario> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    fn put(&self, key: &str, value: ScoredScenario) -> Result<()> {
        if let Some(path) = &self.path {
            let _guard = self.writer.lock().expect("cache writer lock");
            let line = serde_json::to_string(&CacheLine {
                key: key.to_string(),
                value: value.clone(),
            })?;
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.entries.lock().expect("cache lock").insert(key.to_string(), value);
        Ok(())
    }
}

#[derive(Serialize)]
struct CacheKey<'a> {
    scenario: &'a str,
    templates: &'a str,
    generator: String,
    embedder: String,
    prompts: &'a PromptConfig,
    m: usize,
    kb_entries: Vec<&'a str>,
    kb_built_at: u64,
}

/// Which subset confidences a caller needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetNeed {
    None,
    /// Only ĥ of the valid candidates.
    Truth,
    /// The whole non-empty powerset.
    All,
}

/// Scored scenarios plus `(scenario id, error)` for tolerated failures.
pub type ScoredBatch = (Vec<(Scenario, ScoredScenario)>, Vec<(String, String)>);

/// Scores scenarios through the planner, reusing cached model outputs.
pub struct Scorer<'a> {
    pub kb: &'a KnowledgeBase,
    pub planner: PlannerConfig,
    pub backends: Backends<'a>,
    pub cache: &'a ScoreCache,
}

impl Scorer<'_> {
    fn key(&self, s: &Scenario) -> String {
        let key = CacheKey {
            scenario: &s.id,
            templates: template_version(),
            generator: self.backends.generator.id(),
            embedder: self.backends.embedder.id(),
            prompts: &self.planner.prompts,
            m: self.planner.m,
            kb_entries: self.kb.entries.iter().map(|e| e.scenario.id.as_str()).collect(),
            kb_built_at: self.kb.provenance.built_at_unix,
        };
        crate::planner::sha256_hex(&serde_json::to_string(&key).expect("key serializes"))
    }

    /// Fills in whatever `single` / `subsets` ask for that the cache lacks.
    pub fn score(&self, s: &Scenario, single: bool, subsets: SubsetNeed) -> Result<ScoredScenario> {
        let run = || -> Result<ScoredScenario> {
            let key = self.key(s);
            let mut entry = match self.cache.get(&key) {
                Some(e) => e,
                None => ScoredScenario {
                    scenario_id: s.id.clone(),
                    introspection: introspect(s, self.kb, &self.planner, self.backends)?,
                    next_token_prompt_sha256: None,
                    confidences: None,
                    subset_scores: Vec::new(),
                },
            };
            let mut dirty = self.cache.get(&key).is_none();
            if single && entry.confidences.is_none() {
                let (conf, hash) = score_options(s, &entry.introspection, &self.planner.prompts, self.backends.generator)?;
                entry.confidences = Some(conf);
                entry.next_token_prompt_sha256 = Some(hash);
                dirty = true;
            }
            let wanted: Vec<LabelSet> = match subsets {
                SubsetNeed::None => vec![],
                SubsetNeed::Truth => {
                    let g = valid_candidates(s, &entry.introspection);
                    if g.is_empty() {
                        vec![]
                    } else {
                        vec![g]
                    }
                }
                SubsetNeed::All => {
                    let labels: Vec<_> = entry.introspection.options.iter().map(|o| o.label).collect();
                    powerset(&labels)?
                }
            };
            let mut have = entry.subset_map();
            for set in wanted {
                if let Entry::Vacant(slot) = have.entry(set) {
                    let h = score_subset(s, &entry.introspection, slot.key(), &self.planner.prompts, self.backends.generator)?;
                    slot.insert(h);
                    dirty = true;
                }
            }
            entry.subset_scores = have.into_iter().collect();
            if dirty {
                self.cache.put(&key, entry.clone())?;
            }
            Ok(entry)
        };
        run().map_err(|e| e.in_scenario(&s.id))
    }

    /// Scores every scenario with bounded concurrency. Failures beyond
    /// `skip_budget` abort; tolerated ones are returned separately.
    pub fn score_all(
        &self,
        scenarios: &[Scenario],
        single: bool,
        subsets: SubsetNeed,
        max_in_flight: usize,
        skip_budget: usize,
    ) -> Result<ScoredBatch> {
        let results = map_ordered(scenarios, max_in_flight, |_, s| self.score(s, single, subsets));
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        let mut first_err = None;
        for (s, r) in scenarios.iter().zip(results) {
            match r {
                Ok(v) => ok.push((s.clone(), v)),
                Err(e) => {
                    warn!("{e}");
                    failed.push((s.id.clone(), e.to_string()));
                    first_err.get_or_insert(e);
                }
            }
        }
        if failed.len() > skip_budget {
            return Err(first_err.expect("at least one failure"));
        }
        Ok((ok, failed))
    }
}

fn valid_candidates(s: &Scenario, intro: &Introspection) -> LabelSet {
    annotate_candidates(&intro.options, s)
        .iter()
        .filter(|o| o.is_valid)
        .map(|o| o.label)
        .collect()
}

/// Calibration score from cached outputs; 1 when the truth was not generated.
fn calibration_score(mode: PredictionMode, s: &Scenario, scored: &ScoredScenario) -> Result<f64> {
    let annotated = annotate_candidates(&scored.introspection.options, s);
    match mode {
        PredictionMode::ConformalSingle => {
            let Some(z) = annotated.iter().find(|o| o.is_intent).map(|o| o.label) else {
                return Ok(1.0);
            };
            let conf = scored
                .confidences
                .as_ref()
                .ok_or_else(|| Error::precondition("missing label confidences"))?;
            crate::conformal::nonconformity(conf, z)
        }
        PredictionMode::ConformalMulti => {
            let g = valid_candidates(s, &scored.introspection);
            let truth_count = s.options.iter().filter(|o| o.is_valid).count();
            if g.is_empty() || g.len() < truth_count {
                return Ok(1.0);
            }
            let h = scored
                .subset_map()
                .get(&g)
                .copied()
                .ok_or_else(|| Error::precondition("missing ĥ for the valid set"))?;
            Ok(1.0 - h)
        }
        PredictionMode::Direct => Err(Error::Config("direct mode has no calibration".into())),
    }
}

fn needs(mode: PredictionMode, calibration: bool) -> (bool, SubsetNeed) {
    match mode {
        PredictionMode::Direct => (false, SubsetNeed::None),
        PredictionMode::ConformalSingle => (true, SubsetNeed::None),
        PredictionMode::ConformalMulti if calibration => (false, SubsetNeed::Truth),
        PredictionMode::ConformalMulti => (false, SubsetNeed::All),
    }
}

fn outcome_from_scores(mode: PredictionMode, scored: &ScoredScenario, q_hat: Option<f64>) -> Result<PredictionOutcome> {
    let sets = scored.subset_map();
    decide(
        &scored.scenario_id,
        mode,
        &scored.introspection,
        scored.confidences.as_ref(),
        (mode == PredictionMode::ConformalMulti).then_some(&sets),
        q_hat,
    )
}

fn open_cache(cfg: &RunConfig) -> Result<ScoreCache> {
    ScoreCache::open(&cfg.output_dir.join("score_cache.jsonl"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildKbReport {
    pub kb_path: PathBuf,
    pub entries: usize,
    /// `(line, reason)` for dataset lines that failed to load.
    pub skipped_lines: Vec<(usize, String)>,
    /// `(scenario id, reason)` for instances whose build failed.
    pub failed: Vec<(String, String)>,
    pub coverage_warnings: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn cmd_build_kb(cfg: &RunConfig) -> Result<BuildKbReport> {
    build_kb_with(cfg, &make_backends(cfg, &[])?)
}

pub fn build_kb_with(cfg: &RunConfig, backends: &BackendSet) -> Result<BuildKbReport> {
    cfg.prepare_output()?;
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let (train, skipped_lines) = load_dataset_lenient(train_path)?;
    for (line, reason) in &skipped_lines {
        warn!("{}:{line}: skipped: {reason}", train_path.display());
    }
    let mut warnings = Vec::new();
    if train.is_empty() {
        let w = format!("{} holds no usable scenarios; the knowledge base is empty", train_path.display());
        warn!("{w}");
        warnings.push(w);
    }
    let report = build_knowledge_base(
        &train,
        backends.generator.as_ref(),
        backends.embedder.as_ref(),
        &cfg.prompts,
        cfg.max_in_flight,
    )?;
    let kb_path = cfg.kb_path();
    save_kb(&report.kb, &kb_path)?;
    let out = BuildKbReport {
        kb_path,
        entries: report.kb.len(),
        skipped_lines,
        failed: report.failures,
        coverage_warnings: report.coverage_warnings,
        warnings,
    };
    write_json(&cfg.output_dir.join("build_report.json"), &out)?;
    info!("wrote {} entries to {}", out.entries, out.kb_path.display());
    Ok(out)
}

fn epsilon_for(cfg: &RunConfig, target: f64, n: usize) -> Result<(f64, EpsilonMode)> {
    match cfg.delta {
        Some(delta) => Ok((choose_epsilon_hat(target, n, delta)?, EpsilonMode::DeltaAdjusted)),
        None => Ok((1.0 - target, EpsilonMode::Fixed)),
    }
}

fn load_nonempty_kb(cfg: &RunConfig) -> Result<KnowledgeBase> {
    let kb = load_kb(&cfg.kb_path())?;
    if kb.is_empty() {
        return Err(Error::precondition("the knowledge base is empty"));
    }
    Ok(kb)
}

fn conformal_mode(cfg: &RunConfig) -> Result<PredictionMode> {
    match cfg.mode {
        PredictionMode::Direct => Err(Error::Config("calibration needs a conformal mode".into())),
        m => Ok(m),
    }
}

fn scoring_planner(cfg: &RunConfig, mode: PredictionMode) -> PlannerConfig {
    // scoring never thresholds, so no artifact is attached
    PlannerConfig {
        mode,
        m: cfg.m,
        prompts: cfg.prompts,
        calibration: None,
    }
}

fn calibration_scores(
    cfg: &RunConfig,
    mode: PredictionMode,
    scenarios: &[Scenario],
    scorer: &Scorer<'_>,
) -> Result<Vec<f64>> {
    let (single, subsets) = needs(mode, true);
    let (scored, failed) = scorer.score_all(scenarios, single, subsets, cfg.max_in_flight, cfg.skip_budget)?;
    if !failed.is_empty() {
        warn!("{} calibration scenarios skipped", failed.len());
    }
    scored.iter().map(|(s, v)| calibration_score(mode, s, v)).collect()
}

fn calibrate_from_scores(cfg: &RunConfig, mode: PredictionMode, target: f64, scores: &[f64], backend_id: String) -> Result<CalibrationResult> {
    if scores.is_empty() {
        return Err(Error::precondition("the calibration set is empty"));
    }
    let (eps, eps_mode) = epsilon_for(cfg, target, scores.len())?;
    let mut result = CalibrationResult::from_scores(scores, eps, mode)?;
    result.delta = cfg.delta;
    result.target_success = Some(target);
    result.epsilon_mode = eps_mode;
    result.backend_id = backend_id;
    Ok(result)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrationResult> {
    calibrate_with(cfg, &make_backends(cfg, &[])?)
}

pub fn calibrate_with(cfg: &RunConfig, backends: &BackendSet) -> Result<CalibrationResult> {
    cfg.prepare_output()?;
    let mode = conformal_mode(cfg)?;
    let scenarios = cfg.dataset("calibration", &cfg.data.calibration)?;
    if scenarios.is_empty() {
        return Err(Error::precondition("the calibration set is empty"));
    }
    let kb = load_nonempty_kb(cfg)?;
    let cache = open_cache(cfg)?;
    let scorer = Scorer {
        kb: &kb,
        planner: scoring_planner(cfg, mode),
        backends: backends.backends(),
        cache: &cache,
    };
    let scores = calibration_scores(cfg, mode, &scenarios, &scorer)?;
    let result = calibrate_from_scores(cfg, mode, cfg.first_target()?, &scores, backends.generator.id())?;
    result.save(&cfg.calibration_path())?;
    info!(
        "q̂ = {} at ε̂ = {} from {} scores ({:?})",
        result.q_hat, result.epsilon_hat, result.n, result.epsilon_mode
    );
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: PredictionMode,
    pub q_hat: Option<f64>,
    pub metrics: MetricsReport,
    pub average_set_size: f64,
    pub failed: Vec<(String, String)>,
    pub run_log: PathBuf,
}

fn average_set_size(outcomes: &[PredictionOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(|o| o.label_union().len() as f64).sum::<f64>() / outcomes.len() as f64
}

fn run_record(mode: PredictionMode, scored: &ScoredScenario, q_hat: Option<f64>) -> Result<RunRecord> {
    let outcome = outcome_from_scores(mode, scored, q_hat)?;
    Ok(RunRecord {
        scenario_id: scored.scenario_id.clone(),
        mode,
        introspection: scored.introspection.clone(),
        next_token_prompt_sha256: scored.next_token_prompt_sha256.clone(),
        confidences: scored.confidences.clone(),
        set_confidences: (mode == PredictionMode::ConformalMulti).then(|| scored.subset_scores.clone()),
        q_hat,
        outcome,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Loads and checks the calibration artifact a conformal run needs.
fn load_artifact(cfg: &RunConfig) -> Result<Option<CalibrationResult>> {
    if cfg.mode == PredictionMode::Direct {
        return Ok(None);
    }
    let cal = CalibrationResult::load(&cfg.calibration_path())?;
    cal.check_template(template_version())?;
    if cal.mode != cfg.mode {
        return Err(Error::Config(format!(
            "calibration artifact is for {:?}, config asks for {:?}",
            cal.mode, cfg.mode
        )));
    }
    Ok(Some(cal))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluationReport> {
    evaluate_with(cfg, &make_backends(cfg, &[])?)
}

pub fn evaluate_with(cfg: &RunConfig, backends: &BackendSet) -> Result<EvaluationReport> {
    cfg.prepare_output()?;
    let calibration = load_artifact(cfg)?;
    let q_hat = calibration.as_ref().map(|c| c.q_hat);
    let test = cfg.dataset("test", &cfg.data.test)?;
    let kb = load_nonempty_kb(cfg)?;
    let cache = open_cache(cfg)?;
    let scorer = Scorer {
        kb: &kb,
        planner: scoring_planner(cfg, cfg.mode),
        backends: backends.backends(),
        cache: &cache,
    };
    let (single, subsets) = needs(cfg.mode, false);
    let (scored, failed) = scorer.score_all(&test, single, subsets, cfg.max_in_flight, cfg.skip_budget)?;
    let records = scored
        .iter()
        .map(|(_, v)| run_record(cfg.mode, v, q_hat))
        .collect::<Result<Vec<_>>>()?;
    let run_log = cfg.output_dir.join("run_log.jsonl");
    write_jsonl(&run_log, &records)?;
    let outcomes: Vec<PredictionOutcome> = records.into_iter().map(|r| r.outcome).collect();
    let truths: Vec<Scenario> = scored.into_iter().map(|(s, _)| s).collect();
    let evals = evaluate_all(&outcomes, &truths)?;
    let metrics = aggregate(&evals);
    write_metrics_csv(&metrics, &cfg.output_dir.join("metrics.csv"))?;
    write_classification_csv(&evals, &cfg.output_dir.join("classification.csv"))?;
    let report = EvaluationReport {
        mode: cfg.mode,
        q_hat,
        average_set_size: average_set_size(&outcomes),
        metrics,
        failed,
        run_log,
    };
    write_json(&cfg.output_dir.join("evaluation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kb_size: usize,
    pub target_success: f64,
    pub epsilon_hat: f64,
    pub q_hat: f64,
    pub metrics: MetricsReport,
    pub average_set_size: f64,
}

fn sweep_rows_for_kb(cfg: &RunConfig, mode: PredictionMode, kb: &KnowledgeBase, targets: &[f64], backends: &BackendSet, cache: &ScoreCache) -> Result<Vec<SweepRow>> {
    let cal_set = cfg.dataset("calibration", &cfg.data.calibration)?;
    let test = cfg.dataset("test", &cfg.data.test)?;
    let scorer = Scorer {
        kb,
        planner: scoring_planner(cfg, mode),
        backends: backends.backends(),
        cache,
    };
    let scores = calibration_scores(cfg, mode, &cal_set, &scorer)?;
    let (single, subsets) = needs(mode, false);
    let (scored, _) = scorer.score_all(&test, single, subsets, cfg.max_in_flight, cfg.skip_budget)?;
    let truths: Vec<Scenario> = scored.iter().map(|(s, _)| s.clone()).collect();
    targets
        .iter()
        .map(|&t| {
            let cal = calibrate_from_scores(cfg, mode, t, &scores, backends.generator.id())?;
            let outcomes = scored
                .iter()
                .map(|(_, v)| outcome_from_scores(mode, v, Some(cal.q_hat)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                kb_size: kb.len(),
                target_success: t,
                epsilon_hat: cal.epsilon_hat,
                q_hat: cal.q_hat,
                metrics: aggregate(&evaluate_all(&outcomes, &truths)?),
                average_set_size: average_set_size(&outcomes),
            })
        })
        .collect()
}

/// One row per target success, all from one set of cached scores.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    sweep_with(cfg, &make_backends(cfg, &[])?)
}

pub fn sweep_with(cfg: &RunConfig, backends: &BackendSet) -> Result<Vec<SweepRow>> {
    if cfg.target_success.len() < 2 {
        return Err(Error::precondition("a sweep needs at least two target points"));
    }
    cfg.prepare_output()?;
    let mode = conformal_mode(cfg)?;
    let kb = load_nonempty_kb(cfg)?;
    let cache = open_cache(cfg)?;
    let rows = sweep_rows_for_kb(cfg, mode, &kb, &cfg.target_success, backends, &cache)?;
    write_sweep_csv(&rows, &cfg.output_dir.join("sweep.csv"))?;
    Ok(rows)
}

/// Rows for each knowledge-base prefix size, at the first target.
pub fn cmd_sweep_kb_sizes(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    sweep_kb_sizes_with(cfg, &make_backends(cfg, &[])?)
}

pub fn sweep_kb_sizes_with(cfg: &RunConfig, backends: &BackendSet) -> Result<Vec<SweepRow>> {
    if cfg.kb_sizes.is_empty() {
        return Err(Error::precondition("kb_sizes is empty"));
    }
    cfg.prepare_output()?;
    let mode = conformal_mode(cfg)?;
    let kb = load_nonempty_kb(cfg)?;
    let cache = open_cache(cfg)?;
    let target = cfg.first_target()?;
    let mut rows = Vec::new();
    for &size in &cfg.kb_sizes {
        if size == 0 || size > kb.len() {
            warn!("skipping knowledge-base size {size} (base holds {})", kb.len());
            continue;
        }
        rows.extend(sweep_rows_for_kb(cfg, mode, &kb.prefix(size), &[target], backends, &cache)?);
    }
    write_sweep_csv(&rows, &cfg.output_dir.join("sweep_kb_size.csv"))?;
    Ok(rows)
}

fn fmt_opt(r: &Rate) -> String {
    r.value().map_or_else(|| "NA".into(), |v| v.to_string())
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut header = vec!["kb_size", "target_success", "epsilon_hat", "q_hat"];
    let names: Vec<&str> = rows.first().map(|r| r.metrics.rows().iter().map(|(n, _)| *n).collect()).unwrap_or_default();
    header.extend(names.iter().copied());
    header.push("average_set_size");
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.kb_size.to_string(),
            r.target_success.to_string(),
            r.epsilon_hat.to_string(),
            r.q_hat.to_string(),
        ];
        rec.extend(r.metrics.rows().iter().map(|(_, rate)| fmt_opt(rate)));
        rec.push(r.average_set_size.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyCoverageOptions {
    pub n: usize,
    pub epsilon_hat: f64,
    pub trials: usize,
    pub tests_per_trial: usize,
    pub delta: f64,
    pub seed: u64,
    pub multi_label: bool,
    /// Options per synthetic scenario (3 keeps multi-label powersets small).
    pub options: usize,
    pub workers: usize,
}

impl Default for VerifyCoverageOptions {
    fn default() -> Self {
        Self {
            n: 400,
            epsilon_hat: 0.15,
            trials: 500,
            tests_per_trial: 2000,
            delta: 0.01,
            seed: 0,
            multi_label: false,
            options: 4,
            workers: crate::exec::cpu_workers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyCoverageReport {
    pub coverage: CoverageReport,
    /// Calibrate-then-test-on-one trials, same count as `coverage.trials`.
    pub marginal: MarginalCoverageReport,
}

impl VerifyCoverageReport {
    pub fn passed(&self) -> bool {
        self.coverage.passed() && self.marginal.passed
    }
}

pub fn cmd_verify_coverage(opts: &VerifyCoverageOptions) -> Result<VerifyCoverageReport> {
    if opts.trials < 100 {
        return Err(Error::precondition("verify-coverage needs at least 100 trials"));
    }
    let mut sim = CoverageSimulation::new(opts.n, opts.epsilon_hat, opts.seed);
    sim.options = opts.options;
    sim.workers = opts.workers;
    let coverage = simulate_coverage(&sim, opts.trials, opts.tests_per_trial, opts.delta, opts.multi_label)?;
    let marginal = simulate_marginal_coverage(&sim, opts.trials, opts.multi_label)?;
    Ok(VerifyCoverageReport { coverage, marginal })
}

/// Plans one scenario with the configured mode and artifact.
pub fn cmd_plan(cfg: &RunConfig, scenario: &Scenario) -> Result<RunRecord> {
    plan_with(cfg, scenario, &make_backends(cfg, std::slice::from_ref(scenario))?)
}

pub fn plan_with(cfg: &RunConfig, scenario: &Scenario, backends: &BackendSet) -> Result<RunRecord> {
    let calibration = load_artifact(cfg)?;
    let kb = load_nonempty_kb(cfg)?;
    let planner = PlannerConfig {
        mode: cfg.mode,
        m: cfg.m,
        prompts: cfg.prompts,
        calibration,
    };
    crate::planner::plan(scenario, &kb, &planner, backends.backends())
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Backend(_) | Error::GenerationFormat(_) | Error::Parse { .. } => 4,
        Error::InvalidLabel(_)
        | Error::Capacity { .. }
        | Error::Precondition(_)
        | Error::Dataset { .. }
        | Error::CorruptLine { .. }
        | Error::Schema(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyBuild { .. }
        | Error::Infeasible { .. }
        | Error::TemplateVersionMismatch { .. }
        | Error::Config(_) => 3,
        Error::Scenario { .. } | Error::Io { .. } | Error::Json(_) => 1,
    }
}

pub const EXIT_NEEDS_CLARIFICATION: u8 = 2;

/// Labels grouped for printing a clarification question.
pub fn clarification_options(record: &RunRecord) -> BTreeMap<String, String> {
    let offered = record.outcome.label_union();
    let pool = if offered.is_empty() {
        // an empty set offers every candidate
        record.introspection.options.iter().map(|o| o.label).collect()
    } else {
        offered
    };
    record
        .introspection
        .options
        .iter()
        .filter(|o| pool.contains(&o.label))
        .map(|o| (o.label.to_string(), o.text.clone()))
        .collect()
}
