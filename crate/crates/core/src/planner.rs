//! Deployment pipeline: retrieve exemplars, generate candidates with a
//! rationale, then predict directly or through a conformal set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{score_labels, CompletionRequest, Embedder, LabelConfidences, TextGenerator};
use crate::conformal::{multilabel_predict, nonconformity, powerset, predict_set, CalibrationResult, SetConfidences};
use crate::domain::{
    annotate_candidates, is_escape_text, LabelSet, OptionLabel, PlanOption, PredictionMode, PredictionOutcome, PredictionSet,
    Scenario, ESCAPE_TEXT,
};
use crate::error::{Error, Result};
use crate::knowledge::{rank_similar, KnowledgeBase};
use crate::prompting::{
    parse_inference_output, render_inference_prompt, render_multilabel_query, render_next_token_prompt, MultilabelContext,
    PromptConfig, PromptKind,
};

/// Token budget for the inference completion.
const INFERENCE_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub mode: PredictionMode,
    /// Exemplars retrieved per query.
    pub m: usize,
    pub prompts: PromptConfig,
    pub calibration: Option<CalibrationResult>,
}

impl PlannerConfig {
    pub fn direct(prompts: PromptConfig) -> Self {
        Self {
            mode: PredictionMode::Direct,
            m: 3,
            prompts,
            calibration: None,
        }
    }

    pub fn conformal(prompts: PromptConfig, calibration: CalibrationResult) -> Self {
        Self {
            mode: calibration.mode,
            m: 3,
            prompts,
            calibration: Some(calibration),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("retrieval count m must be at least 1".into()));
        }
        match (self.mode, &self.calibration) {
            (PredictionMode::Direct, None) => Ok(()),
            (PredictionMode::Direct, Some(_)) => Err(Error::Config("direct mode takes no calibration artifact".into())),
            (mode, None) => Err(Error::Config(format!("{mode:?} mode needs a calibration artifact"))),
            (mode, Some(c)) if c.mode != mode => Err(Error::Config(format!(
                "calibration artifact was built for {:?}, planner runs {mode:?}",
                c.mode
            ))),
            (_, Some(c)) => c.check_template(crate::prompting::template_version()),
        }
    }

    fn q_hat(&self) -> Result<f64> {
        self.calibration
            .as_ref()
            .map(|c| c.q_hat)
            .ok_or_else(|| Error::Config("conformal mode needs a calibration artifact".into()))
    }
}

/// The text generator and embedder a pipeline runs against.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub generator: &'a dyn TextGenerator,
    pub embedder: &'a dyn Embedder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub id: String,
    pub similarity: f64,
}

/// Everything the inference prompt produced for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Introspection {
    pub retrieved: Vec<RetrievedRef>,
    pub inference_prompt_sha256: String,
    pub raw_output: String,
    pub options: Vec<PlanOption>,
    pub rationale: String,
    pub direct_labels: LabelSet,
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Keeps exactly one escape option (appending one if absent) and returns
/// the old-to-new label map for the options that were kept or merged.
fn with_single_escape(options: &[PlanOption]) -> Result<(Vec<PlanOption>, BTreeMap<OptionLabel, OptionLabel>)> {
    let mut out: Vec<PlanOption> = Vec::with_capacity(options.len() + 1);
    let mut map = BTreeMap::new();
    let mut escape: Option<OptionLabel> = None;
    for o in options {
        if is_escape_text(&o.text) {
            if let Some(e) = escape {
                map.insert(o.label, e);
                continue;
            }
        }
        let label = OptionLabel::from_index(out.len())?;
        if is_escape_text(&o.text) {
            escape = Some(label);
        }
        map.insert(o.label, label);
        out.push(PlanOption::new(label, o.text.clone()));
    }
    if escape.is_none() {
        out.push(PlanOption::new(OptionLabel::from_index(out.len())?, ESCAPE_TEXT));
    }
    Ok((out, map))
}

/// Retrieves exemplars and runs the inference prompt.
pub fn introspect(s: &Scenario, kb: &KnowledgeBase, cfg: &PlannerConfig, backends: Backends<'_>) -> Result<Introspection> {
    let query = backends.embedder.embed(&s.instruction)?;
    let hits = rank_similar(&query, kb, cfg.m)?;
    let exemplars: Vec<_> = hits.iter().map(|h| h.entry.clone()).collect();
    let prompt = render_inference_prompt(s, &exemplars, &cfg.prompts.template(PromptKind::Inference))?;
    let out = backends.generator.complete(&CompletionRequest::new(prompt.as_str(), INFERENCE_MAX_TOKENS))?;
    let parsed = parse_inference_output(&out.text)?;
    let (options, map) = with_single_escape(&parsed.options)?;
    let direct_labels = parsed.direct_labels.iter().map(|l| map[l]).collect();
    Ok(Introspection {
        retrieved: hits
            .iter()
            .map(|h| RetrievedRef {
                id: h.entry.scenario.id.clone(),
                similarity: h.similarity,
            })
            .collect(),
        inference_prompt_sha256: sha256_hex(&prompt),
        raw_output: out.text,
        options,
        rationale: parsed.rationale,
        direct_labels,
    })
}

/// Next-token confidences over the candidate letters.
pub fn score_options(s: &Scenario, intro: &Introspection, prompts: &PromptConfig, generator: &dyn TextGenerator) -> Result<(LabelConfidences, String)> {
    let prompt = render_next_token_prompt(s, &intro.options, &intro.rationale, &prompts.template(PromptKind::NextToken))?;
    let labels: Vec<OptionLabel> = intro.options.iter().map(|o| o.label).collect();
    let conf = score_labels(generator, &prompt, &labels)?;
    Ok((conf, sha256_hex(&prompt)))
}

const YES: OptionLabel = OptionLabel::const_new('Y');
const NO: OptionLabel = OptionLabel::const_new('N');

/// ĥ(subset): probability of `Y` normalized over `{Y, N}`.
pub fn score_subset(
    s: &Scenario,
    intro: &Introspection,
    subset: &LabelSet,
    prompts: &PromptConfig,
    generator: &dyn TextGenerator,
) -> Result<f64> {
    let ctx = MultilabelContext {
        scenario: s,
        options: &intro.options,
        rationale: &intro.rationale,
    };
    let prompt = render_multilabel_query(subset, &ctx, &prompts.template(PromptKind::MultilabelQuery))?;
    let conf = score_labels(generator, &prompt, &[YES, NO])?;
    Ok(conf.get(YES).unwrap_or(0.0))
}

/// ĥ over the whole non-empty powerset of the candidates.
pub fn score_subsets(s: &Scenario, intro: &Introspection, prompts: &PromptConfig, generator: &dyn TextGenerator) -> Result<SetConfidences> {
    let labels: Vec<OptionLabel> = intro.options.iter().map(|o| o.label).collect();
    powerset(&labels)?
        .into_iter()
        .map(|set| {
            let h = score_subset(s, intro, &set, prompts, generator)?;
            Ok((set, h))
        })
        .collect()
}

/// One structured run-log record per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario_id: String,
    pub mode: PredictionMode,
    pub introspection: Introspection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_token_prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<LabelConfidences>,
    /// `(subset, ĥ)` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_confidences: Option<Vec<(LabelSet, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_hat: Option<f64>,
    pub outcome: PredictionOutcome,
}

/// Turns scored candidates into an outcome for `mode`.
pub fn decide(
    scenario_id: &str,
    mode: PredictionMode,
    intro: &Introspection,
    confidences: Option<&LabelConfidences>,
    set_confidences: Option<&SetConfidences>,
    q_hat: Option<f64>,
) -> Result<PredictionOutcome> {
    let need = |what: &str| Error::precondition(format!("{mode:?} prediction needs {what}"));
    let prediction = match mode {
        PredictionMode::Direct => PredictionSet::Single(intro.direct_labels.clone()),
        PredictionMode::ConformalSingle => {
            let conf = confidences.ok_or_else(|| need("label confidences"))?;
            PredictionSet::Single(predict_set(conf, q_hat.ok_or_else(|| need("q̂"))?))
        }
        PredictionMode::ConformalMulti => {
            let sets = set_confidences.ok_or_else(|| need("subset confidences"))?;
            PredictionSet::Family(multilabel_predict(sets, q_hat.ok_or_else(|| need("q̂"))?)?)
        }
    };
    Ok(PredictionOutcome::new(scenario_id, mode, prediction, intro.options.clone()))
}

fn plan_inner(s: &Scenario, kb: &KnowledgeBase, cfg: &PlannerConfig, backends: Backends<'_>) -> Result<RunRecord> {
    cfg.validate()?;
    let intro = introspect(s, kb, cfg, backends)?;
    let mut record = RunRecord {
        scenario_id: s.id.clone(),
        mode: cfg.mode,
        next_token_prompt_sha256: None,
        confidences: None,
        set_confidences: None,
        q_hat: None,
        outcome: decide(&s.id, PredictionMode::Direct, &intro, None, None, None)?,
        introspection: intro,
    };
    match cfg.mode {
        PredictionMode::Direct => {}
        PredictionMode::ConformalSingle => {
            let q = cfg.q_hat()?;
            let (conf, hash) = score_options(s, &record.introspection, &cfg.prompts, backends.generator)?;
            record.outcome = decide(&s.id, cfg.mode, &record.introspection, Some(&conf), None, Some(q))?;
            record.next_token_prompt_sha256 = Some(hash);
            record.confidences = Some(conf);
            record.q_hat = Some(q);
        }
        PredictionMode::ConformalMulti => {
            let q = cfg.q_hat()?;
            let sets = score_subsets(s, &record.introspection, &cfg.prompts, backends.generator)?;
            record.outcome = decide(&s.id, cfg.mode, &record.introspection, None, Some(&sets), Some(q))?;
            record.set_confidences = Some(sets.into_iter().collect());
            record.q_hat = Some(q);
        }
    }
    Ok(record)
}

/// Runs the full pipeline for one scenario. Errors carry the scenario id.
pub fn plan(s: &Scenario, kb: &KnowledgeBase, cfg: &PlannerConfig, backends: Backends<'_>) -> Result<RunRecord> {
    plan_inner(s, kb, cfg, backends).map_err(|e| e.in_scenario(&s.id))
}

/// Calibration score of one labelled scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub scenario_id: String,
    pub score: f64,
    /// False when the truth was absent from the generated candidates; the
    /// score is then 1.
    pub truth_in_candidates: bool,
}

/// Single-label score `1 − f̂(z)` for the intended option z.
pub fn calibration_score_single(s: &Scenario, kb: &KnowledgeBase, cfg: &PlannerConfig, backends: Backends<'_>) -> Result<CalibrationPoint> {
    let run = || -> Result<CalibrationPoint> {
        let intro = introspect(s, kb, cfg, backends)?;
        let annotated = annotate_candidates(&intro.options, s);
        let Some(z) = annotated.iter().find(|o| o.is_intent).map(|o| o.label) else {
            return Ok(CalibrationPoint {
                scenario_id: s.id.clone(),
                score: 1.0,
                truth_in_candidates: false,
            });
        };
        let (conf, _) = score_options(s, &intro, &cfg.prompts, backends.generator)?;
        Ok(CalibrationPoint {
            scenario_id: s.id.clone(),
            score: nonconformity(&conf, z)?,
            truth_in_candidates: true,
        })
    };
    run().map_err(|e| e.in_scenario(&s.id))
}

/// Multi-label score `1 − ĥ(G)` for the set G of valid candidates.
pub fn calibration_score_multi(s: &Scenario, kb: &KnowledgeBase, cfg: &PlannerConfig, backends: Backends<'_>) -> Result<CalibrationPoint> {
    let run = || -> Result<CalibrationPoint> {
        let intro = introspect(s, kb, cfg, backends)?;
        let annotated = annotate_candidates(&intro.options, s);
        let g: LabelSet = annotated.iter().filter(|o| o.is_valid).map(|o| o.label).collect();
        let truth_count = s.options.iter().filter(|o| o.is_valid).count();
        if g.is_empty() || g.len() < truth_count {
            return Ok(CalibrationPoint {
                scenario_id: s.id.clone(),
                score: 1.0,
                truth_in_candidates: false,
            });
        }
        let h = score_subset(s, &intro, &g, &cfg.prompts, backends.generator)?;
        Ok(CalibrationPoint {
            scenario_id: s.id.clone(),
            score: 1.0 - h,
            truth_in_candidates: true,
        })
    };
    run().map_err(|e| e.in_scenario(&s.id))
}

/// What the simulated human answers when asked for help.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "label")]
pub enum HelpResolution {
    Resolved(OptionLabel),
    /// The intended action was not offered: the robot asked the wrong question.
    CannotResolve,
}

/// The human picks `true_intent` when it is among the offered labels.
pub fn resolve_help(outcome: &PredictionOutcome, true_intent: OptionLabel) -> Result<HelpResolution> {
    if !outcome.asked_for_help {
        return Err(Error::precondition("the planner did not ask for help"));
    }
    Ok(if outcome.label_union().contains(&true_intent) {
        HelpResolution::Resolved(true_intent)
    } else {
        HelpResolution::CannotResolve
    })
}
