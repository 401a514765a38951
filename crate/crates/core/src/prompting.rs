//! Prompt rendering and model-output parsing.
//!
//! Template text lives in `templates/` (see the README there for the
//! placeholder grammar) and is compiled in. [`template_version`] hashes all of
//! it so calibration artifacts can detect template drift.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{format_label_set, LabelSet, OptionLabel, PlanOption, Scenario};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeEntry;

/// Sentence added after the system text in safety mode.
pub const SAFETY_SENTENCE: &str = "If the task instruction is unsafe, then select an option not listed here";

pub const NEXT_TOKEN_QUESTION: &str = "Which option is correct? Answer with a single letter.";

pub const MULTILABEL_QUESTION_PREFIX: &str = "Is the set ";

pub const MULTILABEL_QUESTION_SUFFIX: &str = " including all valid options according to the user's request? Reply 'Y' if it exactly matches all valid options, and 'N' if it includes any invalid options or is a proper subset of the valid options.";

const TEMPLATE_FILES: &[(&str, &str)] = &[
    ("preamble.txt", include_str!("../templates/preamble.txt")),
    ("system_plan.txt", include_str!("../templates/system_plan.txt")),
    ("system_knowledge.txt", include_str!("../templates/system_knowledge.txt")),
    ("option_gen.txt", include_str!("../templates/option_gen.txt")),
    ("option_gen_examples.txt", include_str!("../templates/option_gen_examples.txt")),
    ("knowledge_gen.txt", include_str!("../templates/knowledge_gen.txt")),
    ("knowledge_gen_examples.txt", include_str!("../templates/knowledge_gen_examples.txt")),
    ("inference.txt", include_str!("../templates/inference.txt")),
    ("next_token.txt", include_str!("../templates/next_token.txt")),
    ("multilabel_query.txt", include_str!("../templates/multilabel_query.txt")),
];

fn template_file(name: &str) -> &'static str {
    let raw = TEMPLATE_FILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .unwrap_or_else(|| panic!("template {name} is not bundled"));
    raw.strip_suffix('\n').unwrap_or(raw)
}

/// Short content hash of every bundled template file.
pub fn template_version() -> &'static str {
    static VERSION: OnceLock<String> = OnceLock::new();
    VERSION.get_or_init(|| {
        let mut h = Sha256::new();
        for (name, text) in TEMPLATE_FILES {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(text.as_bytes());
            h.update([0u8]);
        }
        format!("tmpl-{}", &hex::encode(h.finalize())[..16])
    })
}

/// Substitutes `{{name}}` placeholders. Every placeholder must be bound.
pub fn render_placeholders(template: &str, values: &BTreeMap<&str, &str>) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            break;
        };
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            out.push_str(&rest[..start + 2]);
            rest = after;
            continue;
        }
        let value = values
            .get(name)
            .ok_or_else(|| Error::precondition(format!("template placeholder `{name}` is unbound")))?;
        out.push_str(&rest[..start]);
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    OptionGen,
    KnowledgeGen,
    Inference,
    NextToken,
    MultilabelQuery,
}

impl PromptKind {
    fn body_file(self) -> &'static str {
        match self {
            PromptKind::OptionGen => "option_gen.txt",
            PromptKind::KnowledgeGen => "knowledge_gen.txt",
            PromptKind::Inference => "inference.txt",
            PromptKind::NextToken => "next_token.txt",
            PromptKind::MultilabelQuery => "multilabel_query.txt",
        }
    }

    fn system_file(self) -> &'static str {
        match self {
            PromptKind::KnowledgeGen => "system_knowledge.txt",
            _ => "system_plan.txt",
        }
    }
}

/// One rendered-ready template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: PromptKind,
    pub system_preamble: String,
    pub exemplar_slots: usize,
    pub safety_mode: bool,
    body: &'static str,
}

impl PromptTemplate {
    pub fn new(name: PromptKind, safety_mode: bool, exemplar_slots: usize) -> Self {
        let preamble = template_file("preamble.txt");
        let mut system = template_file(name.system_file()).replace("{{preamble}}", preamble);
        if safety_mode {
            system.push('\n');
            system.push_str(SAFETY_SENTENCE);
            system.push('.');
        }
        Self {
            name,
            system_preamble: system,
            exemplar_slots,
            safety_mode,
            body: template_file(name.body_file()),
        }
    }

    fn render<'a>(&'a self, mut values: BTreeMap<&'static str, &'a str>) -> Result<String> {
        values.insert("system", &self.system_preamble);
        render_placeholders(self.body, &values)
    }
}

/// Template settings shared by one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub safety_mode: bool,
    /// Few-shot blocks in the option-generation prompt.
    pub option_examples: usize,
    /// Few-shot blocks in the knowledge-generation prompt.
    pub knowledge_examples: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            safety_mode: false,
            option_examples: 4,
            knowledge_examples: 3,
        }
    }
}

impl PromptConfig {
    pub fn template(&self, kind: PromptKind) -> PromptTemplate {
        let slots = match kind {
            PromptKind::OptionGen => self.option_examples,
            PromptKind::KnowledgeGen => self.knowledge_examples,
            _ => 0,
        };
        PromptTemplate::new(kind, self.safety_mode, slots)
    }
}

fn example_blocks(file: &str, count: usize) -> String {
    template_file(file)
        .split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .take(count)
        .map(|b| format!("{}\n\n", b.trim_end()))
        .collect()
}

pub fn format_options(options: &[PlanOption]) -> String {
    options
        .iter()
        .map(|o| format!("{}) {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_label_list(labels: &LabelSet) -> String {
    labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
}

/// A fully answered scenario block as used for retrieved exemplars.
pub fn render_exemplar_block(scene: &str, task: &str, options: &[PlanOption], explain: &str, prediction: &LabelSet) -> String {
    format!(
        "Scene: {scene}\nTask: {task}\nOptions:\n{}\nExplain: {explain}\nPrediction: {}\n",
        format_options(options),
        format_label_list(prediction)
    )
}

pub fn render_option_gen_prompt(s: &Scenario, tmpl: &PromptTemplate) -> Result<String> {
    if s.instruction.trim().is_empty() || s.scene.trim().is_empty() {
        return Err(Error::precondition("scenario needs a scene and an instruction"));
    }
    let examples = example_blocks("option_gen_examples.txt", tmpl.exemplar_slots);
    tmpl.render(BTreeMap::from([
        ("examples", examples.as_str()),
        ("scene", s.scene.as_str()),
        ("task", s.instruction.as_str()),
    ]))
}

pub fn render_knowledge_prompt(s: &Scenario, candidates: &[PlanOption], valid: &LabelSet, tmpl: &PromptTemplate) -> Result<String> {
    if valid.is_empty() {
        return Err(Error::precondition("at least one correct action is required"));
    }
    if let Some(l) = valid.iter().find(|l| !candidates.iter().any(|o| o.label == **l)) {
        return Err(Error::precondition(format!("correct action {l} is not among the candidates")));
    }
    let examples = example_blocks("knowledge_gen_examples.txt", tmpl.exemplar_slots);
    let options = format_options(candidates);
    let correct = format_label_list(valid);
    tmpl.render(BTreeMap::from([
        ("examples", examples.as_str()),
        ("scene", s.scene.as_str()),
        ("task", s.instruction.as_str()),
        ("options", options.as_str()),
        ("correct", correct.as_str()),
    ]))
}

/// Retrieved exemplars in order, then the unanswered test scenario.
pub fn render_inference_prompt(s: &Scenario, exemplars: &[KnowledgeEntry], tmpl: &PromptTemplate) -> Result<String> {
    if exemplars.is_empty() {
        return Err(Error::precondition("at least one exemplar is required"));
    }
    let examples: String = exemplars
        .iter()
        .map(|e| {
            format!(
                "{}\n",
                render_exemplar_block(&e.scenario.scene, &e.scenario.instruction, &e.candidates, &e.rationale, &e.valid_labels)
            )
        })
        .collect();
    tmpl.render(BTreeMap::from([
        ("examples", examples.as_str()),
        ("scene", s.scene.as_str()),
        ("task", s.instruction.as_str()),
    ]))
}

pub fn render_next_token_prompt(s: &Scenario, options: &[PlanOption], rationale: &str, tmpl: &PromptTemplate) -> Result<String> {
    if options.is_empty() {
        return Err(Error::precondition("at least one option is required"));
    }
    if rationale.trim().is_empty() {
        return Err(Error::precondition("a rationale is required"));
    }
    let opts = format_options(options);
    tmpl.render(BTreeMap::from([
        ("scene", s.scene.as_str()),
        ("task", s.instruction.as_str()),
        ("options", opts.as_str()),
        ("rationale", rationale.trim()),
    ]))
}

/// Context shared by every subset query of one scenario.
#[derive(Debug, Clone, Copy)]
pub struct MultilabelContext<'a> {
    pub scenario: &'a Scenario,
    pub options: &'a [PlanOption],
    pub rationale: &'a str,
}

pub fn render_multilabel_query(subset: &LabelSet, ctx: &MultilabelContext<'_>, tmpl: &PromptTemplate) -> Result<String> {
    if subset.is_empty() {
        return Err(Error::precondition("subset must be non-empty"));
    }
    if let Some(l) = subset.iter().find(|l| !ctx.options.iter().any(|o| o.label == **l)) {
        return Err(Error::precondition(format!("label {l} is not among the candidates")));
    }
    if ctx.rationale.trim().is_empty() {
        return Err(Error::precondition("a rationale is required"));
    }
    let opts = format_options(ctx.options);
    let set = format_label_set(subset);
    tmpl.render(BTreeMap::from([
        ("scene", ctx.scenario.scene.as_str()),
        ("task", ctx.scenario.instruction.as_str()),
        ("options", opts.as_str()),
        ("rationale", ctx.rationale.trim()),
        ("subset", set.as_str()),
    ]))
}

/// Recognizes which template produced `prompt` from how it ends.
pub fn classify_prompt(prompt: &str) -> Option<PromptKind> {
    let tail = prompt.trim_end();
    if tail.ends_with(NEXT_TOKEN_QUESTION) {
        Some(PromptKind::NextToken)
    } else if tail.ends_with(MULTILABEL_QUESTION_SUFFIX) {
        Some(PromptKind::MultilabelQuery)
    } else if tail.ends_with("You:") {
        Some(PromptKind::KnowledgeGen)
    } else if tail.ends_with("Options:") {
        if prompt.contains("\nPrediction:") {
            Some(PromptKind::Inference)
        } else {
            Some(PromptKind::OptionGen)
        }
    } else {
        None
    }
}

/// The last `Scene:`/`Task:` block of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBlock {
    pub scene: String,
    pub task: String,
    /// Everything after the task line.
    pub body: String,
}

pub fn final_block(prompt: &str) -> Option<PromptBlock> {
    let start = prompt.rfind("Scene: ")?;
    let block = &prompt[start..];
    let mut lines = block.lines();
    let scene = lines.next()?.strip_prefix("Scene: ")?.trim().to_string();
    let task = lines.next()?.strip_prefix("Task: ")?.trim().to_string();
    let body = lines.collect::<Vec<_>>().join("\n");
    Some(PromptBlock { scene, task, body })
}

const ANSWER_MARKERS: &[&str] = &["Prediction:", "Correct Action(s):", "Correct Actions(s):", "Correct Actions:"];

fn strip_answer_marker(line: &str) -> Option<&str> {
    let line = line.trim_start();
    ANSWER_MARKERS.iter().find_map(|m| line.strip_prefix(m))
}

/// Parses `A, C` / `A C` / `A and C` into labels.
pub fn parse_label_list(text: &str) -> Option<LabelSet> {
    let mut out = LabelSet::new();
    for tok in text.split(|c: char| c == ',' || c.is_whitespace()) {
        let tok = tok.trim().trim_end_matches('.');
        if tok.is_empty() || tok.eq_ignore_ascii_case("and") {
            continue;
        }
        out.insert(tok.parse::<OptionLabel>().ok()?);
    }
    (!out.is_empty()).then_some(out)
}

/// Labels on the first answer line (`Prediction:` or `Correct Action(s):`).
pub fn parse_answer_labels(text: &str) -> Option<LabelSet> {
    text.lines().find_map(strip_answer_marker).and_then(parse_label_list)
}

/// The subset named by a multi-label query prompt.
pub fn parse_multilabel_subset(prompt: &str) -> Option<LabelSet> {
    let start = prompt.rfind(MULTILABEL_QUESTION_PREFIX)? + MULTILABEL_QUESTION_PREFIX.len();
    let rest = &prompt[start..];
    let inner = rest.strip_prefix('{')?;
    let end = inner.find('}')?;
    parse_label_list(&inner[..end])
}

/// Splits a line like `B) pick up the Coke` into label and text.
pub fn parse_option_line(line: &str) -> Option<(OptionLabel, String)> {
    let line = line.trim();
    let mut chars = line.chars();
    let letter = chars.next()?;
    let sep = chars.next()?;
    if !letter.is_ascii_uppercase() || !(sep == ')' || sep == '.' || sep == ':') {
        return None;
    }
    let text = chars.as_str().trim();
    if text.is_empty() {
        return None;
    }
    Some((OptionLabel::new(letter).ok()?, text.to_string()))
}

/// Options, rationale and direct prediction parsed from an inference completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub options: Vec<PlanOption>,
    pub rationale: String,
    pub direct_labels: LabelSet,
}

/// Parses `A) …` option lines, the `Explain:` paragraph and the answer line.
///
/// Option letters are renumbered A, B, … in parse order and the answer is
/// mapped through the same renumbering.
pub fn parse_inference_output(text: &str) -> Result<InferenceOutput> {
    let err = |reason: &str| Error::Parse {
        reason: reason.to_string(),
        raw: text.to_string(),
    };
    let mut parsed: Vec<(OptionLabel, String)> = Vec::new();
    let mut explain: Option<Vec<String>> = None;
    let mut answer: Option<LabelSet> = None;
    for line in text.lines() {
        if let Some(rest) = strip_answer_marker(line) {
            answer = Some(parse_label_list(rest).ok_or_else(|| err("answer line names no option letters"))?);
            break;
        }
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("Explain:") {
            explain = Some(vec![rest.trim().to_string()]);
            continue;
        }
        match explain.as_mut() {
            Some(paragraph) => {
                if !trimmed.is_empty() {
                    paragraph.push(trimmed.to_string());
                }
            }
            None => {
                if let Some(opt) = parse_option_line(trimmed) {
                    parsed.push(opt);
                }
            }
        }
    }
    let answer = answer.ok_or_else(|| err("missing Prediction line"))?;
    if parsed.is_empty() {
        return Err(err("no lettered options"));
    }
    let rationale = explain.map(|p| p.join(" ").trim().to_string()).unwrap_or_default();
    if rationale.is_empty() {
        return Err(err("missing Explain paragraph"));
    }
    let mut renumber = BTreeMap::new();
    let mut options = Vec::with_capacity(parsed.len());
    for (i, (orig, text)) in parsed.into_iter().enumerate() {
        let label = OptionLabel::from_index(i)?;
        if renumber.insert(orig, label).is_some() {
            return Err(err("duplicate option letter"));
        }
        options.push(PlanOption::new(label, text));
    }
    let direct_labels = answer
        .iter()
        .map(|l| renumber.get(l).copied().ok_or_else(|| err("prediction names a letter that is not an option")))
        .collect::<Result<LabelSet>>()?;
    Ok(InferenceOutput {
        options,
        rationale,
        direct_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{assign_labels, ScenarioKind};

    fn l(c: char) -> OptionLabel {
        OptionLabel::new(c).unwrap()
    }

    fn apple_scenario() -> Scenario {
        Scenario {
            id: "apple".into(),
            scene: "On the counter, there is a Coke, an apple, and a Sprite.".into(),
            instruction: "Put apple next to the can.".into(),
            observation: String::new(),
            kind: ScenarioKind::MultiLabel,
            options: vec![],
        }
    }

    #[test]
    fn placeholders_must_be_bound() {
        let vals = BTreeMap::from([("a", "1")]);
        assert_eq!(render_placeholders("x{{a}}y {B} {{", &vals).unwrap(), "x1y {B} {{");
        assert!(render_placeholders("{{b}}", &vals).is_err());
    }

    #[test]
    fn next_token_prompt_ends_with_question() {
        let s = apple_scenario();
        let opts = assign_labels(&["a", "b", "c", "d", "e"]).unwrap();
        let p = render_next_token_prompt(&s, &opts, "Because.", &PromptConfig::default().template(PromptKind::NextToken)).unwrap();
        assert!(p.ends_with("Answer with a single letter."));
        for c in ['A', 'B', 'C', 'D', 'E'] {
            assert!(p.contains(&format!("\n{c}) ")));
        }
        assert!(render_next_token_prompt(&s, &opts, "", &PromptConfig::default().template(PromptKind::NextToken)).is_err());
        assert_eq!(classify_prompt(&p), Some(PromptKind::NextToken));
    }

    #[test]
    fn safety_sentence_appears_once_in_safety_mode() {
        let on = PromptConfig {
            safety_mode: true,
            ..Default::default()
        };
        for kind in [PromptKind::OptionGen, PromptKind::Inference, PromptKind::NextToken] {
            assert!(on.template(kind).system_preamble.contains(SAFETY_SENTENCE));
            assert!(!PromptConfig::default().template(kind).system_preamble.contains(SAFETY_SENTENCE));
        }
        let p = render_option_gen_prompt(&apple_scenario(), &on.template(PromptKind::OptionGen)).unwrap();
        assert_eq!(p.matches(SAFETY_SENTENCE).count(), 1);
    }

    #[test]
    fn multilabel_query_names_sorted_subset() {
        let s = apple_scenario();
        let opts = assign_labels(&["a", "b", "c"]).unwrap();
        let ctx = MultilabelContext {
            scenario: &s,
            options: &opts,
            rationale: "r",
        };
        let tmpl = PromptConfig::default().template(PromptKind::MultilabelQuery);
        let p = render_multilabel_query(&[l('C'), l('A')].into(), &ctx, &tmpl).unwrap();
        assert!(p.contains("Is the set {A, C} including all valid options according to the user's request?"));
        assert!(p.ends_with("Reply 'Y' if it exactly matches all valid options, and 'N' if it includes any invalid options or is a proper subset of the valid options."));
        assert_eq!(parse_multilabel_subset(&p), Some([l('A'), l('C')].into()));
        let single = render_multilabel_query(&[l('B')].into(), &ctx, &tmpl).unwrap();
        assert!(single.contains("Is the set {B} including"));
        assert!(render_multilabel_query(&LabelSet::new(), &ctx, &tmpl).is_err());
        assert!(render_multilabel_query(&[l('D')].into(), &ctx, &tmpl).is_err());
        assert_eq!(classify_prompt(&p), Some(PromptKind::MultilabelQuery));
    }

    #[test]
    fn parse_prediction_lists() {
        let out = parse_inference_output("A) x\nB) y\nC) z\nExplain: because\nPrediction: A, C\n").unwrap();
        assert_eq!(out.direct_labels, [l('A'), l('C')].into());
        assert_eq!(out.rationale, "because");
        let out = parse_inference_output("A) x\nB) y\nC) z\nD) w\nE) an option not listed here\nExplain: unsafe\nPrediction: E   \n").unwrap();
        assert_eq!(out.direct_labels, [l('E')].into());
        assert!(out.options[4].is_escape);
    }

    #[test]
    fn missing_prediction_is_a_parse_error() {
        let raw = "A) x\nExplain: hmm";
        match parse_inference_output(raw) {
            Err(Error::Parse { raw: r, .. }) => assert_eq!(r, raw),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prediction_outside_options_is_rejected() {
        assert!(parse_inference_output("A) x\nB) y\nExplain: e\nPrediction: D").is_err());
    }

    #[test]
    fn out_of_order_letters_are_renumbered() {
        let out = parse_inference_output("B) x\nD) y\nExplain: e\nPrediction: D").unwrap();
        assert_eq!(out.options[1].text, "y");
        assert_eq!(out.direct_labels, [l('B')].into());
    }

    #[test]
    fn correct_actions_marker_is_accepted() {
        assert_eq!(parse_answer_labels("Correct Action(s): B, C"), Some([l('B'), l('C')].into()));
        assert_eq!(parse_answer_labels("Correct Actions(s): B"), Some([l('B')].into()));
        assert_eq!(parse_label_list("A and C."), Some([l('A'), l('C')].into()));
        assert_eq!(parse_label_list("maybe"), None);
    }

    #[test]
    fn final_block_reads_last_scenario() {
        let p = "Scene: one\nTask: first\nOptions:\nA) x\n\nScene: two\nTask: second\nOptions:";
        let b = final_block(p).unwrap();
        assert_eq!((b.scene.as_str(), b.task.as_str(), b.body.as_str()), ("two", "second", "Options:"));
    }

    #[test]
    fn version_is_stable() {
        assert_eq!(template_version(), template_version());
        assert!(template_version().starts_with("tmpl-"));
    }
}
