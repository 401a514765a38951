//! Core data types: scenarios, lettered plan options, prediction outcomes.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text of the option a planner selects when none of the listed plans apply.
pub const ESCAPE_TEXT: &str = "an option not listed here";

/// Largest number of options a single scenario may carry (one alphabet pass).
pub const MAX_OPTIONS: usize = 26;

/// A single uppercase letter naming one candidate plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OptionLabel(char);

impl OptionLabel {
    pub fn new(letter: char) -> Result<Self> {
        if letter.is_ascii_uppercase() {
            Ok(Self(letter))
        } else {
            Err(Error::InvalidLabel(letter.to_string()))
        }
    }

    /// Compile-time constructor; panics on a non-uppercase letter.
    pub const fn const_new(letter: char) -> Self {
        assert!(letter.is_ascii_uppercase(), "option labels are uppercase letters");
        Self(letter)
    }

    /// Label at zero-based position `index` (0 → 'A').
    pub fn from_index(index: usize) -> Result<Self> {
        if index >= MAX_OPTIONS {
            return Err(Error::Capacity {
                requested: index + 1,
                max: MAX_OPTIONS,
            });
        }
        Ok(Self((b'A' + index as u8) as char))
    }

    pub fn letter(self) -> char {
        self.0
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for OptionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => OptionLabel::new(c),
            _ => Err(Error::InvalidLabel(s.to_string())),
        }
    }
}

impl Serialize for OptionLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OptionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type LabelSet = BTreeSet<OptionLabel>;

/// Renders a label set as `{A, C}`.
pub fn format_label_set(set: &LabelSet) -> String {
    let inner: Vec<String> = set.iter().map(|l| l.to_string()).collect();
    format!("{{{}}}", inner.join(", "))
}

/// One candidate plan together with its ground-truth flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOption {
    pub label: OptionLabel,
    pub text: String,
    #[serde(default)]
    pub is_valid: bool,
    #[serde(default)]
    pub is_unsafe: bool,
    #[serde(default)]
    pub is_intent: bool,
    #[serde(default)]
    pub is_escape: bool,
}

impl PlanOption {
    pub fn new(label: OptionLabel, text: impl Into<String>) -> Self {
        let text = text.into();
        let is_escape = is_escape_text(&text);
        Self {
            label,
            text,
            is_valid: false,
            is_unsafe: false,
            is_intent: false,
            is_escape,
        }
    }
}

/// Loose text comparison used to match generated plans against ground truth.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_lowercase()
}

pub fn is_escape_text(text: &str) -> bool {
    normalize_text(text) == ESCAPE_TEXT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Unambiguous,
    SingleLabel,
    MultiLabel,
    SpatiallyAmbiguous,
    Unsafe,
    Winograd,
    Creative,
    UnsafeAmbiguous,
    SeriousUnsafe,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 9] = [
        ScenarioKind::Unambiguous,
        ScenarioKind::SingleLabel,
        ScenarioKind::MultiLabel,
        ScenarioKind::SpatiallyAmbiguous,
        ScenarioKind::Unsafe,
        ScenarioKind::Winograd,
        ScenarioKind::Creative,
        ScenarioKind::UnsafeAmbiguous,
        ScenarioKind::SeriousUnsafe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Unambiguous => "unambiguous",
            ScenarioKind::SingleLabel => "single_label",
            ScenarioKind::MultiLabel => "multi_label",
            ScenarioKind::SpatiallyAmbiguous => "spatially_ambiguous",
            ScenarioKind::Unsafe => "unsafe",
            ScenarioKind::Winograd => "winograd",
            ScenarioKind::Creative => "creative",
            ScenarioKind::UnsafeAmbiguous => "unsafe_ambiguous",
            ScenarioKind::SeriousUnsafe => "serious_unsafe",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind `{s}`")))
    }
}

/// One planning task: an instruction issued against an observed scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub scene: String,
    pub instruction: String,
    #[serde(default)]
    pub observation: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub options: Vec<PlanOption>,
}

impl Scenario {
    /// True when at least one option carries ground-truth validity.
    pub fn has_ground_truth(&self) -> bool {
        self.options.iter().any(|o| o.is_valid)
    }

    pub fn labels(&self) -> Vec<OptionLabel> {
        self.options.iter().map(|o| o.label).collect()
    }

    pub fn valid_labels(&self) -> LabelSet {
        self.options.iter().filter(|o| o.is_valid).map(|o| o.label).collect()
    }

    pub fn unsafe_labels(&self) -> LabelSet {
        self.options.iter().filter(|o| o.is_unsafe).map(|o| o.label).collect()
    }

    pub fn intent(&self) -> Option<OptionLabel> {
        self.options.iter().find(|o| o.is_intent).map(|o| o.label)
    }

    pub fn option(&self, label: OptionLabel) -> Option<&PlanOption> {
        self.options.iter().find(|o| o.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    Direct,
    ConformalSingle,
    ConformalMulti,
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(PredictionMode::Direct),
            "conformal_single" | "conformal-single" => Ok(PredictionMode::ConformalSingle),
            "conformal_multi" | "conformal-multi" => Ok(PredictionMode::ConformalMulti),
            _ => Err(Error::Config(format!("unknown prediction mode `{s}`"))),
        }
    }
}

/// A single prediction set, or a family of label sets in the multi-label mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSet {
    Single(LabelSet),
    Family(Vec<LabelSet>),
}

impl PredictionSet {
    /// Union of every label mentioned by the prediction.
    pub fn flatten(&self) -> LabelSet {
        match self {
            PredictionSet::Single(set) => set.clone(),
            PredictionSet::Family(family) => family.iter().flatten().copied().collect(),
        }
    }

    /// Certain when exactly one action remains: a singleton set, or a family
    /// holding exactly one singleton set.
    pub fn is_certain(&self) -> bool {
        match self {
            PredictionSet::Single(set) => set.len() == 1,
            PredictionSet::Family(family) => family.len() == 1 && family[0].len() == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub scenario_id: String,
    pub mode: PredictionMode,
    pub prediction: PredictionSet,
    pub certain: bool,
    pub asked_for_help: bool,
    /// Candidate plans the prediction labels refer to.
    #[serde(default)]
    pub candidates: Vec<PlanOption>,
}

impl PredictionOutcome {
    pub fn new(
        scenario_id: impl Into<String>,
        mode: PredictionMode,
        prediction: PredictionSet,
        candidates: Vec<PlanOption>,
    ) -> Self {
        let certain = prediction.is_certain();
        Self {
            scenario_id: scenario_id.into(),
            mode,
            prediction,
            certain,
            // An empty set also needs a human decision.
            asked_for_help: !certain,
            candidates,
        }
    }

    pub fn label_union(&self) -> LabelSet {
        self.prediction.flatten()
    }
}

/// Copies ground-truth flags from `truth` onto generated candidates whose
/// text matches a ground-truth option (see [`normalize_text`]). Unmatched
/// candidates are marked invalid, safe and not the intent.
pub fn annotate_candidates(candidates: &[PlanOption], truth: &Scenario) -> Vec<PlanOption> {
    candidates
        .iter()
        .map(|c| {
            let key = normalize_text(&c.text);
            let hit = truth.options.iter().find(|t| normalize_text(&t.text) == key);
            PlanOption {
                is_valid: hit.is_some_and(|t| t.is_valid),
                is_unsafe: hit.is_some_and(|t| t.is_unsafe),
                is_intent: hit.is_some_and(|t| t.is_intent),
                is_escape: is_escape_text(&c.text),
                ..c.clone()
            }
        })
        .collect()
}

/// Assigns letters A, B, C, … to plan texts in input order.
pub fn assign_labels<S: AsRef<str>>(texts: &[S]) -> Result<Vec<PlanOption>> {
    if texts.len() > MAX_OPTIONS {
        return Err(Error::Capacity {
            requested: texts.len(),
            max: MAX_OPTIONS,
        });
    }
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Ok(PlanOption::new(OptionLabel::from_index(i)?, t.as_ref())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    TooManyOptions(usize),
    LabelOutOfOrder { position: usize, label: OptionLabel },
    IntentNotValid(OptionLabel),
    DuplicateIntent(Vec<OptionLabel>),
    EscapeTextMismatch(OptionLabel),
    UnambiguousValidCount(usize),
    SeriousUnsafeNotEscape,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "scenario id is empty"),
            Violation::TooManyOptions(n) => write!(f, "{n} options exceed the limit of {MAX_OPTIONS}"),
            Violation::LabelOutOfOrder { position, label } => {
                write!(f, "option at position {position} is labeled {label}, expected sequential letters from A")
            }
            Violation::IntentNotValid(l) => write!(f, "intent option {l} is not marked valid"),
            Violation::DuplicateIntent(ls) => {
                let ls: Vec<String> = ls.iter().map(|l| l.to_string()).collect();
                write!(f, "more than one intent option: {}", ls.join(", "))
            }
            Violation::EscapeTextMismatch(l) => {
                write!(f, "escape option {l} does not read \"{ESCAPE_TEXT}\"")
            }
            Violation::UnambiguousValidCount(n) => {
                write!(f, "unambiguous scenario has {n} valid options, expected exactly 1")
            }
            Violation::SeriousUnsafeNotEscape => {
                write!(f, "serious_unsafe scenario must have the escape option as its only valid option")
            }
        }
    }
}

/// Checks every scenario invariant; an empty result means well-formed.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.id.trim().is_empty() {
        out.push(Violation::EmptyId);
    }
    if s.options.len() > MAX_OPTIONS {
        out.push(Violation::TooManyOptions(s.options.len()));
    }
    for (i, opt) in s.options.iter().enumerate() {
        if opt.label.index() != i {
            out.push(Violation::LabelOutOfOrder {
                position: i,
                label: opt.label,
            });
        }
        if opt.is_intent && !opt.is_valid {
            out.push(Violation::IntentNotValid(opt.label));
        }
        if opt.is_escape && normalize_text(&opt.text) != ESCAPE_TEXT {
            out.push(Violation::EscapeTextMismatch(opt.label));
        }
    }
    let intents: Vec<OptionLabel> = s.options.iter().filter(|o| o.is_intent).map(|o| o.label).collect();
    if intents.len() > 1 {
        out.push(Violation::DuplicateIntent(intents));
    }
    if s.has_ground_truth() {
        let valid: Vec<&PlanOption> = s.options.iter().filter(|o| o.is_valid).collect();
        if s.kind == ScenarioKind::Unambiguous && valid.len() != 1 {
            out.push(Violation::UnambiguousValidCount(valid.len()));
        }
        if s.kind == ScenarioKind::SeriousUnsafe && !(valid.len() == 1 && valid[0].is_escape) {
            out.push(Violation::SeriousUnsafeNotEscape);
        }
    } else if s.kind == ScenarioKind::SeriousUnsafe && !s.options.is_empty() {
        out.push(Violation::SeriousUnsafeNotEscape);
    }
    out
}

/// Reads a line-delimited scenario file, validating every record.
pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>> {
    let (scenarios, skipped) = load_dataset_lenient(path)?;
    if let Some((line, reason)) = skipped.into_iter().next() {
        return Err(Error::Dataset { line, reason });
    }
    Ok(scenarios)
}

/// A malformed input line: `(line number, reason)`.
pub type SkippedLine = (usize, String);

/// Like [`load_dataset`] but malformed lines are returned as `(line, reason)`
/// instead of failing the whole load.
pub fn load_dataset_lenient(path: &Path) -> Result<(Vec<Scenario>, Vec<SkippedLine>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scenarios = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        match serde_json::from_str::<Scenario>(&line) {
            Ok(s) => {
                let violations = validate_scenario(&s);
                if violations.is_empty() {
                    scenarios.push(s);
                } else {
                    let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                    skipped.push((lineno, format!("scenario `{}`: {}", s.id, msgs.join("; "))));
                }
            }
            Err(e) => skipped.push((lineno, e.to_string())),
        }
    }
    Ok((scenarios, skipped))
}

pub fn save_dataset(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in scenarios {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
