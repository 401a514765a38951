//! Knowledge base construction, persistence and retrieval.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backends::{CompletionRequest, Embedder, EmbeddingVector, TextGenerator};
use crate::domain::{annotate_candidates, is_escape_text, normalize_text, LabelSet, OptionLabel, PlanOption, Scenario, ESCAPE_TEXT, MAX_OPTIONS};
use crate::error::{Error, Result};
use crate::prompting::{parse_option_line, render_knowledge_prompt, render_option_gen_prompt, PromptConfig, PromptKind};

pub const KB_SCHEMA: &str = "introplan-kb";
pub const KB_VERSION: u32 = 1;

/// Token budget for option lists and rationales.
const GENERATION_MAX_TOKENS: u32 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    /// Embedding of the instruction.
    pub key: EmbeddingVector,
    pub scenario: Scenario,
    pub candidates: Vec<PlanOption>,
    pub rationale: String,
    pub valid_labels: LabelSet,
    /// Set when some valid ground-truth action is missing from the candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_warning: Option<String>,
}

impl KnowledgeEntry {
    fn check(&self) -> std::result::Result<(), String> {
        if self.rationale.trim().is_empty() {
            return Err("rationale is empty".into());
        }
        let labels: LabelSet = self.candidates.iter().map(|o| o.label).collect();
        if let Some(l) = self.valid_labels.iter().find(|l| !labels.contains(l)) {
            return Err(format!("valid label {l} is not a candidate"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub embedder: String,
    pub template_version: String,
    pub built_at_unix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub entries: Vec<KnowledgeEntry>,
    pub embedding_dim: usize,
    pub provenance: Provenance,
}

impl KnowledgeBase {
    /// Checks every entry invariant, the shared dimension and unique ids.
    pub fn new(entries: Vec<KnowledgeEntry>, embedding_dim: usize, provenance: Provenance) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::Schema("embedding dimension must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &entries {
            if e.key.dim() != embedding_dim {
                return Err(Error::DimensionMismatch {
                    entry: e.scenario.id.clone(),
                    expected: embedding_dim,
                    found: e.key.dim(),
                });
            }
            e.check().map_err(|r| Error::Schema(format!("entry `{}`: {r}", e.scenario.id)))?;
            if !ids.insert(e.scenario.id.as_str()) {
                return Err(Error::Schema(format!("duplicate entry id `{}`", e.scenario.id)));
            }
        }
        Ok(Self {
            entries,
            embedding_dim,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The first `n` entries, for knowledge-base size sweeps.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            entries: self.entries.iter().take(n).cloned().collect(),
            embedding_dim: self.embedding_dim,
            provenance: self.provenance.clone(),
        }
    }
}

/// Lettered options from a completion, stopping at the next scenario block.
fn parse_option_list(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with("Scene:") || t.starts_with("Task:") || (t.is_empty() && !out.is_empty()) {
            break;
        }
        if let Some((_, text)) = parse_option_line(t) {
            out.push(text);
        }
    }
    out
}

/// Relabels parsed options A, B, … and keeps exactly one escape option,
/// appending it when missing.
pub fn normalize_choices(texts: &[String]) -> Result<Vec<PlanOption>> {
    let mut kept: Vec<&str> = Vec::with_capacity(texts.len() + 1);
    let mut has_escape = false;
    for t in texts {
        if is_escape_text(t) {
            if has_escape {
                continue;
            }
            has_escape = true;
        }
        kept.push(t);
    }
    if !has_escape {
        kept.push(ESCAPE_TEXT);
    }
    if kept.len() > MAX_OPTIONS {
        return Err(Error::Capacity {
            requested: kept.len(),
            max: MAX_OPTIONS,
        });
    }
    kept.iter()
        .enumerate()
        .map(|(i, t)| Ok(PlanOption::new(OptionLabel::from_index(i)?, *t)))
        .collect()
}

/// Asks the model for candidate plans; one reprompt on unparseable output.
pub fn generate_choices(s: &Scenario, generator: &dyn TextGenerator, prompts: &PromptConfig) -> Result<Vec<PlanOption>> {
    let prompt = render_option_gen_prompt(s, &prompts.template(PromptKind::OptionGen))?;
    let req = CompletionRequest::new(prompt, GENERATION_MAX_TOKENS);
    let mut last = String::new();
    for attempt in 0..2 {
        let out = generator.complete(&req)?;
        let texts = parse_option_list(&out.text);
        if !texts.is_empty() {
            return normalize_choices(&texts);
        }
        if attempt == 0 {
            warn!("scenario `{}`: no lettered options in model output, reprompting", s.id);
        }
        last = out.text;
    }
    Err(Error::GenerationFormat(last))
}

/// Asks the model to explain why `valid` are the correct candidates.
pub fn generate_rationale(
    s: &Scenario,
    candidates: &[PlanOption],
    valid: &LabelSet,
    generator: &dyn TextGenerator,
    prompts: &PromptConfig,
) -> Result<String> {
    let prompt = render_knowledge_prompt(s, candidates, valid, &prompts.template(PromptKind::KnowledgeGen))?;
    let req = CompletionRequest::new(prompt, GENERATION_MAX_TOKENS);
    for _ in 0..2 {
        let out = generator.complete(&req)?;
        // drop anything the model continued with after the answer
        let body = out.text.split("\nScene:").next().unwrap_or_default();
        let rationale = body.split_whitespace().collect::<Vec<_>>().join(" ");
        if !rationale.is_empty() {
            return Ok(rationale);
        }
    }
    Err(Error::GenerationFormat(format!("empty rationale for scenario `{}`", s.id)))
}

/// Outcome of a knowledge-base build.
#[derive(Debug)]
pub struct BuildReport {
    pub kb: KnowledgeBase,
    /// `(scenario id, reason)` for skipped instances.
    pub failures: Vec<(String, String)>,
    /// Ids of entries whose candidates miss a valid ground-truth action.
    pub coverage_warnings: Vec<String>,
}

fn build_entry(
    s: &Scenario,
    generator: &dyn TextGenerator,
    embedder: &dyn Embedder,
    prompts: &PromptConfig,
) -> Result<KnowledgeEntry> {
    if !s.has_ground_truth() {
        return Err(Error::precondition("training scenario has no valid options"));
    }
    let candidates = annotate_candidates(&generate_choices(s, generator, prompts)?, s);
    let valid: LabelSet = candidates.iter().filter(|o| o.is_valid).map(|o| o.label).collect();
    let missing: Vec<&str> = s
        .options
        .iter()
        .filter(|t| t.is_valid && !candidates.iter().any(|c| normalize_text(&c.text) == normalize_text(&t.text)))
        .map(|t| t.text.as_str())
        .collect();
    let coverage_warning = (!missing.is_empty()).then(|| format!("candidates miss valid action(s): {}", missing.join("; ")));
    if valid.is_empty() {
        return Err(Error::GenerationFormat("no generated candidate matches a valid action".into()));
    }
    let rationale = generate_rationale(s, &candidates, &valid, generator, prompts)?;
    let key = embedder.embed(&s.instruction)?;
    Ok(KnowledgeEntry {
        key,
        scenario: s.clone(),
        candidates,
        rationale,
        valid_labels: valid,
        coverage_warning,
    })
}

/// Builds one entry per training scenario, in input order.
///
/// Failed instances are logged and skipped; the build fails only when every
/// instance failed.
pub fn build_knowledge_base(
    train: &[Scenario],
    generator: &dyn TextGenerator,
    embedder: &dyn Embedder,
    prompts: &PromptConfig,
    max_in_flight: usize,
) -> Result<BuildReport> {
    let results = crate::exec::map_ordered(train, max_in_flight, |_, s| build_entry(s, generator, embedder, prompts));
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut coverage_warnings = Vec::new();
    for (s, r) in train.iter().zip(results) {
        match r {
            Ok(e) => {
                if let Some(w) = &e.coverage_warning {
                    warn!("scenario `{}`: {w}", s.id);
                    coverage_warnings.push(s.id.clone());
                }
                entries.push(e);
            }
            Err(e) => {
                warn!("skipping scenario `{}`: {e}", s.id);
                failures.push((s.id.clone(), e.to_string()));
            }
        }
    }
    if entries.is_empty() && !failures.is_empty() {
        return Err(Error::EmptyBuild { failed: failures.len() });
    }
    info!("knowledge base: {} entries, {} skipped", entries.len(), failures.len());
    let provenance = Provenance {
        generator: generator.id(),
        embedder: embedder.id(),
        template_version: crate::prompting::template_version().to_string(),
        built_at_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let kb = KnowledgeBase::new(entries, embedder.dim(), provenance)?;
    Ok(BuildReport {
        kb,
        failures,
        coverage_warnings,
    })
}

/// `dot(u, v) / (‖u‖·‖v‖)`; zero vectors are rejected.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::precondition(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::precondition("cosine similarity of a zero vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
pub struct Retrieved<'a> {
    pub entry: &'a KnowledgeEntry,
    /// Position in the knowledge base.
    pub index: usize,
    pub similarity: f64,
}

/// Top-`m` entries by cosine similarity to `embedding`; ties keep insertion order.
pub fn rank_similar<'a>(embedding: &EmbeddingVector, kb: &'a KnowledgeBase, m: usize) -> Result<Vec<Retrieved<'a>>> {
    if kb.is_empty() {
        return Err(Error::precondition("knowledge base is empty"));
    }
    if m == 0 {
        return Err(Error::precondition("retrieval count must be at least 1"));
    }
    let mut scored = kb
        .entries
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            Ok(Retrieved {
                entry,
                index,
                similarity: cosine_similarity(&embedding.values, &entry.key.values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps earlier entries first among equal similarities
    scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    scored.truncate(m);
    Ok(scored)
}

/// Embeds `query` and returns the top-`m` entries.
pub fn retrieve_similar<'a>(query: &str, kb: &'a KnowledgeBase, m: usize, embedder: &dyn Embedder) -> Result<Vec<Retrieved<'a>>> {
    if kb.is_empty() {
        return Err(Error::precondition("knowledge base is empty"));
    }
    let q = embedder.embed(query)?;
    rank_similar(&q, kb, m)
}

#[derive(Debug, Serialize, Deserialize)]
struct KbHeader {
    schema: String,
    version: u32,
    embedding_dim: usize,
    entries: usize,
    provenance: Provenance,
}

/// Header line followed by one entry per line.
pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let header = KbHeader {
        schema: KB_SCHEMA.into(),
        version: KB_VERSION,
        embedding_dim: kb.embedding_dim,
        entries: kb.len(),
        provenance: kb.provenance.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for e in &kb.entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();
    let header_line = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::Schema("file is empty".into())),
    };
    let header: KbHeader = serde_json::from_str(&header_line).map_err(|e| Error::Schema(format!("bad header: {e}")))?;
    if header.schema != KB_SCHEMA || header.version != KB_VERSION {
        return Err(Error::Schema(format!(
            "expected {KB_SCHEMA} v{KB_VERSION}, found {} v{}",
            header.schema, header.version
        )));
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: KnowledgeEntry = serde_json::from_str(&line).map_err(|e| Error::CorruptLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if entry.key.dim() != header.embedding_dim {
            return Err(Error::DimensionMismatch {
                entry: entry.scenario.id,
                expected: header.embedding_dim,
                found: entry.key.dim(),
            });
        }
        entry.check().map_err(|reason| Error::CorruptLine { line: i + 1, reason })?;
        entries.push(entry);
    }
    if entries.len() != header.entries {
        return Err(Error::Schema(format!(
            "header declares {} entries, file holds {}",
            header.entries,
            entries.len()
        )));
    }
    KnowledgeBase::new(entries, header.embedding_dim, header.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::scripted::ScriptedGenerator;
    use crate::backends::synthetic::HashEmbedder;
    use crate::backends::Completion;
    use crate::domain::{assign_labels, ScenarioKind};

    fn scenario() -> Scenario {
        let mut options = assign_labels(&["pick up the Coke", "pick up the Sprite", ESCAPE_TEXT]).unwrap();
        options[0].is_valid = true;
        options[0].is_intent = true;
        Scenario {
            id: "k1".into(),
            scene: "On the counter, there is a Coke and a Sprite.".into(),
            instruction: "Bring me the Coke.".into(),
            observation: String::new(),
            kind: ScenarioKind::Unambiguous,
            options,
        }
    }

    fn gen(text: &str) -> ScriptedGenerator {
        ScriptedGenerator::new().on_kind(PromptKind::OptionGen, Completion::text(text))
    }

    #[test]
    fn escape_is_appended_once() {
        let p = PromptConfig::default();
        let opts = generate_choices(&scenario(), &gen("A) pick up the Coke\nB) pick up the Sprite"), &p).unwrap();
        assert_eq!(opts.len(), 3);
        assert!(opts[2].is_escape);
        assert_eq!(opts[2].label, OptionLabel::new('C').unwrap());

        let opts = generate_choices(
            &scenario(),
            &gen("A) pick up the Coke\nB) an option not listed here\nC) pick up the Sprite\nD) pick up the apple"),
            &p,
        )
        .unwrap();
        assert_eq!(opts.len(), 4);
        assert_eq!(opts.iter().filter(|o| o.is_escape).count(), 1);
    }

    #[test]
    fn prose_is_a_format_error() {
        let r = generate_choices(&scenario(), &gen("I would pick up the Coke."), &PromptConfig::default());
        assert!(matches!(r, Err(Error::GenerationFormat(_))));
    }

    #[test]
    fn continuation_after_options_is_ignored() {
        let texts = parse_option_list("A) x\nB) y\n\nScene: more\nTask: t\nOptions:\nA) z");
        assert_eq!(texts, vec!["x", "y"]);
    }

    #[test]
    fn rationale_requires_valid_subset() {
        let s = scenario();
        let g = ScriptedGenerator::new().fallback(Completion::text("because"));
        let p = PromptConfig::default();
        let bad: LabelSet = [OptionLabel::new('F').unwrap()].into();
        assert!(generate_rationale(&s, &s.options, &bad, &g, &p).is_err());
        let empty = ScriptedGenerator::new().fallback(Completion::text("  \n"));
        assert!(matches!(
            generate_rationale(&s, &s.options, &s.valid_labels(), &empty, &p),
            Err(Error::GenerationFormat(_))
        ));
    }

    #[test]
    fn cosine_bounds() {
        assert!((cosine_similarity(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn empty_training_set_gives_empty_kb() {
        let g = ScriptedGenerator::new();
        let e = HashEmbedder::new(0, 8);
        let r = build_knowledge_base(&[], &g, &e, &PromptConfig::default(), 1).unwrap();
        assert!(r.kb.is_empty());
    }

    #[test]
    fn all_failures_is_an_empty_build() {
        let g = gen("nothing useful");
        let e = HashEmbedder::new(0, 8);
        let r = build_knowledge_base(&[scenario()], &g, &e, &PromptConfig::default(), 1);
        assert!(matches!(r, Err(Error::EmptyBuild { failed: 1 })));
    }

    #[test]
    fn coverage_warning_is_recorded() {
        let mut s = scenario();
        s.options[1].is_valid = true;
        let g = gen("A) pick up the Coke\nB) pick up the apple")
            .on_kind(PromptKind::KnowledgeGen, Completion::text("The Coke was asked for."));
        let e = HashEmbedder::new(0, 8);
        let r = build_knowledge_base(&[s], &g, &e, &PromptConfig::default(), 1).unwrap();
        assert_eq!(r.coverage_warnings, vec!["k1".to_string()]);
        assert!(r.kb.entries[0].coverage_warning.as_deref().unwrap().contains("Sprite"));
    }
}
