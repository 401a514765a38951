//! Rule-based stub generator for fixtures and tests.

use super::{BackendError, Completion, CompletionRequest, TextGenerator};
use crate::prompting::{classify_prompt, final_block, PromptKind};

struct Rule {
    kind: Option<PromptKind>,
    task_contains: Option<String>,
    response: Completion,
}

/// Answers prompts with canned completions.
///
/// Rules are tried in insertion order. A rule matches when the prompt is of
/// the given kind (if set) and the task line of the prompt's final scenario
/// block contains the given text (if set).
#[derive(Default)]
pub struct ScriptedGenerator {
    rules: Vec<Rule>,
    fallback: Option<Completion>,
}

impl ScriptedGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(mut self, kind: PromptKind, task_contains: &str, response: Completion) -> Self {
        self.rules.push(Rule {
            kind: Some(kind),
            task_contains: Some(task_contains.to_string()),
            response,
        });
        self
    }

    pub fn on_kind(mut self, kind: PromptKind, response: Completion) -> Self {
        self.rules.push(Rule {
            kind: Some(kind),
            task_contains: None,
            response,
        });
        self
    }

    pub fn fallback(mut self, response: Completion) -> Self {
        self.fallback = Some(response);
        self
    }
}

impl TextGenerator for ScriptedGenerator {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let kind = classify_prompt(&req.prompt);
        let task = final_block(&req.prompt).map(|b| b.task).unwrap_or_default();
        for rule in &self.rules {
            if rule.kind.is_some_and(|k| Some(k) != kind) {
                continue;
            }
            if rule.task_contains.as_deref().is_some_and(|t| !task.contains(t)) {
                continue;
            }
            return Ok(rule.response.clone());
        }
        if let Some(fb) = &self.fallback {
            return Ok(fb.clone());
        }
        let tail: String = req.prompt.chars().rev().take(80).collect::<Vec<_>>().into_iter().rev().collect();
        Err(BackendError::Unscripted(tail))
    }
}
