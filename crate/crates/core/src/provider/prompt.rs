//! Prompt templates for counterfactual generation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CfRequest, ProviderError};
use crate::graph::EffectKind;

const ZERO_SHOT: &str = include_str!("../../assets/prompts/zero_shot.txt");
const FEW_SHOT: &str = include_str!("../../assets/prompts/few_shot.txt");
const DEMONSTRATION: &str = include_str!("../../assets/prompts/demonstration.txt");
const BENCHMARK_EDIT: &str = include_str!("../../assets/prompts/benchmark_edit.txt");
const BENCHMARK_CF: &str = include_str!("../../assets/prompts/benchmark_cf.txt");
const REVIEW_DOMAIN: &str = include_str!("../../assets/prompts/review_domain.json");
const HEALTH_DOMAIN: &str = include_str!("../../assets/prompts/health_domain.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    ZeroShot,
    FewShot,
    BenchmarkEdit,
    BenchmarkCf,
}

impl Template {
    fn source(self) -> &'static str {
        match self {
            Template::ZeroShot => ZERO_SHOT,
            Template::FewShot => FEW_SHOT,
            Template::BenchmarkEdit => BENCHMARK_EDIT,
            Template::BenchmarkCf => BENCHMARK_CF,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDisplay {
    pub name: String,
    pub display: String,
}

/// Wording of instructions for one application domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDomain {
    pub intro: String,
    pub item: String,
    /// Display names, in the order they are listed in prompts.
    pub concepts: Vec<ConceptDisplay>,
    /// Per-value phrase templates (`{CONCEPT_UPPER}`, `{CONCEPT_LOWER}`).
    #[serde(default)]
    pub value_phrases: BTreeMap<String, String>,
    pub edit_line: String,
    #[serde(default)]
    pub scope_line: Option<String>,
    #[serde(default)]
    pub hold_fixed_line: Option<String>,
    #[serde(default)]
    pub mediator_line: Option<String>,
    /// Words for moving down and up the concept's value order.
    #[serde(default)]
    pub direction_words: Option<[String; 2]>,
    #[serde(default = "newline")]
    pub clause_separator: String,
}

fn newline() -> String {
    "\n".into()
}

impl PromptDomain {
    pub fn review() -> Self {
        serde_json::from_str(REVIEW_DOMAIN).expect("shipped domain parses")
    }

    pub fn health() -> Self {
        serde_json::from_str(HEALTH_DOMAIN).expect("shipped domain parses")
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn display(&self, concept: &str) -> Result<&str, ProviderError> {
        self.concepts
            .iter()
            .find(|c| c.name == concept)
            .map(|c| c.display.as_str())
            .ok_or_else(|| ProviderError::MissingField(format!("display name of `{concept}`")))
    }

    fn ordered_displays(&self, names: &BTreeSet<String>) -> Result<Vec<&str>, ProviderError> {
        for n in names {
            self.display(n)?;
        }
        Ok(self
            .concepts
            .iter()
            .filter(|c| names.contains(&c.name))
            .map(|c| c.display.as_str())
            .collect())
    }
}

/// "a", "a and b", "a, b and c".
pub fn english_list(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Replaces every `{NAME}` (upper-case letters and underscores) from
/// `fields`; any unresolved placeholder is an error.
pub fn fill(template: &str, fields: &BTreeMap<&str, String>) -> Result<String, ProviderError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_uppercase() || b == b'_') => {
                let value = fields
                    .get(n)
                    .ok_or_else(|| ProviderError::MissingField(n.to_string()))?;
                out.push_str(value);
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn load_template(source: &str) -> &str {
    source.trim_end_matches('\n')
}

/// The instruction block for `req` in `domain`.
pub fn instruction(req: &CfRequest, domain: &PromptDomain) -> Result<String, ProviderError> {
    let iv = &req.intervention;
    let display = domain.display(&iv.treatment)?;
    let mut f: BTreeMap<&str, String> = BTreeMap::new();
    f.insert("CONCEPT_UPPER", display.to_uppercase());
    f.insert("CONCEPT_LOWER", display.to_lowercase());
    let all: Vec<String> = domain
        .concepts
        .iter()
        .map(|c| c.display.to_uppercase())
        .collect();
    f.insert("ALL_UPPER", all.join(", "));
    let phrase_fields = f.clone();
    let phrase = |value: &str| -> Result<String, ProviderError> {
        let t = domain
            .value_phrases
            .get(value)
            .ok_or_else(|| ProviderError::MissingField(format!("phrase for value `{value}`")))?;
        fill(t, &phrase_fields)
    };
    if domain.edit_line.contains("{SOURCE_PHRASE}") {
        f.insert("SOURCE_PHRASE", phrase(&iv.source)?);
    }
    if domain.edit_line.contains("{TARGET_PHRASE}") {
        f.insert("TARGET_PHRASE", phrase(&iv.target)?);
    }
    if let Some([down, up]) = &domain.direction_words {
        let (s, t) = req
            .value_positions
            .ok_or_else(|| ProviderError::MissingField("value order".into()))?;
        f.insert("DIRECTION", if t < s { down.clone() } else { up.clone() });
    }
    f.insert(
        "HOLD_LIST",
        english_list(&domain.ordered_displays(&req.hold_fixed)?),
    );
    f.insert(
        "MEDIATOR_LIST",
        english_list(&domain.ordered_displays(&req.mention)?),
    );

    let mut clauses = vec![fill(&domain.edit_line, &f)?];
    if let Some(scope) = &domain.scope_line {
        clauses.push(fill(scope, &f)?);
    }
    if let Some(hold) = &domain.hold_fixed_line {
        if !req.hold_fixed.is_empty() {
            clauses.push(fill(hold, &f)?);
        }
    }
    if let Some(caveat) = &domain.mediator_line {
        if req.effect == EffectKind::Total && !req.mention.is_empty() {
            clauses.push(fill(caveat, &f)?);
        }
    }
    Ok(clauses.join(&domain.clause_separator))
}

/// Instantiates `template` for `req`. Pure: identical inputs give
/// byte-identical prompts.
pub fn render_prompt(
    req: &CfRequest,
    template: Template,
    domain: &PromptDomain,
) -> Result<String, ProviderError> {
    let text = req
        .base
        .text
        .clone()
        .ok_or_else(|| ProviderError::MissingField("TEXT".into()))?;
    let mut f: BTreeMap<&str, String> = BTreeMap::new();
    f.insert("TEXT", text);
    for (k, v) in &req.fields {
        f.insert(k.as_str(), v.clone());
    }
    if matches!(template, Template::ZeroShot | Template::FewShot) {
        f.insert("INTRO", domain.intro.clone());
        f.insert("ITEM", domain.item.clone());
        f.insert("INSTRUCTION", instruction(req, domain)?);
    }
    if template == Template::FewShot {
        if req.demonstrations.is_empty() {
            return Err(ProviderError::MissingField("DEMONSTRATIONS".into()));
        }
        let mut blocks = Vec::new();
        for (i, demo) in req.demonstrations.iter().enumerate() {
            let mut d: BTreeMap<&str, String> = BTreeMap::new();
            d.insert("INDEX", (i + 1).to_string());
            d.insert("ITEM", domain.item.clone());
            d.insert("TEXT", demo.text.clone());
            d.insert("COUNTERFACTUAL", demo.counterfactual.clone());
            d.insert("INSTRUCTION", instruction(&demo.as_request(req), domain)?);
            blocks.push(fill(load_template(DEMONSTRATION), &d)?);
        }
        f.insert("DEMONSTRATIONS", blocks.join("\n"));
    }
    fill(load_template(template.source()), &f)
}
