//! Beliefs, roles, reasoning methods, strategy menus, and prompt rendering.
//!
//! Prompt text lives in plain UTF-8 template files (see `templates/v1/`), one
//! per role and prompt kind plus a shared belief file. Two kinds of markup are
//! recognised:
//!
//! * `{name}` placeholders, each file having its own fixed set;
//! * `[[if reasoning]] ... [[end]]` sections, kept only when the agent uses a
//!   reasoning method other than [`ReasoningMethod::Vanilla`].
//!
//! Every [`TemplateSet`] carries a SHA-256 checksum over its files so that a
//! transcript can pin the exact prompt bytes it was produced with.

use crate::game::Stake;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Belief {
    Greedy,
    Fair,
    Selfless,
}

impl Belief {
    pub const ALL: [Belief; 3] = [Belief::Greedy, Belief::Fair, Belief::Selfless];

    /// Lowercase word substituted into "You are {belief}".
    pub fn word(self) -> &'static str {
        match self {
            Belief::Greedy => "greedy",
            Belief::Fair => "fair",
            Belief::Selfless => "selfless",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Belief::Greedy => "Greedy",
            Belief::Fair => "Fair",
            Belief::Selfless => "Selfless",
        }
    }
}

impl fmt::Display for Belief {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownName {
    pub kind: &'static str,
    pub value: String,
}

impl UnknownName {
    pub fn new(kind: &'static str, value: &str) -> Self {
        UnknownName {
            kind,
            value: value.to_string(),
        }
    }
}

impl FromStr for Belief {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Belief::ALL
            .into_iter()
            .find(|b| b.word().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownName {
                kind: "belief",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Proposer,
    Responder,
}

impl Role {
    pub fn display_name(self) -> &'static str {
        match self {
            Role::Proposer => "Player A",
            Role::Responder => "Player B",
        }
    }

    pub fn counterpart(self) -> Role {
        match self {
            Role::Proposer => Role::Responder,
            Role::Responder => Role::Proposer,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Proposer => "proposer",
            Role::Responder => "responder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReasoningMethod {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "cot")]
    Cot,
    #[serde(rename = "tom-zero")]
    TomZero,
    #[serde(rename = "tom-first")]
    TomFirst,
    #[serde(rename = "tom-both")]
    TomBoth,
}

impl ReasoningMethod {
    pub const ALL: [ReasoningMethod; 5] = [
        ReasoningMethod::Vanilla,
        ReasoningMethod::Cot,
        ReasoningMethod::TomZero,
        ReasoningMethod::TomFirst,
        ReasoningMethod::TomBoth,
    ];

    pub fn uses_reasoning(self) -> bool {
        self != ReasoningMethod::Vanilla
    }

    /// Configuration key, e.g. `tom-first`.
    pub fn key(self) -> &'static str {
        match self {
            ReasoningMethod::Vanilla => "vanilla",
            ReasoningMethod::Cot => "cot",
            ReasoningMethod::TomZero => "tom-zero",
            ReasoningMethod::TomFirst => "tom-first",
            ReasoningMethod::TomBoth => "tom-both",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            ReasoningMethod::Vanilla => "Vanilla",
            ReasoningMethod::Cot => "CoT",
            ReasoningMethod::TomZero => "ToM Zero",
            ReasoningMethod::TomFirst => "ToM First",
            ReasoningMethod::TomBoth => "ToM Both",
        }
    }
}

impl fmt::Display for ReasoningMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ReasoningMethod {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        ReasoningMethod::ALL
            .into_iter()
            .find(|m| m.key().eq_ignore_ascii_case(s) || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownName {
                kind: "reasoning method",
                value: s.to_string(),
            })
    }
}

const PROPOSER_STRATEGIES: [&str; 6] = [
    "Propose very greedily",
    "Propose greedily",
    "Propose fairly",
    "Propose generously",
    "Propose very generously",
    "Other",
];

const RESPONDER_STRATEGIES: [&str; 7] = [
    "Accept a favourable offer",
    "Accept a fair offer",
    "Accept an unfavourable offer",
    "Reject a favourable offer",
    "Reject a fair offer",
    "Reject an unfavourable offer",
    "Other",
];

/// The fixed, 1-indexed strategy menu offered to a role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyInventory {
    role: Role,
    options: &'static [&'static str],
}

impl StrategyInventory {
    pub fn for_role(role: Role) -> Self {
        let options: &'static [&'static str] = match role {
            Role::Proposer => &PROPOSER_STRATEGIES,
            Role::Responder => &RESPONDER_STRATEGIES,
        };
        StrategyInventory { role, options }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }

    pub fn contains(&self, index: u32) -> bool {
        index >= 1 && (index as usize) <= self.options.len()
    }

    pub fn label(&self, index: u32) -> Option<&'static str> {
        if self.contains(index) {
            Some(self.options[index as usize - 1])
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &'static str)> + '_ {
        self.options
            .iter()
            .enumerate()
            .map(|(i, label)| (i as u32 + 1, *label))
    }

    /// Menu lines as shown to the agent: `1) Propose very greedily`.
    pub fn menu(&self) -> String {
        self.iter()
            .map(|(i, label)| format!("{i}) {label}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentProfile {
    pub role: Role,
    pub belief: Belief,
    pub reasoning: ReasoningMethod,
}

impl AgentProfile {
    pub fn new(role: Role, belief: Belief, reasoning: ReasoningMethod) -> Self {
        AgentProfile {
            role,
            belief,
            reasoning,
        }
    }

    pub fn display_name(&self) -> &'static str {
        self.role.display_name()
    }

    pub fn strategies(&self) -> StrategyInventory {
        StrategyInventory::for_role(self.role)
    }
}

/// Everything an agent is shown for one game, rendered up front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub reasoning_prompt: Option<String>,
    pub action_prompt: String,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("template {file}: unknown placeholder `{{{placeholder}}}`")]
    UnknownPlaceholder { file: String, placeholder: String },
    #[error("template {file}: unbalanced `[[if reasoning]]` section")]
    UnbalancedSection { file: String },
}

/// (file stem, placeholders it may use)
const TEMPLATE_FILES: [(&str, &[&str]); 11] = [
    ("belief", &["belief"]),
    ("proposer_system", &["stake", "belief prompt"]),
    ("responder_system", &["stake", "belief prompt"]),
    ("reasoning_cot", &[]),
    ("reasoning_tom_zero", &[]),
    ("reasoning_tom_first", &["other player"]),
    ("reasoning_tom_both", &["other player"]),
    ("proposer_action", &["strategy prompt"]),
    ("responder_action", &["strategy prompt"]),
    ("proposer_strategy", &["strategy menu"]),
    ("responder_strategy", &["strategy menu"]),
];

const SECTION_OPEN: &str = "[[if reasoning]]";
const SECTION_CLOSE: &str = "[[end]]";

static BUILTIN: OnceLock<TemplateSet> = OnceLock::new();

macro_rules! builtin_file {
    ($name:literal) => {
        (
            $name,
            include_str!(concat!("../templates/v1/", $name, ".txt")),
        )
    };
}

/// A validated set of prompt templates plus its content checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    files: BTreeMap<String, String>,
    checksum: String,
}

impl TemplateSet {
    /// The templates compiled into this crate.
    pub fn builtin() -> &'static TemplateSet {
        BUILTIN.get_or_init(|| {
            let files = [
                builtin_file!("belief"),
                builtin_file!("proposer_system"),
                builtin_file!("responder_system"),
                builtin_file!("reasoning_cot"),
                builtin_file!("reasoning_tom_zero"),
                builtin_file!("reasoning_tom_first"),
                builtin_file!("reasoning_tom_both"),
                builtin_file!("proposer_action"),
                builtin_file!("responder_action"),
                builtin_file!("proposer_strategy"),
                builtin_file!("responder_strategy"),
            ];
            TemplateSet::from_files(files.into_iter().map(|(k, v)| (k.to_string(), v.to_string())))
                .expect("builtin templates are valid")
        })
    }

    /// Loads `<stem>.txt` for every template file from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut files = Vec::new();
        for (stem, _) in TEMPLATE_FILES {
            let path = dir.join(format!("{stem}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            files.push((stem.to_string(), text));
        }
        TemplateSet::from_files(files)
    }

    fn from_files(files: impl IntoIterator<Item = (String, String)>) -> Result<Self, TemplateError> {
        let files: BTreeMap<String, String> = files
            .into_iter()
            .map(|(k, v)| (k, v.trim_end_matches(['\n', '\r']).to_string()))
            .collect();
        for (stem, allowed) in TEMPLATE_FILES {
            let text = files.get(stem).map(String::as_str).unwrap_or_default();
            validate(stem, text, allowed)?;
        }
        let mut hasher = Sha256::new();
        for (name, text) in &files {
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(text.as_bytes());
            hasher.update([0]);
        }
        let checksum = hex::encode(hasher.finalize());
        Ok(TemplateSet { files, checksum })
    }

    /// Hex SHA-256 over every template file, in name order.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    fn raw(&self, stem: &str) -> &str {
        self.files.get(stem).map(String::as_str).unwrap_or_default()
    }

    pub fn render_belief_prompt(&self, belief: Belief) -> String {
        substitute(self.raw("belief"), &[("belief", belief.word())])
    }

    pub fn render_system_prompt(&self, profile: &AgentProfile, stake: Stake) -> String {
        let stem = match profile.role {
            Role::Proposer => "proposer_system",
            Role::Responder => "responder_system",
        };
        let belief_prompt = self.render_belief_prompt(profile.belief);
        let stake = stake.total().to_string();
        substitute(
            &gate(self.raw(stem), profile.reasoning.uses_reasoning()),
            &[("stake", &stake), ("belief prompt", &belief_prompt)],
        )
    }

    pub fn render_reasoning_prompt(&self, profile: &AgentProfile) -> Option<String> {
        let stem = match profile.reasoning {
            ReasoningMethod::Vanilla => return None,
            ReasoningMethod::Cot => "reasoning_cot",
            ReasoningMethod::TomZero => "reasoning_tom_zero",
            ReasoningMethod::TomFirst => "reasoning_tom_first",
            ReasoningMethod::TomBoth => "reasoning_tom_both",
        };
        let other = profile.role.counterpart().display_name();
        Some(substitute(self.raw(stem), &[("other player", other)]))
    }

    pub fn render_action_prompt(&self, profile: &AgentProfile) -> String {
        let (action, strategy) = match profile.role {
            Role::Proposer => ("proposer_action", "proposer_strategy"),
            Role::Responder => ("responder_action", "responder_strategy"),
        };
        let menu = profile.strategies().menu();
        let strategy_prompt = substitute(self.raw(strategy), &[("strategy menu", &menu)]);
        substitute(
            &gate(self.raw(action), profile.reasoning.uses_reasoning()),
            &[("strategy prompt", &strategy_prompt)],
        )
    }

    pub fn bundle(&self, profile: &AgentProfile, stake: Stake) -> PromptBundle {
        PromptBundle {
            system_prompt: self.render_system_prompt(profile, stake),
            reasoning_prompt: self.render_reasoning_prompt(profile),
            action_prompt: self.render_action_prompt(profile),
        }
    }
}

fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    text.match_indices('{').filter_map(move |(start, _)| {
        let rest = &text[start + 1..];
        let end = rest.find('}')?;
        let name = &rest[..end];
        (!name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == ' '))
            .then_some(name)
    })
}

fn validate(file: &str, text: &str, allowed: &[&str]) -> Result<(), TemplateError> {
    if let Some(unknown) = placeholders(text).find(|p| !allowed.contains(p)) {
        return Err(TemplateError::UnknownPlaceholder {
            file: file.to_string(),
            placeholder: unknown.to_string(),
        });
    }
    let mut open = false;
    let mut rest = text;
    loop {
        let next_open = rest.find(SECTION_OPEN);
        let next_close = rest.find(SECTION_CLOSE);
        match (next_open, next_close) {
            (None, None) => break,
            (Some(o), c) if c.is_none_or(|c| o < c) => {
                if open {
                    return Err(TemplateError::UnbalancedSection { file: file.into() });
                }
                open = true;
                rest = &rest[o + SECTION_OPEN.len()..];
            }
            (_, Some(c)) => {
                if !open {
                    return Err(TemplateError::UnbalancedSection { file: file.into() });
                }
                open = false;
                rest = &rest[c + SECTION_CLOSE.len()..];
            }
            (Some(_), None) => unreachable!(),
        }
    }
    if open {
        return Err(TemplateError::UnbalancedSection { file: file.into() });
    }
    Ok(())
}

/// Keeps or drops `[[if reasoning]]` sections. Sections are validated as
/// balanced and non-nested when the template set is built.
fn gate(text: &str, reasoning: bool) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(SECTION_OPEN) {
        out.push_str(&rest[..start]);
        let after = &rest[start + SECTION_OPEN.len()..];
        let end = after.find(SECTION_CLOSE).unwrap_or(after.len());
        if reasoning {
            out.push_str(&after[..end]);
        }
        rest = after.get(end + SECTION_CLOSE.len()..).unwrap_or("");
    }
    out.push_str(rest);
    out
}

fn substitute(text: &str, values: &[(&str, &str)]) -> String {
    values.iter().fold(text.to_string(), |acc, (name, value)| {
        acc.replace(&format!("{{{name}}}"), value)
    })
}
