//! The three verification agents: their roles, checklist, prompt templates,
//! response parsers and the backends that answer them.

mod backend;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backend::{
    AgentBackend, AgentBackendConfig, BackendKind, HttpBackend, InvocationContext, ScriptedBackend, ScriptedResponse,
};
pub use prompt::{render_prompt, PromptInputs, DETECTIVE_QUESTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    /// Binary match filter.
    Detective,
    /// Checklist evidence extractor.
    Analyst,
    /// Caption synthesizer.
    Writer,
}

impl AgentRole {
    pub const ALL: [AgentRole; 3] = [AgentRole::Detective, AgentRole::Analyst, AgentRole::Writer];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Detective => "detective",
            AgentRole::Analyst => "analyst",
            AgentRole::Writer => "writer",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const CHECKLIST_LEN: usize = 15;

/// Default attribute keys examined by the Analyst.
pub const DEFAULT_CHECKLIST: [&str; CHECKLIST_LEN] = [
    "gender",
    "age_group",
    "upper_clothing",
    "lower_clothing",
    "footwear",
    "accessories",
    "action",
    "body_pose",
    "object_interaction",
    "scene",
    "weather",
    "lighting",
    "person_count",
    "motion_state",
    "anomaly_indicator",
];

/// Ordered set of exactly fifteen distinct attribute keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Checklist(Vec<String>);

impl Checklist {
    pub fn new(keys: Vec<String>) -> Result<Self> {
        if keys.len() != CHECKLIST_LEN {
            return Err(Error::InvalidConfig(format!(
                "checklist needs {CHECKLIST_LEN} keys, got {}",
                keys.len()
            )));
        }
        let mut normalized = Vec::with_capacity(keys.len());
        for key in keys {
            let k = normalize_key(&key);
            if k.is_empty() {
                return Err(Error::InvalidConfig("empty checklist key".into()));
            }
            if normalized.contains(&k) {
                return Err(Error::InvalidConfig(format!("duplicate checklist key {key:?}")));
            }
            normalized.push(k);
        }
        Ok(Self(normalized))
    }

    pub fn keys(&self) -> &[String] {
        &self.0
    }

    fn find(&self, raw_key: &str) -> Option<&str> {
        let k = normalize_key(raw_key);
        self.0.iter().find(|c| **c == k).map(String::as_str)
    }
}

impl Default for Checklist {
    fn default() -> Self {
        Self(DEFAULT_CHECKLIST.iter().map(|s| s.to_string()).collect())
    }
}

impl TryFrom<Vec<String>> for Checklist {
    type Error = Error;
    fn try_from(keys: Vec<String>) -> Result<Self> {
        Self::new(keys)
    }
}

impl From<Checklist> for Vec<String> {
    fn from(c: Checklist) -> Self {
        c.0
    }
}

/// "Upper Clothing", "upper-clothing" and "upper_clothing" name the same key.
fn normalize_key(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Answered checklist items, keyed by canonical checklist key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChecklistAnswers(BTreeMap<String, String>);

impl ChecklistAnswers {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Answers in checklist order.
    pub fn in_order<'a>(&'a self, checklist: &'a Checklist) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        checklist
            .keys()
            .iter()
            .filter_map(|k| self.0.get(k).map(|v| (k.as_str(), v.as_str())))
    }

    /// Keeps only keys present in `checklist`.
    pub fn from_pairs<'a>(checklist: &Checklist, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if let Some(key) = checklist.find(k) {
                let v = v.trim();
                if !v.is_empty() {
                    map.entry(key.to_string()).or_insert_with(|| v.to_string());
                }
            }
        }
        Self(map)
    }

    /// `key: value` lines in checklist order, the format the Analyst is asked for.
    pub fn to_lines(&self, checklist: &Checklist) -> String {
        self.in_order(checklist)
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Match,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub raw_text: String,
}

fn yes_no() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("static regex"))
}

fn kind_of(token: &str) -> VerdictKind {
    if token.eq_ignore_ascii_case("yes") {
        VerdictKind::Match
    } else {
        VerdictKind::Discard
    }
}

/// Reads a Detective answer. A leading "yes"/"no" decides; otherwise the
/// first standalone "yes" or "no" anywhere in the text does.
pub fn parse_verdict(raw: &str) -> Result<Verdict> {
    let leading = raw
        .split_whitespace()
        .next()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .unwrap_or("");
    let kind = if leading.eq_ignore_ascii_case("yes") || leading.eq_ignore_ascii_case("no") {
        kind_of(leading)
    } else if let Some(m) = yes_no().find(raw) {
        kind_of(m.as_str())
    } else {
        return Err(Error::UnparseableVerdict(raw.to_string()));
    };
    Ok(Verdict {
        kind,
        raw_text: raw.to_string(),
    })
}

/// Extracts `key: value` lines whose key belongs to `checklist`. Leading list
/// markers (`-`, `*`, `3.`) are ignored; the first answer for a key wins.
pub fn parse_checklist(raw: &str, checklist: &Checklist) -> ChecklistAnswers {
    let pairs = raw.lines().filter_map(|line| {
        let line = line
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .trim_start_matches(['.', ')'])
            .trim();
        line.split_once(':')
    });
    ChecklistAnswers::from_pairs(checklist, pairs)
}
