//! Verification trials and the VoxCeleb-style trial list format
//! (`<label> <enroll_utt> <test_utt>`, label `1` = target, `0` = nontarget).

use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn is_target(self) -> bool {
        self == Label::Target
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub label: Label,
    pub enroll_id: String,
    pub test_id: String,
}

#[derive(Debug, Error, PartialEq)]
#[error("trial list line {line}: {reason}")]
pub struct TrialParseError {
    pub line: usize,
    pub reason: String,
}

impl Trial {
    pub fn new(label: Label, enroll_id: impl Into<String>, test_id: impl Into<String>) -> Self {
        Trial {
            label,
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
        }
    }
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = match self.label {
            Label::Target => 1,
            Label::Nontarget => 0,
        };
        write!(f, "{l} {} {}", self.enroll_id, self.test_id)
    }
}

impl FromStr for Trial {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format!("expected 3 fields, found {}", fields.len()));
        }
        let label = match fields[0] {
            "1" | "target" => Label::Target,
            "0" | "nontarget" => Label::Nontarget,
            other => return Err(format!("unknown label {other:?}")),
        };
        Ok(Trial::new(label, fields[1], fields[2]))
    }
}

/// Parses a trial list. Blank lines and `#` comments are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>, TrialParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let trial = t.parse::<Trial>().map_err(|reason| TrialParseError {
            line: i + 1,
            reason,
        })?;
        out.push(trial);
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        s.push_str(&t.to_string());
        s.push('\n');
    }
    s
}

/// Every utterance referenced by `trials`, in first-seen order.
pub fn trial_utterances(trials: &[Trial]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for t in trials {
        for id in [&t.enroll_id, &t.test_id] {
            if seen.insert(id.clone()) {
                out.push(id.clone());
            }
        }
    }
    out
}
