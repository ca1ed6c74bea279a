//! The fixed five-class label set shared by every component.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Sound classes in canonical output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Breathes,
    Cough,
    HelloHelp,
    MuffledWords,
    Noise,
}

pub const NUM_CLASSES: usize = 5;

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [
        Label::Breathes,
        Label::Cough,
        Label::HelloHelp,
        Label::MuffledWords,
        Label::Noise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Breathes => "breathes",
            Label::Cough => "cough",
            Label::HelloHelp => "hello_help",
            Label::MuffledWords => "muffled_words",
            Label::Noise => "noise",
        }
    }

    /// Column heading used by the confusion-matrix tables.
    pub fn title(self) -> &'static str {
        match self {
            Label::Breathes => "Breath",
            Label::Cough => "Cough",
            Label::HelloHelp => "Hello, Help",
            Label::MuffledWords => "Muffled Words",
            Label::Noise => "Noise",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for Label {
    type Err = UnknownLabel;

    /// Accepts the canonical names plus the spellings seen on the device
    /// serial output ("hello,help", "breath", "Noise").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .trim_end_matches(':')
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "breathes" | "breath" | "breathe" => Ok(Label::Breathes),
            "cough" | "coughs" => Ok(Label::Cough),
            "hello_help" | "hello,help" | "hello-help" | "hellohelp" => Ok(Label::HelloHelp),
            "muffled_words" | "muffledwords" | "muffled-words" => Ok(Label::MuffledWords),
            "noise" => Ok(Label::Noise),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

/// Outcome of thresholded classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Class(Label),
    Uncertain,
}

impl Decision {
    pub fn label(self) -> Option<Label> {
        match self {
            Decision::Class(l) => Some(l),
            Decision::Uncertain => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Class(l) => l.fmt(f),
            Decision::Uncertain => f.write_str("uncertain"),
        }
    }
}
