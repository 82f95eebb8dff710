//! Communication protocols: message kind, bandwidth and vocabulary coding.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    None,
    Continuous,
    OneHot,
    BitString,
}

/// Message kind plus bandwidth `b` (0 for [`ProtocolKind::None`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Protocol {
    pub kind: ProtocolKind,
    pub bandwidth: usize,
}

impl Protocol {
    pub fn new(kind: ProtocolKind, bandwidth: usize) -> Result<Self, CoreError> {
        match (kind, bandwidth) {
            (ProtocolKind::None, 0) => Ok(Self { kind, bandwidth }),
            (ProtocolKind::None, b) => Err(CoreError::invalid(format!(
                "protocol none takes bandwidth 0, got {b}"
            ))),
            (_, 0) => Err(CoreError::invalid("bandwidth must be positive")),
            (ProtocolKind::BitString, b) if b > 63 => Err(CoreError::invalid(format!(
                "bit-string bandwidth {b} exceeds 63 bits"
            ))),
            _ => Ok(Self { kind, bandwidth }),
        }
    }

    pub fn none() -> Self {
        Self {
            kind: ProtocolKind::None,
            bandwidth: 0,
        }
    }

    pub fn continuous(b: usize) -> Self {
        Self::new(ProtocolKind::Continuous, b).expect("positive bandwidth")
    }

    pub fn onehot(b: usize) -> Self {
        Self::new(ProtocolKind::OneHot, b).expect("positive bandwidth")
    }

    pub fn bitstring(b: usize) -> Self {
        Self::new(ProtocolKind::BitString, b).expect("bandwidth in 1..=63")
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, ProtocolKind::OneHot | ProtocolKind::BitString)
    }

    pub fn communicates(&self) -> bool {
        self.kind != ProtocolKind::None
    }

    /// Number of distinct messages; `None` means unbounded (continuous).
    pub fn vocab_size(&self) -> Option<u64> {
        match self.kind {
            ProtocolKind::None => Some(0),
            ProtocolKind::Continuous => None,
            ProtocolKind::OneHot => Some(self.bandwidth as u64),
            ProtocolKind::BitString => Some(1u64 << self.bandwidth),
        }
    }

    /// Width of the message-encoder output μ.
    pub fn logit_dim(&self) -> usize {
        match self.kind {
            ProtocolKind::BitString => 2 * self.bandwidth,
            _ => self.bandwidth,
        }
    }

    /// Width of a broadcast message m.
    pub fn message_dim(&self) -> usize {
        self.bandwidth
    }

    /// Short label: `no`, `c16`, `b4`, `o8`.
    pub fn label(&self) -> String {
        match self.kind {
            ProtocolKind::None => "no".to_string(),
            ProtocolKind::Continuous => format!("c{}", self.bandwidth),
            ProtocolKind::OneHot => format!("o{}", self.bandwidth),
            ProtocolKind::BitString => format!("b{}", self.bandwidth),
        }
    }

    pub fn parse_label(label: &str) -> Result<Self, CoreError> {
        if label == "no" || label == "none" {
            return Ok(Self::none());
        }
        let (head, digits) = label.split_at(1);
        let b: usize = digits
            .parse()
            .map_err(|_| CoreError::invalid(format!("bad protocol label {label:?}")))?;
        let kind = match head {
            "c" => ProtocolKind::Continuous,
            "o" => ProtocolKind::OneHot,
            "b" => ProtocolKind::BitString,
            _ => return Err(CoreError::invalid(format!("bad protocol label {label:?}"))),
        };
        Self::new(kind, b)
    }

    /// Binary message for a vocabulary index. One-hot puts the 1 at `index`;
    /// bit-string writes `index` most-significant bit first.
    pub fn encode(&self, index: u64) -> Result<Vec<f64>, CoreError> {
        let vocab = match self.vocab_size() {
            Some(v) if self.is_discrete() => v,
            _ => {
                return Err(CoreError::invalid(format!(
                    "protocol {} has no finite vocabulary",
                    self.label()
                )))
            }
        };
        if index >= vocab {
            return Err(CoreError::invalid(format!(
                "vocabulary index {index} out of range for {} (|V| = {vocab})",
                self.label()
            )));
        }
        let b = self.bandwidth;
        Ok(match self.kind {
            ProtocolKind::OneHot => (0..b).map(|k| (k as u64 == index) as u8 as f64).collect(),
            _ => (0..b)
                .map(|k| ((index >> (b - 1 - k)) & 1) as f64)
                .collect(),
        })
    }

    /// Inverse of [`Protocol::encode`] for a well-formed discrete message.
    pub fn decode(&self, message: &[f64]) -> Result<u64, CoreError> {
        if !self.is_discrete() || message.len() != self.bandwidth {
            return Err(CoreError::invalid(format!(
                "cannot decode a width-{} message under {}",
                message.len(),
                self.label()
            )));
        }
        match self.kind {
            ProtocolKind::OneHot => message
                .iter()
                .position(|&v| v == 1.0)
                .map(|p| p as u64)
                .ok_or_else(|| CoreError::invalid("one-hot message without a set entry")),
            _ => Ok(message
                .iter()
                .fold(0u64, |acc, &bit| (acc << 1) | (bit >= 0.5) as u64)),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Learned,
    Uniform,
}
