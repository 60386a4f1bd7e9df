//! Dataset protocols: loss weights and learning-rate schedule.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    /// In-batch contrastive interaction loss plus pair confidence.
    Swig,
    /// Full-vocabulary interaction loss plus auxiliary object classification.
    Hico,
}

impl ProtocolName {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolName::Swig => "swig",
            ProtocolName::Hico => "hico",
        }
    }

    /// Errors unless `self` is `expected`.
    pub fn require(self, expected: ProtocolName) -> Result<()> {
        if self == expected {
            Ok(())
        } else {
            Err(Error::ProtocolMismatch {
                expected: expected.as_str(),
                active: self.as_str(),
            })
        }
    }
}

impl fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swig" => Ok(ProtocolName::Swig),
            "hico" => Ok(ProtocolName::Hico),
            other => Err(Error::config("protocol.name", format!("unknown protocol `{other}`"))),
        }
    }
}

/// Loss weights; terms absent under a protocol are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub interaction: f64,
    #[serde(default)]
    pub confidence: f64,
    #[serde(default)]
    pub object_class: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub name: ProtocolName,
    pub weights: LossWeights,
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    /// Each decay divides the learning rate by this factor.
    pub decay_factor: f64,
}

impl Protocol {
    pub fn swig() -> Self {
        Self {
            name: ProtocolName::Swig,
            weights: LossWeights {
                l1: 5.0,
                giou: 2.0,
                interaction: 5.0,
                confidence: 10.0,
                object_class: 0.0,
            },
            epochs: 100,
            lr: 1e-4,
            decay_epochs: vec![60, 90],
            decay_factor: 10.0,
        }
    }

    pub fn hico() -> Self {
        Self {
            name: ProtocolName::Hico,
            weights: LossWeights {
                l1: 2.5,
                giou: 1.0,
                interaction: 2.0,
                confidence: 0.0,
                object_class: 1.0,
            },
            epochs: 60,
            lr: 1e-4,
            decay_epochs: vec![40],
            decay_factor: 10.0,
        }
    }

    pub fn named(name: ProtocolName) -> Self {
        match name {
            ProtocolName::Swig => Self::swig(),
            ProtocolName::Hico => Self::hico(),
        }
    }

    /// Piecewise-constant step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr / self.decay_factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("protocol.lr", "must be a finite non-negative number"));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::config("protocol.decay_factor", "must be positive"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("protocol.decay_epochs", "must be strictly increasing"));
        }
        let w = &self.weights;
        for (field, v) in [
            ("protocol.weights.l1", w.l1),
            ("protocol.weights.giou", w.giou),
            ("protocol.weights.interaction", w.interaction),
            ("protocol.weights.confidence", w.confidence),
            ("protocol.weights.object_class", w.object_class),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        match self.name {
            ProtocolName::Swig if w.object_class != 0.0 => Err(Error::config(
                "protocol.weights.object_class",
                "the swig protocol has no object-class term",
            )),
            ProtocolName::Hico if w.confidence != 0.0 => Err(Error::config(
                "protocol.weights.confidence",
                "the hico protocol has no confidence term",
            )),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swig_schedule() {
        let p = Protocol::swig();
        assert_eq!(p.lr_at(0), 1e-4);
        assert_eq!(p.lr_at(59), 1e-4);
        assert_eq!(p.lr_at(60), 1e-5);
        assert_eq!(p.lr_at(89), 1e-5);
        assert_eq!(p.lr_at(90), 1e-6);
    }

    #[test]
    fn hico_schedule() {
        let p = Protocol::hico();
        assert_eq!(p.lr_at(39), 1e-4);
        assert_eq!(p.lr_at(40), 1e-5);
    }

    #[test]
    fn protocol_checks() {
        assert!(ProtocolName::Swig.require(ProtocolName::Swig).is_ok());
        let e = ProtocolName::Hico.require(ProtocolName::Swig).unwrap_err();
        assert!(matches!(e, Error::ProtocolMismatch { expected: "swig", active: "hico" }));
        assert!(Protocol::swig().validate().is_ok());
        let mut bad = Protocol::hico();
        bad.weights.confidence = 1.0;
        assert!(bad.validate().is_err());
    }
}
