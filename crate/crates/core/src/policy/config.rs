use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of encoder layers.
pub const ENCODER_LAYERS: usize = 3;

/// Which projections of the first `heads` attention heads run through a QONN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantumHeads {
    pub heads: usize,
    pub query: bool,
    pub key: bool,
    pub value: bool,
}

impl QuantumHeads {
    pub const NONE: QuantumHeads = QuantumHeads {
        heads: 0,
        query: false,
        key: false,
        value: false,
    };

    pub fn all(heads: usize) -> Self {
        QuantumHeads {
            heads,
            query: true,
            key: true,
            value: true,
        }
    }

    pub fn is_quantum(&self, head: usize) -> bool {
        head < self.heads && (self.query || self.key || self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Pointer logits are squashed as `clip · tanh(·)`.
    pub logit_clip: f64,
    /// Demand volumes are divided by this before entering the network.
    pub demand_scale: f64,
    pub encoder_quantum: QuantumHeads,
    pub decoder_quantum: QuantumHeads,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d: 32,
            d_ff: 64,
            n_heads: 4,
            dropout: 0.0,
            logit_clip: 10.0,
            demand_scale: 10.0,
            encoder_quantum: QuantumHeads::NONE,
            decoder_quantum: QuantumHeads::NONE,
        }
    }
}

impl PolicyConfig {
    /// Every query, key and value in encoder and decoder is quantum; `d = 128`,
    /// 8 heads of 16 qubits.
    pub fn simulation_only() -> Self {
        PolicyConfig {
            d: 128,
            d_ff: 512,
            n_heads: 8,
            encoder_quantum: QuantumHeads::all(8),
            decoder_quantum: QuantumHeads::all(8),
            ..Default::default()
        }
    }

    /// Quantum encoder queries and keys only; `d = 64`, 8 heads of 8 qubits.
    pub fn hardware_experiment() -> Self {
        PolicyConfig {
            d: 64,
            d_ff: 256,
            n_heads: 8,
            encoder_quantum: QuantumHeads {
                heads: 8,
                query: true,
                key: true,
                value: false,
            },
            decoder_quantum: QuantumHeads::NONE,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "simulation-only" => Some(Self::simulation_only()),
            "hardware-experiment" => Some(Self::hardware_experiment()),
            "classical" => Some(Self::default()),
            _ => None,
        }
    }

    /// Per-head key/query/value width `d / n_heads`.
    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Argument("d, d_ff and n_heads must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Argument(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument("dropout must lie in [0, 1)".into()));
        }
        if !(self.logit_clip > 0.0 && self.demand_scale > 0.0) {
            return Err(Error::Argument("logit_clip and demand_scale must be positive".into()));
        }
        for q in [self.encoder_quantum, self.decoder_quantum] {
            if q.heads > self.n_heads {
                return Err(Error::Argument(format!(
                    "{} quantum heads requested but only {} heads exist",
                    q.heads, self.n_heads
                )));
            }
            if q.heads > 0 && self.head_dim() < 2 {
                return Err(Error::Argument("quantum heads need at least 2 qubits".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_the_head_dimension_law() {
        let s = PolicyConfig::simulation_only();
        assert_eq!((s.d, s.n_heads, s.head_dim()), (128, 8, 16));
        let h = PolicyConfig::hardware_experiment();
        assert_eq!((h.d, h.n_heads, h.head_dim()), (64, 8, 8));
        assert!(h.encoder_quantum.query && h.encoder_quantum.key && !h.encoder_quantum.value);
        assert_eq!(h.decoder_quantum, QuantumHeads::NONE);
        s.validate().unwrap();
        h.validate().unwrap();
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let c = PolicyConfig {
            d: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PolicyConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.d = 64;
        assert_ne!(a.hash(), b.hash());
    }
}
