//! Versioned JSON checkpoints. Parameters are stored as plain decimal arrays.

use super::{HeadKind, Network};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "hpft-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shape summary used to reject loading into a mismatched architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub backbone_widths: Vec<usize>,
    pub head_kind: HeadKind,
    pub head_widths: Vec<usize>,
}

impl Architecture {
    pub fn of(net: &Network) -> Self {
        Self {
            input_dim: net.input_dim(),
            backbone_widths: net.backbone.layers.iter().map(|l| l.out_dim()).collect(),
            head_kind: net.head.kind,
            head_widths: net.head.layers.iter().map(|l| l.out_dim()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(network: &Network) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: network.architecture(),
            network: network.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        if Architecture::of(&ck.network) != ck.architecture {
            return Err(Error::ArchitectureMismatch(
                "checkpoint parameters disagree with its architecture record".into(),
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.display().to_string()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Network, provided it has the expected architecture.
    pub fn into_network_checked(self, expected: &Architecture) -> Result<Network> {
        if &self.architecture != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {:?}, checkpoint has {:?}",
                expected, self.architecture
            )));
        }
        Ok(self.network)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Head, MlpBackbone};
    use crate::numkernel::RngState;

    #[test]
    fn roundtrip_bit_exact() {
        let mut rng = RngState::new(11);
        let net = Network::new(
            MlpBackbone::new(3, &[4, 4], true, &mut rng),
            Head::linear(4, 2, &mut rng),
        );
        let s = Checkpoint::new(&net).to_json().unwrap();
        let back = Checkpoint::from_json(&s).unwrap();
        assert_eq!(back.network, net);
        let bits = |n: &Network| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.network), bits(&net));
    }

    #[test]
    fn mismatched_architecture_rejected() {
        let mut rng = RngState::new(1);
        let net = Network::new(
            MlpBackbone::new(3, &[4], true, &mut rng),
            Head::linear(4, 2, &mut rng),
        );
        let mut other = net.architecture();
        other.backbone_widths = vec![5];
        assert!(matches!(
            Checkpoint::new(&net).into_network_checked(&other),
            Err(Error::ArchitectureMismatch(_))
        ));
    }
}
