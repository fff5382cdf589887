//! Versioned JSON parameter checkpoints.
//!
//! Floats are serialized with shortest round-trip formatting, so a
//! save/load cycle reproduces the network bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::mlp::Mlp;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Layer widths including input (with time slot) and output.
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn of(net: &Mlp) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: net.dims().to_vec(),
            activation: net.activation(),
            seed: net.seed(),
            params: net.params().to_vec(),
        }
    }

    pub fn into_net(self) -> Result<Mlp> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.dims.len() < 2 {
            return Err(Error::Checkpoint("checkpoint needs ≥ 2 layer widths".into()));
        }
        let hidden = &self.dims[1..self.dims.len() - 1];
        let mut net = Mlp::new(
            self.dims[0],
            hidden,
            *self.dims.last().unwrap(),
            self.activation,
            self.seed,
        )?;
        net.set_params(&self.params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(net)
    }
}

pub fn save_checkpoint(net: &Mlp, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::of(net))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let json = fs::read_to_string(path)?;
    let ckpt: Checkpoint =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ckpt.into_net()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let net = Mlp::new(5, &[16, 16], 3, Activation::Silu, 99).unwrap();
        let dir = std::env::temp_dir().join("driftbridge-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        save_checkpoint(&net, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        assert_eq!(net.dims(), restored.dims());
        assert_eq!(net.params(), restored.params());
        assert_eq!(net.activation(), restored.activation());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net = Mlp::new(3, &[4], 2, Activation::Tanh, 1).unwrap();
        let mut ckpt = Checkpoint::of(&net);
        ckpt.version = 999;
        assert!(ckpt.into_net().is_err());
    }
}
