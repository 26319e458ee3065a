//! JSON checkpoints of trained models.
//!
//! Each layer is stored with the fields `w`, `lora_a`, `lora_b`, `router_p`,
//! `mode`, `omega_scheme`, `omega_numerator`, `k` and `rank`; the model adds
//! `head`. Matrices are `{rows, cols, data}` with row-major data. Loading
//! re-validates every shape and value.

use serde::{Deserialize, Serialize};

use crate::error::{RemixError, Result};
use crate::mixture::{LoraPair, MixtureLayer, Mode, OmegaScheme};
use crate::numerics::Matrix;
use crate::trainer::Model;

pub const FORMAT: &str = "remix-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCheckpoint {
    pub w: Matrix,
    pub lora_a: Vec<Matrix>,
    pub lora_b: Vec<Matrix>,
    pub router_p: Matrix,
    pub mode: Mode,
    pub omega_scheme: OmegaScheme,
    pub omega_numerator: f64,
    pub k: usize,
    pub rank: usize,
}

impl LayerCheckpoint {
    pub fn from_layer(layer: &MixtureLayer) -> Self {
        LayerCheckpoint {
            w: layer.w().clone(),
            lora_a: layer.loras().iter().map(|p| p.a.clone()).collect(),
            lora_b: layer.loras().iter().map(|p| p.b.clone()).collect(),
            router_p: layer.router().clone(),
            mode: layer.mode(),
            omega_scheme: layer.omega_scheme(),
            omega_numerator: layer.omega_numerator(),
            k: layer.k(),
            rank: layer.rank(),
        }
    }

    pub fn into_layer(self) -> Result<MixtureLayer> {
        if self.lora_a.len() != self.lora_b.len() {
            return Err(RemixError::Checkpoint(format!("{} A factors but {} B factors", self.lora_a.len(), self.lora_b.len())));
        }
        let loras: Vec<LoraPair> = self.lora_a.into_iter().zip(self.lora_b).map(|(a, b)| LoraPair { a, b }).collect();
        let layer = MixtureLayer::new(self.w, loras, self.router_p, self.mode, self.omega_scheme, self.omega_numerator, self.k)
            .map_err(|e| RemixError::Checkpoint(e.to_string()))?;
        if layer.rank() != self.rank {
            return Err(RemixError::Checkpoint(format!("declared rank {} but factors have rank {}", self.rank, layer.rank())));
        }
        Ok(layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerCheckpoint>,
    pub head: Matrix,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            layers: model.layers.iter().map(LayerCheckpoint::from_layer).collect(),
            head: model.head.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(RemixError::Checkpoint(format!("unsupported format {:?} version {}", self.format, self.version)));
        }
        let layers = self.layers.into_iter().map(LayerCheckpoint::into_layer).collect::<Result<Vec<_>>>()?;
        Model::new(layers, self.head).map_err(|e| RemixError::Checkpoint(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RemixError::Checkpoint(e.to_string()))
    }
}

pub fn save_model(model: &Model) -> String {
    Checkpoint::from_model(model).to_json()
}

pub fn load_model(text: &str) -> Result<Model> {
    Checkpoint::from_json(text)?.into_model()
}
