use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Discrete { n_actions: usize },
    Continuous { act_dim: usize },
}

impl ActionKind {
    /// Width of the head output (logits or mean).
    pub fn head_dim(&self) -> usize {
        match *self {
            ActionKind::Discrete { n_actions } => n_actions,
            ActionKind::Continuous { act_dim } => act_dim,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, ActionKind::Continuous { .. })
    }
}

/// Weight-carrying layers of the recurrent actor, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerId {
    Fc1,
    Fc2,
    GruX,
    GruH,
    Post,
    Head,
    LogStd,
}

impl LayerId {
    pub const ALL: [LayerId; 7] = [
        LayerId::Fc1,
        LayerId::Fc2,
        LayerId::GruX,
        LayerId::GruH,
        LayerId::Post,
        LayerId::Head,
        LayerId::LogStd,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Fc1 => "fc1",
            LayerId::Fc2 => "fc2",
            LayerId::GruX => "gru_x",
            LayerId::GruH => "gru_h",
            LayerId::Post => "post",
            LayerId::Head => "head",
            LayerId::LogStd => "log_std",
        }
    }

    pub fn is_head(self) -> bool {
        matches!(self, LayerId::Head | LayerId::LogStd)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LayerId::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub id: LayerId,
    /// Output width (d).
    pub rows: usize,
    /// Input width (k).
    pub cols: usize,
    pub init_gain: f64,
}

/// FC1 → ReLU → FC2 → ReLU → GRU → FC-post → ReLU → head(s).
///
/// Weights are stored `out × in` and applied as `y = x·Wᵀ + b` on row batches.
/// GRU gates are stacked `[z; r; n]` in one `3H × H` input projection and one
/// `3H × H` hidden projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorArchitecture {
    pub obs_dim: usize,
    /// One-hot agent id width, 0 when ids are not appended.
    pub id_dim: usize,
    pub hidden_dim: usize,
    pub action: ActionKind,
}

impl ActorArchitecture {
    pub fn new(obs_dim: usize, id_dim: usize, hidden_dim: usize, action: ActionKind) -> Result<Self> {
        if obs_dim + id_dim == 0 || hidden_dim == 0 || action.head_dim() == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate architecture: obs {obs_dim}, id {id_dim}, hidden {hidden_dim}, head {}",
                action.head_dim()
            )));
        }
        Ok(Self { obs_dim, id_dim, hidden_dim, action })
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.id_dim
    }

    pub fn layer_ids(&self) -> &'static [LayerId] {
        if self.action.is_continuous() {
            &LayerId::ALL
        } else {
            &LayerId::ALL[..6]
        }
    }

    pub fn has_layer(&self, id: LayerId) -> bool {
        id != LayerId::LogStd || self.action.is_continuous()
    }

    pub fn layer(&self, id: LayerId) -> LayerSpec {
        let h = self.hidden_dim;
        let a = self.action.head_dim();
        let relu_gain = 2f64.sqrt();
        let (rows, cols, init_gain) = match id {
            LayerId::Fc1 => (h, self.input_dim(), relu_gain),
            LayerId::Fc2 => (h, h, relu_gain),
            LayerId::GruX => (3 * h, h, 1.0),
            LayerId::GruH => (3 * h, h, 1.0),
            LayerId::Post => (h, h, relu_gain),
            LayerId::Head | LayerId::LogStd => (a, h, 0.01),
        };
        LayerSpec { id, rows, cols, init_gain }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        self.layer_ids().iter().map(|&id| self.layer(id)).collect()
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.rows * l.cols + l.rows).sum()
    }

    pub fn weight_param_count(&self) -> usize {
        self.layers().iter().map(|l| l.rows * l.cols).sum()
    }
}
