use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which of the three heads are built on top of the shared feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    /// BLSTM part-sequence identification branch.
    pub part: bool,
    /// Global pooling + FC identification branch.
    pub global: bool,
    /// Global pooling ranking branch trained with the triplet loss.
    pub ranking: bool,
}

impl Branches {
    pub const ALL: Branches = Branches {
        part: true,
        global: true,
        ranking: true,
    };

    pub fn any(&self) -> bool {
        self.part || self.global || self.ranking
    }
}

impl Default for Branches {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.part, "part"),
            (self.global, "global"),
            (self.ranking, "ranking"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut b = Branches {
            part: false,
            global: false,
            ranking: false,
        };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "part" => b.part = true,
                "global" => b.global = true,
                "ranking" => b.ranking = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown branch `{other}` (expected part, global or ranking)"
                    )))
                }
            }
        }
        Ok(b)
    }
}

/// Network shape and branch layout.
///
/// The backbone is a stack of `depth` stride-2 3x3 convolutions, so the
/// feature map is `input_height / 2^depth` rows by `input_width / 2^depth`
/// columns with `channels` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub depth: usize,
    /// 3x3 convolutions per backbone stage; only the first is strided.
    pub stage_convs: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub global_fc_dim: usize,
    pub num_classes: usize,
    pub branches: Branches,
    pub part_uses_lstm: bool,
}

impl Default for ModelConfig {
    /// Full-size layout: 256x128 input, 8x4x2048 feature map, 256 BLSTM
    /// units per direction, 751 training identities.
    fn default() -> Self {
        Self {
            input_height: 256,
            input_width: 128,
            depth: 5,
            stage_convs: 1,
            base_width: 32,
            max_width: 256,
            channels: 2048,
            hidden: 256,
            lstm_layers: 2,
            global_fc_dim: 2048,
            num_classes: 751,
            branches: Branches::ALL,
            part_uses_lstm: true,
        }
    }
}

impl ModelConfig {
    /// Small layout that trains on one CPU core in minutes.
    pub fn desk_scale(num_classes: usize) -> Self {
        Self {
            base_width: 16,
            max_width: 128,
            channels: 256,
            hidden: 32,
            global_fc_dim: 64,
            num_classes,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    pub fn feature_height(&self) -> usize {
        self.input_height / self.stride()
    }

    pub fn feature_width(&self) -> usize {
        self.input_width / self.stride()
    }

    pub fn part_dim(&self) -> usize {
        self.feature_height() * self.hidden
    }

    pub fn fused_dim(&self) -> usize {
        self.global_fc_dim + self.part_dim()
    }

    /// Output channels of each backbone stage; the last stage emits `channels`.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| {
                if i + 1 == self.depth {
                    self.channels
                } else {
                    (self.base_width << i).min(self.max_width)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.depth > 10 {
            return fail(format!("model.depth must be in 1..=10, got {}", self.depth));
        }
        let stride = self.stride();
        if self.input_height == 0 || !self.input_height.is_multiple_of(stride) {
            return fail(format!(
                "model.input_height {} is not a positive multiple of the backbone stride {stride}",
                self.input_height
            ));
        }
        if self.input_width == 0 || !self.input_width.is_multiple_of(stride) {
            return fail(format!(
                "model.input_width {} is not a positive multiple of the backbone stride {stride}",
                self.input_width
            ));
        }
        if self.stage_convs == 0 {
            return fail("model.stage_convs must be positive".into());
        }
        if self.channels == 0 || self.base_width == 0 || self.max_width == 0 {
            return fail("model channel widths must be positive".into());
        }
        if self.hidden == 0 {
            return fail("model.hidden must be positive".into());
        }
        if self.lstm_layers == 0 {
            return fail("model.lstm_layers must be positive".into());
        }
        if self.global_fc_dim == 0 {
            return fail("model.global_fc_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!(
                "model.num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if !self.branches.any() {
            return fail("at least one branch must be enabled".into());
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON form; equal configs share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Field-by-field differences, one `name: ours != theirs` line each.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return Vec::new();
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} != {}", b.get(k).cloned().unwrap_or_default()))
            .collect()
    }
}
