use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Tape, Var};

/// Candidate operation on a cell edge.
///
/// Every entry maps `C` channels to `C` channels; stride 1 preserves the
/// spatial size and stride 2 halves it. Convolutions are bias-free
/// ReLU-Conv chains without normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    None,
    SkipConnect,
    #[serde(rename = "conv_1x1")]
    Conv1x1,
    #[serde(rename = "conv_3x3")]
    Conv3x3,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
}

/// Weight tensor of one op: a role suffix and its shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightSpec {
    pub role: &'static str,
    pub shape: Vec<usize>,
}

/// Analytic size of an op or network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub mult_adds: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { params: self.params + o.params, mult_adds: self.mult_adds + o.mult_adds }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::None,
        OpKind::SkipConnect,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::AvgPool3x3,
        OpKind::MaxPool3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Conv1x1 => "conv_1x1",
            OpKind::Conv3x3 => "conv_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::MaxPool3x3 => "max_pool_3x3",
        }
    }

    /// True for ops without trainable weights at stride 1.
    pub fn is_parameter_free(self) -> bool {
        matches!(self, OpKind::None | OpKind::SkipConnect | OpKind::AvgPool3x3 | OpKind::MaxPool3x3)
    }

    pub fn weight_specs(self, channels: usize, stride: usize) -> Vec<WeightSpec> {
        let c = channels;
        let w = |role, shape: [usize; 4]| WeightSpec { role, shape: shape.to_vec() };
        match self {
            OpKind::None | OpKind::AvgPool3x3 | OpKind::MaxPool3x3 => vec![],
            OpKind::SkipConnect if stride == 1 => vec![],
            OpKind::SkipConnect => vec![w("w", [c, c, 1, 1])],
            OpKind::Conv1x1 => vec![w("w", [c, c, 1, 1])],
            OpKind::Conv3x3 => vec![w("w", [c, c, 3, 3])],
            OpKind::SepConv3x3 | OpKind::DilConv3x3 => vec![w("dw", [c, 1, 3, 3]), w("pw", [c, c, 1, 1])],
            OpKind::SepConv5x5 | OpKind::DilConv5x5 => vec![w("dw", [c, 1, 5, 5]), w("pw", [c, c, 1, 1])],
        }
    }

    /// Applies the op to an NCHW value; `weights` follow [`OpKind::weight_specs`].
    pub fn apply(self, tape: &mut Tape, x: Var, weights: &[Var], stride: usize) -> Result<Var> {
        let channels = tape.shape(x).get(1).copied().unwrap_or(0);
        let expected = self.weight_specs(channels, stride).len();
        if weights.len() != expected {
            return Err(Error::dim(
                "op_apply",
                format!("{} expects {expected} weight tensors, got {}", self.name(), weights.len()),
            ));
        }
        let conv = |k: usize, dilation: usize, groups: usize, stride: usize| Conv2dSpec {
            stride,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups,
        };
        match self {
            OpKind::None => {
                let s = tape.shape(x).to_vec();
                let (h, w) = (s[2].div_ceil(stride), s[3].div_ceil(stride));
                Ok(tape.zeros(&[s[0], s[1], h, w]))
            }
            OpKind::SkipConnect if stride == 1 => Ok(x),
            OpKind::SkipConnect | OpKind::Conv1x1 => {
                let r = tape.relu(x);
                tape.conv2d(r, weights[0], conv(1, 1, 1, stride))
            }
            OpKind::Conv3x3 => {
                let r = tape.relu(x);
                tape.conv2d(r, weights[0], conv(3, 1, 1, stride))
            }
            OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let (k, dil) = match self {
                    OpKind::SepConv3x3 => (3, 1),
                    OpKind::SepConv5x5 => (5, 1),
                    OpKind::DilConv3x3 => (3, 2),
                    _ => (5, 2),
                };
                let r = tape.relu(x);
                let d = tape.conv2d(r, weights[0], conv(k, dil, channels, stride))?;
                tape.conv2d(d, weights[1], conv(1, 1, 1, 1))
            }
            OpKind::AvgPool3x3 => tape.avg_pool2d(x, 3, stride, 1),
            OpKind::MaxPool3x3 => tape.max_pool2d(x, 3, stride, 1),
        }
    }

    /// Parameter and multiply-add counts for `channels -> channels` on an
    /// `h x w` input. Pooling, skip and zero cost nothing at stride 1.
    pub fn cost(self, channels: usize, h: usize, w: usize, stride: usize) -> Cost {
        let out = (h.div_ceil(stride) * w.div_ceil(stride)) as u64;
        let c = channels as u64;
        match self {
            OpKind::None | OpKind::AvgPool3x3 | OpKind::MaxPool3x3 => Cost::default(),
            OpKind::SkipConnect if stride == 1 => Cost::default(),
            OpKind::SkipConnect | OpKind::Conv1x1 => Cost { params: c * c, mult_adds: c * c * out },
            OpKind::Conv3x3 => Cost { params: c * c * 9, mult_adds: c * c * 9 * out },
            OpKind::SepConv3x3 | OpKind::DilConv3x3 => {
                Cost { params: c * 9 + c * c, mult_adds: (c * 9 + c * c) * out }
            }
            OpKind::SepConv5x5 | OpKind::DilConv5x5 => {
                Cost { params: c * 25 + c * c, mult_adds: (c * 25 + c * c) * out }
            }
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Catalog(s.to_string()))
    }
}
