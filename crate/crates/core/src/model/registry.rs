//! Stable parameter names and their structural roles.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionBlock {
    SelfAttention,
    CrossAttention,
}

/// One of the four attention projection matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    pub fn short(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
        }
    }

    pub fn parse(s: &str) -> Option<Proj> {
        Proj::ALL.into_iter().find(|p| p.short().eq_ignore_ascii_case(s))
    }
}

/// Address of a single attention projection in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProjSite {
    pub stack: Stack,
    pub layer: usize,
    pub block: AttentionBlock,
    pub proj: Proj,
}

impl ProjSite {
    /// Registry prefix shared by the weight and bias of this projection.
    pub fn prefix(&self) -> String {
        let stack = match self.stack {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        };
        let block = match self.block {
            AttentionBlock::SelfAttention => "self_attn",
            AttentionBlock::CrossAttention => "cross_attn",
        };
        format!("{stack}.layer{}.{block}.{}", self.layer, self.proj.short())
    }
}

impl fmt::Display for ProjSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormSlot {
    SelfAttention,
    CrossAttention,
    FeedForward,
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    TokenEmbedding,
    Position(Stack),
    ProjectionWeight(ProjSite),
    ProjectionBias(ProjSite),
    FeedForwardWeight { stack: Stack, layer: usize },
    FeedForwardBias { stack: Stack, layer: usize },
    NormScale { stack: Stack, slot: NormSlot },
    NormBias { stack: Stack, slot: NormSlot },
    HeadBias,
}

/// Coarse classes used to select parameters for selective fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamClass {
    AttentionProjection(Proj),
    Bias,
    LayerNorm,
    Embedding,
    Head,
    Other,
}

impl ParamRole {
    pub fn is_bias(&self) -> bool {
        matches!(
            self,
            ParamRole::ProjectionBias(_)
                | ParamRole::FeedForwardBias { .. }
                | ParamRole::NormBias { .. }
                | ParamRole::HeadBias
        )
    }

    pub fn is_layer_norm(&self) -> bool {
        matches!(self, ParamRole::NormScale { .. } | ParamRole::NormBias { .. })
    }

    /// Layer norms that sit directly in front of an attention sub-block.
    pub fn is_attention_norm(&self) -> bool {
        match self {
            ParamRole::NormScale { slot, .. } | ParamRole::NormBias { slot, .. } => {
                matches!(slot, NormSlot::SelfAttention | NormSlot::CrossAttention)
            }
            _ => false,
        }
    }

    pub fn is_final_norm_bias(&self, stack: Stack) -> bool {
        *self
            == ParamRole::NormBias {
                stack,
                slot: NormSlot::Final,
            }
    }

    pub fn classes(&self) -> Vec<ParamClass> {
        let mut out = Vec::new();
        if let ParamRole::ProjectionWeight(site) = self {
            out.push(ParamClass::AttentionProjection(site.proj));
        }
        if self.is_bias() {
            out.push(ParamClass::Bias);
        }
        if self.is_layer_norm() {
            out.push(ParamClass::LayerNorm);
        }
        match self {
            ParamRole::TokenEmbedding | ParamRole::Position(_) => out.push(ParamClass::Embedding),
            ParamRole::HeadBias => out.push(ParamClass::Head),
            _ => {}
        }
        if out.is_empty() {
            out.push(ParamClass::Other);
        }
        out
    }
}
