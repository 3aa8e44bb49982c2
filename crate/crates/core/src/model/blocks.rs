//! Conv + BatchNorm + activation grouping.
//!
//! Pruning decisions are made on the final output of each block, so the
//! capture point of a block is its last absorbed layer.

use super::{LayerKind, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockRole {
    /// Ordinary convolution whose output does not reach a residual sum.
    Plain,
    /// First convolution inside a residual block; prunable without touching
    /// the shortcut.
    ResidualFirst,
    /// Convolution whose block output feeds a residual `Add` directly
    /// (second conv of a residual block, projection shortcut, bottleneck
    /// projection).
    ResidualOutput,
    Depthwise,
}

impl BlockRole {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockRole::Plain => "plain",
            BlockRole::ResidualFirst => "residual-first",
            BlockRole::ResidualOutput => "residual-output",
            BlockRole::Depthwise => "depthwise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneBlock {
    pub conv: usize,
    pub batch_norm: Option<usize>,
    pub activation: Option<usize>,
    /// Index of the last layer in the block; its output is analyzed.
    pub capture: usize,
    pub role: BlockRole,
}

impl PruneBlock {
    pub fn layers(&self) -> impl Iterator<Item = usize> {
        [Some(self.conv), self.batch_norm, self.activation]
            .into_iter()
            .flatten()
    }
}

/// Assigns one block to every convolution, absorbing an immediately
/// following BatchNorm and then ReLU when they are the sole consumers.
pub fn identify_prune_blocks(model: &Model) -> Vec<PruneBlock> {
    let consumers = model.consumers();
    let sole = |i: usize, kind: LayerKind| -> Option<usize> {
        match consumers[i].as_slice() {
            [c] if model.layers[*c].kind() == kind => Some(*c),
            _ => None,
        }
    };

    let mut blocks: Vec<PruneBlock> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind().is_conv())
        .map(|(i, l)| {
            let batch_norm = sole(i, LayerKind::BatchNorm);
            let activation = sole(batch_norm.unwrap_or(i), LayerKind::ReLU);
            let capture = activation.or(batch_norm).unwrap_or(i);
            let role = if l.kind() == LayerKind::DepthwiseConv2D {
                BlockRole::Depthwise
            } else if consumers[capture]
                .iter()
                .any(|&c| model.layers[c].kind() == LayerKind::Add)
            {
                BlockRole::ResidualOutput
            } else {
                BlockRole::Plain
            };
            PruneBlock {
                conv: i,
                batch_norm,
                activation,
                capture,
                role,
            }
        })
        .collect();

    // A plain Conv2D block is the first conv of a residual block when its
    // output feeds a single Conv2D block that closes an Add, and the other
    // Add operand derives from this block's own input (identity or
    // projection shortcut).
    let by_conv: std::collections::HashMap<usize, PruneBlock> =
        blocks.iter().map(|b| (b.conv, *b)).collect();
    for b in blocks.iter_mut() {
        if b.role != BlockRole::Plain || model.layers[b.conv].kind() != LayerKind::Conv2D {
            continue;
        }
        let Some(&next) = consumers[b.capture].first() else {
            continue;
        };
        if consumers[b.capture].len() != 1 || model.layers[next].kind() != LayerKind::Conv2D {
            continue;
        }
        let second = by_conv[&next];
        let block_input = model.layers[b.conv].inputs.first().copied();
        let closes = consumers[second.capture].iter().any(|&add| {
            model.layers[add].kind() == LayerKind::Add
                && model.layers[add].inputs.iter().any(|&other| {
                    other != second.capture
                        && (Some(other) == block_input
                            || by_conv.values().any(|s| {
                                s.capture == other
                                    && model.layers[s.conv].inputs.first().copied() == block_input
                            }))
                })
        });
        if closes {
            b.role = BlockRole::ResidualFirst;
        }
    }
    blocks
}
