//! Structural surgery: removing output channels and every slice that
//! consumes them.
//!
//! Channels are deleted at their *origin*, the convolution that produces
//! them. For a regular convolution that is the block's own conv. For a
//! depthwise convolution the channels are shared 1:1 with its input, so the
//! origin is the preceding convolution (the bottleneck expansion), found by
//! walking back through channel-wise layers.
//!
//! From the origin, deletion propagates forward through channel-wise layers
//! (BatchNorm, activations, pooling, depthwise convs) and stops at the first
//! consumer that mixes channels (Conv2D input slices, Dense input features).
//! A residual `Add` is a hard boundary: deleting channels on one operand
//! would break the sum, so any plan that reaches one is rejected.

use std::collections::{BTreeSet, VecDeque};

use super::DeleteSet;
use crate::model::{validate, BlockRole, LayerKind, Model, Op, PruneBlock};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Edit {
    /// Drop filters (and bias entries) of the origin convolution.
    OutputFilters(usize),
    BatchNorm(usize),
    Depthwise(usize),
    /// Drop input-channel slices of every filter.
    ConvInputs(usize),
    /// Drop `group` consecutive input features per channel.
    DenseInputs { layer: usize, group: usize },
}

/// Layers touched by deleting channels of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    pub origin: usize,
    edits: Vec<Edit>,
}

impl ChannelPlan {
    pub fn touched_layers(&self) -> Vec<usize> {
        self.edits
            .iter()
            .map(|e| match *e {
                Edit::OutputFilters(l)
                | Edit::BatchNorm(l)
                | Edit::Depthwise(l)
                | Edit::ConvInputs(l)
                | Edit::DenseInputs { layer: l, .. } => l,
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewireSummary {
    pub origin: usize,
    pub touched_layers: Vec<usize>,
    /// Stored tensor elements removed across all touched layers.
    pub removed_elements: u64,
}

fn origin_of(model: &Model, block: &PruneBlock) -> Result<usize> {
    let conv = &model.layers[block.conv];
    match conv.kind() {
        LayerKind::Conv2D => Ok(block.conv),
        LayerKind::DepthwiseConv2D => {
            let mut cur = block.conv;
            loop {
                let layer = &model.layers[cur];
                let Some(&prev) = layer.inputs.first() else {
                    return Err(Error::Prune(format!(
                        "depthwise layer {} ({}) takes its channels from the model input",
                        block.conv, conv.name
                    )));
                };
                let p = &model.layers[prev];
                match p.kind() {
                    LayerKind::Conv2D => return Ok(prev),
                    LayerKind::BatchNorm
                    | LayerKind::ReLU
                    | LayerKind::AvgPool
                    | LayerKind::MaxPool
                    | LayerKind::DepthwiseConv2D => cur = prev,
                    other => {
                        return Err(Error::Prune(format!(
                            "depthwise layer {} ({}) is fed through {other} layer {prev} ({}); \
                             its channels have no single producing convolution",
                            block.conv, conv.name, p.name
                        )))
                    }
                }
            }
        }
        other => Err(Error::Prune(format!(
            "layer {} ({}) is a {other}, not a convolution",
            block.conv, conv.name
        ))),
    }
}

/// Works out every edit needed to delete channels of `block`, without
/// touching the model. Fails if the deletion would reach a residual `Add`
/// or the model output.
pub fn plan_channel_deletion(model: &Model, block: &PruneBlock) -> Result<ChannelPlan> {
    if block.conv >= model.layers.len() {
        return Err(Error::Prune(format!("no layer {}", block.conv)));
    }
    let origin = origin_of(model, block)?;
    let shapes = model.shapes()?;
    let consumers = model.consumers();
    let output = model.output_index();
    if origin == output {
        return Err(Error::Prune("cannot delete channels of the model output".into()));
    }

    let mut edits = BTreeSet::new();
    edits.insert(Edit::OutputFilters(origin));
    // (layer, flattened group size once a Flatten has been crossed)
    let mut queue: VecDeque<(usize, Option<usize>)> =
        consumers[origin].iter().map(|&c| (c, None)).collect();
    let mut seen = BTreeSet::new();
    while let Some((i, group)) = queue.pop_front() {
        if !seen.insert(i) {
            continue;
        }
        let layer = &model.layers[i];
        let boundary = |why: &str| {
            Error::Prune(format!(
                "deleting channels of layer {origin} ({}) would reach {why} at layer {i} ({})",
                model.layers[origin].name, layer.name
            ))
        };
        let mut forward = true;
        match (layer.kind(), group) {
            (LayerKind::Add, _) => {
                let msg = if block.role == BlockRole::ResidualOutput {
                    "a residual Add (only the first convolution of a residual block may be pruned)"
                } else {
                    "a residual Add"
                };
                return Err(boundary(msg));
            }
            (LayerKind::BatchNorm, None) => {
                edits.insert(Edit::BatchNorm(i));
            }
            (LayerKind::ReLU | LayerKind::AvgPool | LayerKind::MaxPool, None) => {}
            (LayerKind::DepthwiseConv2D, None) => {
                edits.insert(Edit::Depthwise(i));
            }
            (LayerKind::Conv2D, None) => {
                edits.insert(Edit::ConvInputs(i));
                forward = false;
            }
            (LayerKind::Flatten, None) => {
                let input = shapes[layer.inputs[0]];
                for &c in &consumers[i] {
                    queue.push_back((c, Some(input.height * input.width)));
                }
                forward = false;
            }
            (LayerKind::Dense, g) => {
                let input = shapes[layer.inputs[0]];
                let group = g.unwrap_or(input.height * input.width);
                edits.insert(Edit::DenseInputs { layer: i, group });
                forward = false;
            }
            (kind, _) => return Err(boundary(&format!("an unsupported {kind} consumer"))),
        }
        if forward {
            if i == output {
                return Err(boundary("the model output"));
            }
            for &c in &consumers[i] {
                queue.push_back((c, group));
            }
        }
    }
    Ok(ChannelPlan {
        origin,
        edits: edits.into_iter().collect(),
    })
}

/// Returns a new model with `del`'s filters removed from `block` and all
/// dependent slices rewired.
pub fn prune_block(model: &Model, block: &PruneBlock, del: &DeleteSet) -> Result<Model> {
    prune_block_with_summary(model, block, del).map(|(m, _)| m)
}

pub fn prune_block_with_summary(
    model: &Model,
    block: &PruneBlock,
    del: &DeleteSet,
) -> Result<(Model, RewireSummary)> {
    if del.layer != block.conv {
        return Err(Error::Prune(format!(
            "delete set targets layer {}, block convolution is layer {}",
            del.layer, block.conv
        )));
    }
    let plan = plan_channel_deletion(model, block)?;
    let channels = model.layers[plan.origin]
        .op
        .conv()
        .map(|c| c.out_channels())
        .unwrap_or(0);
    if del.channels != channels {
        return Err(Error::Prune(format!(
            "delete set was built for {} channels, layer has {channels}",
            del.channels
        )));
    }
    del.check()?;

    let mut out = model.clone();
    let before: u64 = tensor_elements(model, &plan.touched_layers());
    let drop = &del.indices;
    if !drop.is_empty() {
        for edit in &plan.edits {
            match *edit {
                Edit::OutputFilters(l) | Edit::Depthwise(l) => {
                    if let Op::Conv2D(c) | Op::DepthwiseConv2D(c) = &mut out.layers[l].op {
                        c.weight = c.weight.remove_leading(drop);
                        if let Some(b) = &mut c.bias {
                            *b = b.remove_leading(drop);
                        }
                    }
                }
                Edit::BatchNorm(l) => {
                    if let Op::BatchNorm(bn) = &mut out.layers[l].op {
                        bn.scale = bn.scale.remove_leading(drop);
                        bn.shift = bn.shift.remove_leading(drop);
                        bn.mean = bn.mean.remove_leading(drop);
                        bn.variance = bn.variance.remove_leading(drop);
                    }
                }
                Edit::ConvInputs(l) => {
                    if let Op::Conv2D(c) = &mut out.layers[l].op {
                        c.weight = c.weight.remove_second(drop, 1);
                    }
                }
                Edit::DenseInputs { layer, group } => {
                    if let Op::Dense(d) = &mut out.layers[layer].op {
                        d.weight = d.weight.remove_second(drop, group);
                    }
                }
            }
        }
    }
    let after: u64 = tensor_elements(&out, &plan.touched_layers());

    let violations = validate(&out);
    if !violations.is_empty() {
        return Err(Error::Prune(format!(
            "rewired model is invalid: {}",
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok((
        out,
        RewireSummary {
            origin: plan.origin,
            touched_layers: plan.touched_layers(),
            removed_elements: before - after,
        },
    ))
}

fn tensor_elements(model: &Model, layers: &[usize]) -> u64 {
    layers
        .iter()
        .flat_map(|&l| model.layers[l].op.tensors())
        .map(|(_, t)| t.numel() as u64)
        .sum()
}
