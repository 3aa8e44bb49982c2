//! FLOPs and parameter accounting.
//!
//! Conventions:
//! - Conv2D: `mac * N_out * N_in * K^2 * X_out * Y_out` FLOPs.
//! - DepthwiseConv2D: `mac * N * K^2 * X_out * Y_out`.
//! - Dense: `mac * in * out`.
//! - BatchNorm: `2 * C * X * Y` (scale and shift).
//! - Pooling, activations, additions, softmax: not counted.
//!
//! `mac` is 1 when a multiply-accumulate counts as one operation, 2 when
//! multiply and add are counted separately.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{Model, Op};
use crate::tensor::Shape;
use crate::{Error, Result};

/// ResNet-56 reference figures used to pick the MAC convention.
pub const RESNET56_REFERENCE_FLOPS: f64 = 126.55e6;
pub const RESNET56_REFERENCE_PARAMS: f64 = 0.86e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnParamCount {
    /// Scale, shift, moving mean and moving variance.
    All,
    /// Scale and shift only.
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConvention {
    pub mac_factor: u64,
    pub bn_params: BnParamCount,
}

impl Default for CostConvention {
    /// One FLOP per multiply-accumulate: the factor that reproduces the
    /// reference ResNet-56 figure (see [`calibrate_mac_factor`]).
    fn default() -> Self {
        Self {
            mac_factor: 1,
            bn_params: BnParamCount::All,
        }
    }
}

impl CostConvention {
    pub fn with_mac_factor(mac_factor: u64) -> Self {
        Self {
            mac_factor,
            ..Self::default()
        }
    }

    pub fn id(&self) -> String {
        format!(
            "mac{}-bn{}",
            self.mac_factor,
            match self.bn_params {
                BnParamCount::All => 4,
                BnParamCount::Trainable => 2,
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub layers: Vec<LayerCost>,
    pub flops: u64,
    pub params: u64,
    pub convention: CostConvention,
}

/// Parameters and FLOPs of every layer for a given input extent.
pub fn count_costs(model: &Model, input: Shape, convention: CostConvention) -> Result<CostBreakdown> {
    let mut m = model.clone();
    m.input = input;
    let shapes = m.shapes()?;
    let mac = convention.mac_factor;
    let layers: Vec<LayerCost> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let out = shapes[i];
            let spatial = (out.height * out.width) as u64;
            let (flops, params) = match &layer.op {
                Op::Conv2D(c) => {
                    let w = c.weight.numel() as u64;
                    let b = c.bias.as_ref().map_or(0, |b| b.numel() as u64);
                    (mac * w * spatial, w + b)
                }
                Op::DepthwiseConv2D(c) => {
                    let w = c.weight.numel() as u64;
                    let b = c.bias.as_ref().map_or(0, |b| b.numel() as u64);
                    (mac * w * spatial, w + b)
                }
                Op::Dense(d) => {
                    let w = d.weight.numel() as u64;
                    let b = d.bias.as_ref().map_or(0, |b| b.numel() as u64);
                    (mac * w, w + b)
                }
                Op::BatchNorm(bn) => {
                    let ch = bn.channels() as u64;
                    let per = match convention.bn_params {
                        BnParamCount::All => 4,
                        BnParamCount::Trainable => 2,
                    };
                    (2 * ch * spatial, per * ch)
                }
                _ => (0, 0),
            };
            LayerCost {
                layer: i,
                flops,
                params,
            }
        })
        .collect();
    Ok(CostBreakdown {
        flops: layers.iter().map(|l| l.flops).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
        convention,
    })
}

pub fn count_params(model: &Model, convention: CostConvention) -> Result<CostBreakdown> {
    count_costs(model, model.input, convention)
}

pub fn count_flops(model: &Model, input: Shape, convention: CostConvention) -> Result<CostBreakdown> {
    count_costs(model, input, convention)
}

/// Percentage reduction `(before - after) / before * 100` of FLOPs and
/// parameters.
pub fn pruning_rate(before: &CostBreakdown, after: &CostBreakdown) -> Result<(f64, f64)> {
    if before.flops == 0 || before.params == 0 {
        return Err(Error::Metrics("pruning rate needs a nonzero baseline".into()));
    }
    let pr = |b: u64, a: u64| (b as f64 - a as f64) / b as f64 * 100.0;
    Ok((pr(before.flops, after.flops), pr(before.params, after.params)))
}

/// Picks the MAC factor (1 or 2) whose FLOP count for `model` lies within
/// `tolerance` (relative) of `reference`. Returns `None` if neither does.
pub fn calibrate_mac_factor(model: &Model, reference: f64, tolerance: f64) -> Result<Option<u64>> {
    for factor in [1, 2] {
        let c = count_costs(model, model.input, CostConvention::with_mac_factor(factor))?;
        if ((c.flops as f64 - reference) / reference).abs() <= tolerance {
            return Ok(Some(factor));
        }
    }
    Ok(None)
}

/// Per-layer text table (layers with zero cost are skipped).
pub fn render_breakdown(model: &Model, costs: &CostBreakdown) -> String {
    let mut out = String::new();
    writeln!(out, "{:<6} {:<28} {:>14} {:>12}", "layer", "name", "flops", "params").unwrap();
    for l in costs.layers.iter().filter(|l| l.flops > 0 || l.params > 0) {
        writeln!(
            out,
            "{:<6} {:<28} {:>14} {:>12}",
            l.layer, model.layers[l.layer].name, l.flops, l.params
        )
        .unwrap();
    }
    writeln!(
        out,
        "total  ({:<26}) {:>14} {:>12}",
        costs.convention.id(),
        costs.flops,
        costs.params
    )
    .unwrap();
    out
}
