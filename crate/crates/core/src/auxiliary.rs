//! Per-channel auxiliary statistics: average numerical rank, L1 norm and
//! seeded random scores, plus detection of near-zero ("unimportant")
//! filters.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ProbeSet;
use crate::model::{Model, Op, PruneBlock};
use crate::probe::accumulate_over_probe;
use crate::tensor::{Map2, Tensor3};
use crate::{Error, Result};

/// Threshold for a filter whose every parameter is treated as zero.
pub const UNIMPORTANT_THRESHOLD: f32 = 1e-30;

/// How small a singular value must be to not count towards the rank.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RankTolerance {
    #[default]
    /// `max(rows, cols) * sigma_max * f32::EPSILON`; maps are single
    /// precision, so their rounding floor is the `f32` epsilon.
    Default,
    /// Singular values `<= tol` are dropped.
    Absolute(f64),
    /// Singular values `<= tol * sigma_max` are dropped.
    Relative(f64),
}

impl RankTolerance {
    pub fn threshold(self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match self {
            RankTolerance::Default => rows.max(cols) as f64 * sigma_max * f32::EPSILON as f64,
            RankTolerance::Absolute(t) => t,
            RankTolerance::Relative(r) => r * sigma_max,
        }
    }

    pub fn describe(self) -> String {
        match self {
            RankTolerance::Default => "max(X,Y)*sigma_max*eps_f32".into(),
            RankTolerance::Absolute(t) => format!("absolute({t:e})"),
            RankTolerance::Relative(r) => format!("relative({r:e})"),
        }
    }
}


/// Singular values of a map, descending.
pub fn singular_values(map: Map2<'_>) -> Vec<f64> {
    if map.data.is_empty() {
        return Vec::new();
    }
    let m = DMatrix::from_row_iterator(map.rows, map.cols, map.data.iter().map(|&v| v as f64));
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank: the number of singular values above the tolerance.
pub fn matrix_rank(map: Map2<'_>, tol: RankTolerance) -> usize {
    let sv = singular_values(map);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    if sigma_max == 0.0 {
        return 0;
    }
    let t = tol.threshold(map.rows, map.cols, sigma_max);
    sv.iter().filter(|&&s| s > t).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    pub layer: usize,
    /// Mean rank per channel over the probe set; fractional in general.
    pub ranks: Vec<f64>,
    pub tolerance: RankTolerance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxKind {
    Rank,
    L1Norm,
    Random { seed: u64 },
}

impl AuxKind {
    pub fn name(self) -> &'static str {
        match self {
            AuxKind::Rank => "rank",
            AuxKind::L1Norm => "l1_norm",
            AuxKind::Random { .. } => "random",
        }
    }
}

impl FromStr for AuxKind {
    type Err = String;

    /// Parses `rank`, `l1_norm` (or `l1`), and `random` (seed 0).
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rank" => Ok(AuxKind::Rank),
            "l1" | "l1_norm" => Ok(AuxKind::L1Norm),
            "random" => Ok(AuxKind::Random { seed: 0 }),
            other => Err(format!("unknown auxiliary kind '{other}'")),
        }
    }
}

/// A per-channel statistic deciding which member of a similar pair goes.
/// Lower values are deleted first.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryScore {
    pub kind: AuxKind,
    pub layer: usize,
    pub values: Vec<f64>,
}

impl From<RankVector> for AuxiliaryScore {
    fn from(r: RankVector) -> Self {
        AuxiliaryScore {
            kind: AuxKind::Rank,
            layer: r.layer,
            values: r.ranks,
        }
    }
}

pub fn image_ranks(stack: &Tensor3, tol: RankTolerance) -> Vec<f64> {
    (0..stack.channels)
        .map(|c| matrix_rank(stack.map(c), tol) as f64)
        .collect()
}

pub fn image_l1(stack: &Tensor3) -> Vec<f64> {
    (0..stack.channels)
        .map(|c| stack.plane(c).iter().map(|v| v.abs() as f64).sum())
        .collect()
}

fn channels(model: &Model, block: &PruneBlock) -> Result<usize> {
    Ok(model.shapes()?[block.capture].channels)
}

pub fn avg_rank(
    model: &Model,
    block: &PruneBlock,
    probe: &ProbeSet,
    tol: RankTolerance,
) -> Result<RankVector> {
    let n = channels(model, block)?;
    let sums = accumulate_over_probe(model, block.capture, probe, n, |s| image_ranks(s, tol))?;
    let m = probe.len() as f64;
    Ok(RankVector {
        layer: block.conv,
        ranks: sums.into_iter().map(|s| s / m).collect(),
        tolerance: tol,
    })
}

pub fn l1_scores(model: &Model, block: &PruneBlock, probe: &ProbeSet) -> Result<AuxiliaryScore> {
    let n = channels(model, block)?;
    let sums = accumulate_over_probe(model, block.capture, probe, n, image_l1)?;
    let m = probe.len() as f64;
    Ok(AuxiliaryScore {
        kind: AuxKind::L1Norm,
        layer: block.conv,
        values: sums.into_iter().map(|s| s / m).collect(),
    })
}

/// Uniform `[0, 1)` scores, drawn once per layer from a generator seeded by
/// `(seed, layer)`.
pub fn random_scores(layer: usize, n: usize, seed: u64) -> AuxiliaryScore {
    let mixed = seed ^ (layer as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    AuxiliaryScore {
        kind: AuxKind::Random { seed },
        layer,
        values: (0..n).map(|_| rng.random::<f64>()).collect(),
    }
}

pub fn auxiliary_scores(
    model: &Model,
    block: &PruneBlock,
    probe: &ProbeSet,
    kind: AuxKind,
    tol: RankTolerance,
) -> Result<AuxiliaryScore> {
    match kind {
        AuxKind::Rank => avg_rank(model, block, probe, tol).map(Into::into),
        AuxKind::L1Norm => l1_scores(model, block, probe),
        AuxKind::Random { seed } => Ok(random_scores(block.conv, channels(model, block)?, seed)),
    }
}

/// Filters of one convolution whose parameters are all below threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimportantFilters {
    pub layer: usize,
    pub name: String,
    pub filters: usize,
    pub flagged: Vec<usize>,
}

impl UnimportantFilters {
    pub fn fraction(&self) -> f64 {
        if self.filters == 0 {
            0.0
        } else {
            self.flagged.len() as f64 / self.filters as f64
        }
    }
}

/// Flags every convolution filter whose weights (and bias entry, if any)
/// all have magnitude below `threshold`. One entry per conv layer.
pub fn detect_unimportant_filters(model: &Model, threshold: f32) -> Result<Vec<UnimportantFilters>> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Selection("threshold must be > 0".into()));
    }
    Ok(model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, layer)| match &layer.op {
            Op::Conv2D(c) | Op::DepthwiseConv2D(c) => {
                let flagged = (0..c.out_channels())
                    .filter(|&j| c.filter_params(j).all(|v| v.abs() < threshold))
                    .collect();
                Some(UnimportantFilters {
                    layer: i,
                    name: layer.name.clone(),
                    filters: c.out_channels(),
                    flagged,
                })
            }
            _ => None,
        })
        .collect())
}
