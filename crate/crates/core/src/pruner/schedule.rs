//! Layer-by-layer pruning runs.
//!
//! Blocks are pruned in topological order. Each step re-captures the
//! scheduled block on the current (already partially pruned) model,
//! recomputes similarity and auxiliary statistics, selects
//! `floor(ratio * N)` filters and rewires. Fine-tuning between steps is a
//! hook; the default does nothing.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::{prune_block_with_summary, select_baseline, select_delete_set, DeleteSet, Selector};
use crate::auxiliary::{image_l1, image_ranks, random_scores, AuxKind, RankTolerance};
use crate::dataset::{LabeledImage, ProbeSet};
use crate::inference::evaluate_accuracy;
use crate::metrics::{count_params, pruning_rate, BnParamCount, CostBreakdown, CostConvention};
use crate::model::{identify_prune_blocks, BlockRole, Model, PruneBlock};
use crate::probe::accumulate_over_probe;
use crate::similarity::{image_pair_scores, pair_count, MeasureKind, SimilarityMatrix, SimilarityMeasure};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    /// Name of the block's convolution layer.
    pub layer: String,
    pub ratio: f64,
}

/// Role-based block selection: `ratios[i]` applies to the `skip + i`-th
/// block with the given role, in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSelection {
    pub role: String,
    #[serde(default)]
    pub skip: usize,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSchedule {
    pub steps: Vec<ScheduleStep>,
    pub blocks: Option<BlockSelection>,
    pub measure: SimilarityMeasure,
    pub auxiliary: AuxKind,
    pub selector: Selector,
    pub rank_tolerance: RankTolerance,
    pub probe_m: usize,
    pub probe_seed: u64,
    /// Seed for the random selector and random auxiliary scores.
    pub seed: u64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            blocks: None,
            measure: SimilarityMeasure::ssim(),
            auxiliary: AuxKind::Rank,
            selector: Selector::Qsfm,
            rank_tolerance: RankTolerance::Default,
            probe_m: 64,
            probe_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    #[serde(default)]
    measure: Option<String>,
    #[serde(default)]
    auxiliary: Option<String>,
    #[serde(default)]
    selector: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    probe: Option<ProbeSection>,
    #[serde(default)]
    steps: Vec<ScheduleStep>,
    #[serde(default)]
    blocks: Option<BlockSelection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeSection {
    m: Option<usize>,
    seed: Option<u64>,
}

impl PruneSchedule {
    /// Parses the TOML schedule format.
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: ScheduleFile = toml::from_str(text).map_err(|e| Error::Schedule(e.to_string()))?;
        let mut s = PruneSchedule::default();
        if let Some(m) = f.measure {
            s.measure = SimilarityMeasure::of_kind(m.parse().map_err(Error::Schedule)?);
        }
        s.seed = f.seed.unwrap_or(0);
        if let Some(a) = f.auxiliary {
            s.auxiliary = a.parse().map_err(Error::Schedule)?;
        }
        if let Some(sel) = f.selector {
            s.selector = sel.parse().map_err(Error::Schedule)?;
        }
        if let Some(p) = f.probe {
            s.probe_m = p.m.unwrap_or(s.probe_m);
            s.probe_seed = p.seed.unwrap_or(s.probe_seed);
        }
        s.steps = f.steps;
        s.blocks = f.blocks;
        if !s.steps.is_empty() && s.blocks.is_some() {
            return Err(Error::Schedule(
                "use either [[steps]] or [blocks], not both".into(),
            ));
        }
        s.set_seed(s.seed);
        Ok(s)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let AuxKind::Random { .. } = self.auxiliary {
            self.auxiliary = AuxKind::Random { seed };
        }
    }

    /// Auxiliary statistic actually used by the selector.
    pub fn effective_aux(&self) -> AuxKind {
        match self.selector {
            Selector::Qsfm => self.auxiliary,
            Selector::RankOnly => AuxKind::Rank,
            Selector::L1Only => AuxKind::L1Norm,
            Selector::Random => AuxKind::Random { seed: self.seed },
        }
    }

    /// Concrete `(block, ratio)` list for `model`, checked for order,
    /// ratio range and prunability.
    pub fn resolve(&self, model: &Model) -> Result<Vec<(PruneBlock, f64)>> {
        let blocks = identify_prune_blocks(model);
        let mut out = Vec::new();
        if let Some(sel) = &self.blocks {
            let role = parse_role(&sel.role)?;
            let matching: Vec<&PruneBlock> = blocks
                .iter()
                .filter(|b| role.is_none_or(|r| b.role == r))
                .skip(sel.skip)
                .collect();
            if matching.len() < sel.ratios.len() {
                return Err(Error::Schedule(format!(
                    "schedule lists {} ratios but model has only {} '{}' blocks after skipping {}",
                    sel.ratios.len(),
                    matching.len(),
                    sel.role,
                    sel.skip
                )));
            }
            out.extend(matching.into_iter().zip(sel.ratios.iter()).map(|(b, r)| (*b, *r)));
        }
        for step in &self.steps {
            let idx = model.layer_index(&step.layer).ok_or_else(|| {
                Error::Schedule(format!("no layer named '{}'", step.layer))
            })?;
            let block = blocks.iter().find(|b| b.conv == idx).ok_or_else(|| {
                Error::Schedule(format!("layer '{}' is not a convolution", step.layer))
            })?;
            out.push((*block, step.ratio));
        }

        for (i, (block, ratio)) in out.iter().enumerate() {
            if !(0.0..1.0).contains(ratio) {
                return Err(Error::Schedule(format!(
                    "ratio {ratio} for layer {} must lie in [0, 1)",
                    model.layers[block.conv].name
                )));
            }
            if i > 0 && out[i - 1].0.conv >= block.conv {
                return Err(Error::Schedule(
                    "blocks must be listed once each, in topological order".into(),
                ));
            }
            if block.role == BlockRole::ResidualOutput {
                return Err(Error::Schedule(format!(
                    "layer {} feeds a residual Add; only the first convolution of a \
                     residual block may be pruned",
                    model.layers[block.conv].name
                )));
            }
            super::plan_channel_deletion(model, block)?;
        }
        Ok(out)
    }
}

fn parse_role(s: &str) -> Result<Option<BlockRole>> {
    Ok(Some(match s {
        "all" => return Ok(None),
        "plain" => BlockRole::Plain,
        "residual-first" => BlockRole::ResidualFirst,
        "depthwise" => BlockRole::Depthwise,
        other => {
            return Err(Error::Schedule(format!(
                "unknown block role '{other}' (all, plain, residual-first, depthwise)"
            )))
        }
    }))
}

/// Post-step retraining hook.
pub trait FineTune {
    fn fine_tune(&mut self, step: usize, model: Model) -> Result<Model>;
}

/// Leaves the pruned model as is.
pub struct NoFineTune;

impl FineTune for NoFineTune {
    fn fine_tune(&mut self, _step: usize, model: Model) -> Result<Model> {
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportHeader {
    pub model: String,
    pub measure: String,
    pub auxiliary: String,
    pub selector: String,
    pub rank_tolerance: String,
    pub probe_m: usize,
    pub probe_seed: u64,
    pub seed: u64,
    pub convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    /// 0 is the unpruned baseline.
    pub step: usize,
    pub layer: Option<usize>,
    pub layer_name: Option<String>,
    pub channels_before: Option<usize>,
    pub channels_after: Option<usize>,
    pub flops: u64,
    pub params: u64,
    pub flops_pr: f64,
    pub params_pr: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub header: ReportHeader,
    pub rows: Vec<ReportRow>,
}

impl PruneReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,layer,layer_name,channels_before,channels_after,flops,params,flops_pr,params_pr,top1,top5\n",
        );
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.4},{:.4},{},{}",
                r.step,
                opt(r.layer.map(|v| v.to_string())),
                opt(r.layer_name.clone()),
                opt(r.channels_before.map(|v| v.to_string())),
                opt(r.channels_after.map(|v| v.to_string())),
                r.flops,
                r.params,
                r.flops_pr,
                r.params_pr,
                opt(r.top1.map(|v| format!("{v:.6}"))),
                opt(r.top5.map(|v| format!("{v:.6}"))),
            )
            .expect("string write");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        writeln!(out, "model: {}", h.model).unwrap();
        writeln!(
            out,
            "selector: {}  measure: {}  auxiliary: {}  rank tolerance: {}",
            h.selector, h.measure, h.auxiliary, h.rank_tolerance
        )
        .unwrap();
        writeln!(
            out,
            "probe: M={} seed={}  seed: {}  cost convention: {}",
            h.probe_m, h.probe_seed, h.seed, h.convention
        )
        .unwrap();
        writeln!(
            out,
            "{:>4}  {:<24} {:>9} {:>14} {:>8} {:>12} {:>8} {:>8} {:>8}",
            "step", "layer", "channels", "flops", "PR%", "params", "PR%", "top1", "top5"
        )
        .unwrap();
        for r in &self.rows {
            let ch = match (r.channels_before, r.channels_after) {
                (Some(b), Some(a)) => format!("{b}->{a}"),
                _ => "-".into(),
            };
            let acc = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.2}", v * 100.0));
            writeln!(
                out,
                "{:>4}  {:<24} {:>9} {:>14} {:>8.2} {:>12} {:>8.2} {:>8} {:>8}",
                r.step,
                r.layer_name.as_deref().unwrap_or("(baseline)"),
                ch,
                r.flops,
                r.flops_pr,
                r.params,
                r.params_pr,
                acc(r.top1),
                acc(r.top5),
            )
            .unwrap();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub model: Model,
    pub report: PruneReport,
    pub delete_sets: Vec<DeleteSet>,
}

pub fn run_schedule(
    model: &Model,
    schedule: &PruneSchedule,
    probe: &ProbeSet,
    eval_data: Option<&[LabeledImage]>,
    convention: CostConvention,
) -> Result<ScheduleOutcome> {
    run_schedule_with(model, schedule, probe, eval_data, convention, &mut NoFineTune)
}

pub fn run_schedule_with(
    model: &Model,
    schedule: &PruneSchedule,
    probe: &ProbeSet,
    eval_data: Option<&[LabeledImage]>,
    convention: CostConvention,
    hook: &mut dyn FineTune,
) -> Result<ScheduleOutcome> {
    schedule.measure.validate()?;
    let plan = schedule.resolve(model)?;
    let aux_kind = schedule.effective_aux();
    let header = ReportHeader {
        model: model.name.clone(),
        measure: schedule.measure.kind.as_str().into(),
        auxiliary: aux_kind.name().into(),
        selector: schedule.selector.as_str().into(),
        rank_tolerance: schedule.rank_tolerance.describe(),
        probe_m: probe.len(),
        probe_seed: probe.seed,
        seed: schedule.seed,
        convention: convention.id(),
    };

    let baseline = count_params(model, convention)?;
    let accuracy = |m: &Model| -> Result<(Option<f64>, Option<f64>)> {
        match eval_data {
            Some(d) => evaluate_accuracy(m, d).map(|a| (Some(a.top1), Some(a.top5))),
            None => Ok((None, None)),
        }
    };
    let (top1, top5) = accuracy(model)?;
    let mut rows = vec![ReportRow {
        step: 0,
        layer: None,
        layer_name: None,
        channels_before: None,
        channels_after: None,
        flops: baseline.flops,
        params: baseline.params,
        flops_pr: 0.0,
        params_pr: 0.0,
        top1,
        top5,
    }];

    let mut current = model.clone();
    let mut previous: CostBreakdown = baseline.clone();
    let mut delete_sets = Vec::with_capacity(plan.len());
    for (step, (block, ratio)) in plan.iter().enumerate() {
        let step = step + 1;
        // Layer indices are stable under pruning, but roles and captures
        // are re-derived from the current model.
        let block = identify_prune_blocks(&current)
            .into_iter()
            .find(|b| b.conv == block.conv)
            .ok_or_else(|| Error::Schedule(format!("block at layer {} vanished", block.conv)))?;
        let channels = current.shapes()?[block.capture].channels;
        let n_delete = (ratio * channels as f64).floor() as usize;
        let name = current.layers[block.conv].name.clone();

        let del = select_for_block(&current, &block, schedule, aux_kind, probe, n_delete)?;
        let (pruned, summary) = prune_block_with_summary(&current, &block, &del)?;
        let pruned = hook.fine_tune(step, pruned)?;

        let costs = count_params(&pruned, convention)?;
        if convention.bn_params == BnParamCount::All
            && previous.params - costs.params != summary.removed_elements
        {
            return Err(Error::Prune(format!(
                "parameter accounting mismatch at step {step}: counted {} removed, rewiring removed {}",
                previous.params - costs.params,
                summary.removed_elements
            )));
        }
        if costs.flops > previous.flops || costs.params > previous.params {
            return Err(Error::Prune(format!("costs increased at step {step}")));
        }
        let (flops_pr, params_pr) = pruning_rate(&baseline, &costs)?;
        let (top1, top5) = accuracy(&pruned)?;
        info!(
            "step {step}: {name} {channels}->{} flops {} ({flops_pr:.2}%) params {} ({params_pr:.2}%)",
            channels - del.len(),
            costs.flops,
            costs.params
        );
        rows.push(ReportRow {
            step,
            layer: Some(block.conv),
            layer_name: Some(name),
            channels_before: Some(channels),
            channels_after: Some(channels - del.len()),
            flops: costs.flops,
            params: costs.params,
            flops_pr,
            params_pr,
            top1,
            top5,
        });
        delete_sets.push(del);
        previous = costs;
        current = pruned;
    }
    Ok(ScheduleOutcome {
        model: current,
        report: PruneReport { header, rows },
        delete_sets,
    })
}

/// Captures the block once per probe image, derives similarity and/or
/// auxiliary statistics from the same activation, and selects.
fn select_for_block(
    model: &Model,
    block: &PruneBlock,
    schedule: &PruneSchedule,
    aux_kind: AuxKind,
    probe: &ProbeSet,
    n_delete: usize,
) -> Result<DeleteSet> {
    let n = model.shapes()?[block.capture].channels;
    let need_similarity = schedule.selector == Selector::Qsfm;
    let pairs = if need_similarity { pair_count(n) } else { 0 };
    let aux_width = match aux_kind {
        AuxKind::Random { .. } => 0,
        _ => n,
    };
    let m = probe.len() as f64;

    let sums = if pairs + aux_width > 0 && n_delete > 0 {
        let measure = schedule.measure;
        let tol = schedule.rank_tolerance;
        accumulate_over_probe(model, block.capture, probe, pairs + aux_width, |stack| {
            let mut row = if need_similarity {
                image_pair_scores(stack, &measure)
            } else {
                Vec::new()
            };
            match aux_kind {
                AuxKind::Rank => row.extend(image_ranks(stack, tol)),
                AuxKind::L1Norm => row.extend(image_l1(stack)),
                AuxKind::Random { .. } => {}
            }
            row
        })?
        .into_iter()
        .map(|s| s / m)
        .collect()
    } else {
        vec![0.0; pairs + aux_width]
    };
    let aux: Vec<f64> = match aux_kind {
        AuxKind::Random { seed } => random_scores(block.conv, n, seed).values,
        _ => sums[pairs..].to_vec(),
    };

    if need_similarity {
        let sim = SimilarityMatrix::from_pairs(block.conv, n, &sums[..pairs], schedule.measure, probe.len());
        select_delete_set(&sim, &aux, n_delete)
    } else {
        select_baseline(block.conv, &aux, n_delete)
    }
}

impl MeasureKind {
    pub fn label(self) -> &'static str {
        match self {
            MeasureKind::Ssim => "QSFM-SSIM",
            MeasureKind::NegEuclidean => "QSFM-PSNR",
        }
    }
}
