//! Probe-set reductions over captured activations.

use rayon::prelude::*;

use crate::dataset::ProbeSet;
use crate::inference::capture_activation;
use crate::model::Model;
use crate::tensor::Tensor3;
use crate::{Error, Result};

/// Images scored concurrently before their results are folded in.
const CHUNK: usize = 32;

/// Captures layer `capture` for every probe image, maps each stack to a
/// fixed-width vector and sums the vectors in image order.
///
/// Per-image work runs in parallel, but the reduction always proceeds in
/// index order, so the result does not depend on the thread count.
pub fn accumulate_over_probe<F>(
    model: &Model,
    capture: usize,
    probe: &ProbeSet,
    width: usize,
    per_image: F,
) -> Result<Vec<f64>>
where
    F: Fn(&Tensor3) -> Vec<f64> + Sync,
{
    if probe.is_empty() {
        return Err(Error::Dataset("probe set is empty".into()));
    }
    let mut sums = vec![0.0f64; width];
    for chunk in probe.images.chunks(CHUNK) {
        let rows: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|img| capture_activation(model, img, capture).map(|s| per_image(&s)))
            .collect::<Result<_>>()?;
        for row in rows {
            debug_assert_eq!(row.len(), width);
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    Ok(sums)
}
