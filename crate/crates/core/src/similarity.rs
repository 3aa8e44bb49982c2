//! Pairwise feature-map similarity within one layer's output.
//!
//! Two measures are provided. SSIM is evaluated once over the whole map
//! (global mean, variance and covariance, no sliding window) with the
//! stabilizers `(k1*D)^2` and `(k2*D)^2`, where `D` is the dynamic range of
//! the layer's entire output stack for the current image. The PSNR measure is
//! the negated Euclidean distance, which orders pairs identically to PSNR
//! without the log transform. For both, larger means more similar.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dataset::ProbeSet;
use crate::model::{Model, PruneBlock};
use crate::probe::accumulate_over_probe;
use crate::tensor::{Map2, Tensor3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureKind {
    Ssim,
    /// Negative Euclidean distance (the PSNR ordering).
    NegEuclidean,
}

impl MeasureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MeasureKind::Ssim => "ssim",
            MeasureKind::NegEuclidean => "psnr",
        }
    }
}

impl FromStr for MeasureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ssim" => Ok(MeasureKind::Ssim),
            "psnr" | "neg_euclidean" | "euclidean" => Ok(MeasureKind::NegEuclidean),
            other => Err(format!("unknown similarity measure '{other}'")),
        }
    }
}

/// Normalization of variance and covariance inside SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// Divide by the pixel count.
    Population,
    /// Divide by the pixel count minus one.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityMeasure {
    pub kind: MeasureKind,
    pub k1: f64,
    pub k2: f64,
    /// Substituted for `D` when the stack is (numerically) constant.
    pub degenerate_range_epsilon: f64,
    pub variance: VarianceMode,
}

impl Default for SimilarityMeasure {
    fn default() -> Self {
        Self::ssim()
    }
}

impl SimilarityMeasure {
    pub fn ssim() -> Self {
        Self {
            kind: MeasureKind::Ssim,
            k1: 0.01,
            k2: 0.03,
            degenerate_range_epsilon: 1e-12,
            variance: VarianceMode::Population,
        }
    }

    pub fn neg_euclidean() -> Self {
        Self {
            kind: MeasureKind::NegEuclidean,
            ..Self::ssim()
        }
    }

    pub fn of_kind(kind: MeasureKind) -> Self {
        Self {
            kind,
            ..Self::ssim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Selection("ssim constants k1, k2 must be > 0".into()));
        }
        Ok(())
    }
}

/// `max - min` over every channel and pixel of one image's output stack.
pub fn dynamic_range(stack: &Tensor3) -> f64 {
    let (lo, hi) = stack
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if stack.data.is_empty() {
        0.0
    } else {
        hi as f64 - lo as f64
    }
}

/// Mean and mean-centered pixels of one map.
struct Centered {
    mean: f64,
    centered: Vec<f64>,
}

impl Centered {
    fn new(map: &[f32]) -> Self {
        let n = map.len() as f64;
        let mean = map.iter().map(|&v| v as f64).sum::<f64>() / n;
        let centered = map.iter().map(|&v| v as f64 - mean).collect();
        Self { mean, centered }
    }

    fn covariance(&self, other: &Centered, mode: VarianceMode) -> f64 {
        let dot: f64 = self
            .centered
            .iter()
            .zip(&other.centered)
            .map(|(a, b)| a * b)
            .sum();
        let n = self.centered.len();
        let denom = match mode {
            VarianceMode::Population => n,
            VarianceMode::Sample => n.saturating_sub(1).max(1),
        };
        dot / denom as f64
    }
}

fn ssim_from_stats(
    a: &Centered,
    var_a: f64,
    b: &Centered,
    var_b: f64,
    cov: f64,
    d: f64,
    measure: &SimilarityMeasure,
) -> f64 {
    let d = if d < measure.degenerate_range_epsilon {
        measure.degenerate_range_epsilon
    } else {
        d
    };
    let c1 = (measure.k1 * d).powi(2);
    let c2 = (measure.k2 * d).powi(2);
    let num = (2.0 * a.mean * b.mean + c1) * (2.0 * cov + c2);
    let den = (a.mean * a.mean + b.mean * b.mean + c1) * (var_a + var_b + c2);
    num / den
}

fn check_extent(a: &Map2<'_>, b: &Map2<'_>) -> Result<()> {
    if a.same_extent(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "map extents differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )))
    }
}

/// Whole-map SSIM with population statistics.
pub fn ssim(a: Map2<'_>, b: Map2<'_>, d: f64, k1: f64, k2: f64) -> Result<f64> {
    ssim_with(
        a,
        b,
        d,
        &SimilarityMeasure {
            k1,
            k2,
            ..SimilarityMeasure::ssim()
        },
    )
}

pub fn ssim_with(a: Map2<'_>, b: Map2<'_>, d: f64, measure: &SimilarityMeasure) -> Result<f64> {
    check_extent(&a, &b)?;
    let ca = Centered::new(a.data);
    let cb = Centered::new(b.data);
    let va = ca.covariance(&ca, measure.variance);
    let vb = cb.covariance(&cb, measure.variance);
    let cov = ca.covariance(&cb, measure.variance);
    Ok(ssim_from_stats(&ca, va, &cb, vb, cov, d, measure))
}

/// `-sqrt(sum((a - b)^2))`.
pub fn neg_euclidean(a: Map2<'_>, b: Map2<'_>) -> Result<f64> {
    check_extent(&a, &b)?;
    Ok(-squared_distance(a.data, b.data).sqrt())
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Number of unordered pairs `m < n` among `n` channels.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Scores every unordered channel pair `(m, n)`, `m < n`, of one image's
/// stack, in lexicographic order.
pub fn image_pair_scores(stack: &Tensor3, measure: &SimilarityMeasure) -> Vec<f64> {
    let n = stack.channels;
    let mut out = Vec::with_capacity(pair_count(n));
    match measure.kind {
        MeasureKind::Ssim => {
            let d = dynamic_range(stack);
            let stats: Vec<(Centered, f64)> = (0..n)
                .map(|c| {
                    let s = Centered::new(stack.plane(c));
                    let v = s.covariance(&s, measure.variance);
                    (s, v)
                })
                .collect();
            for m in 0..n {
                for j in m + 1..n {
                    let (a, va) = &stats[m];
                    let (b, vb) = &stats[j];
                    let cov = a.covariance(b, measure.variance);
                    out.push(ssim_from_stats(a, *va, b, *vb, cov, d, measure));
                }
            }
        }
        MeasureKind::NegEuclidean => {
            for m in 0..n {
                for j in m + 1..n {
                    out.push(-squared_distance(stack.plane(m), stack.plane(j)).sqrt());
                }
            }
        }
    }
    out
}

/// Averaged pairwise similarity of one layer's feature maps. The diagonal is
/// undefined and stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub layer: usize,
    pub n: usize,
    pub scores: Vec<f64>,
    pub measure: SimilarityMeasure,
    pub m_images: usize,
}

impl SimilarityMatrix {
    /// Builds a matrix from upper-triangle scores in lexicographic pair order.
    pub fn from_pairs(
        layer: usize,
        n: usize,
        pairs: &[f64],
        measure: SimilarityMeasure,
        m_images: usize,
    ) -> Self {
        assert_eq!(pairs.len(), pair_count(n), "pair count mismatch");
        let mut scores = vec![f64::NAN; n * n];
        let mut it = pairs.iter();
        for m in 0..n {
            for j in m + 1..n {
                let v = *it.next().expect("length checked");
                scores[m * n + j] = v;
                scores[j * n + m] = v;
            }
        }
        Self {
            layer,
            n,
            scores,
            measure,
            m_images,
        }
    }

    /// Builds a matrix from a full row-major `n x n` array; only the upper
    /// triangle is read.
    pub fn from_dense(layer: usize, n: usize, dense: &[f64], measure: SimilarityMeasure) -> Self {
        assert_eq!(dense.len(), n * n);
        let pairs: Vec<f64> = (0..n)
            .flat_map(|m| (m + 1..n).map(move |j| (m, j)))
            .map(|(m, j)| dense[m * n + j])
            .collect();
        Self::from_pairs(layer, n, &pairs, measure, 1)
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.scores[m * self.n + n]
    }

    /// `(m, n, score)` for every `m < n`, lexicographic.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |m| (m + 1..self.n).map(move |j| (m, j, self.get(m, j))))
    }

    pub fn max_pair(&self) -> Option<(usize, usize, f64)> {
        self.pairs().fold(None, |best, p| match best {
            Some(b) if b.2 >= p.2 => Some(b),
            _ => Some(p),
        })
    }
}

/// Averages per-image pair scores of `block`'s captured output over the
/// probe set.
pub fn pairwise_similarity(
    model: &Model,
    block: &PruneBlock,
    probe: &ProbeSet,
    measure: &SimilarityMeasure,
) -> Result<SimilarityMatrix> {
    measure.validate()?;
    let n = model.shapes()?[block.capture].channels;
    let sums = accumulate_over_probe(model, block.capture, probe, pair_count(n), |stack| {
        image_pair_scores(stack, measure)
    })?;
    let m = probe.len() as f64;
    let avg: Vec<f64> = sums.into_iter().map(|s| s / m).collect();
    Ok(SimilarityMatrix::from_pairs(
        block.conv,
        n,
        &avg,
        *measure,
        probe.len(),
    ))
}

/// CSV dump of `(layer, m, n, score)` rows, both orientations omitted:
/// only `m < n` is written.
pub fn dump_rows(matrices: &[SimilarityMatrix]) -> String {
    let mut out = String::from("layer,m,n,score\n");
    for s in matrices {
        for (m, n, v) in s.pairs() {
            writeln!(out, "{},{},{},{:e}", s.layer, m, n, v).expect("string write");
        }
    }
    out
}

/// Parses rows written by [`dump_rows`].
pub fn parse_dump(text: &str) -> Result<Vec<(usize, usize, usize, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Dataset(format!("bad dump row '{line}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}
