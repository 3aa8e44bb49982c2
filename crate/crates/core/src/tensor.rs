//! Dense tensors: stored weights and channels-first activations.

use serde::{Deserialize, Serialize};

/// A stored parameter tensor: row-major `f32` data with explicit extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.numel() == self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of elements in one slice along the leading axis.
    pub fn slice_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    /// Drops the given indices along axis 0.
    pub fn remove_leading(&self, drop: &[usize]) -> WeightTensor {
        let inner = self.slice_len();
        let mut data = Vec::with_capacity(self.data.len());
        for (i, chunk) in self.data.chunks(inner.max(1)).enumerate() {
            if !drop.contains(&i) {
                data.extend_from_slice(chunk);
            }
        }
        let mut dims = self.dims.clone();
        dims[0] -= drop.iter().filter(|&&i| i < self.dims[0]).count();
        WeightTensor { dims, data }
    }

    /// Drops the given indices along axis 1 (input channels of an
    /// output-channels-first kernel, or input features of a dense weight).
    /// `group` is the number of contiguous axis-1 entries bundled per index,
    /// used when a dense layer consumes a flattened `(C, H, W)` activation.
    pub fn remove_second(&self, drop: &[usize], group: usize) -> WeightTensor {
        assert!(self.dims.len() >= 2);
        let rows = self.dims[0];
        let cols = self.dims[1];
        let tail: usize = self.dims.iter().skip(2).product();
        let unit = tail * group;
        let units = cols / group;
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..rows {
            let row = &self.data[r * cols * tail..(r + 1) * cols * tail];
            for u in 0..units {
                if !drop.contains(&u) {
                    data.extend_from_slice(&row[u * unit..(u + 1) * unit]);
                }
            }
        }
        let mut dims = self.dims.clone();
        dims[1] -= drop.len() * group;
        WeightTensor { dims, data }
    }
}

/// A channels-first activation `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor extent mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel `c` as a 2D map.
    pub fn map(&self, c: usize) -> Map2<'_> {
        Map2 {
            rows: self.height,
            cols: self.width,
            data: self.plane(c),
        }
    }

    pub fn scale(&self, factor: f32) -> Tensor3 {
        Tensor3 {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Borrowed 2D feature map, row-major.
#[derive(Debug, Clone, Copy)]
pub struct Map2<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f32],
}

impl<'a> Map2<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f32]) -> Self {
        assert_eq!(rows * cols, data.len(), "map extent mismatch");
        Self { rows, cols, data }
    }

    pub fn same_extent(&self, other: &Map2<'_>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Activation shape `(channels, height, width)`. Flat vectors use `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}
