//! Dense row-major matrices, pairwise distances and L2 normalization.

use crate::error::{Error, Result};

/// Added under the square root when differentiating the euclidean distance,
/// so the gradient stays finite when two embeddings coincide.
pub const EPS_SQRT: f64 = 1e-12;

/// Norms below this are treated as degenerate by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MetricKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Euclidean => "euclidean",
            MetricKind::SquaredEuclidean => "squared_euclidean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(MetricKind::Euclidean),
            "squared_euclidean" | "sqeuclidean" => Some(MetricKind::SquaredEuclidean),
            _ => None,
        }
    }

    /// Distance from a squared euclidean distance.
    pub fn from_squared(self, sq: f64) -> f64 {
        let sq = sq.max(0.0);
        match self {
            MetricKind::Euclidean => sq.sqrt(),
            MetricKind::SquaredEuclidean => sq,
        }
    }

    /// `d distance / d x_i` is this factor times `(x_i - x_j)`.
    pub fn grad_factor(self, sq: f64) -> f64 {
        match self {
            MetricKind::Euclidean => 1.0 / (sq.max(0.0) + EPS_SQRT).sqrt(),
            MetricKind::SquaredEuclidean => 2.0,
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub entries: Matrix,
    pub metric: MetricKind,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.entries.row(i)
    }

    pub fn rows(&self) -> usize {
        self.entries.rows()
    }

    pub fn cols(&self) -> usize {
        self.entries.cols()
    }
}

/// Distance from every row of `rows` to every row of `cols`.
///
/// Self-pairs come out exactly zero: the euclidean value is the plain square
/// root, and [`EPS_SQRT`] only enters through [`MetricKind::grad_factor`].
pub fn pairwise_distances(rows: &Matrix, cols: &Matrix, metric: MetricKind) -> Result<DistanceMatrix> {
    if rows.rows() == 0 || cols.rows() == 0 {
        return Err(Error::InvalidArgument("pairwise distances need non-empty inputs".into()));
    }
    if rows.cols() != cols.cols() {
        return Err(Error::Shape(format!(
            "embedding dimension {} vs {}",
            rows.cols(),
            cols.cols()
        )));
    }
    if !rows.is_finite() || !cols.is_finite() {
        return Err(Error::NonFinite("distance input".into()));
    }
    let mut entries = Matrix::zeros(rows.rows(), cols.rows());
    for i in 0..rows.rows() {
        let r = rows.row(i);
        for j in 0..cols.rows() {
            entries.set(i, j, metric.from_squared(squared_distance(r, cols.row(j))));
        }
    }
    Ok(DistanceMatrix { entries, metric })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    pub norm: f64,
    /// Set when the input norm fell below [`EPS_NORM`]; the vector is then all zeros.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Result<Normalized> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("normalize input".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < EPS_NORM {
        return Ok(Normalized { vector: vec![0.0; v.len()], norm, degenerate: true });
    }
    Ok(Normalized { vector: v.iter().map(|x| x / norm).collect(), norm, degenerate: false })
}
