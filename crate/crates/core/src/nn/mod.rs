//! Differentiable sparse-octree operators, parameter storage and the AdamW
//! optimizer.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient verification.

pub mod gradcheck;
mod optim;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use optim::{adamw_step, lambda_lr, AdamW, LambdaSchedule};
pub use params::{read_archive, write_archive, ParamId, ParamStore, Parameter, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use tape::{displacement_squash, Tape, Var};

pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Row-major node features at one octree level: one row per node in sorted
/// key order, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub level: u8,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn zeros(level: u8, rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            level,
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(level: u8, rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "feature data does not match {rows}x{cols}");
        FeatureMatrix { level, rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a 1x1 matrix.
    pub fn scalar(&self) -> T {
        self.data[0]
    }
}
