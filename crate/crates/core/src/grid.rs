//! Row-major H×W grids used for images, depth maps, logits and masks.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel pre-sigmoid scores.
pub type LogitMap = Grid<f64>;
/// Metric z-depth; `0.0` (or any non-positive value) marks an invalid pixel.
pub type DepthMap = Grid<f64>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Grid::from_vec", &[height * width], &[data.len()]));
        }
        Ok(Grid { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&T> {
        if row < self.height && col < self.width {
            Some(&self.data[row * self.width + col])
        } else {
            None
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }

    pub fn same_dims_as(&self, dims: (usize, usize), op: &'static str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::shape(op, &[dims.0, dims.1], &[self.height, self.width]));
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (row, col): (usize, usize)) -> &T {
        assert!(row < self.height && col < self.width, "grid index out of bounds");
        &self.data[row * self.width + col]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut T {
        assert!(row < self.height && col < self.width, "grid index out of bounds");
        &mut self.data[row * self.width + col]
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// H×W×3 RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Self {
        RgbImage {
            height,
            width,
            data: vec![color; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("RgbImage::from_vec", &[height * width], &[data.len()]));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }
}

impl Index<(usize, usize)> for RgbImage {
    type Output = [f64; 3];

    fn index(&self, (row, col): (usize, usize)) -> &[f64; 3] {
        assert!(row < self.height && col < self.width, "image index out of bounds");
        &self.data[row * self.width + col]
    }
}

impl IndexMut<(usize, usize)> for RgbImage {
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut [f64; 3] {
        assert!(row < self.height && col < self.width, "image index out of bounds");
        &mut self.data[row * self.width + col]
    }
}
