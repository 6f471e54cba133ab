use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::DiffError;

/// A named contiguous slice of a [`ParamVector`], viewed as a `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceDesc {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl SliceDesc {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered slice descriptors. Frozen once built; shared by every
/// `ParamVector` (and gradient) of the same model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    slices: Vec<SliceDesc>,
    total: usize,
}

impl Layout {
    pub fn slices(&self) -> &[SliceDesc] {
        &self.slices
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    fn check(&self) -> Result<(), DiffError> {
        let mut offset = 0;
        for s in &self.slices {
            if s.offset != offset {
                return Err(DiffError::Layout(format!("slice `{}` starts at {} but expected {}", s.name, s.offset, offset)));
            }
            offset += s.len();
        }
        if offset != self.total {
            return Err(DiffError::Layout(format!("declared total {} does not match slice sum {}", self.total, offset)));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    slices: Vec<SliceDesc>,
    total: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slice and returns its index in the layout.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let name = name.into();
        debug_assert!(self.slices.iter().all(|s| s.name != name), "duplicate slice name {name}");
        self.slices.push(SliceDesc { name, offset: self.total, rows, cols });
        self.total += rows * cols;
        self.slices.len() - 1
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout { slices: self.slices, total: self.total })
    }
}

/// Flat parameter storage plus the immutable layout that names its slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, DiffError> {
        layout.check()?;
        if values.len() != layout.total_len() {
            return Err(DiffError::Layout(format!("{} values for a layout of length {}", values.len(), layout.total_len())));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, index: usize) -> &[f64] {
        let s = &self.layout.slices[index];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, index: usize) -> &mut [f64] {
        let s = &self.layout.slices[index];
        &mut self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_by_name_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.layout.index_of(name)?;
        Some(self.slice_mut(i))
    }

    pub fn slice_mat(&self, index: usize) -> Mat {
        let s = &self.layout.slices[index];
        Mat::from_vec(s.rows, s.cols, self.slice(index).to_vec())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        assert!(self.same_layout(other), "axpy across different layouts");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_lengths_add_up() {
        let mut b = LayoutBuilder::new();
        b.push("w", 3, 4);
        b.push("b", 3, 1);
        let layout = b.build();
        assert_eq!(layout.total_len(), 15);
        let p = ParamVector::zeros(layout.clone());
        assert_eq!(p.len(), layout.slices().iter().map(SliceDesc::len).sum::<usize>());
        assert!(ParamVector::from_values(layout, vec![0.0; 14]).is_err());
    }

    #[test]
    fn slices_are_contiguous() {
        let mut b = LayoutBuilder::new();
        b.push("a", 2, 2);
        b.push("c", 1, 3);
        let mut p = ParamVector::zeros(b.build());
        p.slice_mut(1).copy_from_slice(&[7.0, 8.0, 9.0]);
        assert_eq!(&p.values()[4..], &[7.0, 8.0, 9.0]);
        assert_eq!(p.slice_mat(1).shape(), (1, 3));
    }
}
