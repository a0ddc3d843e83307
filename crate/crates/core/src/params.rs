//! Flat parameter vectors with a named tensor layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorDesc {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered tensor descriptors whose offsets partition `[0, p)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    tensors: Vec<TensorDesc>,
}

impl Layout {
    /// Builds a contiguous layout from `(name, shape)` pairs.
    pub fn contiguous<S: Into<String>>(tensors: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let tensors = tensors
            .into_iter()
            .map(|(name, shape)| {
                let desc = TensorDesc {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += desc.len();
                desc
            })
            .collect();
        Layout { tensors }
    }

    /// Rebuilds a layout from descriptors, checking that offsets tile `[0, p)`.
    pub fn from_tensors(tensors: Vec<TensorDesc>) -> Result<Self> {
        let mut expected = 0;
        for t in &tensors {
            if t.offset != expected {
                return Err(Error::LayoutMismatch(format!(
                    "tensor `{}` starts at {} but previous tensors end at {}",
                    t.name, t.offset, expected
                )));
            }
            expected += t.len();
        }
        Ok(Layout { tensors })
    }

    pub fn tensors(&self) -> &[TensorDesc] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDesc> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Total parameter count `p`.
    pub fn len(&self) -> usize {
        self.tensors.last().map_or(0, |t| t.offset + t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat vector of model parameters together with its layout.
///
/// Values are finite by construction; arithmetic helpers return new vectors
/// rather than mutating in place.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                tensor: "<all>".into(),
                expected: layout.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let name = layout
                .tensors()
                .iter()
                .find(|t| t.range().contains(&i))
                .map_or("<unknown>", |t| t.name.as_str());
            return Err(Error::invalid(format!(
                "non-finite parameter at index {i} (tensor `{name}`)"
            )));
        }
        Ok(ParameterVector { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        ParameterVector { layout, values }
    }

    pub(crate) fn from_parts_unchecked(layout: Layout, values: Vec<f64>) -> Self {
        debug_assert_eq!(layout.len(), values.len());
        ParameterVector { layout, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of a named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.values[t.range()])
    }

    pub fn check_same_layout(&self, other: &ParameterVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch(
                "parameter vectors have different layouts".into(),
            ));
        }
        Ok(())
    }

    /// Copy with `f` applied to the raw values.
    pub fn map_values(&self, f: impl FnOnce(&mut [f64])) -> Result<Self> {
        let mut values = self.values.clone();
        f(&mut values);
        ParameterVector::new(self.layout.clone(), values)
    }

    pub fn add(&self, other: &ParameterVector) -> Result<Self> {
        self.check_same_layout(other)?;
        self.map_values(|v| v.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b))
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map_values(|v| v.iter_mut().for_each(|a| *a *= c))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
