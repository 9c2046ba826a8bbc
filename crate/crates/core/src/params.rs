//! Named parameter segments, flattening, and the finite-difference oracle.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Shape declaration for one named parameter segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl SegmentSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        SegmentSpec {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Canonical, ordered layout of all parameter segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<SegmentSpec>,
}

impl ParamLayout {
    pub fn total_dim(&self) -> usize {
        self.segments.iter().map(SegmentSpec::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Flat offset of the first element of segment `idx`.
    pub fn offset(&self, idx: usize) -> usize {
        self.segments[..idx].iter().map(SegmentSpec::numel).sum()
    }
}

/// Ordered list of named layer parameter tensors; the flat view is the
/// concatenation of the segments in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    layout: ParamLayout,
    values: Vec<Tensor>,
}

impl ParameterVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = layout
            .segments
            .iter()
            .map(|s| Tensor::zeros(s.shape.clone()))
            .collect();
        ParameterVector { layout, values }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<Tensor>) -> Result<Self> {
        if layout.segments.len() != values.len() {
            return Err(CoreError::ShapeMismatch {
                context: "ParameterVector::from_values".into(),
                expected: vec![layout.segments.len()],
                got: vec![values.len()],
            });
        }
        for (spec, value) in layout.segments.iter().zip(&values) {
            if spec.shape != value.shape() {
                return Err(CoreError::ShapeMismatch {
                    context: format!("segment {}", spec.name),
                    expected: spec.shape.clone(),
                    got: value.shape().to_vec(),
                });
            }
        }
        Ok(ParameterVector { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn total_dim(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn segment(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn segment_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn segment_by_name(&self, name: &str) -> Option<&Tensor> {
        self.layout.index_of(name).map(|i| &self.values[i])
    }

    pub fn segments(&self) -> impl Iterator<Item = (&SegmentSpec, &Tensor)> {
        self.layout.segments.iter().zip(self.values.iter())
    }

    /// Concatenate all segments into one flat vector, in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.total_dim());
        for v in &self.values {
            flat.extend_from_slice(v.data());
        }
        flat
    }

    /// Rebuild a ParameterVector from a flat vector and a layout.
    pub fn unflatten(layout: &ParamLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total_dim() {
            return Err(CoreError::ShapeMismatch {
                context: "unflatten".into(),
                expected: vec![layout.total_dim()],
                got: vec![flat.len()],
            });
        }
        let mut values = Vec::with_capacity(layout.segments.len());
        let mut off = 0;
        for spec in &layout.segments {
            let n = spec.numel();
            values.push(Tensor::new(spec.shape.clone(), flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(ParameterVector {
            layout: layout.clone(),
            values,
        })
    }

    /// Σᵢ aᵢ·bᵢ accumulated per segment, in segment order.
    pub fn dot(&self, other: &ParameterVector) -> f64 {
        debug_assert_eq!(self.layout, other.layout);
        let mut acc = 0.0;
        for (a, b) in self.values.iter().zip(&other.values) {
            acc += crate::tensor::dot(a.data(), b.data());
        }
        acc
    }

    /// self += scale · other
    pub fn add_scaled(&mut self, other: &ParameterVector, scale: f64) {
        debug_assert_eq!(self.layout, other.layout);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterVector::zeros(self.layout.clone())
    }

    pub fn get_flat(&self, coord: usize) -> f64 {
        let mut off = 0;
        for v in &self.values {
            if coord < off + v.numel() {
                return v.data()[coord - off];
            }
            off += v.numel();
        }
        panic!("coordinate {coord} out of range");
    }

    pub fn set_flat(&mut self, coord: usize, value: f64) {
        let mut off = 0;
        for v in &mut self.values {
            if coord < off + v.numel() {
                v.data_mut()[coord - off] = value;
                return;
            }
            off += v.numel();
        }
        panic!("coordinate {coord} out of range");
    }
}

/// Central-difference gradient estimate of `f` at `point`, coordinate-wise.
pub fn finite_diff_grad<F>(f: F, point: &ParameterVector, h: f64) -> Result<ParameterVector>
where
    F: Fn(&ParameterVector) -> f64,
{
    let dim = point.total_dim();
    let coords: Vec<usize> = (0..dim).collect();
    let values = finite_diff_grad_coords(f, point, h, &coords)?;
    let mut grad = point.zeros_like();
    for (&c, &v) in coords.iter().zip(&values) {
        grad.set_flat(c, v);
    }
    Ok(grad)
}

/// Central differences restricted to the given flat coordinates.
pub fn finite_diff_grad_coords<F>(
    f: F,
    point: &ParameterVector,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>>
where
    F: Fn(&ParameterVector) -> f64,
{
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let orig = probe.get_flat(c);
        probe.set_flat(c, orig + h);
        let plus = f(&probe);
        probe.set_flat(c, orig - h);
        let minus = f(&probe);
        probe.set_flat(c, orig);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoreError::NonFinite { node: c });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}
