use crate::error::{Error, Result};
use crate::real::Real;

/// Shape of a [`Field`]: channels x height x width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FieldShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FieldShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for FieldShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A dense real-valued map, row-major in (channel, row, column) order.
///
/// Holds one radar frame, a feature activation stack, or a convolution
/// kernel plane. Values are dimensionless.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    shape: FieldShape,
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let shape = FieldShape::new(channels, height, width);
        Field {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: T) -> Self {
        let shape = FieldShape::new(channels, height, width);
        Field {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a field from raw row-major data, enforcing the container
    /// invariants: non-degenerate shape and finite values.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "field shape components must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        let shape = FieldShape::new(channels, height, width);
        if data.len() != shape.len() {
            return Err(Error::contract(format!(
                "field data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("field contains non-finite values"));
        }
        Ok(Field { shape, data })
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.channels && y < self.shape.height && x < self.shape.width);
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Field {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "field shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(Field {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Squared L2 norm, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "field shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.f64() * b.f64())
            .sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// An ordered stack of frames with one common shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceField<T> {
    frames: Vec<Field<T>>,
}

impl<T: Real> SequenceField<T> {
    pub fn new(frames: Vec<Field<T>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("sequence needs at least one frame"))?;
        let shape = first.shape();
        if frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::contract("sequence frames must share one shape"));
        }
        Ok(SequenceField { frames })
    }

    pub fn zeros(s: usize, channels: usize, height: usize, width: usize) -> Self {
        SequenceField {
            frames: (0..s.max(1))
                .map(|_| Field::zeros(channels, height, width))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, s: usize) -> &Field<T> {
        &self.frames[s]
    }

    pub fn frame_mut(&mut self, s: usize) -> &mut Field<T> {
        &mut self.frames[s]
    }

    pub fn frames(&self) -> &[Field<T>] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Field<T>> {
        self.frames
    }

    pub fn frame_shape(&self) -> FieldShape {
        self.frames[0].shape()
    }

    pub fn map_frames(&self, f: impl Fn(&Field<T>) -> Field<T>) -> Self {
        SequenceField {
            frames: self.frames.iter().map(f).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::contract(format!(
                "sequence length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| a.add(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(SequenceField { frames })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::contract(format!(
                "sequence length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(SequenceField { frames })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map_frames(|f| f.scale(s))
    }

    pub fn energy(&self) -> f64 {
        self.frames.iter().map(|f| f.energy()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::contract("sequence length mismatch in dot"));
        }
        let mut acc = 0.0;
        for (a, b) in self.frames.iter().zip(&other.frames) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }

    /// Total number of scalar elements across frames.
    pub fn element_count(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.frames.iter().all(|f| f.all_finite())
    }

    pub fn cast<U: Real>(&self) -> SequenceField<U> {
        SequenceField {
            frames: self.frames.iter().map(|f| f.cast()).collect(),
        }
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        let diff = self.sub(other)?;
        Ok(diff.energy() / diff.element_count() as f64)
    }

    /// Stacks the frames into one field along the channel axis.
    pub fn to_stacked(&self) -> Field<T> {
        let shape = self.frame_shape();
        let mut data = Vec::with_capacity(self.len() * shape.len());
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Field::from_vec(self.len() * shape.channels, shape.height, shape.width, data)
            .expect("frames are valid")
    }

    /// Inverse of [`Self::to_stacked`] for single-channel frames.
    pub fn from_stacked(field: &Field<T>, frames: usize) -> Result<Self> {
        if frames == 0 || field.channels() % frames != 0 {
            return Err(Error::contract(format!(
                "cannot split {} channels into {frames} frames",
                field.channels()
            )));
        }
        let per = field.channels() / frames;
        let plane = field.height() * field.width();
        let mut out = Vec::with_capacity(frames);
        for s in 0..frames {
            let start = s * per * plane;
            out.push(Field::from_vec(
                per,
                field.height(),
                field.width(),
                field.data()[start..start + per * plane].to_vec(),
            )?);
        }
        SequenceField::new(out)
    }

    pub fn clamp_unit(&self) -> Self {
        self.map_frames(|f| f.map(|v| v.max(T::zero()).min(T::one())))
    }
}
