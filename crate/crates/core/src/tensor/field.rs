use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `(batch, channels, spatial...)` float field stored row-major in `f32`.
///
/// One to three spatial axes follow the channel axis. Every constructor
/// rejects non-finite data, so a `DenseField` in hand is always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseField {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if !(3..=5).contains(&shape.len()) {
        return Err(Error::Shape(format!(
            "expected (batch, channels, 1-3 spatial axes), got rank {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero extent in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("extent overflow in {shape:?}")))
}

impl DenseField {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} elements but data has {}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseField::new"));
        }
        Ok(Self { shape, data })
    }

    /// Builds a field from 64-bit values, rounding to storage precision.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let mut f = Self::zeros(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("DenseField::filled"));
        }
        f.data.fill(value);
        Ok(f)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.shape[2..]
    }

    /// Number of voxels in one spatial lattice.
    pub fn voxels(&self) -> usize {
        self.spatial().iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, voxel: usize) -> usize {
        (b * self.channels() + c) * self.voxels() + voxel
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, voxel: usize) -> f32 {
        self.data[self.index(b, c, voxel)]
    }

    /// Shape with the channel axis replaced.
    pub fn shape_with_channels(&self, channels: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        s[1] = channels;
        s
    }

    /// Copies one channel out as a 1-channel field.
    pub fn channel(&self, c: usize) -> Result<DenseField> {
        if c >= self.channels() {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {} channels",
                self.channels()
            )));
        }
        let n = self.voxels();
        let mut data = Vec::with_capacity(self.batch() * n);
        for b in 0..self.batch() {
            let start = self.index(b, c, 0);
            data.extend_from_slice(&self.data[start..start + n]);
        }
        DenseField::new(self.shape_with_channels(1), data)
    }
}

/// Integer class labels laid out as `(batch, spatial...)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelField {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl LabelField {
    pub fn new(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        if !(2..=4).contains(&shape.len()) || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "label shape must be (batch, 1-3 spatial axes) with nonzero extents, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "label shape {shape:?} holds {len} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fails if any label is outside `[0, num_classes)`.
    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::LabelOutOfRange {
                label: l as i64,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Fails unless the labels sit on the same `(batch, spatial)` lattice as `field`.
    pub fn check_aligned(&self, field: &DenseField) -> Result<()> {
        if self.batch() != field.batch() || self.spatial() != field.spatial() {
            return Err(Error::Shape(format!(
                "labels {:?} not aligned with field {:?}",
                self.shape,
                field.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(DenseField::new(vec![1, 2], vec![0.0; 2]).is_err());
        assert!(DenseField::new(vec![1, 1, 0], vec![]).is_err());
        assert!(DenseField::new(vec![1, 1, 3], vec![0.0; 2]).is_err());
        assert!(DenseField::new(vec![1, 1, 1], vec![f32::NAN]).is_err());
        assert!(DenseField::new(vec![1, 1, 1], vec![f32::INFINITY]).is_err());
        assert!(DenseField::new(vec![2, 3, 4, 5, 6, 7], vec![0.0; 5040]).is_err());
    }

    #[test]
    fn indexing_is_channels_before_spatial() {
        let f = DenseField::new(vec![2, 2, 3], (0..12).map(|x| x as f32).collect()).unwrap();
        assert_eq!(f.get(0, 1, 0), 3.0);
        assert_eq!(f.get(1, 0, 2), 8.0);
        let c1 = f.channel(1).unwrap();
        assert_eq!(c1.data(), &[3.0, 4.0, 5.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn labels_range_and_alignment() {
        let l = LabelField::new(vec![1, 2, 2], vec![0, 1, 2, 1]).unwrap();
        assert!(l.check_range(3).is_ok());
        assert!(matches!(
            l.check_range(2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        let f = DenseField::zeros(vec![1, 3, 2, 2]).unwrap();
        assert!(l.check_aligned(&f).is_ok());
        let g = DenseField::zeros(vec![1, 3, 4]).unwrap();
        assert!(l.check_aligned(&g).is_err());
    }
}
