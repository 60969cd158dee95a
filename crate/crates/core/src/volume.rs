//! Volumes, masks and probability maps on a world-referenced 3D grid.
//!
//! Voxel data is stored in a flat buffer with the first axis varying
//! fastest: voxel `(i, j, k)` lives at `i + nx * (j + ny * k)`. This matches
//! the on-disk NIfTI layout, so I/O never transposes. All index arithmetic
//! goes through [`GridMeta::index`] and [`GridMeta::coords`].

use crate::error::{Error, Result};

/// Shape, spacing (mm per voxel) and origin (mm) of a 3D grid.
///
/// The world position of voxel `(i, j, k)` is `origin + (i*sx, j*sy, k*sz)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMeta {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl GridMeta {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidGrid(format!("shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!("spacing {spacing:?} must be positive and finite")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin {origin:?} must be finite")));
        }
        shape
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::InvalidGrid(format!("shape {shape:?} overflows")))?;
        Ok(Self { shape, spacing, origin })
    }

    /// Unit-spacing grid at the world origin.
    pub fn unit(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Distance in elements between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.shape[0],
            2 => self.shape[0] * self.shape[1],
            _ => panic!("axis {axis} out of range"),
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.shape[0] && j < self.shape[1] && k < self.shape[2]);
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.shape;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// World-space (mm) position of a voxel center.
    pub fn world(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + ijk[a] as f64 * self.spacing[a])
    }

    /// Same grid with a different origin.
    pub fn with_origin(&self, origin: [f64; 3]) -> Result<Self> {
        Self::new(self.shape, self.spacing, origin)
    }

    pub(crate) fn check_same(&self, other: &GridMeta) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::MetaMismatch)
        }
    }
}

/// A scalar field on a grid. Every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    meta: GridMeta,
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(meta: GridMeta, data: Vec<f64>) -> Result<Self> {
        if data.len() != meta.len() {
            return Err(Error::LengthMismatch { expected: meta.len(), actual: data.len() });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Self { meta, data })
    }

    /// Caller guarantees length and finiteness.
    pub(crate) fn from_parts(meta: GridMeta, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), meta.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { meta, data }
    }

    pub fn filled(meta: GridMeta, value: f64) -> Result<Self> {
        Self::new(meta, vec![value; meta.len()])
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(meta: GridMeta, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..meta.len()).map(|n| f(meta.coords(n))).collect();
        Self::new(meta, data)
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, ijk: [usize; 3]) -> f64 {
        self.data[self.meta.index(ijk[0], ijk[1], ijk[2])]
    }

    /// Pointwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.meta, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Same values on a grid with a different origin.
    pub fn with_meta(self, meta: GridMeta) -> Result<Self> {
        if meta.shape() != self.meta.shape() {
            return Err(Error::MetaMismatch);
        }
        Ok(Self { meta, data: self.data })
    }
}

/// A binary mask on a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Indicator {
    meta: GridMeta,
    data: Vec<bool>,
}

// GridMeta holds f64 but never NaN, so equality is reflexive.
impl Eq for GridMeta {}

impl Indicator {
    pub fn new(meta: GridMeta, data: Vec<bool>) -> Result<Self> {
        if data.len() != meta.len() {
            return Err(Error::LengthMismatch { expected: meta.len(), actual: data.len() });
        }
        Ok(Self { meta, data })
    }

    pub fn empty(meta: GridMeta) -> Self {
        Self { meta, data: vec![false; meta.len()] }
    }

    pub fn full(meta: GridMeta) -> Self {
        Self { meta, data: vec![true; meta.len()] }
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..meta.len()).map(|n| f(meta.coords(n))).collect();
        Self { meta, data }
    }

    /// Reads a volume as a mask: nonzero voxels are foreground.
    pub fn from_volume(v: &Volume3) -> Self {
        Self { meta: v.meta, data: v.data.iter().map(|&x| x != 0.0).collect() }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, ijk: [usize; 3]) -> bool {
        self.data[self.meta.index(ijk[0], ijk[1], ijk[2])]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self { meta: self.meta, data: self.data.iter().map(|&b| !b).collect() }
    }

    /// Number of voxels where the two masks differ.
    pub fn hamming(&self, other: &Indicator) -> Result<usize> {
        self.meta.check_same(&other.meta)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| a != b).count())
    }

    /// Mask as 0/1 reals.
    pub fn to_volume(&self) -> Volume3 {
        Volume3::from_parts(self.meta, self.data.iter().map(|&b| f64::from(u8::from(b))).collect())
    }

    pub fn with_meta(self, meta: GridMeta) -> Result<Self> {
        if meta.shape() != self.meta.shape() {
            return Err(Error::MetaMismatch);
        }
        Ok(Self { meta, data: self.data })
    }
}

/// A volume whose values all lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Volume3);

impl ProbabilityMap {
    pub fn new(v: Volume3) -> Result<Self> {
        if let Some((index, &value)) = v.data.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::NotAProbability { index, value });
        }
        Ok(Self(v))
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamped(v: Volume3) -> Self {
        let meta = v.meta;
        Self(Volume3::from_parts(meta, v.data.into_iter().map(|p| p.clamp(0.0, 1.0)).collect()))
    }

    pub fn volume(&self) -> &Volume3 {
        &self.0
    }

    pub fn into_volume(self) -> Volume3 {
        self.0
    }

    pub fn meta(&self) -> &GridMeta {
        &self.0.meta
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }
}

impl From<&Indicator> for ProbabilityMap {
    fn from(m: &Indicator) -> Self {
        Self(m.to_volume())
    }
}

/// Thresholds a probability map: foreground iff `p >= threshold`.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> Result<Indicator> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} must lie in (0, 1)")));
    }
    Ok(Indicator { meta: *p.meta(), data: p.data().iter().map(|&v| v >= threshold).collect() })
}

/// Mean of `v` over the foreground of `m`.
pub fn masked_mean(v: &Volume3, m: &Indicator) -> Result<f64> {
    v.meta.check_same(&m.meta)?;
    let (sum, n) =
        v.data.iter().zip(&m.data).filter(|(_, &b)| b).fold((0.0f64, 0usize), |(s, n), (&x, _)| (s + x, n + 1));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

fn crop_indices(meta: &GridMeta, lo: [usize; 3], hi: [usize; 3]) -> Result<(GridMeta, Vec<usize>)> {
    let shape = meta.shape();
    if (0..3).any(|a| lo[a] >= hi[a] || hi[a] > shape[a]) {
        return Err(Error::OutOfBounds { lo, hi, shape });
    }
    let out_shape = std::array::from_fn(|a| hi[a] - lo[a]);
    let origin = meta.world(lo);
    let out = GridMeta::new(out_shape, meta.spacing(), origin)?;
    let mut idx = Vec::with_capacity(out.len());
    for k in lo[2]..hi[2] {
        for j in lo[1]..hi[1] {
            let row = meta.index(lo[0], j, k);
            idx.extend(row..row + out_shape[0]);
        }
    }
    Ok((out, idx))
}

/// Copies the voxel box `[lo, hi)`; the origin moves so world positions are unchanged.
pub fn crop_voxel(v: &Volume3, lo: [usize; 3], hi: [usize; 3]) -> Result<Volume3> {
    let (meta, idx) = crop_indices(&v.meta, lo, hi)?;
    Ok(Volume3::from_parts(meta, idx.into_iter().map(|n| v.data[n]).collect()))
}

/// [`crop_voxel`] for masks.
pub fn crop_indicator(m: &Indicator, lo: [usize; 3], hi: [usize; 3]) -> Result<Indicator> {
    let (meta, idx) = crop_indices(&m.meta, lo, hi)?;
    Ok(Indicator { meta, data: idx.into_iter().map(|n| m.data[n]).collect() })
}
