//! Separable Gaussian smoothing on voxel grids.
//!
//! Kernels are sampled, truncated at `truncate` standard deviations and
//! renormalized so the weights along each axis sum to one. Samples outside
//! the grid are taken from the half-sample symmetric extension
//! (`d c b a | a b c d | d c b a`). With that boundary the discrete operator
//! is a symmetric matrix whose rows and columns all sum to one, which the
//! threshold-dynamics solver relies on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridMeta, Volume3};

pub const DEFAULT_TRUNCATE: f64 = 4.0;

/// A Gaussian with per-axis standard deviation given in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub sigma_vox: [f64; 3],
    #[serde(default = "default_truncate")]
    pub truncate: f64,
}

fn default_truncate() -> f64 {
    DEFAULT_TRUNCATE
}

impl KernelSpec {
    pub fn isotropic(sigma_vox: f64) -> Self {
        Self { sigma_vox: [sigma_vox; 3], truncate: DEFAULT_TRUNCATE }
    }

    /// Isotropic in millimetres on the given grid.
    pub fn from_mm(sigma_mm: f64, spacing: [f64; 3]) -> Self {
        Self { sigma_vox: spacing.map(|s| sigma_mm / s), truncate: DEFAULT_TRUNCATE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_vox.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidParameter(format!("kernel sigma {:?} must be positive", self.sigma_vox)));
        }
        if !(self.truncate.is_finite() && self.truncate >= 2.0) {
            return Err(Error::InvalidParameter(format!("kernel truncate {} must be at least 2", self.truncate)));
        }
        Ok(())
    }
}

/// Heat kernel for diffusion time `tau` (mm²): standard deviation `sqrt(2 tau)` mm per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatKernelSpec {
    pub tau: f64,
}

impl HeatKernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("heat kernel tau {} must be positive", self.tau)));
        }
        Ok(())
    }

    /// The equivalent voxel-unit Gaussian on a grid with the given spacing.
    pub fn kernel_spec(&self, spacing: [f64; 3]) -> KernelSpec {
        KernelSpec::from_mm((2.0 * self.tau).sqrt(), spacing)
    }
}

/// Normalized, truncated 1D Gaussian taps `w[-r..=r]`, stored from `-r`.
pub fn gaussian_taps(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = (truncate * sigma).ceil().max(1.0) as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut w: Vec<f64> = (-radius..=radius).map(|t| (-((t * t) as f64) * inv).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Half-sample symmetric reflection of `m` into `0..n`.
#[inline]
pub(crate) fn reflect(m: i64, n: usize) -> usize {
    let n = n as i64;
    let r = m.rem_euclid(2 * n);
    (if r < n { r } else { 2 * n - 1 - r }) as usize
}

/// A prepared separable kernel for repeated application on one grid.
#[derive(Debug, Clone)]
pub struct SeparableKernel {
    meta: GridMeta,
    taps: [Vec<f64>; 3],
}

impl SeparableKernel {
    pub fn new(meta: GridMeta, spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        let taps = std::array::from_fn(|a| gaussian_taps(spec.sigma_vox[a], spec.truncate));
        Ok(Self { meta, taps })
    }

    pub fn heat(meta: GridMeta, spec: &HeatKernelSpec) -> Result<Self> {
        spec.validate()?;
        Self::new(meta, &spec.kernel_spec(meta.spacing()))
    }

    pub fn taps(&self, axis: usize) -> &[f64] {
        &self.taps[axis]
    }

    /// Convolves a raw field laid out on this kernel's grid.
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        assert_eq!(field.len(), self.meta.len());
        let x = convolve_x(&self.meta, field, &self.taps[0]);
        let y = convolve_y(&self.meta, &x, &self.taps[1]);
        convolve_z(&self.meta, &y, &self.taps[2])
    }

    pub fn apply_volume(&self, v: &Volume3) -> Result<Volume3> {
        self.meta.check_same(v.meta())?;
        Ok(Volume3::from_parts(self.meta, self.apply(v.data())))
    }
}

fn convolve_x(meta: &GridMeta, src: &[f64], taps: &[f64]) -> Vec<f64> {
    let nx = meta.shape()[0];
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(nx).zip(src.par_chunks(nx)).for_each(|(dst, row)| {
        for (i, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                acc += w * row[reflect(i as i64 + t as i64 - r, nx)];
            }
            *d = acc;
        }
    });
    out
}

fn convolve_y(meta: &GridMeta, src: &[f64], taps: &[f64]) -> Vec<f64> {
    let [nx, ny, _] = meta.shape();
    let r = (taps.len() / 2) as i64;
    let plane = nx * ny;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(plane).zip(src.par_chunks(plane)).for_each(|(dst, slab)| {
        for j in 0..ny {
            let row = &mut dst[j * nx..(j + 1) * nx];
            for (t, &w) in taps.iter().enumerate() {
                let sj = reflect(j as i64 + t as i64 - r, ny);
                let s = &slab[sj * nx..(sj + 1) * nx];
                row.iter_mut().zip(s).for_each(|(d, &v)| *d += w * v);
            }
        }
    });
    out
}

fn convolve_z(meta: &GridMeta, src: &[f64], taps: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = meta.shape();
    let r = (taps.len() / 2) as i64;
    let plane = nx * ny;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, dst)| {
        for (t, &w) in taps.iter().enumerate() {
            let sk = reflect(k as i64 + t as i64 - r, nz);
            let s = &src[sk * plane..(sk + 1) * plane];
            dst.iter_mut().zip(s).for_each(|(d, &v)| *d += w * v);
        }
    });
    out
}

/// Separable normalized Gaussian smoothing with per-axis sigma in voxels.
pub fn gaussian_convolve(v: &Volume3, k: &KernelSpec) -> Result<Volume3> {
    SeparableKernel::new(*v.meta(), k)?.apply_volume(v)
}

/// Heat-kernel smoothing for diffusion time `tau`, isotropic in millimetres.
///
/// The continuum prefactor of the heat kernel is replaced by discrete
/// normalization, so constants are preserved exactly up to rounding.
pub fn heat_convolve(v: &Volume3, h: &HeatKernelSpec) -> Result<Volume3> {
    SeparableKernel::heat(*v.meta(), h)?.apply_volume(v)
}
