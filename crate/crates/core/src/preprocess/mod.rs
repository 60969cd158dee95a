//! Cropping, isotropic resampling and intensity normalization.
//!
//! For cropping, voxel `i` along an axis is taken to occupy the world interval
//! `[origin + i*s, origin + (i+1)*s)`, so a volume covers
//! `[origin, origin + n*s)`. Resampling keeps the world origin fixed: output
//! voxel `j` samples the input at continuous index `j * target / spacing`.

mod spline;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::BBoxMM;
use crate::volume::{crop_voxel, GridMeta, Volume3};

/// Interpolation used by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Cubic B-spline with exact prefiltering.
    Spline3,
    /// Nearest neighbour; never creates new values.
    Nearest,
}

/// Slack (in voxels) when snapping box faces onto the grid.
const SNAP: f64 = 1e-6;

/// Crops to the voxels whose cells intersect `bbox`.
pub fn crop_world(v: &Volume3, bbox: &BBoxMM) -> Result<Volume3> {
    let meta = v.meta();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let (o, s, n) = (meta.origin()[a], meta.spacing()[a], meta.shape()[a] as f64);
        let first = ((bbox.lo[a] - o) / s + SNAP).floor().clamp(0.0, n);
        let last = ((bbox.hi[a] - o) / s - SNAP).ceil().clamp(0.0, n);
        if first >= last {
            return Err(Error::NoOverlap);
        }
        lo[a] = first as usize;
        hi[a] = last as usize;
    }
    crop_voxel(v, lo, hi)
}

/// Output voxel count along one axis: `n * spacing / target`, rounded half up, at least 1.
pub fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target + 0.5).floor() as usize).max(1)
}

/// Resamples onto a grid with `target_spacing`, keeping the origin.
pub fn resample(v: &Volume3, target_spacing: [f64; 3], order: Interpolation) -> Result<Volume3> {
    if target_spacing.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
        return Err(Error::BadSpacing(target_spacing));
    }
    let mut meta = *v.meta();
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        let n = meta.shape()[axis];
        let s = meta.spacing()[axis];
        let t = target_spacing[axis];
        let m = resampled_len(n, s, t);
        let mut shape = meta.shape();
        shape[axis] = m;
        let mut spacing = meta.spacing();
        spacing[axis] = t;
        let out_meta = GridMeta::new(shape, spacing, meta.origin())?;
        data = resample_axis(&meta, &out_meta, &data, axis, t / s, order);
        meta = out_meta;
    }
    Volume3::new(meta, data)
}

/// Resamples every line along `axis`; output sample `j` reads input index `j * step`.
fn resample_axis(
    src: &GridMeta,
    dst: &GridMeta,
    data: &[f64],
    axis: usize,
    step: f64,
    order: Interpolation,
) -> Vec<f64> {
    let n = src.shape()[axis];
    let m = dst.shape()[axis];
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (na, nb) = (src.shape()[a], src.shape()[b]);
    let (src_stride, dst_stride) = (src.stride(axis), dst.stride(axis));

    let lines: Vec<Vec<f64>> = (0..na * nb)
        .into_par_iter()
        .map(|line| {
            let mut ijk = [0usize; 3];
            ijk[a] = line % na;
            ijk[b] = line / na;
            let start = src.index(ijk[0], ijk[1], ijk[2]);
            let mut values: Vec<f64> = (0..n).map(|q| data[start + q * src_stride]).collect();
            match order {
                Interpolation::Nearest => {
                    (0..m).map(|j| values[((j as f64 * step + 0.5).floor() as usize).min(n - 1)]).collect()
                }
                Interpolation::Spline3 => {
                    spline::prefilter(&mut values);
                    (0..m).map(|j| spline::taps(j as f64 * step, n).iter().map(|&(k, w)| w * values[k]).sum()).collect()
                }
            }
        })
        .collect();

    let mut out = vec![0.0; dst.len()];
    for (line, values) in lines.iter().enumerate() {
        let mut ijk = [0usize; 3];
        ijk[a] = line % na;
        ijk[b] = line / na;
        let start = dst.index(ijk[0], ijk[1], ijk[2]);
        for (j, &x) in values.iter().enumerate() {
            out[start + j * dst_stride] = x;
        }
    }
    out
}

/// Standard deviations below this are treated as a constant image.
pub const ZSCORE_MIN_STD: f64 = 1e-8;

/// `(v - mean) / std` over all voxels, population convention; constant volumes map to zero.
pub fn zscore(v: &Volume3) -> Volume3 {
    let n = v.data().len() as f64;
    let mean = v.mean();
    let var = v.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = if std < ZSCORE_MIN_STD {
        vec![0.0; v.data().len()]
    } else {
        v.data().iter().map(|x| (x - mean) / std).collect()
    };
    Volume3::new(*v.meta(), data).expect("finite input gives finite z-scores")
}
