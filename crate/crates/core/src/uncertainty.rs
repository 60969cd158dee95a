//! Ensemble fusion, surface distances, normalized surface Dice and case gating.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{binarize, GridMeta, Indicator, ProbabilityMap, Volume3};

/// Members of an ensemble and their voxelwise mean.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    members: Vec<ProbabilityMap>,
    fused: ProbabilityMap,
}

impl EnsemblePrediction {
    pub fn new(members: Vec<ProbabilityMap>) -> Result<Self> {
        let fused = ensemble_mean(&members)?;
        Ok(Self { members, fused })
    }

    pub fn members(&self) -> &[ProbabilityMap] {
        &self.members
    }

    pub fn fused(&self) -> &ProbabilityMap {
        &self.fused
    }

    pub fn meta(&self) -> &GridMeta {
        self.fused.meta()
    }
}

/// Voxelwise arithmetic mean of at least two probability maps on one grid.
pub fn ensemble_mean(members: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    if members.len() < 2 {
        return Err(Error::TooFewMembers(members.len()));
    }
    let meta = *members[0].meta();
    for m in &members[1..] {
        meta.check_same(m.meta())?;
    }
    let count = members.len() as f64;
    let data = (0..meta.len())
        .into_par_iter()
        .map(|n| {
            let first = members[0].data()[n];
            if members.iter().all(|m| m.data()[n] == first) {
                first
            } else {
                (members.iter().map(|m| m.data()[n]).sum::<f64>() / count).clamp(0.0, 1.0)
            }
        })
        .collect();
    ProbabilityMap::new(Volume3::new(meta, data)?)
}

/// A boundary voxel of one mask measured against the other mask's boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub index: usize,
    /// Squared distance in mm² to the nearest boundary voxel centre of the other mask.
    pub sq_distance: f64,
    /// Exposed face area in mm².
    pub weight: f64,
}

impl SurfaceSample {
    pub fn distance(&self) -> f64 {
        self.sq_distance.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistanceResult {
    pub a_to_b: Vec<SurfaceSample>,
    pub b_to_a: Vec<SurfaceSample>,
}

/// Foreground voxels with at least one exposed face (6-neighbourhood, grid
/// faces count as background), paired with the total exposed area in mm².
pub fn boundary_voxels(m: &Indicator) -> Vec<(usize, f64)> {
    let meta = m.meta();
    let shape = meta.shape();
    let h = meta.spacing();
    let face = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let data = m.data();
    let mut out = Vec::new();
    for (n, &inside) in data.iter().enumerate() {
        if !inside {
            continue;
        }
        let ijk = meta.coords(n);
        let mut area = 0.0;
        for axis in 0..3 {
            let stride = meta.stride(axis);
            if ijk[axis] == 0 || !data[n - stride] {
                area += face[axis];
            }
            if ijk[axis] + 1 == shape[axis] || !data[n + stride] {
                area += face[axis];
            }
        }
        if area > 0.0 {
            out.push((n, area));
        }
    }
    out
}

/// Squared distance along one line to the nearest site, with sites given as
/// finite values of `f` (lower envelope of parabolas, positions `q * h`).
fn envelope_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let x = |q: usize| q as f64 * h;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((fq + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x(p) {
            k += 1;
        }
        let q = v[k];
        let d = (p as f64 - q as f64) * h;
        *o = d * d + f[q];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel centre to the nearest site.
/// All entries are infinite when there are no sites.
pub fn squared_distance_transform(sites: &Indicator) -> Vec<f64> {
    let meta = *sites.meta();
    let mut field: Vec<f64> = sites.data().iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for axis in 0..3 {
        transform_axis(&meta, &mut field, axis);
    }
    field
}

fn transform_axis(meta: &GridMeta, field: &mut [f64], axis: usize) {
    let shape = meta.shape();
    let len = shape[axis];
    let stride = meta.stride(axis);
    let h = meta.spacing()[axis];
    let starts: Vec<usize> = (0..meta.len()).filter(|&n| meta.coords(n)[axis] == 0).collect();
    let lines: Vec<(usize, Vec<f64>)> = starts
        .par_iter()
        .map_init(
            || (vec![0.0; len], Vec::with_capacity(len), Vec::with_capacity(len)),
            |(line, v, z), &start| {
                for (t, l) in line.iter_mut().enumerate() {
                    *l = field[start + t * stride];
                }
                let mut out = vec![0.0; len];
                envelope_1d(line, h, &mut out, v, z);
                (start, out)
            },
        )
        .collect();
    for (start, out) in lines {
        for (t, x) in out.into_iter().enumerate() {
            field[start + t * stride] = x;
        }
    }
}

fn boundary_mask(meta: GridMeta, boundary: &[(usize, f64)]) -> Indicator {
    let mut data = vec![false; meta.len()];
    for &(n, _) in boundary {
        data[n] = true;
    }
    Indicator::new(meta, data).expect("same grid")
}

/// Directed distances between the boundaries of two nonempty masks.
pub fn surface_distances(a: &Indicator, b: &Indicator) -> Result<SurfaceDistanceResult> {
    a.meta().check_same(b.meta())?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask);
    }
    let meta = *a.meta();
    let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
    let (da, db) = rayon::join(
        || squared_distance_transform(&boundary_mask(meta, &ba)),
        || squared_distance_transform(&boundary_mask(meta, &bb)),
    );
    let sample = |set: &[(usize, f64)], field: &[f64]| {
        set.iter().map(|&(index, weight)| SurfaceSample { index, sq_distance: field[index], weight }).collect()
    };
    Ok(SurfaceDistanceResult { a_to_b: sample(&ba, &db), b_to_a: sample(&bb, &da) })
}

/// Normalized surface Dice from precomputed distances.
pub fn nsd_from_distances(d: &SurfaceDistanceResult, tol_mm: f64) -> f64 {
    let tol2 = tol_mm * tol_mm;
    let within = |s: &[SurfaceSample]| s.iter().filter(|x| x.sq_distance <= tol2).map(|x| x.weight).sum::<f64>();
    let total = |s: &[SurfaceSample]| s.iter().map(|x| x.weight).sum::<f64>();
    let num = within(&d.a_to_b) + within(&d.b_to_a);
    let den = total(&d.a_to_b) + total(&d.b_to_a);
    (num / den).clamp(0.0, 1.0)
}

/// Normalized surface Dice at tolerance `tol_mm`. Fails on empty masks.
pub fn nsd(a: &Indicator, b: &Indicator, tol_mm: f64) -> Result<f64> {
    check_tolerance(tol_mm)?;
    Ok(nsd_from_distances(&surface_distances(a, b)?, tol_mm))
}

/// [`nsd`] made total: 0 when exactly one mask is empty, 1 when both are.
pub fn nsd_total(a: &Indicator, b: &Indicator, tol_mm: f64) -> Result<f64> {
    check_tolerance(tol_mm)?;
    a.meta().check_same(b.meta())?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ok(1.0),
        (true, false) | (false, true) => Ok(0.0),
        (false, false) => nsd(a, b, tol_mm),
    }
}

fn check_tolerance(tol_mm: f64) -> Result<()> {
    if tol_mm.is_finite() && tol_mm > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("surface tolerance {tol_mm} must be positive")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyParams {
    pub tol_mm: f64,
    pub bin_thresh: f64,
    /// Cases with uncertainty strictly above this are flagged.
    pub threshold: f64,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        Self { tol_mm: 1.0, bin_thresh: 0.5, threshold: 0.2 }
    }
}

impl UncertaintyParams {
    pub fn validate(&self) -> Result<()> {
        check_tolerance(self.tol_mm)?;
        if !(self.bin_thresh > 0.0 && self.bin_thresh < 1.0) {
            return Err(Error::InvalidParameter(format!("binarization threshold {} not in (0, 1)", self.bin_thresh)));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidParameter("uncertainty threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub case_id: String,
    pub nsd_per_member: Vec<f64>,
    pub unc: f64,
    pub flagged: bool,
}

/// Scores each member against the fused map; `unc = 1 - mean NSD`.
pub fn uncertainty_score(
    case_id: &str,
    pred: &EnsemblePrediction,
    params: &UncertaintyParams,
) -> Result<UncertaintyReport> {
    params.validate()?;
    let fused = binarize(pred.fused(), params.bin_thresh)?;
    let nsd_per_member = pred
        .members()
        .par_iter()
        .map(|m| nsd_total(&binarize(m, params.bin_thresh)?, &fused, params.tol_mm))
        .collect::<Result<Vec<_>>>()?;
    let unc = (nsd_per_member.iter().map(|x| 1.0 - x).sum::<f64>() / nsd_per_member.len() as f64).clamp(0.0, 1.0);
    Ok(UncertaintyReport { case_id: case_id.to_owned(), nsd_per_member, unc, flagged: unc > params.threshold })
}

/// Ids of reports with `unc > threshold`, in input order.
pub fn select_cases(reports: &[UncertaintyReport], threshold: f64) -> Vec<String> {
    reports.iter().filter(|r| r.unc > threshold).map(|r| r.case_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(n: usize) -> GridMeta {
        GridMeta::unit([n; 3]).unwrap()
    }

    fn cube(meta: GridMeta, lo: [usize; 3], hi: [usize; 3]) -> Indicator {
        Indicator::from_fn(meta, |ijk| (0..3).all(|a| ijk[a] >= lo[a] && ijk[a] < hi[a]))
    }

    fn pmap(meta: GridMeta, v: f64) -> ProbabilityMap {
        ProbabilityMap::new(Volume3::filled(meta, v).unwrap()).unwrap()
    }

    /// Squared distances by exhaustive search over the other boundary.
    fn brute(a: &Indicator, b: &Indicator) -> (Vec<f64>, Vec<f64>) {
        let meta = a.meta();
        let h = meta.spacing();
        let d2 = |p: usize, q: usize| {
            let (x, y) = (meta.coords(p), meta.coords(q));
            (0..3).map(|k| ((x[k] as f64 - y[k] as f64) * h[k]).powi(2)).sum::<f64>()
        };
        let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
        let near = |from: &[(usize, f64)], to: &[(usize, f64)]| {
            from.iter().map(|&(p, _)| to.iter().map(|&(q, _)| d2(p, q)).fold(f64::INFINITY, f64::min)).collect()
        };
        (near(&ba, &bb), near(&bb, &ba))
    }

    #[test]
    fn ensemble_mean_examples() {
        let meta = unit(3);
        let p = ProbabilityMap::new(Volume3::from_fn(meta, |[i, j, k]| (i + j + k) as f64 / 6.0).unwrap()).unwrap();
        assert_eq!(ensemble_mean(&vec![p.clone(); 5]).unwrap().data(), p.data());

        let members: Vec<_> = [0.0, 0.0, 0.0, 1.0, 1.0].iter().map(|&v| pmap(meta, v)).collect();
        assert!(ensemble_mean(&members).unwrap().data().iter().all(|&x| (x - 0.4).abs() < 1e-15));

        let one = GridMeta::unit([1, 1, 1]).unwrap();
        assert_eq!(ensemble_mean(&[pmap(one, 0.2), pmap(one, 0.8)]).unwrap().data(), &[0.5]);
    }

    #[test]
    fn ensemble_mean_rejects_bad_input() {
        let meta = unit(3);
        assert!(matches!(ensemble_mean(&[pmap(meta, 0.1)]), Err(Error::TooFewMembers(1))));
        assert!(matches!(ensemble_mean(&[pmap(meta, 0.1), pmap(unit(4), 0.1)]), Err(Error::MetaMismatch)));
    }

    #[test]
    fn boundary_face_areas() {
        let meta = GridMeta::new([3, 3, 3], [1.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let single = cube(meta, [1; 3], [2; 3]);
        assert_eq!(boundary_voxels(&single), vec![(meta.index(1, 1, 1), 2.0 * (6.0 + 3.0 + 2.0))]);
        let full = Indicator::full(unit(3));
        let b = boundary_voxels(&full);
        assert_eq!(b.len(), 26);
        assert_eq!(b.iter().map(|x| x.1).sum::<f64>(), 54.0);
    }

    #[test]
    fn identical_cubes_have_zero_distance() {
        let c = cube(unit(10), [3; 3], [7; 3]);
        let d = surface_distances(&c, &c).unwrap();
        assert!(d.a_to_b.iter().chain(&d.b_to_a).all(|s| s.sq_distance == 0.0));
        assert_eq!(nsd(&c, &c, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn single_voxels_three_apart() {
        let meta = unit(8);
        let a = cube(meta, [1, 4, 4], [2, 5, 5]);
        let b = cube(meta, [4, 4, 4], [5, 5, 5]);
        let d = surface_distances(&a, &b).unwrap();
        assert!(d.a_to_b.iter().chain(&d.b_to_a).all(|s| s.distance() == 3.0));
        assert_eq!(nsd(&a, &b, 2.9).unwrap(), 0.0);
        assert_eq!(nsd(&a, &b, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn shifted_cube_within_one_voxel() {
        let meta = unit(14);
        let a = cube(meta, [2; 3], [12; 3]);
        let b = cube(meta, [3, 2, 2], [13, 12, 12]);
        let d = surface_distances(&a, &b).unwrap();
        let (oa, ob) = brute(&a, &b);
        assert!(oa.iter().chain(&ob).all(|&x| x <= 1.0));
        assert_eq!(nsd(&a, &b, 1.0).unwrap(), 1.0);
        assert_eq!(d.a_to_b.iter().map(|s| s.sq_distance).collect::<Vec<_>>(), oa);
    }

    #[test]
    fn empty_masks() {
        let meta = unit(4);
        let c = cube(meta, [1; 3], [3; 3]);
        let e = Indicator::empty(meta);
        assert!(matches!(surface_distances(&c, &e), Err(Error::EmptyMask)));
        assert_eq!(nsd_total(&c, &e, 1.0).unwrap(), 0.0);
        assert_eq!(nsd_total(&e, &e, 1.0).unwrap(), 1.0);
        assert!(nsd(&c, &c, 0.0).is_err());
        assert!(squared_distance_transform(&e).iter().all(|x| x.is_infinite()));
    }

    #[test]
    fn identical_members_are_certain() {
        let meta = unit(10);
        let m = ProbabilityMap::from(&cube(meta, [2; 3], [7; 3]));
        let r = uncertainty_score("c", &EnsemblePrediction::new(vec![m; 5]).unwrap(), &Default::default()).unwrap();
        assert_eq!(r.nsd_per_member, vec![1.0; 5]);
        assert_eq!(r.unc, 0.0);
        assert!(!r.flagged);
    }

    #[test]
    fn one_empty_member_sits_on_the_threshold() {
        let meta = unit(10);
        let a = ProbabilityMap::from(&cube(meta, [2; 3], [7; 3]));
        let mut members = vec![a; 4];
        members.push(pmap(meta, 0.0));
        let r = uncertainty_score("c", &EnsemblePrediction::new(members).unwrap(), &Default::default()).unwrap();
        assert_eq!(r.nsd_per_member, vec![1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(r.unc, 0.2);
        assert!(!r.flagged);
    }

    #[test]
    fn disjoint_blobs_fuse_to_their_union() {
        let meta = unit(8);
        let a = cube(meta, [0; 3], [2; 3]);
        let b = cube(meta, [5; 3], [7; 3]);
        let members = vec![ProbabilityMap::from(&a), ProbabilityMap::from(&b)];
        let r = uncertainty_score("c", &EnsemblePrediction::new(members).unwrap(), &Default::default()).unwrap();

        // Oracle: each member's boundary matches itself inside the union and
        // nothing of the other blob is within tolerance.
        let union = Indicator::new(meta, a.data().iter().zip(b.data()).map(|(x, y)| *x || *y).collect()).unwrap();
        for (m, nsd_i) in [&a, &b].into_iter().zip(&r.nsd_per_member) {
            let (to_u, from_u) = brute(m, &union);
            let w = |x: &Indicator| boundary_voxels(x).into_iter().map(|(_, w)| w).collect::<Vec<_>>();
            let (wm, wu) = (w(m), w(&union));
            let hit = |d: &[f64], w: &[f64]| d.iter().zip(w).filter(|(d, _)| **d <= 1.0).map(|(_, w)| w).sum::<f64>();
            let expect = (hit(&to_u, &wm) + hit(&from_u, &wu)) / (wm.iter().sum::<f64>() + wu.iter().sum::<f64>());
            assert!((nsd_i - expect).abs() < 1e-12);
            assert!((nsd_i - 2.0 / 3.0).abs() < 1e-12);
        }
        assert!((r.unc - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.flagged);
    }

    #[test]
    fn selection_is_strict_and_ordered() {
        let rep = |id: &str, unc| UncertaintyReport { case_id: id.into(), nsd_per_member: vec![], unc, flagged: false };
        let reports = vec![rep("a", 0.10), rep("b", 0.25), rep("c", 0.20)];
        assert_eq!(select_cases(&reports, 0.2), vec!["b"]);
        assert!(select_cases(&[], 0.2).is_empty());
        assert_eq!(select_cases(&reports, 0.0), vec!["a", "b", "c"]);
    }

    fn masks(max: usize) -> impl Strategy<Value = (Indicator, Indicator)> {
        (1..=max, 1..=max, 1..=max, 1u32..4, 1u32..4, 1u32..4).prop_flat_map(|(nx, ny, nz, hx, hy, hz)| {
            let n = nx * ny * nz;
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)).prop_map(
                move |(a, b)| {
                    let meta = GridMeta::new([nx, ny, nz], [hx as f64, hy as f64, hz as f64], [0.0; 3]).unwrap();
                    (Indicator::new(meta, a).unwrap(), Indicator::new(meta, b).unwrap())
                },
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distance_transform_is_exact((a, b) in masks(12)) {
            prop_assume!(!a.is_empty() && !b.is_empty());
            let d = surface_distances(&a, &b).unwrap();
            let (oa, ob) = brute(&a, &b);
            prop_assert_eq!(d.a_to_b.iter().map(|s| s.sq_distance).collect::<Vec<_>>(), oa);
            prop_assert_eq!(d.b_to_a.iter().map(|s| s.sq_distance).collect::<Vec<_>>(), ob);
        }

        #[test]
        fn nsd_is_symmetric_and_monotone((a, b) in masks(8), t in 0.1f64..4.0) {
            prop_assume!(!a.is_empty() && !b.is_empty());
            let ab = nsd(&a, &b, t).unwrap();
            prop_assert_eq!(ab, nsd(&b, &a, t).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(nsd(&a, &b, t + 0.5).unwrap() >= ab);
            prop_assert_eq!(nsd(&a, &a, t).unwrap(), 1.0);
        }
    }
}
