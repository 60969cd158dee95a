//! Synthetic PET/CT cases with a known lesion and a perturbed probability ensemble.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{gaussian_convolve, KernelSpec};
use crate::volume::{GridMeta, Indicator, ProbabilityMap, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Lesion {
    Sphere { center: [f64; 3], radius: f64 },
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl Lesion {
    pub fn center(&self) -> [f64; 3] {
        match *self {
            Lesion::Sphere { center, .. } | Lesion::Ellipsoid { center, .. } => center,
        }
    }

    pub fn radii(&self) -> [f64; 3] {
        match *self {
            Lesion::Sphere { radius, .. } => [radius; 3],
            Lesion::Ellipsoid { radii, .. } => radii,
        }
    }

    pub fn volume(&self) -> f64 {
        let [a, b, c] = self.radii();
        4.0 / 3.0 * std::f64::consts::PI * a * b * c
    }

    fn perturbed(&self, p: &MemberPerturbation) -> Lesion {
        let c = self.center();
        let r = self.radii();
        Lesion::Ellipsoid {
            center: [c[0] + p.shift[0], c[1] + p.shift[1], c[2] + p.shift[2]],
            radii: r.map(|x| x * p.radius_scale),
        }
    }

    /// Voxel-centre rasterization.
    pub fn rasterize(&self, meta: GridMeta) -> Indicator {
        let c = self.center();
        let r = self.radii();
        Indicator::from_fn(meta, |ijk| {
            let w = meta.world(ijk);
            (0..3).map(|a| ((w[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberPerturbation {
    /// Lesion centre offset in mm.
    pub shift: [f64; 3],
    pub radius_scale: f64,
}

impl MemberPerturbation {
    pub const NONE: Self = Self { shift: [0.0; 3], radius_scale: 1.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub lesion: Lesion,
    /// PET intensity inside and outside the lesion.
    pub pet_contrast: [f64; 2],
    pub noise_sigma: f64,
    pub ct_edge_strength: f64,
    /// Blur applied to each member's perturbed lesion, in mm; zero disables it.
    pub prob_blur_sigma: f64,
    pub member_perturbations: Vec<MemberPerturbation>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let p = |shift, radius_scale| MemberPerturbation { shift, radius_scale };
        Self {
            shape: [40; 3],
            spacing: [1.0; 3],
            lesion: Lesion::Sphere { center: [19.5; 3], radius: 9.0 },
            pet_contrast: [4.0, 1.0],
            noise_sigma: 0.2,
            ct_edge_strength: 1.0,
            prob_blur_sigma: 1.5,
            member_perturbations: vec![
                p([0.0, 0.0, 0.0], 1.0),
                p([2.0, 0.0, 0.0], 1.0),
                p([0.0, -2.0, 0.0], 0.9),
                p([0.0, 0.0, 1.5], 1.1),
                p([-1.5, 1.5, 0.0], 0.95),
            ],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn meta(&self) -> Result<GridMeta> {
        GridMeta::new(self.shape, self.spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        let meta = self.meta()?;
        let max_h = self.spacing.iter().cloned().fold(0.0, f64::max);
        let (c, r) = (self.lesion.center(), self.lesion.radii());
        if r.iter().any(|&x| !x.is_finite() || x <= 2.0 * max_h) {
            return bad(format!("lesion radii {r:?} must exceed twice the largest spacing {max_h}"));
        }
        for a in 0..3 {
            let h = self.spacing[a];
            let extent = (meta.shape()[a] - 1) as f64 * h;
            if c[a] - r[a] < 3.0 * h || c[a] + r[a] > extent - 3.0 * h {
                return bad(format!("lesion leaves less than a 3-voxel margin along axis {a}"));
            }
        }
        let finite = [self.pet_contrast[0], self.pet_contrast[1], self.ct_edge_strength];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("contrast and edge strength must be finite".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be nonnegative", self.noise_sigma));
        }
        if !(self.prob_blur_sigma >= 0.0 && self.prob_blur_sigma.is_finite()) {
            return bad(format!("probability blur {} must be nonnegative", self.prob_blur_sigma));
        }
        if self.member_perturbations.len() < 2 {
            return bad("an ensemble needs at least two members".into());
        }
        for p in &self.member_perturbations {
            if !(p.radius_scale > 0.0 && p.radius_scale.is_finite()) || p.shift.iter().any(|x| !x.is_finite()) {
                return bad(format!("bad member perturbation {p:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub pet: Volume3,
    pub ct: Volume3,
    pub gt: Indicator,
    pub members: Vec<ProbabilityMap>,
}

const PET_STREAM: u64 = 0;
const CT_STREAM: u64 = 1;

/// Standard normal noise keyed by `(seed, stream, voxel index)` only.
fn noise_field(seed: u64, stream: u64, len: usize) -> Vec<f64> {
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    base.set_stream(stream);
    (0..len)
        .into_par_iter()
        .map_init(
            || base.clone(),
            |rng, n| {
                rng.set_word_pos(n as u128 * 16);
                rng.sample::<f64, _>(StandardNormal)
            },
        )
        .collect()
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let meta = spec.meta()?;
    let gt = spec.lesion.rasterize(meta);
    let inside = gt.to_volume();
    let sigma = spec.noise_sigma;

    let [hi, lo] = spec.pet_contrast;
    let pet_noise = noise_field(spec.seed, PET_STREAM, meta.len());
    let pet = inside.data().iter().zip(&pet_noise).map(|(&m, e)| lo + (hi - lo) * m + sigma * e).collect();

    let step = gaussian_convolve(&inside, &KernelSpec::from_mm(1.0, spec.spacing))?;
    let ct_noise = noise_field(spec.seed, CT_STREAM, meta.len());
    let ct = step.data().iter().zip(&ct_noise).map(|(&s, e)| spec.ct_edge_strength * s + sigma * e).collect();

    let members = spec
        .member_perturbations
        .par_iter()
        .map(|p| {
            let mask = spec.lesion.perturbed(p).rasterize(meta).to_volume();
            let soft = if spec.prob_blur_sigma > 0.0 {
                gaussian_convolve(&mask, &KernelSpec::from_mm(spec.prob_blur_sigma, spec.spacing))?
            } else {
                mask
            };
            Ok(ProbabilityMap::clamped(soft))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Phantom { pet: Volume3::new(meta, pet)?, ct: Volume3::new(meta, ct)?, gt, members })
}
