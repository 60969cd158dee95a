//! Hybrid active-contour energy and its iterative convolution-thresholding solver.
//!
//! The segmentation is a binary mask `u`. Its energy is the weighted sum of
//! three terms:
//!
//! * **PET, local fitting.** `E_pet = Σ_y u(y) r1(y) + (1 - u(y)) r2(y)` where
//!   `r_j(y) = Σ_x K(x, y) |I(y) - f_j(x)|²`. The mask is evaluated at the
//!   classified point `y`; the kernel `K` sums over neighbourhood centres `x`.
//!   For fixed `u`, the optimal `f_1 = K*(I u) / K*u` and `f_2 = K*(I (1-u)) / K*(1-u)`.
//! * **CT, edge-weighted perimeter.** `E_ct = sqrt(pi/tau) Σ sqrt(g) u G_tau*(sqrt(g) (1-u))`
//!   with `g = 1 / (1 + beta |∇(G_sigma * I_ct)|²)`. For `g = 1` this approximates the
//!   surface area of `u` as `tau -> 0`.
//! * **CNN, global fitting.** `E_cnn = Σ u (P - c1)² + (1 - u) (P - c2)²`, with
//!   `c1`, `c2` the mean probability inside and outside.
//!
//! Sums are scaled by the voxel volume so energies carry mm units.
//!
//! Each solver step refits `f1, f2, c1, c2` to the current mask, linearizes the
//! energy in `u` and thresholds the linearization (`u = 1` where the score is
//! negative). The PET and CNN terms are linear in `u` and the CT term is concave
//! because the heat-kernel operator is symmetric positive semi-definite, so
//! every step can only lower the energy.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::gauss::{HeatKernelSpec, KernelSpec, SeparableKernel};
use crate::volume::{GridMeta, Indicator, ProbabilityMap, Volume3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridParams {
    /// Local-fitting kernel for the PET term, in voxels.
    pub k_pet: KernelSpec,
    /// Heat kernel of the CT perimeter term.
    pub heat: HeatKernelSpec,
    /// Pre-smoothing of the CT image before the gradient, in mm.
    pub edge_sigma: f64,
    pub edge_beta: f64,
    pub w_pet: f64,
    pub w_ct: f64,
    pub w_cnn: f64,
    pub max_iter: usize,
    /// Guards the local-fit denominators.
    pub eps: f64,
    /// Pins `(c1, c2)` instead of refitting them every step.
    pub fixed_means: Option<[f64; 2]>,
}

impl Default for HybridParams {
    fn default() -> Self {
        Self {
            k_pet: KernelSpec::isotropic(3.0),
            heat: HeatKernelSpec { tau: 1.0 },
            edge_sigma: 1.0,
            edge_beta: 1.0,
            w_pet: 1.0,
            w_ct: 1.0,
            w_cnn: 1.0,
            max_iter: 50,
            eps: 1e-8,
            fixed_means: None,
        }
    }
}

impl HybridParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        self.k_pet.validate()?;
        self.heat.validate()?;
        let weights = [self.w_pet, self.w_ct, self.w_cnn];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad(format!("term weights {weights:?} must be nonnegative"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return bad("at least one term weight must be positive".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.edge_sigma.is_finite() && self.edge_sigma > 0.0) {
            return bad(format!("edge_sigma {} must be positive", self.edge_sigma));
        }
        if !(self.edge_beta.is_finite() && self.edge_beta >= 0.0) {
            return bad(format!("edge_beta {} must be nonnegative", self.edge_beta));
        }
        if let Some(c) = self.fixed_means {
            if c.iter().any(|x| !x.is_finite()) {
                return bad(format!("fixed means {c:?} must be finite"));
            }
        }
        Ok(())
    }

    /// `sqrt(pi / tau)`, the perimeter normalization of the CT term.
    pub fn ct_scale(&self) -> f64 {
        (PI / self.heat.tau).sqrt()
    }
}

/// Spacing-aware gradient magnitude squared: central differences inside,
/// one-sided at the grid faces, zero along singleton axes.
fn gradient_norm2(v: &Volume3) -> Vec<f64> {
    let meta = v.meta();
    let data = v.data();
    let shape = meta.shape();
    let mut out = vec![0.0; data.len()];
    for (n, o) in out.iter_mut().enumerate() {
        let ijk = meta.coords(n);
        for axis in 0..3 {
            let len = shape[axis];
            if len < 2 {
                continue;
            }
            let stride = meta.stride(axis);
            let h = meta.spacing()[axis];
            let i = ijk[axis];
            let d = if i == 0 {
                (data[n + stride] - data[n]) / h
            } else if i == len - 1 {
                (data[n] - data[n - stride]) / h
            } else {
                (data[n + stride] - data[n - stride]) / (2.0 * h)
            };
            *o += d * d;
        }
    }
    out
}

/// Edge stopping map `1 / (1 + beta |∇(G_sigma * ct)|²)`; values in `(0, 1]`.
pub fn edge_indicator(ct: &Volume3, sigma_mm: f64, beta: f64) -> Result<Volume3> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("edge beta {beta} must be nonnegative")));
    }
    let smoothed =
        SeparableKernel::new(*ct.meta(), &KernelSpec::from_mm(sigma_mm, ct.meta().spacing()))?.apply_volume(ct)?;
    let g = gradient_norm2(&smoothed).into_iter().map(|m2| 1.0 / (1.0 + beta * m2)).collect();
    Ok(Volume3::from_parts(*ct.meta(), g))
}

fn as_reals(u: &Indicator) -> Vec<f64> {
    u.data().iter().map(|&b| f64::from(u8::from(b))).collect()
}

fn local_fit_with(kernel: &SeparableKernel, pet: &[f64], u: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let inside: Vec<f64> = pet.iter().zip(u).map(|(i, m)| i * m).collect();
    let outside: Vec<f64> = pet.iter().zip(u).map(|(i, m)| i * (1.0 - m)).collect();
    let complement: Vec<f64> = u.iter().map(|m| 1.0 - m).collect();
    let (num1, den1) = (kernel.apply(&inside), kernel.apply(u));
    let (num2, den2) = (kernel.apply(&outside), kernel.apply(&complement));
    let f1 = num1.iter().zip(&den1).map(|(n, d)| n / (d + eps)).collect();
    let f2 = num2.iter().zip(&den2).map(|(n, d)| n / (d + eps)).collect();
    (f1, f2)
}

/// Local intensity means inside and outside the mask:
/// `f1 = K*(I u) / (K*u + eps)`, `f2 = K*(I (1-u)) / (K*(1-u) + eps)`.
pub fn local_fit(pet: &Volume3, u: &Indicator, k: &KernelSpec, eps: f64) -> Result<(Volume3, Volume3)> {
    pet.meta().check_same(u.meta())?;
    let kernel = SeparableKernel::new(*pet.meta(), k)?;
    let (f1, f2) = local_fit_with(&kernel, pet.data(), &as_reals(u), eps);
    Ok((Volume3::new(*pet.meta(), f1)?, Volume3::new(*pet.meta(), f2)?))
}

/// Mean probability inside (`c1`) and outside (`c2`) the mask.
///
/// An empty inside yields `c1 = 1`; an empty outside yields `c2 = 0`.
pub fn global_means(p: &ProbabilityMap, u: &Indicator) -> Result<(f64, f64)> {
    p.meta().check_same(u.meta())?;
    let (mut s1, mut n1, mut s2, mut n2) = (0.0, 0usize, 0.0, 0usize);
    for (&x, &b) in p.data().iter().zip(u.data()) {
        if b {
            s1 += x;
            n1 += 1;
        } else {
            s2 += x;
            n2 += 1;
        }
    }
    let c1 = if n1 == 0 { 1.0 } else { s1 / n1 as f64 };
    let c2 = if n2 == 0 { 0.0 } else { s2 / n2 as f64 };
    Ok((c1, c2))
}

/// Residual fields `r1, r2` with `r_j = I² - 2 I K*f_j + K*f_j²`.
fn residuals(kernel: &SeparableKernel, pet: &[f64], f1: &[f64], f2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let r = |f: &[f64]| {
        let kf = kernel.apply(f);
        let kf2 = kernel.apply(&f.iter().map(|x| x * x).collect::<Vec<_>>());
        pet.iter().zip(kf.iter().zip(&kf2)).map(|(i, (a, b))| i * i - 2.0 * i * a + b).collect::<Vec<_>>()
    };
    (r(f1), r(f2))
}

/// PET local-fitting energy for given fits, via convolutions.
pub fn pet_energy(pet: &Volume3, u: &Indicator, f1: &Volume3, f2: &Volume3, k: &KernelSpec) -> Result<f64> {
    let meta = pet.meta();
    for other in [u.meta(), f1.meta(), f2.meta()] {
        meta.check_same(other)?;
    }
    let kernel = SeparableKernel::new(*meta, k)?;
    let (r1, r2) = residuals(&kernel, pet.data(), f1.data(), f2.data());
    Ok(meta.voxel_volume() * split_sum(u.data(), &r1, &r2))
}

fn split_sum(u: &[bool], inside: &[f64], outside: &[f64]) -> f64 {
    u.iter().zip(inside.iter().zip(outside)).map(|(&b, (a, c))| if b { *a } else { *c }).sum()
}

/// CT edge-weighted perimeter energy `sqrt(pi/tau) Σ sqrt(g) u G*(sqrt(g)(1-u))`, unweighted.
pub fn ct_energy(g: &Volume3, u: &Indicator, heat: &HeatKernelSpec) -> Result<f64> {
    g.meta().check_same(u.meta())?;
    let kernel = SeparableKernel::heat(*g.meta(), heat)?;
    let sqrt_g: Vec<f64> = g.data().iter().map(|x| x.sqrt()).collect();
    let outside: Vec<f64> = sqrt_g.iter().zip(u.data()).map(|(s, &b)| if b { 0.0 } else { *s }).collect();
    let smoothed = kernel.apply(&outside);
    let sum: f64 = u.data().iter().zip(sqrt_g.iter().zip(&smoothed)).filter(|(&b, _)| b).map(|(_, (s, h))| s * h).sum();
    Ok(g.meta().voxel_volume() * (PI / heat.tau).sqrt() * sum)
}

/// CNN global-fitting energy, unweighted.
pub fn cnn_energy(p: &ProbabilityMap, u: &Indicator, c1: f64, c2: f64) -> Result<f64> {
    p.meta().check_same(u.meta())?;
    let sum: f64 =
        p.data().iter().zip(u.data()).map(|(&x, &b)| if b { (x - c1) * (x - c1) } else { (x - c2) * (x - c2) }).sum();
    Ok(p.meta().voxel_volume() * sum)
}

/// Per-term breakdown of the (weighted) hybrid energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub pet: f64,
    pub ct: f64,
    pub cnn: f64,
}

impl EnergyTerms {
    pub fn total(&self, params: &HybridParams) -> f64 {
        params.w_pet * self.pet + params.w_ct * self.ct + params.w_cnn * self.cnn
    }
}

/// The fixed inputs of one refinement problem, with kernels prepared once.
struct Problem<'a> {
    meta: GridMeta,
    pet: &'a [f64],
    prob: &'a [f64],
    params: &'a HybridParams,
    k_pet: Option<SeparableKernel>,
    heat: Option<SeparableKernel>,
    sqrt_g: Vec<f64>,
    heat_sqrt_g: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(pet: &'a Volume3, p_cnn: &'a ProbabilityMap, g: &Volume3, params: &'a HybridParams) -> Result<Self> {
        params.validate()?;
        let meta = *pet.meta();
        meta.check_same(p_cnn.meta())?;
        meta.check_same(g.meta())?;
        let k_pet = (params.w_pet > 0.0).then(|| SeparableKernel::new(meta, &params.k_pet)).transpose()?;
        let heat = (params.w_ct > 0.0).then(|| SeparableKernel::heat(meta, &params.heat)).transpose()?;
        let sqrt_g: Vec<f64> = g.data().iter().map(|x| x.sqrt()).collect();
        let heat_sqrt_g = heat.as_ref().map(|h| h.apply(&sqrt_g)).unwrap_or_default();
        Ok(Self { meta, pet: pet.data(), prob: p_cnn.data(), params, k_pet, heat, sqrt_g, heat_sqrt_g })
    }

    fn fits(&self, u: &Indicator) -> (Vec<f64>, Vec<f64>) {
        match &self.k_pet {
            Some(k) => local_fit_with(k, self.pet, &as_reals(u), self.params.eps),
            None => (vec![0.0; self.meta.len()], vec![0.0; self.meta.len()]),
        }
    }

    fn means(&self, u: &Indicator) -> (f64, f64) {
        if let Some([c1, c2]) = self.params.fixed_means {
            return (c1, c2);
        }
        let p =
            ProbabilityMap::new(Volume3::from_parts(self.meta, self.prob.to_vec())).expect("validated probabilities");
        global_means(&p, u).expect("shared grid")
    }

    /// `G*(sqrt(g) u)`, or empty when the CT term is off.
    fn heat_inside(&self, u: &Indicator) -> Vec<f64> {
        match &self.heat {
            Some(h) => {
                h.apply(&self.sqrt_g.iter().zip(u.data()).map(|(s, &b)| if b { *s } else { 0.0 }).collect::<Vec<_>>())
            }
            None => Vec::new(),
        }
    }

    fn residuals(&self, f1: &[f64], f2: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        self.k_pet.as_ref().map(|k| residuals(k, self.pet, f1, f2))
    }

    fn energy(&self, u: &Indicator, r: Option<&(Vec<f64>, Vec<f64>)>, c1: f64, c2: f64) -> EnergyTerms {
        let dv = self.meta.voxel_volume();
        let pet = r.map_or(0.0, |(r1, r2)| dv * split_sum(u.data(), r1, r2));
        let ct = if self.heat.is_some() {
            let inside = self.heat_inside(u);
            let sum: f64 = u
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(n, _)| self.sqrt_g[n] * (self.heat_sqrt_g[n] - inside[n]))
                .sum();
            dv * self.params.ct_scale() * sum
        } else {
            0.0
        };
        let cnn = if self.params.w_cnn > 0.0 {
            dv * self
                .prob
                .iter()
                .zip(u.data())
                .map(|(&x, &b)| if b { (x - c1) * (x - c1) } else { (x - c2) * (x - c2) })
                .sum::<f64>()
        } else {
            0.0
        };
        EnergyTerms { pet, ct, cnn }
    }

    /// Pointwise linearization of the weighted energy in `u`.
    fn score(&self, u: &Indicator, r: Option<&(Vec<f64>, Vec<f64>)>, c1: f64, c2: f64) -> Vec<f64> {
        let p = self.params;
        let mut phi = vec![0.0; self.meta.len()];
        if let Some((r1, r2)) = r {
            phi.iter_mut().zip(r1.iter().zip(r2)).for_each(|(s, (a, b))| *s += p.w_pet * (a - b));
        }
        if p.w_cnn > 0.0 {
            phi.iter_mut()
                .zip(self.prob)
                .for_each(|(s, &x)| *s += p.w_cnn * ((x - c1) * (x - c1) - (x - c2) * (x - c2)));
        }
        if self.heat.is_some() {
            let inside = self.heat_inside(u);
            let scale = p.w_ct * p.ct_scale();
            for (n, s) in phi.iter_mut().enumerate() {
                let outside = self.heat_sqrt_g[n] - inside[n];
                *s += scale * self.sqrt_g[n] * (outside - inside[n]);
            }
        }
        phi
    }
}

/// Solver state between iterations.
#[derive(Debug, Clone)]
pub struct SolverState {
    u: Indicator,
    f1: Volume3,
    f2: Volume3,
    c1: f64,
    c2: f64,
    g: Volume3,
    iter: usize,
    energy_trace: Vec<f64>,
    changed: Vec<usize>,
}

impl SolverState {
    /// Fits coefficients to `u0`, builds the CT edge map and records the starting energy.
    pub fn new(
        pet: &Volume3,
        ct: &Volume3,
        p_cnn: &ProbabilityMap,
        u0: Indicator,
        params: &HybridParams,
    ) -> Result<Self> {
        params.validate()?;
        pet.meta().check_same(ct.meta())?;
        pet.meta().check_same(u0.meta())?;
        let g = if params.w_ct > 0.0 {
            edge_indicator(ct, params.edge_sigma, params.edge_beta)?
        } else {
            Volume3::from_parts(*ct.meta(), vec![1.0; ct.meta().len()])
        };
        Self::with_edge_map(pet, p_cnn, g, u0, params)
    }

    /// As [`SolverState::new`] with a caller-supplied edge map `g` in `(0, 1]`.
    pub fn with_edge_map(
        pet: &Volume3,
        p_cnn: &ProbabilityMap,
        g: Volume3,
        u0: Indicator,
        params: &HybridParams,
    ) -> Result<Self> {
        if g.data().iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::InvalidParameter("edge map values must lie in (0, 1]".into()));
        }
        pet.meta().check_same(u0.meta())?;
        let problem = Problem::new(pet, p_cnn, &g, params)?;
        let (f1, f2) = problem.fits(&u0);
        let (c1, c2) = problem.means(&u0);
        let r = problem.residuals(&f1, &f2);
        let e0 = problem.energy(&u0, r.as_ref(), c1, c2).total(params);
        let meta = *pet.meta();
        Ok(Self {
            u: u0,
            f1: Volume3::from_parts(meta, f1),
            f2: Volume3::from_parts(meta, f2),
            c1,
            c2,
            g,
            iter: 0,
            energy_trace: vec![e0],
            changed: Vec::new(),
        })
    }

    pub fn mask(&self) -> &Indicator {
        &self.u
    }

    pub fn into_mask(self) -> Indicator {
        self.u
    }

    pub fn local_fits(&self) -> (&Volume3, &Volume3) {
        (&self.f1, &self.f2)
    }

    pub fn means(&self) -> (f64, f64) {
        (self.c1, self.c2)
    }

    pub fn edge_map(&self) -> &Volume3 {
        &self.g
    }

    pub fn iterations(&self) -> usize {
        self.iter
    }

    /// Energy of the starting mask followed by the energy after each step.
    pub fn energy_trace(&self) -> &[f64] {
        &self.energy_trace
    }

    /// Voxels flipped by each step.
    pub fn changed_voxels(&self) -> &[usize] {
        &self.changed
    }

    pub fn diagnostics(&self, converged: bool) -> Diagnostics {
        Diagnostics {
            iterations: self.iter,
            converged,
            final_energy: *self.energy_trace.last().expect("trace starts non-empty"),
            energy_trace: self.energy_trace.clone(),
            changed_voxels: self.changed.clone(),
        }
    }
}

/// Per-run record of the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub final_energy: f64,
    pub energy_trace: Vec<f64>,
    pub changed_voxels: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("segmentation collapsed to an {} mask at iteration {iteration}", if *.empty { "empty" } else { "all-foreground" })]
    Collapse { iteration: usize, empty: bool, diagnostics: Diagnostics },

    #[error("initial mask is empty")]
    EmptyInit,

    #[error(transparent)]
    Invalid(#[from] Error),
}

/// Linearized energy at the state's current mask and coefficients.
pub fn score_field(
    state: &SolverState,
    pet: &Volume3,
    p_cnn: &ProbabilityMap,
    params: &HybridParams,
) -> Result<Volume3> {
    let problem = Problem::new(pet, p_cnn, &state.g, params)?;
    let r = problem.residuals(state.f1.data(), state.f2.data());
    let phi = problem.score(&state.u, r.as_ref(), state.c1, state.c2);
    Ok(Volume3::from_parts(*pet.meta(), phi))
}

/// Weighted energy terms of `u` with the state's coefficients.
pub fn energy_terms(
    state: &SolverState,
    u: &Indicator,
    pet: &Volume3,
    p_cnn: &ProbabilityMap,
    params: &HybridParams,
) -> Result<EnergyTerms> {
    state.u.meta().check_same(u.meta())?;
    let problem = Problem::new(pet, p_cnn, &state.g, params)?;
    let r = problem.residuals(state.f1.data(), state.f2.data());
    Ok(problem.energy(u, r.as_ref(), state.c1, state.c2))
}

fn step_with(problem: &Problem<'_>, mut state: SolverState) -> Result<SolverState, RefineError> {
    let (f1, f2) = problem.fits(&state.u);
    let (c1, c2) = problem.means(&state.u);
    let r = problem.residuals(&f1, &f2);
    let phi = problem.score(&state.u, r.as_ref(), c1, c2);

    let next = Indicator::new(problem.meta, phi.iter().map(|&s| s < 0.0).collect()).expect("same grid");
    let changed = next.hamming(&state.u).expect("same grid");
    let energy = problem.energy(&next, r.as_ref(), c1, c2).total(problem.params);

    state.f1 = Volume3::from_parts(problem.meta, f1);
    state.f2 = Volume3::from_parts(problem.meta, f2);
    state.c1 = c1;
    state.c2 = c2;
    state.iter += 1;
    state.energy_trace.push(energy);
    state.changed.push(changed);
    let (empty, full) = (next.is_empty(), next.is_full());
    state.u = next;
    if empty || full {
        return Err(RefineError::Collapse { iteration: state.iter, empty, diagnostics: state.diagnostics(false) });
    }
    Ok(state)
}

/// One convolution-thresholding step: refit coefficients, score, threshold.
pub fn ictm_step(
    state: SolverState,
    pet: &Volume3,
    p_cnn: &ProbabilityMap,
    params: &HybridParams,
) -> Result<SolverState, RefineError> {
    let g = state.g.clone();
    let problem = Problem::new(pet, p_cnn, &g, params)?;
    state.u.meta().check_same(&problem.meta)?;
    step_with(&problem, state)
}

/// Final mask and solver record of [`refine`].
#[derive(Debug, Clone)]
pub struct Refinement {
    pub mask: Indicator,
    pub diagnostics: Diagnostics,
}

/// Iterates [`ictm_step`] from `u0` until the mask stops changing or `max_iter` steps ran.
pub fn refine(
    pet: &Volume3,
    ct: &Volume3,
    p_cnn: &ProbabilityMap,
    u0: &Indicator,
    params: &HybridParams,
) -> Result<Refinement, RefineError> {
    if u0.is_empty() {
        return Err(RefineError::EmptyInit);
    }
    let mut state = SolverState::new(pet, ct, p_cnn, u0.clone(), params)?;
    let g = state.g.clone();
    let problem = Problem::new(pet, p_cnn, &g, params)?;
    let mut converged = false;
    while state.iter < params.max_iter {
        state = step_with(&problem, state)?;
        if state.changed.last() == Some(&0) {
            converged = true;
            break;
        }
    }
    let diagnostics = state.diagnostics(converged);
    Ok(Refinement { mask: state.into_mask(), diagnostics })
}
