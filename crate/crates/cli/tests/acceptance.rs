//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hac_refine::gauss::{HeatKernelSpec, KernelSpec};
use hac_refine::hybrid::{ct_energy, local_fit, pet_energy, refine, HybridParams, RefineError};
use hac_refine::io::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes};
use hac_refine::metrics::dsc;
use hac_refine::phantom::{make_phantom, Lesion, MemberPerturbation, PhantomSpec};
use hac_refine::preprocess::{resample, zscore, Interpolation};
use hac_refine::uncertainty::{
    boundary_voxels, nsd, surface_distances, uncertainty_score, EnsemblePrediction, UncertaintyParams,
};
use hac_refine::volume::{binarize, GridMeta, Indicator, ProbabilityMap, Volume3};
use hac_refine_cli::stages::{self, ENSEMBLE, GT, MASK};
use hac_refine_cli::{OutputPolicy, PipelineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PET_ENERGY_REL_TOL: f64 = 1e-5;
const PET_ENERGY_STATES: usize = 20;
const PET_ENERGY_BUDGET: Duration = Duration::from_secs(30);
const DESCENT_REL_SLACK: f64 = 1e-6;
const DESCENT_CONFIGS: usize = 12;
const PERIMETER_REL_TOL: f64 = 0.10;
const PERIMETER_BUDGET: Duration = Duration::from_secs(10);
const NSD_MAX_EDGE: usize = 12;
const NSD_RANDOM_GRIDS: usize = 300;
const PHANTOM_MIN_DSC: f64 = 0.90;
const PIPELINE_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_RESAMPLE_TOL: f64 = 1e-5;
const ZSCORE_MEAN_TOL: f64 = 1e-5;
const ZSCORE_STD_TOL: f64 = 1e-4;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Truncated, normalized Gaussian taps and the mirror-folded 1D operator they define.
fn kernel_matrix(n: usize, sigma: f64, truncate: f64) -> Vec<Vec<f64>> {
    let radius = ((truncate * sigma).ceil() as i64).max(1);
    let raw: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let mut m = vec![vec![0.0; n]; n];
    for (x, row) in m.iter_mut().enumerate() {
        for (t, w) in (-radius..=radius).zip(&raw) {
            // Half-sample symmetric extension: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
            let mut y = x as i64 + t;
            let period = 2 * n as i64;
            y = y.rem_euclid(period);
            if y >= n as i64 {
                y = period - 1 - y;
            }
            row[y as usize] += w / total;
        }
    }
    m
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let n = 16;
    let meta = GridMeta::unit([n; 3]).map_err(|e| e.to_string())?;
    let spec = KernelSpec::isotropic(3.0);
    let m = kernel_matrix(n, 3.0, spec.truncate);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for state in 0..PET_ENERGY_STATES {
        let fill = rng.random_range(0.2..0.8);
        let u = Indicator::new(meta, (0..meta.len()).map(|_| rng.random_bool(fill)).collect()).unwrap();
        let pet = Volume3::new(meta, (0..meta.len()).map(|_| rng.random_range(-2.0..3.0)).collect()).unwrap();
        let (f1, f2) = local_fit(&pet, &u, &spec, 1e-8).map_err(|e| e.to_string())?;
        let fast = pet_energy(&pet, &u, &f1, &f2, &spec).map_err(|e| e.to_string())?;

        // Σ_y Σ_x K(x, y) [u(y) (I(y) - f1(x))² + (1 - u(y)) (I(y) - f2(x))²]
        let coords: Vec<[usize; 3]> = (0..meta.len()).map(|i| meta.coords(i)).collect();
        let mut direct = 0.0;
        for (y, cy) in coords.iter().enumerate() {
            let (iy, inside) = (pet.data()[y], u.data()[y]);
            let f = if inside { f1.data() } else { f2.data() };
            let mut acc = 0.0;
            for (x, cx) in coords.iter().enumerate() {
                let k = m[cx[0]][cy[0]] * m[cx[1]][cy[1]] * m[cx[2]][cy[2]];
                let d = iy - f[x];
                acc += k * d * d;
            }
            direct += acc;
        }
        let rel = (fast - direct).abs() / direct.abs();
        worst = worst.max(rel);
        ensure(rel <= PET_ENERGY_REL_TOL, || format!("state {state}: {fast} vs {direct} (rel {rel:.2e})"))?;
    }
    let took = start.elapsed();
    ensure(took < PET_ENERGY_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{PET_ENERGY_STATES} states on 16³, worst rel err {worst:.2e}, {took:.1?}"))
}

fn descent_configs() -> Vec<(PhantomSpec, HybridParams, bool)> {
    let base = PhantomSpec::default();
    let mut out = Vec::new();
    for k in 0..DESCENT_CONFIGS {
        let lesion = if k % 3 == 2 {
            Lesion::Ellipsoid { center: [19.0, 20.0, 19.5], radii: [9.0, 6.5, 7.5] }
        } else {
            Lesion::Sphere { center: [19.5; 3], radius: 6.0 + k as f64 * 0.5 }
        };
        let spec = PhantomSpec {
            seed: 100 + k as u64,
            lesion,
            spacing: if k % 4 == 3 { [1.0, 1.0, 1.5] } else { [1.0; 3] },
            shape: if k % 4 == 3 { [40, 40, 30] } else { [40; 3] },
            noise_sigma: [0.2, 0.5, 1.0][k % 3],
            member_perturbations: (0..5)
                .map(|m| MemberPerturbation { shift: [m as f64 * 0.6, -(m as f64) * 0.4, 0.3], radius_scale: 1.0 })
                .collect(),
            ..base.clone()
        };
        let spec = if k % 4 == 3 {
            PhantomSpec { lesion: Lesion::Sphere { center: [19.5, 19.5, 21.0], radius: 7.0 }, ..spec }
        } else {
            spec
        };
        let params = HybridParams {
            w_ct: [1.0, 0.5, 2.0, 0.0][k % 4],
            w_cnn: [1.0, 2.0, 0.5][k % 3],
            heat: HeatKernelSpec { tau: [0.5, 1.0, 2.0][k % 3] },
            k_pet: KernelSpec::isotropic([2.0, 3.0][k % 2]),
            ..HybridParams::default()
        };
        out.push((spec, params, k % 2 == 1));
    }
    out
}

fn criterion_2() -> Check {
    let mut steps = 0;
    for (i, (spec, params, random_start)) in descent_configs().into_iter().enumerate() {
        let ph = make_phantom(&spec).map_err(|e| e.to_string())?;
        let fused = EnsemblePrediction::new(ph.members).map_err(|e| e.to_string())?.fused().clone();
        let meta = *ph.gt.meta();
        let u0 = if random_start {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            Indicator::new(meta, (0..meta.len()).map(|_| rng.random_bool(0.3)).collect()).unwrap()
        } else {
            binarize(&fused, 0.5).map_err(|e| e.to_string())?
        };
        let (pet, ct) = (zscore(&ph.pet), zscore(&ph.ct));
        let trace = match refine(&pet, &ct, &fused, &u0, &params) {
            Ok(r) => r.diagnostics.energy_trace,
            Err(RefineError::Collapse { diagnostics, .. }) => diagnostics.energy_trace,
            Err(e) => return Err(format!("config {i}: {e}")),
        };
        for (k, w) in trace.windows(2).enumerate() {
            let slack = DESCENT_REL_SLACK * w[0].abs().max(f64::MIN_POSITIVE);
            ensure(w[1] <= w[0] + slack, || format!("config {i} step {k}: {} -> {}", w[0], w[1]))?;
        }
        steps += trace.len() - 1;
    }
    Ok(format!("{DESCENT_CONFIGS} phantom configurations, {steps} steps, all non-increasing"))
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let meta = GridMeta::unit([64; 3]).map_err(|e| e.to_string())?;
    let r = 16.0;
    let u = Indicator::from_fn(meta, |ijk| {
        let w = meta.world(ijk);
        w.iter().map(|x| (x - 31.5).powi(2)).sum::<f64>() <= r * r
    });
    let g = Volume3::filled(meta, 1.0).map_err(|e| e.to_string())?;
    let area = 4.0 * std::f64::consts::PI * r * r;
    let mut parts = Vec::new();
    for tau in [0.5, 1.0, 2.0] {
        let e = ct_energy(&g, &u, &HeatKernelSpec { tau }).map_err(|e| e.to_string())?;
        let rel = e / area - 1.0;
        ensure(rel.abs() <= PERIMETER_REL_TOL, || format!("tau {tau}: {e:.1} vs {area:.1} ({rel:+.3})"))?;
        parts.push(format!("tau {tau}: {rel:+.3}"));
    }
    let took = start.elapsed();
    ensure(took < PERIMETER_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{} relative to 4πr², {took:.1?}", parts.join(", ")))
}

fn criterion_4() -> Check {
    let meta = GridMeta::unit([20, 18, 16]).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Quantized values put exact ties at 0.5 into the field.
    let p = ProbabilityMap::new(
        Volume3::new(meta, (0..meta.len()).map(|_| rng.random_range(0..=16) as f64 / 16.0).collect()).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let params =
        HybridParams { w_pet: 0.0, w_ct: 0.0, w_cnn: 1.0, fixed_means: Some([1.0, 0.0]), ..HybridParams::default() };
    let expect = Indicator::new(meta, p.data().iter().map(|&x| x > 0.5).collect()).unwrap();
    let pet = Volume3::new(meta, (0..meta.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let u0 = Indicator::new(meta, (0..meta.len()).map(|_| rng.random_bool(0.5)).collect()).unwrap();

    let one =
        refine(&pet, &pet, &p, &u0, &HybridParams { max_iter: 1, ..params.clone() }).map_err(|e| e.to_string())?;
    ensure(one.diagnostics.iterations == 1, || format!("{} iterations", one.diagnostics.iterations))?;
    ensure(one.mask == expect, || "one step differs from {P > 0.5}".into())?;
    let full = refine(&pet, &pet, &p, &u0, &params).map_err(|e| e.to_string())?;
    ensure(full.mask == expect && full.diagnostics.iterations == 2, || {
        format!("fixed point not reached after one step ({} iterations)", full.diagnostics.iterations)
    })?;
    let ties = p.data().iter().filter(|&&x| x == 0.5).count();
    Ok(format!("one step gives {{P > 0.5}} exactly on {} voxels ({ties} ties at 0.5)", meta.len()))
}

/// Weighted NSD by exhaustive search over boundary voxel centres.
fn brute_nsd(a: &Indicator, b: &Indicator, tol: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let meta = a.meta();
    let h = meta.spacing();
    let d2 = |p: usize, q: usize| {
        let (x, y) = (meta.coords(p), meta.coords(q));
        (0..3).map(|k| ((x[k] as f64 - y[k] as f64) * h[k]).powi(2)).sum::<f64>()
    };
    let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
    let near = |from: &[(usize, f64)], to: &[(usize, f64)]| -> Vec<f64> {
        from.iter().map(|&(p, _)| to.iter().map(|&(q, _)| d2(p, q)).fold(f64::INFINITY, f64::min)).collect()
    };
    let (da, db) = (near(&ba, &bb), near(&bb, &ba));
    let hit = |d: &[f64], w: &[(usize, f64)]| {
        d.iter().zip(w).filter(|(d, _)| **d <= tol * tol).map(|(_, w)| w.1).sum::<f64>()
    };
    let total = |w: &[(usize, f64)]| w.iter().map(|x| x.1).sum::<f64>();
    let value = (hit(&da, &ba) + hit(&db, &bb)) / (total(&ba) + total(&bb));
    (da, db, value)
}

fn criterion_5() -> Check {
    let meta = GridMeta::unit([12; 3]).map_err(|e| e.to_string())?;
    let cube = |lo: usize, hi: usize| Indicator::from_fn(meta, |ijk| ijk.iter().all(|&c| c >= lo && c < hi));
    let params = UncertaintyParams::default();

    let a = ProbabilityMap::from(&cube(3, 9));
    let same = uncertainty_score("same", &EnsemblePrediction::new(vec![a.clone(); 5]).unwrap(), &params)
        .map_err(|e| e.to_string())?;
    ensure(same.unc == 0.0 && !same.flagged, || format!("identical members: {same:?}"))?;

    let mut members = vec![a; 4];
    members.push(ProbabilityMap::new(Volume3::filled(meta, 0.0).unwrap()).unwrap());
    let edge =
        uncertainty_score("edge", &EnsemblePrediction::new(members).unwrap(), &params).map_err(|e| e.to_string())?;
    ensure(edge.unc == 0.2 && !edge.flagged, || format!("threshold case: {edge:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut grids = 0;
    for _ in 0..NSD_RANDOM_GRIDS {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=NSD_MAX_EDGE));
        let spacing: [f64; 3] = std::array::from_fn(|_| rng.random_range(1..=3) as f64);
        let meta = GridMeta::new(shape, spacing, [0.0; 3]).unwrap();
        let fill = rng.random_range(0.05..0.6);
        let a = Indicator::new(meta, (0..meta.len()).map(|_| rng.random_bool(fill)).collect()).unwrap();
        let b = Indicator::new(meta, (0..meta.len()).map(|_| rng.random_bool(fill)).collect()).unwrap();
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let tol = rng.random_range(0.5..4.0);
        let d = surface_distances(&a, &b).map_err(|e| e.to_string())?;
        let (oa, ob, value) = brute_nsd(&a, &b, tol);
        let fast_a: Vec<f64> = d.a_to_b.iter().map(|s| s.sq_distance).collect();
        let fast_b: Vec<f64> = d.b_to_a.iter().map(|s| s.sq_distance).collect();
        ensure(fast_a == oa && fast_b == ob, || format!("distance mismatch on {shape:?} {spacing:?}"))?;
        let (ab, ba) = (nsd(&a, &b, tol).unwrap(), nsd(&b, &a, tol).unwrap());
        ensure(ab == value && ab == ba, || format!("nsd {ab} / {ba} vs oracle {value} on {shape:?}"))?;
        grids += 1;
    }
    Ok(format!("identities hold; NSD equals the brute-force oracle on {grids} random grids up to 12³"))
}

fn run_pipeline(config: &Path, jobs: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hac-refine"))
        .args(["pipeline", "--config", config.to_str().unwrap(), "--jobs", jobs])
        .env_remove("HAC_REFINE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("pipeline exited {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr))
    })
}

fn phantom_cohort(root: &Path, output: &str) -> Result<(PipelineConfig, PathBuf), String> {
    let mut cfg = PipelineConfig::new(root.join("raw"), root.join(output));
    cfg.bbox_csv = Some(root.join("raw").join(stages::BBOX_CSV));
    cfg.output_policy = OutputPolicy::Both;
    cfg.phantom.cases = 4;
    cfg.phantom.jitter_mm = 2.0;
    cfg.phantom.spec = PhantomSpec { pet_contrast: [4.0, 1.0], noise_sigma: 0.2, ..PhantomSpec::default() };
    let path = root.join(format!("{output}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())?;
    Ok((cfg, path))
}

fn criterion_6(root: &Path) -> Check {
    let start = Instant::now();
    let (cfg, config) = phantom_cohort(root, "e2e")?;
    let gen = Command::new(env!("CARGO_BIN_EXE_hac-refine"))
        .args(["phantom", "--config", config.to_str().unwrap()])
        .env_remove("HAC_REFINE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(gen.status.success(), || String::from_utf8_lossy(&gen.stderr).into_owned())?;
    run_pipeline(&config, "4")?;
    let took = start.elapsed();

    let reports =
        stages::read_uncertainty_csv(&cfg.output_dir.join(stages::UNCERTAINTY_CSV)).map_err(|e| e.to_string())?;
    let flagged: Vec<_> = reports.iter().filter(|r| r.2).map(|r| r.0.clone()).collect();
    ensure(!flagged.is_empty(), || format!("no case was flagged: {reports:?}"))?;
    let mut parts = Vec::new();
    for case in &flagged {
        let load = |p: PathBuf| read_nifti(p).map(|v| Indicator::from_volume(&v)).map_err(|e| e.to_string());
        let gt = load(cfg.output_dir.join("preprocessed").join(case).join(GT))?;
        let dir = cfg.output_dir.join("masks").join(case);
        let (refined, ensemble) = (load(dir.join(MASK))?, load(dir.join(ENSEMBLE))?);
        let (d_ref, d_ens) = (dsc(&refined, &gt).unwrap(), dsc(&ensemble, &gt).unwrap());
        ensure(d_ref >= PHANTOM_MIN_DSC, || format!("{case}: refined DSC {d_ref:.4}"))?;
        ensure(d_ref >= d_ens, || format!("{case}: refined {d_ref:.4} < ensemble {d_ens:.4}"))?;
        parts.push(format!("{case} {d_ens:.3} -> {d_ref:.3}"));
    }
    ensure(took < PIPELINE_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{} of {} cases flagged; DSC {}; {took:.1?}", flagged.len(), reports.len(), parts.join(", ")))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let meta = GridMeta::new([17, 12, 9], [0.8, 1.1, 2.5], [3.0, -2.0, 1.0]).unwrap();
    let v = Volume3::new(meta, (0..meta.len()).map(|_| rng.random_range(-50.0..200.0)).collect()).unwrap();
    let same = resample(&v, meta.spacing(), Interpolation::Spline3).map_err(|e| e.to_string())?;
    let worst = v.data().iter().zip(same.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(same.meta() == v.meta() && worst <= IDENTITY_RESAMPLE_TOL, || format!("identity error {worst:.2e}"))?;

    let z = zscore(&v);
    let n = z.data().len() as f64;
    let mean = z.mean();
    let std = (z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    ensure(mean.abs() <= ZSCORE_MEAN_TOL && (std - 1.0).abs() <= ZSCORE_STD_TOL, || format!("zscore {mean} {std}"))?;

    let labels = Volume3::new(meta, (0..meta.len()).map(|_| rng.random_range(0..4) as f64).collect()).unwrap();
    let resampled = resample(&labels, [1.0; 3], Interpolation::Nearest).map_err(|e| e.to_string())?;
    let set = |v: &Volume3| v.data().iter().map(|&x| x as i64).collect::<std::collections::BTreeSet<_>>();
    ensure(set(&resampled).is_subset(&set(&labels)), || "nearest introduced new labels".into())?;
    Ok(format!(
        "identity err {worst:.1e}, zscore mean {mean:.1e} std-1 {:.1e}, labels {:?}",
        std - 1.0,
        set(&resampled)
    ))
}

fn criterion_8(root: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let meta = GridMeta::new([13, 7, 5], [0.75, 1.25, 3.0], [-12.5, 40.0, 7.25]).unwrap();
    let data: Vec<f64> = (0..meta.len()).map(|_| f64::from(rng.random_range(-1e4f32..1e4))).collect();
    let v = Volume3::new(meta, data).unwrap();
    let from_bytes = read_nifti_bytes(&write_nifti_bytes(&v)).map_err(|e| e.to_string())?;
    ensure(from_bytes == v, || "in-memory round trip differs".into())?;
    for name in ["vol.nii", "vol.nii.gz"] {
        let path = root.join(name);
        write_nifti(&v, &path).map_err(|e| e.to_string())?;
        let back = read_nifti(&path).map_err(|e| e.to_string())?;
        let bits = |v: &Volume3| v.data().iter().map(|x| (*x as f32).to_bits()).collect::<Vec<_>>();
        ensure(back.meta() == v.meta() && bits(&back) == bits(&v), || format!("{name} differs"))?;
    }
    Ok(format!("{} float32 voxels bit-exact through memory, .nii and .nii.gz", meta.len()))
}

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn criterion_9(root: &Path) -> Check {
    let (one, cfg_one) = phantom_cohort(root, "jobs1")?;
    let (eight, cfg_eight) = phantom_cohort(root, "jobs8")?;
    if !one.input_dir.join("phantom_000").exists() {
        let gen = Command::new(env!("CARGO_BIN_EXE_hac-refine"))
            .args(["phantom", "--config", cfg_one.to_str().unwrap()])
            .env_remove("HAC_REFINE_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(gen.status.success(), || String::from_utf8_lossy(&gen.stderr).into_owned())?;
    }
    run_pipeline(&cfg_one, "1")?;
    run_pipeline(&cfg_eight, "8")?;
    let (a, b) = (tree(&one.output_dir)?, tree(&eight.output_dir)?);
    ensure(a.keys().eq(b.keys()), || "output file sets differ".into())?;
    for (path, bytes) in &a {
        ensure(&b[path] == bytes, || format!("{} differs", path.display()))?;
    }
    let csvs = a.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let masks = a.keys().filter(|p| p.ends_with(MASK)).count();
    Ok(format!("{} files identical ({csvs} CSVs, {masks} masks) between --jobs 1 and --jobs 8", a.len()))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = scratch.path();
    type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("brute-force PET energy", Box::new(criterion_1)),
        ("monotone descent", Box::new(criterion_2)),
        ("perimeter limit", Box::new(criterion_3)),
        ("degenerate global fit", Box::new(criterion_4)),
        ("uncertainty identities", Box::new(criterion_5)),
        ("end-to-end phantom", Box::new(|| criterion_6(root))),
        ("preprocessing", Box::new(criterion_7)),
        ("NIfTI round trip", Box::new(|| criterion_8(root))),
        ("determinism", Box::new(|| criterion_9(root))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {:?}",
                p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied())
            ))
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
