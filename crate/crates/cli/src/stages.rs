//! The pipeline stages over a cohort of case directories.
//!
//! Raw input (`input_dir`):
//!
//! ```text
//! <case>/ct.nii.gz  <case>/pet.nii.gz  [<case>/gt.nii.gz]  <case>/prob_0.nii.gz ... prob_<m-1>.nii.gz
//! ```
//!
//! Output (`output_dir`):
//!
//! ```text
//! preprocessed/<case>/...   same names as the input, on the target grid
//! uncertainty.csv           case_id,nsd_0..nsd_<m-1>,unc,flagged
//! masks/<case>/mask.nii.gz  [ensemble.nii.gz] [diagnostics.json]
//! metrics.csv               case_id,tp,fp,fn,dsc,precision,recall,nsd + MEAN row
//! <stage>_errors.csv        case_id,error
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hac_refine::hybrid::{refine, Diagnostics, RefineError};
use hac_refine::io::{read_bbox_csv, read_nifti, write_nifti, BBoxMM, BBOX_HEADER};
use hac_refine::metrics::{aggregate, CaseMetrics};
use hac_refine::phantom::{make_phantom, MemberPerturbation, Phantom, PhantomSpec};
use hac_refine::preprocess::{crop_world, resample, zscore, Interpolation};
use hac_refine::uncertainty::{nsd_total, uncertainty_score, EnsemblePrediction, UncertaintyReport};
use hac_refine::volume::{binarize, Indicator, ProbabilityMap, Volume3};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{OutputPolicy, PipelineConfig};
use crate::error::CliError;

pub const CT: &str = "ct.nii.gz";
pub const PET: &str = "pet.nii.gz";
pub const GT: &str = "gt.nii.gz";
pub const MASK: &str = "mask.nii.gz";
pub const ENSEMBLE: &str = "ensemble.nii.gz";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const UNCERTAINTY_CSV: &str = "uncertainty.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BBOX_CSV: &str = "bbox.csv";

pub fn prob_name(i: usize) -> String {
    format!("prob_{i}.nii.gz")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Preprocess,
    Uncertainty,
    Refine,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Preprocess => "preprocess",
            Stage::Uncertainty => "uncertainty",
            Stage::Refine => "refine",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub processed: usize,
    pub failures: Vec<CaseFailure>,
}

impl StageOutcome {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Per-case refinement record written next to each refined mask.
#[derive(Debug, Clone, Serialize)]
pub struct CaseDiagnostics {
    pub case_id: String,
    pub unc: f64,
    #[serde(flatten)]
    pub solver: Diagnostics,
    /// Set when the ensemble mask was kept because refinement failed.
    pub fallback: Option<String>,
}

type CaseResult<T> = Result<T, String>;

fn err_str(e: impl Display) -> String {
    e.to_string()
}

pub struct Runner {
    cfg: PipelineConfig,
    pool: rayon::ThreadPool,
    verbose: bool,
}

impl Runner {
    pub fn new(cfg: PipelineConfig, verbose: bool) -> Result<Self, CliError> {
        cfg.validate()?;
        let jobs = cfg.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
        Ok(Self { cfg, pool, verbose })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn pre_dir(&self, case: &str) -> PathBuf {
        self.cfg.output_dir.join("preprocessed").join(case)
    }

    fn masks_root(&self) -> PathBuf {
        self.cfg.output_dir.join("masks")
    }

    /// Runs `work` on every case in the pool, keeping the input order.
    fn for_cases<T: Send>(
        &self,
        stage: Stage,
        cases: &[String],
        work: impl Fn(&str) -> CaseResult<T> + Sync,
    ) -> Vec<(String, CaseResult<T>)> {
        let results: Vec<_> = self.pool.install(|| cases.par_iter().map(|c| (c.clone(), work(c))).collect());
        if self.verbose {
            for (case, r) in &results {
                match r {
                    Ok(_) => eprintln!("[{}] {case}: ok", stage.name()),
                    Err(e) => eprintln!("[{}] {case}: {e}", stage.name()),
                }
            }
        }
        results
    }

    fn finish(&self, stage: Stage, processed: usize, failures: Vec<CaseFailure>) -> Result<StageOutcome, CliError> {
        let mut rows = vec![vec!["case_id".to_owned(), "error".to_owned()]];
        rows.extend(failures.iter().map(|f| vec![f.case_id.clone(), f.error.clone()]));
        write_csv(&self.cfg.output_dir.join(format!("{}_errors.csv", stage.name())), &rows)?;
        Ok(StageOutcome { stage, processed, failures })
    }

    /// Writes a synthetic cohort plus a bounding-box table into `input_dir`.
    pub fn phantom(&self) -> Result<StageOutcome, CliError> {
        let cohort = &self.cfg.phantom;
        let ids: Vec<String> = (0..cohort.cases).map(|k| format!("phantom_{k:03}")).collect();
        let input = &self.cfg.input_dir;
        fs::create_dir_all(input).map_err(CliError::io(input))?;

        let results = self.for_cases(Stage::Phantom, &ids, |id| {
            let k: usize = id["phantom_".len()..].parse().expect("generated id");
            let spec = cohort_case(&cohort.spec, k, cohort.cases, cohort.jitter_mm);
            let ph = make_phantom(&spec).map_err(err_str)?;
            write_phantom(&input.join(id), &ph).map_err(err_str)?;
            Ok(bbox_for(id, &spec, cohort.jitter_mm + cohort.bbox_margin_mm))
        });

        let mut rows = vec![BBOX_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        let mut failures = Vec::new();
        let mut processed = 0;
        for (id, r) in results {
            match r {
                Ok(b) => {
                    processed += 1;
                    let mut row = vec![b.patient_id];
                    row.extend(b.lo.iter().chain(&b.hi).map(|x| x.to_string()));
                    rows.push(row);
                }
                Err(error) => failures.push(CaseFailure { case_id: id, error }),
            }
        }
        write_csv(&input.join(BBOX_CSV), &rows)?;
        self.finish(Stage::Phantom, processed, failures)
    }

    /// Crop, resample and normalize every raw case.
    pub fn preprocess(&self) -> Result<StageOutcome, CliError> {
        let cases = discover(&self.cfg.input_dir)?;
        let boxes: Option<BTreeMap<String, BBoxMM>> = match &self.cfg.bbox_csv {
            Some(path) => Some(
                read_bbox_csv(path)
                    .map_err(|e| CliError::Config(e.to_string()))?
                    .into_iter()
                    .map(|b| (b.patient_id.clone(), b))
                    .collect(),
            ),
            None => None,
        };
        let results = self.for_cases(Stage::Preprocess, &cases, |case| {
            let bbox = match &boxes {
                Some(map) => Some(map.get(case).ok_or_else(|| format!("no bounding box for case {case}"))?),
                None => None,
            };
            self.preprocess_case(case, bbox)
        });
        self.collect(Stage::Preprocess, results).map(|(o, _)| o)
    }

    fn preprocess_case(&self, case: &str, bbox: Option<&BBoxMM>) -> CaseResult<()> {
        let src = self.cfg.input_dir.join(case);
        let target = self.cfg.target_spacing;
        let load = |name: &str, order: Interpolation| -> CaseResult<Volume3> {
            let v = read_nifti(src.join(name)).map_err(err_str)?;
            let v = match bbox {
                Some(b) => crop_world(&v, b).map_err(|e| format!("{name}: {e}"))?,
                None => v,
            };
            resample(&v, target, order).map_err(|e| format!("{name}: {e}"))
        };

        let mut outputs = vec![
            (CT.to_owned(), zscore(&load(CT, Interpolation::Spline3)?)),
            (PET.to_owned(), zscore(&load(PET, Interpolation::Spline3)?)),
        ];
        if src.join(GT).exists() {
            outputs.push((GT.to_owned(), load(GT, Interpolation::Nearest)?));
        }
        for name in (0..).map(prob_name).take_while(|n| src.join(n).exists()) {
            let p = ProbabilityMap::clamped(load(&name, Interpolation::Spline3)?);
            outputs.push((name, p.into_volume()));
        }
        let meta = *outputs[0].1.meta();
        if let Some((name, _)) = outputs.iter().find(|(_, v)| *v.meta() != meta) {
            return Err(format!("{name} does not share the CT grid after preprocessing"));
        }

        let dst = self.pre_dir(case);
        fs::create_dir_all(&dst).map_err(err_str)?;
        for (name, v) in &outputs {
            write_nifti(v, dst.join(name)).map_err(err_str)?;
        }
        Ok(())
    }

    fn load_ensemble(&self, case: &str) -> CaseResult<EnsemblePrediction> {
        let dir = self.pre_dir(case);
        let members = (0..)
            .map(prob_name)
            .take_while(|n| dir.join(n).exists())
            .map(|n| {
                let v = read_nifti(dir.join(&n)).map_err(err_str)?;
                ProbabilityMap::new(v).map_err(|e| format!("{n}: {e}"))
            })
            .collect::<CaseResult<Vec<_>>>()?;
        EnsemblePrediction::new(members).map_err(err_str)
    }

    /// Scores ensemble agreement for every preprocessed case.
    pub fn uncertainty(&self) -> Result<StageOutcome, CliError> {
        let cases = discover(&self.cfg.output_dir.join("preprocessed"))?;
        let results = self.for_cases(Stage::Uncertainty, &cases, |case| {
            uncertainty_score(case, &self.load_ensemble(case)?, &self.cfg.uncertainty).map_err(err_str)
        });
        let (outcome, reports) = self.collect(Stage::Uncertainty, results)?;
        write_uncertainty_csv(&self.cfg.output_dir.join(UNCERTAINTY_CSV), &reports)?;
        Ok(outcome)
    }

    /// Refines flagged cases and passes the ensemble mask through for the rest.
    pub fn refine(&self) -> Result<StageOutcome, CliError> {
        let reports = read_uncertainty_csv(&self.cfg.output_dir.join(UNCERTAINTY_CSV))?;
        let cases: Vec<String> = reports.iter().map(|r| r.0.clone()).collect();
        let by_case: BTreeMap<_, _> = reports.into_iter().map(|(c, unc, flagged)| (c, (unc, flagged))).collect();
        let results = self.for_cases(Stage::Refine, &cases, |case| {
            let (unc, flagged) = by_case[case];
            self.refine_case(case, unc, flagged)
        });
        let mut failures = Vec::new();
        let mut processed = 0;
        for (case_id, r) in results {
            match r {
                Ok(None) => processed += 1,
                Ok(Some(fallback)) => {
                    processed += 1;
                    failures.push(CaseFailure { case_id, error: fallback });
                }
                Err(error) => failures.push(CaseFailure { case_id, error }),
            }
        }
        self.finish(Stage::Refine, processed, failures)
    }

    /// Returns the fallback reason when the ensemble mask had to be kept.
    fn refine_case(&self, case: &str, unc: f64, flagged: bool) -> CaseResult<Option<String>> {
        let ensemble = self.load_ensemble(case)?;
        let u0 = binarize(ensemble.fused(), self.cfg.uncertainty.bin_thresh).map_err(err_str)?;
        let dst = self.masks_root().join(case);
        fs::create_dir_all(&dst).map_err(err_str)?;
        if self.cfg.output_policy == OutputPolicy::Both {
            write_nifti(&u0.to_volume(), dst.join(ENSEMBLE)).map_err(err_str)?;
        }
        if !flagged {
            write_nifti(&u0.to_volume(), dst.join(MASK)).map_err(err_str)?;
            return Ok(None);
        }

        let dir = self.pre_dir(case);
        let pet = read_nifti(dir.join(PET)).map_err(err_str)?;
        let ct = read_nifti(dir.join(CT)).map_err(err_str)?;
        let (mask, solver, fallback) = match refine(&pet, &ct, ensemble.fused(), &u0, &self.cfg.hybrid) {
            Ok(r) => (r.mask, r.diagnostics, None),
            Err(RefineError::Collapse { diagnostics, .. }) => {
                (u0.clone(), diagnostics, Some("refinement collapsed; kept the ensemble mask".to_owned()))
            }
            Err(RefineError::EmptyInit) => {
                let d = Diagnostics {
                    iterations: 0,
                    converged: false,
                    final_energy: f64::NAN,
                    energy_trace: vec![],
                    changed_voxels: vec![],
                };
                (u0.clone(), d, Some("ensemble mask is empty; nothing to refine".to_owned()))
            }
            Err(RefineError::Invalid(e)) => return Err(e.to_string()),
        };
        write_nifti(&mask.to_volume(), dst.join(MASK)).map_err(err_str)?;
        let record = CaseDiagnostics { case_id: case.to_owned(), unc, solver, fallback: fallback.clone() };
        let json = serde_json::to_string_pretty(&record).map_err(err_str)?;
        write_atomic(&dst.join(DIAGNOSTICS), json.as_bytes()).map_err(err_str)?;
        Ok(fallback)
    }

    /// Scores final masks against preprocessed ground truth.
    pub fn evaluate(&self) -> Result<StageOutcome, CliError> {
        let root = self.masks_root();
        let cases = discover(&root)?;
        let results = self.for_cases(Stage::Evaluate, &cases, |case| {
            let gt_path = self.pre_dir(case).join(GT);
            if !gt_path.exists() {
                return Err("no ground truth".to_owned());
            }
            let gt = Indicator::from_volume(&read_nifti(gt_path).map_err(err_str)?);
            let mask = Indicator::from_volume(&read_nifti(root.join(case).join(MASK)).map_err(err_str)?);
            let m = CaseMetrics::evaluate(case, &mask, &gt).map_err(err_str)?;
            let nsd = nsd_total(&mask, &gt, self.cfg.uncertainty.tol_mm).map_err(err_str)?;
            Ok(m.with_nsd(nsd))
        });
        let (outcome, metrics) = self.collect(Stage::Evaluate, results)?;
        if metrics.is_empty() {
            return Err(CliError::EmptyCohort(root));
        }
        write_metrics_csv(&self.cfg.output_dir.join(METRICS_CSV), &metrics)?;
        Ok(outcome)
    }

    /// `preprocess`, `uncertainty`, `refine`, `evaluate` in order.
    pub fn pipeline(&self) -> Result<Vec<StageOutcome>, CliError> {
        Ok(vec![self.preprocess()?, self.uncertainty()?, self.refine()?, self.evaluate()?])
    }

    fn collect<T>(
        &self,
        stage: Stage,
        results: Vec<(String, CaseResult<T>)>,
    ) -> Result<(StageOutcome, Vec<T>), CliError> {
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for (case_id, r) in results {
            match r {
                Ok(v) => ok.push(v),
                Err(error) => failures.push(CaseFailure { case_id, error }),
            }
        }
        Ok((self.finish(stage, ok.len(), failures)?, ok))
    }
}

/// Case `k` of `n`: seed offset by `k`, members shifted by up to `jitter * (k+1)/n` mm.
pub fn cohort_case(base: &PhantomSpec, k: usize, n: usize, jitter_mm: f64) -> PhantomSpec {
    const DIRECTIONS: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [-0.6, 0.8, 0.0]];
    let amp = jitter_mm * (k + 1) as f64 / n as f64;
    let members = (0..base.member_perturbations.len())
        .map(|m| match m {
            0 => MemberPerturbation::NONE,
            _ => {
                let d = DIRECTIONS[(m - 1) % DIRECTIONS.len()];
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                MemberPerturbation { shift: d.map(|x| x * amp), radius_scale: 1.0 + sign * 0.025 * amp }
            }
        })
        .collect();
    PhantomSpec { seed: base.seed.wrapping_add(k as u64), member_perturbations: members, ..base.clone() }
}

fn bbox_for(id: &str, spec: &PhantomSpec, pad_mm: f64) -> BBoxMM {
    let c = spec.lesion.center();
    let r = spec.lesion.radii();
    BBoxMM {
        patient_id: id.to_owned(),
        lo: std::array::from_fn(|a| c[a] - r[a] - pad_mm),
        hi: std::array::from_fn(|a| c[a] + r[a] + pad_mm),
    }
}

fn write_phantom(dir: &Path, ph: &Phantom) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let put = |v: &Volume3, name: &str| write_nifti(v, dir.join(name)).map_err(hac_refine::Error::from);
    put(&ph.ct, CT)?;
    put(&ph.pet, PET)?;
    put(&ph.gt.to_volume(), GT)?;
    for (i, m) in ph.members.iter().enumerate() {
        put(m.volume(), &prob_name(i))?;
    }
    Ok(())
}

/// Sorted names of the subdirectories of `dir`.
pub fn discover(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CliError::EmptyCohort(dir.to_path_buf())),
        Err(e) => return Err(CliError::io(dir)(e)),
    };
    let mut cases = Vec::new();
    for entry in entries {
        let entry = entry.map_err(CliError::io(dir))?;
        if entry.file_type().map_err(CliError::io(entry.path()))?.is_dir() {
            cases.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if cases.is_empty() {
        return Err(CliError::EmptyCohort(dir.to_path_buf()));
    }
    cases.sort();
    Ok(cases)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".partial-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path)(e)
    })
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for row in rows {
        w.write_record(row).map_err(|e| CliError::Report { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Report { path: path.to_path_buf(), reason: e.to_string() })?;
    write_atomic(path, &bytes)
}

pub fn write_uncertainty_csv(path: &Path, reports: &[UncertaintyReport]) -> Result<(), CliError> {
    let members = reports.iter().map(|r| r.nsd_per_member.len()).max().unwrap_or(5);
    let mut header = vec!["case_id".to_owned()];
    header.extend((0..members).map(|i| format!("nsd_{i}")));
    header.extend(["unc".to_owned(), "flagged".to_owned()]);
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.case_id.clone()];
        row.extend((0..members).map(|i| r.nsd_per_member.get(i).map_or(String::new(), |x| x.to_string())));
        row.extend([r.unc.to_string(), r.flagged.to_string()]);
        rows.push(row);
    }
    write_csv(path, &rows)
}

/// `(case_id, unc, flagged)` rows of an uncertainty report.
pub fn read_uncertainty_csv(path: &Path) -> Result<Vec<(String, f64, bool)>, CliError> {
    let bad = |reason: String| CliError::Report { path: path.to_path_buf(), reason };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column {name}")));
    let (id, unc, flagged) = (col("case_id")?, col("unc")?, col("flagged")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let u: f64 = record[unc].parse().map_err(|e| bad(format!("unc: {e}")))?;
        let f: bool = record[flagged].parse().map_err(|e| bad(format!("flagged: {e}")))?;
        out.push((record[id].to_owned(), u, f));
    }
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, metrics: &[CaseMetrics]) -> Result<(), CliError> {
    let summary = aggregate(metrics)?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut rows = vec![["case_id", "tp", "fp", "fn", "dsc", "precision", "recall", "nsd"].map(String::from).to_vec()];
    for m in metrics {
        let c = m.confusion;
        rows.push(vec![
            m.case_id.clone(),
            c.true_pos.to_string(),
            c.false_pos.to_string(),
            c.false_neg.to_string(),
            m.dsc.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            opt(m.nsd),
        ]);
    }
    rows.push(vec![
        "MEAN".to_owned(),
        String::new(),
        String::new(),
        String::new(),
        summary.dsc.to_string(),
        summary.precision.to_string(),
        summary.recall.to_string(),
        opt(summary.nsd),
    ]);
    write_csv(path, &rows)
}
