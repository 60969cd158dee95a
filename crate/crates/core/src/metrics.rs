//! Overlap measures between a predicted and a reference mask.
//!
//! Empty denominators follow one rule: a ratio whose denominator is zero is 1
//! when both masks are empty and 0 otherwise. For example, an empty prediction
//! against a nonempty reference has precision 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Indicator;

/// Voxel counts of `pred ∧ gt`, `pred ∧ ¬gt` and `¬pred ∧ gt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Confusion {
    fn both_empty(&self) -> bool {
        self.true_pos + self.false_pos + self.false_neg == 0
    }

    fn ratio(&self, num: usize, den: usize) -> f64 {
        match den {
            0 if self.both_empty() => 1.0,
            0 => 0.0,
            _ => num as f64 / den as f64,
        }
    }

    pub fn dsc(&self) -> f64 {
        self.ratio(2 * self.true_pos, 2 * self.true_pos + self.false_pos + self.false_neg)
    }

    pub fn precision(&self) -> f64 {
        self.ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> f64 {
        self.ratio(self.true_pos, self.true_pos + self.false_neg)
    }
}

pub fn confusion(pred: &Indicator, gt: &Indicator) -> Result<Confusion> {
    pred.meta().check_same(gt.meta())?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

pub fn dsc(pred: &Indicator, gt: &Indicator) -> Result<f64> {
    Ok(confusion(pred, gt)?.dsc())
}

pub fn precision(pred: &Indicator, gt: &Indicator) -> Result<f64> {
    Ok(confusion(pred, gt)?.precision())
}

pub fn recall(pred: &Indicator, gt: &Indicator) -> Result<f64> {
    Ok(confusion(pred, gt)?.recall())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub confusion: Confusion,
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
    pub nsd: Option<f64>,
}

impl CaseMetrics {
    pub fn evaluate(case_id: &str, pred: &Indicator, gt: &Indicator) -> Result<Self> {
        let c = confusion(pred, gt)?;
        Ok(Self {
            case_id: case_id.to_owned(),
            confusion: c,
            dsc: c.dsc(),
            precision: c.precision(),
            recall: c.recall(),
            nsd: None,
        })
    }

    pub fn with_nsd(mut self, nsd: f64) -> Self {
        self.nsd = Some(nsd);
        self
    }
}

/// Cohort means; `nsd` averages only the cases that carry one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
    pub nsd: Option<f64>,
}

pub fn aggregate(cases: &[CaseMetrics]) -> Result<Summary> {
    if cases.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = cases.len() as f64;
    let mean = |f: fn(&CaseMetrics) -> f64| cases.iter().map(f).sum::<f64>() / n;
    let nsds: Vec<f64> = cases.iter().filter_map(|c| c.nsd).collect();
    Ok(Summary {
        cases: cases.len(),
        dsc: mean(|c| c.dsc),
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        nsd: (!nsds.is_empty()).then(|| nsds.iter().sum::<f64>() / nsds.len() as f64),
    })
}
