//! Angular-error evaluation: per-category median, ACC@30° and their
//! unweighted means across categories.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fisher::mode;
use crate::model::{forward, RegressorParams};
use crate::seed::{self, stream};
use crate::so3::{angle_error_deg, random_rotation, Rotation};

pub const ACC_THRESHOLD_DEG: f64 = 30.0;

/// `(category, error in degrees)` for each sample, in input order.
pub fn angle_errors_with<F>(samples: &[Sample], predict: F) -> Result<Vec<(usize, f64)>>
where
    F: Fn(&Sample) -> Result<Rotation> + Sync,
{
    samples
        .par_iter()
        .map(|s| {
            let truth = s
                .label
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("sample {} has no ground truth", s.id)))?;
            Ok((s.category, angle_error_deg(&predict(s)?, truth)))
        })
        .collect()
}

/// Errors of the mode of the predicted distribution.
pub fn angle_errors(params: &RegressorParams, samples: &[Sample]) -> Result<Vec<(usize, f64)>> {
    angle_errors_with(samples, |s| Ok(mode(&forward(params, &s.image, s.category)?.0).rotation))
}

/// Predicts the ground truth itself.
pub fn truth_errors(samples: &[Sample]) -> Result<Vec<(usize, f64)>> {
    angle_errors_with(samples, |s| s.label.ok_or_else(|| Error::InvalidArgument("no truth".into())))
}

/// Predicts a Haar-random rotation drawn from `(seed, sample id)`.
pub fn random_errors(samples: &[Sample], seed: u64) -> Result<Vec<(usize, f64)>> {
    angle_errors_with(samples, |s| {
        Ok(random_rotation(&mut seed::rng(seed, stream::RANDOM_PREDICTOR, s.id)))
    })
}

/// Fraction of errors strictly below `threshold_deg`.
pub fn acc_at(errors: &[f64], threshold_deg: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty error list".into()));
    }
    if !(threshold_deg > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold_deg} must be positive")));
    }
    Ok(errors.iter().filter(|&&e| e < threshold_deg).count() as f64 / errors.len() as f64)
}

/// Median; for even counts the lower of the two central values.
pub fn median_lower(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("median of an empty list".into()));
    }
    let mut v = errors.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: usize,
    pub n: usize,
    pub median_deg: f64,
    pub acc30: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    pub mean_med: f64,
    pub mean_acc30: f64,
}

pub fn summarize(errors: &[(usize, f64)]) -> Result<EvalReport> {
    let mut by_cat: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(c, e) in errors {
        by_cat.entry(c).or_default().push(e);
    }
    if by_cat.is_empty() {
        return Err(Error::InvalidArgument("no categories to summarize".into()));
    }
    let categories = by_cat
        .into_iter()
        .map(|(category, errs)| {
            Ok(CategoryReport {
                category,
                n: errs.len(),
                median_deg: median_lower(&errs)?,
                acc30: acc_at(&errs, ACC_THRESHOLD_DEG)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = categories.len() as f64;
    Ok(EvalReport {
        mean_med: categories.iter().map(|c| c.median_deg).sum::<f64>() / k,
        mean_acc30: categories.iter().map(|c| c.acc30).sum::<f64>() / k,
        categories,
    })
}

impl EvalReport {
    /// `category,n,median_deg,acc30`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["category", "n", "median_deg", "acc30"])?;
        for c in &self.categories {
            wr.write_record([
                c.category.to_string(),
                c.n.to_string(),
                c.median_deg.to_string(),
                c.acc30.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// `mean_med_deg,mean_acc30`
    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["mean_med_deg", "mean_acc30"])?;
        wr.write_record([self.mean_med.to_string(), self.mean_acc30.to_string()])?;
        wr.flush().map_err(|e| Error::io("<csv>", e))
    }
}
