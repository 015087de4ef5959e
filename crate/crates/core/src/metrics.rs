//! Accuracy measures for surrogate predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::DataMatrix;

/// `||pred - ref|| / ||ref||`.
pub fn rel_l2(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::dim(format!("prediction has {} values, reference {}", pred.len(), reference.len())));
    }
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid("relative L2 error is undefined for a zero reference"));
    }
    let err = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum::<f64>().sqrt();
    Ok(err / norm)
}

/// Coefficient of determination of `pred` against `reference`.
pub fn r2_score(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::dim(format!("prediction has {} values, reference {}", pred.len(), reference.len())));
    }
    let mean = reference.iter().sum::<f64>() / reference.len() as f64;
    let ss_tot: f64 = reference.iter().map(|r| (r - mean) * (r - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("R^2 is undefined for a constant reference"));
    }
    let ss_res: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub rel_l2: f64,
    /// `None` when the reference row is constant.
    pub r2: Option<f64>,
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// `None` for the overall row.
    pub group: Option<String>,
    pub count: usize,
    pub rel_l2_mean: f64,
    pub rel_l2_std: f64,
    pub r2_mean: Option<f64>,
    pub r2_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleScore>,
    /// One row per group (sorted by key) followed by the overall row.
    pub groups: Vec<GroupSummary>,
}

impl EvalReport {
    pub fn overall(&self) -> &GroupSummary {
        self.groups.last().expect("report always has an overall row")
    }

    pub fn mean_rel_l2(&self) -> f64 {
        self.overall().rel_l2_mean
    }

    pub fn to_samples_csv(&self) -> String {
        let mut out = String::from("index,group,rel_l2,r2\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.index,
                s.group.as_deref().unwrap_or(""),
                s.rel_l2,
                s.r2.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        out
    }

    pub fn to_groups_csv(&self) -> String {
        let mut out = String::from("group,count,rel_l2_mean,rel_l2_std,r2_mean,r2_std\n");
        for g in &self.groups {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                g.group.as_deref().unwrap_or("all"),
                g.count,
                g.rel_l2_mean,
                g.rel_l2_std,
                opt(g.r2_mean),
                opt(g.r2_std)
            );
        }
        out
    }
}

/// Score every row of `pred` against the matching row of `reference`.
pub fn score_rows(pred: &DataMatrix, reference: &DataMatrix, groups: Option<&[String]>) -> Result<Vec<SampleScore>> {
    if pred.shape() != reference.shape() {
        return Err(Error::dim(format!("prediction is {:?}, reference {:?}", pred.shape(), reference.shape())));
    }
    if let Some(g) = groups {
        if g.len() != pred.nrows() {
            return Err(Error::dim("group labels do not match the number of samples"));
        }
    }
    (0..pred.nrows())
        .map(|i| {
            let p: Vec<f64> = pred.row(i).iter().copied().collect();
            let r: Vec<f64> = reference.row(i).iter().copied().collect();
            Ok(SampleScore {
                index: i,
                rel_l2: rel_l2(&p, &r)?,
                r2: r2_score(&p, &r).ok(),
                group: groups.map(|g| g[i].clone()),
            })
        })
        .collect()
}

fn summarize(group: Option<String>, scores: &[&SampleScore]) -> GroupSummary {
    let l2: Vec<f64> = scores.iter().map(|s| s.rel_l2).collect();
    let (rel_l2_mean, rel_l2_std) = mean_std(&l2);
    let r2: Vec<f64> = scores.iter().filter_map(|s| s.r2).collect();
    let (r2_mean, r2_std) = if r2.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&r2);
        (Some(m), Some(s))
    };
    GroupSummary { group, count: scores.len(), rel_l2_mean, rel_l2_std, r2_mean, r2_std }
}

/// Aggregate per-sample scores into per-group and overall summaries.
pub fn aggregate(samples: Vec<SampleScore>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty set of scores"));
    }
    let mut by_group: BTreeMap<&str, Vec<&SampleScore>> = BTreeMap::new();
    for s in &samples {
        if let Some(g) = &s.group {
            by_group.entry(g.as_str()).or_default().push(s);
        }
    }
    let mut groups: Vec<GroupSummary> =
        by_group.iter().map(|(k, v)| summarize(Some((*k).to_string()), v)).collect();
    let all: Vec<&SampleScore> = samples.iter().collect();
    groups.push(summarize(None, &all));
    Ok(EvalReport { samples, groups })
}

pub fn evaluate(pred: &DataMatrix, reference: &DataMatrix, groups: Option<&[String]>) -> Result<EvalReport> {
    aggregate(score_rows(pred, reference, groups)?)
}
