use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::data::{Gaze, GazeDataset};
use crate::error::{Error, Result};
use crate::model::GazeModel;
use crate::tensor::Tensor;

/// Unit gaze vector `(cos p·sin y, sin p, cos p·cos y)`.
pub fn gaze_vector(g: Gaze) -> [f64; 3] {
    let (p, y) = (g.pitch as f64, g.yaw as f64);
    [p.cos() * y.sin(), p.sin(), p.cos() * y.cos()]
}

/// Angle between two gaze directions, in degrees.
pub fn angular_error(pred: Gaze, truth: Gaze) -> f64 {
    let (a, b) = (gaze_vector(pred), gaze_vector(truth));
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRow {
    pub subject: String,
    pub n: usize,
    pub mean_deg: f64,
    pub median_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub per_subject: Vec<SubjectRow>,
}

pub const EVAL_CSV_HEADER: &str = "subject_id,n,mean_deg,median_deg";

impl EvalReport {
    /// Aggregates per-sample errors grouped by subject.
    pub fn from_errors(errors: &[(String, f64)]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (s, e) in errors {
            groups.entry(s).or_default().push(*e);
        }
        let all: Vec<f64> = errors.iter().map(|(_, e)| *e).collect();
        Ok(Self {
            n: all.len(),
            mean_deg: all.iter().sum::<f64>() / all.len() as f64,
            median_deg: median(&all),
            per_subject: groups
                .into_iter()
                .map(|(s, v)| SubjectRow {
                    subject: s.to_string(),
                    n: v.len(),
                    mean_deg: v.iter().sum::<f64>() / v.len() as f64,
                    median_deg: median(&v),
                })
                .collect(),
        })
    }

    /// One row per subject followed by an `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.per_subject {
            s.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.subject, r.n, r.mean_deg, r.median_deg
            ));
        }
        s.push_str(&format!(
            "all,{},{:.6},{:.6}\n",
            self.n, self.mean_deg, self.median_deg
        ));
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

pub const EVAL_CHUNK: usize = 32;

/// Predictions for every sample, in order.
pub fn predict(model: &GazeModel, data: &GazeDataset) -> Result<Vec<Gaze>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let pred = model.forward_gaze(&data.images(chunk)?)?;
        out.extend(pred.data().chunks_exact(2).map(|p| Gaze::new(p[0], p[1])));
    }
    Ok(out)
}

pub fn evaluate(model: &GazeModel, data: &GazeDataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(model, data)?;
    let errors: Vec<(String, f64)> = data
        .samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.subject.clone(), angular_error(p, s.gaze)))
        .collect();
    EvalReport::from_errors(&errors)
}

/// `N×2` tensor of predictions as gaze pairs.
pub fn to_gazes(t: &Tensor) -> Vec<Gaze> {
    t.data()
        .chunks_exact(2)
        .map(|p| Gaze::new(p[0], p[1]))
        .collect()
}
