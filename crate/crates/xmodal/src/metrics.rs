//! Evaluation metrics: accuracy, macro F1, RMSE, PCC, CCC.
//! Population (1/N) moments throughout, so the CCC here is identical to the
//! quantity inside the regression loss.

use crate::error::{Result, XmodalError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// classes absent from both pred and truth; their F1 is 0 by convention
    pub absent_classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rmse: f64,
    /// None when a variance is zero and the correlation is undefined
    pub pcc: Option<f64>,
    pub ccc: Option<f64>,
}

pub fn classification_report(
    pred: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<ClassificationReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(XmodalError::shape("classification_report lengths".to_string()));
    }
    if pred.iter().chain(truth).any(|&y| y >= classes) {
        return Err(XmodalError::config("class index out of range"));
    }
    let n = pred.len();
    let mut correct = 0usize;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnn = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let mut per_class_f1 = Vec::with_capacity(classes);
    let mut absent_classes = Vec::new();
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fnn[c];
        // 0/0 := 0 convention
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 };
        if tp[c] + fp[c] + fnn[c] == 0 {
            absent_classes.push(c);
        }
        per_class_f1.push(f1);
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / classes as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / n as f64,
        macro_f1,
        per_class_f1,
        absent_classes,
    })
}

pub(crate) struct Moments {
    pub mean_p: f64,
    pub mean_t: f64,
    pub var_p: f64,
    pub var_t: f64,
    pub cov: f64,
}

pub(crate) fn population_moments(pred: &[f64], truth: &[f64]) -> Moments {
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = truth.iter().sum::<f64>() / n;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    let mut cov = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        var_p += (p - mean_p) * (p - mean_p);
        var_t += (t - mean_t) * (t - mean_t);
        cov += (p - mean_p) * (t - mean_t);
    }
    Moments {
        mean_p,
        mean_t,
        var_p: var_p / n,
        var_t: var_t / n,
        cov: cov / n,
    }
}

pub fn regression_report(pred: &[f64], truth: &[f64]) -> Result<RegressionReport> {
    if pred.len() != truth.len() {
        return Err(XmodalError::shape("regression_report lengths".to_string()));
    }
    if pred.len() < 2 {
        return Err(XmodalError::Degenerate("regression_report needs >= 2 samples".to_string()));
    }
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let m = population_moments(pred, truth);
    let pcc = if m.var_p > 0.0 && m.var_t > 0.0 {
        Some(m.cov / (m.var_p.sqrt() * m.var_t.sqrt()))
    } else {
        None
    };
    let ccc_denom = m.var_p + m.var_t + (m.mean_p - m.mean_t) * (m.mean_p - m.mean_t);
    let ccc = if ccc_denom > 0.0 { Some(2.0 * m.cov / ccc_denom) } else { None };
    Ok(RegressionReport {
        rmse: mse.sqrt(),
        pcc,
        ccc,
    })
}
