//! Synthetic paired-modality datasets with controllable modality and label
//! noise, plus CSV ingestion for externally supplied paired features.
//!
//! The generator draws a shared latent per sample and projects it into the
//! two modality spaces through fixed random linear maps. Modality T defaults
//! to a lower noise level than modality S, giving the teacher modality the
//! semantic advantage the distillation setup relies on.

use crate::error::{Result, XmodalError};
use crate::numcore::{Matrix, RandomStream};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    /// discrete classification with C classes
    Dec { classes: usize },
    /// continuous scalar regression
    Cer,
}

impl TaskKind {
    pub fn classes(&self) -> Option<usize> {
        match self {
            TaskKind::Dec { classes } => Some(*classes),
            TaskKind::Cer => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Class(Vec<usize>),
    Scalar(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Scalar(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_class(&self) -> &[usize] {
        match self {
            Labels::Class(v) => v,
            Labels::Scalar(_) => panic!("expected class labels"),
        }
    }

    pub fn as_scalar(&self) -> &[f64] {
        match self {
            Labels::Scalar(v) => v,
            Labels::Class(_) => panic!("expected scalar labels"),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
            Labels::Scalar(v) => Labels::Scalar(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub x_s: Matrix,
    pub x_t: Matrix,
    pub labels_clean: Labels,
    pub labels_noisy: Labels,
    pub task: TaskKind,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.x_s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| m.row(i).to_vec()).collect();
        Matrix::from_rows(&rows).expect("row selection")
    }

    pub fn subset(&self, idx: &[usize]) -> PairedDataset {
        PairedDataset {
            x_s: Self::select_rows(&self.x_s, idx),
            x_t: Self::select_rows(&self.x_t, idx),
            labels_clean: self.labels_clean.select(idx),
            labels_noisy: self.labels_noisy.select(idx),
            task: self.task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub task: TaskKind,
    pub latent_dim: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub noise_s: f64,
    pub noise_t: f64,
    /// symmetric class-flip probability (DEC)
    #[serde(default)]
    pub label_flip_rate: f64,
    /// additive Gaussian label noise std (CER)
    #[serde(default)]
    pub label_noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The fixed desk-scale benchmark: 3 classes, teacher modality cleaner
    /// than student modality.
    pub fn synth_3c() -> Self {
        SynthSpec {
            n: 600,
            task: TaskKind::Dec { classes: 3 },
            latent_dim: 4,
            d_s: 16,
            d_t: 16,
            noise_s: 0.8,
            noise_t: 0.2,
            label_flip_rate: 0.0,
            label_noise_std: 0.0,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(XmodalError::config("n must be >= 4"));
        }
        if self.latent_dim == 0 || self.d_s == 0 || self.d_t == 0 {
            return Err(XmodalError::config("dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return Err(XmodalError::config("label_flip_rate must be in [0,1)"));
        }
        if self.noise_s < 0.0 || self.noise_t < 0.0 || self.label_noise_std < 0.0 {
            return Err(XmodalError::config("noise levels must be nonnegative"));
        }
        if let TaskKind::Dec { classes } = self.task {
            if classes < 2 {
                return Err(XmodalError::config("DEC needs at least 2 classes"));
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, stream: &mut RandomStream) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = std * stream.next_gaussian();
    }
    m
}

pub fn generate_synthetic_paired(spec: &SynthSpec) -> Result<PairedDataset> {
    spec.validate()?;
    let root = RandomStream::new(spec.seed);
    let mut latent_stream = root.sub_stream(0);
    let mut map_s_stream = root.sub_stream(1);
    let mut map_t_stream = root.sub_stream(2);
    let mut noise_s_stream = root.sub_stream(3);
    let mut noise_t_stream = root.sub_stream(4);
    let mut label_stream = root.sub_stream(5);

    let (z, labels_clean) = match spec.task {
        TaskKind::Dec { classes } => {
            // well-separated class means, modest within-class spread
            let means = gaussian_matrix(classes, spec.latent_dim, 3.0, &mut latent_stream);
            let mut z = Matrix::zeros(spec.n, spec.latent_dim);
            let mut labels = Vec::with_capacity(spec.n);
            for i in 0..spec.n {
                let y = i % classes;
                labels.push(y);
                for k in 0..spec.latent_dim {
                    z.set(i, k, means.get(y, k) + 0.5 * latent_stream.next_gaussian());
                }
            }
            (z, Labels::Class(labels))
        }
        TaskKind::Cer => {
            // uniform latent with a smooth scalar target
            let w: Vec<f64> = (0..spec.latent_dim)
                .map(|_| latent_stream.next_gaussian())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let mut z = Matrix::zeros(spec.n, spec.latent_dim);
            let mut y = Vec::with_capacity(spec.n);
            for i in 0..spec.n {
                let mut dot = 0.0;
                for k in 0..spec.latent_dim {
                    let v = 2.0 * latent_stream.next_uniform() - 1.0;
                    z.set(i, k, v);
                    dot += v * w[k] / norm;
                }
                y.push((2.0 * dot).tanh());
            }
            (z, Labels::Scalar(y))
        }
    };

    let map_s = gaussian_matrix(spec.latent_dim, spec.d_s, 1.0, &mut map_s_stream);
    let map_t = gaussian_matrix(spec.latent_dim, spec.d_t, 1.0, &mut map_t_stream);
    let mut x_s = z.matmul(&map_s)?;
    let mut x_t = z.matmul(&map_t)?;
    for v in x_s.data_mut() {
        *v += spec.noise_s * noise_s_stream.next_gaussian();
    }
    for v in x_t.data_mut() {
        *v += spec.noise_t * noise_t_stream.next_gaussian();
    }

    let labels_noisy = match (&labels_clean, spec.task) {
        (Labels::Class(v), TaskKind::Dec { classes }) => Labels::Class(inject_label_noise(
            v,
            spec.label_flip_rate,
            classes,
            &mut label_stream,
        )?),
        (Labels::Scalar(v), TaskKind::Cer) => Labels::Scalar(inject_scalar_noise(
            v,
            spec.label_noise_std,
            &mut label_stream,
        )),
        _ => unreachable!(),
    };

    Ok(PairedDataset {
        x_s,
        x_t,
        labels_clean,
        labels_noisy,
        task: spec.task,
    })
}

/// Symmetric label noise: each label is independently replaced with a
/// uniformly drawn DIFFERENT class with probability `rate`.
pub fn inject_label_noise(
    labels: &[usize],
    rate: f64,
    classes: usize,
    stream: &mut RandomStream,
) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(XmodalError::config("symmetric flip needs at least 2 classes"));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(XmodalError::config("flip rate must be in [0,1)"));
    }
    Ok(labels
        .iter()
        .map(|&y| {
            if stream.next_uniform() < rate {
                let offset = 1 + stream.next_index(classes - 1);
                (y + offset) % classes
            } else {
                y
            }
        })
        .collect())
}

pub fn inject_scalar_noise(labels: &[f64], std: f64, stream: &mut RandomStream) -> Vec<f64> {
    labels
        .iter()
        .map(|&y| y + std * stream.next_gaussian())
        .collect()
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| XmodalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// CSV matrix with an optional single header line, detected by a non-numeric
/// first cell.
fn parse_feature_csv(text: &str) -> Result<Matrix> {
    let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if let Some(first) = lines.first() {
        let first_cell = first.split(',').next().unwrap_or("").trim();
        if first_cell.parse::<f64>().is_err() {
            lines.remove(0);
        }
    }
    Matrix::from_csv(&lines.join("\n"))
}

pub fn load_csv_dataset(
    path_s: &Path,
    path_t: &Path,
    path_labels: &Path,
    task: TaskKind,
) -> Result<PairedDataset> {
    let x_s = parse_feature_csv(&read_file(path_s)?)?;
    let x_t = parse_feature_csv(&read_file(path_t)?)?;
    let label_text = read_file(path_labels)?;
    let label_lines: Vec<&str> = label_text.lines().filter(|l| !l.trim().is_empty()).collect();
    let labels = match task {
        TaskKind::Dec { classes } => {
            let mut v = Vec::new();
            for (i, line) in label_lines.iter().enumerate() {
                let y: usize = line.trim().parse().map_err(|e: std::num::ParseIntError| {
                    XmodalError::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    }
                })?;
                if y >= classes {
                    return Err(XmodalError::Parse {
                        line: i + 1,
                        msg: format!("label {y} out of range for {classes} classes"),
                    });
                }
                v.push(y);
            }
            Labels::Class(v)
        }
        TaskKind::Cer => {
            let mut v = Vec::new();
            for (i, line) in label_lines.iter().enumerate() {
                let y: f64 = line.trim().parse().map_err(|e: std::num::ParseFloatError| {
                    XmodalError::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    }
                })?;
                v.push(y);
            }
            Labels::Scalar(v)
        }
    };
    if x_s.rows() != x_t.rows() || x_s.rows() != labels.len() {
        return Err(XmodalError::shape(format!(
            "row count mismatch: modality S has {}, modality T has {}, labels have {}",
            x_s.rows(),
            x_t.rows(),
            labels.len()
        )));
    }
    Ok(PairedDataset {
        x_s,
        x_t,
        labels_clean: labels.clone(),
        labels_noisy: labels,
        task,
    })
}

pub fn save_csv_dataset(
    ds: &PairedDataset,
    path_s: &Path,
    path_t: &Path,
    path_labels: &Path,
) -> Result<()> {
    let write = |path: &Path, content: String| {
        std::fs::write(path, content).map_err(|e| XmodalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    write(path_s, ds.x_s.to_csv())?;
    write(path_t, ds.x_t.to_csv())?;
    let labels = match &ds.labels_clean {
        Labels::Class(v) => v.iter().map(|y| y.to_string()).collect::<Vec<_>>().join("\n"),
        Labels::Scalar(v) => v.iter().map(|y| format!("{y}")).collect::<Vec<_>>().join("\n"),
    };
    write(path_labels, labels + "\n")
}
