//! Experiment drivers: the two-phase distillation run, the loss-term
//! ablation grid, and the label-efficiency comparison. All outputs are
//! plain CSV/JSON and byte-reproducible for a fixed config and seed list.

use crate::al::{select_top_k, predictive_entropy, AlModel, AlTrainer, AlTrainConfig};
use crate::config::ExperimentConfig;
use crate::datagen::{generate_synthetic_paired, Labels, PairedDataset, TaskKind};
use crate::distill::{argmax_rows, KdLossBreakdown, KdTrainConfig, KdTrainer, KdWeights, ModelBundle};
use crate::error::{Result, XmodalError};
use crate::metrics::{classification_report, regression_report};
use crate::numcore::RandomStream;
use serde::Serialize;
use std::fs;
use std::path::Path;

const LR_MIN: f64 = 1e-6;

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = epoch as f64 / (total - 1) as f64;
    LR_MIN + 0.5 * (lr0 - LR_MIN) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| XmodalError::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| XmodalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// 80/20 train/test split plus a 20% validation slice carved from train.
struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn split_indices(n: usize, stream: &mut RandomStream) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    let n_test = (n / 5).max(1);
    let mut test = order[..n_test].to_vec();
    let rest = &order[n_test..];
    let n_val = (rest.len() / 5).max(1);
    let mut val = rest[..n_val].to_vec();
    let mut train = rest[n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Split { train, val, test }
}

/// Task metric on clean labels; higher is better (accuracy for
/// classification, CCC for regression).
fn eval_metric(trainer: &KdTrainer, ds: &PairedDataset, idx: &[usize]) -> Result<f64> {
    let x = PairedDataset::select_rows(&ds.x_s, idx);
    let pred = trainer.student_predict(&x)?;
    match (&ds.labels_clean, ds.task) {
        (Labels::Class(all), TaskKind::Dec { classes }) => {
            let truth: Vec<usize> = idx.iter().map(|&i| all[i]).collect();
            Ok(classification_report(&argmax_rows(&pred), &truth, classes)?.accuracy)
        }
        (Labels::Scalar(all), TaskKind::Cer) => {
            let truth: Vec<f64> = idx.iter().map(|&i| all[i]).collect();
            let p: Vec<f64> = (0..pred.rows()).map(|i| pred.get(i, 0)).collect();
            Ok(regression_report(&p, &truth)?.ccc.unwrap_or(0.0))
        }
        _ => Err(XmodalError::config("label kind does not match task")),
    }
}

fn eval_teacher_metric(trainer: &KdTrainer, ds: &PairedDataset, idx: &[usize]) -> Result<f64> {
    let x = PairedDataset::select_rows(&ds.x_t, idx);
    let pred = trainer.teacher_predict(&x)?;
    match (&ds.labels_clean, ds.task) {
        (Labels::Class(all), TaskKind::Dec { classes }) => {
            let truth: Vec<usize> = idx.iter().map(|&i| all[i]).collect();
            Ok(classification_report(&argmax_rows(&pred), &truth, classes)?.accuracy)
        }
        (Labels::Scalar(all), TaskKind::Cer) => {
            let truth: Vec<f64> = idx.iter().map(|&i| all[i]).collect();
            let p: Vec<f64> = (0..pred.rows()).map(|i| pred.get(i, 0)).collect();
            Ok(regression_report(&p, &truth)?.ccc.unwrap_or(0.0))
        }
        _ => Err(XmodalError::config("label kind does not match task")),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KdSeedResult {
    pub seed: u64,
    pub student_metric: f64,
    pub teacher_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct KdSummary {
    pub config_hash: String,
    pub metric_name: String,
    pub per_seed: Vec<KdSeedResult>,
    pub student_mean: f64,
    pub student_std: f64,
    pub teacher_mean: f64,
    pub teacher_std: f64,
}

pub struct KdSingle {
    pub trainer: KdTrainer,
    pub ds: PairedDataset,
    pub test_metric: f64,
    pub teacher_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub curve: Vec<KdLossBreakdown>,
}

fn kd_train_config(cfg: &ExperimentConfig) -> KdTrainConfig {
    KdTrainConfig {
        beta: cfg.kd.beta,
        tau_temp: cfg.kd.tau_temp,
        delta: cfg.kd.delta,
        lr: cfg.optimizer.lr,
        batch: cfg.optimizer.batch,
        proto_momentum: cfg.kd.proto_momentum,
        cer_proto_bins: cfg.kd.cer_proto_bins,
    }
}

/// One full KD run: teacher pretraining on the task loss, then student
/// distillation with cosine learning-rate decay and early stopping on the
/// validation task metric.
pub fn train_kd_single(cfg: &ExperimentConfig, weights: &KdWeights, seed: u64) -> Result<KdSingle> {
    let mut spec = cfg.data.clone();
    spec.seed = seed;
    let ds = generate_synthetic_paired(&spec)?;
    let root = RandomStream::new(seed);
    let split = split_indices(ds.len(), &mut root.sub_stream(100));
    let train_ds = ds.subset(&split.train);

    let bundle = ModelBundle::new(
        ds.x_s.cols(),
        ds.x_t.cols(),
        cfg.model.hidden,
        cfg.model.embed_dim,
        ds.task,
        cfg.model.injection_layer,
        &mut root.sub_stream(101),
    )?;
    let mut trainer = KdTrainer::new(bundle, kd_train_config(cfg));

    // phase 1: teacher on its own modality
    trainer.train_teacher(&train_ds, cfg.optimizer.epochs, &mut root.sub_stream(102))?;

    // phase 2: student distillation against the frozen teacher
    let mut batch_stream = root.sub_stream(103);
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_bundle = trainer.bundle.clone();
    let mut stale = 0usize;
    let mut curve = Vec::new();
    let mut epochs_run = 0usize;
    for epoch in 0..cfg.optimizer.epochs {
        trainer.set_lr(cosine_lr(cfg.optimizer.lr, epoch, cfg.optimizer.epochs));
        let breakdown = trainer.train_student_epoch(&train_ds, weights, &mut batch_stream)?;
        curve.push(breakdown);
        epochs_run = epoch + 1;
        let val_metric = eval_metric(&trainer, &ds, &split.val)?;
        if val_metric > best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            best_bundle = trainer.bundle.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.optimizer.patience > 0 && stale >= cfg.optimizer.patience {
                break;
            }
        }
    }
    trainer.bundle = best_bundle;

    let test_metric = eval_metric(&trainer, &ds, &split.test)?;
    let teacher_metric = eval_teacher_metric(&trainer, &ds, &split.test)?;
    Ok(KdSingle {
        trainer,
        ds,
        test_metric,
        teacher_metric,
        best_epoch,
        epochs_run,
        curve,
    })
}

fn curve_csv(curve: &[KdLossBreakdown]) -> String {
    let mut s = String::from("epoch,l_sim,l_unc,l_kd,l_task,total\n");
    for (e, b) in curve.iter().enumerate() {
        s.push_str(&format!("{},{},{},{},{},{}\n", e, b.sim, b.unc, b.kd, b.task, b.total));
    }
    s
}

/// Multi-seed KD experiment; writes results.csv, summary.json and one
/// history_<seed>.csv per seed into `out`.
pub fn run_kd(cfg: &ExperimentConfig, out: &Path) -> Result<KdSummary> {
    cfg.validate()?;
    let mut per_seed = Vec::new();
    let mut results_csv =
        String::from("seed,student_metric,teacher_metric,best_epoch,epochs_run\n");
    for &seed in &cfg.seeds {
        let run = train_kd_single(cfg, &cfg.kd.weights, seed)?;
        write_file(&out.join(format!("history_{seed}.csv")), &curve_csv(&run.curve))?;
        results_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            seed, run.test_metric, run.teacher_metric, run.best_epoch, run.epochs_run
        ));
        per_seed.push(KdSeedResult {
            seed,
            student_metric: run.test_metric,
            teacher_metric: run.teacher_metric,
            best_epoch: run.best_epoch,
            epochs_run: run.epochs_run,
        });
    }
    let s: Vec<f64> = per_seed.iter().map(|r| r.student_metric).collect();
    let t: Vec<f64> = per_seed.iter().map(|r| r.teacher_metric).collect();
    let (sm, ss) = mean_std(&s);
    let (tm, ts) = mean_std(&t);
    let summary = KdSummary {
        config_hash: cfg.content_hash(),
        metric_name: match cfg.data.task {
            TaskKind::Dec { .. } => "accuracy".to_string(),
            TaskKind::Cer => "ccc".to_string(),
        },
        per_seed,
        student_mean: sm,
        student_std: ss,
        teacher_mean: tm,
        teacher_std: ts,
    };
    write_file(&out.join("results.csv"), &results_csv)?;
    write_file(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub sim: bool,
    pub unc: bool,
    pub kd: bool,
    pub mean_metric: f64,
    pub std_metric: f64,
}

/// All seven on/off subsets of {sim, unc, kd}; the task term is always on.
pub fn ablation_grid() -> Vec<KdWeights> {
    let mut grid = Vec::new();
    for mask in 1..8u8 {
        grid.push(KdWeights {
            sim: if mask & 4 != 0 { 1.0 } else { 0.0 },
            unc: if mask & 2 != 0 { 1.0 } else { 0.0 },
            kd: if mask & 1 != 0 { 1.0 } else { 0.0 },
            task: 1.0,
        });
    }
    // task-only baseline last
    grid.push(KdWeights::task_only());
    grid
}

pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut csv = String::from("sim,unc,kd,mean_metric,std_metric\n");
    for w in ablation_grid() {
        let metrics: Vec<f64> = cfg
            .seeds
            .iter()
            .map(|&seed| train_kd_single(cfg, &w, seed).map(|r| r.test_metric))
            .collect::<Result<_>>()?;
        let (mean, std) = mean_std(&metrics);
        let row = AblationRow {
            sim: w.sim > 0.0,
            unc: w.unc > 0.0,
            kd: w.kd > 0.0,
            mean_metric: mean,
            std_metric: std,
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.sim as u8, row.unc as u8, row.kd as u8, row.mean_metric, row.std_metric
        ));
        rows.push(row);
    }
    write_file(&out.join("ablation.csv"), &csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EfficiencyStrategy {
    /// single training on a random subset of the budget size
    NoAl,
    /// iterative loop with random acquisition
    Random,
    /// iterative loop with entropy acquisition
    Uncertainty,
}

pub const BUDGETS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyPoint {
    pub strategy: EfficiencyStrategy,
    pub budget: f64,
    pub seed: u64,
    pub accuracy: f64,
}

fn al_train_config(cfg: &ExperimentConfig) -> AlTrainConfig {
    AlTrainConfig {
        lr: cfg.optimizer.lr.max(1e-2),
        epochs_per_round: cfg.al.epochs_per_round,
        batch: cfg.optimizer.batch,
        eps: cfg.al.eps,
        reinit_each_round: cfg.al.reinit_each_round,
        oracle_noise_rate: cfg.al.oracle_noise_rate,
    }
}

/// Accuracy at each labeling budget for one seed and strategy. Iterative
/// strategies warm-start and grow the labeled pool to each budget in turn;
/// the no-AL baseline trains a fresh model per budget.
pub fn efficiency_curve(
    cfg: &ExperimentConfig,
    strategy: EfficiencyStrategy,
    budgets: &[f64],
    seed: u64,
) -> Result<Vec<EfficiencyPoint>> {
    let mut spec = cfg.data.clone();
    spec.seed = seed;
    let ds = generate_synthetic_paired(&spec)?;
    let classes = match ds.task {
        TaskKind::Dec { classes } => classes,
        TaskKind::Cer => {
            return Err(XmodalError::config("label efficiency requires the classification task"))
        }
    };
    let root = RandomStream::new(seed);
    let mut split_stream = root.sub_stream(200);
    let mut train_stream = root.sub_stream(201);
    let mut acq_stream = root.sub_stream(202);
    let mut model_stream = root.sub_stream(203);

    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    split_stream.shuffle(&mut order);
    let n_test = (n / 5).max(1);
    let test_idx: Vec<usize> = order[..n_test].to_vec();
    let pool: Vec<usize> = order[n_test..].to_vec();
    let truth = ds.labels_clean.as_class();
    let x_test = PairedDataset::select_rows(&ds.x_s, &test_idx);
    let y_test: Vec<usize> = test_idx.iter().map(|&i| truth[i]).collect();

    let tcfg = al_train_config(cfg);
    let fresh = |stream: &mut RandomStream| {
        AlModel::new(ds.x_s.cols(), ds.x_t.cols(), cfg.model.hidden, cfg.model.embed_dim, classes, stream)
    };
    let train_on = |trainer: &mut AlTrainer,
                    labeled: &[usize],
                    train_stream: &mut RandomStream|
     -> Result<f64> {
        let labels: Vec<usize> = labeled.iter().map(|&i| truth[i]).collect();
        trainer.train_epochs(&ds, labeled, &labels, &cfg.al.weights, tcfg.epochs_per_round, train_stream)?;
        let probs = trainer.model.predict_proba(&x_test)?;
        Ok(classification_report(&argmax_rows(&probs), &y_test, classes)?.accuracy)
    };

    let mut points = Vec::new();
    match strategy {
        EfficiencyStrategy::NoAl => {
            for &b in budgets {
                let k = ((b * pool.len() as f64).round() as usize).clamp(2, pool.len());
                let mut subset = pool[..k].to_vec();
                subset.sort_unstable();
                let mut trainer = AlTrainer::new(fresh(&mut model_stream)?, tcfg);
                let acc = train_on(&mut trainer, &subset, &mut train_stream)?;
                points.push(EfficiencyPoint { strategy, budget: b, seed, accuracy: acc });
            }
        }
        EfficiencyStrategy::Random | EfficiencyStrategy::Uncertainty => {
            let first = ((budgets[0] * pool.len() as f64).round() as usize).clamp(2, pool.len());
            let mut labeled: Vec<usize> = pool[..first].to_vec();
            labeled.sort_unstable();
            let mut unlabeled: Vec<usize> = pool[first..].to_vec();
            unlabeled.sort_unstable();
            let mut trainer = AlTrainer::new(fresh(&mut model_stream)?, tcfg);
            for (bi, &b) in budgets.iter().enumerate() {
                let acc = train_on(&mut trainer, &labeled, &mut train_stream)?;
                points.push(EfficiencyPoint { strategy, budget: b, seed, accuracy: acc });
                if bi + 1 >= budgets.len() || unlabeled.is_empty() {
                    continue;
                }
                let target =
                    ((budgets[bi + 1] * pool.len() as f64).round() as usize).min(pool.len());
                let k = target.saturating_sub(labeled.len()).min(unlabeled.len());
                if k == 0 {
                    continue;
                }
                let picked: Vec<usize> = match strategy {
                    EfficiencyStrategy::Uncertainty => {
                        let x_pool = PairedDataset::select_rows(&ds.x_s, &unlabeled);
                        let entropy =
                            predictive_entropy(&trainer.model.predict_proba(&x_pool)?)?;
                        select_top_k(&entropy, &unlabeled, k)?
                    }
                    _ => {
                        let mut cand = unlabeled.clone();
                        acq_stream.shuffle(&mut cand);
                        cand[..k].to_vec()
                    }
                };
                labeled.extend_from_slice(&picked);
                labeled.sort_unstable();
                unlabeled.retain(|i| !picked.contains(i));
            }
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencySummary {
    pub config_hash: String,
    pub points: Vec<EfficiencyPoint>,
}

impl EfficiencySummary {
    /// Mean accuracy for one strategy at one budget over all seeds.
    pub fn mean_at(&self, strategy: EfficiencyStrategy, budget: f64) -> Option<f64> {
        let xs: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.strategy == strategy && (p.budget - budget).abs() < 1e-9)
            .map(|p| p.accuracy)
            .collect();
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    }
}

pub fn run_label_efficiency(cfg: &ExperimentConfig, out: &Path) -> Result<EfficiencySummary> {
    cfg.validate()?;
    let mut points = Vec::new();
    let mut csv = String::from("strategy,budget,seed,accuracy\n");
    for strategy in [
        EfficiencyStrategy::NoAl,
        EfficiencyStrategy::Random,
        EfficiencyStrategy::Uncertainty,
    ] {
        for &seed in &cfg.seeds {
            for p in efficiency_curve(cfg, strategy, &BUDGETS, seed)? {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    match p.strategy {
                        EfficiencyStrategy::NoAl => "no_al",
                        EfficiencyStrategy::Random => "random",
                        EfficiencyStrategy::Uncertainty => "uncertainty",
                    },
                    p.budget,
                    p.seed,
                    p.accuracy
                ));
                points.push(p);
            }
        }
    }
    write_file(&out.join("label_efficiency.csv"), &csv)?;
    let summary = EfficiencySummary { config_hash: cfg.content_hash(), points };
    write_file(
        &out.join("label_efficiency_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}
