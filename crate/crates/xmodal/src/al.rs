//! Cross-modal consistency-guided active learning: reliability regression,
//! entropy acquisition, pool bookkeeping, and the iterate-train-query loop
//! with a simulated oracle. Deployment-time predictions are a function of
//! modality A only.

use crate::alignment::{
    similarity_matrix, similarity_matrix_backward, symmetric_contrastive_loss, LossValue,
};
use crate::datagen::{PairedDataset, TaskKind};
use crate::error::{Result, XmodalError};
use crate::metrics::classification_report;
use crate::nn::{
    adam_step, backward, AdamConfig, AdamState, Activation, FinalActivation, Mlp, MlpSpec,
};
use crate::numcore::{Matrix, RandomStream};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pool {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
}

impl Pool {
    pub fn new(labeled: Vec<usize>, unlabeled: Vec<usize>) -> Result<Self> {
        let pool = Pool { labeled, unlabeled };
        pool.check_disjoint()?;
        Ok(pool)
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for &i in self.labeled.iter().chain(&self.unlabeled) {
            if !seen.insert(i) {
                return Err(XmodalError::Pool(format!("index {i} appears twice")));
            }
        }
        Ok(())
    }
}

/// Move queried indices from the unlabeled to the labeled pool.
pub fn pool_update(pool: &Pool, q: &[usize]) -> Result<Pool> {
    for &i in q {
        if pool.labeled.contains(&i) {
            return Err(XmodalError::Pool(format!("query index {i} already labeled")));
        }
        if !pool.unlabeled.contains(&i) {
            return Err(XmodalError::Pool(format!("query index {i} not in unlabeled pool")));
        }
    }
    let mut labeled = pool.labeled.clone();
    labeled.extend_from_slice(q);
    labeled.sort_unstable();
    let unlabeled: Vec<usize> = pool
        .unlabeled
        .iter()
        .copied()
        .filter(|i| !q.contains(i))
        .collect();
    Pool::new(labeled, unlabeled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlWeights {
    pub sim: f64,
    pub rel: f64,
    pub task: f64,
}

impl AlWeights {
    pub fn all_ones() -> Self {
        AlWeights {
            sim: 1.0,
            rel: 1.0,
            task: 1.0,
        }
    }

    pub fn task_only() -> Self {
        AlWeights {
            sim: 0.0,
            rel: 0.0,
            task: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sim", self.sim), ("rel", self.rel), ("task", self.task)] {
            if !v.is_finite() || v < 0.0 {
                return Err(XmodalError::config(format!(
                    "al weight {name} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// fraction of the unlabeled pool queried per round
    pub ratio: f64,
    pub rounds: usize,
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(XmodalError::config("acquisition ratio must be in [0,1]"));
        }
        Ok(())
    }
}

/// r*_i = 1 - minmax(h_i); the sample most similar to non-paired samples
/// gets the lowest reliability target.
pub fn reliability_target(s: &Matrix, eps: f64) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(XmodalError::config("eps must be positive"));
    }
    let h = crate::alignment::off_diagonal_mean(s)?;
    let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(h.iter().map(|&hi| 1.0 - (hi - min) / (max - min + eps)).collect())
}

/// L_rel = 1/2 * (mean (r_a - r*)^2 + mean (r_b - r*)^2); the target is a
/// constant. grads[0] is d/d r_a, grads[1] is d/d r_b, both N x 1.
pub fn reliability_loss(r_a: &[f64], r_b: &[f64], r_star: &[f64]) -> Result<LossValue> {
    if r_a.len() != r_star.len() || r_b.len() != r_star.len() {
        return Err(XmodalError::shape("reliability_loss lengths".to_string()));
    }
    if r_a.is_empty() {
        return Err(XmodalError::Degenerate("empty reliability batch".to_string()));
    }
    let n = r_a.len() as f64;
    let mut value = 0.0;
    let mut ga = Vec::with_capacity(r_a.len());
    let mut gb = Vec::with_capacity(r_b.len());
    for ((&a, &b), &t) in r_a.iter().zip(r_b).zip(r_star) {
        value += 0.5 * ((a - t) * (a - t) + (b - t) * (b - t)) / n;
        ga.push((a - t) / n);
        gb.push((b - t) / n);
    }
    Ok(LossValue {
        value,
        grads: vec![
            Matrix::from_vec(r_a.len(), 1, ga)?,
            Matrix::from_vec(r_b.len(), 1, gb)?,
        ],
    })
}

/// Shannon entropy per row; rows must be probability vectors within 1e-6.
pub fn predictive_entropy(p: &Matrix) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(p.rows());
    for i in 0..p.rows() {
        let row = p.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < -1e-12) {
            return Err(XmodalError::Degenerate(format!(
                "row {i} is not a probability vector (sum {sum})"
            )));
        }
        let h: f64 = row
            .iter()
            .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
            .sum();
        out.push(h);
    }
    Ok(out)
}

/// Indices of the k = floor(ratio*|u|) largest uncertainties (k >= 1 when
/// ratio > 0 and the pool is nonempty); ties broken by ascending dataset
/// index. `indices[i]` is the dataset index of `u[i]`.
pub fn select_top_tau(u: &[f64], indices: &[usize], ratio: f64) -> Result<Vec<usize>> {
    if u.len() != indices.len() {
        return Err(XmodalError::shape("select_top_tau lengths".to_string()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(XmodalError::config("ratio must be in [0,1]"));
    }
    if u.is_empty() || ratio == 0.0 {
        return Ok(Vec::new());
    }
    let k = ((ratio * u.len() as f64).floor() as usize).clamp(1, u.len());
    select_top_k(u, indices, k)
}

pub fn select_top_k(u: &[f64], indices: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut pairs: Vec<(f64, usize)> = u.iter().copied().zip(indices.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(pairs.into_iter().take(k).map(|(_, i)| i).collect())
}

pub fn al_total_loss(sim: f64, rel: f64, task: f64, w: &AlWeights) -> f64 {
    w.sim * sim + w.rel * rel + w.task * task
}

/// Encoders for both modalities, per-modality reliability heads, and the
/// modality-A task head used at deployment.
#[derive(Debug, Clone)]
pub struct AlModel {
    pub encoder_a: Mlp,
    pub encoder_b: Mlp,
    pub rel_head_a: Mlp,
    pub rel_head_b: Mlp,
    pub task_head: Mlp,
}

impl AlModel {
    pub fn new(
        d_a: usize,
        d_b: usize,
        hidden: usize,
        embed: usize,
        classes: usize,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        let enc = |d_in: usize| {
            MlpSpec::new(
                vec![d_in, hidden, embed],
                Activation::Tanh,
                FinalActivation::Identity,
            )
        };
        let rel = || {
            MlpSpec::new(
                vec![embed, hidden, 1],
                Activation::Tanh,
                FinalActivation::Sigmoid,
            )
        };
        let task = MlpSpec::new(
            vec![embed, hidden, classes],
            Activation::Tanh,
            FinalActivation::Softmax,
        )?;
        Ok(AlModel {
            encoder_a: Mlp::new(enc(d_a)?, &mut stream.sub_stream(20)),
            encoder_b: Mlp::new(enc(d_b)?, &mut stream.sub_stream(21)),
            rel_head_a: Mlp::new(rel()?, &mut stream.sub_stream(22)),
            rel_head_b: Mlp::new(rel()?, &mut stream.sub_stream(23)),
            task_head: Mlp::new(task, &mut stream.sub_stream(24)),
        })
    }

    /// Deployment path: class probabilities from modality A alone.
    pub fn predict_proba(&self, x_a: &Matrix) -> Result<Matrix> {
        let z = self.encoder_a.forward(x_a)?;
        Ok(self.task_head.forward(z.output())?.output().clone())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlTrainConfig {
    pub lr: f64,
    pub epochs_per_round: usize,
    pub batch: usize,
    pub eps: f64,
    /// re-initialize the model each round instead of warm-starting
    pub reinit_each_round: bool,
    /// label noise applied by the simulated oracle at annotation time
    pub oracle_noise_rate: f64,
}

impl Default for AlTrainConfig {
    fn default() -> Self {
        AlTrainConfig {
            lr: 1e-2,
            epochs_per_round: 30,
            batch: 32,
            eps: 1e-8,
            reinit_each_round: false,
            oracle_noise_rate: 0.0,
        }
    }
}

pub struct AlTrainer {
    pub model: AlModel,
    cfg: AlTrainConfig,
    opt_enc_a: AdamState,
    opt_enc_b: AdamState,
    opt_rel_a: AdamState,
    opt_rel_b: AdamState,
    opt_task: AdamState,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlLossBreakdown {
    pub sim: f64,
    pub rel: f64,
    pub task: f64,
    pub total: f64,
}

impl AlTrainer {
    pub fn new(model: AlModel, cfg: AlTrainConfig) -> Self {
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        AlTrainer {
            opt_enc_a: AdamState::new(&model.encoder_a.spec, adam),
            opt_enc_b: AdamState::new(&model.encoder_b.spec, adam),
            opt_rel_a: AdamState::new(&model.rel_head_a.spec, adam),
            opt_rel_b: AdamState::new(&model.rel_head_b.spec, adam),
            opt_task: AdamState::new(&model.task_head.spec, adam),
            model,
            cfg,
        }
    }

    /// One Adam pass of the three-term objective on a labeled batch.
    pub fn train_batch(
        &mut self,
        x_a: &Matrix,
        x_b: &Matrix,
        labels: &[usize],
        w: &AlWeights,
    ) -> Result<AlLossBreakdown> {
        if x_a.rows() < 2 {
            return Err(XmodalError::Degenerate(
                "al batch needs at least 2 samples".to_string(),
            ));
        }
        let m = &self.model;
        let trace_a = m.encoder_a.forward(x_a)?;
        let trace_b = m.encoder_b.forward(x_b)?;
        let z_a = trace_a.output().clone();
        let z_b = trace_b.output().clone();

        let mut grad_z_a = Matrix::zeros(z_a.rows(), z_a.cols());
        let mut grad_z_b = Matrix::zeros(z_b.rows(), z_b.cols());

        // alignment
        let s = similarity_matrix(&z_a, &z_b, 1.0)?;
        let lv_sim = symmetric_contrastive_loss(&s)?;
        if w.sim > 0.0 {
            let (ga, gb) = similarity_matrix_backward(&z_a, &z_b, 1.0, &lv_sim.grads[0].scale(w.sim))?;
            grad_z_a.add_assign(&ga)?;
            grad_z_b.add_assign(&gb)?;
        }

        // reliability regression toward the cross-modal target
        let r_star = reliability_target(&s, self.cfg.eps)?;
        let rel_trace_a = m.rel_head_a.forward(&z_a)?;
        let rel_trace_b = m.rel_head_b.forward(&z_b)?;
        let r_a: Vec<f64> = (0..x_a.rows()).map(|i| rel_trace_a.output().get(i, 0)).collect();
        let r_b: Vec<f64> = (0..x_b.rows()).map(|i| rel_trace_b.output().get(i, 0)).collect();
        let lv_rel = reliability_loss(&r_a, &r_b, &r_star)?;
        let mut rel_a_grads = None;
        let mut rel_b_grads = None;
        if w.rel > 0.0 {
            let ga = backward(
                &m.rel_head_a.spec,
                &m.rel_head_a.params,
                &rel_trace_a,
                &lv_rel.grads[0].scale(w.rel),
            )?;
            let gb = backward(
                &m.rel_head_b.spec,
                &m.rel_head_b.params,
                &rel_trace_b,
                &lv_rel.grads[1].scale(w.rel),
            )?;
            grad_z_a.add_assign(&ga.d_input)?;
            grad_z_b.add_assign(&gb.d_input)?;
            rel_a_grads = Some(ga);
            rel_b_grads = Some(gb);
        }

        // task supervision from modality A only
        let task_trace = m.task_head.forward(&z_a)?;
        let probs = task_trace.output().clone();
        let lv_task = crate::distill::ce_loss(&probs, labels)?;
        let task_grads = backward(
            &m.task_head.spec,
            &m.task_head.params,
            &task_trace,
            &lv_task.grads[0].scale(w.task),
        )?;
        grad_z_a.add_assign(&task_grads.d_input)?;

        let enc_a_grads = backward(&m.encoder_a.spec, &m.encoder_a.params, &trace_a, &grad_z_a)?;
        let enc_b_grads = backward(&m.encoder_b.spec, &m.encoder_b.params, &trace_b, &grad_z_b)?;

        adam_step(&mut self.opt_enc_a, &mut self.model.encoder_a.params, &enc_a_grads);
        adam_step(&mut self.opt_enc_b, &mut self.model.encoder_b.params, &enc_b_grads);
        if let Some(g) = rel_a_grads {
            adam_step(&mut self.opt_rel_a, &mut self.model.rel_head_a.params, &g);
        }
        if let Some(g) = rel_b_grads {
            adam_step(&mut self.opt_rel_b, &mut self.model.rel_head_b.params, &g);
        }
        adam_step(&mut self.opt_task, &mut self.model.task_head.params, &task_grads);

        Ok(AlLossBreakdown {
            sim: lv_sim.value,
            rel: lv_rel.value,
            task: lv_task.value,
            total: al_total_loss(lv_sim.value, lv_rel.value, lv_task.value, w),
        })
    }

    pub fn train_epochs(
        &mut self,
        ds: &PairedDataset,
        indices: &[usize],
        labels: &[usize],
        w: &AlWeights,
        epochs: usize,
        stream: &mut RandomStream,
    ) -> Result<()> {
        // labels[i] annotates dataset index indices[i]
        let order: Vec<usize> = (0..indices.len()).collect();
        for _ in 0..epochs {
            let mut shuffled = order.clone();
            stream.shuffle(&mut shuffled);
            for chunk in shuffled.chunks(self.cfg.batch.max(2)) {
                if chunk.len() < 2 {
                    continue;
                }
                let rows: Vec<usize> = chunk.iter().map(|&p| indices[p]).collect();
                let x_a = PairedDataset::select_rows(&ds.x_s, &rows);
                let x_b = PairedDataset::select_rows(&ds.x_t, &rows);
                let batch_labels: Vec<usize> = chunk.iter().map(|&p| labels[p]).collect();
                self.train_batch(&x_a, &x_b, &batch_labels, w)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlRound {
    pub round: usize,
    pub labeled_fraction: f64,
    pub test_accuracy: f64,
    pub mean_pool_entropy: f64,
    pub topfrac_entropy_mean: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlHistory {
    pub rounds: Vec<AlRound>,
}

impl AlHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "round,labeled_fraction,test_accuracy,mean_pool_entropy,topfrac_entropy_mean\n",
        );
        for r in &self.rounds {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.round, r.labeled_fraction, r.test_accuracy, r.mean_pool_entropy, r.topfrac_entropy_mean
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Uncertainty,
    Random,
}

pub struct AlRunConfig {
    pub hidden: usize,
    pub embed: usize,
    pub train: AlTrainConfig,
    pub acq: AcquisitionConfig,
    pub weights: AlWeights,
    pub initial_labeled_fraction: f64,
    pub test_fraction: f64,
}

impl Default for AlRunConfig {
    fn default() -> Self {
        AlRunConfig {
            hidden: 16,
            embed: 8,
            train: AlTrainConfig::default(),
            acq: AcquisitionConfig { ratio: 0.2, rounds: 5 },
            weights: AlWeights::all_ones(),
            initial_labeled_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

pub struct AlRun {
    pub history: AlHistory,
    pub final_pool: Pool,
    pub trainer: AlTrainer,
    pub test_indices: Vec<usize>,
}

fn check_pool_invariants(pool: &Pool, total: usize) -> Result<()> {
    if pool.total() != total {
        return Err(XmodalError::Pool(format!(
            "pool union size {} != dataset size {total}",
            pool.total()
        )));
    }
    pool.check_disjoint()
}

/// The full iterate-train-query loop. The simulated oracle looks up clean
/// labels (optionally corrupted at annotation time). Per-round the history
/// records test accuracy, the mean unlabeled-pool entropy, and the mean
/// entropy of the queried top fraction.
pub fn run_al_loop(
    ds: &PairedDataset,
    cfg: &AlRunConfig,
    strategy: Strategy,
    seed: u64,
) -> Result<AlRun> {
    let classes = match ds.task {
        TaskKind::Dec { classes } => classes,
        TaskKind::Cer => {
            return Err(XmodalError::config("active learning supports the classification task"))
        }
    };
    cfg.acq.validate()?;
    cfg.weights.validate()?;
    let root = RandomStream::new(seed);
    let mut split_stream = root.sub_stream(0);
    let mut train_stream = root.sub_stream(1);
    let mut oracle_stream = root.sub_stream(2);
    let mut random_acq_stream = root.sub_stream(3);
    let mut model_stream = root.sub_stream(4);

    // fixed holdout split before AL begins
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    split_stream.shuffle(&mut order);
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let test_indices: Vec<usize> = {
        let mut t = order[..n_test].to_vec();
        t.sort_unstable();
        t
    };
    let pool_indices: Vec<usize> = order[n_test..].to_vec();
    let n_pool = pool_indices.len();
    let n_init = ((cfg.initial_labeled_fraction * n_pool as f64).round() as usize).clamp(1, n_pool);
    let mut labeled: Vec<usize> = pool_indices[..n_init].to_vec();
    labeled.sort_unstable();
    let mut unlabeled: Vec<usize> = pool_indices[n_init..].to_vec();
    unlabeled.sort_unstable();
    let mut pool = Pool::new(labeled, unlabeled)?;
    if pool.labeled().is_empty() {
        return Err(XmodalError::config("initial labeled pool is empty"));
    }

    // annotations: dataset index -> oracle label, acquired over time
    let truth = ds.labels_clean.as_class();
    let annotate = |idx: &[usize], stream: &mut RandomStream| -> Result<Vec<usize>> {
        let clean: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
        if cfg.train.oracle_noise_rate > 0.0 {
            crate::datagen::inject_label_noise(&clean, cfg.train.oracle_noise_rate, classes, stream)
        } else {
            Ok(clean)
        }
    };
    let mut labels_acquired: Vec<(usize, usize)> = pool
        .labeled()
        .iter()
        .copied()
        .zip(annotate(pool.labeled(), &mut oracle_stream)?)
        .collect();

    let x_test = PairedDataset::select_rows(&ds.x_s, &test_indices);
    let y_test: Vec<usize> = test_indices.iter().map(|&i| truth[i]).collect();

    let fresh_model = |stream: &mut RandomStream| {
        AlModel::new(ds.x_s.cols(), ds.x_t.cols(), cfg.hidden, cfg.embed, classes, stream)
    };
    let mut trainer = AlTrainer::new(fresh_model(&mut model_stream)?, cfg.train);
    let mut history = AlHistory::default();

    for round in 0..=cfg.acq.rounds {
        if cfg.train.reinit_each_round {
            trainer = AlTrainer::new(fresh_model(&mut model_stream)?, cfg.train);
        }
        let indices: Vec<usize> = labels_acquired.iter().map(|&(i, _)| i).collect();
        let labels: Vec<usize> = labels_acquired.iter().map(|&(_, y)| y).collect();
        trainer.train_epochs(
            ds,
            &indices,
            &labels,
            &cfg.weights,
            cfg.train.epochs_per_round,
            &mut train_stream,
        )?;

        // evaluation on the fixed holdout, modality A only
        let probs = trainer.model.predict_proba(&x_test)?;
        let pred = crate::distill::argmax_rows(&probs);
        let acc = classification_report(&pred, &y_test, classes)?.accuracy;

        // uncertainty over the remaining pool
        let (mean_entropy, top_mean, selected) = if pool.unlabeled().is_empty() {
            (0.0, 0.0, Vec::new())
        } else {
            let x_pool = PairedDataset::select_rows(&ds.x_s, pool.unlabeled());
            let entropy = predictive_entropy(&trainer.model.predict_proba(&x_pool)?)?;
            let mean = entropy.iter().sum::<f64>() / entropy.len() as f64;
            let selected = if round == cfg.acq.rounds {
                Vec::new()
            } else {
                match strategy {
                    Strategy::Uncertainty => {
                        select_top_tau(&entropy, pool.unlabeled(), cfg.acq.ratio)?
                    }
                    Strategy::Random => {
                        let k = ((cfg.acq.ratio * entropy.len() as f64).floor() as usize)
                            .clamp(1, entropy.len());
                        let mut candidates = pool.unlabeled().to_vec();
                        random_acq_stream.shuffle(&mut candidates);
                        let mut sel = candidates[..k].to_vec();
                        sel.sort_unstable();
                        sel
                    }
                }
            };
            // mean entropy of the queried (or would-be top-tau) fraction
            let top = select_top_tau(&entropy, pool.unlabeled(), cfg.acq.ratio.max(0.05))?;
            let lookup: std::collections::BTreeMap<usize, f64> = pool
                .unlabeled()
                .iter()
                .copied()
                .zip(entropy.iter().copied())
                .collect();
            let top_mean = if top.is_empty() {
                0.0
            } else {
                top.iter().map(|i| lookup[i]).sum::<f64>() / top.len() as f64
            };
            (mean, top_mean, selected)
        };

        history.rounds.push(AlRound {
            round,
            labeled_fraction: pool.labeled().len() as f64 / pool.total() as f64,
            test_accuracy: acc,
            mean_pool_entropy: mean_entropy,
            topfrac_entropy_mean: top_mean,
        });

        if round < cfg.acq.rounds && !selected.is_empty() {
            let new_labels = annotate(&selected, &mut oracle_stream)?;
            labels_acquired.extend(selected.iter().copied().zip(new_labels));
            pool = pool_update(&pool, &selected)?;
            check_pool_invariants(&pool, n_pool)?;
        }
    }

    Ok(AlRun {
        history,
        final_pool: pool,
        trainer,
        test_indices,
    })
}
