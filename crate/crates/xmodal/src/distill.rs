//! Cross-modal knowledge distillation: teacher/student heads, cross-head
//! injection, the KL distillation loss, task losses, and the four-term
//! objective with its two-phase (teacher pretrain, student distill) loop.

use crate::alignment::{
    infonce_loss, off_diagonal_mean, similarity_matrix, similarity_matrix_backward, LossValue,
};
pub use crate::datagen::TaskKind;
use crate::datagen::{Labels, PairedDataset};
use crate::error::{Result, XmodalError};
use crate::evidential::{
    dirichlet_uncertainty, dirichlet_uncertainty_backward, prototype_similarity,
    prototype_similarity_backward, prototype_update, uncertainty_loss, PrototypeBank,
};
use crate::nn::{
    adam_step, backward, backward_with_injections, AdamConfig, AdamState, Activation,
    FinalActivation, Mlp, MlpGradients, MlpSpec,
};
use crate::numcore::{Matrix, RandomStream};
use serde::{Deserialize, Serialize};

const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub sim: f64,
    pub unc: f64,
    pub kd: f64,
    pub task: f64,
}

impl KdWeights {
    pub fn task_only() -> Self {
        KdWeights {
            sim: 0.0,
            unc: 0.0,
            kd: 0.0,
            task: 1.0,
        }
    }

    pub fn all_ones() -> Self {
        KdWeights {
            sim: 1.0,
            unc: 1.0,
            kd: 1.0,
            task: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sim", self.sim),
            ("unc", self.unc),
            ("kd", self.kd),
            ("task", self.task),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(XmodalError::config(format!(
                    "kd weight {name} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub y_t: Matrix,
    pub y_s: Matrix,
    pub y_t_given_s: Matrix,
}

/// All networks of one KD run. Hidden widths are uniform so the student
/// feature can be injected at any teacher-head layer.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub task: TaskKind,
    pub teacher_encoder: Mlp,
    pub teacher_head: Mlp,
    pub student_encoder: Mlp,
    pub student_head: Mlp,
    pub prototypes: Option<PrototypeBank>,
    pub injection_layer: usize,
}

impl ModelBundle {
    pub fn new(
        d_s: usize,
        d_t: usize,
        hidden: usize,
        embed_dim: usize,
        task: TaskKind,
        injection_layer: usize,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        let out = match task {
            TaskKind::Dec { classes } => classes,
            TaskKind::Cer => 1,
        };
        let head_final = match task {
            TaskKind::Dec { .. } => FinalActivation::Softmax,
            TaskKind::Cer => FinalActivation::Identity,
        };
        let enc_spec = |d_in: usize| {
            MlpSpec::new(
                vec![d_in, hidden, embed_dim],
                Activation::Tanh,
                FinalActivation::Identity,
            )
        };
        // 3 affine layers per head; all interior widths equal `hidden`
        let head_spec = || MlpSpec::new(vec![hidden, hidden, hidden, out], Activation::Tanh, head_final);
        if injection_layer >= 3 {
            return Err(XmodalError::config("injection layer out of range for 3-layer head"));
        }
        Ok(ModelBundle {
            task,
            teacher_encoder: Mlp::new(enc_spec(d_t)?, &mut stream.sub_stream(10)),
            teacher_head: Mlp::new(head_spec()?, &mut stream.sub_stream(11)),
            student_encoder: Mlp::new(enc_spec(d_s)?, &mut stream.sub_stream(12)),
            student_head: Mlp::new(head_spec()?, &mut stream.sub_stream(13)),
            prototypes: None,
            injection_layer,
        })
    }

    /// Index of the affine layer whose activation is the intermediate feature f.
    fn penult(enc: &Mlp) -> usize {
        enc.spec.n_affine() - 2
    }

    /// (f, e) for an encoder: penultimate activation and final embedding.
    pub fn encode(enc: &Mlp, x: &Matrix) -> Result<(crate::nn::ForwardTrace, Matrix, Matrix)> {
        let trace = enc.forward(x)?;
        let f = trace.activation_after(Self::penult(enc)).clone();
        let e = trace.output().clone();
        Ok((trace, f, e))
    }
}

/// Teacher, student and injected predictions for a paired feature batch.
pub fn head_outputs(bundle: &ModelBundle, f_s: &Matrix, f_t: &Matrix, l: usize) -> Result<HeadOutputs> {
    let y_t = bundle.teacher_head.forward(f_t)?.output().clone();
    let y_s = bundle.student_head.forward(f_s)?.output().clone();
    let y_t_given_s = bundle.teacher_head.forward_from(l, f_s)?.output().clone();
    Ok(HeadOutputs { y_t, y_s, y_t_given_s })
}

/// Mean rowwise KL(y_t || y_t_given_s). Gradient flows ONLY into
/// y_t_given_s; the teacher is frozen.
pub fn kl_distill_loss(y_t: &Matrix, y_t_given_s: &Matrix) -> Result<LossValue> {
    if y_t.rows() != y_t_given_s.rows() || y_t.cols() != y_t_given_s.cols() {
        return Err(XmodalError::shape("kl_distill_loss shapes".to_string()));
    }
    let n = y_t.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(y_t.rows(), y_t.cols());
    for i in 0..y_t.rows() {
        for j in 0..y_t.cols() {
            let p = y_t.get(i, j);
            let q = y_t_given_s.get(i, j).max(PROB_CLAMP);
            if p > 0.0 {
                value += p * (p.max(PROB_CLAMP).ln() - q.ln());
                if y_t_given_s.get(i, j) >= PROB_CLAMP {
                    grad.set(i, j, -p / q / n);
                }
            }
        }
    }
    Ok(LossValue {
        value: value / n,
        grads: vec![grad],
    })
}

/// Mean over samples of -log y_pred[label], probabilities clamped at 1e-12.
pub fn ce_loss(y_pred: &Matrix, labels: &[usize]) -> Result<LossValue> {
    if y_pred.rows() != labels.len() {
        return Err(XmodalError::shape("ce_loss lengths".to_string()));
    }
    let n = labels.len() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(y_pred.rows(), y_pred.cols());
    for (i, &y) in labels.iter().enumerate() {
        if y >= y_pred.cols() {
            return Err(XmodalError::config(format!("label {y} out of range")));
        }
        let p = y_pred.get(i, y).max(PROB_CLAMP);
        value -= p.ln();
        grad.set(i, y, -1.0 / p / n);
    }
    Ok(LossValue {
        value: value / n,
        grads: vec![grad],
    })
}

/// Regression task loss 1 - CCC with population moments; gradient w.r.t.
/// the predictions (grads[0], N x 1).
pub fn ccc_loss(pred: &[f64], truth: &[f64]) -> Result<LossValue> {
    if pred.len() != truth.len() {
        return Err(XmodalError::shape("ccc_loss lengths".to_string()));
    }
    if pred.len() < 2 {
        return Err(XmodalError::Degenerate("ccc_loss needs >= 2 samples".to_string()));
    }
    let m = crate::metrics::population_moments(pred, truth);
    let n = pred.len() as f64;
    let mean_diff = m.mean_p - m.mean_t;
    let denom = m.var_p + m.var_t + mean_diff * mean_diff;
    if denom == 0.0 {
        return Err(XmodalError::Degenerate(
            "ccc undefined for constant equal inputs".to_string(),
        ));
    }
    let ccc = 2.0 * m.cov / denom;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(truth) {
        let dcov = (t - m.mean_t) / n;
        let ddenom = 2.0 * (p - m.mean_p) / n + 2.0 * mean_diff / n;
        let dccc = (2.0 * dcov * denom - 2.0 * m.cov * ddenom) / (denom * denom);
        grad.push(-dccc);
    }
    Ok(LossValue {
        value: 1.0 - ccc,
        grads: vec![Matrix::from_vec(pred.len(), 1, grad)?],
    })
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct KdLossBreakdown {
    pub sim: f64,
    pub unc: f64,
    pub kd: f64,
    pub task: f64,
    pub total: f64,
}

/// Weighted sum of the four component values.
pub fn kd_total_loss(sim: f64, unc: f64, kd: f64, task: f64, w: &KdWeights) -> f64 {
    w.sim * sim + w.unc * unc + w.kd * kd + w.task * task
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KdTrainConfig {
    pub beta: f64,
    pub tau_temp: f64,
    pub delta: f64,
    pub lr: f64,
    pub batch: usize,
    pub proto_momentum: f64,
    /// label bins used to form prototypes in the regression task
    pub cer_proto_bins: usize,
}

impl Default for KdTrainConfig {
    fn default() -> Self {
        KdTrainConfig {
            beta: 10.0,
            tau_temp: 1.0,
            delta: 1.0,
            lr: 1e-3,
            batch: 32,
            proto_momentum: 0.9,
            cer_proto_bins: 4,
        }
    }
}

/// Class indices used for the prototype bank: the labels themselves for DEC,
/// uniform bins over [-1, 1] for CER.
pub fn prototype_classes(labels: &Labels, task: TaskKind, cer_bins: usize) -> (Vec<usize>, usize) {
    match (labels, task) {
        (Labels::Class(v), TaskKind::Dec { classes }) => (v.clone(), classes),
        (Labels::Scalar(v), TaskKind::Cer) => {
            let idx = v
                .iter()
                .map(|&y| {
                    let t = ((y + 1.0) / 2.0 * cer_bins as f64).floor() as i64;
                    t.clamp(0, cer_bins as i64 - 1) as usize
                })
                .collect();
            (idx, cer_bins)
        }
        _ => panic!("label kind does not match task"),
    }
}

struct StudentGradients {
    encoder: MlpGradients,
    head: MlpGradients,
    breakdown: KdLossBreakdown,
}

/// Forward + backward of the full four-term student objective on one batch.
/// The prototype bank is treated as a constant. Teacher parameters receive
/// no gradient anywhere.
fn student_batch_gradients(
    bundle: &ModelBundle,
    bank: Option<&PrototypeBank>,
    x_s: &Matrix,
    x_t: &Matrix,
    labels: &Labels,
    w: &KdWeights,
    cfg: &KdTrainConfig,
) -> Result<StudentGradients> {
    student_batch_gradients_with_target(bundle, bank, x_s, x_t, labels, w, cfg, None)
}

#[allow(clippy::too_many_arguments)]
fn student_batch_gradients_with_target(
    bundle: &ModelBundle,
    bank: Option<&PrototypeBank>,
    x_s: &Matrix,
    x_t: &Matrix,
    labels: &Labels,
    w: &KdWeights,
    cfg: &KdTrainConfig,
    unc_target: Option<&[f64]>,
) -> Result<StudentGradients> {
    if x_s.rows() < 2 {
        return Err(XmodalError::Degenerate(
            "distillation batch needs at least 2 samples".to_string(),
        ));
    }
    let l = bundle.injection_layer;

    // teacher pass, outputs only
    let (_t_trace, f_t, e_t) = ModelBundle::encode(&bundle.teacher_encoder, x_t)?;
    let y_t = bundle.teacher_head.forward(&f_t)?.output().clone();

    // student pass with cached traces
    let (s_trace, f_s, e_s) = ModelBundle::encode(&bundle.student_encoder, x_s)?;
    let s_head_trace = bundle.student_head.forward(&f_s)?;
    let y_s = s_head_trace.output().clone();
    let inj_trace = bundle.teacher_head.forward_from(l, &f_s)?;
    let y_t_given_s = inj_trace.output().clone();

    let mut grad_e_s = Matrix::zeros(e_s.rows(), e_s.cols());
    let mut grad_f_s = Matrix::zeros(f_s.rows(), f_s.cols());

    // L_sim
    let q = similarity_matrix(&e_s, &e_t, cfg.beta)?;
    let lv_sim = infonce_loss(&q)?;
    if w.sim > 0.0 {
        let (g_es, _g_et) =
            similarity_matrix_backward(&e_s, &e_t, cfg.beta, &lv_sim.grads[0].scale(w.sim))?;
        grad_e_s.add_assign(&g_es)?;
    }

    // L_unc: u from prototype similarity, target delta*h is stop-gradient
    let h = match unc_target {
        Some(t) => t.to_vec(),
        None => off_diagonal_mean(&q)?,
    };
    let lv_unc = if let Some(bank) = bank {
        let q_p = prototype_similarity(&e_s, bank, cfg.beta)?;
        let ev = dirichlet_uncertainty(&q_p, cfg.tau_temp)?;
        let lv = uncertainty_loss(&ev.uncertainty, &h, cfg.delta)?;
        if w.unc > 0.0 {
            let grad_u: Vec<f64> = lv.grads[0].data().iter().map(|&g| g * w.unc).collect();
            let grad_qp = dirichlet_uncertainty_backward(&q_p, cfg.tau_temp, &ev, &grad_u)?;
            let g_es = prototype_similarity_backward(&e_s, bank, cfg.beta, &grad_qp)?;
            grad_e_s.add_assign(&g_es)?;
        }
        lv.value
    } else {
        0.0
    };

    // L_kd: KL for classification, squared scalar difference for regression
    let kd_value = match bundle.task {
        TaskKind::Dec { .. } => {
            let lv = kl_distill_loss(&y_t, &y_t_given_s)?;
            if w.kd > 0.0 {
                let tail = backward(
                    &bundle.teacher_head.spec,
                    &bundle.teacher_head.params,
                    &inj_trace,
                    &lv.grads[0].scale(w.kd),
                )?;
                grad_f_s.add_assign(&tail.d_input)?;
            }
            lv.value
        }
        TaskKind::Cer => {
            let n = y_t.rows() as f64;
            let mut value = 0.0;
            let mut grad = Matrix::zeros(y_t.rows(), 1);
            for i in 0..y_t.rows() {
                let diff = y_t.get(i, 0) - y_t_given_s.get(i, 0);
                value += diff * diff;
                grad.set(i, 0, -2.0 * diff / n);
            }
            if w.kd > 0.0 {
                let tail = backward(
                    &bundle.teacher_head.spec,
                    &bundle.teacher_head.params,
                    &inj_trace,
                    &grad.scale(w.kd),
                )?;
                grad_f_s.add_assign(&tail.d_input)?;
            }
            value / n
        }
    };

    // L_task through the student head
    let (task_value, task_grad_out) = match (bundle.task, labels) {
        (TaskKind::Dec { .. }, Labels::Class(y)) => {
            let lv = ce_loss(&y_s, y)?;
            (lv.value, lv.grads[0].clone())
        }
        (TaskKind::Cer, Labels::Scalar(y)) => {
            let pred: Vec<f64> = (0..y_s.rows()).map(|i| y_s.get(i, 0)).collect();
            let lv = ccc_loss(&pred, y)?;
            (lv.value, lv.grads[0].clone())
        }
        _ => return Err(XmodalError::config("label kind does not match task")),
    };
    let mut head_grads = backward(
        &bundle.student_head.spec,
        &bundle.student_head.params,
        &s_head_trace,
        &task_grad_out.scale(w.task),
    )?;
    grad_f_s.add_assign(&head_grads.d_input)?;

    // encoder receives gradient at both the embedding and the feature
    let penult = bundle.student_encoder.spec.n_affine() - 2;
    let enc_grads = backward_with_injections(
        &bundle.student_encoder.spec,
        &bundle.student_encoder.params,
        &s_trace,
        &grad_e_s,
        &[(penult, &grad_f_s)],
    )?;
    // zero out the head's input gradient slot; it was already consumed
    head_grads.d_input = Matrix::zeros(1, 1);

    let breakdown = KdLossBreakdown {
        sim: lv_sim.value,
        unc: lv_unc,
        kd: kd_value,
        task: task_value,
        total: kd_total_loss(lv_sim.value, lv_unc, kd_value, task_value, w),
    };
    Ok(StudentGradients {
        encoder: enc_grads,
        head: head_grads,
        breakdown,
    })
}

/// Owns the bundle and its optimizer states for one KD run.
pub struct KdTrainer {
    pub bundle: ModelBundle,
    pub cfg: KdTrainConfig,
    teacher_enc_opt: AdamState,
    teacher_head_opt: AdamState,
    student_enc_opt: AdamState,
    student_head_opt: AdamState,
}

impl KdTrainer {
    pub fn new(bundle: ModelBundle, cfg: KdTrainConfig) -> Self {
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        KdTrainer {
            teacher_enc_opt: AdamState::new(&bundle.teacher_encoder.spec, adam),
            teacher_head_opt: AdamState::new(&bundle.teacher_head.spec, adam),
            student_enc_opt: AdamState::new(&bundle.student_encoder.spec, adam),
            student_head_opt: AdamState::new(&bundle.student_head.spec, adam),
            bundle,
            cfg,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for opt in [
            &mut self.teacher_enc_opt,
            &mut self.teacher_head_opt,
            &mut self.student_enc_opt,
            &mut self.student_head_opt,
        ] {
            opt.cfg.lr = lr;
        }
    }

    fn batches(n: usize, batch: usize, stream: &mut RandomStream) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        stream.shuffle(&mut idx);
        idx.chunks(batch.max(2)).map(|c| c.to_vec()).collect()
    }

    /// Phase 1: optimize teacher encoder + head on the task loss only.
    pub fn train_teacher(
        &mut self,
        ds: &PairedDataset,
        epochs: usize,
        stream: &mut RandomStream,
    ) -> Result<()> {
        if ds.is_empty() {
            return Err(XmodalError::Degenerate("empty teacher dataset".to_string()));
        }
        for _ in 0..epochs {
            for batch in Self::batches(ds.len(), self.cfg.batch, stream) {
                if batch.len() < 2 {
                    continue;
                }
                let x_t = PairedDataset::select_rows(&ds.x_t, &batch);
                let labels = ds.labels_noisy.select(&batch);
                self.teacher_step(&x_t, &labels)?;
            }
        }
        Ok(())
    }

    fn teacher_step(&mut self, x_t: &Matrix, labels: &Labels) -> Result<f64> {
        let bundle = &self.bundle;
        let (trace, f_t, _e_t) = ModelBundle::encode(&bundle.teacher_encoder, x_t)?;
        let head_trace = bundle.teacher_head.forward(&f_t)?;
        let y = head_trace.output().clone();
        let (value, grad_out) = match (bundle.task, labels) {
            (TaskKind::Dec { .. }, Labels::Class(lab)) => {
                let lv = ce_loss(&y, lab)?;
                (lv.value, lv.grads[0].clone())
            }
            (TaskKind::Cer, Labels::Scalar(lab)) => {
                let pred: Vec<f64> = (0..y.rows()).map(|i| y.get(i, 0)).collect();
                let lv = ccc_loss(&pred, lab)?;
                (lv.value, lv.grads[0].clone())
            }
            _ => return Err(XmodalError::config("label kind does not match task")),
        };
        let head_grads = backward(
            &bundle.teacher_head.spec,
            &bundle.teacher_head.params,
            &head_trace,
            &grad_out,
        )?;
        let penult = bundle.teacher_encoder.spec.n_affine() - 2;
        let zero_out = Matrix::zeros(x_t.rows(), bundle.teacher_encoder.spec.output_size());
        let enc_grads = backward_with_injections(
            &bundle.teacher_encoder.spec,
            &bundle.teacher_encoder.params,
            &trace,
            &zero_out,
            &[(penult, &head_grads.d_input)],
        )?;
        adam_step(
            &mut self.teacher_enc_opt,
            &mut self.bundle.teacher_encoder.params,
            &enc_grads,
        );
        adam_step(
            &mut self.teacher_head_opt,
            &mut self.bundle.teacher_head.params,
            &head_grads,
        );
        Ok(value)
    }

    /// Refresh the prototype bank from class means of current student
    /// embeddings over the full training set.
    pub fn refresh_prototypes(&mut self, ds: &PairedDataset) -> Result<()> {
        let (_trace, _f, e_s) = ModelBundle::encode(&self.bundle.student_encoder, &ds.x_s)?;
        let (classes, c) =
            prototype_classes(&ds.labels_noisy, self.bundle.task, self.cfg.cer_proto_bins);
        self.bundle.prototypes = Some(PrototypeBank::init_class_means(
            &e_s,
            &classes,
            c,
            self.cfg.tau_temp,
            self.cfg.proto_momentum,
        )?);
        Ok(())
    }

    /// One Adam pass of the four-term objective on a paired batch; the
    /// teacher is bit-frozen throughout.
    pub fn train_student_batch(
        &mut self,
        x_s: &Matrix,
        x_t: &Matrix,
        labels: &Labels,
        w: &KdWeights,
    ) -> Result<KdLossBreakdown> {
        let grads = student_batch_gradients(
            &self.bundle,
            self.bundle.prototypes.as_ref(),
            x_s,
            x_t,
            labels,
            w,
            &self.cfg,
        )?;
        adam_step(
            &mut self.student_enc_opt,
            &mut self.bundle.student_encoder.params,
            &grads.encoder,
        );
        adam_step(
            &mut self.student_head_opt,
            &mut self.bundle.student_head.params,
            &grads.head,
        );
        // EMA prototype refresh from the batch that was just consumed
        if let Some(bank) = &self.bundle.prototypes {
            let (_t, _f, e_s) = ModelBundle::encode(&self.bundle.student_encoder, x_s)?;
            let (classes, _) =
                prototype_classes(labels, self.bundle.task, self.cfg.cer_proto_bins);
            self.bundle.prototypes = Some(prototype_update(bank, &e_s, &classes)?);
        }
        Ok(grads.breakdown)
    }

    /// Phase 2: one epoch of student distillation over shuffled minibatches.
    pub fn train_student_epoch(
        &mut self,
        ds: &PairedDataset,
        w: &KdWeights,
        stream: &mut RandomStream,
    ) -> Result<KdLossBreakdown> {
        if self.bundle.prototypes.is_none() {
            self.refresh_prototypes(ds)?;
        }
        let mut agg = KdLossBreakdown::default();
        let mut count = 0usize;
        for batch in Self::batches(ds.len(), self.cfg.batch, stream) {
            if batch.len() < 2 {
                continue;
            }
            let x_s = PairedDataset::select_rows(&ds.x_s, &batch);
            let x_t = PairedDataset::select_rows(&ds.x_t, &batch);
            let labels = ds.labels_noisy.select(&batch);
            let b = self.train_student_batch(&x_s, &x_t, &labels, w)?;
            agg.sim += b.sim;
            agg.unc += b.unc;
            agg.kd += b.kd;
            agg.task += b.task;
            agg.total += b.total;
            count += 1;
        }
        if count > 0 {
            let k = count as f64;
            agg.sim /= k;
            agg.unc /= k;
            agg.kd /= k;
            agg.task /= k;
            agg.total /= k;
        }
        Ok(agg)
    }

    /// Student predictions (probabilities for DEC, scalars for CER).
    pub fn student_predict(&self, x_s: &Matrix) -> Result<Matrix> {
        let (_trace, f_s, _e) = ModelBundle::encode(&self.bundle.student_encoder, x_s)?;
        Ok(self.bundle.student_head.forward(&f_s)?.output().clone())
    }

    /// Teacher predictions on modality T.
    pub fn teacher_predict(&self, x_t: &Matrix) -> Result<Matrix> {
        let (_trace, f_t, _e) = ModelBundle::encode(&self.bundle.teacher_encoder, x_t)?;
        Ok(self.bundle.teacher_head.forward(&f_t)?.output().clone())
    }
}

/// Value-only evaluation of the student objective on a batch; used by
/// gradient checks and validation tracking.
pub fn student_batch_loss(
    bundle: &ModelBundle,
    bank: Option<&PrototypeBank>,
    x_s: &Matrix,
    x_t: &Matrix,
    labels: &Labels,
    w: &KdWeights,
    cfg: &KdTrainConfig,
) -> Result<KdLossBreakdown> {
    student_batch_gradients(bundle, bank, x_s, x_t, labels, w, cfg).map(|g| g.breakdown)
}

/// Gradients of the student objective (encoder, head) without updating;
/// exposed for the gradient-check harness.
pub fn student_batch_loss_gradients(
    bundle: &ModelBundle,
    bank: Option<&PrototypeBank>,
    x_s: &Matrix,
    x_t: &Matrix,
    labels: &Labels,
    w: &KdWeights,
    cfg: &KdTrainConfig,
) -> Result<(KdLossBreakdown, MlpGradients, MlpGradients)> {
    student_batch_gradients(bundle, bank, x_s, x_t, labels, w, cfg)
        .map(|g| (g.breakdown, g.encoder, g.head))
}

/// The (stop-gradient) uncertainty target of a batch: off-diagonal mean of
/// the cross-modal similarity matrix.
pub fn uncertainty_target(
    bundle: &ModelBundle,
    x_s: &Matrix,
    x_t: &Matrix,
    beta: f64,
) -> Result<Vec<f64>> {
    let (_ts, _fs, e_s) = ModelBundle::encode(&bundle.student_encoder, x_s)?;
    let (_tt, _ft, e_t) = ModelBundle::encode(&bundle.teacher_encoder, x_t)?;
    off_diagonal_mean(&similarity_matrix(&e_s, &e_t, beta)?)
}

/// Loss value with the uncertainty target pinned to `unc_target` instead of
/// being recomputed. Finite-difference checks need this: the target is a
/// stop-gradient constant, so the differentiated function must hold it fixed.
#[allow(clippy::too_many_arguments)]
pub fn student_batch_loss_frozen(
    bundle: &ModelBundle,
    bank: Option<&PrototypeBank>,
    x_s: &Matrix,
    x_t: &Matrix,
    labels: &Labels,
    w: &KdWeights,
    cfg: &KdTrainConfig,
    unc_target: &[f64],
) -> Result<KdLossBreakdown> {
    student_batch_gradients_with_target(bundle, bank, x_s, x_t, labels, w, cfg, Some(unc_target))
        .map(|g| g.breakdown)
}

pub fn argmax_rows(p: &Matrix) -> Vec<usize> {
    (0..p.rows())
        .map(|i| {
            p.row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap()
        })
        .collect()
}
