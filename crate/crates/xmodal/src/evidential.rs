//! Class-prototype bank, Dirichlet evidence and the uncertainty-alignment loss.

use crate::alignment::{similarity_matrix, similarity_matrix_backward, LossValue};
use crate::error::{Result, XmodalError};
use crate::numcore::Matrix;

/// Clamp for exp arguments; only pathological inputs are affected.
const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// one prototype row per class
    pub phi: Matrix,
    pub tau_temp: f64,
    pub update_momentum: f64,
}

impl PrototypeBank {
    pub fn new(phi: Matrix, tau_temp: f64, update_momentum: f64) -> Result<Self> {
        if tau_temp <= 0.0 {
            return Err(XmodalError::config("tau_temp must be positive"));
        }
        if !(0.0..=1.0).contains(&update_momentum) {
            return Err(XmodalError::config("update_momentum must be in [0,1]"));
        }
        Ok(PrototypeBank {
            phi,
            tau_temp,
            update_momentum,
        })
    }

    pub fn classes(&self) -> usize {
        self.phi.rows()
    }

    /// Per-class mean of labeled embeddings; classes with no samples get a
    /// zero prototype.
    pub fn init_class_means(
        e: &Matrix,
        labels: &[usize],
        classes: usize,
        tau_temp: f64,
        update_momentum: f64,
    ) -> Result<Self> {
        let mut phi = Matrix::zeros(classes, e.cols());
        let mut counts = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(XmodalError::config(format!("label {y} out of range")));
            }
            counts[y] += 1;
            for (k, &v) in e.row(i).iter().enumerate() {
                phi.set(y, k, phi.get(y, k) + v);
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                for v in phi.row_mut(c) {
                    *v /= count as f64;
                }
            }
        }
        PrototypeBank::new(phi, tau_temp, update_momentum)
    }
}

#[derive(Debug, Clone)]
pub struct EvidentialResult {
    /// N x c concentration parameters, all > 1
    pub alpha: Matrix,
    /// total evidence per sample, > c
    pub evidence: Vec<f64>,
    /// aleatoric uncertainty per sample, in [0, 1)
    pub uncertainty: Vec<f64>,
}

/// Q[i][j] = beta * cos(e_i, phi_j).
pub fn prototype_similarity(e: &Matrix, bank: &PrototypeBank, beta: f64) -> Result<Matrix> {
    similarity_matrix(e, &bank.phi, beta)
}

/// Gradient w.r.t. the embeddings only; prototypes are EMA-maintained, not
/// gradient-trained.
pub fn prototype_similarity_backward(
    e: &Matrix,
    bank: &PrototypeBank,
    beta: f64,
    grad_q: &Matrix,
) -> Result<Matrix> {
    let (grad_e, _) = similarity_matrix_backward(e, &bank.phi, beta, grad_q)?;
    Ok(grad_e)
}

/// alpha = exp(q/tau) + 1, evidence e_i = sum_j alpha_ij, u_i = 1 - c/e_i.
pub fn dirichlet_uncertainty(q: &Matrix, tau_temp: f64) -> Result<EvidentialResult> {
    if tau_temp <= 0.0 {
        return Err(XmodalError::config("tau_temp must be positive"));
    }
    let c = q.cols();
    let alpha = q.map(|v| (v / tau_temp).clamp(-EXP_CLAMP, EXP_CLAMP).exp() + 1.0);
    let evidence: Vec<f64> = (0..q.rows()).map(|i| alpha.row(i).iter().sum()).collect();
    let uncertainty: Vec<f64> = evidence.iter().map(|&e| 1.0 - c as f64 / e).collect();
    Ok(EvidentialResult {
        alpha,
        evidence,
        uncertainty,
    })
}

/// du_i/dq_ij composed with an upstream du gradient: returns dL/dq given dL/du.
pub fn dirichlet_uncertainty_backward(
    q: &Matrix,
    tau_temp: f64,
    result: &EvidentialResult,
    grad_u: &[f64],
) -> Result<Matrix> {
    if grad_u.len() != q.rows() {
        return Err(XmodalError::shape("grad_u length mismatch".to_string()));
    }
    let c = q.cols() as f64;
    let mut grad_q = Matrix::zeros(q.rows(), q.cols());
    for i in 0..q.rows() {
        let e = result.evidence[i];
        for j in 0..q.cols() {
            let arg = (q.get(i, j) / tau_temp).clamp(-EXP_CLAMP, EXP_CLAMP);
            // d alpha_ij / d q_ij = exp(arg)/tau; du_i/d e_i = c/e^2
            let d = c / (e * e) * arg.exp() / tau_temp;
            grad_q.set(i, j, grad_u[i] * d);
        }
    }
    Ok(grad_q)
}

/// L_unc = (1/N) sum_j (u_j - delta*h_j)^2; gradient w.r.t. u (h is a
/// stop-gradient target). grads[0] is N x 1.
pub fn uncertainty_loss(u: &[f64], h: &[f64], delta: f64) -> Result<LossValue> {
    if u.len() != h.len() {
        return Err(XmodalError::shape("uncertainty_loss length mismatch".to_string()));
    }
    if u.is_empty() {
        return Err(XmodalError::Degenerate("empty uncertainty batch".to_string()));
    }
    let n = u.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(u.len());
    for (&ui, &hi) in u.iter().zip(h) {
        let diff = ui - delta * hi;
        value += diff * diff;
        grad.push(2.0 * diff / n);
    }
    Ok(LossValue {
        value: value / n,
        grads: vec![Matrix::from_vec(u.len(), 1, grad)?],
    })
}

/// EMA prototype update: phi_j <- m*phi_j + (1-m)*mean of class-j embeddings,
/// skipped for classes absent from the batch.
pub fn prototype_update(bank: &PrototypeBank, e: &Matrix, labels: &[usize]) -> Result<PrototypeBank> {
    let classes = bank.classes();
    let m = bank.update_momentum;
    let mut sums = Matrix::zeros(classes, e.cols());
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(XmodalError::config(format!("label {y} out of range")));
        }
        counts[y] += 1;
        for (k, &v) in e.row(i).iter().enumerate() {
            sums.set(y, k, sums.get(y, k) + v);
        }
    }
    let mut phi = bank.phi.clone();
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            for k in 0..e.cols() {
                let mean = sums.get(c, k) / count as f64;
                phi.set(c, k, m * phi.get(c, k) + (1.0 - m) * mean);
            }
        }
    }
    Ok(PrototypeBank {
        phi,
        tau_temp: bank.tau_temp,
        update_momentum: bank.update_momentum,
    })
}
