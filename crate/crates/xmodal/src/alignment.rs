//! Cross-modal cosine similarity matrices and contrastive alignment losses.

use crate::error::{Result, XmodalError};
use crate::numcore::Matrix;

pub const NORM_EPS: f64 = 1e-12;

/// Loss scalar plus gradients with respect to each input matrix, in the
/// order documented by each op.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

/// Q[i][j] = beta * cos(e_a[i], e_b[j]); zero-norm rows contribute 0.
pub fn similarity_matrix(e_a: &Matrix, e_b: &Matrix, beta: f64) -> Result<Matrix> {
    if e_a.cols() != e_b.cols() {
        return Err(XmodalError::shape(format!(
            "similarity_matrix dims {} vs {}",
            e_a.cols(),
            e_b.cols()
        )));
    }
    let na = e_a.row_l2_normalize(NORM_EPS);
    let nb = e_b.row_l2_normalize(NORM_EPS);
    Ok(na.matmul(&nb.transpose())?.scale(beta))
}

/// Gradients of a scalar loss through `similarity_matrix`, given the loss
/// gradient w.r.t. Q. Returns (grad_e_a, grad_e_b).
pub fn similarity_matrix_backward(
    e_a: &Matrix,
    e_b: &Matrix,
    beta: f64,
    grad_q: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let na = e_a.row_l2_normalize(NORM_EPS);
    let nb = e_b.row_l2_normalize(NORM_EPS);
    let d = e_a.cols();
    let mut grad_a = Matrix::zeros(e_a.rows(), d);
    let mut grad_b = Matrix::zeros(e_b.rows(), d);
    let norm = |m: &Matrix, i: usize| {
        m.row(i)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(NORM_EPS)
    };
    for i in 0..e_a.rows() {
        let la = norm(e_a, i);
        for j in 0..e_b.rows() {
            let g = grad_q.get(i, j);
            if g == 0.0 {
                continue;
            }
            let lb = norm(e_b, j);
            let cos: f64 = na.row(i).iter().zip(nb.row(j)).map(|(&x, &y)| x * y).sum();
            for k in 0..d {
                let da = beta / la * (nb.get(j, k) - cos * na.get(i, k));
                let db = beta / lb * (na.get(i, k) - cos * nb.get(j, k));
                grad_a.set(i, k, grad_a.get(i, k) + g * da);
                grad_b.set(j, k, grad_b.get(j, k) + g * db);
            }
        }
    }
    Ok((grad_a, grad_b))
}

/// InfoNCE over a square similarity matrix with matching pairs on the
/// diagonal: -(1/N) sum_i log softmax-row_i(q)[i]. Gradient w.r.t. q.
pub fn infonce_loss(q: &Matrix) -> Result<LossValue> {
    let n = q.rows();
    if n != q.cols() || n == 0 {
        return Err(XmodalError::shape("infonce_loss needs square nonempty input".to_string()));
    }
    let p = q.softmax_rows();
    let mut value = 0.0;
    let mut grad = p.clone();
    for i in 0..n {
        value -= p.get(i, i).max(1e-300).ln();
        grad.set(i, i, grad.get(i, i) - 1.0);
    }
    value /= n as f64;
    Ok(LossValue {
        value,
        grads: vec![grad.scale(1.0 / n as f64)],
    })
}

/// Bidirectional contrastive loss: 0.5 * (rowwise CE of s + rowwise CE of s^T),
/// both with the matching-pair index as target.
pub fn symmetric_contrastive_loss(s: &Matrix) -> Result<LossValue> {
    let fwd = infonce_loss(s)?;
    let bwd = infonce_loss(&s.transpose())?;
    let value = 0.5 * (fwd.value + bwd.value);
    let grad = fwd.grads[0]
        .scale(0.5)
        .add(&bwd.grads[0].transpose().scale(0.5))?;
    Ok(LossValue {
        value,
        grads: vec![grad],
    })
}

/// h_i = mean of row i excluding the diagonal entry.
pub fn off_diagonal_mean(s: &Matrix) -> Result<Vec<f64>> {
    let n = s.rows();
    if n != s.cols() {
        return Err(XmodalError::shape("off_diagonal_mean needs square input".to_string()));
    }
    if n < 2 {
        return Err(XmodalError::Degenerate(
            "off_diagonal_mean needs at least 2 samples".to_string(),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let sum: f64 = s.row(i).iter().sum();
            (sum - s.get(i, i)) / (n - 1) as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RandomStream;

    fn random_matrix(rows: usize, cols: usize, stream: &mut RandomStream) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = stream.next_gaussian();
        }
        m
    }

    #[test]
    fn self_similarity_diagonal_one() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = similarity_matrix(&e, &e, 1.0).unwrap();
        assert!((q.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((q.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(q.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn hand_cosine_case() {
        let e_a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let e_b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let q = similarity_matrix(&e_a, &e_b, 2.0).unwrap();
        assert!((q.get(0, 0) - 2.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_scale_invariant() {
        let mut s = RandomStream::new(1);
        let e_a = random_matrix(3, 4, &mut s);
        let e_b = random_matrix(3, 4, &mut s);
        let mut scaled = e_a.clone();
        for v in scaled.row_mut(1) {
            *v *= 5.0;
        }
        let q1 = similarity_matrix(&e_a, &e_b, 1.7).unwrap();
        let q2 = similarity_matrix(&scaled, &e_b, 1.7).unwrap();
        for (a, b) in q1.data().iter().zip(q2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_single_pair_zero() {
        let q = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert!(infonce_loss(&q).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn infonce_constant_is_log_n() {
        let q = Matrix::from_vec(4, 4, vec![0.7; 16]).unwrap();
        let l = infonce_loss(&q).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_hand_case() {
        let q = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let l = infonce_loss(&q).unwrap();
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 1.0)).ln();
        assert!((l.value - expected).abs() < 1e-9);
        assert!((l.value - 0.12693).abs() < 1e-5);
    }

    #[test]
    fn infonce_diagonal_gradient_negative() {
        let mut s = RandomStream::new(4);
        let q = random_matrix(3, 3, &mut s);
        let l = infonce_loss(&q).unwrap();
        for i in 0..3 {
            assert!(l.grads[0].get(i, i) < 0.0);
        }
    }

    #[test]
    fn symmetric_matches_infonce_on_symmetric_input() {
        let s = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let a = symmetric_contrastive_loss(&s).unwrap();
        let b = infonce_loss(&s).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn symmetric_transpose_invariant() {
        let mut st = RandomStream::new(12);
        let s = random_matrix(4, 4, &mut st);
        let a = symmetric_contrastive_loss(&s).unwrap();
        let b = symmetric_contrastive_loss(&s.transpose()).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn off_diagonal_mean_constant() {
        let s = Matrix::from_vec(3, 3, vec![0.4; 9]).unwrap();
        let h = off_diagonal_mean(&s).unwrap();
        for v in h {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn off_diagonal_mean_two_by_two() {
        let s = Matrix::from_rows(&[vec![9.0, 3.0], vec![-2.0, 9.0]]).unwrap();
        let h = off_diagonal_mean(&s).unwrap();
        assert_eq!(h, vec![3.0, -2.0]);
    }

    #[test]
    fn off_diagonal_mean_matches_brute_force() {
        let s = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        let h = off_diagonal_mean(&s).unwrap();
        // brute-force double loop
        for i in 0..3 {
            let mut sum = 0.0;
            let mut count = 0;
            for j in 0..3 {
                if j != i {
                    sum += s.get(i, j);
                    count += 1;
                }
            }
            assert!((h[i] - sum / count as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn off_diagonal_mean_rejects_single_sample() {
        let s = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert!(off_diagonal_mean(&s).is_err());
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let mut st = RandomStream::new(77);
        let q = random_matrix(4, 4, &mut st);
        let l = infonce_loss(&q).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut qp = q.clone();
                qp.set(i, j, q.get(i, j) + h);
                let mut qm = q.clone();
                qm.set(i, j, q.get(i, j) - h);
                let fd = (infonce_loss(&qp).unwrap().value - infonce_loss(&qm).unwrap().value)
                    / (2.0 * h);
                let an = l.grads[0].get(i, j);
                assert!(
                    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4,
                    "({i},{j}): fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn similarity_backward_matches_finite_differences() {
        let mut st = RandomStream::new(31);
        let e_a = random_matrix(3, 4, &mut st);
        let e_b = random_matrix(3, 4, &mut st);
        let beta = 1.5;
        // scalar loss: sum of all Q entries weighted by fixed coefficients
        let w = random_matrix(3, 3, &mut st);
        let loss = |a: &Matrix, b: &Matrix| -> f64 {
            let q = similarity_matrix(a, b, beta).unwrap();
            q.data().iter().zip(w.data()).map(|(&x, &c)| x * c).sum()
        };
        let (ga, gb) = similarity_matrix_backward(&e_a, &e_b, beta, &w).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for k in 0..4 {
                let mut p = e_a.clone();
                p.set(i, k, e_a.get(i, k) + h);
                let mut m = e_a.clone();
                m.set(i, k, e_a.get(i, k) - h);
                let fd = (loss(&p, &e_b) - loss(&m, &e_b)) / (2.0 * h);
                assert!((fd - ga.get(i, k)).abs() / fd.abs().max(1e-6) < 1e-4);

                let mut p = e_b.clone();
                p.set(i, k, e_b.get(i, k) + h);
                let mut m = e_b.clone();
                m.set(i, k, e_b.get(i, k) - h);
                let fd = (loss(&e_a, &p) - loss(&e_a, &m)) / (2.0 * h);
                assert!((fd - gb.get(i, k)).abs() / fd.abs().max(1e-6) < 1e-4);
            }
        }
    }
}
