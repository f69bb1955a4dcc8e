//! Central finite-difference verification of every analytic gradient in the
//! library. Each case runs a batch of randomized instances; the suite is
//! exercised both by the test harness and the CLI.

use crate::alignment::{
    infonce_loss, similarity_matrix, similarity_matrix_backward, symmetric_contrastive_loss,
};
use crate::datagen::Labels;
use crate::distill::{
    ccc_loss, ce_loss, kl_distill_loss, student_batch_loss_frozen,
    student_batch_loss_gradients, uncertainty_target, KdTrainConfig, KdWeights, ModelBundle,
};
use crate::datagen::TaskKind;
use crate::error::Result;
use crate::evidential::{
    dirichlet_uncertainty, dirichlet_uncertainty_backward, uncertainty_loss, PrototypeBank,
};
use crate::al::reliability_loss;
use crate::nn::{backward_with_injections, forward, Activation, FinalActivation, Mlp, MlpSpec};
use crate::numcore::{Matrix, RandomStream};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub comparisons: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn total_instances(&self) -> usize {
        self.cases.iter().map(|c| c.instances).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// |a - f| relative to the larger magnitude, floored at 1 so that gradients
/// near zero are compared absolutely.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

/// Central difference of a scalar function of one matrix entry.
pub fn central_difference(
    f: &mut dyn FnMut(&Matrix) -> Result<f64>,
    x: &Matrix,
    i: usize,
    j: usize,
    h: f64,
) -> Result<f64> {
    let mut plus = x.clone();
    plus.set(i, j, x.get(i, j) + h);
    let mut minus = x.clone();
    minus.set(i, j, x.get(i, j) - h);
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

fn random_matrix(rows: usize, cols: usize, scale: f64, stream: &mut RandomStream) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = scale * stream.next_gaussian();
    }
    m
}

/// Check an analytic gradient against central differences over every entry.
fn check_matrix_grad(
    f: &mut dyn FnMut(&Matrix) -> Result<f64>,
    x: &Matrix,
    analytic: &Matrix,
    worst: &mut f64,
    comparisons: &mut usize,
) -> Result<()> {
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let fd = central_difference(f, x, i, j, DEFAULT_STEP)?;
            let e = rel_err(analytic.get(i, j), fd);
            if e > *worst {
                *worst = e;
            }
            *comparisons += 1;
        }
    }
    Ok(())
}

fn case_infonce(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(4);
        let q = random_matrix(n, n, 2.0, stream);
        let lv = infonce_loss(&q)?;
        check_matrix_grad(
            &mut |m| Ok(infonce_loss(m)?.value),
            &q,
            &lv.grads[0],
            &mut worst,
            &mut comps,
        )?;
    }
    Ok(CaseReport { name: "infonce", instances: reps, comparisons: comps, max_rel_err: worst })
}

fn case_symmetric_contrastive(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(4);
        let s = random_matrix(n, n, 2.0, stream);
        let lv = symmetric_contrastive_loss(&s)?;
        check_matrix_grad(
            &mut |m| Ok(symmetric_contrastive_loss(m)?.value),
            &s,
            &lv.grads[0],
            &mut worst,
            &mut comps,
        )?;
    }
    Ok(CaseReport {
        name: "symmetric_contrastive",
        instances: reps,
        comparisons: comps,
        max_rel_err: worst,
    })
}

fn case_similarity_chain(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    // InfoNCE composed through the cosine similarity matrix, checking the
    // gradient into both embedding matrices
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(3);
        let d = 3 + stream.next_index(4);
        let beta = 1.0 + 9.0 * stream.next_uniform();
        let e_a = random_matrix(n, d, 1.0, stream);
        let e_b = random_matrix(n, d, 1.0, stream);
        let q = similarity_matrix(&e_a, &e_b, beta)?;
        let lv = infonce_loss(&q)?;
        let (ga, gb) = similarity_matrix_backward(&e_a, &e_b, beta, &lv.grads[0])?;
        check_matrix_grad(
            &mut |m| Ok(infonce_loss(&similarity_matrix(m, &e_b, beta)?)?.value),
            &e_a,
            &ga,
            &mut worst,
            &mut comps,
        )?;
        check_matrix_grad(
            &mut |m| Ok(infonce_loss(&similarity_matrix(&e_a, m, beta)?)?.value),
            &e_b,
            &gb,
            &mut worst,
            &mut comps,
        )?;
    }
    Ok(CaseReport {
        name: "similarity_chain",
        instances: reps,
        comparisons: comps,
        max_rel_err: worst,
    })
}

fn case_dirichlet(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    // scalar probe: weighted sum of per-sample uncertainties
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(3);
        let c = 2 + stream.next_index(3);
        let tau = 0.5 + stream.next_uniform();
        let q = random_matrix(n, c, 1.5, stream);
        let weights: Vec<f64> = (0..n).map(|_| stream.next_gaussian()).collect();
        let res = dirichlet_uncertainty(&q, tau)?;
        let grad = dirichlet_uncertainty_backward(&q, tau, &res, &weights)?;
        let w = weights.clone();
        check_matrix_grad(
            &mut |m| {
                let r = dirichlet_uncertainty(m, tau)?;
                Ok(r.uncertainty.iter().zip(&w).map(|(&u, &wi)| u * wi).sum())
            },
            &q,
            &grad,
            &mut worst,
            &mut comps,
        )?;
    }
    Ok(CaseReport { name: "dirichlet", instances: reps, comparisons: comps, max_rel_err: worst })
}

fn case_uncertainty_loss(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(5);
        let delta = stream.next_uniform();
        let u: Vec<f64> = (0..n).map(|_| stream.next_uniform()).collect();
        let h: Vec<f64> = (0..n).map(|_| stream.next_uniform()).collect();
        let lv = uncertainty_loss(&u, &h, delta)?;
        let um = Matrix::from_vec(n, 1, u.clone())?;
        let h2 = h.clone();
        check_matrix_grad(
            &mut |m| {
                let uu: Vec<f64> = (0..n).map(|i| m.get(i, 0)).collect();
                Ok(uncertainty_loss(&uu, &h2, delta)?.value)
            },
            &um,
            &lv.grads[0],
            &mut worst,
            &mut comps,
        )?;
    }
    Ok(CaseReport {
        name: "uncertainty_loss",
        instances: reps,
        comparisons: comps,
        max_rel_err: worst,
    })
}

fn case_reliability_loss(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(5);
        let r_a: Vec<f64> = (0..n).map(|_| stream.next_uniform()).collect();
        let r_b: Vec<f64> = (0..n).map(|_| stream.next_uniform()).collect();
        let r_s: Vec<f64> = (0..n).map(|_| stream.next_uniform()).collect();
        let lv = reliability_loss(&r_a, &r_b, &r_s)?;
        for (which, grad) in [(0usize, &lv.grads[0]), (1, &lv.grads[1])] {
            let base = if which == 0 { r_a.clone() } else { r_b.clone() };
            let m = Matrix::from_vec(n, 1, base)?;
            let (ra, rb, rs) = (r_a.clone(), r_b.clone(), r_s.clone());
            check_matrix_grad(
                &mut |p| {
                    let v: Vec<f64> = (0..n).map(|i| p.get(i, 0)).collect();
                    if which == 0 {
                        Ok(reliability_loss(&v, &rb, &rs)?.value)
                    } else {
                        Ok(reliability_loss(&ra, &v, &rs)?.value)
                    }
                },
                &m,
                grad,
                &mut worst,
                &mut comps,
            )?;
        }
    }
    Ok(CaseReport {
        name: "reliability_loss",
        instances: reps,
        comparisons: comps,
        max_rel_err: worst,
    })
}

fn case_ce(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(4);
        let c = 2 + stream.next_index(3);
        let p = random_matrix(n, c, 1.0, stream).softmax_rows();
        let labels: Vec<usize> = (0..n).map(|_| stream.next_index(c)).collect();
        let lv = ce_loss(&p, &labels)?;
        let lab = labels.clone();
        // gradient is nonzero only at the label columns; check those entries
        for i in 0..n {
            let j = lab[i];
            let fd = central_difference(
                &mut |m| Ok(ce_loss(m, &lab)?.value),
                &p,
                i,
                j,
                DEFAULT_STEP,
            )?;
            let e = rel_err(lv.grads[0].get(i, j), fd);
            if e > worst {
                worst = e;
            }
            comps += 1;
        }
    }
    Ok(CaseReport { name: "cross_entropy", instances: reps, comparisons: comps, max_rel_err: worst })
}

fn case_kl(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 2 + stream.next_index(3);
        let c = 2 + stream.next_index(3);
        let p = random_matrix(n, c, 1.0, stream).softmax_rows();
        let q = random_matrix(n, c, 1.0, stream).softmax_rows();
        let lv = kl_distill_loss(&p, &q)?;
        check_matrix_grad(
            &mut |m| Ok(kl_distill_loss(&p, m)?.value),
            &q,
            &lv.grads[0],
            &mut worst,
            &mut comps,
        )?;
    }
    Ok(CaseReport { name: "kl_distill", instances: reps, comparisons: comps, max_rel_err: worst })
}

fn case_ccc(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let n = 3 + stream.next_index(5);
        let pred: Vec<f64> = (0..n).map(|_| stream.next_gaussian()).collect();
        let truth: Vec<f64> = (0..n).map(|_| stream.next_gaussian()).collect();
        let lv = ccc_loss(&pred, &truth)?;
        let m = Matrix::from_vec(n, 1, pred.clone())?;
        let t = truth.clone();
        check_matrix_grad(
            &mut |p| {
                let v: Vec<f64> = (0..n).map(|i| p.get(i, 0)).collect();
                Ok(ccc_loss(&v, &t)?.value)
            },
            &m,
            &lv.grads[0],
            &mut worst,
            &mut comps,
        )?;
    }
    Ok(CaseReport { name: "ccc_loss", instances: reps, comparisons: comps, max_rel_err: worst })
}

fn case_mlp_backward(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    // scalar probe <G_out, output> + <G_mid, activation_after(0)> checks the
    // parameter, input and injection paths in one pass
    let mut worst = 0.0;
    let mut comps = 0;
    for _ in 0..reps {
        let d_in = 2 + stream.next_index(3);
        let hidden = 3 + stream.next_index(3);
        let d_out = 2 + stream.next_index(3);
        let finals = [
            FinalActivation::Identity,
            FinalActivation::Softmax,
            FinalActivation::Sigmoid,
        ];
        let fin = finals[stream.next_index(3)];
        let spec = MlpSpec::new(vec![d_in, hidden, d_out], Activation::Tanh, fin)?;
        let mlp = Mlp::new(spec.clone(), stream);
        let n = 2 + stream.next_index(2);
        let x = random_matrix(n, d_in, 1.0, stream);
        let g_out = random_matrix(n, d_out, 1.0, stream);
        let g_mid = random_matrix(n, hidden, 1.0, stream);

        let trace = forward(&spec, &mlp.params, &x)?;
        let grads =
            backward_with_injections(&spec, &mlp.params, &trace, &g_out, &[(0, &g_mid)])?;

        let probe = |params: &crate::nn::MlpParams, xx: &Matrix| -> Result<f64> {
            let t = forward(&spec, params, xx)?;
            let a = t.output().hadamard(&g_out)?.data().iter().sum::<f64>();
            let b = t
                .activation_after(0)
                .hadamard(&g_mid)?
                .data()
                .iter()
                .sum::<f64>();
            Ok(a + b)
        };

        // input gradient
        check_matrix_grad(
            &mut |xx| probe(&mlp.params, xx),
            &x,
            &grads.d_input,
            &mut worst,
            &mut comps,
        )?;
        // a sample of weight and bias entries per affine layer
        for l in 0..spec.n_affine() {
            for _ in 0..3 {
                let wi = stream.next_index(mlp.params.weights[l].rows());
                let wj = stream.next_index(mlp.params.weights[l].cols());
                let fd = {
                    let mut f = |w: &Matrix| {
                        let mut p = mlp.params.clone();
                        p.weights[l] = w.clone();
                        probe(&p, &x)
                    };
                    central_difference(&mut f, &mlp.params.weights[l], wi, wj, DEFAULT_STEP)?
                };
                let e = rel_err(grads.d_weights[l].get(wi, wj), fd);
                if e > worst {
                    worst = e;
                }
                comps += 1;
            }
            let bj = stream.next_index(mlp.params.biases[l].len());
            let b0 = mlp.params.biases[l][bj];
            let eval_bias = |val: f64| -> Result<f64> {
                let mut p = mlp.params.clone();
                p.biases[l][bj] = val;
                probe(&p, &x)
            };
            let fd = (eval_bias(b0 + DEFAULT_STEP)? - eval_bias(b0 - DEFAULT_STEP)?)
                / (2.0 * DEFAULT_STEP);
            let e = rel_err(grads.d_biases[l][bj], fd);
            if e > worst {
                worst = e;
            }
            comps += 1;
        }
    }
    Ok(CaseReport { name: "mlp_backward", instances: reps, comparisons: comps, max_rel_err: worst })
}

fn case_full_objective(stream: &mut RandomStream, reps: usize) -> Result<CaseReport> {
    // end-to-end student objective with all four terms active; finite
    // differences over sampled encoder and head parameters
    let mut worst = 0.0;
    let mut comps = 0;
    for rep in 0..reps {
        let task = if rep % 2 == 0 {
            TaskKind::Dec { classes: 3 }
        } else {
            TaskKind::Cer
        };
        let n = 4 + stream.next_index(3);
        let d_s = 4;
        let d_t = 5;
        let bundle = ModelBundle::new(d_s, d_t, 6, 4, task, 1, stream)?;
        let cfg = KdTrainConfig::default();
        let w = KdWeights { sim: 0.7, unc: 0.9, kd: 1.1, task: 1.3 };
        let x_s = random_matrix(n, d_s, 1.0, stream);
        let x_t = random_matrix(n, d_t, 1.0, stream);
        let labels = match task {
            TaskKind::Dec { classes } => {
                Labels::Class((0..n).map(|i| i % classes).collect())
            }
            TaskKind::Cer => Labels::Scalar((0..n).map(|_| stream.next_gaussian().tanh()).collect()),
        };
        // a fixed prototype bank so the uncertainty term has a stable target
        let proto_classes = match task {
            TaskKind::Dec { classes } => classes,
            TaskKind::Cer => cfg.cer_proto_bins,
        };
        let bank = PrototypeBank::new(
            random_matrix(proto_classes, 4, 1.0, stream),
            cfg.tau_temp,
            cfg.proto_momentum,
        )?;

        let (_bd, enc_grads, head_grads) =
            student_batch_loss_gradients(&bundle, Some(&bank), &x_s, &x_t, &labels, &w, &cfg)?;

        // the uncertainty target is a stop-gradient constant; pin it so the
        // differentiated scalar matches what the analytic gradient assumes
        let h = uncertainty_target(&bundle, &x_s, &x_t, cfg.beta)?;
        let total = |b: &ModelBundle| -> Result<f64> {
            Ok(
                student_batch_loss_frozen(b, Some(&bank), &x_s, &x_t, &labels, &w, &cfg, &h)?
                    .total,
            )
        };

        // sample entries from every affine layer of encoder and head
        for l in 0..bundle.student_encoder.spec.n_affine() {
            for _ in 0..2 {
                let wi = stream.next_index(bundle.student_encoder.params.weights[l].rows());
                let wj = stream.next_index(bundle.student_encoder.params.weights[l].cols());
                let fd = {
                    let mut f = |wm: &Matrix| {
                        let mut b = bundle.clone();
                        b.student_encoder.params.weights[l] = wm.clone();
                        total(&b)
                    };
                    central_difference(
                        &mut f,
                        &bundle.student_encoder.params.weights[l],
                        wi,
                        wj,
                        DEFAULT_STEP,
                    )?
                };
                let e = rel_err(enc_grads.d_weights[l].get(wi, wj), fd);
                if e > worst {
                    worst = e;
                }
                comps += 1;
            }
        }
        for l in 0..bundle.student_head.spec.n_affine() {
            for _ in 0..2 {
                let wi = stream.next_index(bundle.student_head.params.weights[l].rows());
                let wj = stream.next_index(bundle.student_head.params.weights[l].cols());
                let fd = {
                    let mut f = |wm: &Matrix| {
                        let mut b = bundle.clone();
                        b.student_head.params.weights[l] = wm.clone();
                        total(&b)
                    };
                    central_difference(
                        &mut f,
                        &bundle.student_head.params.weights[l],
                        wi,
                        wj,
                        DEFAULT_STEP,
                    )?
                };
                let e = rel_err(head_grads.d_weights[l].get(wi, wj), fd);
                if e > worst {
                    worst = e;
                }
                comps += 1;
            }
        }
    }
    Ok(CaseReport {
        name: "full_objective",
        instances: reps,
        comparisons: comps,
        max_rel_err: worst,
    })
}

/// Run every case. `scale` multiplies the per-case instance counts; the
/// default scale of 1 yields well over 100 randomized instances.
pub fn run_suite(seed: u64, scale: usize) -> Result<SuiteReport> {
    let s = scale.max(1);
    let root = RandomStream::new(seed);
    let cases = vec![
        case_infonce(&mut root.sub_stream(1), 15 * s)?,
        case_symmetric_contrastive(&mut root.sub_stream(2), 15 * s)?,
        case_similarity_chain(&mut root.sub_stream(3), 12 * s)?,
        case_dirichlet(&mut root.sub_stream(4), 15 * s)?,
        case_uncertainty_loss(&mut root.sub_stream(5), 12 * s)?,
        case_reliability_loss(&mut root.sub_stream(6), 12 * s)?,
        case_ce(&mut root.sub_stream(7), 12 * s)?,
        case_kl(&mut root.sub_stream(8), 12 * s)?,
        case_ccc(&mut root.sub_stream(9), 12 * s)?,
        case_mlp_backward(&mut root.sub_stream(10), 10 * s)?,
        case_full_objective(&mut root.sub_stream(11), 6 * s)?,
    ];
    Ok(SuiteReport { cases, tolerance: DEFAULT_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors_small_gradients() {
        assert!(rel_err(1e-9, 2e-9) < 1e-8);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn central_difference_quadratic() {
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let fd = central_difference(&mut |m| Ok(m.get(0, 0) * m.get(0, 0)), &x, 0, 0, 1e-5)
            .unwrap();
        assert!((fd - 6.0).abs() < 1e-8);
    }

    #[test]
    fn suite_passes_at_default_tolerance() {
        let report = run_suite(1234, 1).unwrap();
        assert!(report.total_instances() >= 100, "instances {}", report.total_instances());
        for c in &report.cases {
            assert!(
                c.max_rel_err < DEFAULT_TOLERANCE,
                "{} rel err {}",
                c.name,
                c.max_rel_err
            );
        }
    }
}
