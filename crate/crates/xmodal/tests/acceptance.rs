//! End-to-end acceptance checks. Each test prints one PASS/FAIL line for
//! its criterion; run with `cargo test --test acceptance -- --nocapture`
//! to see the lines for passing criteria too.

use std::time::Instant;
use xmodal::al::{
    pool_update, predictive_entropy, run_al_loop, select_top_tau, AcquisitionConfig, AlRunConfig,
    Pool, Strategy,
};
use xmodal::alignment::infonce_loss;
use xmodal::config::ExperimentConfig;
use xmodal::datagen::{generate_synthetic_paired, SynthSpec, TaskKind};
use xmodal::distill::{ccc_loss, kl_distill_loss, KdWeights, ModelBundle};
use xmodal::evidential::dirichlet_uncertainty;
use xmodal::gradcheck;
use xmodal::harness::{self, EfficiencyStrategy};
use xmodal::metrics::{classification_report, regression_report};
use xmodal::numcore::{Matrix, RandomStream};

fn report(name: &str, res: Result<(), String>) {
    match &res {
        Ok(()) => println!("PASS {name}"),
        Err(e) => println!("FAIL {name}: {e}"),
    }
    if let Err(e) = res {
        panic!("{name}: {e}");
    }
}

#[test]
fn criterion_gradient_suite() {
    report("gradient_suite", (|| {
        let start = Instant::now();
        let suite = gradcheck::run_suite(20250826, 1).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        if suite.total_instances() < 100 {
            return Err(format!("only {} instances", suite.total_instances()));
        }
        if !suite.pass() {
            return Err(format!("max rel err {}", suite.max_rel_err()));
        }
        if elapsed.as_secs_f64() >= 60.0 {
            return Err(format!("took {:.1}s", elapsed.as_secs_f64()));
        }
        Ok(())
    })());
}

#[test]
fn criterion_closed_form_identities() {
    report("closed_form_identities", (|| {
        let tol = 1e-9;
        // zero similarity: alpha = 2, evidence = 2c, u = 1/2
        let q = Matrix::zeros(4, 3);
        let ev = dirichlet_uncertainty(&q, 1.0).map_err(|e| e.to_string())?;
        for &u in &ev.uncertainty {
            if (u - 0.5).abs() > tol {
                return Err(format!("u at zero similarity {u}"));
            }
        }
        // KL of a distribution against itself
        let p = Matrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]]).unwrap();
        let kl = kl_distill_loss(&p, &p).map_err(|e| e.to_string())?;
        if kl.value.abs() > tol {
            return Err(format!("self-KL {}", kl.value));
        }
        // constant similarity matrix: InfoNCE = ln N
        for n in [2usize, 3, 5, 8] {
            let s = Matrix::from_vec(n, n, vec![0.7; n * n]).unwrap();
            let lv = infonce_loss(&s).map_err(|e| e.to_string())?;
            if (lv.value - (n as f64).ln()).abs() > tol {
                return Err(format!("InfoNCE at N={n}: {}", lv.value));
            }
        }
        // perfect regression: CCC loss = 0
        let y = vec![0.1, -0.4, 0.9, 0.3];
        let lv = ccc_loss(&y, &y).map_err(|e| e.to_string())?;
        if lv.value.abs() > tol {
            return Err(format!("perfect CCC loss {}", lv.value));
        }
        // entropy bounds over random distributions
        let mut stream = RandomStream::new(5);
        for _ in 0..200 {
            let c = 2 + stream.next_index(5);
            let mut logits = Matrix::zeros(1, c);
            for v in logits.data_mut() {
                *v = 3.0 * stream.next_gaussian();
            }
            let h = predictive_entropy(&logits.softmax_rows()).map_err(|e| e.to_string())?[0];
            if !(-tol..=(c as f64).ln() + tol).contains(&h) {
                return Err(format!("entropy {h} outside [0, ln {c}]"));
            }
        }
        Ok(())
    })());
}

#[test]
fn criterion_self_injection_bitwise() {
    report("self_injection_bitwise", (|| {
        let mut stream = RandomStream::new(99);
        let bundle = ModelBundle::new(6, 7, 10, 5, TaskKind::Dec { classes: 4 }, 1, &mut stream)
            .map_err(|e| e.to_string())?;
        let mut x_t = Matrix::zeros(5, 7);
        for v in x_t.data_mut() {
            *v = stream.next_gaussian();
        }
        let (_trace, f_t, _e_t) =
            ModelBundle::encode(&bundle.teacher_encoder, &x_t).map_err(|e| e.to_string())?;
        let head_trace = bundle.teacher_head.forward(&f_t).map_err(|e| e.to_string())?;
        let y_t = head_trace.output();
        for l in 0..bundle.teacher_head.spec.n_affine() {
            let input = if l == 0 { &f_t } else { head_trace.activation_after(l - 1) };
            let y = bundle
                .teacher_head
                .forward_from(l, input)
                .map_err(|e| e.to_string())?
                .output()
                .clone();
            // bitwise, not approximate
            if y != *y_t {
                return Err(format!("self-injection at layer {l} not bit-identical"));
            }
        }
        Ok(())
    })());
}

#[test]
fn criterion_metric_oracle_equivalence() {
    report("metric_oracle_equivalence", (|| {
        let tol = 1e-10;
        let mut stream = RandomStream::new(404);
        for _ in 0..1000 {
            let n = 3 + stream.next_index(30);
            // regression pair against the definitional oracle
            let pred: Vec<f64> = (0..n).map(|_| 2.0 * stream.next_gaussian()).collect();
            let truth: Vec<f64> = (0..n).map(|_| 2.0 * stream.next_gaussian()).collect();
            let r = regression_report(&pred, &truth).map_err(|e| e.to_string())?;
            let nf = n as f64;
            let mp = pred.iter().sum::<f64>() / nf;
            let mt = truth.iter().sum::<f64>() / nf;
            let vp = pred.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>() / nf;
            let vt = truth.iter().map(|t| (t - mt) * (t - mt)).sum::<f64>() / nf;
            let cov = pred.iter().zip(&truth).map(|(p, t)| (p - mp) * (t - mt)).sum::<f64>() / nf;
            let rmse = (pred.iter().zip(&truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / nf)
                .sqrt();
            if (r.rmse - rmse).abs() > tol {
                return Err(format!("rmse {} vs oracle {rmse}", r.rmse));
            }
            let pcc = cov / (vp.sqrt() * vt.sqrt());
            if (r.pcc.ok_or("pcc undefined")? - pcc).abs() > tol {
                return Err("pcc mismatch".to_string());
            }
            let ccc = 2.0 * cov / (vp + vt + (mp - mt) * (mp - mt));
            if (r.ccc.ok_or("ccc undefined")? - ccc).abs() > tol {
                return Err("ccc mismatch".to_string());
            }
            // 1 - ccc_loss must agree with the metric exactly as well
            let lv = ccc_loss(&pred, &truth).map_err(|e| e.to_string())?;
            if (1.0 - lv.value - ccc).abs() > tol {
                return Err("ccc loss inconsistent with metric".to_string());
            }

            // classification against a confusion-matrix oracle
            let classes = 2 + stream.next_index(4);
            let p: Vec<usize> = (0..n).map(|_| stream.next_index(classes)).collect();
            let t: Vec<usize> = (0..n).map(|_| stream.next_index(classes)).collect();
            let rep = classification_report(&p, &t, classes).map_err(|e| e.to_string())?;
            let acc =
                p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / nf;
            if (rep.accuracy - acc).abs() > tol {
                return Err("accuracy mismatch".to_string());
            }
            let mut f1_sum = 0.0;
            for c in 0..classes {
                let tp = p.iter().zip(&t).filter(|&(&a, &b)| a == c && b == c).count() as f64;
                let fp = p.iter().zip(&t).filter(|&(&a, &b)| a == c && b != c).count() as f64;
                let fnn = p.iter().zip(&t).filter(|&(&a, &b)| a != c && b == c).count() as f64;
                let denom = 2.0 * tp + fp + fnn;
                let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
                if (rep.per_class_f1[c] - f1).abs() > tol {
                    return Err(format!("class {c} f1 mismatch"));
                }
                f1_sum += f1;
            }
            if (rep.macro_f1 - f1_sum / classes as f64).abs() > tol {
                return Err("macro f1 mismatch".to_string());
            }
        }
        Ok(())
    })());
}

fn efficiency_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n = 300;
    cfg.model.hidden = 16;
    cfg.model.embed_dim = 8;
    cfg.al.epochs_per_round = 20;
    cfg
}

#[test]
fn criterion_label_efficiency_direction() {
    report("label_efficiency_direction", (|| {
        let start = Instant::now();
        let cfg = efficiency_config();
        let budgets = [0.1, 0.3, 0.5];
        let mut unc = Vec::new();
        let mut rnd = Vec::new();
        for seed in 0..10u64 {
            for (strategy, accs) in [
                (EfficiencyStrategy::Uncertainty, &mut unc),
                (EfficiencyStrategy::Random, &mut rnd),
            ] {
                let pts = harness::efficiency_curve(&cfg, strategy, &budgets, seed)
                    .map_err(|e| e.to_string())?;
                accs.push(
                    pts.iter()
                        .find(|p| (p.budget - 0.5).abs() < 1e-9)
                        .ok_or("missing 50% budget point")?
                        .accuracy,
                );
            }
        }
        let (unc_mean, _) = harness::mean_std(&unc);
        let (rnd_mean, _) = harness::mean_std(&rnd);
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 300.0 {
            return Err(format!("took {:.1}s", elapsed.as_secs_f64()));
        }
        if unc_mean < rnd_mean {
            return Err(format!(
                "uncertainty {unc_mean:.4} below random {rnd_mean:.4} at 50% budget"
            ));
        }
        println!(
            "  50% budget over 10 seeds: uncertainty {unc_mean:.4} vs random {rnd_mean:.4} ({:.1}s)",
            elapsed.as_secs_f64()
        );
        Ok(())
    })());
}

#[test]
fn criterion_pool_entropy_halves() {
    report("pool_entropy_halves", (|| {
        let mut spec = SynthSpec::synth_3c();
        spec.n = 200;
        let mut firsts = Vec::new();
        let mut lasts = Vec::new();
        for seed in 0..10u64 {
            spec.seed = seed;
            let ds = generate_synthetic_paired(&spec).map_err(|e| e.to_string())?;
            let mut cfg = AlRunConfig::default();
            cfg.acq = AcquisitionConfig { ratio: 0.3, rounds: 4 };
            cfg.train.epochs_per_round = 25;
            let run =
                run_al_loop(&ds, &cfg, Strategy::Uncertainty, seed).map_err(|e| e.to_string())?;
            firsts.push(run.history.rounds.first().unwrap().mean_pool_entropy);
            lasts.push(run.history.rounds.last().unwrap().mean_pool_entropy);
        }
        let (first, _) = harness::mean_std(&firsts);
        let (last, _) = harness::mean_std(&lasts);
        println!("  mean pool entropy: first round {first:.4}, final round {last:.4}");
        if last >= 0.5 * first {
            return Err(format!("final entropy {last:.4} not below half of first {first:.4}"));
        }
        Ok(())
    })());
}

#[test]
fn criterion_ablation_full_beats_task_only() {
    report("ablation_full_beats_task_only", (|| {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n = 300;
        cfg.data.label_flip_rate = 0.3;
        // student modality noisy enough that the clean-teacher signal matters
        cfg.data.noise_s = 2.5;
        cfg.model.hidden = 16;
        cfg.model.embed_dim = 8;
        cfg.optimizer.epochs = 30;
        cfg.optimizer.patience = 0;
        let seeds: Vec<u64> = (1..=10).collect();
        let mut full = Vec::new();
        let mut task_only = Vec::new();
        for &seed in &seeds {
            full.push(
                harness::train_kd_single(&cfg, &KdWeights::all_ones(), seed)
                    .map_err(|e| e.to_string())?
                    .test_metric,
            );
            task_only.push(
                harness::train_kd_single(&cfg, &KdWeights::task_only(), seed)
                    .map_err(|e| e.to_string())?
                    .test_metric,
            );
        }
        let (fm, _) = harness::mean_std(&full);
        let (tm, _) = harness::mean_std(&task_only);
        println!("  30% label noise, 10 seeds: full {fm:.4} vs task-only {tm:.4}");
        if fm <= tm {
            return Err(format!("full objective {fm:.4} not above task-only {tm:.4}"));
        }
        Ok(())
    })());
}

#[test]
fn criterion_pool_fuzz_invariants() {
    report("pool_fuzz_invariants", (|| {
        let total = 2000usize;
        let mut pool = Pool::new((0..50).collect(), (50..total).collect())
            .map_err(|e| e.to_string())?;
        let mut stream = RandomStream::new(777);
        for round in 0..1000 {
            if pool.unlabeled().is_empty() {
                // refill to keep fuzzing
                pool = Pool::new((0..50).collect(), (50..total).collect())
                    .map_err(|e| e.to_string())?;
            }
            // acquisition on synthetic uncertainties
            let u: Vec<f64> = pool.unlabeled().iter().map(|_| stream.next_uniform()).collect();
            let ratio = stream.next_uniform() * 0.05;
            let q = select_top_tau(&u, pool.unlabeled(), ratio).map_err(|e| e.to_string())?;
            if ratio > 0.0 && q.is_empty() {
                return Err(format!("round {round}: empty query with positive ratio"));
            }
            let expected = ((ratio * u.len() as f64).floor() as usize).clamp(1, u.len());
            if q.len() != expected {
                return Err(format!("round {round}: |q|={} expected {expected}", q.len()));
            }
            for i in &q {
                if !pool.unlabeled().contains(i) {
                    return Err(format!("round {round}: query outside unlabeled pool"));
                }
            }
            let next = pool_update(&pool, &q).map_err(|e| e.to_string())?;
            // disjointness and conservation
            if next.total() != total {
                return Err(format!("round {round}: union size {}", next.total()));
            }
            if next.labeled().len() != pool.labeled().len() + q.len() {
                return Err(format!("round {round}: labeled count wrong"));
            }
            let mut seen: Vec<usize> =
                next.labeled().iter().chain(next.unlabeled()).copied().collect();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != total {
                return Err(format!("round {round}: pools overlap"));
            }
            // re-querying an already-labeled index must fail
            if let Some(&taken) = next.labeled().first() {
                if pool_update(&next, &[taken]).is_ok() {
                    return Err(format!("round {round}: double-labeling accepted"));
                }
            }
            pool = next;
        }
        Ok(())
    })());
}

#[test]
fn criterion_byte_identical_determinism() {
    report("byte_identical_determinism", (|| {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n = 100;
        cfg.data.d_s = 8;
        cfg.data.d_t = 8;
        cfg.model.hidden = 8;
        cfg.model.embed_dim = 4;
        cfg.optimizer.epochs = 4;
        cfg.optimizer.patience = 0;
        cfg.al.epochs_per_round = 3;
        cfg.al.acquisition.rounds = 2;
        cfg.seeds = vec![7, 8];
        let cfg_json = serde_json::to_string_pretty(&cfg).unwrap();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg_path = dir.path().join("config.json");
        std::fs::write(&cfg_path, &cfg_json).map_err(|e| e.to_string())?;

        let bin = env!("CARGO_BIN_EXE_xmodal");
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("run{run}"));
            for sub in ["kd", "al"] {
                let status = std::process::Command::new(bin)
                    .args([sub, "--config"])
                    .arg(&cfg_path)
                    .arg("--out")
                    .arg(&out)
                    .status()
                    .map_err(|e| e.to_string())?;
                if !status.success() {
                    return Err(format!("{sub} run exited with {status}"));
                }
            }
            let mut files: Vec<_> = std::fs::read_dir(&out)
                .map_err(|e| e.to_string())?
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            if files.len() < 6 {
                return Err(format!("only {} output files", files.len()));
            }
            let blobs: Vec<(String, Vec<u8>)> = files
                .iter()
                .map(|p| {
                    (
                        p.file_name().unwrap().to_string_lossy().into_owned(),
                        std::fs::read(p).unwrap(),
                    )
                })
                .collect();
            outputs.push(blobs);
        }
        if outputs[0] != outputs[1] {
            return Err("outputs differ between identical runs".to_string());
        }
        println!("  {} files byte-identical across runs", outputs[0].len());
        Ok(())
    })());
}
