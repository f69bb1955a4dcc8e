use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use xmodal::al::{run_al_loop, AcquisitionConfig, AlRunConfig, AlTrainConfig, Strategy};
use xmodal::config::ExperimentConfig;
use xmodal::datagen::generate_synthetic_paired;
use xmodal::gradcheck;
use xmodal::harness;

#[derive(Parser)]
#[command(name = "xmodal", version, about = "cross-modal distillation and active-learning experiments")]
struct Cli {
    /// JSON experiment config; defaults to the built-in benchmark config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override the seed list with a single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory (also settable via XMODAL_OUT); defaults to ./out
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// two-phase knowledge distillation experiment
    Kd,
    /// active-learning loop with entropy acquisition and a random baseline
    Al,
    /// loss-term ablation over all on/off subsets
    Ablation,
    /// label-efficiency comparison across acquisition strategies
    LabelEfficiency,
    /// finite-difference verification of every analytic gradient
    Gradcheck {
        /// multiplier on per-case instance counts
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// quick end-to-end smoke test of data generation and both loops
    Selftest,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, xmodal::XmodalError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| xmodal::XmodalError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("XMODAL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: &Cli) -> Result<(), xmodal::XmodalError> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli);
    match &cli.command {
        Command::Kd => {
            let summary = harness::run_kd(&cfg, &out)?;
            println!("config {}", summary.config_hash);
            for r in &summary.per_seed {
                println!(
                    "seed {} student {} {:.4} teacher {:.4} (best epoch {})",
                    r.seed, summary.metric_name, r.student_metric, r.teacher_metric, r.best_epoch
                );
            }
            println!(
                "student {} {:.4} +/- {:.4} | teacher {:.4} +/- {:.4}",
                summary.metric_name,
                summary.student_mean,
                summary.student_std,
                summary.teacher_mean,
                summary.teacher_std
            );
            println!("wrote {}", out.display());
        }
        Command::Al => {
            let mut spec = cfg.data.clone();
            let run_cfg = AlRunConfig {
                hidden: cfg.model.hidden,
                embed: cfg.model.embed_dim,
                train: AlTrainConfig {
                    lr: cfg.optimizer.lr.max(1e-2),
                    epochs_per_round: cfg.al.epochs_per_round,
                    batch: cfg.optimizer.batch,
                    eps: cfg.al.eps,
                    reinit_each_round: cfg.al.reinit_each_round,
                    oracle_noise_rate: cfg.al.oracle_noise_rate,
                },
                acq: AcquisitionConfig {
                    ratio: cfg.al.acquisition.ratio,
                    rounds: cfg.al.acquisition.rounds,
                },
                weights: cfg.al.weights,
                initial_labeled_fraction: cfg.al.initial_labeled_fraction,
                test_fraction: 0.2,
            };
            std::fs::create_dir_all(&out).map_err(|e| xmodal::XmodalError::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            for &seed in &cfg.seeds {
                spec.seed = seed;
                let ds = generate_synthetic_paired(&spec)?;
                for (name, strategy) in
                    [("uncertainty", Strategy::Uncertainty), ("random", Strategy::Random)]
                {
                    let run = run_al_loop(&ds, &run_cfg, strategy, seed)?;
                    let path = out.join(format!("al_{name}_{seed}.csv"));
                    std::fs::write(&path, run.history.to_csv()).map_err(|e| {
                        xmodal::XmodalError::Io { path: path.display().to_string(), source: e }
                    })?;
                    let last = run.history.rounds.last().expect("history nonempty");
                    println!(
                        "seed {seed} {name}: final accuracy {:.4}, pool entropy {:.4}",
                        last.test_accuracy, last.mean_pool_entropy
                    );
                }
            }
            println!("wrote {}", out.display());
        }
        Command::Ablation => {
            let rows = harness::run_ablation(&cfg, &out)?;
            println!("sim unc kd  metric");
            for r in &rows {
                println!(
                    "{}   {}   {}   {:.4} +/- {:.4}",
                    r.sim as u8, r.unc as u8, r.kd as u8, r.mean_metric, r.std_metric
                );
            }
            println!("wrote {}", out.display());
        }
        Command::LabelEfficiency => {
            let summary = harness::run_label_efficiency(&cfg, &out)?;
            for strategy in [
                harness::EfficiencyStrategy::NoAl,
                harness::EfficiencyStrategy::Random,
                harness::EfficiencyStrategy::Uncertainty,
            ] {
                let accs: Vec<String> = harness::BUDGETS
                    .iter()
                    .map(|&b| {
                        summary
                            .mean_at(strategy, b)
                            .map(|a| format!("{a:.4}"))
                            .unwrap_or_else(|| "-".to_string())
                    })
                    .collect();
                println!("{strategy:?}: {}", accs.join(" "));
            }
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { scale } => {
            let seed = cli.seed.unwrap_or(1234);
            let report = gradcheck::run_suite(seed, *scale)?;
            for c in &report.cases {
                println!(
                    "{:<24} instances {:>4} comparisons {:>6} max rel err {:.3e}",
                    c.name, c.instances, c.comparisons, c.max_rel_err
                );
            }
            println!(
                "total instances {} max rel err {:.3e} tolerance {:.1e}",
                report.total_instances(),
                report.max_rel_err(),
                report.tolerance
            );
            if !report.pass() {
                return Err(xmodal::XmodalError::Other("gradient check failed".to_string()));
            }
        }
        Command::Selftest => {
            let mut cfg = ExperimentConfig::default();
            cfg.data.n = 120;
            cfg.data.d_s = 8;
            cfg.data.d_t = 8;
            cfg.model.hidden = 8;
            cfg.model.embed_dim = 4;
            cfg.optimizer.epochs = 3;
            cfg.optimizer.patience = 0;
            cfg.al.epochs_per_round = 3;
            cfg.al.acquisition.rounds = 2;
            cfg.seeds = vec![cli.seed.unwrap_or(42)];
            let seed = cfg.seeds[0];
            let run = harness::train_kd_single(&cfg, &cfg.kd.weights.clone(), seed)?;
            println!("kd ok: student metric {:.4}", run.test_metric);
            let mut spec = cfg.data.clone();
            spec.seed = seed;
            let ds = generate_synthetic_paired(&spec)?;
            let al_cfg = AlRunConfig {
                hidden: 8,
                embed: 4,
                train: AlTrainConfig { epochs_per_round: 3, ..AlTrainConfig::default() },
                acq: AcquisitionConfig { ratio: 0.2, rounds: 2 },
                ..AlRunConfig::default()
            };
            let al = run_al_loop(&ds, &al_cfg, Strategy::Uncertainty, seed)?;
            println!(
                "al ok: {} rounds, final accuracy {:.4}",
                al.history.rounds.len(),
                al.history.rounds.last().expect("history nonempty").test_accuracy
            );
            let report = gradcheck::run_suite(seed, 1)?;
            println!("gradcheck ok: max rel err {:.3e}", report.max_rel_err());
            if !report.pass() {
                return Err(xmodal::XmodalError::Other("gradient check failed".to_string()));
            }
            println!("selftest passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ xmodal::XmodalError::Config(_)) | Err(e @ xmodal::XmodalError::Parse { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
