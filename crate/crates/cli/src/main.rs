use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use plateau_lab::nn::{FeatureMode, Profile, TeacherLaw};
use plateau_lab::oracle::{no_context_accuracy, normalization_constant_with, oracle_for};
use plateau_lab::taskgen::{Modality, TaskSpec};
use plateau_lab::train::{load_checkpoint, transfer_init, TrainConfig, Trainer};
use plateau_lab::xlab::io::read_jsonl;
use plateau_lab::xlab::{
    emit_plot, run_feature_learning, run_retrieval_transfer, run_sweep, run_transfer, run_uneven, write_metrics,
    Experiment, ExperimentConfig, FeatureCell, FeatureLearningConfig, PlotMetric, PlotOptions,
    RetrievalTransferConfig, RunCache, RunInit, SweepConfig, TrainTemplate,
};
use plateau_lab::{Exec, RngState};

#[derive(Parser)]
#[command(name = "plateau-lab", version, about = "Multi-task in-context learning plateau laboratory")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Toy,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Profile {
        match p {
            ProfileArg::Toy => Profile::Toy,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Gaussian,
    Boolean,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Single,
    Multi,
    Both,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TeacherArg {
    Resampled,
    Fixed,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a JSON TrainConfig.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment described by a JSON ExperimentConfig.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every task subset and aggregate escape times per task and subset size.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "lr,qr,slr,lrelu,sp2,sp3")]
        tasks: Vec<String>,
        #[arg(long, default_value_t = 1)]
        min_subset: usize,
        #[arg(long)]
        max_subset: usize,
        #[arg(long, value_enum, default_value = "toy")]
        profile: ProfileArg,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Step budget per run (defaults by profile).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
    /// No-context oracle and normalization constant of one task.
    Oracle {
        /// Task code: lr, qr, slr, lrelu, sp, parity, grt, brt (sp2/sp3 also accepted).
        #[arg(long)]
        task: String,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        mu: Option<f64>,
        /// Subset arity (sparse parity) or retained coordinates (sparse linear).
        #[arg(long)]
        arity: Option<usize>,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a task starting from a saved checkpoint.
    Transfer {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value = "toy")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        steps: Option<u64>,
        /// Also train the task from scratch and report the escape-time ratio.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value = "out/transfer")]
        out: PathBuf,
    },
    /// Pre-train on a retrieval task, then train same-modality tasks from that checkpoint.
    RetrievalTransfer {
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long, value_enum, default_value = "toy")]
        profile: ProfileArg,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "out/retrieval")]
        out: PathBuf,
    },
    /// Two-layer feature-learning comparison of single- and multi-task teachers.
    Fl {
        #[arg(long, default_value_t = 150)]
        d: usize,
        #[arg(long, default_value_t = 10)]
        h: usize,
        #[arg(long, default_value_t = 100)]
        hp: usize,
        #[arg(long, default_value_t = 15)]
        k: usize,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Stop each run this many steps after its escape.
        #[arg(long)]
        stop_after_escape: Option<u64>,
        /// Draw the teacher's output weights per example or once per run.
        #[arg(long, value_enum, default_value = "resampled")]
        teacher: TeacherArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics JSONL file as an SVG line plot.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_y: bool,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn opt(v: Option<u64>) -> String {
    v.map_or("-".into(), |v| v.to_string())
}

fn parse_task(code: &str, dim: usize, mu: Option<f64>, arity: Option<usize>) -> Result<TaskSpec> {
    let mut spec = match (code, arity) {
        ("sp", Some(k)) => TaskSpec::sparse_parity(dim, k),
        ("sp", None) => bail!("task sp needs --arity"),
        _ => TaskSpec::from_code(code, dim)?,
    };
    if let Some(m) = mu {
        spec = spec.with_mu(m);
    }
    if let Some(k) = arity {
        spec = spec.with_sparsity(k);
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_train(config: &Path, seed: u64, out: &Path, exec: Exec) -> Result<()> {
    let mut cfg = TrainConfig::from_json(&read_text(config)?)?;
    cfg.seed = seed;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    let run = Trainer::new(&cfg, exec)?.with_out_dir(out).run()?;
    write_metrics(&run.log, &run.labels, &run.reports, out)?;
    println!("stopped at step {}", run.stopped_at);
    for ((label, report), c) in run.labels.iter().zip(&run.reports).zip(&run.c) {
        println!("{label}\tc={c:.6}\t{report}\tt_plateau={}\tt_exit={}", opt(report.t_plateau), opt(report.t_exit));
    }
    Ok(())
}

fn cmd_oracle(task: &str, dim: usize, mu: Option<f64>, arity: Option<usize>, samples: usize, seed: u64, exec: Exec) -> Result<()> {
    let spec = parse_task(task, dim, mu, arity)?;
    let root = RngState::from_seed(seed);
    let oracle = oracle_for(&spec, root.derive(1))?;
    println!("task\t{spec}");
    println!("oracle\t{}", oracle.describe());
    let norm = normalization_constant_with(&spec, samples, root.derive(2), exec)?;
    println!("no_context_loss\t{:.6} ± {:.6}", norm.reference_loss, norm.loss_standard_error);
    println!("c\t{:.6} ± {:.6}", norm.c, norm.standard_error);
    if let Some(w) = &norm.warning {
        println!("warning\t{w}");
    }
    if spec.modality() == Modality::Boolean {
        println!("no_context_accuracy\t{:.6}", no_context_accuracy(&spec, samples, root.derive(3))?);
    }
    Ok(())
}

fn cmd_transfer(
    from: &Path,
    task: &str,
    profile: Profile,
    seed: u64,
    steps: Option<u64>,
    baseline: bool,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let ck = load_checkpoint(from, None)?;
    let mut train = TrainTemplate::for_profile(profile);
    train.dim = Some(ck.state.params.config.input_dim);
    train.steps = steps;
    // The checkpoint fixes the architecture; the profile still sets n, budget and lr.
    train.model = Some(ck.state.params.config.clone());
    let cfg = train.even(&[task.to_string()], seed)?;
    let state = transfer_init(&ck, &cfg)?;
    let cache = RunCache::new(out);
    let source = format!("{}:{}", ck.config_digest.iter().map(|b| format!("{b:02x}")).collect::<String>(), ck.state.step);
    let run = cache.run(&cfg, RunInit::From(&state, &source), false, exec)?;
    println!("transfer\t{task}\t{}\tt_plateau={}", run.reports[0], opt(run.reports[0].t_plateau));
    println!("logs\t{}", cache.dir(&run.key).display());
    if baseline {
        let scratch = cache.run(&cfg, RunInit::Scratch, false, exec)?;
        println!("scratch\t{task}\t{}\tt_plateau={}", scratch.reports[0], opt(scratch.reports[0].t_plateau));
        if let (Some(a), Some(b)) = (run.reports[0].t_plateau, scratch.reports[0].t_plateau) {
            println!("ratio\t{:.3}", a as f64 / b as f64);
        }
    }
    Ok(())
}

fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<()> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("experiment.json"), serde_json::to_vec_pretty(cfg)?)?;
    match &cfg.experiment {
        Experiment::Sweep(c) => {
            let res = run_sweep(c, out, exec)?;
            print!("{}", plateau_lab::xlab::sweep::render_table(&res.aggregate));
        }
        Experiment::Uneven(c) => {
            for r in run_uneven(c, out, exec)? {
                println!(
                    "{}\tw={}\tB_m={}\tseed={}\tmulti={}/{}\tsingle={}/{}",
                    r.task,
                    r.weight,
                    r.count,
                    r.seed,
                    opt(r.multi_t_plateau),
                    opt(r.multi_t_exit),
                    opt(r.single_t_plateau),
                    opt(r.single_t_exit)
                );
            }
        }
        Experiment::Transfer(c) => {
            for cell in run_transfer(c, out, exec)? {
                println!(
                    "{} -> {}\tseed={}\tratio={}\t{}",
                    cell.source,
                    cell.target,
                    cell.seed,
                    cell.ratio.map_or("-".into(), |r| format!("{r:.3}")),
                    cell.note.unwrap_or_default()
                );
            }
        }
        Experiment::RetrievalTransfer(c) => print_retrieval(&run_retrieval_transfer(c, out, exec)?),
        Experiment::FeatureLearning(c) => print_features(&run_feature_learning(c, Some(out), exec)?),
        Experiment::SingleRun(c) => {
            let path = out.join("config.json");
            fs::write(&path, serde_json::to_vec_pretty(&c.config)?)?;
            cmd_train(&path, c.config.seed, out, exec)?;
        }
    }
    Ok(())
}

fn print_retrieval(rows: &[plateau_lab::xlab::RetrievalRow]) {
    println!("task\tseed\tscratch\tfrom_{}\tratio", rows.first().map_or("retrieval", |r| r.source.as_str()));
    for r in rows {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            r.task,
            r.seed,
            opt(r.scratch_t_plateau),
            opt(r.retrieval_t_plateau),
            r.ratio.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
}

fn print_features(rows: &[plateau_lab::xlab::FeatureRow]) {
    println!("d\th\th'\tk\tseed\tsingle\tmulti\tmulti/single");
    for r in rows {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.d,
            r.h,
            r.hp,
            r.k,
            r.seed,
            opt(r.single_t_escape),
            opt(r.multi_t_escape),
            r.ratio.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.serial { Exec::Serial } else { Exec::default() };
    match cli.cmd {
        Cmd::Train { config, seed, out } => cmd_train(&config, seed, &out, exec),
        Cmd::Run { config } => run_experiment(&ExperimentConfig::from_json(&read_text(&config)?)?, exec),
        Cmd::Sweep { tasks, min_subset, max_subset, profile, seeds, steps, out } => {
            let mut train = TrainTemplate::for_profile(profile.into());
            train.steps = steps;
            let cfg = ExperimentConfig {
                experiment: Experiment::Sweep(SweepConfig { tasks, min_subset, max_subset, seeds, train }),
                out_dir: out,
            };
            cfg.validate()?;
            run_experiment(&cfg, exec)
        }
        Cmd::Oracle { task, dim, mu, arity, samples, seed } => cmd_oracle(&task, dim, mu, arity, samples, seed, exec),
        Cmd::Transfer { from, task, profile, seed, steps, baseline, out } => {
            cmd_transfer(&from, &task, profile.into(), seed, steps, baseline, &out, exec)
        }
        Cmd::RetrievalTransfer { modality, profile, seeds, steps, out } => {
            let modality = match modality {
                ModalityArg::Gaussian => Modality::Continuous,
                ModalityArg::Boolean => Modality::Boolean,
            };
            let mut train = TrainTemplate::for_profile(profile.into());
            train.dim = Some(train.dim().max(plateau_lab::xlab::config::RETRIEVAL_DIM));
            train.steps = steps;
            let mut pretrain = train.clone();
            pretrain.stop.after_exit = true;
            let cfg = ExperimentConfig {
                experiment: Experiment::RetrievalTransfer(RetrievalTransferConfig {
                    modality,
                    seeds,
                    pretrain,
                    train,
                    targets: None,
                }),
                out_dir: out,
            };
            cfg.validate()?;
            run_experiment(&cfg, exec)
        }
        Cmd::Fl { d, h, hp, k, mode, seeds, steps, stop_after_escape, teacher, out } => {
            let cfg = FeatureLearningConfig {
                cells: vec![FeatureCell { d, h, hp, k }],
                seeds,
                steps,
                lr: None,
                batch_size: None,
                init_std: None,
                escape_fraction: None,
                stop_after_escape,
                teacher: match teacher {
                    TeacherArg::Resampled => TeacherLaw::Resampled,
                    TeacherArg::Fixed => TeacherLaw::Fixed,
                },
            };
            if mode == ModeArg::Both {
                print_features(&run_feature_learning(&cfg, out.as_deref(), exec)?);
            } else {
                let fm = if mode == ModeArg::Single { FeatureMode::Single } else { FeatureMode::Multi };
                println!("seed\tt_escape\treference_loss");
                for &seed in &cfg.seeds {
                    let tc = plateau_lab::xlab::featurelearn::feature_config(&cfg, &cfg.cells[0], fm, seed);
                    let run = plateau_lab::train::train_featurenet(&tc)?;
                    if let Some(dir) = &out {
                        fs::create_dir_all(dir)?;
                        fs::write(dir.join(format!("fl_{}_s{seed}.jsonl", tc.label())), run.log.to_jsonl())?;
                    }
                    println!("{seed}\t{}\t{}", opt(run.t_escape), run.reference.map_or("-".into(), |r| format!("{r:.4}")));
                }
            }
            Ok(())
        }
        Cmd::Plot { input, metric, out, log_y } => {
            let metric: PlotMetric = metric.parse()?;
            let log = read_jsonl(&input)?;
            emit_plot(&log, metric, &PlotOptions { log_y, ..PlotOptions::default() }, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
