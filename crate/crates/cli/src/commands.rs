//! Subcommand definitions and their implementations.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use conststyle_core::datagen::{generate_dataset_sized, make_domain_family_with, SyntheticDataset};
use conststyle_core::pipeline::{
    self, alpha_sweep, diagnose, distance_sweep, evaluate, max_relative_deviation, run_fold, scalability_sweep,
    train_observed, Clock, EvalReport, TrainedModel,
};

use crate::artifacts::{self as art, DirLock};
use crate::config::RunConfig;
use crate::CliError;

pub const THREADS_ENV: &str = "CSTYLE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "conststyle", version, about = "Unified-domain style alignment experiments at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// `key = value` config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset dump.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        domains: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_cell: Option<usize>,
        /// Comma-separated shift level per domain.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset dump, optionally holding out one domain.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model on one domain (or all) of a dataset dump.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: Option<usize>,
        /// Defaults to the model's configured alpha (1 for ERM models).
        #[arg(long)]
        alpha: Option<f64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-domain-out over every domain of a dataset dump.
    Loo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train ERM and conststyle on one domain, evaluate on every domain.
    Distances {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dump; defaults to `--data`.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        base: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run inference of a trained model over a grid of alphas.
    AblateAlpha {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: Option<usize>,
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain one fold per cluster count.
    AblateClusters {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        counts: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seconds per epoch over increasing training-set sizes.
    Scale {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-domain mean/std gap terms and Fréchet distance to the unified domain.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Worker count from `CSTYLE_THREADS` (default 1).
pub fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::User(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Maps `f` over `items` with at most `threads` workers; output order
/// follows input order.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        for (slots, part) in out.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            s.spawn(move || {
                for (slot, item) in slots.iter_mut().zip(part) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled its slot")).collect()
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RunConfig::from_text(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::User(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_header(command: &str, extra: &[(&str, String)]) -> Result<Vec<String>, CliError> {
    let mut lines = vec![
        format!("conststyle {}", env!("CARGO_PKG_VERSION")),
        format!("command: {command}"),
        format!("threads: {}", threads()?),
    ];
    lines.extend(extra.iter().map(|(k, v)| format!("{k}: {v}")));
    Ok(lines)
}

fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str, extra: &[(&str, String)]) -> Result<(), CliError> {
    let path = dir.join(art::RUN_FILE);
    fs::write(&path, cfg.to_text(&manifest_header(command, extra)?)).map_err(|e| CliError::io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<RunConfig, CliError> {
    let path = dir.join(art::RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    RunConfig::from_text(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

/// Loads a dataset dump using the class count and seed from its manifest.
pub fn open_dataset(dir: &Path) -> Result<SyntheticDataset, CliError> {
    let meta = read_manifest(dir)?;
    art::load_dataset(dir, meta.data.classes, meta.train.seed)
}

fn require_domain(data: &SyntheticDataset, domain: usize) -> Result<(), CliError> {
    if data.domain_ids.contains(&domain) {
        Ok(())
    } else {
        Err(CliError::User(format!("domain {domain} is not in the dataset (have {:?})", data.domain_ids)))
    }
}

fn open_model(dir: &Path) -> Result<(TrainedModel, RunConfig), CliError> {
    let cfg = read_manifest(dir)?;
    let net = art::load_model(&dir.join(art::MODEL_FILE))?;
    let unified_path = dir.join(art::UNIFIED_FILE);
    let unified = if unified_path.exists() { Some(art::load_unified(&unified_path)?) } else { None };
    let style_path = dir.join(art::INITIAL_STYLE_FILE);
    let initial_style_params = if style_path.exists() { Some(art::load_style_params(&style_path)?) } else { None };
    let model = TrainedModel { net, unified, initial_style_params, report: Default::default() };
    Ok((model, cfg))
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    threads()?;
    match cli.command {
        Command::GenData { common, domains, classes, per_cell, levels, out } => {
            let cfg = resolve(
                &common,
                &[
                    ("domains", domains.map(|v| v.to_string())),
                    ("classes", classes.map(|v| v.to_string())),
                    ("per_cell", per_cell.map(|v| v.to_string())),
                    ("shift_levels", levels),
                ],
            )?;
            gen_data(&cfg, &out)
        }
        Command::Train { common, data, out, holdout, mode, epochs } => {
            let cfg = resolve(
                &common,
                &[("holdout", holdout.map(|v| v.to_string())), ("mode", mode), ("epochs", epochs.map(|v| v.to_string()))],
            )?;
            train_cmd(&cfg, &data, &out)
        }
        Command::Eval { model, data, domain, alpha, out } => eval_cmd(&model, &data, domain, alpha, out.as_deref()),
        Command::Loo { common, data, out, mode } => {
            let cfg = resolve(&common, &[("mode", mode)])?;
            loo_cmd(&cfg, &data, &out)
        }
        Command::Distances { common, data, test, base, out } => {
            let cfg = resolve(&common, &[("base_domain", base.map(|v| v.to_string()))])?;
            distances_cmd(&cfg, &data, test.as_deref(), &out)
        }
        Command::AblateAlpha { model, data, domain, alphas, out } => {
            ablate_alpha_cmd(&model, &data, domain, alphas.as_deref(), &out)
        }
        Command::AblateClusters { common, data, holdout, counts, out } => {
            let cfg =
                resolve(&common, &[("holdout", holdout.map(|v| v.to_string())), ("cluster_counts", counts)])?;
            ablate_clusters_cmd(&cfg, &data, &out)
        }
        Command::Scale { common, data, sizes, out } => {
            let cfg = resolve(&common, &[("sizes", sizes)])?;
            scale_cmd(&cfg, &data, &out)
        }
        Command::Diagnose { model, data, out } => diagnose_cmd(&model, &data, &out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let _lock = DirLock::acquire(out)?;
    let d = &cfg.data;
    let seed = cfg.train.seed;
    let specs = make_domain_family_with(d.domains, &d.shift_levels, seed, &d.family)?;
    let data = generate_dataset_sized(&specs, d.classes, d.per_cell, d.side, seed)?;
    art::save_dataset(out, &data, &specs)?;
    write_manifest(out, cfg, "gen-data", &[])?;
    println!("wrote {} samples ({} domains x {} classes x {}) to {}", data.len(), d.domains, d.classes, d.per_cell, out.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = open_dataset(data_dir)?;
    let seen = match cfg.holdout {
        Some(h) => {
            require_domain(&data, h)?;
            data.without_domain(h)
        }
        None => data,
    };
    let _lock = DirLock::acquire(out)?;
    let model = train_observed(&seen, &cfg.train, |r| {
        eprintln!("epoch {:>3} {:>10} loss {:.4} acc {:.4}{}", r.epoch, r.phase.as_str(), r.loss, r.train_accuracy, if r.refresh { " refresh" } else { "" });
    })?;
    art::save_model(&out.join(art::MODEL_FILE), &model.net)?;
    if let Some(u) = &model.unified {
        art::save_unified(&out.join(art::UNIFIED_FILE), u)?;
    }
    if let Some(p) = &model.initial_style_params {
        art::save_style_params(&out.join(art::INITIAL_STYLE_FILE), p)?;
    }
    art::write_train_log(&out.join(art::TRAIN_LOG_FILE), &model.report)?;
    art::write_refresh_log(&out.join(art::REFRESH_LOG_FILE), &model.report)?;
    write_manifest(out, cfg, "train", &[("data", data_dir.display().to_string())])?;
    Ok(())
}

fn eval_cmd(model_dir: &Path, data_dir: &Path, domain: Option<usize>, alpha: Option<f64>, out: Option<&Path>) -> Result<(), CliError> {
    let (model, cfg) = open_model(model_dir)?;
    let data = open_dataset(data_dir)?;
    let subset = match domain {
        Some(d) => {
            require_domain(&data, d)?;
            data.domain(d)
        }
        None => data,
    };
    let alpha = alpha.unwrap_or(cfg.train.eval_alpha());
    let report = evaluate(&model, &subset, alpha)?;
    let rows = [(String::new(), &report)];
    match out {
        Some(path) => art::write_eval_file(path, None, &rows),
        None => art::write_eval_rows(io::stdout().lock(), None, &rows).map_err(|e| CliError::Internal(e.to_string())),
    }
}

fn loo_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = open_dataset(data_dir)?;
    if data.domain_ids.len() < 2 {
        return Err(CliError::User("leave-one-out needs at least two domains".into()));
    }
    let _lock = DirLock::acquire(out)?;
    let folds: Vec<EvalReport> = parallel_map(&data.domain_ids, threads()?, |&h| run_fold(&data, h, &cfg.train).map(|(_, r)| r))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let rows: Vec<(String, &EvalReport)> = data.domain_ids.iter().map(|h| h.to_string()).zip(&folds).collect();
    let path = out.join("loo.csv");
    art::write_eval_file(&path, Some("holdout"), &rows)?;
    let average = folds.iter().map(|r| r.accuracy).sum::<f64>() / folds.len() as f64;
    let mut f = fs::OpenOptions::new().append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
    writeln!(f, "average,,{},,,{},", cfg.train.eval_alpha(), average).map_err(|e| CliError::io(&path, e))?;
    write_manifest(out, cfg, "loo", &[("data", data_dir.display().to_string())])?;
    println!("average unseen accuracy {average:.4}");
    Ok(())
}

fn distances_cmd(cfg: &RunConfig, data_dir: &Path, test_dir: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let train_set = open_dataset(data_dir)?;
    require_domain(&train_set, cfg.base_domain)?;
    let test_dir = test_dir.unwrap_or(data_dir);
    let test_set = open_dataset(test_dir)?;
    let levels = art::load_shift_levels(test_dir)?;
    let _lock = DirLock::acquire(out)?;
    let rows = distance_sweep(&train_set, &test_set, cfg.base_domain, &cfg.train)?;
    art::write_distance_rows(&out.join("distances.csv"), &rows, &levels)?;
    write_manifest(
        out,
        cfg,
        "distances",
        &[("data", data_dir.display().to_string()), ("test", test_dir.display().to_string())],
    )
}

fn ablate_alpha_cmd(model_dir: &Path, data_dir: &Path, domain: Option<usize>, alphas: Option<&str>, out: &Path) -> Result<(), CliError> {
    let (model, mut cfg) = open_model(model_dir)?;
    if let Some(a) = alphas {
        cfg.set("alphas", a)?;
    }
    cfg.validate()?;
    let data = open_dataset(data_dir)?;
    let subset = match domain.or(cfg.holdout) {
        Some(d) => {
            require_domain(&data, d)?;
            data.domain(d)
        }
        None => data,
    };
    let _lock = DirLock::acquire(out)?;
    let reports = alpha_sweep(&model, &subset, &cfg.alphas)?;
    let rows: Vec<(String, &EvalReport)> = reports.iter().map(|r| (String::new(), r)).collect();
    art::write_eval_file(&out.join("alpha_sweep.csv"), None, &rows)?;
    write_manifest(
        out,
        &cfg,
        "ablate-alpha",
        &[("model", model_dir.display().to_string()), ("data", data_dir.display().to_string())],
    )
}

fn ablate_clusters_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = open_dataset(data_dir)?;
    let holdout = cfg.holdout.unwrap_or(*data.domain_ids.last().ok_or_else(|| CliError::User("empty dataset".into()))?);
    require_domain(&data, holdout)?;
    let _lock = DirLock::acquire(out)?;
    let reports: Vec<EvalReport> = parallel_map(&cfg.cluster_counts, threads()?, |&n| {
        let train = pipeline::TrainConfig { n_clusters: n, ..cfg.train.clone() };
        run_fold(&data, holdout, &train).map(|(_, r)| r)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let rows: Vec<(String, &EvalReport)> = cfg.cluster_counts.iter().map(|n| n.to_string()).zip(&reports).collect();
    art::write_eval_file(&out.join("cluster_sweep.csv"), Some("n_clusters"), &rows)?;
    write_manifest(out, cfg, "ablate-clusters", &[("data", data_dir.display().to_string()), ("holdout_used", holdout.to_string())])
}

fn scale_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = open_dataset(data_dir)?;
    let _lock = DirLock::acquire(out)?;
    let rows = scalability_sweep(&data, &cfg.sizes, &cfg.train, &mut WallClock(Instant::now()))?;
    art::write_scale_rows(&out.join("scale.csv"), &rows)?;
    write_manifest(out, cfg, "scale", &[("data", data_dir.display().to_string())])?;
    if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.seconds_per_epoch).collect();
        println!("max relative deviation from linear fit: {:.3}", max_relative_deviation(&xs, &ys)?);
    }
    Ok(())
}

fn diagnose_cmd(model_dir: &Path, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let (model, cfg) = open_model(model_dir)?;
    let unified = model
        .unified
        .as_ref()
        .ok_or_else(|| CliError::User(format!("missing artifact: {}", model_dir.join(art::UNIFIED_FILE).display())))?;
    let data = open_dataset(data_dir)?;
    let _lock = DirLock::acquire(out)?;
    let rows = diagnose(&model.inference_net()?, unified, &data)?;
    art::write_bound_rows(&out.join("diagnose.csv"), &rows)?;
    write_manifest(
        out,
        &cfg,
        "diagnose",
        &[("model", model_dir.display().to_string()), ("data", data_dir.display().to_string())],
    )
}
