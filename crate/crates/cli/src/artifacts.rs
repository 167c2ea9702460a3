//! On-disk artifacts: dataset, model and unified-domain dumps, CSV reports.
//!
//! | file             | contents                                              |
//! |------------------|-------------------------------------------------------|
//! | `data.cstn`      | rank 4 `[N, C, H, W]` images                          |
//! | `manifest.csv`   | `sample_id,class_label,domain_id,offset`              |
//! | `domains.csv`    | one row per domain spec                               |
//! | `model.cstn`     | rank 1: `[C_in, C_style, C_trunk, K, H, W, params..]` |
//! | `unified.cstn`   | rank 2 `[2C + 2, 2C]`, see [`save_unified`]           |
//! | `train_log.csv`  | per-epoch training log                                |
//! | `run.ini`        | resolved configuration of the run                     |

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use conststyle_core::datagen::{DomainSpec, LabeledSample, SyntheticDataset};
use conststyle_core::net::{Architecture, DeskNet};
use conststyle_core::numerics::SymMatrix;
use conststyle_core::pipeline::{BoundRow, DistanceRow, EvalReport, ScaleRow, TrainReport};
use conststyle_core::style::{FeatureMap, GaussianStyle};
use conststyle_core::unified::{UnifiedDomain, UnifiedMethod};

use crate::tensor::{header_len, Tensor, TensorError};
use crate::CliError;

pub const DATA_FILE: &str = "data.cstn";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DOMAINS_FILE: &str = "domains.csv";
pub const MODEL_FILE: &str = "model.cstn";
pub const INITIAL_STYLE_FILE: &str = "initial_style.cstn";
pub const UNIFIED_FILE: &str = "unified.cstn";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REFRESH_LOG_FILE: &str = "refresh_log.csv";
pub const RUN_FILE: &str = "run.ini";
pub const LOCK_FILE: &str = ".lock";

const MODEL_HEADER: usize = 6;

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::User(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_tensor(path: &Path) -> Result<Tensor, CliError> {
    Tensor::load(path).map_err(|e| match e {
        TensorError::Io(io) => CliError::io(path, io),
        other => CliError::User(format!("{}: {other}", path.display())),
    })
}

fn save_tensor(path: &Path, t: &Tensor) -> Result<(), CliError> {
    t.save(path).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(file)))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn u32_dim(n: usize) -> Result<u32, CliError> {
    u32::try_from(n).map_err(|_| CliError::User(format!("dimension {n} does not fit a u32")))
}

pub fn save_dataset(dir: &Path, data: &SyntheticDataset, specs: &[DomainSpec]) -> Result<(), CliError> {
    let [c, h, w] = data.image_shape().ok_or_else(|| CliError::User("empty dataset".into()))?;
    let dims = vec![u32_dim(data.len())?, u32_dim(c)?, u32_dim(h)?, u32_dim(w)?];
    let values: Vec<f64> = data.samples.iter().flat_map(|s| s.input.as_slice().iter().copied()).collect();
    let tensor = Tensor::from_f64(dims, &values).map_err(|e| CliError::Internal(e.to_string()))?;
    save_tensor(&dir.join(DATA_FILE), &tensor)?;

    let stride = c * h * w * 4;
    let path = dir.join(MANIFEST_FILE);
    let mut m = csv_writer(&path)?;
    m.write_record(["sample_id", "class_label", "domain_id", "offset"]).map_err(|e| CliError::csv(&path, e))?;
    for (i, s) in data.samples.iter().enumerate() {
        let offset = tensor.header_len() + i * stride;
        m.serialize((i, s.class_label, s.domain_id, offset)).map_err(|e| CliError::csv(&path, e))?;
    }
    m.flush().map_err(|e| CliError::io(&path, e))?;

    let path = dir.join(DOMAINS_FILE);
    let mut d = csv_writer(&path)?;
    d.write_record([
        "domain_id", "shift_level", "gain_0", "gain_1", "gain_2", "bias_0", "bias_1", "bias_2", "mix_angle", "noise_sigma",
    ])
    .map_err(|e| CliError::csv(&path, e))?;
    for s in specs {
        let g = s.channel_gain;
        let b = s.channel_bias;
        d.serialize((s.domain_id, s.shift_level, g[0], g[1], g[2], b[0], b[1], b[2], s.channel_mix_angle, s.noise_sigma))
            .map_err(|e| CliError::csv(&path, e))?;
    }
    d.flush().map_err(|e| CliError::io(&path, e))
}

/// Loads a dataset dump. `n_classes` comes from the dump's run manifest.
pub fn load_dataset(dir: &Path, n_classes: usize, seed: u64) -> Result<SyntheticDataset, CliError> {
    let data_path = dir.join(DATA_FILE);
    let tensor = load_tensor(&data_path)?;
    let [n, c, h, w]: [u32; 4] = tensor.dims.as_slice().try_into().map_err(|_| {
        CliError::User(format!("{}: expected a rank-4 tensor, found dims {:?}", data_path.display(), tensor.dims))
    })?;
    let (n, c, h, w) = (n as usize, c as usize, h as usize, w as usize);
    let plane = c * h * w;
    let path = dir.join(MANIFEST_FILE);
    let mut reader = csv_reader(&path)?;
    let mut samples = Vec::with_capacity(n);
    let mut domain_ids = Vec::new();
    for (i, row) in reader.deserialize::<(usize, usize, usize, usize)>().enumerate() {
        let (id, label, domain, offset) = row.map_err(|e| CliError::csv(&path, e))?;
        if id != i || id >= n || offset != header_len(4) + i * plane * 4 {
            return Err(CliError::User(format!("{}: row {i} does not match {}", path.display(), DATA_FILE)));
        }
        if label >= n_classes {
            return Err(CliError::User(format!("{}: label {label} out of range for {n_classes} classes", path.display())));
        }
        let values: Vec<f64> = tensor.data[i * plane..(i + 1) * plane].iter().map(|&v| f64::from(v)).collect();
        let input = FeatureMap::new(c, h, w, values).map_err(|e| CliError::User(format!("{}: {e}", data_path.display())))?;
        if !domain_ids.contains(&domain) {
            domain_ids.push(domain);
        }
        samples.push(LabeledSample { input, class_label: label, domain_id: domain });
    }
    if samples.len() != n {
        return Err(CliError::User(format!("{}: {} rows for {n} samples", path.display(), samples.len())));
    }
    Ok(SyntheticDataset { samples, n_classes, domain_ids, seed })
}

/// `(domain_id, shift_level)` pairs from `domains.csv`.
pub fn load_shift_levels(dir: &Path) -> Result<Vec<(usize, f64)>, CliError> {
    let path = dir.join(DOMAINS_FILE);
    let mut reader = csv_reader(&path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::csv(&path, e))?;
        let parse_err = || CliError::User(format!("{}: malformed row", path.display()));
        let id = row.get(0).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        let level = row.get(1).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        out.push((id, level));
    }
    Ok(out)
}

pub fn model_tensor(net: &DeskNet) -> Result<Tensor, CliError> {
    let a = net.architecture();
    let mut values = vec![
        a.in_channels as f64,
        a.style_channels as f64,
        a.trunk_channels as f64,
        a.n_classes as f64,
        a.height as f64,
        a.width as f64,
    ];
    values.extend_from_slice(net.params());
    Tensor::from_f64(vec![u32_dim(values.len())?], &values).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn model_from_tensor(t: &Tensor, origin: &Path) -> Result<DeskNet, CliError> {
    let bad = |msg: String| CliError::User(format!("{}: {msg}", origin.display()));
    if t.rank() != 1 || t.data.len() < MODEL_HEADER {
        return Err(bad(format!("not a model dump (dims {:?})", t.dims)));
    }
    let h: Vec<usize> = t.data[..MODEL_HEADER].iter().map(|&v| v as usize).collect();
    let arch = Architecture {
        in_channels: h[0],
        style_channels: h[1],
        trunk_channels: h[2],
        n_classes: h[3],
        height: h[4],
        width: h[5],
    };
    let params = t.data[MODEL_HEADER..].iter().map(|&v| f64::from(v)).collect();
    DeskNet::from_params(arch, params).map_err(|e| bad(e.to_string()))
}

pub fn save_model(path: &Path, net: &DeskNet) -> Result<(), CliError> {
    save_tensor(path, &model_tensor(net)?)
}

pub fn load_model(path: &Path) -> Result<DeskNet, CliError> {
    model_from_tensor(&load_tensor(path)?, path)
}

/// Rows: the mean, then the `2C` covariance rows, then
/// `[method code, iterations, residual, converged, 0, ..]`.
pub fn unified_tensor(u: &UnifiedDomain) -> Result<Tensor, CliError> {
    let d = u.style.dim();
    if d < 4 {
        return Err(CliError::Internal(format!("unified domain of dimension {d} cannot hold its trailer row")));
    }
    let mut values = Vec::with_capacity((d + 2) * d);
    values.extend_from_slice(u.style.mean());
    values.extend_from_slice(u.style.covariance().as_slice());
    let mut trailer = vec![0.0; d];
    trailer[0] = f64::from(u.method.code());
    trailer[1] = u.iterations as f64;
    trailer[2] = u.residual;
    trailer[3] = if u.converged { 1.0 } else { 0.0 };
    values.extend(trailer);
    Tensor::from_f64(vec![u32_dim(d + 2)?, u32_dim(d)?], &values).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn unified_from_tensor(t: &Tensor, origin: &Path) -> Result<UnifiedDomain, CliError> {
    let bad = |msg: String| CliError::User(format!("{}: {msg}", origin.display()));
    let [rows, cols]: [u32; 2] = t.dims.as_slice().try_into().map_err(|_| bad(format!("dims {:?}", t.dims)))?;
    let d = cols as usize;
    if rows as usize != d + 2 || d < 4 || d % 2 != 0 {
        return Err(bad(format!("not a unified-domain dump (dims {:?})", t.dims)));
    }
    let v = t.to_f64();
    let cov = SymMatrix::new(d, v[d..d + d * d].to_vec()).map_err(|e| bad(e.to_string()))?;
    let style = GaussianStyle::new(v[..d].to_vec(), cov).map_err(|e| bad(e.to_string()))?;
    let trailer = &v[(d + 1) * d..];
    let method = UnifiedMethod::from_code(trailer[0] as u8).ok_or_else(|| bad(format!("method code {}", trailer[0])))?;
    Ok(UnifiedDomain {
        style,
        method,
        iterations: trailer[1] as usize,
        residual: trailer[2],
        converged: trailer[3] != 0.0,
    })
}

pub fn save_unified(path: &Path, u: &UnifiedDomain) -> Result<(), CliError> {
    save_tensor(path, &unified_tensor(u)?)
}

pub fn load_unified(path: &Path) -> Result<UnifiedDomain, CliError> {
    unified_from_tensor(&load_tensor(path)?, path)
}

pub fn save_style_params(path: &Path, params: &[f64]) -> Result<(), CliError> {
    let t = Tensor::from_f64(vec![u32_dim(params.len())?], params).map_err(|e| CliError::Internal(e.to_string()))?;
    save_tensor(path, &t)
}

pub fn load_style_params(path: &Path) -> Result<Vec<f64>, CliError> {
    Ok(load_tensor(path)?.to_f64())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_train_log(path: &Path, report: &TrainReport) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = |err| CliError::csv(path, err);
    w.write_record(["epoch", "mode", "loss", "train_acc", "refresh", "barycenter_residual"]).map_err(e)?;
    for r in &report.epochs {
        w.write_record([
            r.epoch.to_string(),
            r.phase.as_str().to_string(),
            r.loss.to_string(),
            r.train_accuracy.to_string(),
            u8::from(r.refresh).to_string(),
            opt(r.barycenter_residual),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

pub fn write_refresh_log(path: &Path, report: &TrainReport) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = |err| CliError::csv(path, err);
    w.write_record(["epoch", "method", "iterations", "residual", "converged", "gmm_iterations", "gmm_degenerate"]).map_err(e)?;
    for r in &report.refreshes {
        w.write_record([
            r.epoch.to_string(),
            r.method.as_str().to_string(),
            r.iterations.to_string(),
            r.residual.to_string(),
            u8::from(r.converged).to_string(),
            r.gmm_iterations.to_string(),
            u8::from(r.gmm_degenerate).to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

pub const EVAL_HEADER: [&str; 6] = ["domain_id", "alpha", "n", "correct", "accuracy", "frechet_to_unified"];

fn eval_fields(report: &EvalReport) -> Vec<[String; 6]> {
    report
        .domains
        .iter()
        .map(|d| {
            [
                d.domain_id.to_string(),
                report.alpha.to_string(),
                d.n.to_string(),
                d.correct.to_string(),
                d.accuracy.to_string(),
                opt(d.frechet_to_unified),
            ]
        })
        .collect()
}

/// Eval rows, each optionally prefixed with a swept key.
pub fn write_eval_rows<W: Write>(out: W, sweep_key: Option<&str>, rows: &[(String, &EvalReport)]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<&str> = sweep_key.into_iter().collect();
    header.extend(EVAL_HEADER);
    w.write_record(&header)?;
    for (key, report) in rows {
        for fields in eval_fields(report) {
            let mut rec: Vec<String> = sweep_key.map(|_| key.clone()).into_iter().collect();
            rec.extend(fields);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_eval_file(path: &Path, sweep_key: Option<&str>, rows: &[(String, &EvalReport)]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_eval_rows(BufWriter::new(file), sweep_key, rows).map_err(|e| CliError::csv(path, e))
}

pub fn write_distance_rows(path: &Path, rows: &[DistanceRow], levels: &[(usize, f64)]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = |err| CliError::csv(path, err);
    w.write_record(["domain_id", "shift_level", "erm_frechet", "erm_accuracy", "conststyle_frechet", "conststyle_accuracy"])
        .map_err(e)?;
    for r in rows {
        let level = levels.iter().find(|(id, _)| *id == r.domain_id).map(|(_, l)| *l);
        w.write_record([
            r.domain_id.to_string(),
            opt(level),
            r.erm_frechet.to_string(),
            r.erm_accuracy.to_string(),
            r.conststyle_frechet.to_string(),
            r.conststyle_accuracy.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

pub fn write_scale_rows(path: &Path, rows: &[ScaleRow]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = |err| CliError::csv(path, err);
    w.write_record(["size", "seconds_per_epoch"]).map_err(e)?;
    for r in rows {
        w.write_record([r.size.to_string(), r.seconds_per_epoch.to_string()]).map_err(e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

pub fn write_bound_rows(path: &Path, rows: &[BoundRow]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let e = |err| CliError::csv(path, err);
    w.write_record(["domain_id", "d_mu", "d_sigma", "frechet"]).map_err(e)?;
    for r in rows {
        w.write_record([r.domain_id.to_string(), r.d_mu.to_string(), r.d_sigma.to_string(), r.frechet.to_string()])
            .map_err(e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}
