use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ctts_core::baselines::{DeepArConfig, DeepArLite, DEFAULT_FLAT_BAND};
use ctts_core::checkpoint::Checkpoint;
use ctts_core::data::{read_series_csv_file, samples_from_all, split, Sample, TimeSeries};
use ctts_core::kv::KvMap;
use ctts_core::model::{train, CttsConfig, CttsModel, EpochRecord, Pooling, TrainConfig};
use ctts_core::rng::stream_seed;

use crate::config::{self, get, require, Flags, Manifest};
use crate::TrainArgs;

const COMMON: [&str; 12] = [
    "model",
    "data",
    "val_data",
    "val_frac",
    "window_stride",
    "eps",
    "seed",
    "epochs",
    "batch",
    "lr",
    "drop",
    "out",
];
const CTTS_ONLY: [&str; 9] = [
    "weight_decay",
    "kernel",
    "stride",
    "depth",
    "heads",
    "dim",
    "mlp_ratio",
    "pooling",
    "resume",
];
const DEEPAR_ONLY: [&str; 6] = ["hidden", "samples", "tau", "patience", "lr_patience", "lr_factor"];

pub fn run(a: TrainArgs) -> Result<()> {
    let mut flags = Flags::default();
    flags
        .put("model", &a.model)
        .put("data", &a.data)
        .put("val_data", &a.val_data)
        .put("val_frac", &a.val_frac)
        .put("window_stride", &a.window_stride)
        .put("eps", &a.eps)
        .put("seed", &a.seed)
        .put("epochs", &a.epochs)
        .put("batch", &a.batch)
        .put("lr", &a.lr)
        .put("drop", &a.drop)
        .put("weight_decay", &a.weight_decay)
        .put("kernel", &a.kernel)
        .put("stride", &a.stride)
        .put("depth", &a.depth)
        .put("heads", &a.heads)
        .put("dim", &a.dim)
        .put("mlp_ratio", &a.mlp_ratio)
        .put("pooling", &a.pooling)
        .put("hidden", &a.hidden)
        .put("samples", &a.samples)
        .put("tau", &a.tau)
        .put("patience", &a.patience)
        .put("lr_patience", &a.lr_patience)
        .put("lr_factor", &a.lr_factor)
        .put("resume", &a.resume)
        .put("out", &a.out);
    let allowed: Vec<&str> = COMMON.iter().chain(&CTTS_ONLY).chain(&DEEPAR_ONLY).copied().collect();
    let kv = config::resolve("train", a.config.as_deref(), flags, &allowed)?;
    let model = kv.get_str("model").unwrap_or("ctts").to_string();
    let foreign: &[&str] = match model.as_str() {
        "ctts" => &DEEPAR_ONLY,
        "deepar" => &CTTS_ONLY,
        other => bail!("unknown model {other:?}; expected ctts or deepar"),
    };
    if let Some(k) = foreign.iter().find(|k| kv.contains(k)) {
        bail!("--{} does not apply to --model {model}", k.replace('_', "-"));
    }

    let data = Data::load(&kv)?;
    let out = kv
        .get_str("out")
        .map(str::to_string)
        .unwrap_or_else(|| config::default_path(&format!("{model}.ckpt")));
    let mut settings = data.settings.clone();
    settings.set("model", &model);
    settings.set("out", &out);
    match model.as_str() {
        "ctts" => train_ctts(&kv, &data, settings, &out),
        _ => train_deepar(&kv, &data, settings, &out),
    }
}

struct Data {
    train: Vec<Sample>,
    val: Vec<Sample>,
    seed: u64,
    /// Data-related settings as resolved, for the manifest.
    settings: KvMap,
    files: Vec<(&'static str, String)>,
}

impl Data {
    fn load(kv: &KvMap) -> Result<Self> {
        let data = require(kv, "data", "data")?;
        let seed: u64 = get(kv, "seed", 0)?;
        let stride: usize = get(kv, "window_stride", 1)?;
        let eps: f64 = get(kv, "eps", 1e-9)?;
        let mut settings = KvMap::new();
        settings.set("data", &data);
        settings.set("seed", seed);
        settings.set("window_stride", stride);
        settings.set("eps", eps);
        let mut files = vec![("data", data.clone())];
        let series = read_csv(&data)?;
        let (train_series, val_series) = match kv.get_str("val_data") {
            Some(v) => {
                settings.set("val_data", v);
                files.push(("val_data", v.to_string()));
                (series, read_csv(v)?)
            }
            None => {
                let frac: f64 = get(kv, "val_frac", 0.2)?;
                if !(0.0..1.0).contains(&frac) {
                    bail!("val_frac must be in [0, 1), got {frac}");
                }
                settings.set("val_frac", frac);
                // Whole series go to one side so overlapping windows never straddle the split.
                split(&series, 1.0 - frac, stream_seed(seed, "split"))?
            }
        };
        if train_series.is_empty() || val_series.is_empty() {
            bail!(
                "{} series cannot be split into non-empty training and validation parts; add series, change --val-frac or pass --val-data",
                train_series.len() + val_series.len()
            );
        }
        Ok(Self {
            train: samples_from_all(&train_series, stride, eps)?,
            val: samples_from_all(&val_series, stride, eps)?,
            seed,
            settings,
            files,
        })
    }

    fn checksum(&self, manifest: &mut Manifest) -> Result<()> {
        for (name, path) in &self.files {
            manifest.checksum(name, Path::new(path))?;
        }
        manifest.result("train_samples", self.train.len());
        manifest.result("val_samples", self.val.len());
        Ok(())
    }
}

fn read_csv(path: &str) -> Result<Vec<TimeSeries>> {
    read_series_csv_file(Path::new(path)).with_context(|| format!("dataset {path}"))
}

fn ctts_config(kv: &KvMap, base: &CttsConfig) -> Result<CttsConfig> {
    let cfg = CttsConfig {
        kernel_size: get(kv, "kernel", base.kernel_size)?,
        stride: get(kv, "stride", base.stride)?,
        depth: get(kv, "depth", base.depth)?,
        heads: get(kv, "heads", base.heads)?,
        embed_dim: get(kv, "dim", base.embed_dim)?,
        drop_rate: get(kv, "drop", base.drop_rate)?,
        mlp_ratio: get(kv, "mlp_ratio", base.mlp_ratio)?,
        pooling: get::<Pooling>(kv, "pooling", base.pooling)?,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn open_log(path: &str) -> Result<BufWriter<File>> {
    config::ensure_parent(Path::new(path))?;
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {path}"))?))
}

fn train_ctts(kv: &KvMap, data: &Data, mut settings: KvMap, out: &str) -> Result<()> {
    let (mut model, start_epoch) = match kv.get_str("resume") {
        Some(path) => {
            if !Path::new(path).exists() {
                bail!("resume checkpoint {path} not found");
            }
            let ck = Checkpoint::load(Path::new(path)).with_context(|| format!("checkpoint {path}"))?;
            let model = CttsModel::from_checkpoint(&ck)?;
            let requested = ctts_config(kv, model.config())?;
            if &requested != model.config() {
                bail!("architecture flags conflict with resume checkpoint {path}");
            }
            settings.set("resume", path);
            (model, get::<usize>(&ck.meta, "epoch", 0)?)
        }
        None => {
            let cfg = ctts_config(kv, &CttsConfig::default())?;
            (CttsModel::new(cfg, stream_seed(data.seed, "init"))?, 0)
        }
    };
    let mut tc = TrainConfig {
        seed: data.seed,
        start_epoch,
        ..TrainConfig::default()
    };
    tc.epochs = get(kv, "epochs", tc.epochs)?;
    tc.batch_size = get(kv, "batch", tc.batch_size)?;
    tc.optimizer.lr = get(kv, "lr", tc.optimizer.lr)?;
    tc.optimizer.weight_decay = get(kv, "weight_decay", tc.optimizer.weight_decay)?;

    let c = model.config().clone();
    for (k, v) in [
        ("kernel", c.kernel_size.to_string()),
        ("stride", c.stride.to_string()),
        ("depth", c.depth.to_string()),
        ("heads", c.heads.to_string()),
        ("dim", c.embed_dim.to_string()),
        ("drop", c.drop_rate.to_string()),
        ("batch", tc.batch_size.to_string()),
        ("epochs", tc.epochs.to_string()),
        ("lr", tc.optimizer.lr.to_string()),
        ("weight_decay", tc.optimizer.weight_decay.to_string()),
        ("mlp_ratio", c.mlp_ratio.to_string()),
        ("pooling", c.pooling.to_string()),
    ] {
        settings.set(k, v);
    }
    println!(
        "kernel={} stride={} depth={} heads={} dim={} drop={} batch={} epochs={}",
        c.kernel_size, c.stride, c.depth, c.heads, c.embed_dim, c.drop_rate, tc.batch_size, tc.epochs
    );
    println!(
        "{} parameters, {} training and {} validation windows",
        model.num_parameters(),
        data.train.len(),
        data.val.len()
    );
    println!("{:>6} {:>11} {:>10} {:>11} {:>10}", "epoch", "train_loss", "train_acc", "val_loss", "val_acc");

    let log_path = config::sibling(out, ".log");
    let mut log = open_log(&log_path)?;
    let outcome = train(&mut model, &data.train, &data.val, &tc, Some(&mut log), |r: &EpochRecord| {
        println!(
            "{:>6} {:>11.5} {:>10.4} {:>11.5} {:>10.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    })?;
    log.flush()?;
    drop(log);

    let last_epoch = start_epoch + tc.epochs;
    let mut meta = KvMap::new();
    meta.set("epoch", last_epoch);
    meta.set("best_epoch", outcome.best_epoch);
    meta.set("train_seed", data.seed);
    let ck_path = Path::new(out);
    config::ensure_parent(ck_path)?;
    model.to_checkpoint(meta).save(ck_path)?;

    let mut manifest = Manifest::new("train", &settings);
    data.checksum(&mut manifest)?;
    if let Some(path) = kv.get_str("resume") {
        // The resume checkpoint may be the output itself, in which case it was just overwritten.
        if path != out {
            manifest.checksum("resume", Path::new(path))?;
        }
    }
    manifest.checksum("checkpoint", ck_path)?;
    manifest.checksum("log", Path::new(&log_path))?;
    manifest.result("parameters", model.num_parameters());
    manifest.result("last_epoch", last_epoch);
    manifest.result("best_epoch", outcome.best_epoch);
    manifest.result("best_val_loss", outcome.best_val_loss);
    manifest.write(Path::new(&config::sibling(out, ".manifest")))?;
    println!(
        "best epoch {} (val loss {:.5}); checkpoint written to {out}",
        outcome.best_epoch, outcome.best_val_loss
    );
    Ok(())
}

fn train_deepar(kv: &KvMap, data: &Data, mut settings: KvMap, out: &str) -> Result<()> {
    let d = DeepArConfig::default();
    let cfg = DeepArConfig {
        hidden: get(kv, "hidden", d.hidden)?,
        dropout: get(kv, "drop", d.dropout)?,
        n_samples: get(kv, "samples", d.n_samples)?,
        tau: get(kv, "tau", DEFAULT_FLAT_BAND)?,
        batch_size: get(kv, "batch", d.batch_size)?,
        lr: get(kv, "lr", d.lr)?,
        max_epochs: get(kv, "epochs", d.max_epochs)?,
        early_stop_patience: get(kv, "patience", d.early_stop_patience)?,
        lr_factor: get(kv, "lr_factor", d.lr_factor)?,
        lr_patience: get(kv, "lr_patience", d.lr_patience)?,
        seed: data.seed,
        ..d
    };
    let mut model = DeepArLite::new(cfg.clone())?;
    for (k, v) in [
        ("hidden", cfg.hidden.to_string()),
        ("drop", cfg.dropout.to_string()),
        ("samples", cfg.n_samples.to_string()),
        ("tau", cfg.tau.to_string()),
        ("batch", cfg.batch_size.to_string()),
        ("lr", cfg.lr.to_string()),
        ("epochs", cfg.max_epochs.to_string()),
        ("patience", cfg.early_stop_patience.to_string()),
        ("lr_factor", cfg.lr_factor.to_string()),
        ("lr_patience", cfg.lr_patience.to_string()),
    ] {
        settings.set(k, v);
    }
    println!(
        "hidden={} drop={} samples={} batch={} epochs={} lr={}",
        cfg.hidden, cfg.dropout, cfg.n_samples, cfg.batch_size, cfg.max_epochs, cfg.lr
    );
    println!("{} training and {} validation windows", data.train.len(), data.val.len());
    println!("{:>6} {:>11} {:>11} {:>10}", "epoch", "train_nll", "val_nll", "lr");

    let log_path = config::sibling(out, ".log");
    let mut log = open_log(&log_path)?;
    let outcome = model.train(&data.train, &data.val, Some(&mut log), |r| {
        println!("{:>6} {:>11.5} {:>11.5} {:>10.2e}", r.epoch, r.train_nll, r.val_nll, r.lr);
    })?;
    log.flush()?;
    drop(log);

    let last_epoch = outcome.history.last().map_or(0, |r| r.epoch);
    let mut meta = KvMap::new();
    meta.set("epoch", last_epoch);
    meta.set("best_epoch", outcome.best_epoch);
    let ck_path = Path::new(out);
    config::ensure_parent(ck_path)?;
    model.to_checkpoint(meta).save(ck_path)?;

    let mut manifest = Manifest::new("train", &settings);
    data.checksum(&mut manifest)?;
    manifest.checksum("checkpoint", ck_path)?;
    manifest.checksum("log", Path::new(&log_path))?;
    manifest.result("last_epoch", last_epoch);
    manifest.result("best_epoch", outcome.best_epoch);
    manifest.result("best_val_nll", outcome.best_val_nll);
    manifest.result("early_stopped", outcome.early_stopped);
    manifest.write(Path::new(&config::sibling(out, ".manifest")))?;
    println!(
        "best epoch {} (val nll {:.5}); checkpoint written to {out}",
        outcome.best_epoch, outcome.best_val_nll
    );
    Ok(())
}
