use std::path::Path;

use anyhow::{bail, Context, Result};
use ctts_core::baselines::{ArimaBaseline, ArimaOrder, ConstantClass, DeepArLite, EmaBaseline, DEFAULT_FLAT_BAND};
use ctts_core::checkpoint::Checkpoint;
use ctts_core::data::{class_distribution, ingest_csv, Sample, Sign};
use ctts_core::eval::{evaluate, BenchmarkReport, MethodOutcome, SignPredictor, SignPrediction};
use ctts_core::kv::KvMap;
use ctts_core::model::CttsModel;

use crate::config::{self, get, require, Flags, Manifest};
use crate::BenchArgs;

pub const DEFAULT_METHODS: &str = "ctts,deepar,arima,ema,const-up";

const KEYS: [&str; 10] = [
    "data",
    "checkpoint",
    "deepar_checkpoint",
    "methods",
    "tau",
    "arima_order",
    "seed",
    "window_stride",
    "eps",
    "out",
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Method {
    Ctts,
    DeepAr,
    Arima,
    Ema,
    Const(Sign),
}

fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| {
            Ok(match m {
                "ctts" => Method::Ctts,
                "deepar" => Method::DeepAr,
                "arima" => Method::Arima,
                "ema" => Method::Ema,
                "const-up" => Method::Const(Sign::Up),
                "const-down" => Method::Const(Sign::Down),
                "const-flat" => Method::Const(Sign::Flat),
                other => bail!(
                    "unknown method {other:?}; expected ctts, deepar, arima, ema, const-up, const-down or const-flat"
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        bail!("--methods is empty");
    }
    Ok(methods)
}

/// Loads a checkpoint, pointing at `ctts train` when it is missing.
pub fn load_checkpoint(path: &str, train_hint: &str) -> Result<Checkpoint> {
    if !Path::new(path).exists() {
        bail!("checkpoint {path} not found; create it with `{train_hint} --out {path}`");
    }
    Checkpoint::load(Path::new(path)).with_context(|| format!("checkpoint {path}"))
}

pub fn load_samples(path: &str, stride: usize, eps: f64) -> Result<Vec<Sample>> {
    let samples = ingest_csv(Path::new(path), stride, eps).with_context(|| format!("dataset {path}"))?;
    if samples.is_empty() {
        bail!("dataset {path} has no 81-price windows");
    }
    Ok(samples)
}

fn outcome(name: String, preds: Result<Vec<SignPrediction>>, truths: &[Sign]) -> MethodOutcome {
    match preds.and_then(|p| evaluate(&name, &p, truths).map_err(Into::into)) {
        Ok(r) => MethodOutcome::Done(r),
        Err(e) => MethodOutcome::Failed {
            method: name,
            error: format!("{e:#}"),
        },
    }
}

pub fn run(a: BenchArgs) -> Result<()> {
    let mut flags = Flags::default();
    flags
        .put("data", &a.data)
        .put("checkpoint", &a.checkpoint)
        .put("deepar_checkpoint", &a.deepar_checkpoint)
        .put("methods", &a.methods)
        .put("tau", &a.tau)
        .put("arima_order", &a.arima_order)
        .put("seed", &a.seed)
        .put("window_stride", &a.window_stride)
        .put("eps", &a.eps)
        .put("out", &a.out);
    let kv = config::resolve("bench", a.config.as_deref(), flags, &KEYS)?;
    let data = require(&kv, "data", "data")?;
    let methods_list = kv.get_str("methods").unwrap_or(DEFAULT_METHODS).to_string();
    let methods = parse_methods(&methods_list)?;
    let tau: f64 = get(&kv, "tau", DEFAULT_FLAT_BAND)?;
    if !(tau.is_finite() && tau >= 0.0) {
        bail!("tau must be finite and >= 0, got {tau}");
    }
    let order: ArimaOrder = get(&kv, "arima_order", ArimaOrder::DEFAULT)?;
    let stride: usize = get(&kv, "window_stride", 1)?;
    let eps: f64 = get(&kv, "eps", 1e-9)?;
    let out = kv
        .get_str("out")
        .map(str::to_string)
        .unwrap_or_else(|| config::default_path("report.txt"));

    let mut settings = KvMap::new();
    settings.set("data", &data);
    settings.set("methods", &methods_list);
    settings.set("tau", tau);
    settings.set("arima_order", order);
    settings.set("window_stride", stride);
    settings.set("eps", eps);
    settings.set("out", &out);
    let mut inputs = vec![("data", data.clone())];

    // Load every model before any slow work so a missing file fails fast.
    let ctts = if methods.contains(&Method::Ctts) {
        let path = kv
            .get_str("checkpoint")
            .context("ctts needs --checkpoint; create one with `ctts train --data <train.csv>`")?;
        settings.set("checkpoint", path);
        inputs.push(("checkpoint", path.to_string()));
        Some(CttsModel::from_checkpoint(&load_checkpoint(path, "ctts train --data <train.csv>")?)?)
    } else {
        None
    };
    let deepar = if methods.contains(&Method::DeepAr) {
        let path = kv.get_str("deepar_checkpoint").context(
            "deepar needs --deepar-checkpoint; create one with `ctts train --model deepar --data <train.csv>`",
        )?;
        settings.set("deepar_checkpoint", path);
        inputs.push(("deepar_checkpoint", path.to_string()));
        let mut m = DeepArLite::from_checkpoint(&load_checkpoint(path, "ctts train --model deepar --data <train.csv>")?)?;
        if let Some(seed) = kv.get::<u64>("seed")? {
            m.set_seed(seed);
        }
        settings.set("seed", m.config().seed);
        m.set_tau(tau)?;
        Some(m)
    } else {
        None
    };

    let test = load_samples(&data, stride, eps)?;
    let truths: Vec<Sign> = test.iter().map(|s| s.label).collect();
    let mut fallbacks = None;
    let mut outcomes = Vec::with_capacity(methods.len());
    for m in &methods {
        let o = match m {
            Method::Ctts => {
                let model = ctts.as_ref().expect("loaded above");
                outcome(model.name(), model.predict_batch(&test).map_err(Into::into), &truths)
            }
            Method::DeepAr => {
                let model = deepar.as_ref().expect("loaded above");
                outcome(model.name(), model.predict_batch(&test).map_err(Into::into), &truths)
            }
            Method::Arima => {
                let b = ArimaBaseline { order, tau };
                let preds = b.predict_with_fallbacks(&test).map(|(p, k)| {
                    fallbacks = Some(k);
                    p
                });
                outcome(b.name(), preds.map_err(Into::into), &truths)
            }
            Method::Ema => {
                let b = EmaBaseline { tau };
                outcome(b.name(), b.predict_batch(&test).map_err(Into::into), &truths)
            }
            Method::Const(s) => {
                let b = ConstantClass(*s);
                outcome(b.name(), b.predict_batch(&test).map_err(Into::into), &truths)
            }
        };
        eprintln!("{}: done", o.method());
        outcomes.push(o);
    }
    let report = BenchmarkReport {
        outcomes,
        truth_distribution: class_distribution(truths.iter().copied()),
        n: truths.len(),
    };

    let mut table = report.render_table();
    let mut records = report.render_records();
    if let Some(k) = fallbacks {
        table.push_str(&format!(
            "ARIMA({order}) fell back to (0,1,0) on {k} of {} windows.\n",
            report.n
        ));
        records.push_str(&format!("arima_fallbacks={k}\n"));
    }
    print!("{table}");

    let table_path = Path::new(&out);
    config::write_file(table_path, table.as_bytes())?;
    let records_path = config::sibling(&out, ".records");
    config::write_file(Path::new(&records_path), records.as_bytes())?;
    let mut manifest = Manifest::new("bench", &settings);
    for (name, path) in &inputs {
        manifest.checksum(name, Path::new(path))?;
    }
    manifest.checksum("report", table_path)?;
    manifest.checksum("records", Path::new(&records_path))?;
    manifest.result("samples", report.n);
    if let Some(k) = fallbacks {
        manifest.result("arima_fallbacks", k);
    }
    manifest.write(Path::new(&config::sibling(&out, ".manifest")))?;
    eprintln!("report written to {out}");
    Ok(())
}
