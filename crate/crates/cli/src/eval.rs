use std::path::Path;

use anyhow::{bail, Result};
use ctts_core::baselines::DeepArLite;
use ctts_core::data::{class_distribution, Sign};
use ctts_core::eval::{evaluate, BenchmarkReport, MethodOutcome, SignPredictor};
use ctts_core::kv::KvMap;
use ctts_core::model::{evaluate_loss, CttsModel};

use crate::bench::{load_checkpoint, load_samples};
use crate::config::{self, get, require, Flags, Manifest};
use crate::EvalArgs;

const KEYS: [&str; 5] = ["data", "checkpoint", "window_stride", "eps", "out"];

pub fn run(a: EvalArgs) -> Result<()> {
    let mut flags = Flags::default();
    flags
        .put("data", &a.data)
        .put("checkpoint", &a.checkpoint)
        .put("window_stride", &a.window_stride)
        .put("eps", &a.eps)
        .put("out", &a.out);
    let kv = config::resolve("eval", a.config.as_deref(), flags, &KEYS)?;
    let data = require(&kv, "data", "data")?;
    let ck_path = require(&kv, "checkpoint", "checkpoint")?;
    let stride: usize = get(&kv, "window_stride", 1)?;
    let eps: f64 = get(&kv, "eps", 1e-9)?;

    let ck = load_checkpoint(&ck_path, "ctts train --data <train.csv>")?;
    let samples = load_samples(&data, stride, eps)?;
    let truths: Vec<Sign> = samples.iter().map(|s| s.label).collect();
    let (name, preds, loss_line) = match ck.meta.get_str("model") {
        Some("ctts") => {
            let model = CttsModel::from_checkpoint(&ck)?;
            let (loss, _) = evaluate_loss(&model, &samples)?;
            (model.name(), model.predict_batch(&samples)?, format!("cross_entropy={loss}"))
        }
        Some("deepar_lite") => {
            let model = DeepArLite::from_checkpoint(&ck)?;
            let nll = model.evaluate_nll(&samples)?;
            (model.name(), model.predict_batch(&samples)?, format!("nll={nll}"))
        }
        other => bail!("checkpoint {ck_path} holds unknown model {other:?}"),
    };
    let report = BenchmarkReport {
        outcomes: vec![MethodOutcome::Done(evaluate(&name, &preds, &truths)?)],
        truth_distribution: class_distribution(truths.iter().copied()),
        n: truths.len(),
    };
    print!("{}", report.render_table());
    println!("{loss_line}");

    if let Some(out) = kv.get_str("out") {
        let records = format!("{}{loss_line}\n", report.render_records());
        config::write_file(Path::new(out), records.as_bytes())?;
        let mut settings = KvMap::new();
        for k in KEYS {
            if let Some(v) = kv.get_str(k) {
                settings.set(k, v);
            }
        }
        settings.set("window_stride", stride);
        settings.set("eps", eps);
        let mut manifest = Manifest::new("eval", &settings);
        manifest.checksum("data", Path::new(&data))?;
        manifest.checksum("checkpoint", Path::new(&ck_path))?;
        manifest.checksum("records", Path::new(out))?;
        manifest.write(Path::new(&config::sibling(out, ".manifest")))?;
    }
    Ok(())
}
