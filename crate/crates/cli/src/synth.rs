use std::path::Path;

use anyhow::Result;
use ctts_core::data::{generate, write_csv_file, GeneratorConfig};

use crate::config::{self, Flags, Manifest};
use crate::SynthArgs;

pub fn run(a: SynthArgs) -> Result<()> {
    let mut flags = Flags::default();
    flags
        .put("regime", &a.regime)
        .put("n_series", &a.n)
        .put("seed", &a.seed)
        .put("length", &a.length)
        .put("start_price", &a.start_price)
        .put("drift", &a.drift)
        .put("vol", &a.vol)
        .put("phi", &a.phi)
        .put("tick", &a.tick)
        .put("period", &a.period)
        .put("amplitude", &a.amplitude)
        .put("noise_std", &a.noise_std)
        .put("out", &a.out);
    let mut allowed = GeneratorConfig::KEYS.to_vec();
    allowed.push("out");
    let kv = config::resolve("synth", a.config.as_deref(), flags, &allowed)?;
    let cfg = GeneratorConfig::from_kv(&kv)?;
    let out = kv.get_str("out").map(str::to_string).unwrap_or_else(|| config::default_path("series.csv"));

    let series = generate(&cfg)?;
    let path = Path::new(&out);
    config::ensure_parent(path)?;
    write_csv_file(path, &series)?;

    let mut settings = cfg.to_kv();
    settings.set("out", &out);
    let mut manifest = Manifest::new("synth", &settings);
    let sum = manifest.checksum("data", path)?;
    manifest.result("series", series.len());
    manifest.result("prices", series.iter().map(|s| s.prices.len()).sum::<usize>());
    manifest.write(Path::new(&config::sibling(&out, ".manifest")))?;
    println!(
        "wrote {} {} series of length {} to {out} (sha256 {sum})",
        series.len(),
        cfg.regime,
        cfg.length
    );
    Ok(())
}
