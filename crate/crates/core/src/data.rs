//! Price series, labeled samples, synthetic generators and CSV I/O.
//!
//! A sample is an 81-step window: the first 80 prices are the model input
//! and the sign of the change from step 80 to step 81 is the target.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng::{counter_seed, rng_from, stream, stream_seed};

pub const INPUT_LEN: usize = 80;
pub const WINDOW_LEN: usize = INPUT_LEN + 1;
pub const DEFAULT_FLAT_EPS: f64 = 1e-9;

/// Direction of the next price change. Discriminants are class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Up = 0,
    Down = 1,
    Flat = 2,
}

impl Sign {
    pub const ALL: [Sign; 3] = [Sign::Up, Sign::Down, Sign::Flat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Sign> {
        Sign::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Up => "up",
            Sign::Down => "down",
            Sign::Flat => "flat",
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Sign::Up),
            "down" => Ok(Sign::Down),
            "flat" => Ok(Sign::Flat),
            other => Err(Error::Config(format!("unknown sign {other:?}"))),
        }
    }
}

/// Up iff `next > last + eps`, down iff `next < last - eps`, flat otherwise.
pub fn label(last: f64, next: f64, eps: f64) -> Sign {
    if next > last + eps {
        Sign::Up
    } else if next < last - eps {
        Sign::Down
    } else {
        Sign::Flat
    }
}

/// Min-max scaling to `[0, 1]`; a constant window maps to all zeros.
pub fn standardize(window: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(window);
    let range = hi - lo;
    if range > 0.0 {
        window.iter().map(|x| (x - lo) / range).collect()
    } else {
        vec![0.0; window.len()]
    }
}

pub fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub id: String,
    pub prices: Vec<f64>,
    pub timestamps: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub series_id: String,
    /// Index of the first input step within its series.
    pub offset: usize,
    pub input: Vec<f64>,
    pub standardized: Vec<f64>,
    pub label: Sign,
    pub next_price: f64,
}

impl Sample {
    /// Builds a sample from an 81-price window. Scaling uses the 80 input
    /// steps only.
    pub fn from_window(series_id: &str, offset: usize, window: &[f64], eps: f64) -> Result<Self> {
        if window.len() != WINDOW_LEN {
            return Err(Error::Data(format!(
                "window of {} prices, need {WINDOW_LEN}",
                window.len()
            )));
        }
        if let Some(bad) = window.iter().find(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite price {bad} in {series_id}")));
        }
        let input = window[..INPUT_LEN].to_vec();
        let next_price = window[INPUT_LEN];
        Ok(Self {
            series_id: series_id.to_string(),
            offset,
            standardized: standardize(&input),
            label: label(input[INPUT_LEN - 1], next_price, eps),
            input,
            next_price,
        })
    }

    pub fn last_price(&self) -> f64 {
        self.input[INPUT_LEN - 1]
    }
}

/// Length-81 windows every `stride` steps.
pub fn samples_from_series(series: &TimeSeries, stride: usize, eps: f64) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be >= 1".into()));
    }
    let n = series.prices.len();
    if n < WINDOW_LEN {
        return Err(Error::Data(format!(
            "series {} has {n} prices, need at least {WINDOW_LEN}",
            series.id
        )));
    }
    (0..=(n - WINDOW_LEN) / stride)
        .map(|k| {
            let start = k * stride;
            Sample::from_window(&series.id, start, &series.prices[start..start + WINDOW_LEN], eps)
        })
        .collect()
}

pub fn samples_from_all(series: &[TimeSeries], stride: usize, eps: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in series {
        out.extend(samples_from_series(s, stride, eps)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Geometric random walk: `log p += drift + vol·z`.
    RandomWalk,
    /// Log-returns follow AR(1): `r_t = phi·r_{t-1} + vol·z`.
    MomentumAr1,
    /// `start + amplitude·sin(2πt/period + phase) + noise_std·z`.
    SinusoidNoise,
    /// AR(1)-return walk (`phi = 0` is a plain walk) rounded to a tick grid.
    TickQuantized,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::RandomWalk => "random_walk",
            Regime::MomentumAr1 => "momentum_ar1",
            Regime::SinusoidNoise => "sinusoid_noise",
            Regime::TickQuantized => "tick_quantized",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_walk" => Ok(Regime::RandomWalk),
            "momentum_ar1" => Ok(Regime::MomentumAr1),
            "sinusoid_noise" => Ok(Regime::SinusoidNoise),
            "tick_quantized" => Ok(Regime::TickQuantized),
            other => Err(Error::Config(format!(
                "unknown regime {other:?} (random_walk, momentum_ar1, sinusoid_noise, tick_quantized)"
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub regime: Regime,
    pub seed: u64,
    pub n_series: usize,
    pub length: usize,
    pub start_price: f64,
    pub drift: f64,
    pub vol: f64,
    pub phi: f64,
    pub tick: f64,
    pub period: f64,
    pub amplitude: f64,
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            regime: Regime::RandomWalk,
            seed: 0,
            n_series: 1000,
            length: WINDOW_LEN,
            start_price: 100.0,
            drift: 0.0,
            vol: 1e-3,
            phi: 0.0,
            tick: 0.01,
            period: 20.0,
            amplitude: 1.0,
            noise_std: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub const KEYS: [&'static str; 12] = [
        "regime",
        "seed",
        "n_series",
        "length",
        "start_price",
        "drift",
        "vol",
        "phi",
        "tick",
        "period",
        "amplitude",
        "noise_std",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.length < WINDOW_LEN {
            return bad(format!(
                "length {} is below the {WINDOW_LEN}-step minimum (80 inputs + 1 target)",
                self.length
            ));
        }
        if self.n_series == 0 {
            return bad("n_series must be >= 1".into());
        }
        let finite = [
            self.start_price,
            self.drift,
            self.vol,
            self.phi,
            self.tick,
            self.period,
            self.amplitude,
            self.noise_std,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("regime parameters must be finite".into());
        }
        if self.start_price <= 0.0 {
            return bad("start_price must be > 0".into());
        }
        if self.vol < 0.0 || self.noise_std < 0.0 {
            return bad("vol and noise_std must be >= 0".into());
        }
        match self.regime {
            Regime::MomentumAr1 | Regime::TickQuantized if self.phi.abs() >= 1.0 => {
                return bad(format!("|phi| must be < 1, got {}", self.phi))
            }
            Regime::TickQuantized if self.tick <= 0.0 => {
                return bad("tick must be > 0".into())
            }
            Regime::SinusoidNoise if self.period <= 0.0 => {
                return bad("period must be > 0".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("regime", self.regime);
        kv.set("seed", self.seed);
        kv.set("n_series", self.n_series);
        kv.set("length", self.length);
        kv.set("start_price", self.start_price);
        kv.set("drift", self.drift);
        kv.set("vol", self.vol);
        kv.set("phi", self.phi);
        kv.set("tick", self.tick);
        kv.set("period", self.period);
        kv.set("amplitude", self.amplitude);
        kv.set("noise_std", self.noise_std);
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            regime: kv.get_or("regime", d.regime)?,
            seed: kv.get_or("seed", d.seed)?,
            n_series: kv.get_or("n_series", d.n_series)?,
            length: kv.get_or("length", d.length)?,
            start_price: kv.get_or("start_price", d.start_price)?,
            drift: kv.get_or("drift", d.drift)?,
            vol: kv.get_or("vol", d.vol)?,
            phi: kv.get_or("phi", d.phi)?,
            tick: kv.get_or("tick", d.tick)?,
            period: kv.get_or("period", d.period)?,
            amplitude: kv.get_or("amplitude", d.amplitude)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seeded synthetic series. Each series draws from its own counter-keyed
/// stream, so series `i` does not depend on how many others are generated.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<TimeSeries>> {
    cfg.validate()?;
    let base = stream_seed(cfg.seed, "data");
    let width = cfg.n_series.to_string().len();
    Ok((0..cfg.n_series)
        .map(|i| {
            let mut rng = rng_from(counter_seed(base, i as u64, 0));
            let prices = generate_one(cfg, &mut rng);
            TimeSeries {
                id: format!("s{i:0width$}"),
                prices,
                timestamps: Some((0..cfg.length as i64).collect()),
            }
        })
        .collect())
}

fn generate_one<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Vec<f64> {
    let n = cfg.length;
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    match cfg.regime {
        Regime::RandomWalk => {
            let mut log_p = cfg.start_price.ln();
            (0..n)
                .map(|t| {
                    if t > 0 {
                        log_p += cfg.drift + cfg.vol * z();
                    }
                    log_p.exp()
                })
                .collect()
        }
        Regime::MomentumAr1 | Regime::TickQuantized => {
            let stationary_sd = cfg.vol / (1.0 - cfg.phi * cfg.phi).sqrt();
            let mut r = stationary_sd * z();
            let mut log_p = cfg.start_price.ln();
            let path = (0..n).map(|t| {
                if t > 0 {
                    r = cfg.phi * r + cfg.vol * z();
                    log_p += cfg.drift + r;
                }
                log_p.exp()
            });
            if cfg.regime == Regime::TickQuantized {
                path.map(|p| quantize(p, cfg.tick)).collect()
            } else {
                path.collect()
            }
        }
        Regime::SinusoidNoise => {
            let phase = z() * std::f64::consts::PI;
            (0..n)
                .map(|t| {
                    let angle = std::f64::consts::TAU * t as f64 / cfg.period + phase;
                    cfg.start_price + cfg.amplitude * angle.sin() + cfg.noise_std * z()
                })
                .collect()
        }
    }
}

pub fn quantize(price: f64, tick: f64) -> f64 {
    (price / tick).round() * tick
}

const CSV_HEADER: [&str; 3] = ["series_id", "timestamp", "price"];

/// Writes `series_id,timestamp,price` rows. Missing timestamps become step
/// indices. Prices use the shortest representation that round-trips.
pub fn write_csv<W: Write>(writer: W, series: &[TimeSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(csv_io)?;
    for s in series {
        for (t, p) in s.prices.iter().enumerate() {
            let ts = s.timestamps.as_ref().map_or(t as i64, |ts| ts[t]);
            w.write_record([s.id.as_str(), &ts.to_string(), &p.to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, series: &[TimeSeries]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(file), series)
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

/// Parses series from CSV. Rows must be grouped by series with strictly
/// ascending timestamps inside each series.
pub fn read_series_csv<R: Read>(reader: R) -> Result<Vec<TimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut out: Vec<TimeSeries> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let id = field(0);
        let ts: i64 = field(1).parse().map_err(|_| Error::Parse {
            line,
            msg: format!("timestamp {:?} is not an integer", field(1)),
        })?;
        let price: f64 = field(2).parse().map_err(|_| Error::Parse {
            line,
            msg: format!("price {:?} is not a number", field(2)),
        })?;
        if !price.is_finite() {
            return Err(Error::Parse {
                line,
                msg: format!("price {price} is not finite"),
            });
        }
        match out.last_mut() {
            Some(s) if s.id == id => {
                let prev = *s.timestamps.as_ref().unwrap().last().unwrap();
                if ts <= prev {
                    return Err(Error::Data(format!(
                        "line {line}: timestamp {ts} not after {prev} in series {id}"
                    )));
                }
                s.prices.push(price);
                s.timestamps.as_mut().unwrap().push(ts);
            }
            _ => {
                if out.iter().any(|s| s.id == id) {
                    return Err(Error::Data(format!(
                        "line {line}: rows of series {id} are not contiguous"
                    )));
                }
                out.push(TimeSeries {
                    id: id.to_string(),
                    prices: vec![price],
                    timestamps: Some(vec![ts]),
                });
            }
        }
    }
    Ok(out)
}

pub fn read_series_csv_file(path: &Path) -> Result<Vec<TimeSeries>> {
    let file = std::fs::File::open(path)?;
    read_series_csv(std::io::BufReader::new(file))
}

/// Reads a CSV and slides length-81 windows over every series.
pub fn ingest_csv(path: &Path, window_stride: usize, eps: f64) -> Result<Vec<Sample>> {
    let series = read_series_csv_file(path)?;
    samples_from_all(&series, window_stride, eps)
}

/// Seeded shuffle, then the first `round(train_frac·n)` samples train.
pub fn split<T: Clone>(samples: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot split an empty sample set".into()));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Config(format!("train fraction {train_frac} outside [0,1]")));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut stream(seed, "split"));
    let n_train = (train_frac * samples.len() as f64).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

/// Fractions of up, down and flat labels.
pub fn class_distribution(labels: impl IntoIterator<Item = Sign>) -> [f64; 3] {
    let mut counts = [0usize; 3];
    let mut n = 0;
    for l in labels {
        counts[l.index()] += 1;
        n += 1;
    }
    if n == 0 {
        return [0.0; 3];
    }
    counts.map(|c| c as f64 / n as f64)
}
