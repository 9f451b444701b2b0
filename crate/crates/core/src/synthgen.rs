//! Seeded synthetic smart-card transaction logs.
//!
//! Trips are Poisson arrivals per (day, interval, origin, destination) with a
//! rate built from a base demand matrix, a weekday or weekend intraday profile,
//! optional commuter "tide" modulation between paired stations, and day-level
//! demand shocks. Travel time is the shortest-path hop count scaled by
//! `per_hop_intervals` plus half-normal noise, quantized to whole intervals.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::MetroGraph;

/// One finished passenger trip, interval-indexed from the dataset start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub entry_station: usize,
    pub entry_interval: usize,
    pub exit_station: usize,
    pub exit_interval: usize,
}

impl Transaction {
    pub fn duration(&self) -> usize {
        self.exit_interval - self.entry_interval
    }

    fn sort_key(&self) -> (usize, usize, usize, usize) {
        (self.entry_interval, self.entry_station, self.exit_station, self.exit_interval)
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub graph: MetroGraph,
    pub days: usize,
    pub intervals_per_day: usize,
    /// Passengers per interval for each (origin, destination) before modulation.
    pub base_demand: Array2<f64>,
    pub weekday_profile: Vec<f64>,
    pub weekend_profile: Vec<f64>,
    pub per_hop_intervals: f64,
    pub travel_noise: f64,
    pub max_trip_intervals: usize,
    /// `(home, work)` pairs: home->work peaks in the morning, work->home in the evening.
    pub tide_pairs: Vec<(usize, usize)>,
    pub tide_amplitude: f64,
    /// Log-scale spread of a network-wide multiplier drawn once per day.
    pub day_factor_sigma: f64,
    /// Log-scale spread of a per-origin multiplier drawn once per day.
    pub station_day_sigma: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.station_count();
        let d = self.intervals_per_day;
        if self.days == 0 || d == 0 {
            return Err(Error::Config("days and intervals_per_day must be positive".into()));
        }
        if self.base_demand.dim() != (n, n) {
            return Err(Error::Dimension(format!(
                "base_demand is {:?}, expected {n}x{n}",
                self.base_demand.dim()
            )));
        }
        if self.weekday_profile.len() != d || self.weekend_profile.len() != d {
            return Err(Error::Config(format!("profiles must have length {d}")));
        }
        if self.weekday_profile.iter().chain(&self.weekend_profile).any(|&p| !(p >= 0.0)) {
            return Err(Error::Config("profile multipliers must be nonnegative".into()));
        }
        if self.base_demand.iter().any(|&r| !(r >= 0.0)) {
            return Err(Error::Config("base_demand must be nonnegative".into()));
        }
        if (0..n).any(|i| self.base_demand[[i, i]] != 0.0) {
            return Err(Error::Config("base_demand diagonal must be zero".into()));
        }
        if !(self.per_hop_intervals > 0.0) || !(self.travel_noise >= 0.0) {
            return Err(Error::Config("per_hop_intervals > 0 and travel_noise >= 0 required".into()));
        }
        if self.max_trip_intervals == 0 {
            return Err(Error::Config("max_trip_intervals must be positive".into()));
        }
        for &(a, b) in &self.tide_pairs {
            if a >= n || b >= n || a == b {
                return Err(Error::Config(format!("invalid tide pair ({a}, {b})")));
            }
        }
        Ok(())
    }

    pub fn is_weekend(day: usize) -> bool {
        matches!(day % 7, 5 | 6)
    }
}

/// Two-peak commuter profile (morning and evening rush) over a service day.
pub fn commuter_profile(intervals_per_day: usize) -> Vec<f64> {
    (0..intervals_per_day)
        .map(|q| {
            let x = (q as f64 + 0.5) / intervals_per_day as f64;
            0.25 + bump(x, 0.22, 0.07) + 0.8 * bump(x, 0.72, 0.08) + 0.2 * bump(x, 0.48, 0.15)
        })
        .collect()
}

/// Flatter midday-centred profile for weekends.
pub fn weekend_profile(intervals_per_day: usize) -> Vec<f64> {
    (0..intervals_per_day)
        .map(|q| {
            let x = (q as f64 + 0.5) / intervals_per_day as f64;
            0.2 + 0.6 * bump(x, 0.55, 0.2)
        })
        .collect()
}

fn bump(x: f64, centre: f64, width: f64) -> f64 {
    let z = (x - centre) / width;
    (-z * z).exp()
}

fn tide_factor(q: usize, intervals_per_day: usize, amplitude: f64, outbound: bool) -> f64 {
    let x = (q as f64 + 0.5) / intervals_per_day as f64;
    let morning = bump(x, 0.22, 0.07);
    let evening = bump(x, 0.72, 0.08);
    let swing = if outbound { morning - evening } else { evening - morning };
    (1.0 + amplitude * swing).max(0.0)
}

/// Gravity-style rate matrix: seeded lognormal station masses, exponential hop
/// decay, scaled so the network total is `total_per_interval`.
pub fn gravity_demand(
    graph: &MetroGraph,
    total_per_interval: f64,
    hop_decay: f64,
    seed: u64,
) -> Array2<f64> {
    let n = graph.station_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mass = LogNormal::new(0.0, 0.6).expect("valid lognormal");
    let production: Vec<f64> = (0..n).map(|_| mass.sample(&mut rng)).collect();
    let attraction: Vec<f64> = (0..n).map(|_| mass.sample(&mut rng)).collect();
    let hops = graph.hop_distances();
    let mut rates = Array2::zeros((n, n));
    for o in 0..n {
        for d in 0..n {
            if o == d {
                continue;
            }
            if let Some(h) = hops[o][d] {
                rates[[o, d]] = production[o] * attraction[d] * (-hop_decay * h as f64).exp();
            }
        }
    }
    let total: f64 = rates.sum();
    if total > 0.0 {
        rates *= total_per_interval / total;
    }
    rates
}

/// Generates the full log, sorted by entry interval (then station indices).
pub fn generate_log(cfg: &SimConfig) -> Result<Vec<Transaction>> {
    cfg.validate()?;
    let n = cfg.graph.station_count();
    let hops = cfg.graph.hop_distances();
    for o in 0..n {
        for d in 0..n {
            if cfg.base_demand[[o, d]] > 0.0 && hops[o][d].is_none() {
                return Err(Error::Config(format!(
                    "stations {o} and {d} have positive demand but are not connected"
                )));
            }
        }
    }

    let mut tide = vec![None; n * n];
    for &(home, work) in &cfg.tide_pairs {
        tide[home * n + work] = Some(true);
        tide[work * n + home] = Some(false);
    }

    let mut log = Vec::new();
    for day in 0..cfg.days {
        generate_day(cfg, day, &hops, &tide, &mut log);
    }
    log.sort_unstable_by_key(Transaction::sort_key);
    Ok(log)
}

fn generate_day(
    cfg: &SimConfig,
    day: usize,
    hops: &[Vec<Option<usize>>],
    tide: &[Option<bool>],
    out: &mut Vec<Transaction>,
) {
    let n = cfg.graph.station_count();
    let d = cfg.intervals_per_day;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(day as u64);

    let day_factor = lognormal_unit_mean(&mut rng, cfg.day_factor_sigma);
    let station_factor: Vec<f64> =
        (0..n).map(|_| lognormal_unit_mean(&mut rng, cfg.station_day_sigma)).collect();
    let profile =
        if SimConfig::is_weekend(day) { &cfg.weekend_profile } else { &cfg.weekday_profile };
    let noise = (cfg.travel_noise > 0.0)
        .then(|| Normal::new(0.0, cfg.travel_noise).expect("finite travel noise"));

    for q in 0..d {
        let interval = day * d + q;
        for o in 0..n {
            for dest in 0..n {
                let base = cfg.base_demand[[o, dest]];
                if base <= 0.0 {
                    continue;
                }
                let tide_mod = match tide[o * n + dest] {
                    Some(outbound) => tide_factor(q, d, cfg.tide_amplitude, outbound),
                    None => 1.0,
                };
                let rate = base * profile[q] * tide_mod * day_factor * station_factor[o];
                if rate <= 0.0 {
                    continue;
                }
                let count = Poisson::new(rate).expect("positive rate").sample(&mut rng) as u64;
                let hop_time = hops[o][dest].unwrap_or(0) as f64 * cfg.per_hop_intervals;
                for _ in 0..count {
                    let jitter = noise.as_ref().map_or(0.0, |dist| dist.sample(&mut rng).abs());
                    let duration = ((hop_time + jitter).round() as usize)
                        .clamp(1, cfg.max_trip_intervals);
                    out.push(Transaction {
                        entry_station: o,
                        entry_interval: interval,
                        exit_station: dest,
                        exit_interval: interval + duration,
                    });
                }
            }
        }
    }
}

fn lognormal_unit_mean(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    (sigma * z - 0.5 * sigma * sigma).exp()
}

/// Empirical CDF of trip durations in intervals.
pub fn commuting_time_cdf(log: &[Transaction]) -> Result<Vec<(usize, f64)>> {
    if log.is_empty() {
        return Err(Error::EmptyInput("transaction log"));
    }
    let mut durations: Vec<usize> = log.iter().map(Transaction::duration).collect();
    durations.sort_unstable();
    let total = durations.len() as f64;
    let mut cdf: Vec<(usize, f64)> = Vec::new();
    for (i, &dur) in durations.iter().enumerate() {
        let frac = (i + 1) as f64 / total;
        match cdf.last_mut() {
            Some(last) if last.0 == dur => last.1 = frac,
            _ => cdf.push((dur, frac)),
        }
    }
    Ok(cdf)
}

pub fn write_log(log: &[Transaction], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for tx in log {
        writer.serialize(tx).map_err(|e| csv_error(path, e))?;
    }
    if log.is_empty() {
        writer
            .write_record(["entry_station", "entry_interval", "exit_station", "exit_interval"])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<Transaction>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut log = Vec::new();
    for (i, record) in reader.deserialize::<Transaction>().enumerate() {
        let tx = record.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        if tx.exit_interval <= tx.entry_interval || tx.entry_station == tx.exit_station {
            return Err(Error::parse(path, i + 2, "transaction violates trip invariants"));
        }
        log.push(tx);
    }
    if log.windows(2).any(|w| w[0].entry_interval > w[1].entry_interval) {
        return Err(Error::parse(path, 1, "log is not sorted by entry_interval"));
    }
    Ok(log)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e.to_string())
}
