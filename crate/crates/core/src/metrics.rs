//! Travel-time ledgers, aggregates and seed summaries.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Vehicle, VehicleClass};
use crate::error::{Error, Result};

/// Occupancy buckets 1 to 5 for private vehicles, then buses.
pub const BUCKET_LABELS: [&str; 6] = ["1", "2", "3", "4", "5", "6+"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vehicle: u32,
    pub class: VehicleClass,
    pub occupancy: f64,
    pub entry: f64,
    pub exit: Option<f64>,
}

impl TripRecord {
    pub fn from_vehicle(v: &Vehicle) -> Self {
        TripRecord {
            vehicle: v.id.0,
            class: v.class,
            occupancy: v.true_occupancy,
            entry: v.entry_time,
            exit: v.exit_time,
        }
    }

    /// Seconds in the network, censored at the horizon.
    pub fn travel_time(&self, horizon: f64) -> f64 {
        (self.exit.unwrap_or(horizon).min(horizon) - self.entry).max(0.0)
    }

    pub fn bucket(&self) -> usize {
        match self.class {
            VehicleClass::Bus => 5,
            VehicleClass::Car => (self.occupancy.floor() as usize).clamp(1, 5) - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub entered: u64,
    pub completed: u64,
    pub censored: u64,
    /// Vehicle-hours.
    pub private_vtt: f64,
    pub bus_vtt: f64,
    /// Passenger-hours.
    pub ptt: f64,
    pub bucket_vtt: [f64; 6],
    pub bucket_count: [u64; 6],
}

impl Aggregates {
    pub fn total_vtt(&self) -> f64 {
        self.private_vtt + self.bus_vtt
    }

    pub fn compute(trips: &[TripRecord], horizon: f64) -> Self {
        let mut a = Aggregates::default();
        for t in trips {
            if t.entry > horizon {
                continue;
            }
            a.entered += 1;
            match t.exit {
                Some(x) if x <= horizon => a.completed += 1,
                _ => a.censored += 1,
            }
            let hours = t.travel_time(horizon) / 3600.0;
            match t.class {
                VehicleClass::Car => a.private_vtt += hours,
                VehicleClass::Bus => a.bus_vtt += hours,
            }
            a.ptt += hours * t.occupancy;
            let b = t.bucket();
            a.bucket_vtt[b] += hours;
            a.bucket_count[b] += 1;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub horizon: f64,
    pub trips: Vec<TripRecord>,
    /// (time, vehicles in the network) at every sample instant.
    pub accumulation: Vec<(f64, u64)>,
    pub aggregates: Aggregates,
}

impl RunMetrics {
    pub fn from_trips(trips: Vec<TripRecord>, horizon: f64, sample_interval: f64) -> Self {
        let accumulation = accumulation_series(&trips, horizon, sample_interval);
        let aggregates = Aggregates::compute(&trips, horizon);
        RunMetrics {
            horizon,
            trips,
            accumulation,
            aggregates,
        }
    }

    pub fn final_accumulation(&self) -> u64 {
        self.accumulation.last().map_or(0, |&(_, n)| n)
    }
}

/// Vehicles present at each sample instant: entered strictly before it and
/// not yet exited. Matches the simulator's counters sampled before the
/// arrivals of that step are injected.
pub fn accumulation_series(trips: &[TripRecord], horizon: f64, sample_interval: f64) -> Vec<(f64, u64)> {
    let mut entries: Vec<f64> = trips.iter().map(|t| t.entry).collect();
    let mut exits: Vec<f64> = trips.iter().filter_map(|t| t.exit).collect();
    entries.sort_by(f64::total_cmp);
    exits.sort_by(f64::total_cmp);
    let samples = (horizon / sample_interval).floor() as u64;
    (0..=samples)
        .map(|k| {
            let t = k as f64 * sample_interval;
            let n_in = entries.partition_point(|&e| e < t);
            let n_out = exits.partition_point(|&e| e <= t);
            (t, (n_in - n_out) as u64)
        })
        .collect()
}

pub fn percent_change(metric: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::UndefinedBaseline(baseline));
    }
    Ok(100.0 * (metric - baseline) / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over the square root of n.
    pub se: f64,
}

/// Mean and standard error; `None` for fewer than two values.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    // sort first so the result does not depend on seed order
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(Summary {
        n,
        mean,
        se: (var / n as f64).sqrt(),
    })
}

/// Per-seed percent changes of `metric` against `baseline`, summarized.
pub fn paired_percent_change(metric: &[f64], baseline: &[f64]) -> Result<Option<Summary>> {
    if metric.len() != baseline.len() {
        return Err(Error::config("seeds", "paired samples differ in length"));
    }
    let changes = metric
        .iter()
        .zip(baseline)
        .map(|(&m, &b)| percent_change(m, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&changes))
}

/// Summaries of every scalar aggregate across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub private_vtt: Summary,
    pub bus_vtt: Summary,
    pub ptt: Summary,
    pub final_accumulation: Summary,
}

pub fn summarize_runs(runs: &[RunMetrics]) -> Option<AggregateSummary> {
    let pick = |f: &dyn Fn(&RunMetrics) -> f64| summarize(&runs.iter().map(f).collect::<Vec<_>>());
    Some(AggregateSummary {
        private_vtt: pick(&|r| r.aggregates.private_vtt)?,
        bus_vtt: pick(&|r| r.aggregates.bus_vtt)?,
        ptt: pick(&|r| r.aggregates.ptt)?,
        final_accumulation: pick(&|r| r.final_accumulation() as f64)?,
    })
}
