//! Small seeded end-to-end fixtures for unit tests.

use crate::aggregation::{build_compression_maps, build_dataset, Dataset, DatasetOptions, SplitBounds};
use crate::synthgen::{commuter_profile, generate_log, gravity_demand, weekend_profile, SimConfig};
use crate::topology::{build_graph, MetroGraph};

pub const PER_DAY: usize = 8;

pub fn small_graph() -> MetroGraph {
    build_graph(&[(0, 1), (1, 2), (2, 3), (3, 4), (2, 5)], 6).unwrap()
}

/// 6 stations, K = 4, 8 intervals per day, 10/2/2 days, n = m = 2.
pub fn small_dataset(seed: u64) -> (MetroGraph, Dataset) {
    let graph = small_graph();
    let cfg = SimConfig {
        base_demand: gravity_demand(&graph, 40.0, 0.3, seed),
        graph: graph.clone(),
        days: 14,
        intervals_per_day: PER_DAY,
        weekday_profile: commuter_profile(PER_DAY),
        weekend_profile: weekend_profile(PER_DAY),
        per_hop_intervals: 0.5,
        travel_noise: 0.5,
        max_trip_intervals: 4,
        tide_pairs: vec![(0, 4)],
        tide_amplitude: 1.0,
        day_factor_sigma: 0.2,
        station_day_sigma: 0.1,
        seed,
    };
    let log = generate_log(&cfg).unwrap();
    let splits = SplitBounds::from_days(10, 2, 2, PER_DAY);
    let training: Vec<_> = log.iter().copied().filter(|t| t.entry_interval < splits.train.end).collect();
    let maps = build_compression_maps(&training, 6, 4).unwrap();
    let options = DatasetOptions { n: 2, m: 2, intervals_per_day: PER_DAY, splits };
    let ds = build_dataset(&log, &maps, &options).unwrap();
    (graph, ds)
}
