use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::packing::{bin_lower_bound, ffd_bins};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackBench {
    pub suite: String,
    pub docs: usize,
    pub bins: usize,
    pub lower_bound: usize,
    /// `bins / lower_bound`.
    pub ratio: f64,
    /// Filled fraction of the allocated rows.
    pub efficiency: f64,
    pub docs_per_sec: f64,
}

/// Length distributions packed by `bench-pack`.
pub fn fixed_suite(budget: usize, seed: u64) -> Vec<(String, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, lo: usize, hi: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(lo..=hi)).collect() };
    let quarter = (budget / 4).max(1);
    vec![
        ("uniform".to_string(), draw(1000, 1, budget)),
        ("short".to_string(), draw(1000, 1, quarter)),
        ("mixed".to_string(), {
            let mut v = draw(500, 1, quarter);
            v.extend(draw(500, budget / 2, budget));
            v
        }),
        ("full".to_string(), vec![budget; 100]),
    ]
}

pub fn bench_lengths(suite: &str, lengths: &[usize], budget: usize) -> Result<PackBench> {
    let t0 = Instant::now();
    let bins = ffd_bins(lengths, budget)?;
    let secs = t0.elapsed().as_secs_f64().max(1e-9);
    let lower_bound = bin_lower_bound(lengths, budget);
    let total: usize = lengths.iter().sum();
    Ok(PackBench {
        suite: suite.to_string(),
        docs: lengths.len(),
        bins: bins.len(),
        lower_bound,
        ratio: if lower_bound == 0 { 1.0 } else { bins.len() as f64 / lower_bound as f64 },
        efficiency: if bins.is_empty() { 1.0 } else { total as f64 / (bins.len() * budget) as f64 },
        docs_per_sec: lengths.len() as f64 / secs,
    })
}

pub fn bench_pack(budget: usize, seed: u64) -> Result<Vec<PackBench>> {
    fixed_suite(budget, seed)
        .iter()
        .map(|(name, lengths)| bench_lengths(name, lengths, budget))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_lengths_are_perfectly_efficient() {
        let b = bench_lengths("full", &[64; 10], 64).unwrap();
        assert_eq!((b.bins, b.efficiency, b.ratio), (10, 1.0, 1.0));
    }
}
