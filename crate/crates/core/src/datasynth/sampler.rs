//! Chart-spec sampling: persona, subplot count, layout, and chart types
//! drawn from configured target distributions, deterministic under a fixed
//! seed.

use crate::model::ChartSpec;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// An inclusive subplot-count bucket with its target probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubplotBucket {
    pub min: u32,
    pub max: u32,
    pub weight: f64,
}

/// Pools and target distributions the sampler draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerPools {
    pub personas: Vec<String>,
    pub subplot_buckets: Vec<SubplotBucket>,
    /// Subplot-level chart-type weights.
    pub chart_type_weights: Vec<(String, f64)>,
}

impl Default for SamplerPools {
    fn default() -> Self {
        let personas = [
            "climate scientist tracking emission scenarios",
            "quant analyst reviewing portfolio drawdowns",
            "epidemiologist monitoring outbreak curves",
            "ML researcher comparing ablation runs",
            "hardware engineer profiling power draw",
            "economist studying labor-market trends",
            "astronomer cataloguing stellar luminosities",
            "agronomist evaluating crop-yield trials",
            "urban planner analyzing commute patterns",
            "sports statistician charting season performance",
            "pharmacologist plotting dose-response data",
            "energy-grid operator watching load profiles",
            "linguist counting corpus frequencies",
            "oceanographer mapping temperature anomalies",
            "sociologist summarizing survey responses",
            "network engineer graphing latency percentiles",
        ]
        .map(String::from)
        .to_vec();

        Self {
            personas,
            subplot_buckets: vec![
                SubplotBucket { min: 1, max: 1, weight: 51.32 },
                SubplotBucket { min: 2, max: 4, weight: 29.61 },
                SubplotBucket { min: 5, max: 9, weight: 18.26 },
                SubplotBucket { min: 10, max: 12, weight: 0.81 },
            ],
            chart_type_weights: vec![
                ("line".into(), 30.07),
                ("bar".into(), 20.37),
                ("scatter".into(), 11.45),
                ("heatmap".into(), 9.14),
                ("pie".into(), 8.14),
                ("area".into(), 4.59),
                ("box".into(), 4.14),
                ("histogram".into(), 2.44),
                ("radar".into(), 1.67),
                ("other".into(), 8.00),
            ],
        }
    }
}

fn weighted_choice<'a, T, R: Rng>(rng: &mut R, entries: &'a [(T, f64)]) -> &'a T {
    let total: f64 = entries.iter().map(|(_, w)| w).sum();
    let mut draw = rng.random::<f64>() * total;
    for (value, weight) in entries {
        draw -= weight;
        if draw <= 0.0 {
            return value;
        }
    }
    &entries.last().expect("non-empty entries").0
}

/// Samples one chart spec. Single-subplot draws always get layout (1, 1);
/// larger counts get a near-square grid with `rows * cols >= n`.
pub fn sample_chart_spec<R: Rng>(rng: &mut R, pools: &SamplerPools) -> ChartSpec {
    assert!(!pools.personas.is_empty(), "persona pool is empty");
    assert!(!pools.subplot_buckets.is_empty(), "subplot buckets are empty");
    assert!(!pools.chart_type_weights.is_empty(), "chart type pool is empty");

    let persona = pools.personas[rng.random_range(0..pools.personas.len())].clone();
    let buckets: Vec<(usize, f64)> = pools
        .subplot_buckets
        .iter()
        .enumerate()
        .map(|(i, b)| (i, b.weight))
        .collect();
    let bucket = &pools.subplot_buckets[*weighted_choice(rng, &buckets)];
    let num_subplots = rng.random_range(bucket.min..=bucket.max);

    let layout = if num_subplots == 1 {
        (1, 1)
    } else {
        let cols = (num_subplots as f64).sqrt().ceil() as u32;
        let rows = num_subplots.div_ceil(cols);
        (rows, cols)
    };

    let chart_types = (0..num_subplots)
        .map(|_| weighted_choice(rng, &pools.chart_type_weights).clone())
        .collect();

    let spec = ChartSpec {
        persona,
        num_subplots,
        layout,
        chart_types,
        difficulty: rng.random_range(1..=5),
        reference_id: None,
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_seed_is_deterministic() {
        let pools = SamplerPools::default();
        let a: Vec<ChartSpec> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| sample_chart_spec(&mut rng, &pools)).collect()
        };
        let b: Vec<ChartSpec> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| sample_chart_spec(&mut rng, &pools)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn single_subplot_gets_unit_layout() {
        let pools = SamplerPools::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let spec = sample_chart_spec(&mut rng, &pools);
            spec.validate().unwrap();
            if spec.num_subplots == 1 {
                assert_eq!(spec.layout, (1, 1));
            }
        }
    }

    #[test]
    fn bucket_frequencies_match_targets() {
        let pools = SamplerPools::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = vec![0usize; pools.subplot_buckets.len()];
        for _ in 0..n {
            let spec = sample_chart_spec(&mut rng, &pools);
            let bucket = pools
                .subplot_buckets
                .iter()
                .position(|b| (b.min..=b.max).contains(&spec.num_subplots))
                .expect("draw falls in a bucket");
            counts[bucket] += 1;
        }
        for (bucket, count) in pools.subplot_buckets.iter().zip(&counts) {
            let observed = *count as f64 / n as f64 * 100.0;
            assert!(
                (observed - bucket.weight).abs() <= 2.0,
                "bucket {}-{}: observed {observed:.2}%, target {:.2}%",
                bucket.min,
                bucket.max,
                bucket.weight
            );
        }
    }
}
