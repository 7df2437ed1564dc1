mod common;

use ccss_core::io::{read_csv, write_csv_to};
use ccss_core::plant::{generate_plant, plant_schema, SyntheticPlantConfig};
use ccss_core::series::*;
use proptest::prelude::*;

fn random_series(n: usize, values: &[f64], mask: &[bool]) -> TypedSeries {
    let schema = plant_schema();
    let v = schema.len();
    let mut vals = values[..n * v].to_vec();
    for row in 0..n {
        vals[row * v + 6] = (vals[row * v + 6].abs() * 10.0).floor() % 2.0;
    }
    let ts: Vec<f64> = (0..n).map(|i| i as f64 * 2.0).collect();
    TypedSeries::new(ts, vals, mask[..n * v].to_vec(), schema).unwrap()
}

fn series_strategy() -> impl Strategy<Value = TypedSeries> {
    (20usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..50.0, n * 7),
            prop::collection::vec(prop::bool::weighted(0.7), n * 7),
        )
            .prop_map(move |(v, m)| random_series(n, &v, &m))
    })
}

fn brute_eligible(s: &TypedSeries, t: usize, h: usize) -> Vec<usize> {
    if s.len() < t + h {
        return vec![];
    }
    (0..=s.len() - t - h)
        .filter(|&start| (start + t..start + t + h).all(|r| (0..3).all(|v| s.is_observed(r, v))))
        .collect()
}

proptest! {
    #[test]
    fn standardizing_twice_is_a_fixed_point(s in series_strategy()) {
        let stats = StandardizationStats::fit(&s).unwrap();
        let z = stats.apply(&s).unwrap();
        let flat = vec![false; s.n_vars()];
        let again = StandardizationStats::fit_with(&z, &flat).unwrap();
        for j in 0..6 {
            let n = (0..s.len()).filter(|&r| s.is_observed(r, j)).count();
            let distinct = (0..s.len()).filter_map(|r| s.get(r, j)).any(|x| Some(x) != (0..s.len()).find_map(|r| s.get(r, j)));
            if n >= 2 && distinct {
                prop_assert!(again.vars[j].mean.abs() < 1e-10);
                prop_assert!((again.vars[j].sd - 1.0).abs() < 1e-10);
            }
        }
        for r in 0..s.len() {
            for j in 0..6 {
                if let Some(x) = s.get(r, j) {
                    let back = stats.destandardize(j, z.get(r, j).unwrap());
                    prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn hidden_values_never_reach_the_stats(s in series_strategy(), sentinel in -1e6f64..1e6) {
        let v = s.n_vars();
        let mut vals = Vec::new();
        let mut mask = Vec::new();
        for r in 0..s.len() {
            for j in 0..v {
                mask.push(s.is_observed(r, j));
                vals.push(if s.is_observed(r, j) { s.get(r, j).unwrap() } else { sentinel });
            }
        }
        let poisoned = TypedSeries::new(s.timestamps().to_vec(), vals, mask, s.schema().clone()).unwrap();
        prop_assert_eq!(StandardizationStats::fit(&poisoned).unwrap(), StandardizationStats::fit(&s).unwrap());
    }

    #[test]
    fn eligible_starts_match_brute_force(s in series_strategy(), t in 1usize..10, h in 1usize..10) {
        let fast = eligible_starts(&s, t, h);
        prop_assert_eq!(&fast, &brute_eligible(&s, t, h));
        for &start in &fast {
            prop_assert!(window_eligibility(&s, start, t, h).unwrap());
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..5000, f in 0.01f64..0.99) {
        let k = split_index(n, f);
        prop_assert!(k >= 1 && k < n);
        prop_assert_eq!(k, ((f * n as f64).floor() as usize).clamp(1, n - 1));
    }
}

#[test]
fn late_gap_breaks_a_long_rollout() {
    let (s, _) = common::small_plant(1600, 3);
    let dense = {
        let v = s.n_vars();
        let mut vals = Vec::new();
        let mut mask = Vec::new();
        for r in 0..s.len() {
            for j in 0..v {
                vals.push(s.row_values(r)[j]);
                mask.push(true);
            }
        }
        TypedSeries::new(s.timestamps().to_vec(), vals, mask, s.schema().clone()).unwrap()
    };
    assert!(window_eligibility(&dense, 0, 512, 1000).unwrap());
    let gapped = dense.with_masked([(512 + 999, 0)]);
    assert!(!window_eligibility(&gapped, 0, 512, 1000).unwrap());
    assert!(window_eligibility(&gapped, 0, 512, 999).unwrap());
    assert!(window_eligibility(&gapped, 0, 512, 2000).is_err());
}

#[test]
fn sampled_windows_are_distinct_and_eligible() {
    let (s, _) = common::small_plant(6000, 5);
    let (_, test) = temporal_split(&s, 0.70).unwrap();
    assert_eq!(test.len(), 6000 - 4200);
    let a = sample_eval_windows(&test, 50, 42, 64, 100).unwrap();
    assert_eq!(a, sample_eval_windows(&test, 50, 42, 64, 100).unwrap());
    let pool = brute_eligible(&test, 64, 100);
    let mut starts: Vec<usize> = a.iter().map(|w| w.start).collect();
    starts.dedup();
    assert_eq!(starts.len(), 50);
    assert!(starts.iter().all(|s| pool.contains(s)));
    assert!(sample_eval_windows(&test, 0, 42, 64, 100).unwrap().is_empty());
    let err = sample_eval_windows(&test, pool.len() + 1, 42, 64, 100).unwrap_err().to_string();
    assert!(err.contains(&(pool.len() + 1).to_string()) && err.contains(&pool.len().to_string()), "{err}");
}

#[test]
fn constant_series_splits_into_identical_stats() {
    let schema = plant_schema();
    let n = 40;
    let row = [1.0, 2.0, 0.0, 1.5, 50.0, 1.0, 0.0];
    let vals: Vec<f64> = (0..n).flat_map(|_| row).collect();
    let s = TypedSeries::new((0..n).map(|i| i as f64).collect(), vals, vec![true; n * 7], schema).unwrap();
    let (a, b) = temporal_split(&s, 0.7).unwrap();
    assert_eq!(StandardizationStats::fit(&a).unwrap(), StandardizationStats::fit(&b).unwrap());
}

#[test]
fn historian_csv_round_trips() {
    let cfg = SyntheticPlantConfig { n_steps: 500, seed: 9, ..Default::default() };
    let (s, _) = generate_plant(&cfg).unwrap();
    let mut buf = Vec::new();
    write_csv_to(&s, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("timestamp_min,"));
    assert_eq!(read_csv(buf.as_slice(), s.schema()).unwrap(), s);
}
