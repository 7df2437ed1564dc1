mod common;

use ccss_core::checkpoint::Checkpoint;
use ccss_core::encoder::RawDrivers;
use ccss_core::model::Ablation;
use ccss_core::screening::*;
use ccss_core::series::{eligible_starts, TypedSeries, Window};
use ccss_core::simulator::Simulator;
use proptest::prelude::*;

const SCORES: [f64; 8] = [0.150, 0.168, 0.255, 0.332, 0.355, 0.408, 0.773, 0.823];

// Reported criteria, three decimals, best first.
const REPORTED: [(&str, [f64; 4], bool); 8] = [
    ("Smoothed setpoint", [0.176, 0.058, 0.006, 0.290], true),
    ("Setpoint -0.1", [0.394, 0.083, 0.007, 0.048], true),
    ("Front-load -0.2", [0.512, 0.092, 0.010, 0.033], true),
    ("Valve -5", [0.666, 0.106, 0.010, 0.014], true),
    ("Observed", [0.676, 0.108, 0.012, 0.000], true),
    ("Valve +5", [0.690, 0.114, 0.015, 0.022], false),
    ("Front-load +0.2", [0.991, 0.226, 0.019, 0.067], false),
    ("Setpoint +0.1", [1.093, 0.174, 0.025, 0.100], false),
];

// Four-decimal values that round to REPORTED.
const UNROUNDED: [[f64; 4]; 8] = [
    [0.1765, 0.0580, 0.0062, 0.2896],
    [0.3939, 0.0831, 0.0073, 0.0478],
    [0.5120, 0.0924, 0.0101, 0.0326],
    [0.6661, 0.1058, 0.0100, 0.0144],
    [0.6764, 0.1082, 0.0121, 0.0000],
    [0.6904, 0.1145, 0.0146, 0.0215],
    [0.9907, 0.2262, 0.0188, 0.0666],
    [1.0929, 0.1736, 0.0252, 0.1004],
];

const WEIGHTS: [f64; 4] = [0.40, 0.25, 0.20, 0.15];

// shuffled input order: ranks must not depend on it
const ORDER: [usize; 8] = [4, 0, 7, 2, 5, 1, 6, 3];

fn shuffled(raw: &[[f64; 4]; 8]) -> (Vec<String>, Vec<[f64; 4]>) {
    (ORDER.iter().map(|&i| REPORTED[i].0.to_string()).collect(), ORDER.iter().map(|&i| raw[i]).collect())
}

fn oracle_composite(raw: &[[f64; 4]], i: usize) -> f64 {
    (0..4)
        .map(|c| {
            let lo = raw.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = raw.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            WEIGHTS[c] * (raw[i][c] - lo) / (hi - lo)
        })
        .sum()
}

#[test]
fn reported_criteria_keep_their_ranks_and_flags() {
    let raw: [[f64; 4]; 8] = std::array::from_fn(|i| REPORTED[i].1);
    let (names, cols) = shuffled(&raw);
    let rep = screen(&names, &cols, ScreeningCriteria::default().weights).unwrap();
    for (i, (name, _, pareto)) in REPORTED.iter().enumerate() {
        let p = rep.plans.iter().find(|p| p.name == *name).unwrap();
        assert_eq!(p.rank, i + 1, "{name}");
        assert_eq!(p.pareto, *pareto, "{name}");
        assert!((p.composite - oracle_composite(&raw, i)).abs() < 1e-12, "{name}");
    }
    assert!(dominates(&REPORTED[4].1, &REPORTED[5].1));
}

#[test]
fn unrounded_criteria_reproduce_reported_scores() {
    for (u, r) in UNROUNDED.iter().zip(REPORTED) {
        for c in 0..4 {
            assert!((u[c] - r.1[c]).abs() < 5e-4 + 1e-12);
        }
    }
    let (names, cols) = shuffled(&UNROUNDED);
    let rep = screen(&names, &cols, WEIGHTS).unwrap();
    for (i, (name, _, pareto)) in REPORTED.iter().enumerate() {
        let p = rep.plans.iter().find(|p| p.name == *name).unwrap();
        assert!((p.composite - SCORES[i]).abs() <= 0.002, "{name}: {}", p.composite);
        assert_eq!((p.rank, p.pareto), (i + 1, *pareto), "{name}");
    }
}

#[test]
fn identical_plans_tie_and_stay_efficient() {
    let rep = screen(&["a".into(), "b".into()], &[[1.0, 2.0, 3.0, 4.0]; 2], [0.4, 0.25, 0.2, 0.15]).unwrap();
    assert_eq!(rep.plans[0].composite, rep.plans[1].composite);
    assert!(rep.plans.iter().all(|p| p.pareto && p.normalized == [0.0; 4]));
    assert_eq!(rep.plans[0].rank, 1);
    assert!(screen(&["a".into()], &[[0.0; 4]], [1.0; 4]).is_err());
}

#[test]
fn single_weight_ranks_by_that_criterion() {
    let (names, raw) = shuffled(&std::array::from_fn(|i| REPORTED[i].1));
    let rep = screen(&names, &raw, [1.0, 0.0, 0.0, 0.0]).unwrap();
    let ranked: Vec<f64> = rep.ranked().iter().map(|p| p.raw[0]).collect();
    assert!(ranked.windows(2).all(|w| w[0] <= w[1]));
}

fn criteria_rows() -> impl Strategy<Value = Vec<[f64; 4]>> {
    prop::collection::vec(prop::array::uniform4(0.0f64..10.0), 2..10)
}

proptest! {
    #[test]
    fn pareto_flags_ignore_weights(raw in criteria_rows(), w1 in prop::array::uniform4(0.0f64..1.0), w2 in prop::array::uniform4(0.0f64..1.0)) {
        let names: Vec<String> = (0..raw.len()).map(|i| i.to_string()).collect();
        let a = screen(&names, &raw, w1).unwrap();
        let b = screen(&names, &raw, w2).unwrap();
        let fa: Vec<bool> = a.plans.iter().map(|p| p.pareto).collect();
        let fb: Vec<bool> = b.plans.iter().map(|p| p.pareto).collect();
        prop_assert_eq!(fa, fb);
        let mut ranks: Vec<usize> = a.plans.iter().map(|p| p.rank).collect();
        ranks.sort();
        prop_assert_eq!(ranks, (1..=raw.len()).collect::<Vec<_>>());
    }

    #[test]
    fn composite_invariant_to_affine_rescaling(raw in criteria_rows(), col in 0usize..4, scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let names: Vec<String> = (0..raw.len()).map(|i| i.to_string()).collect();
        let w = [0.4, 0.25, 0.2, 0.15];
        let a = screen(&names, &raw, w).unwrap();
        let moved: Vec<[f64; 4]> = raw.iter().map(|r| { let mut r = *r; r[col] = scale * r[col] + shift; r }).collect();
        let b = screen(&names, &moved, w).unwrap();
        for (p, q) in a.plans.iter().zip(&b.plans) {
            prop_assert!((p.composite - q.composite).abs() < 1e-9);
            prop_assert_eq!(p.pareto, q.pareto);
        }
    }

    #[test]
    fn adding_a_dominated_plan_keeps_pareto_flags(raw in criteria_rows()) {
        let names: Vec<String> = (0..raw.len()).map(|i| i.to_string()).collect();
        let w = [0.4, 0.25, 0.2, 0.15];
        let a = screen(&names, &raw, w).unwrap();
        let mut worse = [0.0; 4];
        for r in &raw { for i in 0..4 { worse[i] = f64::max(worse[i], r[i] + 1.0); } }
        let mut names2 = names.clone();
        names2.push("worst".into());
        let mut raw2 = raw.clone();
        raw2.push(worse);
        let b = screen(&names2, &raw2, w).unwrap();
        for (p, q) in a.plans.iter().zip(&b.plans) {
            prop_assert_eq!(p.pareto, q.pareto);
        }
        prop_assert!(!b.plans.last().unwrap().pareto);
    }

    #[test]
    fn pareto_flags_match_brute_force(raw in criteria_rows()) {
        let names: Vec<String> = (0..raw.len()).map(|i| i.to_string()).collect();
        let rep = screen(&names, &raw, [0.25; 4]).unwrap();
        for (i, p) in rep.plans.iter().enumerate() {
            let dominated = (0..raw.len()).any(|j| j != i
                && (0..4).all(|c| raw[j][c] <= raw[i][c])
                && (0..4).any(|c| raw[j][c] < raw[i][c]));
            prop_assert_eq!(p.pareto, !dominated);
        }
    }
}

fn plan(setpoint: Vec<f64>, valve: Vec<f64>) -> PlanScenario {
    PlanScenario {
        name: "Observed".into(),
        control_names: vec!["o2_setpoint".into(), "valve".into()],
        controls: vec![setpoint, valve],
        provenance: Provenance::Observed,
    }
}

#[test]
fn candidate_plans_follow_their_definitions() {
    let h = 30;
    let sp: Vec<f64> = (0..h).map(|t| if t < 12 { 1.0 } else { 2.0 }).collect();
    let obs = plan(sp.clone(), vec![50.0; h]);
    let plans = build_candidate_plans(&obs, &PlanControls::default()).unwrap();
    let names: Vec<&str> = plans.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["Observed", "Setpoint +0.1", "Setpoint -0.1", "Smoothed setpoint", "Front-load +0.2", "Front-load -0.2", "Valve +5", "Valve -5"]);
    let front = &plans[4].controls[0];
    for t in 0..h {
        let expect = if t < 10 { sp[t] + 0.2 } else { sp[t] };
        assert!((front[t] - expect).abs() < 1e-12, "step {t}");
    }
    assert_eq!(plans[4].controls[1], obs.controls[1]);
    assert!(plans[6].controls[1].iter().all(|&v| v == 55.0));
    // interior smoothing = centered 21-point mean by direct convolution
    let sm = &plans[3].controls[0];
    for t in 10..h - 10 {
        let direct: f64 = sp[t - 10..=t + 10].iter().sum::<f64>() / 21.0;
        assert!((sm[t] - direct).abs() < 1e-12);
    }
    // edges shrink the window
    let edge: f64 = sp[..11].iter().sum::<f64>() / 11.0;
    assert!((sm[0] - edge).abs() < 1e-12);
}

#[test]
fn smoothing_a_constant_plan_is_identity() {
    let obs = plan(vec![1.3; 50], vec![40.0; 50]);
    let plans = build_candidate_plans(&obs, &PlanControls::default()).unwrap();
    assert_eq!(plans[3].controls, obs.controls);
}

#[test]
fn plan_descriptors_round_trip() {
    let obs = plan(vec![1.0; 9], vec![30.0; 9]);
    let p = obs
        .perturbed("edit", vec![
            Perturbation::Shift { control: "o2_setpoint".into(), delta: 0.2 },
            Perturbation::SegmentShift { control: "valve".into(), delta: -5.0, from: 2, to: 4 },
        ])
        .unwrap();
    let json = serde_json::to_string(&p).unwrap();
    assert_eq!(serde_json::from_str::<PlanScenario>(&json).unwrap(), p);
    assert!(json.contains(r#""kind":"segment-shift""#));
    assert!(obs.perturbed("bad", vec![Perturbation::Shift { control: "nope".into(), delta: 1.0 }]).is_err());
}

#[test]
fn plan_grid_mismatch_is_a_plan_error() {
    let recorded = RawDrivers {
        timestamps: vec![1.0, 2.0, 3.0],
        prev_time: 0.0,
        controls: vec![vec![1.0; 3], vec![2.0; 3]],
        exogenous: vec![vec![1.0; 3]],
        categorical: vec![vec![0; 3]],
    };
    let schema = ccss_core::plant::plant_schema();
    let short = plan(vec![1.0; 2], vec![2.0; 2]);
    assert!(matches!(short.to_drivers(&schema, &recorded), Err(ccss_core::Error::Plan(_))));
    let ok = plan(vec![1.5; 3], vec![2.0; 3]).to_drivers(&schema, &recorded).unwrap();
    assert_eq!(ok.exogenous, recorded.exogenous);
    assert_eq!(ok.controls[0], vec![1.5; 3]);
}

#[test]
fn window_selection_rules() {
    let w = |s: usize, score: f64| RankedWindow { window: Window::new(s, 10, 10), score };
    assert_eq!(select_ranked(vec![w(5, 1.0)], 2000, None).unwrap().len(), 1);
    let picked = select_ranked(vec![w(0, 1.0), w(100, 2.0), w(2500, 0.5)], 2000, None).unwrap();
    let starts: Vec<usize> = picked.iter().map(|r| r.window.start).collect();
    assert_eq!(starts, vec![100, 2500]);
    assert!(select_ranked(vec![], 2000, None).is_err());
}

#[test]
fn injected_transient_ranks_first() {
    let (series, _) = common::small_plant(3000, 4);
    let starts = eligible_starts(&series, 64, 50);
    let windows: Vec<Window> = starts.iter().step_by(40).map(|&s| Window::new(s, 64, 50)).collect();
    let target = windows[windows.len() / 2];
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for row in 0..series.len() {
        for j in 0..series.n_vars() {
            let mut v = series.get(row, j).unwrap_or(0.0);
            if j == 0 && row == target.rollout_range().start + 20 {
                v += 500.0;
            }
            values.push(v);
            mask.push(series.is_observed(row, j));
        }
    }
    let spiked = TypedSeries::new(series.timestamps().to_vec(), values, mask, series.schema().clone()).unwrap();
    let ranked = select_windows(&spiked, &windows, Behavior::Transient, &BehaviorVariables::plant(), 1, None).unwrap();
    assert_eq!(ranked[0].window, target);
    for b in Behavior::ALL {
        assert!(!select_windows(&series, &windows, b, &BehaviorVariables::plant(), WINDOW_SEPARATION, None).unwrap().is_empty());
    }
}

#[test]
fn cycling_score_peaks_for_a_pure_tone() {
    let tone: Vec<f64> = (0..256).map(|t| (t as f64 * 0.3).sin()).collect();
    let noise: Vec<f64> = (0..256).map(|t| ((t * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    assert!(dominant_band_power(&tone) > 3.0 * dominant_band_power(&noise));
    assert_eq!(dominant_band_power(&[2.0; 64]), 0.0);
}

#[test]
fn decision_horizon_cases() {
    let grid: Vec<usize> = (1..=10).map(|i| i * 100).collect();
    let pers = vec![1.0; 10];
    assert_eq!(decision_horizon_steps(&grid, &pers, &pers, 1.0), 0);
    let half = vec![0.5; 10];
    assert_eq!(decision_horizon_steps(&grid, &half, &pers, 1.0), 1000);
    let mut broken = half.clone();
    broken[4] = 1.5;
    assert_eq!(decision_horizon_steps(&grid, &broken, &vec![2.0; 10], 1.0), 400);
    assert!((steps_to_hours(1000, 2.0) - 33.333_333).abs() < 1e-4);
}

fn sim_fixture() -> (common::Fixture, Simulator) {
    let f = common::fixture(64, Ablation::default(), 12);
    let ck = Checkpoint::new(f.series.schema().clone(), f.stats.clone(), f.config.clone(), Ablation::default(), f.store.clone(), serde_json::Value::Null);
    let sim = Simulator::new(ck).unwrap();
    (f, sim)
}

#[test]
fn zero_perturbation_gives_zero_deltas() {
    let (f, sim) = sim_fixture();
    let d = &f.windows(40, 1)[0];
    let obs = PlanScenario::observed(f.series.schema(), &d.raw_drivers);
    let zero = obs.perturbed("zero", vec![Perturbation::Shift { control: "valve".into(), delta: 0.0 }]).unwrap();
    let mut scenarios = builtin_scenarios(&obs, &PlanControls::default()).unwrap();
    scenarios.insert(0, zero);
    let rep = what_if(&sim, d, &scenarios, &[10, 40]).unwrap();
    assert!(rep.deltas.iter().filter(|r| r.scenario == "zero").all(|r| r.delta.iter().all(|&x| x == 0.0)));
    assert_eq!(rep.scenarios[0].mean, rep.baseline.mean);
    assert_eq!(rep.deltas.len(), 8);
    assert!(rep.delta_csv().unwrap().starts_with("scenario,nh4@10,nh4@40"));
    assert!(what_if(&sim, d, &scenarios, &[41]).is_err());
    // same inputs, same report
    assert_eq!(what_if(&sim, d, &scenarios, &[10, 40]).unwrap(), rep);
}

#[test]
fn screening_run_on_a_model() {
    let (f, sim) = sim_fixture();
    let d = &f.windows(30, 1)[0];
    let obs = PlanScenario::observed(f.series.schema(), &d.raw_drivers);
    let plans = build_candidate_plans(&obs, &PlanControls::default()).unwrap();
    let run = screen_plans(&sim, d, &plans, &ScreeningCriteria::default()).unwrap();
    assert_eq!(run.report.plans.len(), 8);
    assert_eq!(run.report.plans[0].raw[3], 0.0);
    assert!(run.report.plans.iter().all(|p| p.raw.iter().all(|x| x.is_finite() && *x >= 0.0)));
    assert!(run.report.to_csv().unwrap().lines().count() == 9);
}

#[test]
fn outage_study_protocol() {
    let (f, sim) = sim_fixture();
    let data = f.windows(20, 4);
    let items: Vec<_> = data.iter().collect();
    let mut conds = vec![OutageCondition::empty()];
    conds.extend(plant_outage_conditions().into_iter().map(|mut c| {
        c.steps = c.steps.min(60);
        c
    }));
    let rep = outage_study(&sim, &f.series, &items, &conds).unwrap();
    let empty = &rep.results[0];
    for v in &empty.per_variable {
        assert!(v.ratios.iter().all(|&r| r == 1.0));
        assert_eq!(v.baseline_rmse, v.outage_rmse);
    }
    assert_eq!(rep.results.len(), 4);
    assert!(rep.to_csv().unwrap().contains("nh4@60"));
    let too_long = OutageCondition::new(&["nh4"], 65);
    assert!(outage_study(&sim, &f.series, &items, &[too_long]).is_err());
}

#[test]
fn masking_missing_entries_changes_nothing() {
    let (f, sim) = sim_fixture();
    let d = &f.windows(20, 1)[0];
    let ctx = d.window.context_range();
    // pick a variable/row stretch that is already unobserved, if any
    let var = 0;
    let missing: Vec<usize> = ctx.clone().rev().take_while(|&r| !f.series.is_observed(r, var)).collect();
    let cond = OutageCondition::new(&["nh4"], missing.len());
    let masked = mask_context(&sim, &f.series, d, &cond).unwrap();
    assert_eq!(masked.tokens, d.tokens);
}

#[test]
fn unobserved_context_variable_persists_at_the_training_mean() {
    let (f, sim) = sim_fixture();
    let d = &f.windows(20, 1)[0];
    let nh4 = f.series.schema().index_of("nh4").unwrap();
    let masked = f.series.with_masked(d.window.context_range().map(|r| (r, nh4)));
    let blind = sim.prepare(&masked, &d.window).unwrap();
    assert!(blind.last_observed[nh4].is_none());
    let state = f.series.schema().indices(ccss_core::series::VariableKind::State);
    let p = ccss_core::evaluation::persistence_baseline(&blind, &f.stats, &state).unwrap();
    let k = state.iter().position(|&j| j == nh4).unwrap();
    assert!((0..p.rows).all(|t| p.row(t)[k] == 0.0));
    let full = ccss_core::evaluation::persistence_baseline(d, &f.stats, &state).unwrap();
    for c in (0..p.cols).filter(|&c| c != k) {
        assert_eq!(p.row(0)[c], full.row(0)[c]);
    }
    // a full-context outage still evaluates
    let cond = OutageCondition::new(&["nh4"], d.window.context_range().len());
    assert!(outage_study(&sim, &f.series, &[d], &[cond]).unwrap().results[0].per_variable.iter().all(|v| v.outage_rmse.is_finite()));
}
