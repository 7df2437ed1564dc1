use ccss_web::{emission_density_json, plant_what_if_json, rank_plans_json};
use serde_json::{json, Value};

fn call(f: fn(&str) -> Result<String, String>, req: Value) -> Value {
    serde_json::from_str(&f(&req.to_string()).unwrap()).unwrap()
}

fn table() -> Value {
    json!({
        "names": ["Smoothed setpoint", "Setpoint -0.1", "Front-load -0.2", "Valve -5", "Observed", "Valve +5", "Front-load +0.2", "Setpoint +0.1"],
        "raw": [
            [0.176, 0.058, 0.006, 0.290], [0.394, 0.083, 0.007, 0.048], [0.512, 0.092, 0.010, 0.033], [0.666, 0.106, 0.010, 0.014],
            [0.676, 0.108, 0.012, 0.000], [0.690, 0.114, 0.015, 0.022], [0.991, 0.226, 0.019, 0.067], [1.093, 0.174, 0.025, 0.100]
        ]
    })
}

#[test]
fn ranking_flags_five_efficient_plans() {
    let rep = call(rank_plans_json, table());
    let plans = rep["plans"].as_array().unwrap();
    let ranks: Vec<u64> = plans.iter().map(|p| p["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, (1..=8).collect::<Vec<_>>());
    let pareto: Vec<bool> = plans.iter().map(|p| p["pareto"].as_bool().unwrap()).collect();
    assert_eq!(pareto, [true, true, true, true, true, false, false, false]);
}

#[test]
fn ranking_follows_custom_weights() {
    let mut req = table();
    req["weights"] = json!([0.0, 0.0, 0.0, 1.0]);
    let rep = call(rank_plans_json, req);
    let observed = rep["plans"].as_array().unwrap().iter().find(|p| p["name"] == "Observed").unwrap().clone();
    assert_eq!(observed["rank"], 1);
    assert_eq!(observed["composite"], 0.0);
}

#[test]
fn ranking_rejects_bad_input() {
    assert!(rank_plans_json("{").unwrap_err().starts_with("bad request"));
    assert!(rank_plans_json(&json!({"names": ["a"], "raw": [[1, 2, 3, 4], [1, 2, 3, 4]]}).to_string()).is_err());
    assert!(rank_plans_json(&json!({"names": [], "raw": [], "extra": 1}).to_string()).is_err());
}

#[test]
fn density_mass_adds_up() {
    let d = call(emission_density_json, json!({"mu": 0.4, "sigma": 0.3, "nu": 5.0, "pi": 0.25, "points": 4000}));
    let mass = d["mass_shown"].as_f64().unwrap();
    // the grid drops 0.2% of the continuous part
    assert!((mass - (1.0 - 0.75 * 0.002)).abs() < 1e-4, "{mass}");
    assert_eq!(d["zero_mass"], 0.25);
    // log1p(x) < 0 with probability P(t5 < -4/3) ≈ 0.1200
    let clamped = d["clamped_mass"].as_f64().unwrap();
    assert!((clamped - 0.75 * 0.1200).abs() < 2e-3, "{clamped}");
    let [lo, hi] = [d["interval"][0].as_f64().unwrap(), d["interval"][1].as_f64().unwrap()];
    assert_eq!(lo, 0.0);
    assert!(hi > d["median"].as_f64().unwrap());
}

#[test]
fn gaussian_density_is_symmetric() {
    let d = call(emission_density_json, json!({"mu": 1.0, "sigma": 2.0, "gaussian": true, "log_space": false, "points": 101}));
    let f: Vec<f64> = d["density"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for i in 0..50 {
        assert!((f[i] - f[100 - i]).abs() < 1e-9 * f[50]);
    }
    assert!((d["median"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn density_rejects_invalid_laws() {
    assert!(emission_density_json(&json!({"mu": 0.0, "sigma": -1.0, "nu": 3.0}).to_string()).is_err());
    assert!(emission_density_json(&json!({"mu": 0.0, "sigma": 1.0, "nu": 3.0, "level": 1.5}).to_string()).is_err());
}

#[test]
fn plant_zero_edit_is_identity_and_setpoint_lowers_ammonium() {
    let zero = call(plant_what_if_json, json!({"n_steps": 1500, "start": 600, "horizon": 100}));
    assert_eq!(zero["baseline_nh4"], zero["edited_nh4"]);
    assert_eq!(zero["mean_delta_nh4"], 0.0);
    assert_eq!(zero["timestamps"].as_array().unwrap().len(), 100);
    let up = call(plant_what_if_json, json!({"n_steps": 1500, "start": 600, "horizon": 100, "setpoint_delta": 1.0}));
    assert!(up["mean_delta_nh4"].as_f64().unwrap() <= 0.0);
    // same request, same answer
    assert_eq!(up, call(plant_what_if_json, json!({"n_steps": 1500, "start": 600, "horizon": 100, "setpoint_delta": 1.0})));
}

#[test]
fn plant_rejects_out_of_range_windows() {
    assert!(plant_what_if_json(&json!({"n_steps": 500, "start": 450, "horizon": 100}).to_string()).is_err());
    assert!(plant_what_if_json(&json!({"n_steps": 500, "start": 0, "horizon": 10}).to_string()).is_err());
}
