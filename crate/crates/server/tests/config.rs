use std::path::PathBuf;

use ccss_server::config::{ServiceConfig, ENV_DATA_ROOT, ENV_PORT};

#[test]
fn partial_toml_keeps_defaults() {
    let c = ServiceConfig::from_toml(
        r#"
        port = 9100
        checkpoint = "models/full.ccss"
        [criteria]
        weights = [1.0, 0.0, 0.0, 0.0]
        "#,
    )
    .unwrap();
    assert_eq!(c.port, 9100);
    assert_eq!(c.criteria.weights, [1.0, 0.0, 0.0, 0.0]);
    assert_eq!(c.criteria.target_variable, "nh4");
    assert_eq!(c.horizon, 200);
    assert_eq!(c.checkpoint_path(), PathBuf::from("./models/full.ccss"));
    assert_eq!(c.schema_path(), PathBuf::from("./plant.schema.json"));
    c.validate().unwrap();
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ServiceConfig::from_toml("prot = 1").is_err());
}

#[test]
fn environment_overrides_port_and_root() {
    let mut c = ServiceConfig::default();
    c.apply_env(|k| match k {
        ENV_PORT => Some("7001".into()),
        ENV_DATA_ROOT => Some("/srv/plant".into()),
        _ => None,
    })
    .unwrap();
    assert_eq!(c.port, 7001);
    assert_eq!(c.dataset_path(), PathBuf::from("/srv/plant/plant.csv"));
    let mut c = ServiceConfig { dataset: PathBuf::from("/abs/x.csv"), ..Default::default() };
    c.apply_env(|k| (k == ENV_DATA_ROOT).then(|| "/elsewhere".into())).unwrap();
    assert_eq!(c.dataset_path(), PathBuf::from("/abs/x.csv"));
    let err = ServiceConfig::default().apply_env(|k| (k == ENV_PORT).then(|| "http".into())).unwrap_err();
    assert!(err.to_string().contains("CCSS_PORT"));
}

#[test]
fn invalid_values_fail_validation() {
    let c = ServiceConfig { horizon: 0, ..Default::default() };
    assert!(c.validate().is_err());
    let mut c = ServiceConfig::default();
    c.criteria.weights[2] = -0.1;
    assert!(c.validate().is_err());
}
