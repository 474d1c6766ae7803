use slq_core::presets;
use slq_core::scenario::{sha256_hex, Scenario};

fn schema() -> jsonschema::Validator {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/scenario.schema.json")).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

#[test]
fn emitted_presets_validate_and_reload() {
    let v = schema();
    let dir = tempfile::tempdir().unwrap();
    for (name, _) in presets::list() {
        let sc = presets::scenario(name).unwrap();
        let text = sc.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.is_valid(&value), "{name}: {:?}", v.iter_errors(&value).map(|e| e.to_string()).collect::<Vec<_>>());
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, &text).unwrap();
        let (back, hash) = Scenario::load(&path).unwrap();
        assert_eq!(hash, sha256_hex(text.as_bytes()));
        assert_eq!(back.to_json(), text);
        let (a, b) = (sc.to_spec().unwrap(), back.to_spec().unwrap());
        for t in [0.0, 0.37, sc.horizon()] {
            assert_eq!(a.at(t).a, b.at(t).a);
            assert_eq!(a.at(t).h, b.at(t).h);
            assert_eq!(a.q1.at(t), b.q1.at(t));
        }
        assert_eq!(a.x0, b.x0);
    }
}

#[test]
fn schema_rejects_malformed_files() {
    let v = schema();
    let mut value: serde_json::Value = serde_json::from_str(&presets::scenario("scalar-smoke").unwrap().to_json()).unwrap();
    assert!(v.is_valid(&value));
    value["grid"]["n_steps"] = serde_json::json!(-3);
    assert!(!v.is_valid(&value));
    let mut value: serde_json::Value = serde_json::from_str(&presets::scenario("scalar-smoke").unwrap().to_json()).unwrap();
    value.as_object_mut().unwrap().remove("costs");
    assert!(!v.is_valid(&value));
    assert!(Scenario::from_json(&value.to_string()).is_err());
}

#[test]
fn sampled_coefficients_survive_a_roundtrip() {
    let mut value: serde_json::Value = serde_json::from_str(&presets::scenario("scalar-smoke").unwrap().to_json()).unwrap();
    value["observation"]["h"] = serde_json::json!({"samples": [[[0.0]], [[1.0]], [[2.0]]], "interp": "linear"});
    assert!(schema().is_valid(&value));
    let sc = Scenario::from_json(&value.to_string()).unwrap();
    let spec = sc.to_spec().unwrap();
    let mid = spec.h.at(0.25 * sc.horizon())[(0, 0)];
    assert!((mid - 0.5).abs() <= 1e-12);
    let again = Scenario::from_json(&sc.to_json()).unwrap();
    assert_eq!(again.to_json(), sc.to_json());
}
