use std::fs;

use relaxo::curve::{log_spaced, DecayCurve};
use relaxo::particles::ParticleList;
use relaxo::sim::{simulate_widefield, SceneConfig};
use relaxo::{load_stack, Error, ScalarMap};

#[test]
fn curve_csv_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let tau = log_spaced(1e-6, 5e-3, 7);
    let signal: Vec<f64> = tau.iter().map(|t| 1.0 / 3.0 + t.sqrt()).collect();
    let reference: Vec<f64> = signal.iter().map(|s| 2.0 - s).collect();
    let sigma: Vec<f64> = signal.iter().map(|s| s.sqrt() / 7.0).collect();
    let curve = DecayCurve::new(tau.clone(), signal.clone(), Some(reference), Some(sigma)).unwrap();
    let path = dir.path().join("c.csv");
    curve.write_csv(&path).unwrap();
    assert_eq!(DecayCurve::read_csv(&path).unwrap(), curve);

    let bare = DecayCurve::from_signal(tau, signal).unwrap();
    bare.write_csv(&path).unwrap();
    let back = DecayCurve::read_csv(&path).unwrap();
    assert!(back.reference.is_none() && back.sigma.is_none());
    assert_eq!(back, bare);
}

#[test]
fn malformed_curve_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("no_tau.csv", "signal\n1\n"),
        ("unsorted.csv", "tau_s,signal\n2e-6,1\n1e-6,0.9\n"),
        ("garbage.csv", "tau_s,signal\n1e-6,abc\n"),
        ("partial.csv", "tau_s,signal,reference\n1e-6,1,0.5\n2e-6,0.9,\n"),
        ("empty.csv", "tau_s,signal\n"),
    ];
    for (name, body) in cases {
        let path = dir.path().join(name);
        fs::write(&path, body).unwrap();
        assert!(matches!(DecayCurve::read_csv(&path), Err(Error::Format { .. })), "{name}");
    }
    assert!(matches!(
        DecayCurve::read_csv(&dir.path().join("absent.csv")),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn simulated_stack_survives_disk_and_binning() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = SceneConfig::with_eta_span(10, 6, 0.3, 0.8, 10e-6).unwrap();
    scene.repetitions = 1000;
    let sim = simulate_widefield(&scene).unwrap();
    let manifest = sim.stack.write(dir.path()).unwrap();
    let loaded = load_stack(&manifest, 1).unwrap();
    assert_eq!(loaded, sim.stack);

    let binned = load_stack(&manifest, 3).unwrap();
    assert_eq!((binned.width, binned.height), (3, 2));
    let plane = sim.stack.planes[0].clone();
    let block: f32 = (0..3).flat_map(|y| (0..3).map(move |x| y * 10 + x)).map(|i| plane[i]).sum();
    assert_eq!(binned.planes[0][0], block);

    fs::remove_file(dir.path().join("reference_004.f32")).unwrap();
    match load_stack(&manifest, 1) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("reference_004.f32")),
        other => panic!("expected missing plane, got {other:?}"),
    }
}

#[test]
fn scalar_map_round_trips_with_mask() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<Option<f64>> = (0..12).map(|i| (i % 5 != 0).then(|| 100.0 + i as f64 / 3.0)).collect();
    let map = ScalarMap::from_options(4, 3, "gamma1", "s^-1", &values).with_provenance("seed", 7);
    let sidecar = map.write(dir.path(), "gamma1").unwrap();
    let back = ScalarMap::read(&sidecar).unwrap();
    assert_eq!(back.mask, map.mask);
    assert_eq!(back.provenance, map.provenance);
    for (a, b) in back.values.iter().zip(&map.values) {
        assert!(a.is_nan() && b.is_nan() || (a - b).abs() <= 1e-4 * b.abs());
    }
}

#[test]
fn particle_list_defaults_the_roi() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    fs::write(&path, r#"{"particles": [{"id": "a", "x": 3, "y": 4}]}"#).unwrap();
    let list = ParticleList::read(&path).unwrap();
    assert_eq!(list.roi_half_size, 5);
    assert_eq!(list.particles[0].id, "a");
    fs::write(&path, r#"{"particles": [{"id": "a", "x": 3}]}"#).unwrap();
    assert!(ParticleList::read(&path).is_err());
}
