use std::collections::HashSet;

use sentinel_core::hitl::CorrectionRecord;
use sentinel_core::sim::{generate_fleet, simulate, ErrorModel, PlateError, SimError, SimScenario, MISS_TEXT};
use sentinel_core::vqa::TaskKind;

fn small(n: usize) -> SimScenario {
    SimScenario { n_vehicles: n, n_training: 300, probe_size: 100, ..SimScenario::default() }
}

#[test]
fn noiseless_fleet_scripts_ground_truth() {
    let s = SimScenario { error_model: ErrorModel::noiseless(), ..small(500) };
    let fleet = generate_fleet(&s).unwrap();
    for v in &fleet.traffic {
        let truth = &v.truth[&TaskKind::PlateRecognition];
        assert_eq!(fleet.prior.get(&v.image.digest, TaskKind::PlateRecognition).unwrap().text, *truth);
        assert_eq!(v.plate_error, None);
    }
}

#[test]
fn noiseless_run_has_nothing_to_learn() {
    let dir = tempfile::tempdir().unwrap();
    let s = SimScenario { error_model: ErrorModel::noiseless(), ..small(1_000) };
    let r = simulate(&s, dir.path()).unwrap();
    assert_eq!(r.plate_accuracy, 1.0);
    assert_eq!(r.corrections_accepted, 0);
    assert!(r.triggers.is_empty());
    assert!(r.jobs.is_empty());
    assert_eq!(r.reviews, r.confirmations);
}

#[test]
fn fleets_are_deterministic_and_seed_sensitive() {
    let a = generate_fleet(&small(300)).unwrap();
    let b = generate_fleet(&small(300)).unwrap();
    assert_eq!(a, b);
    let c = generate_fleet(&SimScenario { seed: 8, ..small(300) }).unwrap();
    assert_ne!(a.traffic[0].truth, c.traffic[0].truth);
}

#[test]
fn corrupted_fraction_is_binomial() {
    let p = 0.2;
    let s = SimScenario {
        error_model: ErrorModel { substitution_rate: p, ..ErrorModel::noiseless() },
        n_training: 10,
        ..small(10_000)
    };
    let fleet = generate_fleet(&s).unwrap();
    let corrupted = fleet.traffic.iter().filter(|v| v.plate_error.is_some()).count() as f64;
    let n = fleet.traffic.len() as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!((corrupted - n * p).abs() <= 3.0 * sigma, "{corrupted} vs {}", n * p);
    for v in fleet.traffic.iter().filter(|v| v.plate_error == Some(PlateError::Substitution)) {
        let truth = &v.truth[&TaskKind::PlateRecognition];
        let diff = truth.chars().zip(v.plate_text.chars()).filter(|(a, b)| a != b).count();
        assert_eq!((diff, truth.len()), (1, v.plate_text.len()));
    }
}

#[test]
fn error_categories_shape_the_text() {
    let s = SimScenario {
        error_model: ErrorModel {
            substitution_rate: 0.25,
            omission_rate: 0.25,
            addition_rate: 0.25,
            miss_rate: 0.25,
            ..ErrorModel::default()
        },
        n_training: 10,
        ..small(2_000)
    };
    let fleet = generate_fleet(&s).unwrap();
    for v in &fleet.traffic {
        let truth = &v.truth[&TaskKind::PlateRecognition];
        match v.plate_error.unwrap() {
            PlateError::Miss => assert_eq!(v.plate_text, MISS_TEXT),
            PlateError::Omission => assert_eq!(v.plate_text.len() + 1, truth.len()),
            PlateError::Addition => assert_eq!(v.plate_text.len(), truth.len() + 1),
            PlateError::Substitution => assert_eq!(v.plate_text.len(), truth.len()),
        }
    }
}

#[test]
fn reports_are_byte_identical_and_corrections_logged_once() {
    let s = small(2_000);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = simulate(&s, d1.path()).unwrap();
    let b = simulate(&s, d2.path()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(!a.jobs.is_empty());
    assert!(a.analytic_routing.within_3_sigma, "{:?}", a.analytic_routing);

    let log: Vec<CorrectionRecord> =
        sentinel_core::store::recover(&d1.path().join("state/corrections.jsonl")).unwrap();
    let ids: HashSet<&str> = log.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids.len(), log.len());
    assert_eq!(log.len(), a.corrections_accepted + a.corrections_secondary);
    let consumed: usize = a.jobs.iter().map(|j| j.corrections).sum();
    assert_eq!(consumed + a.final_metrics.pending_corrections, a.corrections_accepted);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let bad_rates = SimScenario {
        error_model: ErrorModel { substitution_rate: 0.7, miss_rate: 0.7, ..ErrorModel::default() },
        ..small(10)
    };
    assert!(matches!(generate_fleet(&bad_rates), Err(SimError::InvalidScenario(_))));
    let mut bad_states = small(10);
    bad_states.states.insert("Ohio".into(), 0.5);
    assert!(matches!(generate_fleet(&bad_states), Err(SimError::InvalidScenario(_))));
    assert!(matches!(generate_fleet(&small(0)), Err(SimError::InvalidScenario(_))));
}
