mod common;

use std::time::Instant;

use common::{ap_fixture_names, ap_oracle, expected_aps, load_ap_fixture};
use handcontact::annotations::{HandAnnotation, ImageRecord};
use handcontact::evaluation::{evaluate, evaluate_state, DetectionRecord};
use handcontact::geometry::{AxisBox, Quadrilateral};
use handcontact::head::{ContactLabel, ContactState, TriState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_matches_oracle(dets: &[DetectionRecord], gts: &[ImageRecord], context: &str) {
    for s in ContactState::ALL {
        let got = evaluate_state(dets, gts, s).unwrap().ap;
        let want = ap_oracle(dets, gts, s);
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-12, "{context} {}: {g} vs {w}", s.name()),
            (None, None) => {}
            other => panic!("{context} {}: {other:?}", s.name()),
        }
    }
}

#[test]
fn fixtures_have_distinct_scores_and_at_most_ten_detections() {
    for name in ap_fixture_names() {
        let (dets, _) = load_ap_fixture(&name);
        assert!(dets.len() <= 10, "{name}");
        for s in ContactState::ALL {
            let mut scores: Vec<f64> = dets.iter().map(|d| d.joint_score(s)).collect();
            scores.sort_by(f64::total_cmp);
            scores.dedup();
            assert_eq!(scores.len(), dets.len(), "{name} {}", s.name());
        }
    }
}

#[test]
fn every_fixture_matches_exhaustive_oracle() {
    let names = ap_fixture_names();
    assert!(names.len() >= 6);
    for name in names {
        let (dets, gts) = load_ap_fixture(&name);
        assert_matches_oracle(&dets, &gts, &name);
    }
}

#[test]
fn hand_built_values_are_exact() {
    for (name, ap) in expected_aps() {
        let (dets, gts) = load_ap_fixture(&name);
        for s in ContactState::ALL {
            assert_eq!(evaluate_state(&dets, &gts, s).unwrap().ap, Some(ap), "{name} {}", s.name());
        }
    }
}

#[test]
fn unsure_fixture_drops_only_the_unsure_state() {
    let (dets, gts) = load_ap_fixture("unsure");
    let object = evaluate_state(&dets, &gts, ContactState::Object).unwrap();
    assert_eq!(object.num_ignored, 1);
    assert_eq!(object.ap, Some(1.0));
    let none = evaluate_state(&dets, &gts, ContactState::NoContact).unwrap();
    assert_eq!(none.num_ignored, 0);
    assert_eq!(none.ap, Some(0.5));
    assert_eq!(evaluate_state(&dets, &gts, ContactState::SelfContact).unwrap().ap, None);
    let summary = evaluate(&dets, &gts).unwrap();
    assert_eq!(summary.map, 0.75);
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<DetectionRecord>, Vec<ImageRecord>) {
    let states = [TriState::Yes, TriState::No, TriState::Unsure];
    let images: Vec<ImageRecord> = (0..rng.random_range(1..=3))
        .map(|i| ImageRecord {
            image_id: format!("r{i}"),
            height: 100.0,
            width: 100.0,
            hands: (0..rng.random_range(0..=3))
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..70.0), rng.random_range(0.0..70.0));
                    let (w, h) = (rng.random_range(5.0..30.0), rng.random_range(5.0..30.0));
                    HandAnnotation {
                        quad: Quadrilateral::from_box(&AxisBox::new(x, y, x + w, y + h).unwrap()),
                        contact: ContactLabel::new(std::array::from_fn(|_| states[rng.random_range(0..3)])),
                    }
                })
                .collect(),
            objects: vec![],
        })
        .collect();
    let dets = (0..rng.random_range(1..=10))
        .map(|_| {
            let img = &images[rng.random_range(0..images.len())];
            let bbox = if !img.hands.is_empty() && rng.random_bool(0.7) {
                let b = img.hands[rng.random_range(0..img.hands.len())].bbox();
                let j = |v: f64, r: &mut ChaCha8Rng| v + r.random_range(-3.0..3.0);
                let (x0, y0) = (j(b.x_min, rng), j(b.y_min, rng));
                AxisBox::new(x0, y0, x0.max(j(b.x_max, rng)), y0.max(j(b.y_max, rng))).unwrap()
            } else {
                let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
                AxisBox::new(x, y, x + 15.0, y + 15.0).unwrap()
            };
            DetectionRecord {
                image_id: img.image_id.clone(),
                bbox,
                det_score: rng.random_range(0.01..1.0),
                contact_probs: std::array::from_fn(|_| rng.random_range(0.01..1.0)),
            }
        })
        .collect();
    (dets, images)
}

#[test]
fn random_small_cases_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..500 {
        let (dets, gts) = random_case(&mut rng);
        assert_matches_oracle(&dets, &gts, &format!("case {case}"));
    }
}

#[test]
fn hundred_thousand_detections_evaluate_quickly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<ImageRecord> = (0..10_000)
        .map(|i| ImageRecord {
            image_id: format!("img{i}"),
            height: 100.0,
            width: 100.0,
            hands: vec![HandAnnotation {
                quad: Quadrilateral::from_box(&AxisBox::new(10.0, 10.0, 40.0, 40.0).unwrap()),
                contact: ContactLabel::new(std::array::from_fn(|_| TriState::from_bool(rng.random_bool(0.5)))),
            }],
            objects: vec![],
        })
        .collect();
    let dets: Vec<DetectionRecord> = (0..100_000)
        .map(|i| DetectionRecord {
            image_id: format!("img{}", i % 10_000),
            bbox: AxisBox::new(10.0, 10.0, 40.0 + (i % 7) as f64, 40.0).unwrap(),
            det_score: rng.random_range(0.0..1.0),
            contact_probs: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        })
        .collect();
    let t = Instant::now();
    let summary = evaluate(&dets, &images).unwrap();
    assert!(t.elapsed().as_secs_f64() < 10.0, "{:?}", t.elapsed());
    assert!(summary.map > 0.0 && summary.map < 1.0);
}
