//! Straight-loop reference implementations used as test oracles.
#![allow(dead_code)]

use std::path::PathBuf;

use handcontact::annotations::{read_annotations, ImageRecord};
use handcontact::baseline::{hand_feature, Joint, PoseRecord, FEATURE_DIMS, NUM_JOINTS, RIGHT_WRIST};
use handcontact::evaluation::{read_detections, DetectionRecord};
use handcontact::geometry::AxisBox;
use handcontact::head::{ContactLabel, ContactState, TriState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use handcontact::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn project(x: &Rows, w: &Rows) -> Rows {
    let k = w[0].len();
    x.iter()
        .map(|row| {
            (0..k)
                .map(|j| row.iter().zip(w).map(|(v, wr)| v * wr[j]).sum())
                .collect()
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn naive_affinity(h: &Rows, u: &Rows, wa: &Rows, wb: &Rows) -> Rows {
    let q = project(h, wa);
    let k = project(u, wb);
    q.iter()
        .map(|qi| k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

pub fn naive_group_norm(x: &Rows, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Rows {
    let n = x.len();
    let d = x[0].len();
    let cg = d / groups;
    let mut out = vec![vec![0.0; d]; n];
    for g in 0..groups {
        let mut vals = Vec::new();
        for row in x {
            for c in g * cg..(g + 1) * cg {
                vals.push(row[c]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        for p in 0..n {
            for c in g * cg..(g + 1) * cg {
                out[p][c] = (x[p][c] - mean) / (var + eps).sqrt() * gamma[c] + beta[c];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn naive_cross_attend(
    h: &Rows,
    u: &Rows,
    wa: &Rows,
    wb: &Rows,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
    eps: f64,
) -> Rows {
    let a = naive_affinity(h, u, wa, wb);
    let d = h[0].len();
    let pooled: Rows = a
        .iter()
        .map(|ai| {
            let w = softmax(ai);
            (0..d).map(|c| w.iter().zip(u).map(|(wj, uj)| wj * uj[c]).sum()).collect()
        })
        .collect();
    let normed = naive_group_norm(&pooled, groups, gamma, beta, eps);
    h.iter()
        .zip(&normed)
        .map(|(hr, nr)| hr.iter().zip(nr).map(|(a, b)| a + b).collect())
        .collect()
}

/// `w` is `d×L`, `theta` is `L` slices of `d×4`.
pub fn naive_spatial_scores(u: &Rows, w: &Rows, theta: &[Rows]) -> [f64; 4] {
    let maps = w[0].len();
    let mut total = [0.0; 4];
    for l in 0..maps {
        let logits: Vec<f64> = u
            .iter()
            .map(|row| row.iter().zip(w).map(|(v, wr)| v * wr[l]).sum())
            .collect();
        let a = softmax(&logits);
        for (p, row) in u.iter().enumerate() {
            for s in 0..4 {
                let proj: f64 = row.iter().zip(&theta[l]).map(|(v, tr)| v * tr[s]).sum();
                total[s] += a[p] * proj;
            }
        }
    }
    total.map(|t| t / maps as f64)
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// AP by exhaustive thresholding: for every distinct score, match the
/// detections at or above it from scratch, then integrate the interpolated
/// precision over recall steps.
pub fn ap_oracle(dets: &[DetectionRecord], gts: &[ImageRecord], state: ContactState) -> Option<f64> {
    let hands = |id: &str| {
        gts.iter()
            .find(|g| g.image_id == id)
            .unwrap()
            .hands
            .iter()
            .map(|h| (h.bbox().to_array(), h.contact.get(state)))
            .collect::<Vec<_>>()
    };
    let num_gt = gts
        .iter()
        .flat_map(|g| &g.hands)
        .filter(|h| h.contact.get(state) == TriState::Yes)
        .count();
    if num_gt == 0 {
        return None;
    }
    let kept: Vec<(&DetectionRecord, f64)> = dets
        .iter()
        .filter(|d| {
            let hs = hands(&d.image_id);
            let mut best = (0.0, None);
            for (b, l) in &hs {
                let v = box_iou(d.bbox.to_array(), *b);
                if v > best.0 {
                    best = (v, Some(*l));
                }
            }
            !(best.0 > 0.5 && best.1 == Some(TriState::Unsure))
        })
        .map(|d| (d, d.det_score * d.contact_probs[state.index()]))
        .collect();
    let mut thresholds: Vec<f64> = kept.iter().map(|k| k.1).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut curve = Vec::new();
    for &t in &thresholds {
        let mut chosen: Vec<&(&DetectionRecord, f64)> = kept.iter().filter(|k| k.1 >= t).collect();
        chosen.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut claimed: Vec<(String, usize)> = Vec::new();
        let mut tp = 0usize;
        for (d, _) in &chosen {
            let hs = hands(&d.image_id);
            let mut best: Option<(usize, f64)> = None;
            for (i, (b, l)) in hs.iter().enumerate() {
                if *l != TriState::Yes {
                    continue;
                }
                let v = box_iou(d.bbox.to_array(), *b);
                if best.is_none() || v > best.unwrap().1 {
                    best = Some((i, v));
                }
            }
            if let Some((i, v)) = best {
                let key = (d.image_id.clone(), i);
                if v > 0.5 && !claimed.contains(&key) {
                    claimed.push(key);
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / chosen.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        let best_p = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev_recall) * best_p;
        prev_recall = r;
    }
    Some(ap)
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn ap_fixture_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(fixture_dir().join("ap"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

pub fn load_ap_fixture(name: &str) -> (Vec<DetectionRecord>, Vec<ImageRecord>) {
    let dir = fixture_dir().join("ap").join(name);
    (
        read_detections(&dir.join("detections.jsonl")).unwrap(),
        read_annotations(&dir.join("annotations.jsonl")).unwrap(),
    )
}

pub fn expected_aps() -> Vec<(String, f64)> {
    let text = std::fs::read_to_string(fixture_dir().join("ap/expected.json")).unwrap();
    let map: std::collections::BTreeMap<String, f64> = serde_json::from_str(&text).unwrap();
    map.into_iter().collect()
}

/// Smallest bounding-rectangle area over orientations in `[0°, 180°)`
/// swept in steps of `step_deg`.
pub fn sweep_min_rect_area(points: &[(f64, f64)], step_deg: f64) -> f64 {
    let steps = (180.0 / step_deg).round() as usize;
    (0..steps)
        .map(|k| {
            let th = (k as f64 * step_deg).to_radians();
            let (c, s) = (th.cos(), th.sin());
            let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) =
                (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for &(x, y) in points {
                let u = x * c + y * s;
                let v = -x * s + y * c;
                lo_u = lo_u.min(u);
                hi_u = hi_u.max(u);
                lo_v = lo_v.min(v);
                hi_v = hi_v.max(v);
            }
            (hi_u - lo_u) * (hi_v - lo_v)
        })
        .fold(f64::INFINITY, f64::min)
}

pub struct Scene {
    pub hand: AxisBox,
    pub poses: Vec<PoseRecord>,
    pub objects: Vec<AxisBox>,
    pub width: f64,
    pub height: f64,
}

impl Scene {
    pub fn scaled(&self, k: f64) -> Scene {
        Scene {
            hand: self.hand.scaled(k),
            poses: self.poses.iter().map(|p| p.scaled(k)).collect(),
            objects: self.objects.iter().map(|o| o.scaled(k)).collect(),
            width: self.width * k,
            height: self.height * k,
        }
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> AxisBox {
    let (x, y) = (rng.random_range(0.0..w * 0.8), rng.random_range(0.0..h * 0.8));
    AxisBox::new(x, y, x + rng.random_range(5.0..w * 0.2), y + rng.random_range(5.0..h * 0.2)).unwrap()
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let (width, height) = (640.0, 480.0);
    let hand = random_box(rng, width, height);
    let poses = (0..rng.random_range(1..4))
        .map(|id| {
            let joints = (0..NUM_JOINTS)
                .map(|_| {
                    let conf = if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.1..1.0) };
                    Joint::from([rng.random_range(0.0..width), rng.random_range(0.0..height), conf])
                })
                .collect();
            let mut p = PoseRecord::new(id, joints).unwrap();
            p.joints[RIGHT_WRIST].confidence = 0.9;
            p
        })
        .collect();
    let objects = (0..rng.random_range(0..4)).map(|_| random_box(rng, width, height)).collect();
    Scene { hand, poses, objects, width, height }
}

pub fn feature(s: &Scene) -> Vec<f64> {
    hand_feature(&s.hand, &s.poses, &s.objects, s.width, s.height)
        .unwrap()
        .expect("scene has a visible wrist")
        .to_vec()
}

/// Hands labelled by random hyperplanes through the feature centroid, with a
/// margin so every state is linearly separable.
pub fn separable_samples(seed: u64) -> Vec<(Vec<f64>, ContactLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats: Vec<Vec<f64>> = (0..300).map(|_| feature(&random_scene(&mut rng))).collect();
    let mean: Vec<f64> = (0..FEATURE_DIMS)
        .map(|j| feats.iter().map(|h| h[j]).sum::<f64>() / feats.len() as f64)
        .collect();
    let planes: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..FEATURE_DIMS).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let margin = |h: &[f64], w: &[f64]| h.iter().zip(&mean).zip(w).map(|((x, m), w)| (x - m) * w).sum::<f64>();
    feats
        .into_iter()
        .filter(|h| planes.iter().all(|w| margin(h, w).abs() > 0.02))
        .map(|h| {
            let label = ContactLabel::new(std::array::from_fn(|s| TriState::from_bool(margin(&h, &planes[s]) > 0.0)));
            (h, label)
        })
        .collect()
}
