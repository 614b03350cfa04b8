//! Pose-heuristic contact baseline.
//!
//! Each hand is described by a 52-value feature: 24 distances from its wrist
//! to the other joints of the same person, 25 mean distances to the joints
//! of every other person, and 3 hand-object statistics. Distances are
//! divided by the image diagonal. Four independent logistic-regression
//! models are fitted on top.
//!
//! Joint indices follow the 25-keypoint body layout documented in
//! `docs/FORMATS.md`; only the two wrist indices are interpreted here.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, overlap_fraction, AxisBox, Point};
use crate::head::{ContactLabel, ContactState, NUM_STATES};
use crate::io;
use crate::tensor::sigmoid;

pub const NUM_JOINTS: usize = 25;
pub const RIGHT_WRIST: usize = 4;
pub const LEFT_WRIST: usize = 7;
pub const SELF_DIMS: usize = NUM_JOINTS - 1;
pub const OTHER_DIMS: usize = NUM_JOINTS;
pub const OBJECT_DIMS: usize = 3;
pub const FEATURE_DIMS: usize = SELF_DIMS + OTHER_DIMS + OBJECT_DIMS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Joint {
    pub fn visible(&self) -> bool {
        self.confidence > 0.0
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

impl From<[f64; 3]> for Joint {
    fn from([x, y, confidence]: [f64; 3]) -> Self {
        Joint { x, y, confidence }
    }
}

impl From<Joint> for [f64; 3] {
    fn from(j: Joint) -> Self {
        [j.x, j.y, j.confidence]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub person_id: u64,
    pub joints: Vec<Joint>,
}

impl PoseRecord {
    pub fn new(person_id: u64, joints: Vec<Joint>) -> Result<Self> {
        PoseRecord { person_id, joints }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.joints.len() != NUM_JOINTS {
            return Err(Error::Contract(format!(
                "person {}: expected {NUM_JOINTS} joints, got {}",
                self.person_id,
                self.joints.len()
            )));
        }
        if let Some(j) = self
            .joints
            .iter()
            .find(|j| !(0.0..=1.0).contains(&j.confidence) || !j.x.is_finite() || !j.y.is_finite())
        {
            return Err(Error::Contract(format!(
                "person {}: bad joint {:?}",
                self.person_id, j
            )));
        }
        Ok(self)
    }

    pub fn scaled(&self, s: f64) -> Self {
        PoseRecord {
            person_id: self.person_id,
            joints: self
                .joints
                .iter()
                .map(|j| Joint {
                    x: j.x * s,
                    y: j.y * s,
                    confidence: j.confidence,
                })
                .collect(),
        }
    }
}

/// One line of a keypoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePoses {
    pub image_id: String,
    #[serde(default)]
    pub poses: Vec<PoseRecord>,
}

pub fn read_keypoints(path: &Path) -> Result<HashMap<String, Vec<PoseRecord>>> {
    let mut out = HashMap::new();
    io::for_each_record(path, |r: ImagePoses, _| {
        let poses = r
            .poses
            .into_iter()
            .map(PoseRecord::validated)
            .collect::<Result<Vec<_>>>()?;
        if out.insert(r.image_id.clone(), poses).is_some() {
            return Err(Error::Contract(format!("duplicate image id `{}`", r.image_id)));
        }
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WristAssignment {
    pub pose: usize,
    pub joint: usize,
}

/// Nearest visible wrist to the hand-box center; first on ties.
pub fn assign_wrist(hand: &AxisBox, poses: &[PoseRecord]) -> Option<WristAssignment> {
    let c = hand.center();
    let mut best: Option<(WristAssignment, f64)> = None;
    for (p, pose) in poses.iter().enumerate() {
        for joint in [RIGHT_WRIST, LEFT_WRIST] {
            let j = &pose.joints[joint];
            if !j.visible() {
                continue;
            }
            let d = j.point().distance(c);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((WristAssignment { pose: p, joint }, d));
            }
        }
    }
    best.map(|(w, _)| w)
}

/// Distances from the wrist to the other 24 joints of its own pose, in
/// joint order with the wrist removed. Missing joints give 0.
pub fn self_distances(wrist: usize, pose: &PoseRecord, diagonal: f64) -> [f64; SELF_DIMS] {
    let w = pose.joints[wrist].point();
    let mut out = [0.0; SELF_DIMS];
    let others = (0..NUM_JOINTS).filter(|&j| j != wrist);
    for (slot, j) in out.iter_mut().zip(others) {
        let joint = &pose.joints[j];
        if joint.visible() {
            *slot = w.distance(joint.point()) / diagonal;
        }
    }
    out
}

/// For each joint index, the mean over the other poses of the wrist-to-joint
/// distance, skipping poses where that joint is missing.
pub fn other_person_distances(wrist: Point, others: &[&PoseRecord], diagonal: f64) -> [f64; OTHER_DIMS] {
    let mut sum = [0.0; OTHER_DIMS];
    let mut count = [0usize; OTHER_DIMS];
    for pose in others {
        for (j, joint) in pose.joints.iter().enumerate() {
            if joint.visible() {
                sum[j] += wrist.distance(joint.point()) / diagonal;
                count[j] += 1;
            }
        }
    }
    let mut out = [0.0; OTHER_DIMS];
    for j in 0..OTHER_DIMS {
        if count[j] > 0 {
            out[j] = sum[j] / count[j] as f64;
        }
    }
    out
}

/// Mean center distance, mean overlap fraction and mean IoU of the hand
/// against the detected objects.
pub fn object_relation(hand: &AxisBox, objects: &[AxisBox], diagonal: f64) -> Result<[f64; OBJECT_DIMS]> {
    if objects.is_empty() {
        return Ok([0.0; OBJECT_DIMS]);
    }
    let c = hand.center();
    let mut acc = [0.0; OBJECT_DIMS];
    for obj in objects {
        acc[0] += c.distance(obj.center()) / diagonal;
        acc[1] += overlap_fraction(hand, obj)?;
        acc[2] += iou(hand, obj);
    }
    let k = objects.len() as f64;
    Ok(acc.map(|v| v / k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineFeature {
    pub h_s: [f64; SELF_DIMS],
    pub h_p: [f64; OTHER_DIMS],
    pub h_o: [f64; OBJECT_DIMS],
}

impl BaselineFeature {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(FEATURE_DIMS);
        h.extend_from_slice(&self.h_s);
        h.extend_from_slice(&self.h_p);
        h.extend_from_slice(&self.h_o);
        h
    }
}

/// Builds the feature for one hand, or `None` when no pose has a visible
/// wrist.
pub fn hand_feature(
    hand: &AxisBox,
    poses: &[PoseRecord],
    objects: &[AxisBox],
    width: f64,
    height: f64,
) -> Result<Option<BaselineFeature>> {
    let Some(w) = assign_wrist(hand, poses) else {
        return Ok(None);
    };
    let diagonal = width.hypot(height);
    if !(diagonal > 0.0) {
        return Err(Error::Contract(format!("image size {width}×{height} has no extent")));
    }
    let own = &poses[w.pose];
    let others: Vec<&PoseRecord> = poses
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != w.pose)
        .map(|(_, p)| p)
        .collect();
    Ok(Some(BaselineFeature {
        h_s: self_distances(w.joint, own, diagonal),
        h_p: other_person_distances(own.joints[w.joint].point(), &others, diagonal),
        h_o: object_relation(hand, objects, diagonal)?,
    }))
}

/// A hand from the annotation set together with its feature.
#[derive(Debug, Clone)]
pub struct HandSample {
    pub image_id: String,
    pub hand_index: usize,
    pub bbox: AxisBox,
    pub feature: BaselineFeature,
    pub label: ContactLabel,
}

/// Features for every hand with an assignable wrist, plus the number of
/// hands skipped.
pub fn collect_samples(
    images: &[ImageRecord],
    keypoints: &HashMap<String, Vec<PoseRecord>>,
) -> Result<(Vec<HandSample>, usize)> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for img in images {
        let poses = keypoints.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]);
        for (i, hand) in img.hands.iter().enumerate() {
            let bbox = hand.bbox();
            match hand_feature(&bbox, poses, &img.objects, img.width, img.height)? {
                Some(feature) => samples.push(HandSample {
                    image_id: img.image_id.clone(),
                    hand_index: i,
                    bbox,
                    feature,
                    label: hand.contact,
                }),
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} hand(s) had no visible wrist and were skipped");
    }
    Ok((samples, skipped))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { epochs: 2000, lr: 0.5 }
    }
}

/// Logistic regression on standardised inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub trained: bool,
}

impl LogisticModel {
    pub fn untrained(dims: usize) -> Self {
        LogisticModel {
            weights: vec![0.0; dims],
            bias: 0.0,
            mean: vec![0.0; dims],
            scale: vec![1.0; dims],
            trained: false,
        }
    }

    pub fn logit(&self, h: &[f64]) -> f64 {
        self.bias
            + h.iter()
                .zip(&self.weights)
                .zip(self.mean.iter().zip(&self.scale))
                .map(|((x, w), (m, s))| w * (x - m) / s)
                .sum::<f64>()
    }

    pub fn predict(&self, h: &[f64]) -> f64 {
        sigmoid(self.logit(h))
    }

    /// Full-batch gradient descent on the mean BCE.
    pub fn fit(xs: &[&[f64]], ys: &[f64], cfg: &BaselineConfig) -> Self {
        let dims = xs.first().map_or(0, |x| x.len());
        let mut model = LogisticModel::untrained(dims);
        if xs.is_empty() {
            return model;
        }
        let n = xs.len() as f64;
        for d in 0..dims {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
            model.mean[d] = mean;
            model.scale[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| (0..dims).map(|d| (x[d] - model.mean[d]) / model.scale[d]).collect())
            .collect();
        let mut gw = vec![0.0; dims];
        for _ in 0..cfg.epochs {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (zi, &y) in z.iter().zip(ys) {
                let s = model.bias + zi.iter().zip(&model.weights).map(|(a, w)| a * w).sum::<f64>();
                let r = sigmoid(s) - y;
                gb += r;
                for (g, a) in gw.iter_mut().zip(zi) {
                    *g += r * a;
                }
            }
            model.bias -= cfg.lr * gb / n;
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * g / n;
            }
        }
        model.trained = true;
        model
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub states: Vec<LogisticModel>,
}

impl BaselineModel {
    pub fn predict(&self, h: &[f64]) -> [f64; NUM_STATES] {
        std::array::from_fn(|s| self.states[s].predict(h))
    }
}

/// Fits one model per state, using only the examples whose label for that
/// state is not Unsure.
pub fn train_baseline(samples: &[(Vec<f64>, ContactLabel)], cfg: &BaselineConfig) -> BaselineModel {
    let dims = samples.first().map_or(FEATURE_DIMS, |(h, _)| h.len());
    let states = ContactState::ALL
        .iter()
        .map(|&state| {
            let (xs, ys): (Vec<&[f64]>, Vec<f64>) = samples
                .iter()
                .filter_map(|(h, l)| l.get(state).target().map(|t| (h.as_slice(), t)))
                .unzip();
            if xs.is_empty() {
                log::warn!("state {} has no usable labels; its model stays untrained", state.name());
                LogisticModel::untrained(dims)
            } else {
                LogisticModel::fit(&xs, &ys, cfg)
            }
        })
        .collect();
    BaselineModel { states }
}

pub fn predict_baseline(model: &BaselineModel, h: &[f64]) -> [f64; NUM_STATES] {
    model.predict(h)
}

/// Per-state accuracy at threshold 0.5 over non-Unsure labels; `None` for
/// states without any.
pub fn accuracy(model: &BaselineModel, samples: &[(Vec<f64>, ContactLabel)]) -> [Option<f64>; NUM_STATES] {
    std::array::from_fn(|s| {
        let state = ContactState::ALL[s];
        let mut total = 0usize;
        let mut correct = 0usize;
        for (h, l) in samples {
            if let Some(t) = l.get(state).target() {
                total += 1;
                if (model.states[s].predict(h) > 0.5) == (t > 0.5) {
                    correct += 1;
                }
            }
        }
        (total > 0).then(|| correct as f64 / total as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::TriState;

    fn pose_at(id: u64, x: f64, y: f64) -> PoseRecord {
        PoseRecord::new(id, vec![Joint::from([x, y, 1.0]); NUM_JOINTS]).unwrap()
    }

    fn bx(a: [f64; 4]) -> AxisBox {
        AxisBox::try_from(a).unwrap()
    }

    #[test]
    fn assign_wrist_examples() {
        let hand = bx([0.0, 0.0, 10.0, 10.0]);
        let mut p = pose_at(0, 100.0, 100.0);
        p.joints[LEFT_WRIST] = Joint::from([5.0, 5.0, 0.9]);
        assert_eq!(
            assign_wrist(&hand, &[p]),
            Some(WristAssignment { pose: 0, joint: LEFT_WRIST })
        );

        let near = pose_at(0, 5.0, 10.0);
        let far = pose_at(1, 5.0, 55.0);
        assert_eq!(assign_wrist(&hand, &[far, near]).unwrap().pose, 1);

        let mut blind = pose_at(0, 5.0, 5.0);
        blind.joints[LEFT_WRIST].confidence = 0.0;
        blind.joints[RIGHT_WRIST].confidence = 0.0;
        assert_eq!(assign_wrist(&hand, &[blind]), None);
    }

    #[test]
    fn self_distance_examples() {
        let p = pose_at(0, 1.0, 1.0);
        assert_eq!(self_distances(RIGHT_WRIST, &p, 5.0), [0.0; SELF_DIMS]);
        let mut q = pose_at(0, 0.0, 0.0);
        q.joints[0] = Joint::from([3.0, 4.0, 1.0]);
        let d = self_distances(RIGHT_WRIST, &q, 5.0);
        assert_eq!(d[0], 1.0);
        assert_eq!(d.len(), 24);
    }

    #[test]
    fn other_person_examples() {
        let w = Point::new(0.0, 0.0);
        assert_eq!(other_person_distances(w, &[], 1.0), [0.0; OTHER_DIMS]);
        let a = pose_at(1, 0.2, 0.0);
        let b = pose_at(2, 0.4, 0.0);
        assert_eq!(other_person_distances(w, &[&a], 1.0)[3], 0.2);
        let mean = other_person_distances(w, &[&a, &b], 1.0);
        assert!((mean[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn object_relation_examples() {
        let hand = bx([0.0, 0.0, 10.0, 10.0]);
        assert_eq!(object_relation(&hand, &[], 1.0).unwrap(), [0.0; 3]);
        assert_eq!(object_relation(&hand, &[hand], 1.0).unwrap(), [0.0, 1.0, 1.0]);
    }

    #[test]
    fn untrained_state_predicts_half() {
        let mut label = ContactLabel::all(TriState::Yes);
        label.states[2] = TriState::Unsure;
        let samples = vec![(vec![1.0; FEATURE_DIMS], label)];
        let m = train_baseline(&samples, &BaselineConfig { epochs: 10, lr: 0.1 });
        assert!(!m.states[2].trained);
        assert_eq!(m.predict(&[7.0; FEATURE_DIMS])[2], 0.5);
        assert_eq!(LogisticModel::untrained(3).predict(&[1.0, -2.0, 5.0]), 0.5);
    }

    #[test]
    fn pose_record_rejects_wrong_joint_count() {
        assert!(PoseRecord::new(0, vec![Joint::from([0.0, 0.0, 1.0]); 24]).is_err());
        let json = r#"{"person_id":3,"joints":[[1,2,0.5]]}"#;
        let p: PoseRecord = serde_json::from_str(json).unwrap();
        assert!(p.validated().is_err());
    }
}
