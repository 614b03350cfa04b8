//! Joint hand-detection and contact-state average precision.
//!
//! For each contact state the ground truth is the set of hands labelled Yes
//! for that state. A detection is scored by `det_score × contact_prob`; it
//! is a true positive when its best-overlapping Yes hand has IoU > 0.5 and
//! has not been claimed by a higher-scored detection. Detections whose best
//! overlapping hand (over all hands, IoU > 0.5) is Unsure for the state are
//! dropped before ranking.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, AxisBox};
use crate::head::{ContactState, TriState, NUM_STATES};
use crate::io;

/// IoU a detection must strictly exceed to match a ground-truth hand.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: AxisBox,
    pub det_score: f64,
    pub contact_probs: [f64; NUM_STATES],
}

impl DetectionRecord {
    pub fn validated(self) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.det_score) {
            return Err(Error::Contract(format!(
                "det_score {} outside [0, 1]",
                self.det_score
            )));
        }
        if let Some(p) = self.contact_probs.iter().find(|&&p| !in_unit(p)) {
            return Err(Error::Contract(format!("contact_probs entry {p} outside [0, 1]")));
        }
        Ok(self)
    }

    pub fn joint_score(&self, state: ContactState) -> f64 {
        self.det_score * self.contact_probs[state.index()]
    }
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    io::for_each_record(path, |r: DetectionRecord, _| {
        out.push(r.validated()?);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub state: &'static str,
    pub num_gt: usize,
    /// Detections removed for overlapping an Unsure hand.
    pub num_ignored: usize,
    pub points: Vec<PrPoint>,
    /// `None` when there is no ground truth for the state.
    pub ap: Option<f64>,
}

struct GtImage<'a> {
    boxes: Vec<AxisBox>,
    labels: Vec<TriState>,
    _record: &'a ImageRecord,
}

fn index_ground_truth(gts: &[ImageRecord], state: ContactState) -> Result<HashMap<&str, GtImage<'_>>> {
    let mut index = HashMap::with_capacity(gts.len());
    for rec in gts {
        let img = GtImage {
            boxes: rec.hands.iter().map(|h| h.bbox()).collect(),
            labels: rec.hands.iter().map(|h| h.contact.get(state)).collect(),
            _record: rec,
        };
        if index.insert(rec.image_id.as_str(), img).is_some() {
            return Err(Error::Evaluation(format!(
                "duplicate ground-truth image id `{}`",
                rec.image_id
            )));
        }
    }
    Ok(index)
}

/// Index and IoU of the best-overlapping box among `candidates` (first on
/// ties), if any.
fn best_match(det: &AxisBox, boxes: &[AxisBox], candidates: impl Iterator<Item = usize>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let v = iou(det, &boxes[i]);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

pub fn evaluate_state(
    dets: &[DetectionRecord],
    gts: &[ImageRecord],
    state: ContactState,
) -> Result<PrCurve> {
    let index = index_ground_truth(gts, state)?;
    let num_gt = index
        .values()
        .map(|g| g.labels.iter().filter(|&&l| l == TriState::Yes).count())
        .sum();

    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(dets.len());
    let mut num_ignored = 0;
    for (i, det) in dets.iter().enumerate() {
        let img = index
            .get(det.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(det.image_id.clone()))?;
        let overlaps_unsure = best_match(&det.bbox, &img.boxes, 0..img.boxes.len())
            .is_some_and(|(h, v)| v > IOU_THRESHOLD && img.labels[h] == TriState::Unsure);
        if overlaps_unsure {
            num_ignored += 1;
        } else {
            ranked.push((i, det.joint_score(state)));
        }
    }
    // stable: equal scores keep input order
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut claimed: HashMap<&str, Vec<bool>> = HashMap::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(ranked.len());
    for &(i, _) in &ranked {
        let det = &dets[i];
        let img = &index[det.image_id.as_str()];
        let yes = (0..img.boxes.len()).filter(|&h| img.labels[h] == TriState::Yes);
        let taken = claimed
            .entry(det.image_id.as_str())
            .or_insert_with(|| vec![false; img.boxes.len()]);
        match best_match(&det.bbox, &img.boxes, yes) {
            Some((h, v)) if v > IOU_THRESHOLD && !taken[h] => {
                taken[h] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        if num_gt > 0 {
            points.push(PrPoint {
                recall: tp as f64 / num_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
    }
    let ap = (num_gt > 0).then(|| average_precision(&points));
    Ok(PrCurve {
        state: state.name(),
        num_gt,
        num_ignored,
        points,
        ap,
    })
}

/// Area under the precision envelope, where the precision at recall `r` is
/// the best precision at any recall `≥ r`.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut recall = Vec::with_capacity(points.len() + 2);
    let mut precision = Vec::with_capacity(points.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    for p in points {
        recall.push(p.recall);
        precision.push(p.precision);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (0..recall.len() - 1)
        .filter(|&i| recall[i + 1] != recall[i])
        .map(|i| (recall[i + 1] - recall[i]) * precision[i + 1])
        .sum()
}

/// Mean over the states whose AP is defined.
pub fn mean_ap(curves: &[PrCurve]) -> Result<f64> {
    let defined: Vec<f64> = curves.iter().filter_map(|c| c.ap).collect();
    if defined.is_empty() {
        return Err(Error::Evaluation(
            "no contact state has any ground truth; mAP is undefined".into(),
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub per_state: Vec<PrCurve>,
    pub map: f64,
}

pub fn evaluate(dets: &[DetectionRecord], gts: &[ImageRecord]) -> Result<EvalSummary> {
    let per_state = ContactState::ALL
        .iter()
        .map(|&s| evaluate_state(dets, gts, s))
        .collect::<Result<Vec<_>>>()?;
    let map = mean_ap(&per_state)?;
    Ok(EvalSummary { per_state, map })
}

/// Minimal SVG of the four PR curves.
pub fn render_pr_svg(curves: &[PrCurve]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
    let mut svg = String::new();
    let full = SIZE + 2.0 * PAD;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">recall</text>"#,
        PAD + SIZE / 2.0,
        full - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})">precision</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for (k, c) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", PAD + p.recall * SIZE, PAD + (1.0 - p.precision) * SIZE))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let label = match c.ap {
            Some(ap) => format!("{} AP {:.4}", c.state, ap),
            None => format!("{} AP n/a", c.state),
        };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{label}</text>"#,
            PAD + 8.0,
            PAD + 16.0 + 14.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
