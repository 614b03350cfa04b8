//! Synthetic hand/union feature maps with planted contact rules.
//!
//! Channels are split into four equal blocks: self marker, person marker,
//! object marker, grasp marker. A marker is `amplitude` added to every
//! channel of its block at one spatial location.
//!
//! * Self-Contact: the hand map carries a self marker.
//! * Other-Person-Contact: some union map carries a person marker.
//! * Object-Contact: some union map carries an object marker at a location
//!   where the hand map carries a grasp marker (or anywhere, under
//!   [`PlantedRule::Anywhere`]).
//! * No-Contact: none of the above.
//!
//! The hand carries a grasp marker whenever it touches a person or an
//! object, so No-Contact is decidable from the hand map alone. Object
//! markers away from the grasp location are added as distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{HandAnnotation, ImageRecord};
use crate::attention::FeatureMap;
use crate::error::{Error, Result};
use crate::features::{Example, FeatureRecord};
use crate::geometry::{AxisBox, Quadrilateral};
use crate::head::{ContactLabel, ContactState, TriState, NUM_STATES};

const BLOCKS: usize = 4;
const SELF_BLOCK: usize = 0;
const PERSON_BLOCK: usize = 1;
const OBJECT_BLOCK: usize = 2;
const GRASP_BLOCK: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedRule {
    /// Object marker must sit at the grasp location.
    #[default]
    Located,
    /// Any object marker plus any grasp marker.
    Anywhere,
}

impl std::str::FromStr for PlantedRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "located" => Ok(Self::Located),
            "anywhere" => Ok(Self::Anywhere),
            _ => Err(Error::Config(format!("unknown planted rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub rule: PlantedRule,
    pub noise_std: f64,
    pub amplitude: f64,
    pub samples: usize,
    /// Probability of Self, Other-Person and Object contact (independent).
    pub p_self: f64,
    pub p_other: f64,
    pub p_object: f64,
    /// Probability that a state label is replaced by Unsure.
    pub unsure_rate: f64,
    /// Probability of a misplaced object marker.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 4,
            d: 16,
            k_min: 1,
            k_max: 3,
            rule: PlantedRule::Located,
            noise_std: 0.1,
            amplitude: 3.0,
            samples: 2000,
            p_self: 0.3,
            p_other: 0.3,
            p_object: 0.4,
            unsure_rate: 0.05,
            distractor_rate: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_self", self.p_self)?;
        prob("p_other", self.p_other)?;
        prob("p_object", self.p_object)?;
        prob("unsure_rate", self.unsure_rate)?;
        prob("distractor_rate", self.distractor_rate)?;
        if self.d == 0 || !self.d.is_multiple_of(BLOCKS) {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of {BLOCKS}",
                self.d
            )));
        }
        if self.n < 2 {
            return Err(Error::Config(format!("n = {} must be at least 2", self.n)));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "object range {}..={} must be nonempty and start at 1 or more",
                self.k_min, self.k_max
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std = {} is invalid", self.noise_std)));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("amplitude = {} must be positive", self.amplitude)));
        }
        Ok(())
    }

    /// Expected Yes rate of each state among non-Unsure labels.
    pub fn target_rates(&self) -> [f64; NUM_STATES] {
        [
            (1.0 - self.p_self) * (1.0 - self.p_other) * (1.0 - self.p_object),
            self.p_self,
            self.p_other,
            self.p_object,
        ]
    }

    fn block(&self) -> usize {
        self.d / BLOCKS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub example: Example,
    /// Labels before Unsure masking.
    pub truth: [bool; NUM_STATES],
}

struct Canvas {
    data: Vec<f64>,
    d: usize,
    block: usize,
}

impl Canvas {
    fn new(n: usize, d: usize, block: usize) -> Self {
        Self {
            data: vec![0.0; n * d],
            d,
            block,
        }
    }

    fn mark(&mut self, loc: usize, which: usize, amplitude: f64) {
        let start = loc * self.d + which * self.block;
        for v in &mut self.data[start..start + self.block] {
            *v += amplitude;
        }
    }

    fn finish<R: Rng>(mut self, rng: &mut R, noise: Option<&Normal<f64>>, n: usize) -> Result<FeatureMap> {
        if let Some(dist) = noise {
            for v in &mut self.data {
                *v += dist.sample(rng);
            }
        }
        FeatureMap::from_vec(n, self.d, self.data)
    }
}

fn other_location<R: Rng>(rng: &mut R, n: usize, avoid: usize) -> usize {
    let l = rng.random_range(0..n - 1);
    if l >= avoid {
        l + 1
    } else {
        l
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise_std > 0.0)
        .then(|| Normal::new(0.0, spec.noise_std))
        .transpose()
        .map_err(|e| Error::Config(e.to_string()))?;
    let (n, d, block, amp) = (spec.n, spec.d, spec.block(), spec.amplitude);
    let mut out = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let is_self = rng.random_bool(spec.p_self);
        let is_other = rng.random_bool(spec.p_other);
        let is_object = rng.random_bool(spec.p_object);
        let k = rng.random_range(spec.k_min..=spec.k_max);

        let mut hand = Canvas::new(n, d, block);
        let mut unions: Vec<Canvas> = (0..k).map(|_| Canvas::new(n, d, block)).collect();
        if is_self {
            hand.mark(rng.random_range(0..n), SELF_BLOCK, amp);
        }
        let grasp = (is_other || is_object).then(|| rng.random_range(0..n));
        if let Some(g) = grasp {
            hand.mark(g, GRASP_BLOCK, amp);
        }
        if is_other {
            let u = rng.random_range(0..k);
            unions[u].mark(rng.random_range(0..n), PERSON_BLOCK, amp);
        }
        if is_object {
            let u = rng.random_range(0..k);
            let loc = match (spec.rule, grasp) {
                (PlantedRule::Located, Some(g)) => g,
                _ => rng.random_range(0..n),
            };
            unions[u].mark(loc, OBJECT_BLOCK, amp);
        }
        if rng.random_bool(spec.distractor_rate) {
            let u = rng.random_range(0..k);
            let placement = match (spec.rule, grasp) {
                (_, None) => Some(rng.random_range(0..n)),
                (PlantedRule::Located, Some(g)) => Some(other_location(&mut rng, n, g)),
                // any object marker would flip the label
                (PlantedRule::Anywhere, Some(_)) => None,
            };
            if let Some(loc) = placement {
                unions[u].mark(loc, OBJECT_BLOCK, amp);
            }
        }

        let truth = [!(is_self || is_other || is_object), is_self, is_other, is_object];
        let states = truth.map(|t| {
            if rng.random_bool(spec.unsure_rate) {
                TriState::Unsure
            } else {
                TriState::from_bool(t)
            }
        });
        let hand = hand.finish(&mut rng, noise.as_ref(), n)?;
        let unions = unions
            .into_iter()
            .map(|u| u.finish(&mut rng, noise.as_ref(), n))
            .collect::<Result<Vec<_>>>()?;
        out.push(SyntheticSample {
            example: Example {
                hand,
                unions,
                label: ContactLabel::new(states),
            },
            truth,
        });
    }
    Ok(out)
}

fn block_mean(map: &FeatureMap, loc: usize, which: usize, block: usize) -> f64 {
    let row = map.row(loc);
    row[which * block..(which + 1) * block].iter().sum::<f64>() / block as f64
}

/// Hand-written reader of the planted rules, thresholding block means at
/// half the marker amplitude.
pub fn rule_detector(spec: &SyntheticSpec, example: &Example) -> [bool; NUM_STATES] {
    let block = spec.block();
    let cut = spec.amplitude / 2.0;
    let n = example.hand.n();
    let present = |m: &FeatureMap, loc: usize, which: usize| block_mean(m, loc, which, block) > cut;
    let is_self = (0..n).any(|l| present(&example.hand, l, SELF_BLOCK));
    let grasps: Vec<usize> = (0..n).filter(|&l| present(&example.hand, l, GRASP_BLOCK)).collect();
    let is_other = example
        .unions
        .iter()
        .any(|u| (0..n).any(|l| present(u, l, PERSON_BLOCK)));
    let is_object = match spec.rule {
        PlantedRule::Located => example
            .unions
            .iter()
            .any(|u| grasps.iter().any(|&g| present(u, g, OBJECT_BLOCK))),
        PlantedRule::Anywhere => {
            !grasps.is_empty()
                && example
                    .unions
                    .iter()
                    .any(|u| (0..n).any(|l| present(u, l, OBJECT_BLOCK)))
        }
    };
    [!(is_self || is_other || is_object), is_self, is_other, is_object]
}

/// Yes rate of each state among its non-Unsure labels.
pub fn label_marginals(samples: &[SyntheticSample]) -> [f64; NUM_STATES] {
    std::array::from_fn(|s| {
        let state = ContactState::ALL[s];
        let (yes, total) = samples
            .iter()
            .filter_map(|x| x.example.label.get(state).target())
            .fold((0.0, 0usize), |(y, t), v| (y + v, t + 1));
        if total == 0 {
            0.0
        } else {
            yes / total as f64
        }
    })
}

/// Canvas size of the pseudo-images that synthetic samples are placed on.
pub const SYNTH_IMAGE_SIZE: f64 = 64.0;
const SYNTH_HAND_BOX: [f64; 4] = [16.0, 16.0, 48.0, 48.0];

pub fn image_id(i: usize) -> String {
    format!("synth-{i:06}")
}

/// Feature-file records, one pseudo-image per sample.
pub fn to_feature_records(samples: &[SyntheticSample]) -> Vec<FeatureRecord> {
    let bbox = AxisBox::try_from(SYNTH_HAND_BOX).expect("valid constant box");
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| FeatureRecord {
            image_id: image_id(i),
            bbox,
            det_score: 1.0,
            hand: s.example.hand.clone(),
            unions: s.example.unions.clone(),
            label: Some(s.example.label),
        })
        .collect()
}

/// Matching annotation records, so inference output can be evaluated.
pub fn to_annotations(samples: &[SyntheticSample]) -> Vec<ImageRecord> {
    let bbox = AxisBox::try_from(SYNTH_HAND_BOX).expect("valid constant box");
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| ImageRecord {
            image_id: image_id(i),
            height: SYNTH_IMAGE_SIZE,
            width: SYNTH_IMAGE_SIZE,
            hands: vec![HandAnnotation {
                quad: Quadrilateral::from_box(&bbox),
                contact: s.example.label,
            }],
            objects: vec![],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_rules_are_recoverable() {
        for rule in [PlantedRule::Located, PlantedRule::Anywhere] {
            let spec = SyntheticSpec {
                noise_std: 0.0,
                samples: 500,
                rule,
                ..SyntheticSpec::default()
            };
            for s in generate(&spec).unwrap() {
                assert_eq!(rule_detector(&spec, &s.example), s.truth);
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec {
            samples: 20,
            ..SyntheticSpec::default()
        };
        let a = serde_json::to_string(&to_feature_records(&generate(&spec).unwrap())).unwrap();
        let b = serde_json::to_string(&to_feature_records(&generate(&spec).unwrap())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SyntheticSpec { d: 6, ..SyntheticSpec::default() },
            SyntheticSpec { n: 1, ..SyntheticSpec::default() },
            SyntheticSpec { k_min: 0, ..SyntheticSpec::default() },
            SyntheticSpec { p_self: 1.5, ..SyntheticSpec::default() },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}
