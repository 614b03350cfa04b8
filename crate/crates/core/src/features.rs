//! Pooled feature records: one hand, its union regions, and optionally its
//! contact label.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::AxisBox;
use crate::head::ContactLabel;
use crate::io;

/// A training or inference example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub hand: FeatureMap,
    pub unions: Vec<FeatureMap>,
    pub label: ContactLabel,
}

/// One line of a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: AxisBox,
    #[serde(default = "one")]
    pub det_score: f64,
    pub hand: FeatureMap,
    #[serde(default)]
    pub unions: Vec<FeatureMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ContactLabel>,
}

fn one() -> f64 {
    1.0
}

impl FeatureRecord {
    pub fn validated(self) -> Result<Self> {
        if !(0.0..=1.0).contains(&self.det_score) {
            return Err(Error::Contract(format!(
                "det_score {} outside [0, 1]",
                self.det_score
            )));
        }
        let shape = self.hand.tensor().shape();
        if let Some(u) = self.unions.iter().find(|u| u.tensor().shape() != shape) {
            return Err(Error::dim("union features", u.tensor().shape(), shape));
        }
        Ok(self)
    }

    /// Converts to an example; unlabelled records become all-Unsure.
    pub fn to_example(&self) -> Example {
        Example {
            hand: self.hand.clone(),
            unions: self.unions.clone(),
            label: self
                .label
                .unwrap_or_else(|| ContactLabel::all(crate::head::TriState::Unsure)),
        }
    }
}

pub fn for_each_feature<F>(path: &Path, mut f: F) -> Result<()>
where
    F: FnMut(FeatureRecord, usize) -> Result<()>,
{
    io::for_each_record(path, |r: FeatureRecord, line| f(r.validated()?, line))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    for_each_feature(path, |r, _| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}
