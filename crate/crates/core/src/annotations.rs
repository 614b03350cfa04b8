//! Per-image hand annotations and dataset tallies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{envelope, AxisBox, Quadrilateral};
use crate::head::{ContactLabel, TriState, NUM_STATES};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandAnnotation {
    pub quad: Quadrilateral,
    pub contact: ContactLabel,
}

impl HandAnnotation {
    /// Axis-parallel ground-truth box.
    pub fn bbox(&self) -> AxisBox {
        envelope(&self.quad)
    }
}

/// One annotated image plus the object boxes detected in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub height: f64,
    pub width: f64,
    #[serde(default)]
    pub hands: Vec<HandAnnotation>,
    #[serde(default)]
    pub objects: Vec<AxisBox>,
}

impl ImageRecord {
    /// Checks the image size and clamps all geometry into the image.
    pub fn validated(mut self) -> Result<Self> {
        if !(self.height > 0.0 && self.width > 0.0) {
            return Err(Error::Contract(format!(
                "image `{}`: height and width must be positive, got {}×{}",
                self.image_id, self.height, self.width
            )));
        }
        let (w, h) = (self.width, self.height);
        for hand in &mut self.hands {
            hand.quad = Quadrilateral::new(*hand.quad.clamp(w, h).vertices())?;
        }
        for obj in &mut self.objects {
            *obj = obj.clamp(w, h);
        }
        Ok(self)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    io::for_each_record(path, |r: ImageRecord, _| {
        out.push(r.validated()?);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StateTally {
    pub yes: usize,
    pub no: usize,
    pub unsure: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub hands: usize,
    pub per_state: [StateTally; NUM_STATES],
}

pub fn dataset_stats(records: &[ImageRecord]) -> DatasetStats {
    let mut stats = DatasetStats {
        images: records.len(),
        ..DatasetStats::default()
    };
    for hand in records.iter().flat_map(|r| &r.hands) {
        stats.hands += 1;
        for (tally, s) in stats.per_state.iter_mut().zip(hand.contact.states) {
            match s {
                TriState::Yes => tally.yes += 1,
                TriState::No => tally.no += 1,
                TriState::Unsure => tally.unsure += 1,
            }
        }
    }
    stats
}
