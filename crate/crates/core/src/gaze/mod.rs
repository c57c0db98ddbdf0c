//! Gaze data: raw recordings, scanpaths, saccade detection and per-saccade
//! feature extraction.

mod detect;
mod features;
mod vigor;

pub use detect::{detect_saccades, smoothed_velocities, DetectionParams};
pub use features::{
    direction_change, extract_features, Channel, SaccadeFeatures, SaccadeType,
};
pub use vigor::{fit_vigor_rate, VigorFit};
pub(crate) use features::wrap_degrees;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t_ms: f64,
    pub x: f64,
    pub y: f64,
}

/// Raw eye-tracker samples for one viewer on one image. Positions are in
/// degrees of visual angle.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeRecording {
    samples: Vec<GazeSample>,
    sampling_rate: f64,
    pub subject_id: String,
    pub image_id: String,
}

impl GazeRecording {
    pub fn new(
        samples: Vec<GazeSample>,
        sampling_rate: f64,
        subject_id: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        if !(sampling_rate.is_finite() && sampling_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sampling rate must be positive, got {sampling_rate}"
            )));
        }
        if samples.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "recording needs at least 3 samples, got {}",
                samples.len()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if !(s.t_ms.is_finite() && s.x.is_finite() && s.y.is_finite()) {
                return Err(Error::InvalidInput(format!("sample {i} is not finite")));
            }
            if i > 0 && s.t_ms <= samples[i - 1].t_ms {
                return Err(Error::InvalidInput(format!(
                    "timestamps must be strictly increasing (sample {i})"
                )));
            }
        }
        Ok(Self {
            samples,
            sampling_rate,
            subject_id: subject_id.into(),
            image_id: image_id.into(),
        })
    }

    pub fn samples(&self) -> &[GazeSample] {
        &self.samples
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn sample_period_ms(&self) -> f64 {
        1000.0 / self.sampling_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub duration_ms: f64,
    /// Time of the first fixation sample; only known for detected scanpaths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_ms: Option<f64>,
}

impl Fixation {
    pub fn new(x: f64, y: f64, duration_ms: f64) -> Self {
        Self {
            x,
            y,
            duration_ms,
            onset_ms: None,
        }
    }

    pub fn offset_ms(&self) -> Option<f64> {
        self.onset_ms.map(|t| t + self.duration_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    pub fixations: Vec<Fixation>,
    pub subject_id: String,
    pub image_id: String,
}

impl Scanpath {
    pub fn new(
        fixations: Vec<Fixation>,
        subject_id: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Self {
        Self {
            fixations,
            subject_id: subject_id.into(),
            image_id: image_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    /// Checks the invariants needed for likelihood evaluation: at least two
    /// fixations, finite positions and positive durations.
    pub fn validate(&self) -> Result<()> {
        if self.fixations.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "scanpath {}/{} has {} fixations; at least 2 are required",
                self.subject_id,
                self.image_id,
                self.fixations.len()
            )));
        }
        for (i, f) in self.fixations.iter().enumerate() {
            if !(f.x.is_finite() && f.y.is_finite()) {
                return Err(Error::InvalidInput(format!("fixation {i} position is not finite")));
            }
            if !(f.duration_ms.is_finite() && f.duration_ms > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "fixation {i} duration must be positive, got {}",
                    f.duration_ms
                )));
            }
        }
        Ok(())
    }
}
