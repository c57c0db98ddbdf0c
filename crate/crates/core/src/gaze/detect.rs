//! Velocity-threshold saccade detection with a median-based noise estimate
//! and an elliptic threshold criterion.

use serde::{Deserialize, Serialize};

use super::{Fixation, GazeRecording, Scanpath};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionParams {
    /// Threshold in multiples of the median-based velocity standard deviation.
    pub vel_threshold_multiplier: f64,
    pub min_saccade_duration_ms: f64,
    /// Floor for the per-axis velocity standard deviation (deg/s). Noise-free
    /// traces have a median-based estimate of exactly zero.
    pub min_velocity_sd: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            vel_threshold_multiplier: 6.0,
            min_saccade_duration_ms: 6.0,
            min_velocity_sd: 1.0,
        }
    }
}

/// Per-sample velocity (deg/s) from the 5-point moving-average difference
/// `(x[n+2] + x[n+1] − x[n−1] − x[n−2]) · rate / 6`; the second and
/// second-to-last samples use a plain central difference, the endpoints are 0.
pub fn smoothed_velocities(rec: &GazeRecording) -> Vec<(f64, f64)> {
    let s = rec.samples();
    let n = s.len();
    let rate = rec.sampling_rate();
    let mut v = vec![(0.0, 0.0); n];
    for i in 1..n.saturating_sub(1) {
        v[i] = if i >= 2 && i + 2 < n {
            (
                (s[i + 2].x + s[i + 1].x - s[i - 1].x - s[i - 2].x) * rate / 6.0,
                (s[i + 2].y + s[i + 1].y - s[i - 1].y - s[i - 2].y) * rate / 6.0,
            )
        } else {
            (
                (s[i + 1].x - s[i - 1].x) * rate / 2.0,
                (s[i + 1].y - s[i - 1].y) * rate / 2.0,
            )
        };
    }
    v
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `sqrt(median(v²) − median(v)²)`, floored at `floor`.
fn median_sd(v: impl Iterator<Item = f64> + Clone, floor: f64) -> f64 {
    let mut sq: Vec<f64> = v.clone().map(|x| x * x).collect();
    let mut raw: Vec<f64> = v.collect();
    let m = median(&mut raw);
    let var = median(&mut sq) - m * m;
    var.max(0.0).sqrt().max(floor)
}

/// Segments a recording into fixations.
///
/// Maximal runs of samples above the elliptic threshold lasting at least
/// `min_saccade_duration_ms` are saccades; every non-empty interval between
/// them becomes a fixation at the mean sample position with duration equal to
/// the interval length.
pub fn detect_saccades(rec: &GazeRecording, params: &DetectionParams) -> Result<Scanpath> {
    let v = smoothed_velocities(rec);
    let eta_x = params.vel_threshold_multiplier * median_sd(v.iter().map(|p| p.0), params.min_velocity_sd);
    let eta_y = params.vel_threshold_multiplier * median_sd(v.iter().map(|p| p.1), params.min_velocity_sd);
    if !(eta_x > 0.0 && eta_y > 0.0) {
        return Err(Error::InvalidInput(format!(
            "velocity thresholds must be positive (eta_x={eta_x}, eta_y={eta_y})"
        )));
    }

    let above: Vec<bool> = v
        .iter()
        .map(|&(vx, vy)| (vx / eta_x).powi(2) + (vy / eta_y).powi(2) > 1.0)
        .collect();

    let period = rec.sample_period_ms();
    let min_len = params.min_saccade_duration_ms;
    let mut saccades: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < above.len() {
        if above[i] {
            let start = i;
            while i < above.len() && above[i] {
                i += 1;
            }
            if (i - start) as f64 * period >= min_len {
                saccades.push((start, i));
            }
        } else {
            i += 1;
        }
    }

    let samples = rec.samples();
    let mut fixations = Vec::with_capacity(saccades.len() + 1);
    let mut push_interval = |lo: usize, hi: usize| {
        if hi > lo {
            let n = (hi - lo) as f64;
            let (sx, sy) = samples[lo..hi]
                .iter()
                .fold((0.0, 0.0), |(ax, ay), s| (ax + s.x, ay + s.y));
            fixations.push(Fixation {
                x: sx / n,
                y: sy / n,
                duration_ms: n * period,
                onset_ms: Some(samples[lo].t_ms),
            });
        }
    };
    let mut cursor = 0;
    for &(start, end) in &saccades {
        push_interval(cursor, start);
        cursor = end;
    }
    push_interval(cursor, samples.len());

    if fixations.len() < 2 {
        return Err(Error::DegenerateRecording(format!(
            "{}/{}: {} fixation(s) detected, at least 2 required",
            rec.subject_id,
            rec.image_id,
            fixations.len()
        )));
    }
    Ok(Scanpath::new(fixations, rec.subject_id.clone(), rec.image_id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::GazeSample;

    /// 1 kHz trace along x: for each `(still, target)` segment, `still`
    /// samples at the current position followed by a linear ramp at `speed`
    /// deg/s to `target`.
    pub(crate) fn ramp_recording(segments: &[(usize, f64)], speed: f64) -> GazeRecording {
        let mut samples = Vec::new();
        let mut t = 0.0;
        let mut x = 0.0;
        let step = speed / 1000.0;
        for &(still, target) in segments {
            for _ in 0..still {
                samples.push(GazeSample { t_ms: t, x, y: 0.0 });
                t += 1.0;
            }
            while (target - x).abs() > 1e-12 {
                x = if target > x { (x + step).min(target) } else { (x - step).max(target) };
                samples.push(GazeSample { t_ms: t, x, y: 0.0 });
                t += 1.0;
            }
        }
        GazeRecording::new(samples, 1000.0, "s", "img").unwrap()
    }

    #[test]
    fn constant_position_is_degenerate() {
        let samples = (0..500)
            .map(|i| GazeSample { t_ms: i as f64, x: 1.0, y: 2.0 })
            .collect();
        let rec = GazeRecording::new(samples, 1000.0, "s", "img").unwrap();
        let err = detect_saccades(&rec, &DetectionParams::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateRecording(_)));
    }

    #[test]
    fn single_ramp_gives_one_saccade() {
        // 200 ms still at 0, 20 ms ramp at 250 deg/s to 5 deg, 200 ms still.
        let rec = ramp_recording(&[(200, 5.0), (200, 5.0)], 250.0);
        let path = detect_saccades(&rec, &DetectionParams::default()).unwrap();
        assert_eq!(path.len(), 2);
        let a = (path.fixations[1].x - path.fixations[0].x).hypot(path.fixations[1].y - path.fixations[0].y);
        assert!((a - 5.0).abs() < 0.1, "{a}");

        // Hand-computed trace: x[k] = 0.25 (k − 199) on the ramp k = 200..=219,
        // so the smoothed velocity is non-zero exactly for samples 198..=220.
        let v = smoothed_velocities(&rec);
        assert_eq!(v[197], (0.0, 0.0));
        assert!((v[198].0 - 0.25 * 1000.0 / 6.0).abs() < 1e-9);
        assert!((v[210].0 - 250.0).abs() < 1e-9);
        assert!((v[220].0 - 0.25 * 1000.0 / 6.0).abs() < 1e-9);
        assert_eq!(v[221], (0.0, 0.0));
        assert_eq!(path.fixations[0].duration_ms, 198.0);
        assert_eq!(path.fixations[1].onset_ms, Some(221.0));
    }

    #[test]
    fn two_ramps_give_three_fixations() {
        let rec = ramp_recording(&[(200, 5.0), (300, 0.0), (200, 0.0)], 250.0);
        let path = detect_saccades(&rec, &DetectionParams::default()).unwrap();
        assert_eq!(path.len(), 3);
        assert!((path.fixations[1].x - 5.0).abs() < 1e-12);
        assert!(path.fixations[2].x.abs() < 1e-12);
    }

    #[test]
    fn short_runs_are_not_saccades() {
        let rec = ramp_recording(&[(200, 5.0), (200, 5.0)], 250.0);
        let params = DetectionParams {
            min_saccade_duration_ms: 40.0,
            ..DetectionParams::default()
        };
        assert!(matches!(
            detect_saccades(&rec, &params),
            Err(Error::DegenerateRecording(_))
        ));
    }

    #[test]
    fn translation_invariance() {
        let rec = ramp_recording(&[(150, 4.0), (250, -3.0), (180, -3.0)], 300.0);
        let shifted: Vec<GazeSample> = rec
            .samples()
            .iter()
            .map(|s| GazeSample { x: s.x + 7.25, y: s.y - 3.5, ..*s })
            .collect();
        let rec2 = GazeRecording::new(shifted, 1000.0, "s", "img").unwrap();
        let p1 = detect_saccades(&rec, &DetectionParams::default()).unwrap();
        let p2 = detect_saccades(&rec2, &DetectionParams::default()).unwrap();
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.fixations.iter().zip(&p2.fixations) {
            assert_eq!(a.onset_ms, b.onset_ms);
            assert_eq!(a.duration_ms, b.duration_ms);
        }
        for w in 0..p1.len() - 1 {
            let amp = |p: &Scanpath| {
                let (f, g) = (&p.fixations[w], &p.fixations[w + 1]);
                (g.x - f.x).hypot(g.y - f.y)
            };
            assert!((amp(&p1) - amp(&p2)).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let rec = ramp_recording(&[(120, 2.0), (90, 6.0), (100, 6.0)], 200.0);
        let a = detect_saccades(&rec, &DetectionParams::default()).unwrap();
        let b = detect_saccades(&rec, &DetectionParams::default()).unwrap();
        assert_eq!(a, b);
    }
}
