use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{smoothed_velocities, GazeRecording, Scanpath, VigorFit};
use crate::error::{Error, Result};

/// Saccade type by direction change relative to the previous saccade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum SaccadeType {
    Maintain = 1,
    Right = 2,
    Left = 3,
    Reverse = 4,
}

impl SaccadeType {
    pub const ALL: [SaccadeType; 4] = [Self::Maintain, Self::Right, Self::Left, Self::Reverse];

    /// Zero-based index, used for per-type arrays.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Classifies a direction change `delta` in degrees (wrapped into
    /// (−180, 180]). |Δ| ≤ 45 maintains; [−135, −45) turns right; (45, 135]
    /// turns left; everything else reverses.
    pub fn classify(delta: f64) -> Self {
        let d = wrap_degrees(delta);
        if d.abs() <= 45.0 {
            Self::Maintain
        } else if (-135.0..-45.0).contains(&d) {
            Self::Right
        } else if d > 45.0 && d <= 135.0 {
            Self::Left
        } else {
            Self::Reverse
        }
    }

    /// Closed-open angular range `[lo, hi)` of direction changes, written so
    /// that the reverse bin is `(135, 225)` before wrapping.
    pub fn angular_range(self) -> (f64, f64) {
        match self {
            Self::Maintain => (-45.0, 45.0),
            Self::Right => (-135.0, -45.0),
            Self::Left => (45.0, 135.0),
            Self::Reverse => (135.0, 225.0),
        }
    }
}

impl From<SaccadeType> for u8 {
    fn from(t: SaccadeType) -> u8 {
        t.code()
    }
}

impl TryFrom<u8> for SaccadeType {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1..=4 => Ok(Self::ALL[v as usize - 1]),
            _ => Err(format!("saccade type must be 1..=4, got {v}")),
        }
    }
}

/// Wraps an angle in degrees into (−180, 180].
pub(crate) fn wrap_degrees(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Direction change between two headings, wrapped into (−180, 180].
pub fn direction_change(prev_deg: f64, next_deg: f64) -> f64 {
    wrap_degrees(next_deg - prev_deg)
}

/// Per-saccade channels modeled by type-specific Gamma distributions, in the
/// fixed gradient block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "a")]
    Amplitude,
    #[serde(rename = "d")]
    Duration,
    #[serde(rename = "v")]
    Velocity,
    #[serde(rename = "w")]
    Acceleration,
    #[serde(rename = "rx")]
    RatioX,
    #[serde(rename = "ry")]
    RatioY,
    #[serde(rename = "gx")]
    VigorX,
    #[serde(rename = "gy")]
    VigorY,
}

impl Channel {
    pub const ALL: [Channel; 8] = [
        Self::Amplitude,
        Self::Duration,
        Self::Velocity,
        Self::Acceleration,
        Self::RatioX,
        Self::RatioY,
        Self::VigorX,
        Self::VigorY,
    ];
    pub const BASE: [Channel; 2] = [Self::Amplitude, Self::Duration];

    pub fn name(self) -> &'static str {
        match self {
            Self::Amplitude => "a",
            Self::Duration => "d",
            Self::Velocity => "v",
            Self::Acceleration => "w",
            Self::RatioX => "rx",
            Self::RatioY => "ry",
            Self::VigorX => "gx",
            Self::VigorY => "gy",
        }
    }

    /// Whether the channel needs the raw sample trace.
    pub fn needs_raw(self) -> bool {
        !matches!(self, Self::Amplitude | Self::Duration)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown channel {s:?}")))
    }
}

/// Features of saccade `t`, the movement from fixation `t` to fixation `t+1`.
/// Channels that could not be computed are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaccadeFeatures {
    pub kind: SaccadeType,
    /// Heading of the saccade vector in (−180, 180] degrees.
    pub direction: f64,
    pub amplitude: f64,
    /// Duration of the fixation the saccade lands on (ms).
    pub duration: f64,
    pub velocity: Option<f64>,
    pub acceleration: Option<f64>,
    pub peak_speed: Option<f64>,
    pub vmax_x: Option<f64>,
    pub vmax_y: Option<f64>,
    pub ratio_x: Option<f64>,
    pub ratio_y: Option<f64>,
    pub vigor_x: Option<f64>,
    pub vigor_y: Option<f64>,
}

impl SaccadeFeatures {
    /// Features with only type, amplitude and duration set.
    pub fn base(kind: SaccadeType, direction: f64, amplitude: f64, duration: f64) -> Self {
        Self {
            kind,
            direction,
            amplitude,
            duration,
            velocity: None,
            acceleration: None,
            peak_speed: None,
            vmax_x: None,
            vmax_y: None,
            ratio_x: None,
            ratio_y: None,
            vigor_x: None,
            vigor_y: None,
        }
    }

    pub fn raw_channel(&self, c: Channel) -> Option<f64> {
        match c {
            Channel::Amplitude => Some(self.amplitude),
            Channel::Duration => Some(self.duration),
            Channel::Velocity => self.velocity,
            Channel::Acceleration => self.acceleration,
            Channel::RatioX => self.ratio_x,
            Channel::RatioY => self.ratio_y,
            Channel::VigorX => self.vigor_x,
            Channel::VigorY => self.vigor_y,
        }
    }

    /// Channel value if it is defined, finite and positive; otherwise the
    /// saccade is excluded from that channel's likelihood.
    pub fn channel(&self, c: Channel) -> Option<f64> {
        self.raw_channel(c).filter(|x| x.is_finite() && *x > 0.0)
    }

    pub fn set_channel(&mut self, c: Channel, value: f64) {
        match c {
            Channel::Amplitude => self.amplitude = value,
            Channel::Duration => self.duration = value,
            Channel::Velocity => self.velocity = Some(value),
            Channel::Acceleration => self.acceleration = Some(value),
            Channel::RatioX => self.ratio_x = Some(value),
            Channel::RatioY => self.ratio_y = Some(value),
            Channel::VigorX => self.vigor_x = Some(value),
            Channel::VigorY => self.vigor_y = Some(value),
        }
    }
}

struct Dynamics {
    velocity: f64,
    acceleration: f64,
    peak_speed: f64,
    vmax_x: f64,
    vmax_y: f64,
    ratio_x: Option<f64>,
    ratio_y: Option<f64>,
}

/// Precomputed velocity and derivative traces of a recording.
struct Traces<'a> {
    rec: &'a GazeRecording,
    vel: Vec<(f64, f64)>,
    speed: Vec<f64>,
}

impl<'a> Traces<'a> {
    fn new(rec: &'a GazeRecording) -> Self {
        let vel = smoothed_velocities(rec);
        let speed = vel.iter().map(|(x, y)| x.hypot(*y)).collect();
        Self { rec, vel, speed }
    }

    fn derivative(&self, f: impl Fn(usize) -> f64, i: usize) -> f64 {
        let n = self.speed.len();
        let rate = self.rec.sampling_rate();
        if i == 0 || i + 1 >= n {
            0.0
        } else {
            (f(i + 1) - f(i - 1)) * rate / 2.0
        }
    }

    /// Dynamics over the samples strictly between two fixations.
    fn saccade(&self, from_ms: f64, to_ms: f64) -> Option<Dynamics> {
        let s = self.rec.samples();
        let lo = s.partition_point(|p| p.t_ms < from_ms);
        let hi = s.partition_point(|p| p.t_ms < to_ms);
        if hi <= lo {
            return None;
        }
        let n = (hi - lo) as f64;
        let idx = lo..hi;
        let velocity = idx.clone().map(|i| self.speed[i]).sum::<f64>() / n;
        let acceleration = idx
            .clone()
            .map(|i| self.derivative(|k| self.speed[k], i).abs())
            .sum::<f64>()
            / n;
        let peak_speed = idx.clone().map(|i| self.speed[i]).fold(0.0, f64::max);
        let vmax_x = idx.clone().map(|i| self.vel[i].0.abs()).fold(0.0, f64::max);
        let vmax_y = idx.clone().map(|i| self.vel[i].1.abs()).fold(0.0, f64::max);
        let ratio = |axis: fn(&(f64, f64)) -> f64| {
            let (mut acc, mut dec) = (0.0f64, 0.0f64);
            for i in idx.clone() {
                let a = self.derivative(|k| axis(&self.vel[k]).abs(), i);
                acc = acc.max(a);
                dec = dec.max(-a);
            }
            (acc > 0.0 && dec > 0.0).then(|| acc / dec)
        };
        Some(Dynamics {
            velocity,
            acceleration,
            peak_speed,
            vmax_x,
            vmax_y,
            ratio_x: ratio(|v| v.0),
            ratio_y: ratio(|v| v.1),
        })
    }
}

/// Computes one feature record per saccade (`T − 1` records for `T`
/// fixations).
///
/// The first saccade's direction change is measured against the positive x
/// axis. Dynamics channels are filled from `rec` when given; vigor channels
/// additionally need a fitted rate.
pub fn extract_features(
    path: &Scanpath,
    rec: Option<&GazeRecording>,
    vigor: Option<&VigorFit>,
) -> Result<Vec<SaccadeFeatures>> {
    path.validate()?;
    if rec.is_none() && vigor.is_some() {
        return Err(Error::ChannelUnavailable(
            "vigor channels need the raw recording".into(),
        ));
    }
    let traces = match rec {
        Some(r) => {
            if path.fixations.iter().any(|f| f.onset_ms.is_none()) {
                return Err(Error::ChannelUnavailable(
                    "dynamics channels need fixation onsets from detection".into(),
                ));
            }
            Some(Traces::new(r))
        }
        None => None,
    };

    let mut prev_dir = 0.0;
    let mut out = Vec::with_capacity(path.len() - 1);
    for w in path.fixations.windows(2) {
        let (from, to) = (&w[0], &w[1]);
        let (dx, dy) = (to.x - from.x, to.y - from.y);
        let direction = dy.atan2(dx).to_degrees();
        let kind = SaccadeType::classify(direction_change(prev_dir, direction));
        prev_dir = direction;
        let mut f = SaccadeFeatures::base(kind, wrap_degrees(direction), dx.hypot(dy), to.duration_ms);

        if let Some(tr) = &traces {
            let (start, end) = (from.offset_ms().unwrap(), to.onset_ms.unwrap());
            if let Some(dynamics) = tr.saccade(start, end) {
                f.velocity = Some(dynamics.velocity);
                f.acceleration = Some(dynamics.acceleration);
                f.peak_speed = Some(dynamics.peak_speed);
                f.vmax_x = Some(dynamics.vmax_x);
                f.vmax_y = Some(dynamics.vmax_y);
                f.ratio_x = dynamics.ratio_x;
                f.ratio_y = dynamics.ratio_y;
                if let Some(v) = vigor {
                    f.vigor_x = v.vigor(dynamics.vmax_x, dx);
                    f.vigor_y = v.vigor(dynamics.vmax_y, dy);
                }
            }
        }
        out.push(f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::{detect_saccades, DetectionParams, Fixation, GazeSample};

    fn path(points: &[(f64, f64)]) -> Scanpath {
        Scanpath::new(
            points.iter().map(|&(x, y)| Fixation::new(x, y, 200.0)).collect(),
            "s",
            "i",
        )
    }

    #[test]
    fn collinear_saccades_maintain() {
        let f = extract_features(&path(&[(0.0, 0.0), (2.0, 0.0), (5.0, 0.0)]), None, None).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[1].kind, SaccadeType::Maintain);
        assert_eq!(f[0].kind, SaccadeType::Maintain);
        assert_eq!(f[1].amplitude, 3.0);
    }

    #[test]
    fn quarter_turn_counterclockwise_is_left() {
        let f = extract_features(&path(&[(0.0, 0.0), (2.0, 0.0), (2.0, 3.0)]), None, None).unwrap();
        assert_eq!(f[1].kind, SaccadeType::Left);
        assert_eq!(f[1].direction, 90.0);
    }

    #[test]
    fn half_turn_wraps_to_reverse() {
        assert_eq!(direction_change(10.0, -170.0), 180.0);
        assert_eq!(SaccadeType::classify(direction_change(10.0, -170.0)), SaccadeType::Reverse);
    }

    #[test]
    fn boundary_rules() {
        assert_eq!(SaccadeType::classify(45.0), SaccadeType::Maintain);
        assert_eq!(SaccadeType::classify(-45.0), SaccadeType::Maintain);
        assert_eq!(SaccadeType::classify(135.0), SaccadeType::Left);
        assert_eq!(SaccadeType::classify(-135.0), SaccadeType::Right);
        assert_eq!(SaccadeType::classify(-90.0), SaccadeType::Right);
        assert_eq!(SaccadeType::classify(180.0), SaccadeType::Reverse);
        assert_eq!(SaccadeType::classify(-180.0), SaccadeType::Reverse);
        assert_eq!(SaccadeType::classify(135.000001), SaccadeType::Reverse);
    }

    #[test]
    fn first_saccade_is_measured_against_x_axis() {
        let f = extract_features(&path(&[(0.0, 0.0), (0.0, 1.0)]), None, None).unwrap();
        assert_eq!(f[0].kind, SaccadeType::Left);
        let f = extract_features(&path(&[(0.0, 0.0), (-1.0, 0.0)]), None, None).unwrap();
        assert_eq!(f[0].kind, SaccadeType::Reverse);
    }

    #[test]
    fn duration_is_taken_from_landing_fixation() {
        let mut p = path(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
        p.fixations[1].duration_ms = 123.0;
        p.fixations[2].duration_ms = 321.0;
        let f = extract_features(&p, None, None).unwrap();
        assert_eq!(f[0].duration, 123.0);
        assert_eq!(f[1].duration, 321.0);
    }

    #[test]
    fn vigor_without_raw_is_unavailable() {
        let v = VigorFit::from_rate(3.0);
        let err = extract_features(&path(&[(0.0, 0.0), (1.0, 0.0)]), None, Some(&v)).unwrap_err();
        assert!(matches!(err, Error::ChannelUnavailable(_)));
    }

    #[test]
    fn raw_without_onsets_is_unavailable() {
        let rec = GazeRecording::new(
            (0..10).map(|i| GazeSample { t_ms: i as f64, x: 0.0, y: 0.0 }).collect(),
            1000.0,
            "s",
            "i",
        )
        .unwrap();
        let err = extract_features(&path(&[(0.0, 0.0), (1.0, 0.0)]), Some(&rec), None).unwrap_err();
        assert!(matches!(err, Error::ChannelUnavailable(_)));
    }

    /// Diagonal saccade with a smooth (raised-cosine) speed profile so
    /// acceleration and deceleration phases are both present.
    fn smooth_saccade_recording() -> GazeRecording {
        let mut samples = Vec::new();
        let (ax, ay) = (6.0, 3.0);
        let dur = 40usize;
        let mut t = 0.0;
        let mut push = |x: f64, y: f64| {
            samples.push(GazeSample { t_ms: t, x, y });
            t += 1.0;
        };
        for _ in 0..200 {
            push(0.0, 0.0);
        }
        for k in 1..=dur {
            // fraction of the path covered: smooth step
            let s = k as f64 / dur as f64;
            let frac = s - (2.0 * std::f64::consts::PI * s).sin() / (2.0 * std::f64::consts::PI);
            push(ax * frac, ay * frac);
        }
        for _ in 0..200 {
            push(ax, ay);
        }
        GazeRecording::new(samples, 1000.0, "s", "i").unwrap()
    }

    #[test]
    fn dynamics_channels_from_raw_trace() {
        let rec = smooth_saccade_recording();
        let p = detect_saccades(&rec, &DetectionParams::default()).unwrap();
        assert_eq!(p.len(), 2);
        let vigor = VigorFit::from_rate(4.0);
        let f = extract_features(&p, Some(&rec), Some(&vigor)).unwrap();
        let f = f[0];
        let amp = 45f64.sqrt();
        // Mean speed ≈ amplitude / duration over the detected interval.
        let v = f.velocity.unwrap();
        assert!(v > 0.5 * amp / 0.040 && v < 1.5 * amp / 0.040, "{v}");
        assert!(f.acceleration.unwrap() > 0.0);
        // Symmetric profile: acceleration and deceleration peaks match.
        assert!((f.ratio_x.unwrap() - 1.0).abs() < 0.05, "{:?}", f.ratio_x);
        assert!((f.ratio_y.unwrap() - 1.0).abs() < 0.05, "{:?}", f.ratio_y);
        let vx = f.vmax_x.unwrap();
        let dx = p.fixations[1].x - p.fixations[0].x;
        assert!((f.vigor_x.unwrap() - vx / (1.0 - (-dx.abs() / 4.0).exp())).abs() < 1e-9);
        // x moves twice as far as y.
        assert!((vx / f.vmax_y.unwrap() - 2.0).abs() < 1e-9);
        for c in Channel::ALL {
            assert!(f.channel(c).is_some(), "{c}");
        }
    }

    #[test]
    fn non_positive_channels_are_masked() {
        let mut f = SaccadeFeatures::base(SaccadeType::Maintain, 0.0, 1.0, 100.0);
        f.velocity = Some(0.0);
        f.ratio_x = Some(f64::NAN);
        assert_eq!(f.channel(Channel::Velocity), None);
        assert_eq!(f.channel(Channel::RatioX), None);
        assert_eq!(f.channel(Channel::Acceleration), None);
        assert_eq!(f.channel(Channel::Amplitude), Some(1.0));
    }

    proptest::proptest! {
        #[test]
        fn type_predicates_partition(delta in -180.0f64..=180.0) {
            let d = wrap_degrees(delta);
            let preds = [
                d.abs() <= 45.0,
                (-135.0..-45.0).contains(&d),
                d > 45.0 && d <= 135.0,
                d.abs() > 135.0,
            ];
            // Exactly one bin holds, and classify agrees with it.
            let hits: Vec<usize> = preds.iter().enumerate().filter(|(_, p)| **p).map(|(i, _)| i).collect();
            proptest::prop_assert_eq!(hits.len(), 1);
            proptest::prop_assert_eq!(SaccadeType::classify(d).index(), hits[0]);
        }

        #[test]
        fn one_record_per_saccade(points in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 2..30)) {
            let f = extract_features(&path(&points), None, None).unwrap();
            proptest::prop_assert_eq!(f.len(), points.len() - 1);
        }
    }
}
