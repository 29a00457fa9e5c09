//! Sensor-to-motor compression and motor command encoders.
//!
//! A [`RegionMap`] assigns each sensor to one motor or to no feedback. The
//! pressures of all sensors sharing a motor are averaged ([`compress`]) and
//! the averages are turned into a [`MotorCommand`] by one of the encoders
//! ([`encode`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Activation, MotorCommand, PressureFrame, Region, SensorLayout, DEFAULT_STIMULUS_MS,
};

/// Target of one sensor in a region map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assignment {
    Motor(usize),
    NoFeedback,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Motor(m) => write!(f, "{m}"),
            Assignment::NoFeedback => f.write_str("NF"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    name: String,
    num_motors: usize,
    assignment: Vec<Assignment>,
}

impl RegionMap {
    /// Validates that every referenced motor exists and every motor has at
    /// least one sensor.
    pub fn new(
        name: impl Into<String>,
        num_motors: usize,
        assignment: Vec<Assignment>,
    ) -> Result<Self> {
        if num_motors == 0 {
            return Err(Error::config("region map needs at least one motor"));
        }
        let mut used = vec![false; num_motors];
        for (i, a) in assignment.iter().enumerate() {
            if let Assignment::Motor(m) = *a {
                *used.get_mut(m).ok_or_else(|| {
                    Error::config(format!(
                        "sensor {i} maps to motor {m}, only {num_motors} motors"
                    ))
                })? = true;
            }
        }
        if let Some(m) = used.iter().position(|u| !u) {
            return Err(Error::config(format!("motor {m} has no sensors")));
        }
        Ok(RegionMap {
            name: name.into(),
            num_motors,
            assignment,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_motors(&self) -> usize {
        self.num_motors
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[Assignment] {
        &self.assignment
    }

    pub fn sensors_of(&self, motor: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Assignment::Motor(motor))
            .map(|(i, _)| i)
            .collect()
    }

    /// Relabels motors: sensors on motor `m` move to `perm[m]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_motors {
            return Err(Error::validation(
                "permutation length differs from motor count",
            ));
        }
        let assignment = self
            .assignment
            .iter()
            .map(|a| match a {
                Assignment::Motor(m) => Assignment::Motor(perm[*m]),
                Assignment::NoFeedback => Assignment::NoFeedback,
            })
            .collect();
        RegionMap::new(self.name.clone(), self.num_motors, assignment)
    }

    /// Parses the mode file: `name=<label>` and `num_motors=<n>` header
    /// lines followed by one `index,motor_or_NF` line per sensor.
    pub fn parse(text: &str, sensors: usize) -> Result<Self> {
        let mut name = None;
        let mut num_motors = None;
        let mut slots = vec![None; sensors];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            let bad = |msg: String| Error::parse(lineno + 1, msg);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                match key.trim() {
                    "name" => name = Some(value.trim().to_string()),
                    "num_motors" => {
                        num_motors = Some(
                            value
                                .trim()
                                .parse::<usize>()
                                .map_err(|_| bad(format!("bad motor count {value:?}")))?,
                        )
                    }
                    other => return Err(bad(format!("unknown header {other:?}"))),
                }
                continue;
            }
            let (idx, target) = line
                .split_once(',')
                .ok_or_else(|| bad("expected `index,motor_or_NF`".into()))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad index {idx:?}")))?;
            let target = match target.trim() {
                t if t.eq_ignore_ascii_case("nf") => Assignment::NoFeedback,
                t => Assignment::Motor(t.parse().map_err(|_| bad(format!("bad motor {t:?}")))?),
            };
            let slot = slots
                .get_mut(idx)
                .ok_or_else(|| bad(format!("index {idx} outside grid")))?;
            if slot.replace(target).is_some() {
                return Err(bad(format!("duplicate index {idx}")));
            }
        }
        let num_motors =
            num_motors.ok_or_else(|| Error::validation("mode file lacks num_motors"))?;
        let assignment = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| Error::validation(format!("mode file misses sensor {i}")))
            })
            .collect::<Result<_>>()?;
        RegionMap::new(
            name.unwrap_or_else(|| "custom".into()),
            num_motors,
            assignment,
        )
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("name={}\nnum_motors={}\n", self.name, self.num_motors);
        for (i, a) in self.assignment.iter().enumerate() {
            out.push_str(&format!("{i},{a}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Focus {
    FingerFocused,
    PalmFocused,
}

/// Label of a builtin mode, written `finger:6` or `palm:3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeId {
    pub focus: Focus,
    pub num_motors: usize,
}

impl ModeId {
    pub const BUILTIN: [ModeId; 6] = [
        ModeId {
            focus: Focus::FingerFocused,
            num_motors: 1,
        },
        ModeId {
            focus: Focus::FingerFocused,
            num_motors: 3,
        },
        ModeId {
            focus: Focus::FingerFocused,
            num_motors: 6,
        },
        ModeId {
            focus: Focus::PalmFocused,
            num_motors: 1,
        },
        ModeId {
            focus: Focus::PalmFocused,
            num_motors: 3,
        },
        ModeId {
            focus: Focus::PalmFocused,
            num_motors: 6,
        },
    ];

    pub fn new(focus: Focus, num_motors: usize) -> Self {
        ModeId { focus, num_motors }
    }
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let focus = match self.focus {
            Focus::FingerFocused => "finger",
            Focus::PalmFocused => "palm",
        };
        write!(f, "{focus}:{}", self.num_motors)
    }
}

impl FromStr for ModeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (focus, n) = s
            .split_once(':')
            .ok_or_else(|| Error::validation(format!("mode {s:?} is not `focus:motors`")))?;
        let focus = match focus.trim().to_ascii_lowercase().as_str() {
            "finger" | "finger-focused" => Focus::FingerFocused,
            "palm" | "palm-focused" => Focus::PalmFocused,
            other => return Err(Error::validation(format!("unknown focus {other:?}"))),
        };
        let num_motors = n
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("bad motor count in {s:?}")))?;
        Ok(ModeId { focus, num_motors })
    }
}

impl Serialize for ModeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionMode {
    pub id: ModeId,
    pub region_map: RegionMap,
}

impl CompressionMode {
    pub fn focus(&self) -> Focus {
        self.id.focus
    }

    pub fn num_motors(&self) -> usize {
        self.region_map.num_motors()
    }
}

/// Builds one of the six builtin compression modes over `layout`.
///
/// Finger-focused: 6 = one motor per finger (thumb..pinky = 0..4) plus the
/// palm on 5; 3 = {thumb, index}, {middle, ring, pinky}, palm; 1 = all
/// fingers, palm silent.
///
/// Palm-focused: 6 = radial palm (columns 0..=2) on 0, ulnar palm on 1,
/// then thumb, index, middle and {ring, pinky} on 2..5; 3 = palm,
/// {thumb, index}, {middle, ring, pinky}; 1 = palm only, fingers silent.
pub fn builtin_mode(
    focus: Focus,
    num_motors: usize,
    layout: &SensorLayout,
) -> Result<CompressionMode> {
    use Region::*;
    let id = ModeId { focus, num_motors };
    let cols = layout.grid().cols();
    let palm_split = cols.div_ceil(2).max(1);
    let target = |i: usize, region: Region| -> Assignment {
        let motor = match (focus, num_motors, region) {
            (Focus::FingerFocused, 6, Palm) => Some(5),
            (Focus::FingerFocused, 6, finger) => Some(finger as usize),
            (Focus::FingerFocused, 3, Thumb | Index) => Some(0),
            (Focus::FingerFocused, 3, Middle | Ring | Pinky) => Some(1),
            (Focus::FingerFocused, 3, Palm) => Some(2),
            (Focus::FingerFocused, 1, Palm) => None,
            (Focus::FingerFocused, 1, _) => Some(0),
            (Focus::PalmFocused, 6, Palm) => Some(if i % cols < palm_split { 0 } else { 1 }),
            (Focus::PalmFocused, 6, Thumb) => Some(2),
            (Focus::PalmFocused, 6, Index) => Some(3),
            (Focus::PalmFocused, 6, Middle) => Some(4),
            (Focus::PalmFocused, 6, Ring | Pinky) => Some(5),
            (Focus::PalmFocused, 3, Palm) => Some(0),
            (Focus::PalmFocused, 3, Thumb | Index) => Some(1),
            (Focus::PalmFocused, 3, Middle | Ring | Pinky) => Some(2),
            (Focus::PalmFocused, 1, Palm) => Some(0),
            (Focus::PalmFocused, 1, _) => None,
            _ => unreachable!("motor count checked above"),
        };
        motor.map_or(Assignment::NoFeedback, Assignment::Motor)
    };
    if !matches!(num_motors, 1 | 3 | 6) {
        return Err(Error::config(format!(
            "no builtin mode with {num_motors} motors (supported: 1, 3, 6)"
        )));
    }
    let assignment = layout
        .regions()
        .iter()
        .enumerate()
        .map(|(i, r)| target(i, *r))
        .collect();
    let region_map = RegionMap::new(id.to_string(), num_motors, assignment)?;
    Ok(CompressionMode { id, region_map })
}

/// All six builtin modes in [`ModeId::BUILTIN`] order.
pub fn builtin_modes(layout: &SensorLayout) -> Result<Vec<CompressionMode>> {
    ModeId::BUILTIN
        .iter()
        .map(|id| builtin_mode(id.focus, id.num_motors, layout))
        .collect()
}

/// Per-motor arithmetic mean of the assigned sensors. No-feedback sensors
/// are ignored.
pub fn compress(frame: &PressureFrame, map: &RegionMap) -> Result<Vec<f64>> {
    if frame.len() != map.len() {
        return Err(Error::validation(format!(
            "frame has {} sensors, map has {}",
            frame.len(),
            map.len()
        )));
    }
    let mut sums = vec![0.0; map.num_motors()];
    let mut counts = vec![0usize; map.num_motors()];
    for (v, a) in frame.values.iter().zip(map.assignment()) {
        if let Assignment::Motor(m) = *a {
            sums[m] += v;
            counts[m] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s / n as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Binary,
    Proportional,
    Derivative,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(EncoderKind::Binary),
            "prop" | "proportional" => Ok(EncoderKind::Proportional),
            "deriv" | "derivative" => Ok(EncoderKind::Derivative),
            other => Err(Error::validation(format!("unknown encoder {other:?}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Binary => "binary",
            EncoderKind::Proportional => "prop",
            EncoderKind::Derivative => "deriv",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub threshold: f64,
    pub fixed_intensity: f64,
    pub gain: f64,
    pub dt_ms: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Binary,
            threshold: 0.5,
            fixed_intensity: 1.0,
            gain: 1.0,
            dt_ms: 10.0,
        }
    }
}

impl EncoderConfig {
    pub fn binary(threshold: f64) -> Self {
        EncoderConfig {
            threshold,
            ..Default::default()
        }
    }

    pub fn proportional(gain: f64) -> Self {
        EncoderConfig {
            kind: EncoderKind::Proportional,
            gain,
            ..Default::default()
        }
    }

    pub fn derivative(gain: f64, dt_ms: f64) -> Self {
        EncoderConfig {
            kind: EncoderKind::Derivative,
            gain,
            dt_ms,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EncoderKind::Binary => {
                if !(self.threshold > 0.0 && self.threshold < 1.0) {
                    return Err(Error::config(format!(
                        "threshold {} outside (0, 1)",
                        self.threshold
                    )));
                }
                if !(self.fixed_intensity > 0.0 && self.fixed_intensity <= 1.0) {
                    return Err(Error::config(format!(
                        "fixed intensity {} outside (0, 1]",
                        self.fixed_intensity
                    )));
                }
            }
            EncoderKind::Proportional | EncoderKind::Derivative => {
                if !(self.gain > 0.0 && self.gain.is_finite()) {
                    return Err(Error::config(format!("gain {} must be > 0", self.gain)));
                }
                if self.kind == EncoderKind::Derivative
                    && (self.dt_ms.is_nan() || self.dt_ms <= 0.0)
                {
                    return Err(Error::config(format!("dt_ms {} must be > 0", self.dt_ms)));
                }
            }
        }
        Ok(())
    }
}

/// Turns per-motor averages into a command. Motors with zero intensity are
/// left out. The derivative encoder needs the previous averages and drops
/// negative slopes.
pub fn encode(averages: &[f64], cfg: &EncoderConfig, prev: Option<&[f64]>) -> Result<MotorCommand> {
    let activations: Vec<Activation> = match cfg.kind {
        EncoderKind::Binary => averages
            .iter()
            .enumerate()
            .filter(|(_, a)| **a > cfg.threshold)
            .map(|(motor, _)| Activation {
                motor,
                intensity: cfg.fixed_intensity,
            })
            .collect(),
        EncoderKind::Proportional => averages
            .iter()
            .enumerate()
            .map(|(motor, a)| Activation {
                motor,
                intensity: (cfg.gain * a).clamp(0.0, 1.0),
            })
            .filter(|a| a.intensity > 0.0)
            .collect(),
        EncoderKind::Derivative => {
            let prev = prev.ok_or_else(|| {
                Error::Precondition("derivative encoder needs the previous averages".into())
            })?;
            if prev.len() != averages.len() {
                return Err(Error::Precondition(
                    "previous averages have a different length".into(),
                ));
            }
            let dt_s = cfg.dt_ms / 1000.0;
            averages
                .iter()
                .zip(prev)
                .enumerate()
                .map(|(motor, (a, p))| Activation {
                    motor,
                    intensity: (cfg.gain * ((a - p) / dt_s).max(0.0)).clamp(0.0, 1.0),
                })
                .filter(|a| a.intensity > 0.0)
                .collect()
        }
    };
    Ok(MotorCommand {
        activations,
        duration_ms: DEFAULT_STIMULUS_MS,
    })
}

/// Stateful compress-then-encode stage that remembers the previous averages
/// for the derivative encoder.
#[derive(Debug, Clone)]
pub struct FeedbackEngine {
    pub mode: CompressionMode,
    pub encoder: EncoderConfig,
    prev: Option<Vec<f64>>,
}

impl FeedbackEngine {
    pub fn new(mode: CompressionMode, encoder: EncoderConfig) -> Result<Self> {
        encoder.validate()?;
        Ok(FeedbackEngine {
            mode,
            encoder,
            prev: None,
        })
    }

    pub fn set_mode(&mut self, mode: CompressionMode) {
        self.mode = mode;
        self.prev = None;
    }

    pub fn set_encoder(&mut self, encoder: EncoderConfig) -> Result<()> {
        encoder.validate()?;
        self.encoder = encoder;
        Ok(())
    }

    /// The derivative encoder treats the first frame as its own predecessor,
    /// so it starts silent.
    pub fn process(&mut self, frame: &PressureFrame) -> Result<MotorCommand> {
        let averages = compress(frame, &self.mode.region_map)?;
        let prev = self.prev.take().unwrap_or_else(|| averages.clone());
        let cmd = encode(&averages, &self.encoder, Some(&prev))?;
        self.prev = Some(averages);
        Ok(cmd)
    }
}
