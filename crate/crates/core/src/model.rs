//! Shared data model: sensor grid geometry, anatomical layout, frames,
//! motor commands and body sites.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stimulus duration used by every discrimination protocol.
pub const DEFAULT_STIMULUS_MS: u64 = 1000;

/// Rectangular sensor matrix formed by row and column traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorGrid {
    rows: usize,
    cols: usize,
}

impl Default for SensorGrid {
    fn default() -> Self {
        SensorGrid { rows: 5, cols: 5 }
    }
}

impl SensorGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "sensor grid must be at least 1x1, got {rows}x{cols}"
            )));
        }
        Ok(SensorGrid { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major sensor index of `(row, col)`.
    pub fn frame_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.rows {
            return Err(Error::OutOfBounds {
                what: "row",
                value: row,
                limit: self.rows,
            });
        }
        if col >= self.cols {
            return Err(Error::OutOfBounds {
                what: "col",
                value: col,
                limit: self.cols,
            });
        }
        Ok(row * self.cols + col)
    }

    /// Inverse of [`frame_index`](Self::frame_index).
    pub fn position(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.total() {
            return Err(Error::OutOfBounds {
                what: "sensor index",
                value: index,
                limit: self.total(),
            });
        }
        Ok((index / self.cols, index % self.cols))
    }
}

/// Free function form of [`SensorGrid::frame_index`].
pub fn frame_index(row: usize, col: usize, grid: SensorGrid) -> Result<usize> {
    grid.frame_index(row, col)
}

/// Anatomical region a sensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Thumb,
    Index,
    Middle,
    Ring,
    Pinky,
    Palm,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Thumb,
        Region::Index,
        Region::Middle,
        Region::Ring,
        Region::Pinky,
        Region::Palm,
    ];

    /// Fingers ordered thumb to pinky.
    pub const FINGERS: [Region; 5] = [
        Region::Thumb,
        Region::Index,
        Region::Middle,
        Region::Ring,
        Region::Pinky,
    ];

    pub fn is_finger(self) -> bool {
        self != Region::Palm
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Thumb => "Thumb",
            Region::Index => "Index",
            Region::Middle => "Middle",
            Region::Ring => "Ring",
            Region::Pinky => "Pinky",
            Region::Palm => "Palm",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::validation(format!("unknown region name {s:?}")))
    }
}

/// Assignment of every sensor to an anatomical region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorLayout {
    grid: SensorGrid,
    region_of: Vec<Region>,
}

impl Default for SensorLayout {
    fn default() -> Self {
        default_layout()
    }
}

/// Canonical layout: column `c` is finger `c` (thumb to pinky), rows 0..=2
/// belong to that finger and rows 3..=4 to the palm.
pub fn default_layout() -> SensorLayout {
    let grid = SensorGrid::default();
    let region_of = (0..grid.total())
        .map(|i| {
            let (row, col) = (i / grid.cols(), i % grid.cols());
            if row < 3 {
                Region::FINGERS[col]
            } else {
                Region::Palm
            }
        })
        .collect();
    SensorLayout { grid, region_of }
}

impl SensorLayout {
    pub fn new(grid: SensorGrid, region_of: Vec<Region>) -> Result<Self> {
        if region_of.len() != grid.total() {
            return Err(Error::validation(format!(
                "layout has {} entries, grid has {} sensors",
                region_of.len(),
                grid.total()
            )));
        }
        Ok(SensorLayout { grid, region_of })
    }

    pub fn grid(&self) -> SensorGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.region_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_of.is_empty()
    }

    pub fn region(&self, index: usize) -> Region {
        self.region_of[index]
    }

    pub fn regions(&self) -> &[Region] {
        &self.region_of
    }

    /// Sensor indices belonging to `region`, ascending.
    pub fn sensors_in(&self, region: Region) -> Vec<usize> {
        self.region_of
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == region)
            .map(|(i, _)| i)
            .collect()
    }

    /// Parses the `index,region` table format. Blank lines and `#` comments
    /// are ignored; every index of the default 5x5 grid must appear once.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_grid(text, SensorGrid::default())
    }

    pub fn parse_with_grid(text: &str, grid: SensorGrid) -> Result<Self> {
        let mut slots: Vec<Option<Region>> = vec![None; grid.total()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (idx, region) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(lineno + 1, "expected `index,region`"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno + 1, format!("bad sensor index {idx:?}")))?;
            let region: Region = region
                .parse()
                .map_err(|e: Error| Error::parse(lineno + 1, e.to_string()))?;
            let slot = slots.get_mut(idx).ok_or_else(|| {
                Error::parse(lineno + 1, format!("sensor index {idx} outside grid"))
            })?;
            if slot.is_some() {
                return Err(Error::parse(lineno + 1, format!("duplicate sensor {idx}")));
            }
            *slot = Some(region);
        }
        let region_of = slots
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::validation(format!("sensor {i} has no region"))))
            .collect::<Result<Vec<_>>>()?;
        SensorLayout::new(grid, region_of)
    }

    pub fn to_table(&self) -> String {
        self.region_of
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{i},{r}\n"))
            .collect()
    }
}

/// Normalized per-sensor pressures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureFrame {
    pub values: Vec<f64>,
    pub timestamp_ms: u64,
}

impl PressureFrame {
    /// Validating constructor; every value must lie in `[0, 1]`.
    pub fn new(values: Vec<f64>, timestamp_ms: u64) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::validation(format!(
                "pressure {v} at sensor {i} outside [0, 1]"
            )));
        }
        Ok(PressureFrame {
            values,
            timestamp_ms,
        })
    }

    /// Clamping constructor. NaN maps to 0.
    pub fn clamped(values: Vec<f64>, timestamp_ms: u64) -> Self {
        PressureFrame {
            values: values.into_iter().map(clamp_unit).collect(),
            timestamp_ms,
        }
    }

    pub fn zeros(len: usize, timestamp_ms: u64) -> Self {
        PressureFrame {
            values: vec![0.0; len],
            timestamp_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// ADC counts from one scan of the sensor matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFrame {
    pub counts: Vec<u16>,
    pub adc_bits: u8,
    pub timestamp_ms: u64,
}

impl RawFrame {
    pub fn new(counts: Vec<u16>, adc_bits: u8, timestamp_ms: u64) -> Result<Self> {
        if !(1..=16).contains(&adc_bits) {
            return Err(Error::validation(format!(
                "adc_bits {adc_bits} outside 1..=16"
            )));
        }
        let max = adc_max(adc_bits);
        if let Some(c) = counts.iter().find(|c| u32::from(**c) > max) {
            return Err(Error::validation(format!(
                "count {c} exceeds {adc_bits}-bit range"
            )));
        }
        Ok(RawFrame {
            counts,
            adc_bits,
            timestamp_ms,
        })
    }

    pub fn max_count(&self) -> u32 {
        adc_max(self.adc_bits)
    }
}

pub(crate) fn adc_max(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// One motor driven at a normalized intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub motor: usize,
    pub intensity: f64,
}

/// Set of motors to drive for `duration_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorCommand {
    pub activations: Vec<Activation>,
    pub duration_ms: u64,
}

impl Default for MotorCommand {
    fn default() -> Self {
        MotorCommand {
            activations: Vec::new(),
            duration_ms: DEFAULT_STIMULUS_MS,
        }
    }
}

impl MotorCommand {
    /// Builds a command sorted by motor id. Duplicate ids and intensities
    /// outside `[0, 1]` are rejected.
    pub fn new(mut activations: Vec<Activation>, duration_ms: u64) -> Result<Self> {
        activations.sort_by_key(|a| a.motor);
        if activations.windows(2).any(|w| w[0].motor == w[1].motor) {
            return Err(Error::validation("duplicate motor id in command"));
        }
        if let Some(a) = activations
            .iter()
            .find(|a| !(0.0..=1.0).contains(&a.intensity))
        {
            return Err(Error::validation(format!(
                "intensity {} for motor {} outside [0, 1]",
                a.intensity, a.motor
            )));
        }
        Ok(MotorCommand {
            activations,
            duration_ms,
        })
    }

    pub fn silent(duration_ms: u64) -> Self {
        MotorCommand {
            activations: Vec::new(),
            duration_ms,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn motors(&self) -> Vec<usize> {
        self.activations.iter().map(|a| a.motor).collect()
    }

    pub fn intensity_of(&self, motor: usize) -> Option<f64> {
        self.activations
            .iter()
            .find(|a| a.motor == motor)
            .map(|a| a.intensity)
    }

    pub fn with_duration(mut self, duration_ms: u64) -> Self {
        self.duration_ms = duration_ms;
        self
    }
}

/// Physical arrangement of motors on a body site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrangement {
    /// Motors wrap around a limb; first and last are adjacent.
    Ring,
    Line,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SiteName {
    UpperArm,
    Shoulder,
    LowerBack,
    Custom(String),
}

impl fmt::Display for SiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteName::UpperArm => f.write_str("upper-arm"),
            SiteName::Shoulder => f.write_str("shoulder"),
            SiteName::LowerBack => f.write_str("lower-back"),
            SiteName::Custom(s) => f.write_str(s),
        }
    }
}

impl FromStr for SiteName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Ok(match norm.as_str() {
            "upper-arm" | "upperarm" => SiteName::UpperArm,
            "shoulder" => SiteName::Shoulder,
            "lower-back" | "lowerback" => SiteName::LowerBack,
            "" => return Err(Error::validation("empty site name")),
            _ => SiteName::Custom(s.trim().to_string()),
        })
    }
}

impl Serialize for SiteName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where the vibration motors are placed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BodySite {
    pub name: SiteName,
    pub arrangement: Arrangement,
    pub num_motors: usize,
}

impl BodySite {
    pub fn new(name: SiteName, arrangement: Arrangement, num_motors: usize) -> Result<Self> {
        if num_motors == 0 {
            return Err(Error::config("a body site needs at least one motor"));
        }
        Ok(BodySite {
            name,
            arrangement,
            num_motors,
        })
    }

    /// Six motors in the site's default arrangement: a ring on the upper
    /// arm, a line elsewhere.
    pub fn standard(name: SiteName) -> Self {
        let arrangement = match name {
            SiteName::UpperArm => Arrangement::Ring,
            _ => Arrangement::Line,
        };
        BodySite {
            name,
            arrangement,
            num_motors: 6,
        }
    }

    pub fn upper_arm() -> Self {
        Self::standard(SiteName::UpperArm)
    }

    pub fn shoulder() -> Self {
        Self::standard(SiteName::Shoulder)
    }

    pub fn lower_back() -> Self {
        Self::standard(SiteName::LowerBack)
    }

    /// Distance between two motors in motor-spacing units. Wraps on a ring.
    pub fn motor_distance(&self, a: usize, b: usize) -> usize {
        let d = a.abs_diff(b);
        match self.arrangement {
            Arrangement::Line => d,
            Arrangement::Ring => d.min(self.num_motors - d % self.num_motors),
        }
    }
}

impl FromStr for BodySite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(BodySite::standard(s.parse()?))
    }
}
