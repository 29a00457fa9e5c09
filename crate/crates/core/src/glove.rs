//! Virtual sensing glove: grasp pressure synthesis, piezoresistive
//! voltage-divider readout and the row-by-row TDMA scan.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    adc_max, clamp_unit, PressureFrame, RawFrame, Region, SensorGrid, SensorLayout,
};

/// The five grasp test objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraspObject {
    Ball,
    Book,
    Glass,
    Bottle,
    TeddyBear,
}

impl GraspObject {
    pub const ALL: [GraspObject; 5] = [
        GraspObject::Ball,
        GraspObject::Book,
        GraspObject::Glass,
        GraspObject::Bottle,
        GraspObject::TeddyBear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraspObject::Ball => "ball",
            GraspObject::Book => "book",
            GraspObject::Glass => "glass",
            GraspObject::Bottle => "bottle",
            GraspObject::TeddyBear => "teddy-bear",
        }
    }

    fn template_source(self) -> &'static str {
        match self {
            GraspObject::Ball => include_str!("../templates/ball.csv"),
            GraspObject::Book => include_str!("../templates/book.csv"),
            GraspObject::Glass => include_str!("../templates/glass.csv"),
            GraspObject::Bottle => include_str!("../templates/bottle.csv"),
            GraspObject::TeddyBear => include_str!("../templates/teddy_bear.csv"),
        }
    }
}

impl fmt::Display for GraspObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraspObject {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Ok(match norm.as_str() {
            "ball" => GraspObject::Ball,
            "book" => GraspObject::Book,
            "glass" => GraspObject::Glass,
            "bottle" | "water-bottle" => GraspObject::Bottle,
            "teddy-bear" | "teddybear" | "teddy" => GraspObject::TeddyBear,
            _ => return Err(Error::validation(format!("unknown object {s:?}"))),
        })
    }
}

/// Per-sensor contact weights for one object, row-major over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureTemplate {
    pub weights: Vec<f64>,
}

impl PressureTemplate {
    /// Parses the `index,weight` table format for a 5x5 grid.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_sized(text, SensorGrid::default().total())
    }

    pub fn parse_sized(text: &str, len: usize) -> Result<Self> {
        let mut weights = vec![None; len];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::parse(lineno + 1, msg);
            let (idx, w) = line
                .split_once(',')
                .ok_or_else(|| bad("expected `index,weight`".into()))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad index {idx:?}")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad weight {w:?}")))?;
            if !(0.0..=1.0).contains(&w) {
                return Err(bad(format!("weight {w} outside [0, 1]")));
            }
            let slot = weights
                .get_mut(idx)
                .ok_or_else(|| bad(format!("index {idx} outside grid")))?;
            if slot.replace(w).is_some() {
                return Err(bad(format!("duplicate index {idx}")));
            }
        }
        let weights = weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| w.ok_or_else(|| Error::validation(format!("template misses sensor {i}"))))
            .collect::<Result<_>>()?;
        Ok(PressureTemplate { weights })
    }

    pub fn builtin(object: GraspObject) -> Self {
        Self::parse(object.template_source()).expect("shipped template is well-formed")
    }

    /// Re-targets the template to `layout`. Layouts on a grid of the
    /// template's size keep per-position weights; other grids receive the
    /// template's mean weight for each sensor's region.
    pub fn for_layout(&self, layout: &SensorLayout) -> Vec<f64> {
        if layout.len() == self.weights.len() {
            return self.weights.clone();
        }
        let reference = crate::model::default_layout();
        let region_mean = |region: Region| {
            let idx = reference.sensors_in(region);
            idx.iter().map(|i| self.weights[*i]).sum::<f64>() / idx.len() as f64
        };
        layout.regions().iter().map(|r| region_mean(*r)).collect()
    }
}

/// One grasp: object, grip strength and a trapezoidal onset/hold/release
/// envelope starting at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspScenario {
    pub object: GraspObject,
    pub grip_strength: f64,
    pub onset_ms: f64,
    pub hold_ms: f64,
    pub release_ms: f64,
    pub noise_sigma: f64,
}

impl GraspScenario {
    pub fn new(object: GraspObject, grip_strength: f64) -> Self {
        GraspScenario {
            object,
            grip_strength,
            onset_ms: 300.0,
            hold_ms: 1500.0,
            release_ms: 300.0,
            noise_sigma: 0.0,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.grip_strength) {
            return Err(Error::config(format!(
                "grip strength {} outside [0, 1]",
                self.grip_strength
            )));
        }
        for (name, v) in [
            ("onset_ms", self.onset_ms),
            ("hold_ms", self.hold_ms),
            ("release_ms", self.release_ms),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Total contact time.
    pub fn span_ms(&self) -> f64 {
        self.onset_ms + self.hold_ms + self.release_ms
    }

    pub fn hold_window(&self) -> (f64, f64) {
        (self.onset_ms, self.onset_ms + self.hold_ms)
    }

    /// Envelope in `[0, 1]`: linear rise over the onset, flat hold, linear
    /// fall over the release, zero outside the contact span.
    pub fn envelope(&self, t_ms: f64) -> f64 {
        let (hold_start, hold_end) = self.hold_window();
        let end = self.span_ms();
        if t_ms <= 0.0 || t_ms >= end {
            0.0
        } else if t_ms < hold_start {
            t_ms / self.onset_ms
        } else if t_ms <= hold_end {
            1.0
        } else {
            (end - t_ms) / self.release_ms
        }
    }
}

/// Pressure field for `scenario` at time `t_ms`.
///
/// Noise is zero-mean Gaussian, seeded per `(rng_seed, t_ms)`, and only
/// present while the envelope is non-zero.
pub fn synth_pressure(
    scenario: &GraspScenario,
    t_ms: u64,
    layout: &SensorLayout,
    rng_seed: u64,
) -> PressureFrame {
    let template = PressureTemplate::builtin(scenario.object);
    synth_from_template(scenario, &template, t_ms, layout, rng_seed)
}

pub fn synth_from_template(
    scenario: &GraspScenario,
    template: &PressureTemplate,
    t_ms: u64,
    layout: &SensorLayout,
    rng_seed: u64,
) -> PressureFrame {
    let env = scenario.envelope(t_ms as f64);
    let weights = template.for_layout(layout);
    if env == 0.0 {
        return PressureFrame::zeros(weights.len(), t_ms);
    }
    let mut values: Vec<f64> = weights
        .iter()
        .map(|w| w * env * scenario.grip_strength)
        .collect();
    if scenario.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(t_ms);
        let normal = Normal::new(0.0, scenario.noise_sigma).expect("sigma validated");
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    PressureFrame::clamped(values, t_ms)
}

/// Piezoresistive film read through a voltage divider:
/// `r(p) = r0 / (1 + k p)` and `v = vcc * r_ref / (r_ref + r(p))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiezoModel {
    pub r0: f64,
    pub k: f64,
    pub r_ref: f64,
    pub vcc: f64,
    pub adc_bits: u8,
}

impl Default for PiezoModel {
    fn default() -> Self {
        PiezoModel {
            r0: 10_000.0,
            k: 9.0,
            r_ref: 10_000.0,
            vcc: 3.3,
            adc_bits: 10,
        }
    }
}

/// Result of inverting a raw frame back to pressures.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub frame: PressureFrame,
    /// Sensors whose count fell outside the invertible range and were clamped.
    pub saturated: Vec<usize>,
}

impl Calibrated {
    pub fn is_saturated(&self, index: usize) -> bool {
        self.saturated.contains(&index)
    }
}

impl PiezoModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("r0", self.r0),
            ("k", self.k),
            ("r_ref", self.r_ref),
            ("vcc", self.vcc),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(8..=16).contains(&self.adc_bits) {
            return Err(Error::config(format!(
                "adc_bits {} outside [8, 16]",
                self.adc_bits
            )));
        }
        Ok(())
    }

    pub fn max_count(&self) -> u32 {
        adc_max(self.adc_bits)
    }

    pub fn resistance(&self, pressure: f64) -> f64 {
        self.r0 / (1.0 + self.k * pressure)
    }

    pub fn voltage(&self, pressure: f64) -> f64 {
        self.vcc * self.r_ref / (self.r_ref + self.resistance(pressure))
    }

    /// Divider output as a fraction of full scale.
    fn ratio(&self, pressure: f64) -> f64 {
        self.r_ref / (self.r_ref + self.resistance(pressure))
    }

    /// Pressure whose divider ratio is `u`, unclamped.
    fn pressure_at_ratio(&self, u: f64) -> f64 {
        let r = self.r_ref * (1.0 - u) / u;
        (self.r0 / r - 1.0) / self.k
    }

    /// Continuous (unrounded) inverse of the readout in count units.
    pub fn pressure_at_count(&self, count: f64) -> f64 {
        self.pressure_at_ratio(count / self.max_count() as f64)
    }

    pub fn readout(&self, pressure: f64) -> u16 {
        let max = self.max_count() as f64;
        (self.ratio(clamp_unit(pressure)) * max).round() as u16
    }

    /// Worst-case pressure error after quantizing to the nearest count,
    /// over `p` in `[0, 1]`.
    ///
    /// `dp/du = r0 / (k r_ref (1 - u)^2)` grows with `u`, so the bound is
    /// half a count times the slope at the top of the range.
    pub fn quantization_bound(&self) -> f64 {
        let max = self.max_count() as f64;
        let half = 0.5 / max;
        let u_top = (self.ratio(1.0) + half).min(1.0 - f64::EPSILON);
        half * self.r0 / (self.k * self.r_ref * (1.0 - u_top).powi(2))
    }

    pub fn normalize(&self, raw: &RawFrame) -> Calibrated {
        let max = self.max_count();
        let mut saturated = Vec::new();
        let values = raw
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let c = u32::from(c);
                let p = if c >= max {
                    f64::INFINITY
                } else if c == 0 {
                    f64::NEG_INFINITY
                } else {
                    self.pressure_at_ratio(c as f64 / max as f64)
                };
                if !(0.0..=1.0).contains(&p) {
                    saturated.push(i);
                }
                clamp_unit(p)
            })
            .collect();
        Calibrated {
            frame: PressureFrame {
                values,
                timestamp_ms: raw.timestamp_ms,
            },
            saturated,
        }
    }
}

/// Free function form of [`PiezoModel::readout`].
pub fn piezo_readout(pressure: f64, model: &PiezoModel) -> u16 {
    model.readout(pressure)
}

/// Free function form of [`PiezoModel::normalize`].
pub fn normalize(raw: &RawFrame, model: &PiezoModel) -> Calibrated {
    model.normalize(raw)
}

/// Scan rate and the sample-slot order over `(row, col)` intersections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub scan_rate_hz: f64,
    pub grid: SensorGrid,
    pub order: Vec<(usize, usize)>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig::row_major(SensorGrid::default(), 100.0)
    }
}

impl ScanConfig {
    /// Drive one row at a time and read each column of it.
    pub fn row_major(grid: SensorGrid, scan_rate_hz: f64) -> Self {
        let order = (0..grid.rows())
            .flat_map(|r| (0..grid.cols()).map(move |c| (r, c)))
            .collect();
        ScanConfig {
            scan_rate_hz,
            grid,
            order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scan_rate_hz > 0.0 && self.scan_rate_hz.is_finite()) {
            return Err(Error::config(format!(
                "scan rate {} must be > 0",
                self.scan_rate_hz
            )));
        }
        let mut seen = vec![false; self.grid.total()];
        for &(r, c) in &self.order {
            let i = self.grid.frame_index(r, c)?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!("slot ({r}, {c}) scanned twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("scan order misses an intersection"));
        }
        Ok(())
    }

    pub fn period_ms(&self) -> f64 {
        1000.0 / self.scan_rate_hz
    }

    pub fn slots_per_frame(&self) -> usize {
        self.order.len()
    }
}

/// Samples every intersection once in `cfg.order`. The model has no
/// inter-trace crosstalk, so each slot reads its own cell.
pub fn tdma_scan(field: &PressureFrame, model: &PiezoModel, cfg: &ScanConfig) -> Result<RawFrame> {
    if field.len() != cfg.grid.total() {
        return Err(Error::validation(format!(
            "field has {} values, grid has {}",
            field.len(),
            cfg.grid.total()
        )));
    }
    let mut counts = vec![0u16; field.len()];
    for &(row, col) in &cfg.order {
        let idx = cfg.grid.frame_index(row, col)?;
        counts[idx] = model.readout(field.values[idx]);
    }
    Ok(RawFrame {
        counts,
        adc_bits: model.adc_bits,
        timestamp_ms: field.timestamp_ms,
    })
}

/// One scanned frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GloveSample {
    pub truth: PressureFrame,
    pub raw: RawFrame,
}

/// Single-producer frame source: repeats the grasp every
/// `scenario.span_ms() + rest_ms` and scans at the configured rate.
#[derive(Debug, Clone)]
pub struct GloveSim {
    pub scenario: GraspScenario,
    pub layout: SensorLayout,
    pub piezo: PiezoModel,
    pub scan: ScanConfig,
    pub seed: u64,
    pub rest_ms: f64,
    template: PressureTemplate,
    frame: u64,
}

impl GloveSim {
    pub fn new(
        scenario: GraspScenario,
        layout: SensorLayout,
        piezo: PiezoModel,
        scan: ScanConfig,
        seed: u64,
    ) -> Result<Self> {
        scenario.validate()?;
        piezo.validate()?;
        scan.validate()?;
        if layout.grid() != scan.grid {
            return Err(Error::config("layout grid and scan grid differ"));
        }
        let template = PressureTemplate::builtin(scenario.object);
        Ok(GloveSim {
            scenario,
            layout,
            piezo,
            scan,
            seed,
            rest_ms: 500.0,
            template,
            frame: 0,
        })
    }

    pub fn with_template(mut self, template: PressureTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_rest(mut self, rest_ms: f64) -> Self {
        self.rest_ms = rest_ms.max(0.0);
        self
    }

    pub fn cycle_ms(&self) -> f64 {
        self.scenario.span_ms() + self.rest_ms
    }

    /// Timestamp of frame `n` since the stream started.
    pub fn frame_time_ms(&self, n: u64) -> u64 {
        (n as f64 * self.scan.period_ms()).round() as u64
    }

    pub fn sample_at(&self, t_ms: u64) -> GloveSample {
        let cycle = self.cycle_ms();
        let local = if cycle > 0.0 {
            (t_ms as f64) % cycle
        } else {
            t_ms as f64
        };
        let env_t = local.round() as u64;
        let mut truth = synth_from_template(
            &self.scenario,
            &self.template,
            env_t,
            &self.layout,
            self.seed ^ t_ms.rotate_left(32),
        );
        truth.timestamp_ms = t_ms;
        let raw =
            tdma_scan(&truth, &self.piezo, &self.scan).expect("grid validated in constructor");
        GloveSample { truth, raw }
    }
}

impl Iterator for GloveSim {
    type Item = GloveSample;

    fn next(&mut self) -> Option<GloveSample> {
        let t = self.frame_time_ms(self.frame);
        self.frame += 1;
        Some(self.sample_at(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_layout;

    fn hold_time(s: &GraspScenario) -> u64 {
        (s.onset_ms + s.hold_ms / 2.0) as u64
    }

    #[test]
    fn ball_loads_fingertips_and_palm() {
        let layout = default_layout();
        let s = GraspScenario::new(GraspObject::Ball, 1.0);
        let f = synth_pressure(&s, hold_time(&s), &layout, 1);
        for col in 0..5 {
            assert!(f.values[col] > 0.0, "fingertip {col}");
        }
        for i in layout.sensors_in(Region::Palm) {
            assert!(f.values[i] > 0.0, "palm {i}");
        }
    }

    #[test]
    fn zero_before_onset_and_after_release() {
        let layout = default_layout();
        for obj in GraspObject::ALL {
            let s = GraspScenario::new(obj, 1.0).with_noise(0.05);
            assert!(synth_pressure(&s, 0, &layout, 3)
                .values
                .iter()
                .all(|v| *v == 0.0));
            let after = s.span_ms() as u64 + 1;
            assert!(synth_pressure(&s, after, &layout, 3)
                .values
                .iter()
                .all(|v| *v == 0.0));
        }
    }

    #[test]
    fn grip_scales_linearly() {
        let layout = default_layout();
        let full = GraspScenario::new(GraspObject::Ball, 1.0);
        let half = GraspScenario::new(GraspObject::Ball, 0.5);
        for t in [100, 300, 1000, 1900] {
            let a = synth_pressure(&full, t, &layout, 0);
            let b = synth_pressure(&half, t, &layout, 0);
            // Oracle: direct template evaluation.
            let tpl = PressureTemplate::builtin(GraspObject::Ball);
            for i in 0..25 {
                assert_eq!(b.values[i], 0.5 * a.values[i]);
                assert_eq!(b.values[i], tpl.weights[i] * full.envelope(t as f64) * 0.5);
            }
        }
    }

    #[test]
    fn templates_match_descriptions() {
        let layout = default_layout();
        let w = |o| PressureTemplate::builtin(o).weights;
        let fingers_of = |r: Region| layout.sensors_in(r);
        let book = w(GraspObject::Book);
        assert!(fingers_of(Region::Thumb).iter().all(|i| book[*i] > 0.0));
        assert!(fingers_of(Region::Palm).iter().all(|i| book[*i] > 0.0));
        assert!(fingers_of(Region::Ring).iter().all(|i| book[*i] == 0.0));
        let glass = w(GraspObject::Glass);
        for r in [Region::Thumb, Region::Index, Region::Middle] {
            assert!(fingers_of(r).iter().all(|i| glass[*i] > 0.0));
        }
        assert!(fingers_of(Region::Pinky).iter().all(|i| glass[*i] == 0.0));
        let teddy = w(GraspObject::TeddyBear);
        assert!(teddy.iter().all(|v| *v > 0.0 && *v <= 0.3));
    }

    #[test]
    fn readout_examples() {
        let m = PiezoModel::default();
        assert_eq!(m.readout(0.0), 512);
        // r(1) = r0/10, ratio = 10/11, 10/11 * 1023 = 930.0
        assert_eq!(m.readout(1.0), 930);
        let mut prev = 0;
        for i in 0..=1000 {
            let c = m.readout(i as f64 / 1000.0);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn normalize_examples() {
        let m = PiezoModel::default();
        let raw = RawFrame::new(vec![512, 1023, 0], 10, 5).unwrap();
        let cal = m.normalize(&raw);
        assert!(cal.frame.values[0].abs() < 1e-3);
        assert!(!cal.is_saturated(0));
        assert_eq!(cal.frame.values[1], 1.0);
        assert!(cal.is_saturated(1));
        assert_eq!(cal.frame.values[2], 0.0);
        assert!(cal.is_saturated(2));
        assert_eq!(cal.frame.timestamp_ms, 5);
    }

    #[test]
    fn scan_config_validation() {
        let mut cfg = ScanConfig::default();
        assert_eq!(cfg.slots_per_frame(), 25);
        cfg.validate().unwrap();
        cfg.order.pop();
        assert!(cfg.validate().is_err());
        cfg.order.push((0, 0));
        assert!(cfg.validate().is_err());
        let bad_rate = ScanConfig::row_major(SensorGrid::default(), 0.0);
        assert!(bad_rate.validate().is_err());
    }

    #[test]
    fn piezo_validation() {
        let mut m = PiezoModel::default();
        m.validate().unwrap();
        m.adc_bits = 7;
        assert!(m.validate().is_err());
        m.adc_bits = 12;
        m.k = 0.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn scan_rejects_wrong_length() {
        let f = PressureFrame::zeros(24, 0);
        assert!(tdma_scan(&f, &PiezoModel::default(), &ScanConfig::default()).is_err());
    }

    #[test]
    fn sim_is_deterministic_and_timed() {
        let mk = || {
            GloveSim::new(
                GraspScenario::new(GraspObject::Bottle, 0.9).with_noise(0.03),
                default_layout(),
                PiezoModel::default(),
                ScanConfig::default(),
                42,
            )
            .unwrap()
        };
        let a: Vec<_> = mk().take(300).collect();
        let b: Vec<_> = mk().take(300).collect();
        assert_eq!(a, b);
        assert_eq!(a[1].raw.timestamp_ms, 10);
        assert_eq!(a[299].truth.timestamp_ms, 2990);
    }

    #[test]
    fn region_mean_fallback_for_other_grids() {
        let grid = SensorGrid::new(2, 1).unwrap();
        let layout = SensorLayout::new(grid, vec![Region::Thumb, Region::Palm]).unwrap();
        let w = PressureTemplate::builtin(GraspObject::Ball).for_layout(&layout);
        assert!((w[0] - (0.9 + 0.6 + 0.6) / 3.0).abs() < 1e-12);
        assert!((w[1] - 0.8).abs() < 1e-12);
    }
}
