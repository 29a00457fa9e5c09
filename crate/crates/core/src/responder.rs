//! Simulated participants for closed-loop runs.

use std::collections::HashMap;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{
    MotorPair, PickupSource, Protocol, Response, ResponseEvent, ResponseSource, Stimulus,
    TrialPrompt,
};
use crate::feedback::ModeId;
use crate::glove::GraspObject;
use crate::model::{Arrangement, BodySite};

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Row-stochastic `k x k` matrix; row = true class, column = perceived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    rows: Vec<Vec<f64>>,
}

impl ConfusionTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::validation("confusion table is empty"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::validation(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(Error::validation(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::validation(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(ConfusionTable { rows })
    }

    pub fn identity(k: usize) -> Self {
        ConfusionTable {
            rows: (0..k)
                .map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Parses a whitespace- or comma-separated `k x k` table; `#` starts a
    /// comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(n, l)| {
                l.split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::parse(n + 1, format!("bad number {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        ConfusionTable::new(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResponderKind {
    Perfect,
    Uniform,
    ConfusionMatrix {
        table: ConfusionTable,
    },
    /// Percept `j` for true class `i` with weight `exp(-d(i, j)^2 / (2 sigma^2))`,
    /// `d` in motor-spacing units and wrapping on a ring.
    SpatialGaussian {
        sigma: f64,
    },
}

impl fmt::Display for ResponderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResponderKind::Perfect => f.write_str("perfect"),
            ResponderKind::Uniform => f.write_str("uniform"),
            ResponderKind::ConfusionMatrix { table } => {
                write!(f, "confusion({}x{})", table.k(), table.k())
            }
            ResponderKind::SpatialGaussian { sigma } => write!(f, "spatial:{sigma}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponderModel {
    pub kind: ResponderKind,
    pub site: BodySite,
    pub seed: u64,
}

impl ResponderModel {
    pub fn new(kind: ResponderKind, site: BodySite, seed: u64) -> Result<Self> {
        if let ResponderKind::SpatialGaussian { sigma } = kind {
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(Error::config(format!("sigma {sigma} must be > 0")));
            }
        }
        Ok(ResponderModel { kind, site, seed })
    }
}

/// A seeded responder instance.
#[derive(Debug, Clone)]
pub struct Responder {
    model: ResponderModel,
    rng: ChaCha8Rng,
    /// Reported latency for every answer.
    pub latency_ms: u64,
}

impl Responder {
    pub fn new(model: ResponderModel) -> Self {
        Responder {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            model,
            latency_ms: 1200,
        }
    }

    pub fn model(&self) -> &ResponderModel {
        &self.model
    }

    /// Number of classes and the class-distance metric for `protocol`.
    fn domain(&self, protocol: Protocol) -> Result<(usize, Arrangement)> {
        match protocol {
            Protocol::Intensity => Ok((3, Arrangement::Line)),
            Protocol::SingleLocation | Protocol::PairLocation => {
                Ok((self.model.site.num_motors, self.model.site.arrangement))
            }
            Protocol::ObjectTask => {
                Err(Error::validation("object stimuli have no response domain"))
            }
        }
    }

    fn weights(&self, truth: usize, k: usize, arrangement: Arrangement) -> Result<Vec<f64>> {
        Ok(match &self.model.kind {
            ResponderKind::Perfect => (0..k).map(|j| f64::from(u8::from(j == truth))).collect(),
            ResponderKind::Uniform => vec![1.0; k],
            ResponderKind::ConfusionMatrix { table } => {
                if table.k() != k {
                    return Err(Error::validation(format!(
                        "confusion table is {0}x{0}, stimulus domain has {k} classes",
                        table.k()
                    )));
                }
                table.row(truth).to_vec()
            }
            ResponderKind::SpatialGaussian { sigma } => {
                let site = BodySite {
                    arrangement,
                    num_motors: k,
                    ..self.model.site.clone()
                };
                (0..k)
                    .map(|j| {
                        let d = site.motor_distance(truth, j) as f64;
                        (-d * d / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
        })
    }

    fn sample(&mut self, weights: &[f64]) -> usize {
        match WeightedIndex::new(weights) {
            Ok(dist) => dist.sample(&mut self.rng),
            Err(_) => self.rng.random_range(0..weights.len()),
        }
    }

    pub fn respond(&mut self, stimulus: &Stimulus) -> Result<Response> {
        let protocol = stimulus.protocol();
        stimulus.validate(protocol, &self.model.site)?;
        let (k, arrangement) = self.domain(protocol)?;
        Ok(match *stimulus {
            Stimulus::Intensity(level) => {
                let w = self.weights(usize::from(level - 1), k, arrangement)?;
                Stimulus::Intensity(self.sample(&w) as u8 + 1)
            }
            Stimulus::Motor(m) => {
                let w = self.weights(m, k, arrangement)?;
                Stimulus::Motor(self.sample(&w))
            }
            Stimulus::Pair(p) => {
                let first = {
                    let w = self.weights(p.first(), k, arrangement)?;
                    self.sample(&w)
                };
                // Resampling the second percept until it differs is the same
                // as sampling it from its row with `first` removed.
                let mut w = self.weights(p.second(), k, arrangement)?;
                w[first] = 0.0;
                let second = if w.iter().any(|x| *x > 0.0) {
                    self.sample(&w)
                } else {
                    let others: Vec<usize> = (0..k).filter(|j| *j != first).collect();
                    others[self.rng.random_range(0..others.len())]
                };
                Stimulus::Pair(MotorPair::new(first, second)?)
            }
            Stimulus::Object(_) => unreachable!("rejected by domain()"),
        })
    }
}

/// One-shot form: a fresh responder seeded from `model`.
pub fn respond(stimulus: &Stimulus, model: &ResponderModel) -> Result<Response> {
    Responder::new(model.clone()).respond(stimulus)
}

impl ResponseSource for Responder {
    fn respond(&mut self, prompt: &TrialPrompt) -> ResponseEvent {
        match Responder::respond(self, &prompt.stimulus) {
            Ok(response) => ResponseEvent::Answer {
                response,
                latency_ms: self.latency_ms,
            },
            Err(_) => ResponseEvent::NoResponse,
        }
    }
}

/// Log-normal pickup times around a per-object base, optionally scaled per
/// compression mode.
#[derive(Debug, Clone)]
pub struct SimulatedPickup {
    pub base_ms: HashMap<GraspObject, f64>,
    pub mode_factor: HashMap<ModeId, f64>,
    pub noise_sigma: f64,
    rng: ChaCha8Rng,
}

impl SimulatedPickup {
    /// No mode effect: every mode shares the same time distribution.
    pub fn null(seed: u64) -> Self {
        let base_ms = [
            (GraspObject::Ball, 3200.0),
            (GraspObject::Book, 4100.0),
            (GraspObject::Glass, 3600.0),
            (GraspObject::Bottle, 3400.0),
            (GraspObject::TeddyBear, 2900.0),
        ]
        .into_iter()
        .collect();
        SimulatedPickup {
            base_ms,
            mode_factor: HashMap::new(),
            noise_sigma: 0.25,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_mode_factor(mut self, mode: ModeId, factor: f64) -> Self {
        self.mode_factor.insert(mode, factor);
        self
    }
}

impl PickupSource for SimulatedPickup {
    fn pickup(&mut self, object: GraspObject, mode: Option<ModeId>) -> Option<f64> {
        let base = self.base_ms.get(&object).copied()?;
        let factor = mode
            .and_then(|m| self.mode_factor.get(&m).copied())
            .unwrap_or(1.0);
        let noise = if self.noise_sigma > 0.0 {
            LogNormal::new(0.0, self.noise_sigma)
                .ok()?
                .sample(&mut self.rng)
        } else {
            1.0
        };
        Some(base * factor * noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: ResponderKind, site: BodySite) -> ResponderModel {
        ResponderModel::new(kind, site, 17).unwrap()
    }

    #[test]
    fn perfect_echoes() {
        let mut r = Responder::new(model(ResponderKind::Perfect, BodySite::shoulder()));
        for s in [
            Stimulus::Intensity(2),
            Stimulus::Motor(4),
            Stimulus::Pair(MotorPair::new(0, 5).unwrap()),
        ] {
            assert_eq!(r.respond(&s).unwrap(), s);
        }
    }

    #[test]
    fn tiny_sigma_is_perfect() {
        for site in [BodySite::upper_arm(), BodySite::lower_back()] {
            let mut r = Responder::new(model(ResponderKind::SpatialGaussian { sigma: 1e-3 }, site));
            for m in 0..6 {
                assert_eq!(r.respond(&Stimulus::Motor(m)).unwrap(), Stimulus::Motor(m));
            }
            for p in MotorPair::all(6) {
                assert_eq!(r.respond(&Stimulus::Pair(p)).unwrap(), Stimulus::Pair(p));
            }
        }
    }

    #[test]
    fn table_validation() {
        assert!(ConfusionTable::new(vec![vec![0.5, 0.4], vec![0.0, 1.0]]).is_err());
        assert!(ConfusionTable::new(vec![vec![1.5, -0.5], vec![0.0, 1.0]]).is_err());
        assert!(ConfusionTable::new(vec![vec![1.0, 0.0]]).is_err());
        assert!(ConfusionTable::new(vec![]).is_err());
        let t = ConfusionTable::parse("# 2x2\n0.9 0.1\n0.2,0.8\n").unwrap();
        assert_eq!(t.row(1), &[0.2, 0.8]);
        assert!(ResponderModel::new(
            ResponderKind::SpatialGaussian { sigma: 0.0 },
            BodySite::shoulder(),
            0
        )
        .is_err());
    }

    #[test]
    fn wrong_domain_rejected() {
        let mut r = Responder::new(model(
            ResponderKind::ConfusionMatrix {
                table: ConfusionTable::identity(4),
            },
            BodySite::shoulder(),
        ));
        assert!(r.respond(&Stimulus::Motor(1)).is_err());
        assert!(r.respond(&Stimulus::Object(GraspObject::Ball)).is_err());
        assert!(r.respond(&Stimulus::Motor(9)).is_err());
    }

    #[test]
    fn pair_responses_are_distinct() {
        // Both motors collapse onto motor 0; the second must move elsewhere.
        let mut rows = vec![vec![0.0; 6]; 6];
        for row in &mut rows {
            row[0] = 1.0;
        }
        let table = ConfusionTable::new(rows).unwrap();
        let mut r = Responder::new(model(
            ResponderKind::ConfusionMatrix { table },
            BodySite::shoulder(),
        ));
        for _ in 0..200 {
            let Stimulus::Pair(p) = r
                .respond(&Stimulus::Pair(MotorPair::new(2, 3).unwrap()))
                .unwrap()
            else {
                panic!()
            };
            assert_eq!(p.first(), 0);
            assert_ne!(p.second(), 0);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let m = model(ResponderKind::Uniform, BodySite::shoulder());
        let draw = |m: &ResponderModel| {
            let mut r = Responder::new(m.clone());
            (0..50)
                .map(|i| r.respond(&Stimulus::Motor(i % 6)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(&m), draw(&m));
        assert_eq!(
            respond(&Stimulus::Motor(1), &m).unwrap(),
            respond(&Stimulus::Motor(1), &m).unwrap()
        );
    }

    #[test]
    fn pickup_times_positive_and_seeded() {
        let mut a = SimulatedPickup::null(3);
        let mut b = SimulatedPickup::null(3);
        for o in GraspObject::ALL {
            let t = a.pickup(o, None).unwrap();
            assert!(t > 0.0);
            assert_eq!(Some(t), b.pickup(o, None));
        }
        let mut slow = SimulatedPickup::null(3).with_mode_factor("finger:1".parse().unwrap(), 2.0);
        let mut fast = SimulatedPickup::null(3);
        let m = Some("finger:1".parse().unwrap());
        assert!(
            (slow.pickup(GraspObject::Ball, m).unwrap()
                / fast.pickup(GraspObject::Ball, m).unwrap()
                - 2.0)
                .abs()
                < 1e-12
        );
    }
}
