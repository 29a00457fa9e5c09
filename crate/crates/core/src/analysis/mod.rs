//! Result computation over session logs: confusion matrices, site scores,
//! pickup-time normalization and the Friedman test across compression modes.

mod confusion;
mod friedman;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{Protocol, SessionLog, Stimulus};
use crate::feedback::ModeId;
use crate::glove::GraspObject;
use crate::model::SiteName;

pub use confusion::{confusion, empty_confusion, ConfusionMatrix};
pub use friedman::{
    average_ranks, chi_square_sf, friedman, friedman_permutation_p, friedman_with, ln_gamma,
    regularized_gamma_q, FriedmanOptions, FriedmanResult,
};

/// Rounds a fraction to an integer percent, halves away from zero. The
/// product is snapped to 1e-6 first so that 0.765 reads as 76.5, not
/// 76.4999...
pub fn round_percent(fraction: f64) -> i64 {
    let x = fraction * 100.0;
    let snapped = (x * 1e6).round() / 1e6;
    snapped.round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteScore {
    pub mean: f64,
    pub percent: i64,
}

/// Unweighted mean of the intensity, single and pair accuracies.
pub fn aggregate_site_score(acc_intensity: f64, acc_single: f64, acc_pair: f64) -> SiteScore {
    let mean = (acc_intensity + acc_single + acc_pair) / 3.0;
    SiteScore {
        mean,
        percent: round_percent(mean),
    }
}

/// Grouping over which pickup times are averaged before dividing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationScope {
    #[default]
    SubjectCondition,
    Subject,
    Condition,
    All,
}

impl std::str::FromStr for NormalizationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject-condition" => Ok(NormalizationScope::SubjectCondition),
            "subject" => Ok(NormalizationScope::Subject),
            "condition" => Ok(NormalizationScope::Condition),
            "all" => Ok(NormalizationScope::All),
            other => Err(Error::config(format!(
                "unknown normalization scope {other:?}"
            ))),
        }
    }
}

/// One completed pickup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSample {
    pub subject: String,
    /// Compression mode label, e.g. `finger:6`.
    pub condition: String,
    pub object: GraspObject,
    pub trial: usize,
    pub time_ms: f64,
}

impl TimeSample {
    fn scope_key(&self, scope: NormalizationScope) -> (&str, &str) {
        match scope {
            NormalizationScope::SubjectCondition => (&self.subject, &self.condition),
            NormalizationScope::Subject => (&self.subject, ""),
            NormalizationScope::Condition => ("", &self.condition),
            NormalizationScope::All => ("", ""),
        }
    }
}

/// Divides each duration by the mean of its scope. Output order follows
/// input order.
pub fn normalize_times(samples: &[TimeSample], scope: NormalizationScope) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::validation("no pickup times to normalize"));
    }
    let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for s in samples {
        if !(s.time_ms > 0.0 && s.time_ms.is_finite()) {
            return Err(Error::validation(format!(
                "pickup time {} must be positive",
                s.time_ms
            )));
        }
        let e = sums.entry(s.scope_key(scope)).or_default();
        e.0 += s.time_ms;
        e.1 += 1;
    }
    Ok(samples
        .iter()
        .map(|s| {
            let (sum, n) = sums[&s.scope_key(scope)];
            s.time_ms / (sum / n as f64)
        })
        .collect())
}

/// Pickup times of a set of object logs.
pub fn time_samples(logs: &[SessionLog]) -> Result<Vec<TimeSample>> {
    let mut out = Vec::new();
    for log in logs {
        if log.header.protocol != Protocol::ObjectTask {
            return Err(Error::validation(format!(
                "{} is not an object log",
                log.header.session_id
            )));
        }
        let condition = log
            .mode()
            .map_or_else(|| "none".to_string(), |m| m.to_string());
        for r in &log.records {
            let Stimulus::Object(object) = r.stimulus else {
                return Err(Error::validation("object log holds a non-object trial"));
            };
            let Some(time_ms) = r.elapsed_ms else {
                continue;
            };
            out.push(TimeSample {
                subject: log.header.participant.clone(),
                condition: condition.clone(),
                object,
                trial: r.trial_index,
                time_ms,
            });
        }
    }
    Ok(out)
}

/// Rows of the Friedman matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockScheme {
    #[default]
    Subject,
    SubjectObject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSummaryOptions {
    pub scope: NormalizationScope,
    pub blocks: BlockScheme,
}

impl Default for ObjectSummaryOptions {
    /// Per-subject scope: normalizing within each mode would pin every mode
    /// mean to exactly 1 and leave nothing to compare.
    fn default() -> Self {
        ObjectSummaryOptions {
            scope: NormalizationScope::Subject,
            blocks: BlockScheme::Subject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub modes: Vec<ModeId>,
    /// Block labels in row order.
    pub blocks: Vec<String>,
    /// Mean normalized pickup time per block (row) and mode (column).
    pub matrix: Vec<Vec<f64>>,
    pub mode_means: Vec<f64>,
    pub options: ObjectSummaryOptions,
    /// Absent with a single block.
    pub friedman: Option<FriedmanResult>,
}

impl ObjectSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block");
        for m in &self.modes {
            out.push_str(&format!(",{m}"));
        }
        out.push('\n');
        for (label, row) in self.blocks.iter().zip(&self.matrix) {
            out.push_str(label);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for v in &self.mode_means {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
        out
    }
}

/// Mean summed in ascending order, so equal multisets give bit-identical
/// means whatever order the trials ran in. Exact ties matter to the ranks.
fn sorted_mean(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Normalizes pickup times, averages them per block and mode, and runs the
/// Friedman test with the six builtin modes as treatments.
pub fn object_task_summary(
    logs: &[SessionLog],
    options: ObjectSummaryOptions,
) -> Result<ObjectSummary> {
    if let Some(bad) = logs.iter().find(|l| !l.is_complete()) {
        return Err(Error::validation(format!(
            "log {} is incomplete",
            bad.header.session_id
        )));
    }
    let samples = time_samples(logs)?;
    let normalized = normalize_times(&samples, options.scope)?;
    let modes = ModeId::BUILTIN.to_vec();

    let block_of = |s: &TimeSample| match options.blocks {
        BlockScheme::Subject => s.subject.clone(),
        BlockScheme::SubjectObject => format!("{}/{}", s.subject, s.object),
    };
    let mut cells: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (s, v) in samples.iter().zip(&normalized) {
        cells
            .entry(block_of(s))
            .or_default()
            .entry(s.condition.clone())
            .or_default()
            .push(*v);
    }
    let mut matrix = Vec::with_capacity(cells.len());
    for (block, by_mode) in &cells {
        let row = modes
            .iter()
            .map(|m| {
                by_mode
                    .get(&m.to_string())
                    .map(|xs| sorted_mean(xs))
                    .ok_or_else(|| {
                        Error::validation(format!("block {block} has no data for mode {m}"))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        matrix.push(row);
    }
    let mode_means = (0..modes.len())
        .map(|j| matrix.iter().map(|r| r[j]).sum::<f64>() / matrix.len() as f64)
        .collect();
    let friedman = if matrix.len() >= 2 {
        Some(friedman(&matrix)?)
    } else {
        None
    };
    Ok(ObjectSummary {
        modes,
        blocks: cells.into_keys().collect(),
        matrix,
        mode_means,
        options,
        friedman,
    })
}

/// Result document for one session. Serialization is deterministic, so a
/// summary computed live and one recomputed from the persisted log match
/// byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub participant: String,
    pub site: SiteName,
    pub protocol: Protocol,
    pub mode: Option<ModeId>,
    pub complete: bool,
    pub trials: usize,
    pub answered: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    /// Mean policy credit; differs from accuracy only for pair trials.
    pub mean_score: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
    pub mean_elapsed_ms: Option<f64>,
}

impl SessionSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

pub fn summarize(log: &SessionLog) -> Result<SessionSummary> {
    let h = &log.header;
    let records = &log.records;
    let trials = records.len();
    let answered = records
        .iter()
        .filter(|r| r.response.is_some() || r.elapsed_ms.is_some())
        .count();
    let correct = records.iter().filter(|r| r.correct == Some(true)).count();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let (confusion, accuracy, mean_score, mean_elapsed_ms) = if h.protocol.is_discrimination() {
        let num_motors = h.site.num_motors;
        let m = if records.is_empty() {
            empty_confusion(h.protocol, num_motors)
        } else {
            confusion(records)?
        };
        let acc = m.accuracy();
        let score = mean(records.iter().filter_map(|r| r.score).collect());
        (Some(m), acc, score, None)
    } else {
        let elapsed = mean(records.iter().filter_map(|r| r.elapsed_ms).collect());
        (None, None, None, elapsed)
    };
    Ok(SessionSummary {
        session_id: h.session_id.clone(),
        participant: h.participant.clone(),
        site: h.site.name.clone(),
        protocol: h.protocol,
        mode: log.mode(),
        complete: log.is_complete(),
        trials,
        answered,
        correct,
        accuracy,
        mean_score,
        confusion,
        mean_elapsed_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteScoreRow {
    pub participant: String,
    pub site: SiteName,
    pub intensity: f64,
    pub single: f64,
    pub pair: f64,
    pub score: SiteScore,
}

/// Everything `analyze` produces for a directory of logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub sessions: Vec<SessionSummary>,
    pub site_scores: Vec<SiteScoreRow>,
    pub object: Option<ObjectSummary>,
}

impl AnalysisReport {
    /// Sessions are sorted by id. Site scores appear for each participant
    /// and site with all three discrimination protocols present (the latest
    /// complete session of each counts). The object summary needs every
    /// builtin mode for every participant; otherwise it is left out and the
    /// reason returned alongside.
    pub fn build(
        logs: &[SessionLog],
        options: ObjectSummaryOptions,
    ) -> Result<(Self, Option<String>)> {
        let mut sorted: Vec<&SessionLog> = logs.iter().collect();
        sorted.sort_by(|a, b| a.header.session_id.cmp(&b.header.session_id));
        let sessions = sorted
            .iter()
            .map(|l| summarize(l))
            .collect::<Result<Vec<_>>>()?;

        let mut by_site: BTreeMap<(String, String), BTreeMap<Protocol, f64>> = BTreeMap::new();
        let mut site_names: BTreeMap<String, SiteName> = BTreeMap::new();
        for s in &sessions {
            let (Some(acc), true) = (s.accuracy, s.complete) else {
                continue;
            };
            let site_key = s.site.to_string();
            site_names.insert(site_key.clone(), s.site.clone());
            by_site
                .entry((s.participant.clone(), site_key))
                .or_default()
                .insert(s.protocol, acc);
        }
        let site_scores = by_site
            .into_iter()
            .filter_map(|((participant, key), accs)| {
                let get = |p| accs.get(&p).copied();
                let (i, s, p) = (
                    get(Protocol::Intensity)?,
                    get(Protocol::SingleLocation)?,
                    get(Protocol::PairLocation)?,
                );
                Some(SiteScoreRow {
                    participant,
                    site: site_names[&key].clone(),
                    intensity: i,
                    single: s,
                    pair: p,
                    score: aggregate_site_score(i, s, p),
                })
            })
            .collect();

        let object_logs: Vec<SessionLog> = sorted
            .iter()
            .filter(|l| l.header.protocol == Protocol::ObjectTask)
            .map(|l| (*l).clone())
            .collect();
        let (object, note) = if object_logs.is_empty() {
            (None, None)
        } else {
            match object_task_summary(&object_logs, options) {
                Ok(o) => (Some(o), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        Ok((
            AnalysisReport {
                sessions,
                site_scores,
                object,
            },
            note,
        ))
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn sessions_csv(&self) -> String {
        let mut out =
            String::from("session_id,participant,site,protocol,mode,complete,trials,answered,correct,accuracy,mean_score,mean_elapsed_ms\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for s in &self.sessions {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                s.session_id,
                s.participant,
                s.site,
                s.protocol,
                s.mode.map_or_else(String::new, |m| m.to_string()),
                s.complete,
                s.trials,
                s.answered,
                s.correct,
                opt(s.accuracy),
                opt(s.mean_score),
                opt(s.mean_elapsed_ms),
            ));
        }
        out
    }

    pub fn site_scores_csv(&self) -> String {
        let mut out = String::from("participant,site,intensity,single,pair,mean,percent\n");
        for r in &self.site_scores {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.participant, r.site, r.intensity, r.single, r.pair, r.score.mean, r.score.percent
            ));
        }
        out
    }

    /// File name and contents of every report artifact.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut files = vec![
            ("summary.json".to_string(), self.summary_json()),
            ("sessions.csv".to_string(), self.sessions_csv()),
        ];
        if !self.site_scores.is_empty() {
            files.push(("site_scores.csv".to_string(), self.site_scores_csv()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sessions {
            if let Some(m) = &s.confusion {
                let name = format!("confusion_{}.csv", s.session_id);
                if seen.insert(name.clone()) {
                    files.push((name, m.to_csv()));
                }
            }
        }
        if let Some(o) = &self.object {
            files.push(("object_modes.csv".to_string(), o.to_csv()));
        }
        files
    }
}
