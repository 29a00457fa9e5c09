use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{MotorPair, Protocol, Stimulus, TrialRecord};

/// True-versus-perceived counts. Rows are stimuli, columns responses;
/// trials without a response are counted per row in `rejections`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub rejections: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            k,
            labels,
            counts: vec![vec![0; k]; k],
            rejections: vec![0; k],
        }
    }

    /// Answered trials.
    pub fn answered(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// All trials, including unanswered ones.
    pub fn total(&self) -> u64 {
        self.answered() + self.rejections.iter().sum::<u64>()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    /// Fraction of all trials answered correctly; `None` when there are no
    /// trials.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    pub fn diagonal(&self) -> Vec<u64> {
        (0..self.k).map(|i| self.counts[i][i]).collect()
    }

    /// Comma-separated table with a header row and a trailing `none` column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push_str(",none\n");
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&self.labels[i]);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push_str(&format!(",{}\n", self.rejections[i]));
        }
        out
    }
}

/// Class layout for a protocol: labels and the index of a stimulus.
struct Classes {
    labels: Vec<String>,
    pairs: Vec<MotorPair>,
}

impl Classes {
    fn for_records(protocol: Protocol, records: &[TrialRecord]) -> Self {
        let max_motor = records
            .iter()
            .flat_map(|r| std::iter::once(r.stimulus).chain(r.response))
            .filter_map(|s| match s {
                Stimulus::Motor(m) => Some(m),
                Stimulus::Pair(p) => Some(p.second()),
                _ => None,
            })
            .max();
        let motors = max_motor.map_or(6, |m| (m + 1).max(6));
        match protocol {
            Protocol::Intensity => Classes {
                labels: (1..=3).map(|l| format!("L{l}")).collect(),
                pairs: Vec::new(),
            },
            Protocol::SingleLocation => Classes {
                labels: (0..motors).map(|m| format!("M{m}")).collect(),
                pairs: Vec::new(),
            },
            Protocol::PairLocation => {
                let pairs = MotorPair::all(motors);
                Classes {
                    labels: pairs
                        .iter()
                        .map(|p| format!("M{}+M{}", p.first(), p.second()))
                        .collect(),
                    pairs,
                }
            }
            Protocol::ObjectTask => unreachable!("rejected before"),
        }
    }

    fn index(&self, s: &Stimulus) -> usize {
        match *s {
            Stimulus::Intensity(l) => usize::from(l - 1),
            Stimulus::Motor(m) => m,
            Stimulus::Pair(p) => self
                .pairs
                .iter()
                .position(|q| *q == p)
                .expect("pair in class list"),
            Stimulus::Object(_) => unreachable!("rejected before"),
        }
    }
}

/// Tallies stimulus/response pairs of one discrimination protocol. Pair
/// classes are the `C(n, 2)` motor pairs in lexicographic order.
pub fn confusion(records: &[TrialRecord]) -> Result<ConfusionMatrix> {
    let Some(first) = records.first() else {
        return Ok(ConfusionMatrix::zeros(Vec::new()));
    };
    let protocol = first.stimulus.protocol();
    if protocol == Protocol::ObjectTask {
        return Err(Error::validation("object trials have no confusion matrix"));
    }
    for r in records {
        if r.stimulus.protocol() != protocol || r.response.is_some_and(|x| x.protocol() != protocol)
        {
            return Err(Error::validation(format!(
                "trial {} mixes protocols ({} expected)",
                r.trial_index, protocol
            )));
        }
    }
    let classes = Classes::for_records(protocol, records);
    let mut m = ConfusionMatrix::zeros(classes.labels.clone());
    for r in records {
        let i = classes.index(&r.stimulus);
        match &r.response {
            Some(resp) => m.counts[i][classes.index(resp)] += 1,
            None => m.rejections[i] += 1,
        }
    }
    Ok(m)
}

/// Confusion matrix for an empty protocol session of known size.
pub fn empty_confusion(protocol: Protocol, num_motors: usize) -> ConfusionMatrix {
    let labels = match protocol {
        Protocol::Intensity => (1..=3).map(|l| format!("L{l}")).collect(),
        Protocol::SingleLocation => (0..num_motors).map(|m| format!("M{m}")).collect(),
        Protocol::PairLocation => MotorPair::all(num_motors)
            .iter()
            .map(|p| format!("M{}+M{}", p.first(), p.second()))
            .collect(),
        Protocol::ObjectTask => Vec::new(),
    };
    ConfusionMatrix::zeros(labels)
}
