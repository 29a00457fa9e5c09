//! Discrete-event model of the wireless link, driven by a virtual clock.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub loss_prob: f64,
    pub latency_ms: f64,
    pub jitter_ms: f64,
    pub reorder_prob: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            loss_prob: 0.02,
            latency_ms: 30.0,
            jitter_ms: 5.0,
            reorder_prob: 0.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn ideal(latency_ms: f64) -> Self {
        ChannelConfig {
            loss_prob: 0.0,
            latency_ms,
            jitter_ms: 0.0,
            reorder_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("loss_prob", self.loss_prob),
            ("reorder_prob", self.reorder_prob),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !(self.latency_ms >= 0.0 && self.jitter_ms >= 0.0) {
            return Err(Error::config("latency and jitter must be >= 0"));
        }
        Ok(())
    }

    /// Upper bound on one-way latency.
    pub fn max_latency_ms(&self) -> f64 {
        self.latency_ms + self.jitter_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Sent,
    Dropped,
    Delivered,
    Reordered,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Sent => "sent",
            EventKind::Dropped => "dropped",
            EventKind::Delivered => "delivered",
            EventKind::Reordered => "reordered",
        })
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "sent" => EventKind::Sent,
            "dropped" => EventKind::Dropped,
            "delivered" => EventKind::Delivered,
            "reordered" => EventKind::Reordered,
            other => return Err(Error::validation(format!("unknown trace event {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_ms: u64,
    pub kind: EventKind,
    pub seq: u8,
}

/// Renders a trace as `t_ms,event,seq` lines.
pub fn trace_to_log(trace: &[TraceEvent]) -> String {
    trace
        .iter()
        .map(|e| format!("{},{},{}\n", e.t_ms, e.kind, e.seq))
        .collect()
}

pub fn parse_trace_log(text: &str) -> Result<Vec<TraceEvent>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut it = line.split(',');
            let (Some(t), Some(kind), Some(seq), None) =
                (it.next(), it.next(), it.next(), it.next())
            else {
                return Err(Error::parse(n + 1, "expected `t_ms,event,seq`"));
            };
            Ok(TraceEvent {
                t_ms: t
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(n + 1, "bad t_ms"))?,
                kind: kind
                    .parse()
                    .map_err(|e: Error| Error::parse(n + 1, e.to_string()))?,
                seq: seq
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(n + 1, "bad seq"))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Dropped,
    Scheduled { deliver_at_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub seq: u8,
    pub bytes: Vec<u8>,
    pub sent_at_ms: u64,
    pub delivered_at_ms: u64,
}

#[derive(Debug, Clone)]
struct InFlight {
    order: u64,
    seq: u8,
    bytes: Vec<u8>,
    sent_at_ms: u64,
    deliver_at_ms: u64,
}

/// Lossy, latent link. Sends are scheduled against the caller's clock and
/// come out of [`poll`](Channel::poll) once their delivery time has passed.
#[derive(Debug)]
pub struct Channel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    in_flight: Vec<InFlight>,
    trace: Vec<TraceEvent>,
    sent: u64,
    max_in_flight: usize,
}

impl Channel {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Channel {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            in_flight: Vec::new(),
            trace: Vec::new(),
            sent: 0,
            max_in_flight: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Largest number of packets simultaneously in flight so far.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn send(&mut self, seq: u8, bytes: Vec<u8>, now_ms: u64) -> SendOutcome {
        self.trace.push(TraceEvent {
            t_ms: now_ms,
            kind: EventKind::Sent,
            seq,
        });
        let order = self.sent;
        self.sent += 1;
        if self.rng.random::<f64>() < self.cfg.loss_prob {
            self.trace.push(TraceEvent {
                t_ms: now_ms,
                kind: EventKind::Dropped,
                seq,
            });
            return SendOutcome::Dropped;
        }
        let jitter = if self.cfg.jitter_ms > 0.0 {
            self.rng
                .random_range(-self.cfg.jitter_ms..=self.cfg.jitter_ms)
        } else {
            0.0
        };
        let latency = (self.cfg.latency_ms + jitter).max(0.0).round() as u64;
        let mut deliver_at_ms = now_ms + latency;
        let reorder =
            self.cfg.reorder_prob > 0.0 && self.rng.random::<f64>() < self.cfg.reorder_prob;
        if reorder {
            if let Some(prev) = self.in_flight.iter_mut().max_by_key(|p| p.order) {
                if prev.deliver_at_ms < deliver_at_ms {
                    std::mem::swap(&mut prev.deliver_at_ms, &mut deliver_at_ms);
                    self.trace.push(TraceEvent {
                        t_ms: now_ms,
                        kind: EventKind::Reordered,
                        seq,
                    });
                }
            }
        }
        self.in_flight.push(InFlight {
            order,
            seq,
            bytes,
            sent_at_ms: now_ms,
            deliver_at_ms,
        });
        self.max_in_flight = self.max_in_flight.max(self.in_flight.len());
        SendOutcome::Scheduled { deliver_at_ms }
    }

    /// Removes and returns every packet due at or before `now_ms`, in
    /// delivery order.
    pub fn poll(&mut self, now_ms: u64) -> Vec<Delivery> {
        let (mut due, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.in_flight)
            .into_iter()
            .partition(|p| p.deliver_at_ms <= now_ms);
        self.in_flight = keep;
        due.sort_by_key(|p| (p.deliver_at_ms, p.order));
        due.into_iter()
            .map(|p| {
                self.trace.push(TraceEvent {
                    t_ms: p.deliver_at_ms,
                    kind: EventKind::Delivered,
                    seq: p.seq,
                });
                Delivery {
                    seq: p.seq,
                    bytes: p.bytes,
                    sent_at_ms: p.sent_at_ms,
                    delivered_at_ms: p.deliver_at_ms,
                }
            })
            .collect()
    }

    /// Delivers everything still in flight.
    pub fn flush(&mut self) -> Vec<Delivery> {
        self.poll(u64::MAX)
    }
}

/// One-shot form: sends a single packet over a fresh channel seeded from
/// `cfg` and returns either the delivery or `None` when dropped.
pub fn channel_send(
    seq: u8,
    bytes: Vec<u8>,
    cfg: &ChannelConfig,
    now_ms: u64,
) -> Result<Option<Delivery>> {
    let mut ch = Channel::new(*cfg)?;
    Ok(match ch.send(seq, bytes, now_ms) {
        SendOutcome::Dropped => None,
        SendOutcome::Scheduled { .. } => ch.flush().pop(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub reordered: u64,
    pub mean_latency_ms: f64,
}

/// Counts events and matches each delivery to the earliest outstanding send
/// with the same sequence number for latency.
pub fn link_stats(trace: &[TraceEvent]) -> LinkStats {
    let mut stats = LinkStats::default();
    let mut outstanding: HashMap<u8, VecDeque<u64>> = HashMap::new();
    let mut latency_sum = 0.0;
    let mut matched = 0u64;
    for e in trace {
        match e.kind {
            EventKind::Sent => {
                stats.sent += 1;
                outstanding.entry(e.seq).or_default().push_back(e.t_ms);
            }
            EventKind::Dropped => {
                stats.dropped += 1;
                if let Some(q) = outstanding.get_mut(&e.seq) {
                    q.pop_back();
                }
            }
            EventKind::Delivered => {
                stats.delivered += 1;
                if let Some(sent_at) = outstanding.get_mut(&e.seq).and_then(|q| q.pop_front()) {
                    latency_sum += e.t_ms.saturating_sub(sent_at) as f64;
                    matched += 1;
                }
            }
            EventKind::Reordered => stats.reordered += 1,
        }
    }
    if matched > 0 {
        stats.mean_latency_ms = latency_sum / matched as f64;
    }
    stats
}

/// Receiver-side gap detection over wrapping 8-bit sequence numbers.
///
/// A jump forward of less than 128 marks the skipped numbers missing; a
/// number behind the expected one is a late arrival and clears its gap.
#[derive(Debug, Clone, Default)]
pub struct SequenceTracker {
    next: Option<u8>,
    missing: Vec<u8>,
}

impl SequenceTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tracker that knows the sender's first sequence number, so losses
    /// before the first arrival are caught too.
    pub fn starting_at(first: u8) -> Self {
        SequenceTracker {
            next: Some(first),
            missing: Vec::new(),
        }
    }

    fn skip_to(&mut self, next: u8, stop: u8) -> Vec<u8> {
        let mut gaps = Vec::new();
        let mut s = next;
        while s != stop {
            gaps.push(s);
            s = s.wrapping_add(1);
        }
        self.missing.extend_from_slice(&gaps);
        gaps
    }

    /// Records an arrival; returns the sequence numbers newly found missing.
    pub fn observe(&mut self, seq: u8) -> Vec<u8> {
        let Some(next) = self.next else {
            self.next = Some(seq.wrapping_add(1));
            return Vec::new();
        };
        if seq.wrapping_sub(next) < 128 {
            self.next = Some(seq.wrapping_add(1));
            self.skip_to(next, seq)
        } else {
            if let Some(pos) = self.missing.iter().rposition(|m| *m == seq) {
                self.missing.remove(pos);
            }
            Vec::new()
        }
    }

    /// Accounts for sends after the last arrival, given the final sequence
    /// number the sender used.
    pub fn finish(&mut self, last_sent: u8) -> Vec<u8> {
        match self.next {
            Some(next) if last_sent.wrapping_sub(next) < 128 => {
                let after = last_sent.wrapping_add(1);
                self.next = Some(after);
                self.skip_to(next, after)
            }
            _ => Vec::new(),
        }
    }

    /// Outstanding missing sequence numbers, oldest first.
    pub fn missing(&self) -> &[u8] {
        &self.missing
    }
}
