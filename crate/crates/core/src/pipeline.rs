//! Discrete-event model of the whole feedback path: glove scan, calibration,
//! compression and encoding, packet framing, the radio link and the patch.
//!
//! Every hand-off between stages is a bounded queue that drops its oldest
//! entry when full, so a slow stage loses stale frames instead of letting
//! latency grow without limit.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{CompressionMode, EncoderConfig, FeedbackEngine};
use crate::glove::{GloveSample, GloveSim, GraspScenario, PiezoModel, ScanConfig};
use crate::model::{MotorCommand, PressureFrame, SensorLayout};
use crate::transport::{
    decode_packet, encode_packet, motor_command_payload, parse_motor_command, Channel,
    ChannelConfig, PacketType, SequenceTracker,
};

/// FIFO with a fixed capacity. Pushing into a full queue evicts the oldest
/// entry.
#[derive(Debug, Clone)]
pub struct BoundedQueue<T> {
    items: VecDeque<T>,
    capacity: usize,
    dropped: u64,
    max_depth: usize,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        BoundedQueue {
            items: VecDeque::with_capacity(capacity),
            capacity,
            dropped: 0,
            max_depth: 0,
        }
    }

    /// Returns the evicted entry, if any.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity {
            self.dropped += 1;
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        self.max_depth = self.max_depth.max(self.items.len());
        evicted
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub queue_capacity: usize,
    /// Processing time per frame on the glove controller.
    pub process_ms: u64,
    /// Minimum spacing between radio transmissions.
    pub tx_interval_ms: u64,
    /// Time the patch needs to apply one command.
    pub apply_ms: u64,
    pub channel: ChannelConfig,
    /// Glove rest between repeated grasps.
    pub rest_ms: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            queue_capacity: 8,
            process_ms: 2,
            tx_interval_ms: 5,
            apply_ms: 1,
            channel: ChannelConfig::default(),
            rest_ms: 500.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queue_capacity == 0 {
            return Err(Error::config("queue capacity must be positive"));
        }
        if self.tx_interval_ms == 0 {
            return Err(Error::config("transmit interval must be positive"));
        }
        self.channel.validate()
    }
}

/// Something that happened during one simulated millisecond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PipelineEvent {
    /// A scan finished; `pressures` is the calibrated frame.
    Frame {
        t_ms: u64,
        pressures: PressureFrame,
        saturated: usize,
    },
    /// The controller produced a command and queued its packet.
    Command {
        t_ms: u64,
        seq: u8,
        command: MotorCommand,
    },
    /// The patch switched its motors to a new command.
    Applied {
        t_ms: u64,
        seq: u8,
        command: MotorCommand,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub capacity: usize,
    pub max_depth: usize,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub duration_ms: u64,
    pub frames: u64,
    pub commands: u64,
    pub packets_sent: u64,
    pub packets_delivered: u64,
    pub packets_lost: u64,
    pub stale_discarded: u64,
    pub corrupt: u64,
    pub applied: u64,
    pub scan_queue: QueueStats,
    pub tx_queue: QueueStats,
    pub rx_queue: QueueStats,
    pub max_in_flight: usize,
    /// Sequence numbers the patch never received.
    pub missing_seqs: u64,
    /// Largest scan-to-apply delay seen.
    pub max_latency_ms: u64,
}

/// One glove, one controller, one link, one patch.
#[derive(Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
    glove: GloveSim,
    engine: FeedbackEngine,
    channel: Channel,
    scan_q: BoundedQueue<GloveSample>,
    tx_q: BoundedQueue<(u8, Vec<u8>, u64)>,
    rx_q: BoundedQueue<(Vec<u8>, u64)>,
    now_ms: u64,
    next_frame: u64,
    busy_until_ms: u64,
    next_tx_ms: u64,
    patch_busy_until_ms: u64,
    seq: u8,
    last_applied: Option<u8>,
    motors: MotorCommand,
    tracker: SequenceTracker,
    /// Scan time of every packet still in the system, by seq.
    stamps: Vec<Option<u64>>,
    report: PipelineReport,
}

impl Pipeline {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scenario: GraspScenario,
        layout: SensorLayout,
        piezo: PiezoModel,
        scan: ScanConfig,
        mode: CompressionMode,
        encoder: EncoderConfig,
        cfg: PipelineConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let glove = GloveSim::new(scenario, layout, piezo, scan, seed)?.with_rest(cfg.rest_ms);
        let engine = FeedbackEngine::new(mode, encoder)?;
        let channel = Channel::new(cfg.channel)?;
        let q = cfg.queue_capacity;
        Ok(Pipeline {
            glove,
            engine,
            channel,
            scan_q: BoundedQueue::new(q),
            tx_q: BoundedQueue::new(q),
            rx_q: BoundedQueue::new(q),
            now_ms: 0,
            next_frame: 0,
            busy_until_ms: 0,
            next_tx_ms: 0,
            patch_busy_until_ms: 0,
            seq: 0,
            last_applied: None,
            motors: MotorCommand::silent(0),
            tracker: SequenceTracker::starting_at(0),
            stamps: vec![None; 256],
            cfg,
            report: PipelineReport::default(),
        })
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Motor state currently applied on the patch.
    pub fn motors(&self) -> &MotorCommand {
        &self.motors
    }

    pub fn engine_mut(&mut self) -> &mut FeedbackEngine {
        &mut self.engine
    }

    /// Advances one millisecond.
    pub fn step(&mut self) -> Result<Vec<PipelineEvent>> {
        let now = self.now_ms;
        let mut events = Vec::new();

        // Glove: scans complete on the frame clock.
        while self.glove.frame_time_ms(self.next_frame) <= now {
            let t = self.glove.frame_time_ms(self.next_frame);
            self.next_frame += 1;
            self.scan_q.push(self.glove.sample_at(t));
            self.report.frames += 1;
        }

        // Controller: one frame per service slot.
        if now >= self.busy_until_ms {
            if let Some(sample) = self.scan_q.pop() {
                let cal = self.glove.piezo.normalize(&sample.raw);
                let command = self.engine.process(&cal.frame)?;
                let seq = self.seq;
                self.seq = self.seq.wrapping_add(1);
                let payload = motor_command_payload(&command)
                    .map_err(|e| Error::validation(e.to_string()))?;
                let bytes = encode_packet(PacketType::MotorCommand, seq, &payload)
                    .map_err(|e| Error::validation(e.to_string()))?;
                self.stamps[usize::from(seq)] = Some(sample.raw.timestamp_ms);
                self.tx_q.push((seq, bytes, sample.raw.timestamp_ms));
                self.report.commands += 1;
                events.push(PipelineEvent::Frame {
                    t_ms: sample.raw.timestamp_ms,
                    pressures: cal.frame,
                    saturated: cal.saturated.len(),
                });
                events.push(PipelineEvent::Command {
                    t_ms: now,
                    seq,
                    command,
                });
                self.busy_until_ms = now + self.cfg.process_ms;
            }
        }

        // Radio: at most one packet per transmit slot.
        if now >= self.next_tx_ms {
            if let Some((seq, bytes, _)) = self.tx_q.pop() {
                self.channel.send(seq, bytes, now);
                self.report.packets_sent += 1;
                self.next_tx_ms = now + self.cfg.tx_interval_ms;
            }
        }

        for d in self.channel.poll(now) {
            self.report.packets_delivered += 1;
            self.rx_q.push((d.bytes, d.sent_at_ms));
        }

        // Patch: decode and apply, ignoring anything older than what is on.
        if now >= self.patch_busy_until_ms {
            if let Some((bytes, _)) = self.rx_q.pop() {
                self.patch_busy_until_ms = now + self.cfg.apply_ms;
                match decode_packet(&bytes) {
                    Ok(packet) => {
                        self.tracker.observe(packet.seq);
                        let fresher = self
                            .last_applied
                            .is_none_or(|last| (packet.seq.wrapping_sub(last) as i8) > 0);
                        if !fresher {
                            self.report.stale_discarded += 1;
                        } else if let Ok(command) = parse_motor_command(&packet.payload) {
                            self.last_applied = Some(packet.seq);
                            self.motors = command.clone();
                            self.report.applied += 1;
                            if let Some(scanned) = self.stamps[usize::from(packet.seq)].take() {
                                self.report.max_latency_ms =
                                    self.report.max_latency_ms.max(now - scanned);
                            }
                            events.push(PipelineEvent::Applied {
                                t_ms: now,
                                seq: packet.seq,
                                command,
                            });
                        } else {
                            self.report.corrupt += 1;
                        }
                    }
                    Err(_) => self.report.corrupt += 1,
                }
            }
        }

        self.now_ms += 1;
        Ok(events)
    }

    /// Runs for `duration_ms`, passing every event to `sink`.
    pub fn run_with(
        &mut self,
        duration_ms: u64,
        mut sink: impl FnMut(&PipelineEvent),
    ) -> Result<PipelineReport> {
        let end = self.now_ms + duration_ms;
        while self.now_ms < end {
            for e in self.step()? {
                sink(&e);
            }
        }
        Ok(self.report())
    }

    pub fn run(&mut self, duration_ms: u64) -> Result<PipelineReport> {
        self.run_with(duration_ms, |_| {})
    }

    pub fn report(&self) -> PipelineReport {
        let stats = |capacity, max_depth, dropped| QueueStats {
            capacity,
            max_depth,
            dropped,
        };
        let mut r = self.report.clone();
        r.duration_ms = self.now_ms;
        r.packets_lost = r
            .packets_sent
            .saturating_sub(r.packets_delivered + self.channel.in_flight() as u64);
        r.scan_queue = stats(
            self.scan_q.capacity(),
            self.scan_q.max_depth(),
            self.scan_q.dropped(),
        );
        r.tx_queue = stats(
            self.tx_q.capacity(),
            self.tx_q.max_depth(),
            self.tx_q.dropped(),
        );
        r.rx_queue = stats(
            self.rx_q.capacity(),
            self.rx_q.max_depth(),
            self.rx_q.dropped(),
        );
        r.max_in_flight = self.channel.max_in_flight();
        r.missing_seqs = self.tracker.missing().len() as u64;
        r
    }
}
