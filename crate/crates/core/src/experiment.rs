//! Psychophysics protocols: balanced trial plans, the session state machine,
//! stimulus dispatch, response capture and the object-pickup timing task.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{EncoderKind, ModeId};
use crate::glove::GraspObject;
use crate::model::{Activation, BodySite, MotorCommand, DEFAULT_STIMULUS_MS};
use crate::transport::{
    decode_packet, encode_packet, motor_command_payload, parse_motor_command, Channel, PacketType,
};

pub const INTENSITY_REPS: usize = 10;
pub const SINGLE_REPS: usize = 5;
pub const PAIR_REPS: usize = 3;
pub const OBJECT_REPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Intensity,
    SingleLocation,
    PairLocation,
    ObjectTask,
}

impl Protocol {
    pub const DISCRIMINATION: [Protocol; 3] = [
        Protocol::Intensity,
        Protocol::SingleLocation,
        Protocol::PairLocation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Intensity => "intensity",
            Protocol::SingleLocation => "single-location",
            Protocol::PairLocation => "pair-location",
            Protocol::ObjectTask => "object-task",
        }
    }

    pub fn is_discrimination(self) -> bool {
        self != Protocol::ObjectTask
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(
            match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
                "intensity" => Protocol::Intensity,
                "single-location" | "single" | "location" => Protocol::SingleLocation,
                "pair-location" | "pair" => Protocol::PairLocation,
                "object-task" | "object" => Protocol::ObjectTask,
                other => return Err(Error::validation(format!("unknown protocol {other:?}"))),
            },
        )
    }
}

/// Unordered pair of distinct motors, stored ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MotorPair(usize, usize);

impl MotorPair {
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == b {
            return Err(Error::validation(format!("pair repeats motor {a}")));
        }
        Ok(MotorPair(a.min(b), a.max(b)))
    }

    pub fn first(&self) -> usize {
        self.0
    }

    pub fn second(&self) -> usize {
        self.1
    }

    pub fn motors(&self) -> [usize; 2] {
        [self.0, self.1]
    }

    /// All `n choose 2` pairs in lexicographic order.
    pub fn all(n: usize) -> Vec<MotorPair> {
        (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| MotorPair(a, b)))
            .collect()
    }
}

impl Serialize for MotorPair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.0, self.1].serialize(s)
    }
}

impl<'de> Deserialize<'de> for MotorPair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [a, b] = <[usize; 2]>::deserialize(d)?;
        MotorPair::new(a, b).map_err(serde::de::Error::custom)
    }
}

/// A stimulus, and equally a participant's answer in the same domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Stimulus {
    /// Level 1 (low) to 3 (high).
    Intensity(u8),
    Motor(usize),
    Pair(MotorPair),
    Object(GraspObject),
}

pub type Response = Stimulus;

impl Stimulus {
    pub fn protocol(&self) -> Protocol {
        match self {
            Stimulus::Intensity(_) => Protocol::Intensity,
            Stimulus::Motor(_) => Protocol::SingleLocation,
            Stimulus::Pair(_) => Protocol::PairLocation,
            Stimulus::Object(_) => Protocol::ObjectTask,
        }
    }

    /// Checks that this value belongs to `protocol` on `site`.
    pub fn validate(&self, protocol: Protocol, site: &BodySite) -> Result<()> {
        if self.protocol() != protocol {
            return Err(Error::validation(format!(
                "{self:?} is not in the {protocol} domain"
            )));
        }
        match *self {
            Stimulus::Intensity(l) if !(1..=3).contains(&l) => Err(Error::validation(format!(
                "intensity level {l} outside 1..=3"
            ))),
            Stimulus::Motor(m) if m >= site.num_motors => Err(Error::validation(format!(
                "motor {m} outside 0..{}",
                site.num_motors
            ))),
            Stimulus::Pair(p) if p.second() >= site.num_motors => Err(Error::validation(format!(
                "pair {:?} outside 0..{}",
                p.motors(),
                site.num_motors
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub protocol: Protocol,
    pub stimuli: Vec<Stimulus>,
    pub site: BodySite,
    pub mode: Option<ModeId>,
    pub seed: u64,
}

impl TrialPlan {
    pub fn len(&self) -> usize {
        self.stimuli.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stimuli.is_empty()
    }

    /// Distinct stimuli in canonical order, as replayed during training.
    pub fn distinct_stimuli(&self) -> Vec<Stimulus> {
        self.stimuli
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// The balanced stimulus multiset of `protocol`, unshuffled.
pub fn balanced_stimuli(protocol: Protocol, site: &BodySite) -> Vec<Stimulus> {
    fn repeat<T: Copy>(items: impl Iterator<Item = T>, reps: usize) -> Vec<T> {
        items.flat_map(|s| std::iter::repeat_n(s, reps)).collect()
    }
    match protocol {
        Protocol::Intensity => repeat((1..=3).map(Stimulus::Intensity), INTENSITY_REPS),
        Protocol::SingleLocation => repeat((0..site.num_motors).map(Stimulus::Motor), SINGLE_REPS),
        Protocol::PairLocation => repeat(
            MotorPair::all(site.num_motors)
                .into_iter()
                .map(Stimulus::Pair),
            PAIR_REPS,
        ),
        Protocol::ObjectTask => repeat(
            GraspObject::ALL.into_iter().map(Stimulus::Object),
            OBJECT_REPS,
        ),
    }
}

/// Balanced plan in seeded uniformly random order.
pub fn gen_plan(protocol: Protocol, site: &BodySite, seed: u64, mode: Option<ModeId>) -> TrialPlan {
    let mut stimuli = balanced_stimuli(protocol, site);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stimuli.shuffle(&mut rng);
    TrialPlan {
        protocol,
        stimuli,
        site: site.clone(),
        mode,
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPolicy {
    /// Correct only if both motors are named.
    ExactMatch,
    /// Half credit per motor named.
    PerMotor,
}

impl FromStr for PairPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "exact" | "exact-match" => Ok(PairPolicy::ExactMatch),
            "per-motor" | "partial" => Ok(PairPolicy::PerMotor),
            other => Err(Error::validation(format!("unknown pair policy {other:?}"))),
        }
    }
}

/// Scores an answer to a two-motor stimulus. Both arguments must be pairs of
/// distinct motors.
pub fn score_pair_response(
    stimulus: (usize, usize),
    response: (usize, usize),
    policy: PairPolicy,
) -> Result<f64> {
    let s = MotorPair::new(stimulus.0, stimulus.1)?;
    let r = MotorPair::new(response.0, response.1)?;
    Ok(score_pair(s, r, policy))
}

fn score_pair(s: MotorPair, r: MotorPair, policy: PairPolicy) -> f64 {
    match policy {
        PairPolicy::ExactMatch => f64::from(u8::from(s == r)),
        PairPolicy::PerMotor => {
            let hits = s.motors().iter().filter(|m| r.motors().contains(m)).count();
            hits as f64 / 2.0
        }
    }
}

/// Stimulus parameters and scoring for a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Normalized drive for levels 1, 2 and 3.
    pub intensity_levels: [f64; 3],
    /// Motor used by the intensity protocol.
    pub intensity_motor: usize,
    /// Drive used by single and pair location stimuli.
    pub location_intensity: f64,
    pub stimulus_ms: u64,
    pub timeout_ms: u64,
    pub pair_policy: PairPolicy,
    pub threshold: f64,
    pub encoder: EncoderKind,
    pub mode: Option<ModeId>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            intensity_levels: [0.33, 0.66, 1.0],
            intensity_motor: 0,
            location_intensity: 1.0,
            stimulus_ms: DEFAULT_STIMULUS_MS,
            timeout_ms: 30_000,
            pair_policy: PairPolicy::ExactMatch,
            threshold: 0.5,
            encoder: EncoderKind::Binary,
            mode: None,
        }
    }
}

impl SessionConfig {
    /// Motor command presenting `stimulus`. Object stimuli drive no motors;
    /// their feedback comes from the glove pipeline.
    pub fn command_for(&self, stimulus: &Stimulus) -> MotorCommand {
        let act = |motor, intensity| Activation { motor, intensity };
        let activations = match *stimulus {
            Stimulus::Intensity(level) => {
                vec![act(
                    self.intensity_motor,
                    self.intensity_levels[usize::from(level - 1)],
                )]
            }
            Stimulus::Motor(m) => vec![act(m, self.location_intensity)],
            Stimulus::Pair(p) => vec![
                act(p.first(), self.location_intensity),
                act(p.second(), self.location_intensity),
            ],
            Stimulus::Object(_) => Vec::new(),
        };
        MotorCommand {
            activations,
            duration_ms: self.stimulus_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Idle,
    Training,
    Testing,
    Complete,
    Aborted,
}

impl SessionState {
    /// Forward-only progression; any state except `Complete` may abort.
    pub fn can_transition(self, to: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, to),
            (Idle, Training) | (Training, Testing) | (Testing, Complete)
        ) || (to == Aborted && !matches!(self, Complete | Aborted))
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionState::Idle => "idle",
            SessionState::Training => "training",
            SessionState::Testing => "testing",
            SessionState::Complete => "complete",
            SessionState::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub stimulus: Stimulus,
    pub response: Option<Response>,
    /// Discrimination trials only.
    pub correct: Option<bool>,
    /// Credit under the session's pair policy; 0 or 1 for single answers.
    pub score: Option<f64>,
    /// Object trials only.
    pub elapsed_ms: Option<f64>,
    pub response_latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub participant: String,
    pub site: BodySite,
    pub protocol: Protocol,
    pub seed: u64,
    pub plan_len: usize,
    pub config: SessionConfig,
    pub state: SessionState,
    pub complete: bool,
    pub started_ms: u64,
    pub finished_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub header: SessionHeader,
    pub records: Vec<TrialRecord>,
}

impl SessionLog {
    /// Header document on the first line, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::validation("empty session log"))?;
        let header: SessionHeader =
            serde_json::from_str(first).map_err(|e| Error::parse(1, e.to_string()))?;
        let records = lines
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(n + 1, e.to_string())))
            .collect::<Result<Vec<TrialRecord>>>()?;
        Ok(SessionLog { header, records })
    }

    pub fn is_complete(&self) -> bool {
        self.header.complete
    }

    pub fn mode(&self) -> Option<ModeId> {
        self.header.config.mode
    }
}

/// What the responder sees for one trial. Simulated responders read the
/// stimulus; a live console must not show it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPrompt {
    pub trial_index: usize,
    pub total: usize,
    pub protocol: Protocol,
    pub stimulus: Stimulus,
    pub command: MotorCommand,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseEvent {
    Answer { response: Response, latency_ms: u64 },
    NoResponse,
    Abort,
}

pub trait ResponseSource {
    fn respond(&mut self, prompt: &TrialPrompt) -> ResponseEvent;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Testing,
}

pub trait StimulusSink {
    fn dispatch(&mut self, cmd: &MotorCommand, phase: Phase, now_ms: u64) -> Result<()>;
}

/// Keeps every dispatched command.
#[derive(Debug, Clone, Default)]
pub struct RecordingSink {
    pub sent: Vec<(u64, Phase, MotorCommand)>,
}

impl StimulusSink for RecordingSink {
    fn dispatch(&mut self, cmd: &MotorCommand, phase: Phase, now_ms: u64) -> Result<()> {
        self.sent.push((now_ms, phase, cmd.clone()));
        Ok(())
    }
}

/// Sends commands to the motor patch as framed packets over a simulated
/// link, resending until one copy arrives or the retry budget is spent.
#[derive(Debug)]
pub struct TransportSink {
    channel: Channel,
    seq: u8,
    max_attempts: usize,
    /// Commands as decoded by the patch.
    pub received: Vec<(u64, MotorCommand)>,
    pub attempts: u64,
}

impl TransportSink {
    pub fn new(channel: Channel) -> Self {
        TransportSink {
            channel,
            seq: 0,
            max_attempts: 8,
            received: Vec::new(),
            attempts: 0,
        }
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }
}

impl StimulusSink for TransportSink {
    fn dispatch(&mut self, cmd: &MotorCommand, _phase: Phase, now_ms: u64) -> Result<()> {
        let payload = motor_command_payload(cmd).map_err(|e| Error::validation(e.to_string()))?;
        let bytes = encode_packet(PacketType::MotorCommand, self.seq, &payload)
            .map_err(|e| Error::validation(e.to_string()))?;
        let seq = self.seq;
        self.seq = self.seq.wrapping_add(1);
        let wait = self.channel.config().max_latency_ms().ceil() as u64 + 1;
        let mut t = now_ms;
        for _ in 0..self.max_attempts {
            self.attempts += 1;
            self.channel.send(seq, bytes.clone(), t);
            t += wait;
            if let Some(d) = self.channel.poll(t).into_iter().find(|d| d.seq == seq) {
                let packet =
                    decode_packet(&d.bytes).map_err(|e| Error::validation(e.to_string()))?;
                let got = parse_motor_command(&packet.payload)
                    .map_err(|e| Error::validation(e.to_string()))?
                    .with_duration(cmd.duration_ms);
                self.received.push((d.delivered_at_ms, got));
                return Ok(());
            }
        }
        Err(Error::validation(format!(
            "command seq {seq} not delivered after {} attempts",
            self.max_attempts
        )))
    }
}

/// Time source for sessions. Virtual clocks advance explicitly.
pub trait Clock {
    fn now_ms(&self) -> u64;
    fn advance(&mut self, ms: u64);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now: u64,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Self {
        VirtualClock { now: start_ms }
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now
    }

    fn advance(&mut self, ms: u64) {
        self.now += ms;
    }
}

/// Session bookkeeping shared by the batch runner and the live service:
/// responses may arrive at any time, one per presented trial.
#[derive(Debug, Clone)]
pub struct LiveSession {
    plan: TrialPlan,
    log: SessionLog,
    cursor: usize,
    presented_at: Option<u64>,
}

impl LiveSession {
    pub fn new(
        session_id: impl Into<String>,
        participant: impl Into<String>,
        plan: TrialPlan,
        config: SessionConfig,
        now_ms: u64,
    ) -> Self {
        let header = SessionHeader {
            session_id: session_id.into(),
            participant: participant.into(),
            site: plan.site.clone(),
            protocol: plan.protocol,
            seed: plan.seed,
            plan_len: plan.len(),
            config: SessionConfig {
                mode: plan.mode.or(config.mode),
                ..config
            },
            state: SessionState::Idle,
            complete: false,
            started_ms: now_ms,
            finished_ms: None,
        };
        LiveSession {
            plan,
            log: SessionLog {
                header,
                records: Vec::new(),
            },
            cursor: 0,
            presented_at: None,
        }
    }

    pub fn state(&self) -> SessionState {
        self.log.header.state
    }

    pub fn plan(&self) -> &TrialPlan {
        &self.plan
    }

    pub fn config(&self) -> &SessionConfig {
        &self.log.header.config
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn into_log(self) -> SessionLog {
        self.log
    }

    pub fn progress(&self) -> (usize, usize) {
        (self.cursor, self.plan.len())
    }

    fn transition(&mut self, to: SessionState, now_ms: u64) -> Result<()> {
        let from = self.state();
        if !from.can_transition(to) {
            return Err(Error::Precondition(format!(
                "session cannot go from {from} to {to}"
            )));
        }
        self.log.header.state = to;
        if matches!(to, SessionState::Complete | SessionState::Aborted) {
            self.log.header.finished_ms = Some(now_ms);
            self.log.header.complete = to == SessionState::Complete;
        }
        Ok(())
    }

    /// Enters training and returns the familiarization commands: each
    /// distinct stimulus once, in canonical order.
    pub fn begin_training(&mut self, now_ms: u64) -> Result<Vec<MotorCommand>> {
        self.transition(SessionState::Training, now_ms)?;
        let cfg = self.config().clone();
        Ok(self
            .plan
            .distinct_stimuli()
            .iter()
            .map(|s| cfg.command_for(s))
            .collect())
    }

    pub fn begin_testing(&mut self, now_ms: u64) -> Result<Option<TrialPrompt>> {
        self.transition(SessionState::Testing, now_ms)?;
        if self.plan.is_empty() {
            self.transition(SessionState::Complete, now_ms)?;
        }
        Ok(self.current_prompt())
    }

    pub fn current_prompt(&self) -> Option<TrialPrompt> {
        if self.state() != SessionState::Testing {
            return None;
        }
        let stimulus = *self.plan.stimuli.get(self.cursor)?;
        Some(TrialPrompt {
            trial_index: self.cursor,
            total: self.plan.len(),
            protocol: self.plan.protocol,
            stimulus,
            command: self.config().command_for(&stimulus),
        })
    }

    /// Marks the current stimulus as delivered; latency counts from here.
    pub fn mark_presented(&mut self, now_ms: u64) {
        self.presented_at = Some(now_ms);
    }

    /// Presented trial whose response window has closed at `now_ms`.
    pub fn timed_out(&self, now_ms: u64) -> bool {
        self.state() == SessionState::Testing
            && self
                .presented_at
                .is_some_and(|t| now_ms.saturating_sub(t) > self.config().timeout_ms)
    }

    /// Records the answer (or `None`) to the current trial and advances.
    /// Answers after the timeout are recorded as missing.
    pub fn submit(&mut self, response: Option<Response>, now_ms: u64) -> Result<TrialRecord> {
        let prompt = self
            .current_prompt()
            .ok_or_else(|| Error::Precondition("no trial awaiting a response".into()))?;
        if let Some(r) = &response {
            r.validate(self.plan.protocol, &self.plan.site)?;
        }
        let timeout = self.config().timeout_ms;
        let latency = self.presented_at.map(|t| now_ms.saturating_sub(t));
        let (response, latency) = match latency {
            Some(l) if l > timeout => (None, Some(timeout)),
            l => (response, l),
        };
        let score = response.map_or(0.0, |r| self.score(&prompt.stimulus, &r));
        let record = TrialRecord {
            trial_index: prompt.trial_index,
            stimulus: prompt.stimulus,
            response,
            correct: Some(response == Some(prompt.stimulus)),
            score: Some(score),
            elapsed_ms: None,
            response_latency_ms: latency,
        };
        self.push(record.clone(), now_ms)?;
        Ok(record)
    }

    /// Records an object-pickup time for the current trial.
    pub fn submit_elapsed(&mut self, elapsed_ms: f64, now_ms: u64) -> Result<TrialRecord> {
        let prompt = self
            .current_prompt()
            .ok_or_else(|| Error::Precondition("no trial awaiting a response".into()))?;
        if !(elapsed_ms > 0.0 && elapsed_ms.is_finite()) {
            return Err(Error::validation(format!(
                "pickup time {elapsed_ms} must be > 0"
            )));
        }
        let record = TrialRecord {
            trial_index: prompt.trial_index,
            stimulus: prompt.stimulus,
            response: Some(prompt.stimulus),
            correct: None,
            score: None,
            elapsed_ms: Some(elapsed_ms),
            response_latency_ms: None,
        };
        self.push(record.clone(), now_ms)?;
        Ok(record)
    }

    fn push(&mut self, record: TrialRecord, now_ms: u64) -> Result<()> {
        self.log.records.push(record);
        self.cursor += 1;
        self.presented_at = None;
        if self.cursor == self.plan.len() {
            self.transition(SessionState::Complete, now_ms)?;
        }
        Ok(())
    }

    fn score(&self, stimulus: &Stimulus, response: &Response) -> f64 {
        match (stimulus, response) {
            (Stimulus::Pair(s), Stimulus::Pair(r)) => score_pair(*s, *r, self.config().pair_policy),
            (s, r) => f64::from(u8::from(s == r)),
        }
    }

    pub fn abort(&mut self, now_ms: u64) -> Result<()> {
        self.transition(SessionState::Aborted, now_ms)
    }
}

/// Runs a discrimination session to completion against a response source.
///
/// Training replays each distinct stimulus once; testing presents the plan
/// in order, each stimulus for `stimulus_ms`, then waits for the answer. An
/// `Abort` from the source ends the session with a partial log.
pub fn run_session(
    session_id: &str,
    participant: &str,
    plan: &TrialPlan,
    config: &SessionConfig,
    sink: &mut dyn StimulusSink,
    source: &mut dyn ResponseSource,
    clock: &mut dyn Clock,
) -> Result<SessionLog> {
    if !plan.protocol.is_discrimination() {
        return Err(Error::validation("use run_object_task for object plans"));
    }
    let mut session = LiveSession::new(
        session_id,
        participant,
        plan.clone(),
        config.clone(),
        clock.now_ms(),
    );
    for cmd in session.begin_training(clock.now_ms())? {
        sink.dispatch(&cmd, Phase::Training, clock.now_ms())?;
        clock.advance(cmd.duration_ms);
    }
    let mut prompt = session.begin_testing(clock.now_ms())?;
    while let Some(p) = prompt {
        sink.dispatch(&p.command, Phase::Testing, clock.now_ms())?;
        clock.advance(p.command.duration_ms);
        session.mark_presented(clock.now_ms());
        match source.respond(&p) {
            ResponseEvent::Answer {
                response,
                latency_ms,
            } => {
                clock.advance(latency_ms);
                session.submit(Some(response), clock.now_ms())?;
            }
            ResponseEvent::NoResponse => {
                clock.advance(config.timeout_ms);
                session.submit(None, clock.now_ms())?;
            }
            ResponseEvent::Abort => {
                session.abort(clock.now_ms())?;
                break;
            }
        }
        prompt = session.current_prompt();
    }
    Ok(session.into_log())
}

/// Source of pickup completions for the object task.
pub trait PickupSource {
    /// Time to pick up `object` under `mode`, or `None` if the trial was not
    /// completed.
    fn pickup(&mut self, object: GraspObject, mode: Option<ModeId>) -> Option<f64>;
}

/// Runs one compression mode's object block. A missing pickup ends the
/// block with an incomplete log.
pub fn run_object_task(
    session_id: &str,
    participant: &str,
    plan: &TrialPlan,
    config: &SessionConfig,
    source: &mut dyn PickupSource,
    clock: &mut dyn Clock,
) -> Result<SessionLog> {
    if plan.protocol != Protocol::ObjectTask {
        return Err(Error::validation("object task needs an object plan"));
    }
    let mut session = LiveSession::new(
        session_id,
        participant,
        plan.clone(),
        config.clone(),
        clock.now_ms(),
    );
    session.begin_training(clock.now_ms())?;
    let mut prompt = session.begin_testing(clock.now_ms())?;
    while let Some(p) = prompt {
        let Stimulus::Object(object) = p.stimulus else {
            unreachable!("object plan holds object stimuli")
        };
        match source.pickup(object, plan.mode) {
            Some(elapsed) => {
                clock.advance(elapsed.ceil() as u64);
                session.submit_elapsed(elapsed, clock.now_ms())?;
            }
            None => {
                session.abort(clock.now_ms())?;
                break;
            }
        }
        prompt = session.current_prompt();
    }
    Ok(session.into_log())
}

/// One object plan per builtin compression mode, in a seeded random mode
/// order.
pub fn gen_object_study(site: &BodySite, seed: u64) -> Vec<TrialPlan> {
    let mut modes = ModeId::BUILTIN.to_vec();
    modes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    modes
        .into_iter()
        .enumerate()
        .map(|(i, mode)| {
            let block_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64 + 1);
            gen_plan(Protocol::ObjectTask, site, block_seed, Some(mode))
        })
        .collect()
}

/// Runs every block of an object study for one participant.
pub fn run_object_study(
    participant: &str,
    plans: &[TrialPlan],
    config: &SessionConfig,
    source: &mut dyn PickupSource,
    clock: &mut dyn Clock,
) -> Result<Vec<SessionLog>> {
    plans
        .iter()
        .map(|plan| {
            let mode = plan.mode.map_or_else(|| "none".into(), |m| m.to_string());
            let id = format!("{participant}-object-{}", mode.replace(':', "-"));
            run_object_task(&id, participant, plan, config, source, clock)
        })
        .collect()
}
