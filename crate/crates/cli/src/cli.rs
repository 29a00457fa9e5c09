//! Command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use vibrotwin::analysis::{
    summarize, AnalysisReport, BlockScheme, NormalizationScope, ObjectSummaryOptions,
};
use vibrotwin::experiment::{
    gen_object_study, run_object_study, PairPolicy, RecordingSink, SessionState, VirtualClock,
};
use vibrotwin::pipeline::{Pipeline, PipelineConfig};
use vibrotwin::responder::{ConfusionTable, SimulatedPickup};
use vibrotwin::{
    builtin_mode, default_layout, gen_plan, run_session, BodySite, ChannelConfig, EncoderConfig,
    EncoderKind, GraspObject, GraspScenario, ModeId, PiezoModel, Protocol, Responder,
    ResponderKind, ResponderModel, ScanConfig, SensorLayout, SessionConfig, SessionLog,
};

use crate::service::{self, Control, Service, ServiceConfig, BIND_ENV, DEFAULT_BIND};
use crate::store::{read_logs, LogStore};
use crate::Error;

#[derive(Debug, Parser)]
#[command(
    name = "vibrotwin",
    version,
    about = "Simulated tactile glove to vibrotactile patch feedback loop"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the glove pipeline and print frames, commands and a report as JSON lines.
    Simulate(SimulateArgs),
    /// Run a psychophysics session against a simulated or live responder.
    RunExperiment(ExperimentArgs),
    /// Analyze persisted session logs.
    Analyze(AnalyzeArgs),
    /// Start the session service.
    Serve(ServeArgs),
    /// Inspect compression modes.
    Modes {
        #[command(subcommand)]
        command: ModesCommand,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "ball")]
    pub object: GraspObject,
    #[arg(long, default_value_t = 1.0)]
    pub grip: f64,
    #[arg(long, default_value = "finger:6")]
    pub mode: ModeId,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value = "binary")]
    pub encoder: EncoderKind,
    /// Gain of the proportional and derivative encoders.
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    #[arg(long, default_value_t = 100.0)]
    pub scan_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2600)]
    pub duration_ms: u64,
    /// Sensor-to-region table replacing the default glove layout.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Radio loss probability.
    #[arg(long, default_value_t = 0.0)]
    pub loss: f64,
    #[arg(long, default_value_t = 10.0)]
    pub latency_ms: f64,
    /// Leave out per-frame pressure lines.
    #[arg(long)]
    pub no_frames: bool,
    /// Write events here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub protocol: Protocol,
    #[arg(long, default_value = "upper-arm")]
    pub site: BodySite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// perfect, uniform, spatial:<sigma>, confusion:<file> or live.
    #[arg(long, default_value = "perfect")]
    pub responder: ResponderSpec,
    #[arg(long, default_value = "exact")]
    pub policy: PairPolicy,
    #[arg(long, default_value = "logs")]
    pub out: PathBuf,
    #[arg(long, default_value = "p1")]
    pub participant: String,
    /// Compression mode recorded with the session.
    #[arg(long)]
    pub mode: Option<ModeId>,
    #[arg(long)]
    pub session_id: Option<String>,
    /// Service address for `--responder live`.
    #[arg(long, env = BIND_ENV, default_value = DEFAULT_BIND)]
    pub bind: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponderSpec {
    Perfect,
    Uniform,
    Spatial(f64),
    Confusion(PathBuf),
    Live,
}

impl FromStr for ResponderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "perfect" => Ok(ResponderSpec::Perfect),
            None if s == "uniform" => Ok(ResponderSpec::Uniform),
            None if s == "live" => Ok(ResponderSpec::Live),
            Some(("spatial", sigma)) => sigma
                .parse::<f64>()
                .ok()
                .filter(|x| *x > 0.0)
                .map(ResponderSpec::Spatial)
                .ok_or_else(|| format!("spatial sigma must be a positive number, got {sigma:?}")),
            Some(("confusion", path)) if !path.is_empty() => Ok(ResponderSpec::Confusion(path.into())),
            _ => Err(format!(
                "unknown responder {s:?} (perfect, uniform, spatial:<sigma>, confusion:<file>, live)"
            )),
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// A log file or a directory of logs.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for the report files; prints the summary when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "subject")]
    pub scope: NormalizationScope,
    #[arg(long, default_value = "subject")]
    pub blocks: BlockArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BlockArg {
    Subject,
    SubjectObject,
}

impl From<BlockArg> for BlockScheme {
    fn from(b: BlockArg) -> Self {
        match b {
            BlockArg::Subject => BlockScheme::Subject,
            BlockArg::SubjectObject => BlockScheme::SubjectObject,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = BIND_ENV, default_value = DEFAULT_BIND)]
    pub bind: String,
    #[arg(long, default_value = "logs")]
    pub log_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "ball")]
    pub object: GraspObject,
    #[arg(long, default_value = "finger:6")]
    pub mode: ModeId,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Do not run the glove pipeline.
    #[arg(long)]
    pub no_stream: bool,
}

#[derive(Debug, Subcommand)]
pub enum ModesCommand {
    List,
    Show {
        mode: ModeId,
        #[arg(long)]
        layout: Option<PathBuf>,
    },
}

/// Runs a parsed command, writing human output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(a) => simulate(a, out),
        Command::RunExperiment(a) => run_experiment(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Serve(a) => serve(a),
        Command::Modes { command } => modes(command, out),
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::Io(path.display().to_string(), e)
}

fn load_layout(path: Option<&Path>) -> Result<SensorLayout, Error> {
    match path {
        None => Ok(default_layout()),
        Some(p) => Ok(SensorLayout::parse(
            &fs::read_to_string(p).map_err(io_err(p))?,
        )?),
    }
}

fn simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<(), Error> {
    let layout = load_layout(a.layout.as_deref())?;
    let mode = builtin_mode(a.mode.focus, a.mode.num_motors, &layout)?;
    let encoder = match a.encoder {
        EncoderKind::Binary => EncoderConfig::binary(a.threshold),
        EncoderKind::Proportional => EncoderConfig::proportional(a.gain),
        EncoderKind::Derivative => EncoderConfig::derivative(a.gain, 1000.0 / a.scan_rate),
    };
    let scan = ScanConfig::row_major(layout.grid(), a.scan_rate);
    let channel = ChannelConfig {
        loss_prob: a.loss,
        seed: a.seed,
        ..ChannelConfig::ideal(a.latency_ms)
    };
    let mut pipeline = Pipeline::new(
        GraspScenario::new(a.object, a.grip).with_noise(a.noise),
        layout,
        PiezoModel::default(),
        scan,
        mode,
        encoder,
        PipelineConfig {
            channel,
            ..PipelineConfig::default()
        },
        a.seed,
    )?;
    let mut file;
    let sink: &mut dyn Write = match &a.out {
        Some(p) => {
            file = io::BufWriter::new(fs::File::create(p).map_err(io_err(p))?);
            &mut file
        }
        None => out,
    };
    let mut write_err = None;
    let report = pipeline.run_with(a.duration_ms, |e| {
        if a.no_frames && matches!(e, vibrotwin::PipelineEvent::Frame { .. }) {
            return;
        }
        if write_err.is_none() {
            let line = serde_json::to_string(e).expect("event serializes");
            write_err = writeln!(sink, "{line}").err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::Io("output".into(), e));
    }
    let mut doc = serde_json::to_value(&report).expect("report serializes");
    doc["event"] = "report".into();
    writeln!(sink, "{doc}").map_err(|e| Error::Io("output".into(), e))?;
    sink.flush().map_err(|e| Error::Io("output".into(), e))
}

fn responder_kind(spec: &ResponderSpec) -> Result<ResponderKind, Error> {
    Ok(match spec {
        ResponderSpec::Perfect => ResponderKind::Perfect,
        ResponderSpec::Uniform => ResponderKind::Uniform,
        ResponderSpec::Spatial(sigma) => ResponderKind::SpatialGaussian { sigma: *sigma },
        ResponderSpec::Confusion(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            ResponderKind::ConfusionMatrix {
                table: ConfusionTable::parse(&text)?,
            }
        }
        ResponderSpec::Live => unreachable!("live sessions run through the service"),
    })
}

/// Persists a finished log and its summary next to it.
fn persist(store: &LogStore, log: &SessionLog, out: &mut dyn Write) -> Result<(), Error> {
    let path = store.save(log)?;
    let summary = summarize(log)?;
    let summary_path = store
        .dir()
        .join(format!("{}.summary.json", log.header.session_id));
    fs::write(&summary_path, summary.to_json()).map_err(io_err(&summary_path))?;
    let result = match (summary.accuracy, summary.mean_elapsed_ms) {
        (Some(acc), _) => format!(
            "{}/{} correct, accuracy {acc:.3}",
            summary.correct, summary.trials
        ),
        (None, Some(t)) => format!("{} pickups, mean {t:.0} ms", summary.answered),
        _ => format!("{} trials", summary.trials),
    };
    writeln!(
        out,
        "{}: {} ({})",
        log.header.session_id,
        result,
        path.display()
    )
    .map_err(|e| Error::Io("output".into(), e))
}

fn run_experiment(a: ExperimentArgs, out: &mut dyn Write) -> Result<(), Error> {
    if a.responder == ResponderSpec::Live {
        return run_live(a, out);
    }
    let store = LogStore::open(&a.out)?;
    let config = SessionConfig {
        pair_policy: a.policy,
        mode: a.mode,
        ..SessionConfig::default()
    };
    let mut clock = VirtualClock::new(0);
    if a.protocol == Protocol::ObjectTask {
        // Simulated pickups; mode effects need a real participant.
        let plans = gen_object_study(&a.site, a.seed);
        let mut pickup = SimulatedPickup::null(a.seed);
        for log in run_object_study(&a.participant, &plans, &config, &mut pickup, &mut clock)? {
            persist(&store, &log, out)?;
        }
        return Ok(());
    }
    let model = ResponderModel::new(responder_kind(&a.responder)?, a.site.clone(), a.seed)?;
    let mut responder = Responder::new(model);
    let plan = gen_plan(a.protocol, &a.site, a.seed, a.mode);
    let id = a
        .session_id
        .clone()
        .unwrap_or_else(|| format!("{}-{}-{}", a.participant, a.protocol, a.seed));
    let log = run_session(
        &id,
        &a.participant,
        &plan,
        &config,
        &mut RecordingSink::default(),
        &mut responder,
        &mut clock,
    )?;
    persist(&store, &log, out)
}

/// Hosts the session on the service and waits for a console to finish it.
fn run_live(a: ExperimentArgs, out: &mut dyn Write) -> Result<(), Error> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io("runtime".into(), e))?;
    rt.block_on(async {
        let service = Service::start(ServiceConfig {
            log_dir: a.out.clone(),
            seed: a.seed,
            ..ServiceConfig::default()
        })?;
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(io_err(Path::new(&a.bind)))?;
        writeln!(out, "waiting for responses on ws://{}/session", a.bind)
            .map_err(|e| Error::Io("output".into(), e))?;
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(service::serve(listener, service.clone(), async {
            let _ = stop_rx.await;
        }));
        service
            .control(Control::Start {
                protocol: a.protocol,
                site: Some(a.site.name.to_string()),
                participant: Some(a.participant.clone()),
                seed: Some(a.seed),
                session_id: a.session_id.clone(),
                policy: Some(a.policy),
                mode: a.mode,
            })
            .await
            .map_err(Error::BadRequest)?;
        loop {
            tokio::time::sleep(std::time::Duration::from_millis(50)).await;
            let snap = service.snapshot();
            if matches!(
                snap.state,
                Some(SessionState::Complete | SessionState::Aborted)
            ) {
                if let Some(id) = snap.session_id {
                    writeln!(
                        out,
                        "{id}: {} ({})",
                        snap.state.expect("checked"),
                        service.store().dir().display()
                    )
                    .map_err(|e| Error::Io("output".into(), e))?;
                }
                break;
            }
        }
        let _ = stop_tx.send(());
        let _ = server.await;
        Ok(())
    })
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<(), Error> {
    let logs = read_logs(&a.input)?;
    if logs.is_empty() {
        return Err(Error::BadRequest(format!(
            "no session logs under {}",
            a.input.display()
        )));
    }
    let options = ObjectSummaryOptions {
        scope: a.scope,
        blocks: a.blocks.into(),
    };
    let (report, note) = AnalysisReport::build(&logs, options)?;
    let w = |e| Error::Io("output".into(), e);
    match &a.report {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            for (name, body) in report.files() {
                let path = dir.join(name);
                fs::write(&path, body).map_err(io_err(&path))?;
            }
            for s in &report.sessions {
                let path = dir.join(format!("{}.summary.json", s.session_id));
                fs::write(&path, s.to_json()).map_err(io_err(&path))?;
            }
            for s in &report.sessions {
                let acc = s
                    .accuracy
                    .map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
                writeln!(
                    out,
                    "{}\t{}\t{}\taccuracy {acc}",
                    s.session_id, s.protocol, s.trials
                )
                .map_err(w)?;
            }
            writeln!(out, "report written to {}", dir.display()).map_err(w)?;
        }
        None => out.write_all(report.summary_json().as_bytes()).map_err(w)?,
    }
    if let Some(note) = note {
        writeln!(out, "object summary skipped: {note}").map_err(w)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Error> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io("runtime".into(), e))?;
    rt.block_on(async {
        let service = Service::start(ServiceConfig {
            log_dir: a.log_dir,
            seed: a.seed,
            object: a.object,
            mode: a.mode,
            threshold: a.threshold,
            stream: !a.no_stream,
            ..ServiceConfig::default()
        })?;
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(io_err(Path::new(&a.bind)))?;
        service::serve(listener, service, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Io(a.bind.clone(), e))
    })
}

fn modes(command: ModesCommand, out: &mut dyn Write) -> Result<(), Error> {
    let w = |e| Error::Io("output".into(), e);
    match command {
        ModesCommand::List => {
            let layout = default_layout();
            for id in ModeId::BUILTIN {
                let mode = builtin_mode(id.focus, id.num_motors, &layout)?;
                let groups: Vec<String> = (0..id.num_motors)
                    .map(|m| format!("M{m}={}", mode.region_map.sensors_of(m).len()))
                    .collect();
                writeln!(out, "{id}\t{}", groups.join(" ")).map_err(w)?;
            }
        }
        ModesCommand::Show { mode, layout } => {
            let layout = load_layout(layout.as_deref())?;
            let built = builtin_mode(mode.focus, mode.num_motors, &layout)?;
            out.write_all(built.region_map.to_table().as_bytes())
                .map_err(w)?;
        }
    }
    Ok(())
}
