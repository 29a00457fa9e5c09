//! Acceptance suite: one PASS/FAIL line per primary criterion. Tolerances
//! are fixed here and never relaxed to make a line pass.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vibrotwin::analysis::{aggregate_site_score, friedman};
use vibrotwin::experiment::Protocol;
use vibrotwin::feedback::builtin_mode;
use vibrotwin::pipeline::{Pipeline, PipelineConfig};
use vibrotwin::responder::ConfusionTable;
use vibrotwin::transport::{
    crc16_ccitt_false, decode_packet, encode_packet, Channel, ChannelConfig, PacketType,
    SendOutcome, MAX_PAYLOAD,
};
use vibrotwin::{
    builtin_modes, compress, default_layout, gen_plan, piezo_readout, tdma_scan, Arrangement,
    BodySite, EncoderConfig, Focus, GraspObject, GraspScenario, ModeId, PiezoModel, PressureFrame,
    Responder, ResponderKind, ResponderModel, ScanConfig, SiteName, Stimulus,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Motor for glove sensor `(row, col)`: rows 0-2 sit on finger `col`,
/// rows 3-4 on the palm, columns 0-2 form the radial half of the palm.
fn expected_motor(mode: ModeId, row: usize, col: usize) -> Option<usize> {
    let palm = row >= 3;
    match (mode.focus, mode.num_motors) {
        (Focus::FingerFocused, 6) => Some(if palm { 5 } else { col }),
        (Focus::FingerFocused, 3) => Some(if palm {
            2
        } else if col <= 1 {
            0
        } else {
            1
        }),
        (Focus::FingerFocused, 1) => (!palm).then_some(0),
        (Focus::PalmFocused, 6) => Some(match (palm, col) {
            (true, _) => usize::from(col > 2),
            (false, 0..=2) => col + 2,
            (false, _) => 5,
        }),
        (Focus::PalmFocused, 3) => Some(if palm {
            0
        } else if col <= 1 {
            1
        } else {
            2
        }),
        (Focus::PalmFocused, 1) => palm.then_some(0),
        _ => unreachable!(),
    }
}

fn compression_oracle() -> Outcome {
    let t0 = Instant::now();
    let modes = builtin_modes(&default_layout()).map_err(|e| e.to_string())?;
    check(modes.len() == 6, format!("{} builtin modes", modes.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let values: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let frame = PressureFrame::new(values.clone(), 0).unwrap();
        for mode in &modes {
            let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (i, v) in values.iter().enumerate() {
                if let Some(m) = expected_motor(mode.id, i / 5, i % 5) {
                    groups.entry(m).or_default().push(*v);
                }
            }
            let got = compress(&frame, &mode.region_map).map_err(|e| e.to_string())?;
            check(
                got.len() == groups.len(),
                format!("{}: {} motors", mode.id, got.len()),
            )?;
            for (m, xs) in groups {
                worst = worst.max((got[m] - xs.iter().sum::<f64>() / xs.len() as f64).abs());
            }
        }
    }
    let elapsed = t0.elapsed();
    check(worst <= 1e-12, format!("max error {worst:e} > 1e-12"))?;
    check(
        elapsed < Duration::from_secs(5),
        format!("took {elapsed:?}, limit 5 s"),
    )?;
    Ok(format!("max error {worst:e}, {elapsed:.2?}"))
}

fn scan_oracle() -> Outcome {
    let model = PiezoModel::default();
    let cfg = ScanConfig::default();
    let bound = model.quantization_bound();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for t in 0..1000 {
        let values: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let raw = tdma_scan(
            &PressureFrame::new(values.clone(), t).unwrap(),
            &model,
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let cellwise: Vec<u16> = values.iter().map(|p| piezo_readout(*p, &model)).collect();
        check(
            raw.counts == cellwise,
            format!("field {t}: scan differs from cellwise readout"),
        )?;
        for (a, b) in model.normalize(&raw).frame.values.iter().zip(&values) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= bound,
        format!("round-trip error {worst:e} > bound {bound:e}"),
    )?;
    Ok(format!(
        "exact on 1000 fields, round-trip {worst:.3e} <= bound {bound:.3e}"
    ))
}

fn trial_balance() -> Outcome {
    let site = BodySite::upper_arm();
    let expected = [
        (Protocol::Intensity, 30, 10),
        (Protocol::SingleLocation, 30, 5),
        (Protocol::PairLocation, 45, 3),
        (Protocol::ObjectTask, 15, 3),
    ];
    for (protocol, total, each) in expected {
        for seed in 0..1000 {
            let plan = gen_plan(protocol, &site, seed, None);
            check(
                plan.stimuli.len() == total,
                format!("{protocol:?} seed {seed}: {} trials", plan.stimuli.len()),
            )?;
            let mut counts: BTreeMap<Stimulus, usize> = BTreeMap::new();
            for s in &plan.stimuli {
                *counts.entry(*s).or_default() += 1;
            }
            check(
                counts.len() * each == total,
                format!("{protocol:?} seed {seed}: {} classes", counts.len()),
            )?;
            check(
                counts.values().all(|c| *c == each),
                format!("{protocol:?} seed {seed}: unequal counts"),
            )?;
        }
    }
    Ok("30/30/45/15 trials, 10/5/3/3 per stimulus, 1000 seeds each".into())
}

fn aggregate_fixtures() -> Outcome {
    let fixtures = [
        ((0.76, 0.88, 0.66), 77),
        ((0.76, 0.90, 0.49), 72),
        ((0.73, 0.81, 0.42), 65),
    ];
    for ((a, b, c), want) in fixtures {
        let got = aggregate_site_score(a, b, c).percent;
        check(
            got == want,
            format!("({a}, {b}, {c}) -> {got}%, want {want}%"),
        )?;
    }
    Ok("77% / 72% / 65%".into())
}

fn friedman_correctness() -> Outcome {
    let constant =
        friedman(&[vec![1.0; 4], vec![2.0; 4], vec![5.0; 4]]).map_err(|e| e.to_string())?;
    check(
        constant.chi2 == 0.0 && constant.p == 1.0,
        format!("constant blocks: {constant:?}"),
    )?;
    let fixture = friedman(&vec![vec![1.0, 2.0, 3.0]; 3]).map_err(|e| e.to_string())?;
    check(
        (fixture.chi2 - 6.0).abs() < 1e-12,
        format!("3x3 fixture chi2 {}", fixture.chi2),
    )?;
    check(
        (fixture.p - (-3.0f64).exp()).abs() < 1e-9,
        format!("p(6, df 2) = {}", fixture.p),
    )?;

    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let runs = 10_000;
    let mut rejected = 0;
    for _ in 0..runs {
        let data: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random()).collect())
            .collect();
        if friedman(&data).map_err(|e| e.to_string())?.p < 0.05 {
            rejected += 1;
        }
    }
    let rate = f64::from(rejected) / f64::from(runs);
    let elapsed = t0.elapsed();
    check(
        elapsed < Duration::from_secs(60),
        format!("null calibration took {elapsed:?}"),
    )?;
    check(
        (0.035..=0.065).contains(&rate),
        format!("null rejection rate {rate:.4} outside [0.035, 0.065] (chi-square p, n=3, k=6)"),
    )?;
    Ok(format!("fixtures exact, null rejection rate {rate:.4}"))
}

fn responder_convergence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            let w: Vec<f64> = (0..6).map(|_| rng.random()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        })
        .collect();
    let table = ConfusionTable::new(rows.clone()).map_err(|e| e.to_string())?;
    let model = ResponderModel::new(
        ResponderKind::ConfusionMatrix { table },
        BodySite::upper_arm(),
        5,
    )
    .map_err(|e| e.to_string())?;
    let mut r = Responder::new(model);
    let mut worst: f64 = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let mut counts = [0u32; 6];
        for _ in 0..10_000 {
            match r.respond(&Stimulus::Motor(i)).map_err(|e| e.to_string())? {
                Stimulus::Motor(m) => counts[m] += 1,
                other => return Err(format!("non-motor answer {other:?}")),
            }
        }
        for j in 0..6 {
            worst = worst.max((f64::from(counts[j]) / 10_000.0 - row[j]).abs());
        }
    }
    check(worst <= 0.03, format!("cell deviation {worst:.4} > 0.03"))?;

    let end_confusions = |arrangement| -> Result<u32, String> {
        let site = BodySite::new(SiteName::Custom("probe".into()), arrangement, 6)
            .map_err(|e| e.to_string())?;
        let model = ResponderModel::new(ResponderKind::SpatialGaussian { sigma: 1.0 }, site, 6)
            .map_err(|e| e.to_string())?;
        let mut r = Responder::new(model);
        let mut n = 0;
        for (from, to) in [(0, 5), (5, 0)] {
            for _ in 0..10_000 {
                if r.respond(&Stimulus::Motor(from))
                    .map_err(|e| e.to_string())?
                    == Stimulus::Motor(to)
                {
                    n += 1;
                }
            }
        }
        Ok(n)
    };
    let (ring, line) = (
        end_confusions(Arrangement::Ring)?,
        end_confusions(Arrangement::Line)?,
    );
    check(
        ring > line,
        format!("0<->5 confusions ring {ring} <= line {line}"),
    )?;
    Ok(format!(
        "max cell deviation {worst:.4}, 0<->5 confusions ring {ring} vs line {line}"
    ))
}

fn codec() -> Outcome {
    let types = [
        PacketType::SensorFrame,
        PacketType::MotorCommand,
        PacketType::Ack,
        PacketType::Config,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..10_000 {
        let ptype = types[rng.random_range(0..types.len())];
        let seq: u8 = rng.random();
        let len = rng.random_range(0..=MAX_PAYLOAD);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let bytes = encode_packet(ptype, seq, &payload).map_err(|e| e.to_string())?;
        let back = decode_packet(&bytes).map_err(|e| format!("packet {i}: {e}"))?;
        check(
            back.ptype == ptype && back.seq == seq && back.payload == payload,
            format!("packet {i} differs"),
        )?;
    }

    let reference =
        encode_packet(PacketType::SensorFrame, 9, &(0..50).collect::<Vec<u8>>()).unwrap();
    for bit in 0..reference.len() * 8 {
        let mut corrupt = reference.clone();
        corrupt[bit / 8] ^= 1 << (bit % 8);
        check(
            decode_packet(&corrupt).is_err(),
            format!("bit flip {bit} accepted"),
        )?;
    }

    let check_value = crc16_ccitt_false(b"123456789");
    check(
        check_value == 0x29B1,
        format!("check value {check_value:#06X}"),
    )?;

    let mut ch = Channel::new(ChannelConfig {
        loss_prob: 0.3,
        seed: 6,
        ..ChannelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let delivered = (0..10_000u64)
        .filter(|i| {
            matches!(
                ch.send(*i as u8, vec![0; 8], *i),
                SendOutcome::Scheduled { .. }
            )
        })
        .count();
    let frac = delivered as f64 / 10_000.0;
    check(
        (frac - 0.70).abs() <= 0.02,
        format!("delivery fraction {frac:.4} not 0.70 +/- 0.02"),
    )?;
    Ok(format!(
        "10000 round trips, {} bit flips rejected, CRC 0x29B1, delivery {frac:.4}",
        reference.len() * 8
    ))
}

fn vibrotwin(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vibrotwin"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "vibrotwin {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn summaries(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".summary.json"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let logs = tmp.path().join("logs");
    let report = tmp.path().join("report");
    let logs_arg = logs.to_string_lossy().into_owned();
    for protocol in ["intensity", "single-location", "pair-location"] {
        vibrotwin(&[
            "run-experiment",
            "--protocol",
            protocol,
            "--responder",
            "perfect",
            "--seed",
            "11",
            "--out",
            &logs_arg,
        ])?;
    }
    let live = summaries(&logs);
    check(live.len() == 3, format!("{} live summaries", live.len()))?;
    for (name, bytes) in &live {
        let v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        check(
            v["accuracy"] == 1.0,
            format!("{name}: accuracy {}", v["accuracy"]),
        )?;
    }

    vibrotwin(&[
        "analyze",
        "--input",
        &logs_arg,
        "--report",
        &report.to_string_lossy(),
    ])?;
    let offline = summaries(&report);
    check(offline == live, "offline summaries differ from live ones")?;

    let layout = default_layout();
    let mode = builtin_mode(Focus::FingerFocused, 6, &layout).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    let capacity = cfg.queue_capacity;
    let mut pipeline = Pipeline::new(
        GraspScenario::new(GraspObject::Ball, 1.0),
        layout,
        PiezoModel::default(),
        ScanConfig::default(),
        mode,
        EncoderConfig::binary(0.5),
        cfg,
        7,
    )
    .map_err(|e| e.to_string())?;
    let r = pipeline.run(60_000).map_err(|e| e.to_string())?;
    check(
        r.frames == 6000,
        format!("{} frames in 60 s at 100 Hz", r.frames),
    )?;
    for (name, q) in [
        ("scan", &r.scan_queue),
        ("tx", &r.tx_queue),
        ("rx", &r.rx_queue),
    ] {
        check(
            q.max_depth <= capacity,
            format!("{name} queue depth {} > {capacity}", q.max_depth),
        )?;
        check(
            q.dropped == 0,
            format!("{name} queue dropped {}", q.dropped),
        )?;
    }
    // Link latency 30 ms + 5 ms jitter at one packet per 5 ms.
    check(
        r.max_in_flight <= 8,
        format!("{} packets in flight", r.max_in_flight),
    )?;
    Ok(format!(
        "accuracy 1.0 x3, summaries byte-identical, 60 s pipeline max queue depth {}/{capacity}, in flight {}",
        r.scan_queue.max_depth.max(r.tx_queue.max_depth).max(r.rx_queue.max_depth),
        r.max_in_flight
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("compression oracle", compression_oracle),
        ("scan oracle", scan_oracle),
        ("trial balance", trial_balance),
        ("aggregate-score fixtures", aggregate_fixtures),
        ("friedman correctness", friedman_correctness),
        ("responder convergence", responder_convergence),
        ("codec", codec),
        ("end-to-end", end_to_end),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
