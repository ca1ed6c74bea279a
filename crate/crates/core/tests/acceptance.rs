//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Runs without the libtest harness so the lines are always
//! printed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rubble_core::dsp::{dct_matrix, hamming, mfe, AudioClip, FrameConfig, Frontend, MelFilterbank};
use rubble_core::labels::{Decision, Label};
use rubble_core::metrics::{metrics_from_confusion, parse_percentage_table, reconstruct_counts};
use rubble_core::nn::{adam_step, gradients, AdamConfig, AdamState, LayerParams, ModelSpec, TrainConfig, Weights};
use rubble_core::pipeline::Classifier;
use rubble_core::protocol::{read_session_log, recorded_commands, replay, SessionLog};
use rubble_core::sim::{load_map, parse_command_log, SimConfig, Simulator};
use rubble_core::synth::{generate_clip, DatasetPlan, Split};
use rubble_core::telemetry::{
    calibration_report, emit_prediction_block, emit_sensor_block, emit_sensor_block_stamped, load_calibration_csv, parse_prediction_block,
    parse_sensor_block, SensorFrame,
};
use rubble_core::tuner::{
    enumerate_candidates, estimate_cost, score_candidate, tune, DeviceBudget, SearchSpace, TuneConfig, TunerError,
};

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_time(start: Instant, limit: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    ensure(took < limit, format!("{detail}; took {took:?}, limit {limit:?}"))?;
    Ok(format!("{detail}; {took:.2?}"))
}

fn table_reproduction() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (file, f1, acc) in [
        ("confusion/validation.csv", [0.78, 0.78, 0.94, 0.69, 0.96], 83.6),
        ("confusion/test.csv", [0.87, 0.91, 1.00, 0.87, 0.95], 89.83),
    ] {
        let t = parse_percentage_table(&read(file)).map_err(|e| e.to_string())?;
        let m = reconstruct_counts(&t.rows, t.accuracy_pct, 200).map_err(|e| e.to_string())?;
        let r = metrics_from_confusion(&m).map_err(|e| e.to_string())?;
        let worst = r.f1.iter().zip(f1).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        let acc_pct = 100.0 * r.accuracy;
        ensure(worst <= 0.005, format!("{file}: F1 off by {worst:.4} (F1 {:?})", r.f1))?;
        ensure((acc_pct - acc).abs() <= 0.1, format!("{file}: accuracy {acc_pct:.3}% vs {acc}%"))?;
        notes.push(format!("{file} n={} acc {acc_pct:.2}% max|dF1| {worst:.4}", m.total()));
    }
    within_time(start, Duration::from_secs(1), notes.join(", "))
}

fn decimals(s: &str) -> usize {
    s.split_once('.').map_or(0, |(_, f)| f.len())
}

fn calibration_reproduction() -> Outcome {
    let start = Instant::now();
    let sensors = ["calibration/temperature.csv", "calibration/humidity.csv", "calibration/pressure.csv"]
        .iter()
        .map(|f| load_calibration_csv(fixtures().join(f)).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let report = calibration_report(&sensors).map_err(|e| e.to_string())?;
    let mut rows = 0;
    let mut raw_worst = 0.0f64;
    for s in &report.sensors {
        for (i, r) in s.rows.iter().enumerate() {
            let printed = r.printed_pct_error.as_deref().ok_or(format!("{} row {} has no printed value", s.sensor, i + 1))?;
            let p: f64 = printed.parse().map_err(|_| format!("bad print {printed}"))?;
            let shown: f64 = format!("{:.*}", decimals(printed), r.pct_error).parse().unwrap();
            ensure(
                (shown - p).abs() <= 0.001,
                format!("{} row {}: {:.6} renders {shown} vs printed {printed}", s.sensor, i + 1, r.pct_error),
            )?;
            raw_worst = raw_worst.max((r.pct_error - p).abs());
            rows += 1;
        }
    }
    let pressure = report.sensors.iter().find(|s| s.sensor == "pressure").ok_or("no pressure table")?;
    ensure(format!("{:.2}", pressure.average_pct_error) == "6.97", format!("pressure average {}", pressure.average_pct_error))?;
    let collective = report.stated_collective_accuracy_pct.ok_or("no stated collective")?;
    ensure(format!("{collective:.3}") == "97.456", format!("collective {collective}"))?;
    for (sensor, recomputed) in [("temperature", "0.45007"), ("humidity", "0.19707")] {
        ensure(
            report.discrepancies.iter().any(|d| d.sensor == sensor && d.quantity == "average_pct_error"),
            format!("no discrepancy flag for the {sensor} average"),
        )?;
        let s = report.sensors.iter().find(|s| s.sensor == sensor).unwrap();
        let printed_mean = s.printed_average_pct_error.ok_or("missing printed mean")?;
        ensure(format!("{printed_mean:.5}") == recomputed, format!("{sensor} recomputed {printed_mean:.5} vs {recomputed}"))?;
    }
    within_time(
        start,
        Duration::from_secs(1),
        format!(
            "{rows} rows match at printed precision (max raw |d| {raw_worst:.4}), pressure 6.97%, collective {collective:.3}% (rows give {:.3}%), {} flags",
            report.collective_accuracy_pct,
            report.discrepancies.len()
        ),
    )
}

struct Trained {
    classifier: Classifier,
}

fn synthetic_accuracy(trained: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let plan = DatasetPlan::from_fraction(120, 0.84).map_err(|e| e.to_string())?;
    let all = plan.generate(42);
    let train = common::labeled(all.clone(), Split::Train);
    let test = common::labeled(all, Split::Test);
    let fe = Frontend::default();
    let spec = ModelSpec::default_audio(fe.clip_shape().unwrap());
    let (classifier, _) = Classifier::train(fe, spec, &train, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let mut cm = [[0usize; 5]; 5];
    let mut thresholded = 0;
    for c in &test {
        let p = classifier.predict(c).map_err(|e| e.to_string())?;
        let top = (0..5).fold(0, |b, i| if p.probabilities[i] > p.probabilities[b] { i } else { b });
        let truth = c.label.unwrap();
        cm[truth.index()][top] += 1;
        thresholded += usize::from(p.decision == Decision::Class(truth));
    }
    let correct: usize = (0..5).map(|i| cm[i][i]).sum();
    let acc = correct as f64 / test.len() as f64;
    let mut pairs: Vec<((usize, usize), usize)> =
        (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j))).map(|(i, j)| ((i, j), cm[i][j] + cm[j][i])).collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1));
    let target = (Label::Breathes.index(), Label::MuffledWords.index());
    *trained = Some(Trained { classifier });
    ensure(acc >= 0.90, format!("held-out accuracy {acc:.3} < 0.90"))?;
    ensure(pairs[0].1 > 0, "no off-diagonal confusion at all")?;
    ensure(
        pairs[0].0 == target && pairs[1].1 < pairs[0].1,
        format!("largest confusion pair {:?} ({}), next {:?} ({})", pairs[0].0, pairs[0].1, pairs[1].0, pairs[1].1),
    )?;
    within_time(
        start,
        Duration::from_secs(300),
        format!(
            "accuracy {acc:.3} ({correct}/{}), {:.3} with 0.6 threshold, muffled_words<->breathes confusions {} (next pair {})",
            test.len(),
            thresholded as f64 / test.len() as f64,
            pairs[0].1,
            pairs[1].1
        ),
    )
}

fn numerical_suite() -> Outcome {
    // gradient check
    let mut worst = 0.0f64;
    let mut worst_elem = 0.0f64;
    for seed in 0..20 {
        let (spec, weights, batch) = common::random_model(seed);
        let (_, g) = gradients(&spec, &weights, &batch).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = g.iter().copied().collect();
        let numeric = common::numeric_gradient(&spec, &weights, &batch, 1e-5);
        worst = worst.max(common::relative_error(&analytic, &numeric));
        worst_elem = worst_elem.max(common::max_elementwise_error(&analytic, &numeric, 1e-4));
    }
    ensure(worst < 1e-4, format!("gradient relative error {worst:.2e}"))?;

    // Adam scalar step
    let mut adam_err = 0.0f64;
    let cfg = AdamConfig::default();
    let mut w = Weights { layers: vec![LayerParams { weights: vec![0.7], bias: vec![] }] };
    let mut state = AdamState::new(&w);
    let mut oracle = common::ScalarAdam::new(cfg.learning_rate);
    let mut expect = 0.7;
    for (t, g) in [0.3, -1.2, 0.05, 2.5, -0.4].into_iter().enumerate() {
        let grad = Weights { layers: vec![LayerParams { weights: vec![g], bias: vec![] }] };
        adam_step(&mut w, &grad, &mut state, t as u64 + 1, &cfg).map_err(|e| e.to_string())?;
        expect = oracle.step(expect, g);
        adam_err = adam_err.max((w.layers[0].weights[0] - expect).abs());
    }
    ensure(adam_err <= 1e-12, format!("adam deviates by {adam_err:.2e}"))?;

    // MFE gain shift
    let frame = FrameConfig::default();
    let bank = MelFilterbank::new(16000, 512, 40, 300.0, 8000.0).map_err(|e| e.to_string())?;
    let mut gain_err = 0.0f64;
    for label in Label::ALL {
        let clip = generate_clip(label, 11);
        let half = AudioClip { samples: clip.samples.iter().map(|s| s / 2).collect(), ..clip.clone() };
        let doubled = half.amplified(2);
        let (a, b) = (mfe(&half, &frame, &bank).unwrap(), mfe(&doubled, &frame, &bank).unwrap());
        for (u, v) in a.values.iter().zip(&b.values) {
            if *u > -11.0 {
                gain_err = gain_err.max((v - u - 2.0 * 2f64.log10()).abs());
            }
        }
    }
    ensure(gain_err <= 1e-9, format!("gain shift error {gain_err:.2e}"))?;

    // DCT orthonormality
    let d = dct_matrix(40, 40);
    let mut dct_err = 0.0f64;
    for i in 0..40 {
        for j in 0..40 {
            let dot: f64 = (0..40).map(|k| d[i][k] * d[j][k]).sum();
            dct_err = dct_err.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure(dct_err <= 1e-9, format!("DCT orthonormality error {dct_err:.2e}"))?;

    // Filterbank partition of unity between the first and last centers
    let (c0, c1) = (bank.centers_hz()[0], *bank.centers_hz().last().unwrap());
    let mut fb_err = 0.0f64;
    for k in 0..bank.num_bins() {
        let f = k as f64 * 16000.0 / 512.0;
        if f >= c0 && f <= c1 {
            let s: f64 = bank.weights.iter().map(|row| row[k]).sum();
            fb_err = fb_err.max((s - 1.0).abs());
        }
    }
    ensure(fb_err <= 1e-6, format!("filterbank column sum error {fb_err:.2e}"))?;

    // Parseval against a direct DFT
    let analyzer = rubble_core::dsp::SpectrumAnalyzer::new(&frame).map_err(|e| e.to_string())?;
    let window = hamming(frame.frame_len);
    let clip = generate_clip(Label::Cough, 5).normalized();
    let mut parseval = 0.0f64;
    for start in [0usize, 4000, 9000] {
        let x = &clip[start..start + frame.frame_len];
        let p = analyzer.power(x).unwrap();
        let n = frame.fft_size;
        let full = 2.0 * p.iter().sum::<f64>() - p[0] - p[n / 2];
        let xw: Vec<f64> = x.iter().zip(&window).map(|(a, b)| a * b).collect();
        let direct = common::naive_dft_energy(&xw, n);
        let time = n as f64 * xw.iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max(((full - direct) / direct).abs()).max(((full - time) / time).abs());
    }
    ensure(parseval <= 1e-6, format!("Parseval relative error {parseval:.2e}"))?;

    Ok(format!(
        "grad {worst:.1e} (per-param {worst_elem:.1e}), adam {adam_err:.1e}, gain {gain_err:.1e}, dct {dct_err:.1e}, filterbank {fb_err:.1e}, parseval {parseval:.1e}"
    ))
}

fn serial_codec() -> Outcome {
    let pred = parse_prediction_block(&read("serial/prediction_block.txt")).map_err(|e| e.to_string())?;
    ensure((pred.dsp_ms, pred.classification_ms, pred.anomaly_ms) == (304, 19, 0), format!("timings {pred:?}"))?;
    ensure(pred.probabilities == [0.00, 0.07, 0.07, 0.65, 0.21], format!("probabilities {:?}", pred.probabilities))?;
    let frame = parse_sensor_block(&read("serial/sensor_block.txt")).map_err(|e| e.to_string())?;
    ensure(
        (frame.gas_raw, frame.temp_c, frame.humidity_pct, frame.pressure_kpa) == (168, 32.67, 52.81, 0.00),
        format!("frame {frame:?}"),
    )?;
    let pred2 = parse_prediction_block(&emit_prediction_block(&pred)).map_err(|e| e.to_string())?;
    let frame2 = parse_sensor_block(&emit_sensor_block_stamped(&frame)).map_err(|e| e.to_string())?;
    let bare = parse_sensor_block(&emit_sensor_block(&frame)).map_err(|e| e.to_string())?;
    ensure(bare == SensorFrame { timestamp_ms: 0, ..frame }, "unstamped sensor round trip")?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(pred2 == pred && bits(&pred2.probabilities) == bits(&pred.probabilities), "prediction round trip")?;
    ensure(
        frame2 == frame && bits(&[frame2.temp_c, frame2.humidity_pct]) == bits(&[frame.temp_c, frame.humidity_pct]),
        "sensor round trip",
    )?;
    ensure(emit_prediction_block(&pred2) == emit_prediction_block(&pred), "re-emission differs")?;
    Ok("prediction 304/19/0 ms [0.00 0.07 0.07 0.65 0.21], sensor 168/32.67/52.81/0.00, round trips bit-exact".into())
}

fn tuner() -> Outcome {
    let start = Instant::now();
    let plan = DatasetPlan::from_fraction(12, 0.99).map_err(|e| e.to_string())?;
    let clips = common::labeled(plan.generate(42), Split::Train);
    let (candidates, _) = enumerate_candidates(&SearchSpace::desk_default());
    ensure(candidates.len() <= 24, format!("{} candidates", candidates.len()))?;
    let cfg = TuneConfig { epochs: 4, ..TuneConfig::default() };
    let scored: Vec<common::Scored> = candidates
        .iter()
        .map(|c| common::Scored {
            id: c.id.clone(),
            accuracy: score_candidate(c, &clips, &cfg).unwrap(),
            cost: estimate_cost(c, &DeviceBudget::default()).unwrap(),
        })
        .collect();
    let mut rams: Vec<u64> = scored.iter().map(|s| s.cost.ram_bytes).collect();
    rams.sort_unstable();
    let budgets = [
        DeviceBudget::default(),
        DeviceBudget { sram_bytes: rams[rams.len() / 2], ..DeviceBudget::default() },
        DeviceBudget { latency_budget_ms: 200.0, flash_bytes: 60_000, ..DeviceBudget::default() },
    ];
    let mut notes = Vec::new();
    for budget in &budgets {
        let out = tune(&candidates, &clips, budget, &cfg).map_err(|e| e.to_string())?;
        let oracle = common::brute_force_best(&scored, budget).ok_or("oracle found nothing feasible")?;
        ensure(out.best.id == oracle.id, format!("tune picked {} but exhaustive search picked {}", out.best.id, oracle.id))?;
        let cost = estimate_cost(&out.best, budget).unwrap();
        ensure(cost.fits(budget), format!("{} exceeds budget", out.best.id))?;
        ensure(cost.ram_bytes <= 256 * 1024 && cost.rom_bytes <= 1024 * 1024, "outside 256 KB / 1 MB")?;
        let feasible = out.leaderboard.iter().filter(|e| e.feasible).count();
        notes.push(format!("{} ({feasible}/{} feasible)", out.best.id, candidates.len()));
    }
    let tiny = DeviceBudget { sram_bytes: 1024, ..DeviceBudget::default() };
    match tune(&candidates, &clips, &tiny, &cfg) {
        Err(TunerError::NoFeasibleCandidate) => {}
        other => return Err(format!("all-infeasible grid gave {:?}", other.map(|o| o.best.id))),
    }
    within_time(start, Duration::from_secs(300), format!("{} candidates; best per budget: {}; 1 KB SRAM -> NoFeasibleCandidate", candidates.len(), notes.join(", ")))
}

fn end_to_end(trained: &Option<Trained>) -> Outcome {
    let classifier = Arc::new(trained.as_ref().ok_or("no trained classifier")?.classifier.clone());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let map = load_map(fixtures().join("maps/demo.json")).map_err(|e| e.to_string())?;
    let commands = parse_command_log(&read("maps/demo_commands.jsonl")).map_err(|e| e.to_string())?;
    let cfg = SimConfig { seed: 42, ..SimConfig::default() };
    let write = |name: &str, cmds: &[rubble_core::sim::TimedCommand]| -> Result<Vec<u8>, String> {
        let sim = Simulator::new(map.clone(), Some(classifier.clone()), cfg).map_err(|e| e.to_string())?;
        let stream = replay(sim, cmds, 20).map_err(|e| e.to_string())?;
        let path = dir.path().join(name);
        let mut log = SessionLog::create(&path).map_err(|e| e.to_string())?;
        for e in &stream {
            log.append(e).map_err(|e| e.to_string())?;
        }
        drop(log);
        std::fs::read(&path).map_err(|e| e.to_string())
    };
    let a = write("a.ndjson", &commands)?;
    let b = write("b.ndjson", &commands)?;
    ensure(a == b, "two runs differ")?;
    let recovered = recorded_commands(&read_session_log(dir.path().join("a.ndjson")).map_err(|e| e.to_string())?);
    let c = write("c.ndjson", &recovered)?;
    ensure(a == c, "replay from the session log differs")?;
    let lines = a.iter().filter(|&&b| b == b'\n').count();

    let hh = load_map(fixtures().join("maps/hello_help.json")).map_err(|e| e.to_string())?;
    let sim = Simulator::new(hh, Some(classifier), cfg).map_err(|e| e.to_string())?;
    let stream = replay(sim, &[], 50).map_err(|e| e.to_string())?;
    let preds: Vec<_> = stream
        .iter()
        .filter_map(|e| match &e.message {
            rubble_core::protocol::Message::Prediction(p) => Some(p.decision(classifier_threshold(trained))),
            _ => None,
        })
        .collect();
    ensure(preds.len() == 50, format!("{} predictions", preds.len()))?;
    let hits = preds.iter().filter(|d| **d == Decision::Class(Label::HelloHelp)).count();
    ensure(hits >= 40, format!("hello_help on {hits}/50 ticks"))?;
    Ok(format!("session logs byte-identical ({lines} lines, direct and replayed from log); hello_help on {hits}/50 ticks"))
}

fn classifier_threshold(trained: &Option<Trained>) -> f64 {
    trained.as_ref().map_or(rubble_core::nn::DEFAULT_THRESHOLD, |t| t.classifier.threshold)
}

fn performance(trained: &Option<Trained>) -> Outcome {
    let classifier = &trained.as_ref().ok_or("no trained classifier")?.classifier;
    let clips: Vec<AudioClip> = Label::ALL.iter().map(|&l| generate_clip(l, 99)).collect();
    let mut times = Vec::new();
    for round in 0..6 {
        for c in &clips {
            let t = Instant::now();
            let p = classifier.predict(c).map_err(|e| e.to_string())?;
            let dt = t.elapsed();
            std::hint::black_box(p);
            if round > 0 {
                times.push(dt);
            }
        }
    }
    times.sort();
    let (median, max) = (times[times.len() / 2], *times.last().unwrap());
    ensure(max < Duration::from_millis(304), format!("slowest featurize+infer {max:?}"))?;
    Ok(format!("median {median:.2?}, max {max:.2?} over {} clips (ceiling 304 ms, target 10 ms {})", times.len(), if median < Duration::from_millis(10) { "met" } else { "missed" }))
}

fn main() {
    let mut trained = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("{tag}  {name:<26} {detail}  [{:.2?}]", start.elapsed());
        results.push((name, r));
    };
    run("table-reproduction", &mut table_reproduction);
    run("calibration-reproduction", &mut calibration_reproduction);
    run("synthetic-accuracy", &mut || synthetic_accuracy(&mut trained));
    run("numerical-suite", &mut numerical_suite);
    run("serial-codec", &mut serial_codec);
    run("tuner", &mut tuner);
    run("end-to-end-determinism", &mut || end_to_end(&trained));
    run("performance", &mut || performance(&trained));
    let passed = results.iter().filter(|(_, r)| r.is_ok()).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
