use loadcast::backtest::{fmt_sig, improvement_pct, median_by_day, read_records};
use loadcast::features::{compute_aggregate, HistoryView};
use loadcast::ingestion::load_archive;
use loadcast::lstm::{load_model, predict_24h, save_model};
use loadcast::synth::{generate_group, SynthConfig};
use loadcast::MethodId;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const SMALL: &str = r#"
[synth]
n_meters = 6
n_hours = 624
seed = 11

[plan]
train_hours = 528

[train]
epochs = 2
"#;

fn loadcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loadcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    archive: PathBuf,
}

impl Fixture {
    /// Synthesizes and ingests a group with the given config text.
    fn new(config_text: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_owned();
        let config = root.join("run.toml");
        fs::write(&config, config_text).unwrap();
        let raw = root.join("raw");
        ok(loadcast(&["synth", "--config", s(&config), s(&raw)]));
        let archives = root.join("archives");
        ok(loadcast(&[
            "ingest",
            "--config",
            s(&config),
            s(&raw.join("meters.csv")),
            s(&raw.join("weather.csv")),
            s(&raw.join("segments.csv")),
            s(&archives),
        ]));
        Fixture {
            archive: archives.join("synthetic.json"),
            _tmp: tmp,
            root,
            config,
        }
    }

    fn train(&self, model: &Path) -> Output {
        ok(loadcast(&["train", "--config", s(&self.config), s(&self.archive), s(model)]))
    }
}

#[test]
fn synth_is_deterministic_and_round_trips_through_ingest() {
    let fx = Fixture::new(SMALL);
    let again = fx.root.join("raw2");
    ok(loadcast(&["synth", "--config", s(&fx.config), s(&again)]));
    for f in ["meters.csv", "weather.csv", "segments.csv"] {
        assert_eq!(
            fs::read(fx.root.join("raw").join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    let expected = generate_group(&SynthConfig {
        n_meters: 6,
        n_hours: 624,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_eq!(load_archive(&fx.archive).unwrap(), expected);
    let report = fs::read_to_string(fx.archive.with_file_name("filtering_report.csv")).unwrap();
    assert_eq!(report, "group_id,meter_id,reason\n");
}

#[test]
fn default_synth_fixture_is_quick() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = ok(loadcast(&["synth", s(tmp.path())]));
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 10.0, "default fixture took {secs:.1}s");
    assert!(stderr(&out).contains("100 meters x 8760 hours"));
}

#[test]
fn ingest_names_the_bad_column() {
    let fx = Fixture::new(SMALL);
    let raw = fx.root.join("raw");
    let meters = fs::read_to_string(raw.join("meters.csv")).unwrap();
    let broken = fx.root.join("broken.csv");
    fs::write(&broken, meters.replacen("kwh", "energy", 1)).unwrap();
    let out = loadcast(&[
        "ingest",
        s(&broken),
        s(&raw.join("weather.csv")),
        s(&raw.join("segments.csv")),
        s(&fx.root.join("out")),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("kwh") && err.contains("energy"), "{err}");
}

#[test]
fn ingest_warns_when_filtering_empties_a_group() {
    let fx = Fixture::new(SMALL);
    let raw = fx.root.join("raw");
    let mut meters = fs::read_to_string(raw.join("meters.csv")).unwrap();
    let start = chrono::NaiveDate::from_ymd_opt(2013, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    for h in 0..624 {
        let ts = start + chrono::Duration::hours(h);
        meters.push_str(&format!("FLAT,{},0.5\n", ts.format("%Y-%m-%dT%H:%M:%S")));
    }
    fs::write(raw.join("meters.csv"), meters).unwrap();
    let mut segments = fs::read_to_string(raw.join("segments.csv")).unwrap();
    segments.push_str("FLAT,flat\n");
    fs::write(raw.join("segments.csv"), segments).unwrap();
    let out_dir = fx.root.join("out");
    let out = ok(loadcast(&[
        "ingest",
        s(&raw.join("meters.csv")),
        s(&raw.join("weather.csv")),
        s(&raw.join("segments.csv")),
        s(&out_dir),
    ]));
    assert!(stderr(&out).contains("warning: group flat has no meters left"), "{}", stderr(&out));
    assert!(out_dir.join("synthetic.json").exists());
    assert!(!out_dir.join("flat.json").exists());
    let report = fs::read_to_string(out_dir.join("filtering_report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("flat,FLAT,")), "{report}");
}

#[test]
fn train_echoes_defaults_and_is_reproducible() {
    let fx = Fixture::new(SMALL);
    let (a, b) = (fx.root.join("a.bin"), fx.root.join("b.bin"));
    let out = fx.train(&a);
    let err = stderr(&out);
    assert!(err.contains("epochs = 2"), "{err}");
    assert!(err.contains("batch_size = 1000"), "{err}");
    assert!(err.contains("learning_rate = 0.001"), "{err}");
    assert!(err.contains("train_fraction = 0.8"), "{err}");
    fx.train(&b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let trace = fs::read_to_string(fx.root.join("a.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.starts_with("epoch,mean_loss\n1,"));

    let model = load_model(&a).unwrap();
    assert_eq!(model.meta.train_hours, 528);
    assert_eq!(model.meta.train_meter_ids.len(), 5);
}

#[test]
fn three_method_backtest_fills_the_grid_and_summary_matches_records() {
    let fx = Fixture::new(SMALL);
    let model = fx.root.join("m.bin");
    fx.train(&model);
    let out_dir = fx.root.join("bt");
    ok(loadcast(&[
        "backtest",
        "--config",
        s(&fx.config),
        "--model",
        s(&model),
        s(&fx.archive),
        s(&out_dir),
    ]));
    let records = read_records(out_dir.join("records.csv")).unwrap();
    // 3 methods x 6 meters x 4 test days.
    assert_eq!(records.len(), 3 * 6 * 4);
    for f in ["summary.json", "median_by_day.csv", "median_by_meter.csv"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let lstm = median_by_day(&records, MethodId::Lstm).unwrap().overall;
    for bench in [MethodId::Naive, MethodId::Arima] {
        let b = median_by_day(&records, bench).unwrap().overall;
        let by_hand = improvement_pct(b, lstm);
        let reported = summary["populations"]["all"]["improvements"]
            .as_array()
            .unwrap()
            .iter()
            .find(|i| i["benchmark"] == bench.as_str())
            .unwrap()["by_day_pct"]
            .as_f64()
            .unwrap();
        assert!(
            (by_hand - reported).abs() <= 1e-3 * by_hand.abs().max(1.0),
            "{bench:?}: {by_hand} vs {reported}"
        );
    }
}

#[test]
fn naive_backtest_on_periodic_data_is_exact() {
    let fx = Fixture::new(
        r#"
[synth]
n_meters = 5
n_hours = 480
noise_std = 0.0
zero_inflation = 0.0
weekly_amplitude = 0.0
weather_noise_std = 0.0
temperature_annual_amplitude = 0.0

[plan]
train_hours = 240
"#,
    );
    let out_dir = fx.root.join("bt");
    ok(loadcast(&[
        "backtest",
        "--config",
        s(&fx.config),
        "--methods",
        "naive",
        s(&fx.archive),
        s(&out_dir),
    ]));
    let records = read_records(out_dir.join("records.csv")).unwrap();
    assert_eq!(records.len(), 5 * 10);
    assert!(records.iter().all(|r| r.mae == 0.0));
    let by_day = fs::read_to_string(out_dir.join("median_by_day.csv")).unwrap();
    assert!(by_day.lines().skip(1).all(|l| l.ends_with(",0")), "{by_day}");
}

#[test]
fn backtest_refuses_a_model_with_another_feature_order() {
    let fx = Fixture::new(SMALL);
    let path = fx.root.join("m.bin");
    fx.train(&path);
    let mut model = load_model(&path).unwrap();
    model.feature_order = "v0:consumption,temperature".into();
    save_model(&model, &path).unwrap();
    let out = loadcast(&["backtest", "--model", s(&path), s(&fx.archive), s(&fx.root.join("bt"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("feature order"), "{}", stderr(&out));

    let out = loadcast(&["backtest", s(&fx.archive), s(&fx.root.join("bt"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("needs --model"));
}

fn library_table(model: &Path, archive: &Path, meter: &str, origin: usize) -> String {
    let model = load_model(model).unwrap();
    let mut group = load_archive(archive).unwrap();
    group.aggregate = compute_aggregate(&group, &model.meta.train_meter_ids).unwrap();
    let values = &group.meter(meter).unwrap().values;
    let stats = model.meter_stats(meter, &values[..model.meta.train_hours]).unwrap();
    let view = HistoryView::of_group(&group, meter, origin).unwrap();
    let fc = predict_24h(&model, meter, &view, &stats).unwrap();
    let mut out = String::from("hour,kwh\n");
    for (h, v) in fc.values.iter().enumerate() {
        let ts = group.start() + chrono::Duration::hours((origin + h) as i64);
        out.push_str(&format!("{},{}\n", ts.format("%Y-%m-%dT%H:%M:%S"), fmt_sig(*v)));
    }
    out
}

#[test]
fn forecast_matches_the_library_for_train_and_test_meters() {
    let fx = Fixture::new(SMALL);
    let path = fx.root.join("m.bin");
    fx.train(&path);
    let model = load_model(&path).unwrap();
    let group = load_archive(&fx.archive).unwrap();
    let train_meter = model.meta.train_meter_ids[0].clone();
    let test_meter = group
        .meter_ids()
        .into_iter()
        .find(|m| !model.meta.train_meter_ids.contains(m))
        .unwrap();
    for meter in [&train_meter, &test_meter] {
        let out = ok(loadcast(&["forecast", s(&path), s(&fx.archive), meter, "2013-01-24"]));
        let table = String::from_utf8(out.stdout).unwrap();
        assert_eq!(table.lines().count(), 25);
        assert_eq!(table, library_table(&path, &fx.archive, meter, 23 * 24));
    }
    let written = fx.root.join("fc.csv");
    let out = ok(loadcast(&[
        "forecast",
        "--out",
        s(&written),
        s(&path),
        s(&fx.archive),
        &test_meter,
        "2013-01-24T00:00:00",
    ]));
    assert_eq!(fs::read(&written).unwrap(), out.stdout);
}

#[test]
fn forecast_errors_are_reported() {
    let fx = Fixture::new(SMALL);
    let path = fx.root.join("m.bin");
    fx.train(&path);
    let group = load_archive(&fx.archive).unwrap();
    let meter = group.meter_ids()[0].clone();

    let out = loadcast(&["forecast", s(&path), s(&fx.archive), &meter, "2013-01-01"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("fewer than 24 hours"), "{}", stderr(&out));

    let out = loadcast(&["forecast", s(&path), s(&fx.archive), "NOPE", "2013-01-24"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("meter NOPE"));

    let out = loadcast(&["forecast", s(&path), s(&fx.archive), &meter, "yesterday"]);
    assert!(!out.status.success());
}

#[test]
fn configuration_mistakes_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = loadcast(&["synth", "--config", s(&cfg), s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("epoch"));

    let out = Command::new(env!("CARGO_BIN_EXE_loadcast"))
        .env("LOADCAST_WORKERS", "0")
        .args(["synth", s(&tmp.path().join("o"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("LOADCAST_WORKERS"));
}
