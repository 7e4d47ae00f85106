use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use facelr::evaluation::CvScheme;
use facelr::pipeline::{self, DataSource, PipelineConfig};
use facelr::scoring::{self, ScoreOptions};
use facelr::store::{self, Grouping, IngestOptions};
use facelr::{calibration, synthetic, Calibrator, Strategy, SyntheticConfig};

fn facelr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facelr"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = facelr(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small() -> SyntheticConfig {
    SyntheticConfig {
        dim: 16,
        n_identities: 12,
        traces_per_identity: 4,
        seed: 5,
        ..SyntheticConfig::default()
    }
}

const SMALL: [&str; 9] = ["--seed", "5", "--dim", "16", "--ids", "12", "--traces", "4", "--out"];

fn synth(dir: &Path) -> std::path::PathBuf {
    let mut args = vec!["synth"];
    args.extend(SMALL);
    args.push("synth.jsonl");
    ok(dir, &args);
    dir.join("synth.jsonl")
}

#[test]
fn synth_matches_library_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path());
    let mut expected = Vec::new();
    synthetic::generate(&small()).unwrap().write_jsonl(&mut expected).unwrap();
    assert_eq!(fs::read(path).unwrap(), expected);
}

#[test]
fn run_matches_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--strategy", "baseline,avg_pool", "--scheme", "kfold", "--k", "4"];
    args.extend(&SMALL[..8]);
    let table = ok(dir.path(), &args);
    assert!(table.starts_with("Strategy"));

    let config = PipelineConfig::new(
        DataSource::Synthetic(small()),
        vec![Strategy::Baseline, Strategy::AvgPool],
        CvScheme::Kfold { k: 4, seed: 5 },
        dir.path(),
    );
    let (scores, report) = pipeline::compute(&config).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("report.json")).unwrap(), report.to_json().unwrap());
    let mut csv = Vec::new();
    scoring::write_scores_csv(&scores, &mut csv).unwrap();
    assert_eq!(fs::read(dir.path().join("scores.csv")).unwrap(), csv);
    for name in ["report.txt", "tippett_baseline.svg", "tippett_avg_pool.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn score_calibrate_apply_chain_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let input = input.to_str().unwrap();
    ok(dir.path(), &["score", "--input", input, "--strategy", "max_score", "--pairs", "per_subject_all"]);
    ok(dir.path(), &["calibrate", "--scores", dir.path().join("scores.csv").to_str().unwrap(), "--lambda", "2"]);
    ok(
        dir.path(),
        &[
            "apply-lr",
            "--calibrator",
            dir.path().join("calibrator.json").to_str().unwrap(),
            "--scores",
            dir.path().join("scores.csv").to_str().unwrap(),
        ],
    );

    let (store, _) = store::ingest(Path::new(input), IngestOptions::default()).unwrap();
    let pairs = store::enumerate_pairs(&store, Grouping::PerSubjectAll).unwrap();
    let scored = scoring::score_pairs(&pairs, Strategy::MaxScore, &store, ScoreOptions::default()).unwrap();
    let from_csv = scoring::read_scores_csv(fs::File::open(dir.path().join("scores.csv")).unwrap()).unwrap();
    assert_eq!(from_csv, scored);

    let samples: Vec<_> = scored.iter().map(|p| (p.score, p.ground_truth)).collect();
    let expected = calibration::fit(&samples, 2.0).unwrap();
    let written: Calibrator =
        serde_json::from_str(&fs::read_to_string(dir.path().join("calibrator.json")).unwrap()).unwrap();
    assert_eq!(written, expected);

    let lrs = fs::read_to_string(dir.path().join("lrs.csv")).unwrap();
    let mut lines = lrs.lines();
    assert_eq!(lines.next(), Some("reference_id,trace_group,strategy,score,ground_truth,log10_lr"));
    for (line, p) in lines.zip(&scored) {
        let last: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(last, expected.apply(p.score).unwrap().log10_lr);
    }
}

#[test]
fn evaluate_and_tippett() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    ok(
        dir.path(),
        &["score", "--input", input.to_str().unwrap(), "--strategy", "avg_score", "--strategy", "cs_pool"],
    );
    let scores = dir.path().join("scores.csv");
    let table = ok(dir.path(), &["evaluate", "--scores", scores.to_str().unwrap(), "--scheme", "ltio"]);
    assert!(table.contains("AvgScore") && table.contains("CSPool"));

    let scored = scoring::read_scores_csv(fs::File::open(&scores).unwrap()).unwrap();
    let expected = pipeline::evaluate_scores(&scored, CvScheme::Ltio, 1.0).unwrap();
    let report: facelr::report::ReportFile =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.evaluations, expected);

    let report_path = dir.path().join("report.json");
    let out = facelr(dir.path(), &["tippett", "--report", report_path.to_str().unwrap()]);
    assert!(!out.status.success(), "two strategies need --strategy");
    ok(
        dir.path(),
        &["tippett", "--report", report_path.to_str().unwrap(), "--strategy", "cs_pool", "--points", "50"],
    );
    let svg = fs::read_to_string(dir.path().join("tippett.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    let csv = fs::read_to_string(dir.path().join("tippett.csv")).unwrap();
    assert!(csv.lines().count() >= 51);
}

#[test]
fn stats_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let text = ok(dir.path(), &["stats", "--input", input.to_str().unwrap(), "--out", "stats.csv"]);
    assert_eq!(text, "traces,identities\n4,12\n");
    assert_eq!(fs::read_to_string(dir.path().join("stats.csv")).unwrap(), text);
}

#[test]
fn protocol_commands() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path());
    let input = input.to_str().unwrap();
    let out = ok(dir.path(), &["encounters", "--input", input, "--threshold", "120"]);
    assert_eq!(out.trim(), "12 encounters");
    let encounters: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("encounters.json")).unwrap()).unwrap();
    assert_eq!(encounters[0]["images"].as_array().unwrap().len(), 4);

    let refs = ok(dir.path(), &["select-refs", "--input", input]);
    assert_eq!(refs.lines().count(), 12);
    assert!(dir.path().join("references.jsonl").exists());

    ok(dir.path(), &["clean", "--input", input, "--edge-threshold", "0.5", "--min-component", "2"]);
    let report: facelr::protocols::CleaningReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cleaning.json")).unwrap()).unwrap();
    assert_eq!(report.min_component, 2);

    let removed = ok(dir.path(), &["dedupe", "--input", input]);
    assert!(removed.is_empty());
    assert_eq!(
        fs::read(dir.path().join("deduped.jsonl")).unwrap(),
        fs::read(input).unwrap()
    );

    let summary = ok(dir.path(), &["ingest", "--input", input, "--dim", "16"]);
    assert!(summary.starts_with("accepted 60 embeddings"));
    let agg = ok(dir.path(), &["aggregate", "--input", input, "--strategy", "serfiq"]);
    assert!(agg.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join("aggregated.jsonl")).unwrap().lines().count(), 12);
}

#[test]
fn empty_strategy_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(facelr(dir.path(), &["run"]).status.code(), Some(2));
    assert_eq!(facelr(dir.path(), &["run", "--strategy", ""]).status.code(), Some(2));
}

#[test]
fn stage_errors_exit_nonzero_with_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = facelr(dir.path(), &["run", "--input", "/nonexistent.jsonl", "--strategy", "baseline"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest stage failed"));
    let out = facelr(dir.path(), &["ingest", "--input", "/nonexistent.jsonl"]);
    assert!(!out.status.success());
}
