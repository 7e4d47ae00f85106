use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facelr::calibration::{self, Calibrator};
use facelr::evaluation;
use facelr::pipeline::{self, DataSource, PipelineConfig, SetGrouping};
use facelr::protocols;
use facelr::report::{self, ReportFile};
use facelr::scoring::{self, ScoreOptions, ScoredPair};
use facelr::store::{self, EmbeddingStore, Grouping, IngestOptions, TraceSet};
use facelr::{aggregation, synthetic, Strategy, SyntheticConfig};
use serde_json::json;

use crate::{Cli, Command, EncounterArgs, Pairs, RunGrouping, SynthArgs};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let out = |p: &Path| cli.out_dir.join(p);
    match &cli.command {
        Command::Ingest {
            input,
            dim,
            skip_invalid,
            out: target,
        } => {
            let options = IngestOptions {
                expected_dim: *dim,
                skip_invalid: *skip_invalid,
            };
            let (store, summary) = store::ingest(input, options).context("ingest stage failed")?;
            for rejected in &summary.rejected {
                eprintln!("skipped: {rejected}");
            }
            println!(
                "accepted {} embeddings of dimension {} from {} subjects; rejected {}",
                summary.accepted,
                store.dim(),
                store.subjects().len(),
                summary.rejected.len()
            );
            if let Some(target) = target {
                write_store(&store, &out(target))?;
            }
        }
        Command::Synth { dim, synth, out: target } => {
            let store = synthetic::generate(&synth_config(*dim, synth, cli.seed)).context("synthetic generation failed")?;
            write_store(&store, &out(target))?;
            println!("wrote {} embeddings to {}", store.len(), out(target).display());
        }
        Command::Encounters {
            input,
            encounter,
            out: target,
        } => {
            let store = load(input)?;
            let encounters = protocols::group_encounters(&store, encounter.threshold, encounter.untimed_single_group)
                .context("protocols stage failed")?;
            let rows: Vec<_> = encounters
                .iter()
                .map(|e| {
                    json!({
                        "subject": e.subject_id,
                        "index": e.index,
                        "start": e.start_time.map(store::format_time),
                        "end": e.end_time.map(store::format_time),
                        "images": e.members.iter().map(|&m| &store.embeddings()[m].image_id).collect::<Vec<_>>(),
                    })
                })
                .collect();
            write_json(&out(target), &rows)?;
            println!("{} encounters", encounters.len());
        }
        Command::SelectRefs { input, out: target } => {
            let store = load(input)?;
            let (relabelled, chosen) = protocols::assign_references(&store).context("protocols stage failed")?;
            for &i in &chosen {
                let e = &store.embeddings()[i];
                println!("{}\t{}", e.subject_id, e.image_id);
            }
            write_store(&relabelled, &out(target))?;
        }
        Command::Clean {
            input,
            edge_threshold,
            min_component,
            report,
            out: target,
        } => {
            let store = load(input)?;
            let (cleaning, cleaned) = protocols::clean_identities(&store, *edge_threshold, *min_component)
                .context("protocols stage failed")?;
            write_json(&out(report), &cleaning)?;
            write_store(&cleaned, &out(target))?;
            println!(
                "{} components, {} reassigned, {} discarded",
                cleaning.components,
                cleaning.reassigned.len(),
                cleaning.discarded.len()
            );
        }
        Command::Dedupe { input, out: target } => {
            let store = load(input)?;
            let (removed, deduped) = protocols::dedupe(&store).context("protocols stage failed")?;
            for id in &removed {
                println!("{id}");
            }
            write_store(&deduped, &out(target))?;
        }
        Command::Aggregate {
            input,
            strategy,
            pairs,
            encounter,
            fallback_uniform,
            out: target,
        } => {
            let store = load(input)?;
            let sets = trace_sets(&store, *pairs, encounter)?;
            let mut file = create(&out(target))?;
            for set in &sets {
                let pooled = aggregation::weights_for(set, *strategy, &store, *fallback_uniform)
                    .and_then(|w| aggregation::aggregate(set, &w, &store))
                    .with_context(|| format!("aggregation failed for {}", set.qualified_label()))?;
                let row = json!({
                    "subject": pooled.subject_id,
                    "group": pooled.group_label,
                    "scheme": pooled.scheme.as_str(),
                    "vector": pooled.vector,
                });
                writeln!(file, "{row}")?;
            }
            file.flush()?;
        }
        Command::Score {
            input,
            strategies,
            pairs,
            encounter,
            fallback_uniform,
            out: target,
        } => {
            let store = load(input)?;
            let sets = trace_sets(&store, *pairs, encounter)?;
            let comparisons = store::enumerate_pairs(&store, Grouping::PerGroup(&sets)).context("scoring stage failed")?;
            let options = ScoreOptions {
                fallback_uniform: *fallback_uniform,
            };
            let mut scored = Vec::new();
            for &s in unique(&strategies.list)? {
                scored.extend(scoring::score_pairs(&comparisons, s, &store, options).context("scoring stage failed")?);
            }
            scoring::sort_scored(&mut scored);
            let file = create(&out(target))?;
            scoring::write_scores_csv(&scored, file).context("output stage failed")?;
            println!("{} scored pairs", scored.len());
        }
        Command::Calibrate {
            scores,
            strategy,
            out: target,
        } => {
            let scored = select_strategy(read_scores(scores)?, *strategy)?;
            let samples: Vec<_> = scored.iter().map(|p| (p.score, p.ground_truth)).collect();
            let calibrator = calibration::fit(&samples, cli.lambda).context("calibration stage failed")?;
            write_json(&out(target), &calibrator)?;
            println!(
                "slope {} intercept {} prior_log_odds {}",
                calibrator.slope, calibrator.intercept, calibrator.prior_log_odds
            );
        }
        Command::ApplyLr {
            calibrator,
            scores,
            out: target,
        } => {
            let text = fs::read_to_string(calibrator).with_context(|| format!("reading {}", calibrator.display()))?;
            let calibrator: Calibrator = serde_json::from_str(&text).context("invalid calibrator file")?;
            let scored = read_scores(scores)?;
            let mut writer = csv::Writer::from_writer(create(&out(target))?);
            writer.write_record(["reference_id", "trace_group", "strategy", "score", "ground_truth", "log10_lr"])?;
            for p in &scored {
                let lr = calibrator.apply(p.score).context("calibration stage failed")?;
                writer.write_record([
                    p.reference_id.as_str(),
                    p.trace_group.as_str(),
                    p.strategy.as_str(),
                    &p.score.to_string(),
                    p.ground_truth.as_str(),
                    &lr.log10_lr.to_string(),
                ])?;
            }
            writer.flush()?;
        }
        Command::Evaluate { scores, cv, out: target } => {
            let scored = read_scores(scores)?;
            let scheme = cv.scheme(cli.seed);
            let evaluations =
                pipeline::evaluate_scores(&scored, scheme, cli.lambda).context("evaluation stage failed")?;
            let label = stem(scores);
            let config = json!({ "scores": scores, "cv": scheme, "lambda": cli.lambda });
            let report = ReportFile::new(config, &label, evaluations);
            write_text(&out(target), &report.to_json()?)?;
            print!("{}", report.render_table());
        }
        Command::Tippett {
            report,
            strategy,
            points,
            svg,
            csv,
        } => {
            let text = fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
            let report: ReportFile = serde_json::from_str(&text).context("invalid report file")?;
            let e = match strategy {
                Some(s) => report
                    .evaluation(*s)
                    .with_context(|| format!("report has no evaluation for {s}"))?,
                None => match report.evaluations.as_slice() {
                    [only] => only,
                    _ => bail!("report holds several strategies; pick one with --strategy"),
                },
            };
            let curves = evaluation::tippett(&e.lrs_same, &e.lrs_different, *points).context("evaluation stage failed")?;
            let mut buf = Vec::new();
            report::write_tippett_csv(&curves, &mut buf)?;
            write_bytes(&out(csv), &buf)?;
            let label = report.table.first().map_or("", |r| r.dataset.as_str());
            let title = format!("{} ({label})", e.strategy.display_name());
            write_text(&out(svg), &report::tippett_svg(&curves, &title))?;
        }
        Command::Stats { input, out: target } => {
            let store = load(input)?;
            let bins = pipeline::stats(&store).context("protocols stage failed")?;
            let text = pipeline::render_stats(&bins);
            print!("{text}");
            if let Some(target) = target {
                write_text(&out(target), &text)?;
            }
        }
        Command::Run {
            input,
            dim,
            synth,
            strategies,
            cv,
            grouping,
            encounter,
            fallback_uniform,
            tippett_points,
            label,
        } => {
            let source = match input {
                Some(path) => DataSource::Jsonl {
                    path: path.clone(),
                    expected_dim: *dim,
                },
                None => DataSource::Synthetic(synth_config(
                    dim.unwrap_or(SyntheticConfig::default().dim),
                    synth,
                    cli.seed,
                )),
            };
            let mut config = PipelineConfig::new(source, strategies.list.clone(), cv.scheme(cli.seed), &cli.out_dir);
            config.lambda = cli.lambda;
            config.fallback_uniform = *fallback_uniform;
            config.tippett_points = *tippett_points;
            if let Some(label) = label {
                config.dataset_label = label.clone();
            }
            if *grouping == RunGrouping::Encounters {
                config.grouping = SetGrouping::Encounters {
                    threshold_seconds: encounter.threshold,
                    untimed_single_group: encounter.untimed_single_group,
                };
            }
            let outcome = pipeline::run_pipeline(&config)?;
            print!("{}", outcome.report.render_table());
            for path in &outcome.written {
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn synth_config(dim: usize, args: &SynthArgs, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        dim,
        n_identities: args.ids,
        traces_per_identity: args.traces,
        noise_at_q0: args.noise_far,
        noise_at_q1: args.noise_near,
        seed,
    }
}

fn load(path: &Path) -> Result<EmbeddingStore> {
    let (store, _) = store::ingest(path, IngestOptions::default()).context("ingest stage failed")?;
    Ok(store)
}

fn trace_sets(store: &EmbeddingStore, pairs: Pairs, encounter: &EncounterArgs) -> Result<Vec<TraceSet>> {
    let sets = match pairs {
        Pairs::PerImage => store::trace_sets(store, Grouping::PerImage)?,
        Pairs::PerSubjectAll => store::trace_sets(store, Grouping::PerSubjectAll)?,
        Pairs::PerGroup => {
            let grouping = SetGrouping::Encounters {
                threshold_seconds: encounter.threshold,
                untimed_single_group: encounter.untimed_single_group,
            };
            return Ok(pipeline::grouped_sets(store, grouping)?);
        }
    };
    Ok(sets)
}

fn unique(strategies: &[Strategy]) -> Result<&[Strategy]> {
    let mut seen = BTreeSet::new();
    for s in strategies {
        if !seen.insert(s) {
            bail!("strategy {s} is listed twice");
        }
    }
    Ok(strategies)
}

fn read_scores(path: &Path) -> Result<Vec<ScoredPair>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    scoring::read_scores_csv(file).with_context(|| format!("reading {}", path.display()))
}

fn select_strategy(scored: Vec<ScoredPair>, strategy: Option<Strategy>) -> Result<Vec<ScoredPair>> {
    let present: BTreeSet<Strategy> = scored.iter().map(|p| p.strategy).collect();
    let chosen = match (strategy, present.len()) {
        (Some(s), _) => s,
        (None, 1) => *present.first().expect("one strategy"),
        (None, 0) => bail!("score file is empty"),
        (None, _) => bail!("score file holds several strategies; pick one with --strategy"),
    };
    let subset: Vec<ScoredPair> = scored.into_iter().filter(|p| p.strategy == chosen).collect();
    if subset.is_empty() {
        bail!("score file has no {chosen} rows");
    }
    Ok(subset)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "dataset".to_owned(), |s| s.to_string_lossy().into_owned())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    let file = File::create(path).with_context(|| format!("output stage failed: {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("output stage failed: {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_store(store: &EmbeddingStore, path: &PathBuf) -> Result<()> {
    let mut file = create(path)?;
    store.write_jsonl(&mut file).context("output stage failed")?;
    file.flush()?;
    Ok(())
}
