use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ade_core::corpus::{generate_synthetic_corpus, load_corpus, make_splits, write_records, Corpus, SplitSpec};
use ade_core::evalx::{MatchCriterion, OutcomeCategory};
use ade_core::pipeline::{
    evaluate_end_to_end, load_bundle, run_sentence, save_bundle, train_pipeline, EvalOptions, PipelineError,
    RunReport, TrainedBundle,
};
use thiserror::Error;

use crate::{config, DataArgs, EvalArgs, IngestArgs, PredictArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_invariant_breach() {
            CliError::Invariant(e.to_string())
        } else if matches!(e, PipelineError::Config(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Loads or generates the corpus and names its source for reports.
fn load_data(data: &DataArgs, seed: u64) -> Result<(Corpus, String), CliError> {
    match (&data.pos, &data.neg, data.synthetic) {
        (Some(pos), Some(neg), None) => {
            let corpus = load_corpus(pos, neg).map_err(|e| CliError::Data(e.to_string()))?;
            Ok((corpus, format!("files:{},{}", pos.display(), neg.display())))
        }
        (None, None, Some(c)) => Ok((
            generate_synthetic_corpus(c.pos, c.neg, seed),
            format!("synthetic:{},{}@{}", c.pos, c.neg, seed),
        )),
        _ => Err(CliError::Usage("give either --pos and --neg, or --synthetic N,M".into())),
    }
}

pub fn ingest(args: &IngestArgs) -> Result<(), CliError> {
    let (corpus, _) = load_data(&args.data, args.seed)?;
    println!("{}", corpus.stats.summary_line());
    println!(
        "unresolved_pairs={} label_conflicts={}",
        corpus.stats.unresolved_pairs, corpus.stats.label_conflicts
    );
    if let Some(dir) = &args.split_dir {
        let f = args.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Usage(format!("--test-fraction must lie strictly between 0 and 1, got {f}")));
        }
        // per-class rounding keeps the class ratio in both halves
        let (pos, neg) = (corpus.stats.pos, corpus.stats.neg);
        let test_pos = (pos as f64 * f).round() as usize;
        let test_neg = (neg as f64 * f).round() as usize;
        let spec = SplitSpec::Counts {
            train_pos: pos - test_pos,
            train_neg: neg - test_neg,
            test_pos,
            test_neg,
        };
        let split = make_splits(&corpus.sentences, spec, args.seed).map_err(|e| CliError::Data(e.to_string()))?;
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        for (name, part) in [("train", &split.train), ("test", &split.test)] {
            let (pos, neg) = write_records(part);
            write_file(&dir.join(format!("{name}.pos")), &pos)?;
            write_file(&dir.join(format!("{name}.neg")), &neg)?;
            let n_pos = part.iter().filter(|s| s.label.is_positive()).count();
            println!("{name}: pos={} neg={}", n_pos, part.len() - n_pos);
        }
    }
    Ok(())
}

fn loss_log(bundle: &TrainedBundle) -> String {
    let mut out = String::from("stage\tfold\tepoch\tloss\n");
    let s = &bundle.summary;
    let rel = s.relevance_cv.folds.iter().map(|f| ("relevance", f.fold, &f.loss_trace));
    let qa = s.qa_cv.folds.iter().map(|f| ("qa", f.fold, &f.loss_trace));
    for (stage, fold, trace) in rel.chain(qa) {
        for (epoch, loss) in trace.iter().enumerate() {
            let _ = writeln!(out, "{stage}\t{fold}\t{}\t{loss}", epoch + 1);
        }
    }
    out
}

fn first_last(trace: &[f64]) -> (f64, f64) {
    (trace.first().copied().unwrap_or(f64::NAN), trace.last().copied().unwrap_or(f64::NAN))
}

fn training_table(bundle: &TrainedBundle) -> String {
    let s = &bundle.summary;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "train: pos={} neg={} qa_pairs={} qa_skipped={} vocab={} lexicon={}",
        s.train_pos,
        s.train_neg,
        s.qa_examples,
        s.qa_skipped,
        bundle.vocabulary.len(),
        bundle.lexicon.len()
    );
    let _ = writeln!(
        out,
        "{:<10} {:>4} {:>6} {:>10} {:>10}  held-out",
        "stage", "fold", "train", "loss[1]", "loss[-1]"
    );
    for f in &s.relevance_cv.folds {
        let (a, b) = first_last(&f.loss_trace);
        let _ = writeln!(
            out,
            "{:<10} {:>4} {:>6} {:>10.6} {:>10.6}  p={:.4} r={:.4} f1={:.4}",
            "relevance", f.fold, f.train_size, a, b, f.scores.precision, f.scores.recall, f.scores.f1
        );
    }
    let m = &s.relevance_cv.mean;
    let _ = writeln!(
        out,
        "{:<10} {:>4} {:>6} {:>10} {:>10}  p={:.4} r={:.4} f1={:.4}",
        "relevance", "mean", "", "", "", m.precision, m.recall, m.f1
    );
    for f in &s.qa_cv.folds {
        let (a, b) = first_last(&f.loss_trace);
        let _ = writeln!(
            out,
            "{:<10} {:>4} {:>6} {:>10.6} {:>10.6}  recall={:.4} ({}/{})",
            "qa", f.fold, f.train_size, a, b, f.recall, f.exact_hits, f.held_out
        );
    }
    let _ = writeln!(
        out,
        "{:<10} {:>4} {:>6} {:>10} {:>10}  recall={:.4}",
        "qa", "mean", "", "", "", s.qa_cv.mean_recall
    );
    out
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let config = config::resolve(args.preset, args.config.as_deref(), &args.flags)?;
    let (corpus, source) = load_data(&args.data, config.seed)?;
    log::info!("training on {source}: {}", corpus.stats.summary_line());
    let bundle = train_pipeline(&corpus.sentences, &config, args.jobs)?;
    save_bundle(&bundle, &args.out)?;
    let log_path = args.loss_log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".losses.tsv");
        PathBuf::from(p)
    });
    write_file(&log_path, &loss_log(&bundle))?;
    log::info!("wrote {} and {}", args.out.display(), log_path.display());
    print!("{}", training_table(&bundle));
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Outcome matrix and one P/R/F1 row per reported criterion.
pub fn score_table(report: &RunReport) -> String {
    let criteria = report.config.match_selection.criteria();
    let mut out = String::new();
    let _ = write!(out, "{:<17}", "category");
    for c in criteria {
        let _ = write!(out, " {:>8}", criterion_name(*c));
    }
    out.push('\n');
    for cat in OutcomeCategory::ALL {
        let _ = write!(out, "{:<17}", cat.notation());
        for c in criteria {
            let n = report.cascade_tally.get(*c).map_or(0, |t| t.get(cat));
            let _ = write!(out, " {n:>8}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "{:<9} {:>9} {:>7} {:>7}", "criterion", "precision", "recall", "f1");
    for c in criteria {
        if let Some(s) = report.end_to_end.get(*c) {
            let _ = writeln!(
                out,
                "{:<9} {:>9} {:>7} {:>7}",
                criterion_name(*c),
                pct(s.precision),
                pct(s.recall),
                pct(s.f1)
            );
        }
    }
    out
}

fn criterion_name(c: MatchCriterion) -> &'static str {
    match c {
        MatchCriterion::Exact => "exact",
        MatchCriterion::Overlap => "overlap",
    }
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&args.bundle)?;
    let (corpus, source) = load_data(&args.data, args.seed)?;
    let mut options = EvalOptions::from_config(&bundle.config, source);
    if let Some(m) = args.match_selection {
        options.match_selection = m.into();
    }
    if let Some(r) = args.multi_pair {
        options.multi_pair = r.into();
    }
    options.keep_traces = args.traces;
    let report = evaluate_end_to_end(&bundle, &corpus.sentences, &options, args.jobs)?;
    if let Some(path) = &args.report {
        write_file(path, &report.to_json())?;
    }
    println!(
        "test: pos={} neg={} ({})",
        report.config.test_pos, report.config.test_neg, report.config.test_source
    );
    print!("{}", score_table(&report));
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    if args.text.trim().is_empty() {
        return Err(CliError::Usage("--text must not be empty".into()));
    }
    let bundle = load_bundle(&args.bundle)?;
    let trace = run_sentence(&bundle, "cli", &args.text);
    trace.check()?;
    if let Some(stage) = trace.eliminated_at {
        println!("eliminated at {stage}");
        return Ok(());
    }
    for a in &trace.answers {
        match &a.answer {
            Some(ans) => println!("{}\t{}\t{}\t{:.6}", a.drug, ans.text, ans.char_span, ans.score),
            None => println!("{}\t-\t-\t-", a.drug),
        }
    }
    Ok(())
}
