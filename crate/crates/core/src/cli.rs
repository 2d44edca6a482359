//! Command-line driver: corpus generation, flat-start training, alignment,
//! state tying, evaluation and run comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use crate::config::FlatConfig;
use crate::corpus::{frame_accuracy, generate_synthetic, load_corpus, save_corpus, Corpus, PhoneOptions, SyntheticSpec};
use crate::dnn::{load_model, save_model, Network};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::flatstart::{
    corpus_log_posteriors, log_to_csv, realign, run_strategy, FlatstartConfig, SkipReport, Strategy,
};
use crate::hmm::alignment::{read_alignments, write_alignments};
use crate::hmm::{build_denominator_graph, decoded_phones, phone_spans, viterbi_path, Alignments, GraphStage, PhoneSet};
use crate::statetying::{
    accumulate_stats, build_tie_tree, cd_alignments, cd_alignments_to_text, default_questions, load_questions,
    questions_to_text, tied_state_map_text, Centroid, CostOptions, KlDirection, TieOptions, DEFAULT_MIN_GAIN,
};

pub const MODEL_FILE: &str = "model.fsam";
pub const ALIGNMENTS_FILE: &str = "alignments.ali";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.txt";
/// Wall-clock timing lives apart from the report so that every other
/// output of a run is reproducible byte for byte.
pub const TIMING_FILE: &str = "timing.txt";
pub const SKIPPED_FILE: &str = "skipped.txt";
pub const TIE_SUMMARY_FILE: &str = "tie_summary.csv";

#[derive(Debug, Parser)]
#[command(name = "flatstart", version, about = "GMM-free flat-start training for HMM/DNN acoustic models")]
pub struct Cli {
    /// Worker threads for per-utterance work (1 = sequential reference mode).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with ground-truth alignments.
    Gen(GenArgs),
    /// Train a network from transcripts only.
    Flatstart(FlatstartArgs),
    /// Viterbi-align a corpus with a trained model.
    Align(AlignArgs),
    /// Grow KL-divergence tying trees for one or more tied-state counts.
    Tie(TieArgs),
    /// Frame accuracy and phone error rate of alignments.
    Eval(EvalArgs),
    /// Compare finished runs side by side.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Synthetic spec (`key = value`); defaults are used for missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlatstartArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `strategy` key: iterative_ce, mmi or mmi_then_ce.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for model, alignments, training log and report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Only the phone-set keys are read from it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `bootstrap` or `refined` numerator graphs.
    #[arg(long, default_value = "refined")]
    pub stage: GraphStage,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TieArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub alignments: PathBuf,
    /// Question file; a generic set is derived from the phone set if omitted.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Comma-separated tied-state counts.
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_MIN_GAIN)]
    pub min_gain: f64,
    #[arg(long, default_value = "arithmetic")]
    pub centroid: Centroid,
    #[arg(long, default_value = "member_to_centroid")]
    pub kl_direction: KlDirection,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub alignments: PathBuf,
    /// Reference alignments; the corpus ground truth if omitted.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Model for free phone-loop decoding, needed for the phone error rate.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the metrics here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of `flatstart` runs.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a command leaves behind, beyond its files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandOutcome {
    /// Utterances that failed and were left out.
    pub skipped: SkipReport,
    /// Text meant for stdout.
    pub message: String,
}

pub fn run(cli: &Cli) -> Result<CommandOutcome> {
    let exec = Executor::with_workers(cli.workers);
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Flatstart(a) => cmd_flatstart(a, &exec).map(|(_, o)| o),
        Command::Align(a) => cmd_align(a, &exec),
        Command::Tie(a) => cmd_tie(a, &exec),
        Command::Eval(a) => cmd_eval(a, &exec).map(|(_, o)| o),
        Command::Report(a) => cmd_report(a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<FlatConfig> {
    path.map_or_else(|| Ok(FlatConfig::default()), FlatConfig::load)
}

/// Phone-set options from a flat-start config (other keys are validated
/// but otherwise unused).
fn phone_options(path: Option<&Path>) -> Result<PhoneOptions> {
    Ok(FlatstartConfig::from_config(load_config(path)?)?.phones)
}

fn skipped_to_text(skipped: &SkipReport) -> String {
    skipped.iter().map(|(id, why)| format!("{id}\t{why}\n")).collect()
}

pub fn cmd_gen(args: &GenArgs) -> Result<CommandOutcome> {
    let mut spec = SyntheticSpec::from_config(load_config(args.spec.as_deref())?)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let synth = generate_synthetic(&spec)?;
    save_corpus(&args.out, &synth.corpus)?;
    Ok(CommandOutcome {
        message: format!(
            "wrote {} utterances ({} frames) to {}\n",
            synth.corpus.utterances.len(),
            synth.corpus.total_frames(),
            args.out.display()
        ),
        ..CommandOutcome::default()
    })
}

/// Summary of one flat-start run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub strategy: Strategy,
    pub epochs: usize,
    pub epochs_to_target: Option<usize>,
    pub frame_accuracy: Option<f64>,
    pub phone_error_rate: Option<f64>,
    pub tied_states: Option<usize>,
    pub skipped: usize,
    pub log_csv: String,
    pub wall_time: Duration,
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_else(|| "-".into())
}

impl RunReport {
    /// `key = value` lines; wall time is left out (see [`TIMING_FILE`]).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy = {}", self.strategy);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "epochs_to_target = {}", opt_text(&self.epochs_to_target));
        let _ = writeln!(out, "frame_accuracy = {}", opt_text(&self.frame_accuracy.map(|a| format!("{a:.6}"))));
        let _ = writeln!(out, "phone_error_rate = {}", opt_text(&self.phone_error_rate.map(|a| format!("{a:.6}"))));
        let _ = writeln!(out, "tied_states = {}", opt_text(&self.tied_states));
        let _ = writeln!(out, "skipped = {}", self.skipped);
        out
    }

    /// Reads back a run directory written by `flatstart`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut cfg = FlatConfig::load(&dir.join(REPORT_FILE))?;
        let mut strategy = Strategy::Mmi;
        cfg.take("strategy", &mut strategy)?;
        let mut epochs = 0usize;
        cfg.take("epochs", &mut epochs)?;
        let mut opt = |key: &str| -> Result<Option<String>> {
            Ok(cfg.take_opt::<String>(key)?.filter(|v| v != "-"))
        };
        let parse_f = |v: Option<String>| v.and_then(|s| s.parse::<f64>().ok());
        let parse_u = |v: Option<String>| v.and_then(|s| s.parse::<usize>().ok());
        let epochs_to_target = parse_u(opt("epochs_to_target")?);
        let frame_accuracy = parse_f(opt("frame_accuracy")?);
        let phone_error_rate = parse_f(opt("phone_error_rate")?);
        let tied_states = parse_u(opt("tied_states")?);
        let skipped = parse_u(opt("skipped")?).unwrap_or(0);
        cfg.finish()?;
        let log_path = dir.join(LOG_FILE);
        let log_csv = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let wall_time = std::fs::read_to_string(dir.join(TIMING_FILE))
            .ok()
            .and_then(|t| t.trim().strip_prefix("wall_time_s = ").and_then(|s| s.parse::<f64>().ok()))
            .map(Duration::from_secs_f64)
            .unwrap_or_default();
        let tied_states = tied_states.or_else(|| largest_tie_count(dir));
        Ok(RunReport {
            strategy,
            epochs,
            epochs_to_target,
            frame_accuracy,
            phone_error_rate,
            tied_states,
            skipped,
            log_csv,
            wall_time,
        })
    }
}

fn largest_tie_count(dir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(dir.join(TIE_SUMMARY_FILE)).ok()?;
    text.lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<usize>().ok())
        .max()
}

/// Phone sequence for scoring: short pauses count as silence and runs of
/// silence collapse to one.
pub fn scoring_phones(seq: impl IntoIterator<Item = usize>, phones: &PhoneSet) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for p in seq {
        let p = if Some(p) == phones.short_pause() { phones.silence() } else { p };
        if p == phones.silence() && out.last() == Some(&p) {
            continue;
        }
        out.push(p);
    }
    out
}

/// Edit distance between phone sequences.
pub fn phone_edit_distance(hyp: &[usize], reference: &[usize]) -> usize {
    strsim::generic_levenshtein(&hyp.to_vec(), &reference.to_vec())
}

/// Edits over reference length for one pair. An empty reference scores
/// 0 against an empty hypothesis and 1 per inserted phone otherwise.
pub fn phone_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    let d = phone_edit_distance(hyp, reference) as f64;
    d / reference.len().max(1) as f64
}

/// Free phone-loop decodes of every utterance, scored against reference
/// phone sequences: total edits over total reference length.
pub fn corpus_phone_error_rate(
    exec: &Executor,
    net: &Network,
    corpus: &Corpus,
    reference: &Alignments,
) -> Result<Option<f64>> {
    let den = build_denominator_graph(&corpus.phones)?;
    let logpost = corpus_log_posteriors(exec, net, corpus)?;
    let decodes = exec.map_indexed(corpus.utterances.len(), |i| -> Result<Vec<usize>> {
        let path = viterbi_path(&den, logpost[i].view())?;
        Ok(decoded_phones(&den, &path.nodes))
    });
    let (mut edits, mut length) = (0usize, 0usize);
    for (u, dec) in corpus.utterances.iter().zip(decodes) {
        let Some(r) = reference.get(&u.id) else { continue };
        let ref_phones = scoring_phones(phone_spans(&r.frame_states(), &corpus.phones).iter().map(|s| s.phone), &corpus.phones);
        let hyp = scoring_phones(dec?, &corpus.phones);
        edits += phone_edit_distance(&hyp, &ref_phones);
        length += ref_phones.len();
    }
    Ok((length > 0).then(|| edits as f64 / length as f64))
}

pub fn cmd_flatstart(args: &FlatstartArgs, exec: &Executor) -> Result<(RunReport, CommandOutcome)> {
    let start = Instant::now();
    let mut cfg = FlatstartConfig::from_config(load_config(args.config.as_deref())?)?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let corpus = load_corpus(&args.corpus, &cfg.phones)?;
    create_dir(&args.out)?;

    let outcome = run_strategy(&corpus, &cfg, exec)?;
    let per = match corpus.ground_truth() {
        Some(gt) => corpus_phone_error_rate(exec, &outcome.network, &corpus, &gt)?,
        None => None,
    };
    let log_csv = log_to_csv(&outcome.log);
    save_model(&args.out.join(MODEL_FILE), &outcome.network)?;
    write_alignments(&args.out.join(ALIGNMENTS_FILE), &outcome.alignments, &corpus.phones)?;
    write_file(&args.out.join(LOG_FILE), &log_csv)?;
    write_file(&args.out.join(SKIPPED_FILE), &skipped_to_text(&outcome.skipped))?;
    let report = RunReport {
        strategy: outcome.strategy,
        epochs: outcome.total_epochs,
        epochs_to_target: outcome.epochs_to_target,
        frame_accuracy: outcome.final_accuracy,
        phone_error_rate: per,
        tied_states: None,
        skipped: outcome.skipped.len(),
        log_csv,
        wall_time: start.elapsed(),
    };
    write_file(&args.out.join(REPORT_FILE), &report.to_text())?;
    write_file(
        &args.out.join(TIMING_FILE),
        &format!("wall_time_s = {:.3}\n", report.wall_time.as_secs_f64()),
    )?;
    let message = format!("{}wall_time_s = {:.3}\n", report.to_text(), report.wall_time.as_secs_f64());
    Ok((
        report,
        CommandOutcome {
            skipped: outcome.skipped,
            message,
        },
    ))
}

pub fn cmd_align(args: &AlignArgs, exec: &Executor) -> Result<CommandOutcome> {
    let corpus = load_corpus(&args.corpus, &phone_options(args.config.as_deref())?)?;
    let net = load_model(&args.model)?;
    let (alignments, skipped) = realign(exec, &net, &corpus, args.stage)?;
    write_alignments(&args.out, &alignments, &corpus.phones)?;
    let mut message = format!("aligned {} utterances\n", alignments.len());
    if let Some(gt) = corpus.ground_truth() {
        if let Some(acc) = frame_accuracy(&alignments, &gt, &corpus.phones) {
            let _ = writeln!(message, "frame_accuracy = {acc:.6}");
        }
    }
    Ok(CommandOutcome { skipped, message })
}

/// One row of the tying summary.
#[derive(Debug, Clone, PartialEq)]
pub struct TieResult {
    pub target: usize,
    pub leaves: usize,
    pub total_cost: f64,
    pub warning: Option<String>,
}

pub fn tie_file_names(target: usize) -> (String, String, String) {
    (
        format!("tree_{target}.txt"),
        format!("tiedstates_{target}.txt"),
        format!("cd_{target}.ali"),
    )
}

pub fn cmd_tie(args: &TieArgs, exec: &Executor) -> Result<CommandOutcome> {
    if !(args.min_gain > 0.0) {
        return Err(Error::Config(format!("--min-gain must be positive, got {}", args.min_gain)));
    }
    let corpus = load_corpus(&args.corpus, &phone_options(args.config.as_deref())?)?;
    let phones = &corpus.phones;
    let questions = match &args.questions {
        Some(p) => load_questions(p, phones)?,
        None => default_questions(phones),
    };
    let roots: usize = phones.modeled_phones().map(|p| phones.hmm_len(p)).sum();
    if let Some(&t) = args.targets.iter().find(|&&t| t < roots) {
        return Err(Error::Config(format!(
            "{t} tied states requested, but there are {roots} (phone, state) roots"
        )));
    }
    let net = load_model(&args.model)?;
    let alignments = read_alignments(&args.alignments, phones)?;
    let stats = accumulate_stats(exec, &net, &corpus, &alignments)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("questions_used.txt"), &questions_to_text(&questions, phones))?;

    let mut summary = String::from("target,leaves,total_cost,warning\n");
    let mut message = String::new();
    for &target in &args.targets {
        let opts = TieOptions {
            target_leaves: target,
            min_gain: args.min_gain,
            cost: CostOptions {
                centroid: args.centroid,
                direction: args.kl_direction,
            },
        };
        let build = build_tie_tree(&stats, &questions, phones, &opts)?;
        let (tree_name, map_name, cd_name) = tie_file_names(target);
        build.tree.save(&args.out.join(tree_name), phones)?;
        write_file(&args.out.join(map_name), &tied_state_map_text(&build.tree, &stats, phones)?)?;
        let cd = cd_alignments(&build.tree, &alignments, phones)?;
        write_file(&args.out.join(cd_name), &cd_alignments_to_text(&cd))?;
        let cost = *build.cost_history.last().expect("history has the initial cost");
        if let Some(w) = &build.warning {
            log::warn!("target {target}: {w}");
        }
        let _ = writeln!(
            summary,
            "{target},{},{cost:.9},{}",
            build.tree.num_leaves(),
            build.warning.as_deref().unwrap_or("")
        );
        let _ = writeln!(message, "target {target}: {} leaves, total cost {cost:.6}", build.tree.num_leaves());
    }
    write_file(&args.out.join(TIE_SUMMARY_FILE), &summary)?;
    Ok(CommandOutcome {
        message,
        ..CommandOutcome::default()
    })
}

/// Frame accuracy and phone error rate of one alignment set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub utterances: usize,
    pub frame_accuracy: f64,
    pub phone_error_rate: Option<f64>,
}

impl EvalMetrics {
    pub fn to_text(&self) -> String {
        format!(
            "utterances = {}\nframe_accuracy = {:.6}\nphone_error_rate = {}\n",
            self.utterances,
            self.frame_accuracy,
            opt_text(&self.phone_error_rate.map(|p| format!("{p:.6}")))
        )
    }
}

/// Scores `hyp` against `reference`. Every hypothesis utterance must exist
/// in the reference with the same length.
pub fn evaluate_alignments(hyp: &Alignments, reference: &Alignments, phones: &PhoneSet) -> Result<f64> {
    if hyp.is_empty() {
        return Err(Error::Config("no alignments to evaluate".into()));
    }
    for (id, h) in hyp {
        let r = reference.get(id).ok_or_else(|| Error::Utterance {
            utt: id.clone(),
            msg: "not present in the reference".into(),
        })?;
        if r.num_frames() != h.num_frames() {
            return Err(Error::Utterance {
                utt: id.clone(),
                msg: format!("{} frames aligned, reference has {}", h.num_frames(), r.num_frames()),
            });
        }
    }
    let missing = reference.keys().filter(|id| !hyp.contains_key(*id)).count();
    if missing > 0 {
        log::warn!("{missing} reference utterances have no alignment");
    }
    Ok(frame_accuracy(hyp, reference, phones).expect("non-empty overlap"))
}

pub fn cmd_eval(args: &EvalArgs, exec: &Executor) -> Result<(EvalMetrics, CommandOutcome)> {
    let corpus = load_corpus(&args.corpus, &phone_options(args.config.as_deref())?)?;
    let hyp = read_alignments(&args.alignments, &corpus.phones)?;
    let reference = match &args.reference {
        Some(p) => read_alignments(p, &corpus.phones)?,
        None => corpus.ground_truth().ok_or_else(|| {
            Error::Config("corpus has no ground truth; pass --reference".into())
        })?,
    };
    let acc = evaluate_alignments(&hyp, &reference, &corpus.phones)?;
    let per = match &args.model {
        Some(m) => corpus_phone_error_rate(exec, &load_model(m)?, &corpus, &reference)?,
        None => None,
    };
    let metrics = EvalMetrics {
        utterances: hyp.len(),
        frame_accuracy: acc,
        phone_error_rate: per,
    };
    let text = metrics.to_text();
    if let Some(out) = &args.out {
        write_file(out, &text)?;
    }
    Ok((
        metrics,
        CommandOutcome {
            message: text,
            ..CommandOutcome::default()
        },
    ))
}

/// Comparison table of finished runs, one row per run.
pub fn report_table(runs: &[(String, RunReport)]) -> String {
    let mut out = String::from(
        "run,strategy,frame_accuracy,phone_error_rate,epochs,epochs_to_target,tied_states,wall_time_s\n",
    );
    for (name, r) in runs {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{:.1}",
            r.strategy,
            opt_text(&r.frame_accuracy.map(|a| format!("{a:.4}"))),
            opt_text(&r.phone_error_rate.map(|a| format!("{a:.4}"))),
            r.epochs,
            opt_text(&r.epochs_to_target),
            opt_text(&r.tied_states),
            r.wall_time.as_secs_f64()
        );
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> Result<CommandOutcome> {
    let mut runs = Vec::new();
    for dir in &args.runs {
        let r = RunReport::load(dir)?;
        let logged = r.log_csv.lines().count().saturating_sub(1);
        if logged != r.epochs {
            return Err(Error::Config(format!(
                "{}: report says {} epochs but the log has {logged}",
                dir.display(),
                r.epochs
            )));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((name, r));
    }
    let table = report_table(&runs);
    if let Some(out) = &args.out {
        write_file(out, &table)?;
    }
    Ok(CommandOutcome {
        message: table,
        ..CommandOutcome::default()
    })
}
