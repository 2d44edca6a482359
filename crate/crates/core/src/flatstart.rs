//! Flat-start strategies: iterated CE training with realignment, MMI from
//! random weights, and MMI followed by a fresh CE network.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FlatConfig;
use crate::corpus::{add_deltas, frame_accuracy, Corpus, PhoneOptions};
use crate::dnn::{ce_output_grad, init_network, Network, Sgd};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::hmm::graph::{bootstrap_state_chain, build_denominator_graph, build_numerator_graph};
use crate::hmm::search::viterbi;
use crate::hmm::{Alignment, Alignments, GraphStage, StateGraph};
use crate::training::{
    check_output_dim, holdout_backoff, holdout_error, mmi_parameter_gradient, Backoff, DenMode,
    HoldoutController, HoldoutMetric, HoldoutUtt,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    IterativeCe,
    Mmi,
    MmiThenCe,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iterative_ce" => Ok(Strategy::IterativeCe),
            "mmi" => Ok(Strategy::Mmi),
            "mmi_then_ce" => Ok(Strategy::MmiThenCe),
            _ => Err(format!(
                "unknown strategy `{s}` (expected iterative_ce, mmi or mmi_then_ce)"
            )),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::IterativeCe => "iterative_ce",
            Strategy::Mmi => "mmi",
            Strategy::MmiThenCe => "mmi_then_ce",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatstartConfig {
    pub strategy: Strategy,
    pub ce_iterations: usize,
    pub epochs_per_iteration: usize,
    pub ce_lr: f64,
    pub ce_momentum: f64,
    pub minibatch_frames: usize,
    pub mmi_lr: f64,
    pub mmi_momentum: f64,
    pub max_epochs: usize,
    pub max_halvings: usize,
    /// CE epochs of the second stage of `mmi_then_ce`.
    pub mmi_then_ce_epochs: usize,
    pub holdout_fraction: f64,
    pub holdout_metric: HoldoutMetric,
    pub den_mode: DenMode,
    /// Epochs before pronunciation variants and short pauses enter the
    /// numerator graphs.
    pub refine_after_epochs: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub add_deltas: bool,
    /// Multiplies the MMI learning rate during one epoch (0 = never).
    pub lr_spike_epoch: usize,
    pub lr_spike_factor: f64,
    /// Frame accuracy used for the epochs-to-target statistic.
    pub target_accuracy: f64,
    pub seed: u64,
    pub phones: PhoneOptions,
}

impl Default for FlatstartConfig {
    fn default() -> Self {
        FlatstartConfig {
            strategy: Strategy::Mmi,
            ce_iterations: 4,
            epochs_per_iteration: 12,
            ce_lr: 0.01,
            ce_momentum: 0.9,
            minibatch_frames: 100,
            mmi_lr: 0.001,
            mmi_momentum: 0.0,
            max_epochs: 50,
            max_halvings: 8,
            mmi_then_ce_epochs: 12,
            holdout_fraction: 0.1,
            holdout_metric: HoldoutMetric::FrameCe,
            den_mode: DenMode::Viterbi,
            refine_after_epochs: 3,
            hidden_layers: 2,
            hidden_units: 64,
            add_deltas: true,
            lr_spike_epoch: 0,
            lr_spike_factor: 1000.0,
            target_accuracy: 0.90,
            seed: 1,
            phones: PhoneOptions::default(),
        }
    }
}

impl FlatstartConfig {
    pub fn from_config(mut cfg: FlatConfig) -> Result<Self> {
        let mut c = FlatstartConfig::default();
        cfg.take("strategy", &mut c.strategy)?;
        cfg.take("ce_iterations", &mut c.ce_iterations)?;
        cfg.take("epochs_per_iteration", &mut c.epochs_per_iteration)?;
        cfg.take("ce_lr", &mut c.ce_lr)?;
        cfg.take("ce_momentum", &mut c.ce_momentum)?;
        cfg.take("minibatch_frames", &mut c.minibatch_frames)?;
        cfg.take("mmi_lr", &mut c.mmi_lr)?;
        cfg.take("mmi_momentum", &mut c.mmi_momentum)?;
        let initial_lr: Option<f64> = cfg.take_opt("initial_lr")?;
        cfg.take("max_epochs", &mut c.max_epochs)?;
        cfg.take("max_halvings", &mut c.max_halvings)?;
        cfg.take("mmi_then_ce_epochs", &mut c.mmi_then_ce_epochs)?;
        cfg.take("holdout_fraction", &mut c.holdout_fraction)?;
        cfg.take("holdout_metric", &mut c.holdout_metric)?;
        cfg.take("den_mode", &mut c.den_mode)?;
        cfg.take("refine_after_epochs", &mut c.refine_after_epochs)?;
        cfg.take("hidden_layers", &mut c.hidden_layers)?;
        cfg.take("hidden_units", &mut c.hidden_units)?;
        cfg.take("add_deltas", &mut c.add_deltas)?;
        cfg.take("lr_spike_epoch", &mut c.lr_spike_epoch)?;
        cfg.take("lr_spike_factor", &mut c.lr_spike_factor)?;
        cfg.take("target_accuracy", &mut c.target_accuracy)?;
        cfg.take("seed", &mut c.seed)?;
        cfg.take("silence_phone", &mut c.phones.silence)?;
        cfg.take("short_pause_phone", &mut c.phones.short_pause)?;
        cfg.take("states_per_phone", &mut c.phones.states_per_phone)?;
        cfg.finish()?;
        if let Some(lr) = initial_lr {
            match c.strategy {
                Strategy::IterativeCe => c.ce_lr = lr,
                Strategy::Mmi | Strategy::MmiThenCe => c.mmi_lr = lr,
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ce_iterations == 0 {
            return bad("ce_iterations must be at least 1".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction {} not in (0, 1)", self.holdout_fraction));
        }
        for (name, v) in [("ce_lr", self.ce_lr), ("mmi_lr", self.mmi_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive number"));
            }
        }
        for (name, v) in [("ce_momentum", self.ce_momentum), ("mmi_momentum", self.mmi_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1)"));
            }
        }
        if self.minibatch_frames == 0 || self.hidden_layers == 0 || self.hidden_units == 0 {
            return bad("minibatch_frames, hidden_layers and hidden_units must be positive".into());
        }
        if !(self.lr_spike_factor > 0.0) {
            return bad("lr_spike_factor must be positive".into());
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(self.hidden_units, self.hidden_layers));
        sizes.push(output);
        sizes
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across all stages of a run.
    pub epoch: usize,
    pub mode: &'static str,
    /// Mean numerator log-likelihood per frame (MMI) or mean target log
    /// posterior per frame (CE) over the epoch's training utterances.
    pub mean_num_loglike: f64,
    pub holdout_error: f64,
    pub lr: f64,
    /// Fraction of training frames decoded (MMI) or classified (CE) as silence.
    pub silence_fraction: f64,
    pub restored: bool,
    /// Frame accuracy of a realignment with the epoch's final weights,
    /// when ground truth is available.
    pub frame_accuracy: Option<f64>,
}

pub const CSV_HEADER: &str =
    "epoch,mode,mean_num_loglike_per_frame,holdout_error,lr,silence_fraction,restored,frame_accuracy";

impl EpochRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:e},{:.4},{},{}",
            self.epoch,
            self.mode,
            self.mean_num_loglike,
            self.holdout_error,
            self.lr,
            self.silence_fraction,
            self.restored as u8,
            self.frame_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default()
        )
    }
}

pub fn log_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Utterances left out of some step, with the reason.
pub type SkipReport = BTreeMap<String, String>;

#[derive(Debug, Clone)]
pub struct FlatstartOutcome {
    pub strategy: Strategy,
    pub network: Network,
    pub alignments: Alignments,
    pub log: Vec<EpochRecord>,
    pub total_epochs: usize,
    /// First epoch whose output alignments reach the target accuracy.
    pub epochs_to_target: Option<usize>,
    /// Frame accuracy of `alignments`, when ground truth is available.
    pub final_accuracy: Option<f64>,
    pub holdout_ids: Vec<String>,
    pub skipped: SkipReport,
}

/// Lays the bootstrap state chain evenly over `frames` frames: each state
/// gets `frames / N` frames and the first `frames % N` states one more.
pub fn uniform_segmentation(
    transcript: &[String],
    lexicon: &crate::hmm::Lexicon,
    phones: &crate::hmm::PhoneSet,
    frames: usize,
) -> Result<Alignment> {
    let chain = bootstrap_state_chain(transcript, lexicon, phones)?;
    let n = chain.len();
    if frames < n {
        return Err(Error::Infeasible {
            frames,
            min_frames: n,
        });
    }
    let (base, extra) = (frames / n, frames % n);
    let mut states = Vec::with_capacity(frames);
    for (i, &s) in chain.iter().enumerate() {
        states.extend(std::iter::repeat_n(s, base + usize::from(i < extra)));
    }
    Ok(Alignment::from_frame_states(&states))
}

/// Feature matrices in the form a network expects: static features, or
/// static plus deltas when the input layer is three times wider.
pub fn network_features(corpus: &Corpus, net: &Network) -> Result<Vec<Array2<f64>>> {
    let d = corpus.feature_dim();
    if net.input_dim() == d {
        Ok(corpus.utterances.iter().map(|u| u.features.clone()).collect())
    } else if net.input_dim() == 3 * d {
        Ok(corpus
            .utterances
            .iter()
            .map(|u| add_deltas(u.features.view()))
            .collect())
    } else {
        Err(Error::Dimension(format!(
            "network input {} fits neither {d} static nor {} delta features",
            net.input_dim(),
            3 * d
        )))
    }
}

fn prepared_features(corpus: &Corpus, with_deltas: bool) -> Vec<Array2<f64>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            if with_deltas {
                add_deltas(u.features.view())
            } else {
                u.features.clone()
            }
        })
        .collect()
}

/// Independent seed for one purpose of a run.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NET: u64 = 100;

/// Deterministic split of utterance indices into (train, holdout).
pub fn holdout_split(num_utts: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_hold = ((num_utts as f64) * fraction).round().max(1.0) as usize;
    if n_hold >= num_utts {
        return Err(Error::Config(format!(
            "holdout_fraction {fraction} leaves no training data among {num_utts} utterances"
        )));
    }
    let mut idx: Vec<usize> = (0..num_utts).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT)));
    let mut hold = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((train, hold))
}

/// Viterbi realignment of every utterance against its numerator graph.
/// Utterances that cannot be aligned are reported and left out.
pub fn realign(
    exec: &Executor,
    net: &Network,
    corpus: &Corpus,
    stage: GraphStage,
) -> Result<(Alignments, SkipReport)> {
    check_output_dim(net, &corpus.phones)?;
    let feats = network_features(corpus, net)?;
    realign_features(exec, net, corpus, &feats, stage)
}

fn realign_features(
    exec: &Executor,
    net: &Network,
    corpus: &Corpus,
    feats: &[Array2<f64>],
    stage: GraphStage,
) -> Result<(Alignments, SkipReport)> {
    let results = exec.map_indexed(corpus.utterances.len(), |i| -> Result<Alignment> {
        let u = &corpus.utterances[i];
        let g = build_numerator_graph(&u.transcript, &corpus.lexicon, &corpus.phones, stage)?;
        let lp = net.log_posteriors(feats[i].view())?;
        Ok(viterbi(&g, lp.view())?.0)
    });
    let mut alignments = Alignments::new();
    let mut skipped = SkipReport::new();
    for (u, r) in corpus.utterances.iter().zip(results) {
        match r {
            Ok(a) => {
                alignments.insert(u.id.clone(), a);
            }
            Err(e) if e.is_utterance_level() => {
                log::warn!("skipping {}: {e}", u.id);
                skipped.insert(u.id.clone(), e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    Ok((alignments, skipped))
}

/// Shared per-run state: prepared features, split and evaluation helpers.
struct Run<'a> {
    corpus: &'a Corpus,
    cfg: &'a FlatstartConfig,
    exec: &'a Executor,
    feats: Vec<Array2<f64>>,
    train: Vec<usize>,
    hold: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    net_counter: u64,
    skipped: SkipReport,
    log: Vec<EpochRecord>,
}

impl<'a> Run<'a> {
    fn new(corpus: &'a Corpus, cfg: &'a FlatstartConfig, exec: &'a Executor) -> Result<Self> {
        cfg.validate()?;
        if corpus.utterances.is_empty() {
            return Err(Error::Config("corpus has no utterances".into()));
        }
        let (train, hold) = holdout_split(corpus.utterances.len(), cfg.holdout_fraction, cfg.seed)?;
        Ok(Run {
            corpus,
            cfg,
            exec,
            feats: prepared_features(corpus, cfg.add_deltas),
            train,
            hold,
            shuffle_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE)),
            net_counter: 0,
            skipped: SkipReport::new(),
            log: Vec::new(),
        })
    }

    fn fresh_network(&mut self) -> Result<Network> {
        let sizes = self
            .cfg
            .layer_sizes(self.feats[0].ncols(), self.corpus.phones.num_states());
        let seed = derive_seed(self.cfg.seed, STREAM_NET + self.net_counter);
        self.net_counter += 1;
        init_network(&sizes, seed)
    }

    fn skip(&mut self, idx: usize, err: &Error) {
        let id = &self.corpus.utterances[idx].id;
        if !self.skipped.contains_key(id) {
            log::warn!("skipping {id}: {err}");
            self.skipped.insert(id.clone(), err.to_string());
        }
    }

    fn stage_for(&self, epochs_done: usize) -> GraphStage {
        if epochs_done >= self.cfg.refine_after_epochs {
            GraphStage::Refined
        } else {
            GraphStage::Bootstrap
        }
    }

    fn realign(&mut self, net: &Network, stage: GraphStage) -> Result<Alignments> {
        let (alis, skipped) = realign_features(self.exec, net, self.corpus, &self.feats, stage)?;
        for (id, msg) in skipped {
            self.skipped.entry(id).or_insert(msg);
        }
        Ok(alis)
    }

    fn accuracy(&self, alis: &Alignments) -> Option<f64> {
        let gt = self.corpus.ground_truth()?;
        frame_accuracy(alis, &gt, &self.corpus.phones)
    }

    /// Accuracy of a refined realignment with `net`; evaluation only.
    fn probe(&self, net: &Network) -> Result<Option<f64>> {
        if !self.corpus.has_ground_truth() {
            return Ok(None);
        }
        let (alis, _) = realign_features(self.exec, net, self.corpus, &self.feats, GraphStage::Refined)?;
        Ok(self.accuracy(&alis))
    }

    fn uniform_targets(&mut self) -> Result<Alignments> {
        let mut out = Alignments::new();
        for i in 0..self.corpus.utterances.len() {
            let u = &self.corpus.utterances[i];
            match uniform_segmentation(&u.transcript, &self.corpus.lexicon, &self.corpus.phones, u.num_frames()) {
                Ok(a) => {
                    out.insert(u.id.clone(), a);
                }
                Err(e) if e.is_utterance_level() => self.skip(i, &e),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Frame-level CE training for `epochs` epochs on hard targets.
    /// Returns the number of epochs run.
    fn train_ce(&mut self, net: &mut Network, targets: &Alignments, epochs: usize) -> Result<usize> {
        let phones = &self.corpus.phones;
        let num_states = phones.num_states();
        let labels: Vec<Option<Vec<usize>>> = self
            .corpus
            .utterances
            .iter()
            .map(|u| targets.get(&u.id).map(Alignment::frame_states))
            .collect();
        let mut frames: Vec<(u32, u32)> = Vec::new();
        for &i in &self.train {
            if let Some(l) = &labels[i] {
                frames.extend((0..l.len()).map(|t| (i as u32, t as u32)));
            }
        }
        if frames.is_empty() {
            return Err(Error::Config("no training frames with targets".into()));
        }
        let dim = self.feats[0].ncols();
        let mut sgd = Sgd::new(self.cfg.ce_lr, self.cfg.ce_momentum);
        for _ in 0..epochs {
            frames.shuffle(&mut self.shuffle_rng);
            let mut loglike = 0.0;
            let mut silence = 0usize;
            for batch in frames.chunks(self.cfg.minibatch_frames) {
                let mut x = Array2::<f64>::zeros((batch.len(), dim));
                let mut y = Array2::<f64>::zeros((batch.len(), num_states));
                for (r, &(u, t)) in batch.iter().enumerate() {
                    x.row_mut(r).assign(&self.feats[u as usize].row(t as usize));
                    let s = labels[u as usize].as_ref().expect("labelled")[t as usize];
                    y[[r, s]] = 1.0;
                }
                let (post, cache) = net.forward(x.view())?;
                for (r, row) in cache.log_posteriors.rows().into_iter().enumerate() {
                    let (best, _) = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (s, &v)| if v > acc.1 { (s, v) } else { acc });
                    silence += phones.is_silence_state(best) as usize;
                    loglike += (&row * &y.row(r)).sum();
                }
                let mut grad = ce_output_grad(post.view(), y.view())?;
                grad /= batch.len() as f64;
                let grads = net.backward(&cache, grad.view())?;
                sgd.step(net, &grads)?;
            }
            let holdout = self.ce_holdout_error(net, &labels)?;
            let record = EpochRecord {
                epoch: self.log.len() + 1,
                mode: "ce",
                mean_num_loglike: loglike / frames.len() as f64,
                holdout_error: holdout,
                lr: self.cfg.ce_lr,
                silence_fraction: silence as f64 / frames.len() as f64,
                restored: false,
                frame_accuracy: self.probe(net)?,
            };
            log::info!("{}", record.to_csv());
            self.log.push(record);
        }
        Ok(epochs)
    }

    /// Mean frame cross-entropy on the hold-out utterances' current targets.
    fn ce_holdout_error(&self, net: &Network, labels: &[Option<Vec<usize>>]) -> Result<f64> {
        let parts = self.exec.map(&self.hold, |&i| -> Result<(f64, usize)> {
            let Some(l) = &labels[i] else { return Ok((0.0, 0)) };
            let lp = net.log_posteriors(self.feats[i].view())?;
            Ok((l.iter().enumerate().map(|(t, &s)| -lp[[t, s]]).sum(), l.len()))
        });
        let (mut sum, mut n) = (0.0, 0usize);
        for p in parts {
            let (s, c) = p?;
            sum += s;
            n += c;
        }
        Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
    }

    fn numerator_graphs(&mut self, stage: GraphStage) -> Result<Vec<Option<StateGraph>>> {
        let mut graphs = Vec::with_capacity(self.corpus.utterances.len());
        for i in 0..self.corpus.utterances.len() {
            let u = &self.corpus.utterances[i];
            let g = build_numerator_graph(&u.transcript, &self.corpus.lexicon, &self.corpus.phones, stage)
                .and_then(|g| {
                    if u.num_frames() < g.min_frames() {
                        Err(Error::Infeasible {
                            frames: u.num_frames(),
                            min_frames: g.min_frames(),
                        })
                    } else {
                        Ok(g)
                    }
                });
            match g {
                Ok(g) => graphs.push(Some(g)),
                Err(e) if e.is_utterance_level() => {
                    self.skip(i, &e);
                    graphs.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(graphs)
    }

    fn mmi_holdout_error(
        &self,
        net: &Network,
        graphs: &[Option<StateGraph>],
        den: &StateGraph,
    ) -> Result<f64> {
        let hold: Vec<HoldoutUtt<'_>> = self
            .hold
            .iter()
            .filter_map(|&i| {
                graphs[i].as_ref().map(|g| HoldoutUtt {
                    id: &self.corpus.utterances[i].id,
                    features: self.feats[i].view(),
                    numerator: g,
                })
            })
            .collect();
        holdout_error(self.exec, net, &hold, den, &self.corpus.phones, self.cfg.holdout_metric)
    }

    /// MMI training from `net`; returns the trained network.
    fn train_mmi(&mut self, mut net: Network) -> Result<Network> {
        let phones = &self.corpus.phones;
        check_output_dim(&net, phones)?;
        let den = build_denominator_graph(phones)?;
        let mut stage = self.stage_for(0);
        let mut graphs = self.numerator_graphs(stage)?;
        let mut ctrl = HoldoutController::new(&net, self.cfg.mmi_lr, self.cfg.max_halvings);
        let mut sgd = Sgd::new(self.cfg.mmi_lr, self.cfg.mmi_momentum);
        let mut order = self.train.clone();
        for epoch in 1..=self.cfg.max_epochs {
            if ctrl.is_finished() {
                log::info!("stopping after {} learning-rate halvings", ctrl.halvings);
                break;
            }
            order.shuffle(&mut self.shuffle_rng);
            sgd.lr = if epoch == self.cfg.lr_spike_epoch {
                ctrl.lr * self.cfg.lr_spike_factor
            } else {
                ctrl.lr
            };
            let (mut loglike, mut frames, mut silence) = (0.0, 0usize, 0usize);
            let mut diverged = false;
            for &i in &order {
                let Some(g) = &graphs[i] else { continue };
                match mmi_parameter_gradient(&net, self.feats[i].view(), g, &den, phones, self.cfg.den_mode) {
                    Ok((res, grads)) => {
                        loglike += res.num_loglike.0;
                        frames += res.num_frames();
                        silence += res.silence_frames;
                        sgd.step(&mut net, &grads)?;
                        if !net.is_finite() {
                            diverged = true;
                            break;
                        }
                    }
                    Err(e) if e.is_utterance_level() => {
                        let id = self.corpus.utterances[i].id.clone();
                        log::warn!("skipping {id}: {e}");
                        self.skipped.entry(id).or_insert(e.to_string());
                    }
                    Err(e) => return Err(e),
                }
            }
            let lr_used = sgd.lr;
            // a blown-up network counts as an infinitely bad epoch and is rolled back
            let err = if diverged {
                log::warn!("epoch {epoch}: weights became non-finite at lr {lr_used}");
                f64::INFINITY
            } else {
                self.mmi_holdout_error(&net, &graphs, &den)?
            };
            let decision = holdout_backoff(&mut ctrl, &mut net, err);
            if decision == Backoff::Restored {
                sgd.reset();
            }
            let record = EpochRecord {
                epoch: self.log.len() + 1,
                mode: "mmi",
                mean_num_loglike: if frames > 0 { loglike / frames as f64 } else { f64::NAN },
                holdout_error: err,
                lr: lr_used,
                silence_fraction: if frames > 0 { silence as f64 / frames as f64 } else { 0.0 },
                restored: decision == Backoff::Restored,
                frame_accuracy: self.probe(&net)?,
            };
            log::info!("{}", record.to_csv());
            self.log.push(record);

            if stage == GraphStage::Bootstrap
                && decision == Backoff::Continue
                && self.stage_for(epoch) == GraphStage::Refined
            {
                stage = GraphStage::Refined;
                graphs = self.numerator_graphs(stage)?;
                let e = self.mmi_holdout_error(&net, &graphs, &den)?;
                ctrl.rebase(&net, e);
                log::info!("switched to refined numerator graphs after epoch {epoch}");
            }
        }
        Ok(net)
    }

    fn finish(self, strategy: Strategy, network: Network, alignments: Alignments, target_epochs: Option<usize>) -> FlatstartOutcome {
        let final_accuracy = self.accuracy(&alignments);
        FlatstartOutcome {
            strategy,
            network,
            alignments,
            total_epochs: self.log.len(),
            epochs_to_target: target_epochs,
            log: self.log,
            final_accuracy,
            holdout_ids: self
                .hold
                .iter()
                .map(|&i| self.corpus.utterances[i].id.clone())
                .collect(),
            skipped: self.skipped,
        }
    }

    fn first_epoch_reaching_target(&self, from: usize) -> Option<usize> {
        self.log[from..]
            .iter()
            .find(|r| r.frame_accuracy.is_some_and(|a| a >= self.cfg.target_accuracy))
            .map(|r| r.epoch)
    }
}

/// Trains a fresh network per iteration: first on uniform segmentations,
/// then on the previous network's realignments. Every iteration that trains
/// for at least one epoch ends with a realignment.
///
/// Epochs-to-target counts the cumulative epochs at the first realignment
/// whose accuracy reaches the target, since those are the alignments this
/// strategy produces.
pub fn iterative_ce_flatstart(corpus: &Corpus, cfg: &FlatstartConfig, exec: &Executor) -> Result<FlatstartOutcome> {
    let mut run = Run::new(corpus, cfg, exec)?;
    let mut targets = run.uniform_targets()?;
    let mut net = run.fresh_network()?;
    let mut reached = None;
    for it in 0..cfg.ce_iterations {
        if it > 0 {
            net = run.fresh_network()?;
        }
        let epochs = run.train_ce(&mut net, &targets, cfg.epochs_per_iteration)?;
        if epochs > 0 {
            let stage = run.stage_for(run.log.len());
            targets = run.realign(&net, stage)?;
            let acc = run.accuracy(&targets);
            log::info!("ce iteration {it}: realigned ({stage:?}), accuracy {acc:?}");
            if reached.is_none() && acc.is_some_and(|a| a >= cfg.target_accuracy) {
                reached = Some(run.log.len());
            }
        }
    }
    Ok(run.finish(Strategy::IterativeCe, net, targets, reached))
}

/// MMI from random weights with per-utterance updates, hold-out backoff,
/// and final Viterbi alignments over refined numerator graphs.
pub fn mmi_flatstart(corpus: &Corpus, cfg: &FlatstartConfig, exec: &Executor) -> Result<FlatstartOutcome> {
    let mut run = Run::new(corpus, cfg, exec)?;
    let net = run.fresh_network()?;
    let net = run.train_mmi(net)?;
    let alignments = run.realign(&net, GraphStage::Refined)?;
    let reached = run.first_epoch_reaching_target(0);
    Ok(run.finish(Strategy::Mmi, net, alignments, reached))
}

/// MMI flat start, then a fresh network trained by CE on the MMI alignments
/// and used for a final realignment. With zero CE epochs the MMI network and
/// alignments are returned unchanged.
pub fn mmi_then_ce(corpus: &Corpus, cfg: &FlatstartConfig, exec: &Executor) -> Result<FlatstartOutcome> {
    let mut run = Run::new(corpus, cfg, exec)?;
    let net = run.fresh_network()?;
    let mmi_net = run.train_mmi(net)?;
    let mmi_alis = run.realign(&mmi_net, GraphStage::Refined)?;
    let mmi_epochs = run.log.len();
    if cfg.mmi_then_ce_epochs == 0 {
        let reached = run.first_epoch_reaching_target(0);
        return Ok(run.finish(Strategy::MmiThenCe, mmi_net, mmi_alis, reached));
    }
    let mut net = run.fresh_network()?;
    run.train_ce(&mut net, &mmi_alis, cfg.mmi_then_ce_epochs)?;
    let alignments = run.realign(&net, GraphStage::Refined)?;
    let reached = run.first_epoch_reaching_target(0).filter(|&e| e <= mmi_epochs).or_else(|| {
        run.accuracy(&alignments)
            .is_some_and(|a| a >= cfg.target_accuracy)
            .then_some(run.log.len())
    });
    Ok(run.finish(Strategy::MmiThenCe, net, alignments, reached))
}

pub fn run_strategy(corpus: &Corpus, cfg: &FlatstartConfig, exec: &Executor) -> Result<FlatstartOutcome> {
    match cfg.strategy {
        Strategy::IterativeCe => iterative_ce_flatstart(corpus, cfg, exec),
        Strategy::Mmi => mmi_flatstart(corpus, cfg, exec),
        Strategy::MmiThenCe => mmi_then_ce(corpus, cfg, exec),
    }
}

/// Log posteriors of every utterance under `net`.
pub fn corpus_log_posteriors(exec: &Executor, net: &Network, corpus: &Corpus) -> Result<Vec<Array2<f64>>> {
    let feats = network_features(corpus, net)?;
    exec.map(&feats, |f: &Array2<f64>| net.log_posteriors(f.view()))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::dnn::Layer;
    use crate::hmm::{Lexicon, PhoneSet};
    use ndarray::Array1;

    fn phones() -> PhoneSet {
        let syms = ["!SIL", "a", "b", "!SP"].map(String::from).to_vec();
        PhoneSet::new(syms, "!SIL", Some("!SP"), 3).unwrap()
    }

    fn seg_lengths(a: &Alignment) -> Vec<usize> {
        a.segments().iter().map(|s| s.end - s.start).collect()
    }

    #[test]
    fn uniform_segmentation_remainder_rule() {
        let ps = phones();
        let mut lex = Lexicon::new();
        lex.add_symbols("ab", &["a", "b"], &ps).unwrap();
        let a = uniform_segmentation(&["ab".to_string()], &lex, &ps, 120).unwrap();
        assert_eq!(seg_lengths(&a), vec![10; 12]);
        let a = uniform_segmentation(&["ab".to_string()], &lex, &ps, 125).unwrap();
        assert_eq!(seg_lengths(&a), [vec![11; 5], vec![10; 7]].concat());
        assert!(matches!(
            uniform_segmentation(&["ab".to_string()], &lex, &ps, 11),
            Err(Error::Infeasible { min_frames: 12, .. })
        ));
    }

    #[test]
    fn uniform_segmentation_small_chains() {
        // one-state phones: silence-only chain has 2 states
        let ps = PhoneSet::new(vec!["!SIL".into(), "a".into()], "!SIL", None, 1).unwrap();
        let mut lex = Lexicon::new();
        lex.add_symbols("a", &["a"], &ps).unwrap();
        // two silence states with the same model state: 5 + 5 frames of state 0
        let a = uniform_segmentation(&[], &lex, &ps, 10).unwrap();
        assert_eq!(a.frame_states(), vec![0; 10]);
        assert!(uniform_segmentation(&[], &lex, &ps, 1).is_err());
        let a = uniform_segmentation(&["a".to_string()], &lex, &ps, 10).unwrap();
        assert_eq!(seg_lengths(&a), vec![4, 3, 3]);
    }

    #[test]
    fn config_parses_and_rejects_unknown() {
        let cfg = FlatConfig::from_pairs([("strategy", "iterative_ce"), ("initial_lr", "0.05"), ("ce_iterations", "2")]);
        let c = FlatstartConfig::from_config(cfg).unwrap();
        assert_eq!(c.strategy, Strategy::IterativeCe);
        assert_eq!(c.ce_lr, 0.05);
        assert_eq!(c.ce_iterations, 2);
        assert!(FlatstartConfig::from_config(FlatConfig::from_pairs([("nope", "1")])).is_err());
        assert!(FlatstartConfig::from_config(FlatConfig::from_pairs([("strategy", "gmm")])).is_err());
        assert!(FlatstartConfig::from_config(FlatConfig::from_pairs([("ce_iterations", "0")])).is_err());
        assert!(FlatstartConfig::from_config(FlatConfig::from_pairs([("holdout_fraction", "1.0")])).is_err());
    }

    #[test]
    fn holdout_split_is_deterministic_and_disjoint() {
        let (t1, h1) = holdout_split(50, 0.1, 3).unwrap();
        let (t2, h2) = holdout_split(50, 0.1, 3).unwrap();
        assert_eq!((&t1, &h1), (&t2, &h2));
        assert_eq!(h1.len(), 5);
        assert!(h1.iter().all(|i| !t1.contains(i)));
        assert_eq!(holdout_split(3, 0.01, 1).unwrap().1.len(), 1);
        assert!(holdout_split(1, 0.5, 1).is_err());
    }

    fn tiny_corpus(seed: u64) -> Corpus {
        let spec = SyntheticSpec {
            phones: 4,
            utterances: 16,
            vocabulary: 6,
            max_words: 3,
            seed,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap().corpus
    }

    fn tiny_cfg() -> FlatstartConfig {
        FlatstartConfig {
            hidden_units: 16,
            epochs_per_iteration: 2,
            ce_iterations: 2,
            max_epochs: 3,
            mmi_then_ce_epochs: 1,
            holdout_fraction: 0.2,
            ..FlatstartConfig::default()
        }
    }

    /// A network whose log posteriors put all mass on the true state: each
    /// frame's feature is the one-hot of its ground-truth state.
    #[test]
    fn oracle_network_realigns_perfectly() {
        let c = tiny_corpus(2);
        let s = c.phones.num_states();
        let mut utts = c.utterances.clone();
        for u in &mut utts {
            let states = u.ground_truth.as_ref().unwrap().frame_states();
            u.features = Array2::from_shape_fn((states.len(), s), |(t, d)| (states[t] == d) as u8 as f64);
        }
        let oracle_corpus = Corpus::new(c.phones.clone(), c.lexicon.clone(), utts).unwrap();
        let mut w2 = Array2::<f64>::eye(s);
        w2 *= 30.0;
        let net = Network::from_layers(
            vec![
                Layer { weights: Array2::eye(s), bias: Array1::zeros(s) },
                Layer { weights: w2, bias: Array1::zeros(s) },
            ],
            0,
        )
        .unwrap();
        let exec = Executor::sequential();
        let (alis, skipped) = realign(&exec, &net, &oracle_corpus, GraphStage::Refined).unwrap();
        assert!(skipped.is_empty());
        let gt = oracle_corpus.ground_truth().unwrap();
        assert_eq!(frame_accuracy(&alis, &gt, &c.phones), Some(1.0));
        let (again, _) = realign(&exec, &net, &oracle_corpus, GraphStage::Refined).unwrap();
        assert_eq!(alis, again);
        for u in &oracle_corpus.utterances {
            let g = build_numerator_graph(&u.transcript, &c.lexicon, &c.phones, GraphStage::Refined).unwrap();
            alis[&u.id].check_against(&g).unwrap();
        }
    }

    #[test]
    fn one_iteration_without_epochs_returns_uniform_alignments() {
        let c = tiny_corpus(1);
        let cfg = FlatstartConfig {
            strategy: Strategy::IterativeCe,
            ce_iterations: 1,
            epochs_per_iteration: 0,
            ..tiny_cfg()
        };
        let out = iterative_ce_flatstart(&c, &cfg, &Executor::sequential()).unwrap();
        assert_eq!(out.total_epochs, 0);
        for u in &c.utterances {
            let uni = uniform_segmentation(&u.transcript, &c.lexicon, &c.phones, u.num_frames()).unwrap();
            assert_eq!(out.alignments[&u.id], uni);
        }
    }

    #[test]
    fn epoch_accounting_sums_stages() {
        let c = tiny_corpus(1);
        let exec = Executor::sequential();
        let ce = iterative_ce_flatstart(&c, &tiny_cfg(), &exec).unwrap();
        assert_eq!(ce.total_epochs, 2 * 2);
        assert_eq!(ce.log.len(), ce.total_epochs);
        let mmi = mmi_flatstart(&c, &tiny_cfg(), &exec).unwrap();
        assert!(mmi.total_epochs <= 3);
        let both = mmi_then_ce(&c, &tiny_cfg(), &exec).unwrap();
        assert_eq!(both.total_epochs, mmi.total_epochs + 1);
        assert_eq!(both.log.iter().filter(|r| r.mode == "ce").count(), 1);
    }

    #[test]
    fn zero_ce_epochs_keeps_mmi_alignments() {
        let c = tiny_corpus(4);
        let exec = Executor::sequential();
        let cfg = FlatstartConfig { mmi_then_ce_epochs: 0, ..tiny_cfg() };
        let mmi = mmi_flatstart(&c, &cfg, &exec).unwrap();
        let both = mmi_then_ce(&c, &cfg, &exec).unwrap();
        assert_eq!(mmi.alignments, both.alignments);
        assert_eq!(mmi.network, both.network);
    }

    #[test]
    fn strategies_are_reproducible() {
        let c = tiny_corpus(5);
        let exec = Executor::sequential();
        for strategy in [Strategy::IterativeCe, Strategy::Mmi, Strategy::MmiThenCe] {
            let cfg = FlatstartConfig { strategy, ..tiny_cfg() };
            let a = run_strategy(&c, &cfg, &exec).unwrap();
            let b = run_strategy(&c, &cfg, &exec).unwrap();
            assert_eq!(a.network, b.network, "{strategy}");
            assert_eq!(a.alignments, b.alignments);
            assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn alignments_tile_and_follow_graphs() {
        let c = tiny_corpus(6);
        let out = mmi_flatstart(&c, &tiny_cfg(), &Executor::sequential()).unwrap();
        for u in &c.utterances {
            let a = &out.alignments[&u.id];
            assert_eq!(a.num_frames(), u.num_frames());
            let g = build_numerator_graph(&u.transcript, &c.lexicon, &c.phones, GraphStage::Refined).unwrap();
            a.check_against(&g).unwrap();
        }
    }

    #[test]
    fn csv_row_shape() {
        let r = EpochRecord {
            epoch: 3,
            mode: "mmi",
            mean_num_loglike: -1.5,
            holdout_error: 0.25,
            lr: 0.001,
            silence_fraction: 0.3,
            restored: true,
            frame_accuracy: None,
        };
        assert_eq!(r.to_csv(), "3,mmi,-1.500000,0.250000,1e-3,0.3000,1,");
        assert_eq!(CSV_HEADER.split(',').count(), r.to_csv().split(',').count());
    }
}
