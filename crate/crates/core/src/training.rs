//! Utterance-level training criteria and the hold-out backoff controller.
//!
//! MMI state log-likelihoods are the network's log posteriors as they are:
//! no prior division and no acoustic scale.

use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::dnn::{ce_output_grad, ForwardCache, Gradients, Network};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::hmm::graph::{build_denominator_graph, build_numerator_graph, GraphStage, StateGraph};
use crate::hmm::phones::{Lexicon, PhoneSet};
use crate::hmm::search::{forward_backward, occupancy_from_alignment, viterbi_path, OccupancyMatrix};
use crate::hmm::Alignment;
use crate::numerics::LogProb;

/// How denominator occupancies are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenMode {
    /// One-hot occupancies of the best phone-loop path.
    #[default]
    Viterbi,
    /// Full forward-backward over the phone loop (for comparison runs).
    FullFb,
}

impl FromStr for DenMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "viterbi" => Ok(DenMode::Viterbi),
            "full_fb" => Ok(DenMode::FullFb),
            _ => Err(format!("expected `viterbi` or `full_fb`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HoldoutMetric {
    /// Mean per-frame cross-entropy against numerator occupancies.
    #[default]
    FrameCe,
    /// One minus the mean numerator/denominator frame agreement.
    MmiDisagreement,
}

impl FromStr for HoldoutMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frame_ce" => Ok(HoldoutMetric::FrameCe),
            "mmi_disagreement" => Ok(HoldoutMetric::MmiDisagreement),
            _ => Err(format!("expected `frame_ce` or `mmi_disagreement`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmiUttResult {
    /// `γ_num − γ_den`, `T × S`.
    pub output_grad: Array2<f64>,
    pub num_loglike: LogProb,
    /// Forward total over the denominator graph.
    pub den_loglike: LogProb,
    /// Score of the best denominator path.
    pub den_viterbi_score: LogProb,
    /// Fraction of frames where the numerator argmax state equals the
    /// denominator best-path state.
    pub frame_agreement: f64,
    /// Frames whose denominator best-path state is a silence state.
    pub silence_frames: usize,
}

impl MmiUttResult {
    pub fn num_frames(&self) -> usize {
        self.output_grad.nrows()
    }

    /// The objective whose output-layer gradient is `output_grad` in
    /// Viterbi mode.
    pub fn objective(&self) -> f64 {
        self.num_loglike.0 - self.den_viterbi_score.0
    }
}

/// MMI quantities from precomputed log posteriors and graphs.
pub fn mmi_output_grad(
    log_posteriors: ArrayView2<f64>,
    numerator: &StateGraph,
    denominator: &StateGraph,
    phones: &PhoneSet,
    mode: DenMode,
) -> Result<MmiUttResult> {
    let num = forward_backward(numerator, log_posteriors)?;
    let den_fb = forward_backward(denominator, log_posteriors)?;
    let den_path = viterbi_path(denominator, log_posteriors)?;
    let den_gamma = match mode {
        DenMode::Viterbi => {
            occupancy_from_alignment(&Alignment::from_frame_states(&den_path.states), num.num_states())
                .gamma
        }
        DenMode::FullFb => den_fb.gamma,
    };
    let frames = num.num_frames();
    let agree = num
        .argmax_states()
        .iter()
        .zip(&den_path.states)
        .filter(|(a, b)| a == b)
        .count();
    Ok(MmiUttResult {
        output_grad: &num.gamma - &den_gamma,
        num_loglike: num.total_log_likelihood,
        den_loglike: den_fb.total_log_likelihood,
        den_viterbi_score: den_path.score,
        frame_agreement: agree as f64 / frames as f64,
        silence_frames: den_path
            .states
            .iter()
            .filter(|&&s| phones.is_silence_state(s))
            .count(),
    })
}

/// MMI output-layer gradient for one utterance, with both graphs built
/// fresh and decoded with the current network.
#[allow(clippy::too_many_arguments)]
pub fn mmi_utterance_gradient(
    net: &Network,
    features: ArrayView2<f64>,
    transcript: &[String],
    lexicon: &Lexicon,
    phones: &PhoneSet,
    stage: GraphStage,
    mode: DenMode,
) -> Result<MmiUttResult> {
    check_output_dim(net, phones)?;
    let numerator = build_numerator_graph(transcript, lexicon, phones, stage)?;
    let denominator = build_denominator_graph(phones)?;
    let log_post = net.log_posteriors(features)?;
    mmi_output_grad(log_post.view(), &numerator, &denominator, phones, mode)
}

/// MMI result plus parameter gradients for one utterance.
pub fn mmi_parameter_gradient(
    net: &Network,
    features: ArrayView2<f64>,
    numerator: &StateGraph,
    denominator: &StateGraph,
    phones: &PhoneSet,
    mode: DenMode,
) -> Result<(MmiUttResult, Gradients)> {
    let (_, cache) = net.forward(features)?;
    let res = mmi_output_grad(cache.log_posteriors.view(), numerator, denominator, phones, mode)?;
    let grads = net.backward(&cache, res.output_grad.view())?;
    Ok((res, grads))
}

/// CE output-layer gradient against fixed targets.
pub fn ce_utterance_gradient(
    net: &Network,
    features: ArrayView2<f64>,
    targets: &OccupancyMatrix,
) -> Result<Array2<f64>> {
    Ok(ce_gradient_with_cache(net, features, targets)?.0)
}

pub(crate) fn ce_gradient_with_cache(
    net: &Network,
    features: ArrayView2<f64>,
    targets: &OccupancyMatrix,
) -> Result<(Array2<f64>, ForwardCache)> {
    let (post, cache) = net.forward(features)?;
    Ok((ce_output_grad(post.view(), targets.gamma.view())?, cache))
}

pub(crate) fn check_output_dim(net: &Network, phones: &PhoneSet) -> Result<()> {
    if net.output_dim() != phones.num_states() {
        return Err(Error::Dimension(format!(
            "network has {} outputs but the phone set has {} model states",
            net.output_dim(),
            phones.num_states()
        )));
    }
    Ok(())
}

/// One hold-out utterance: its features and numerator graph.
#[derive(Debug, Clone, Copy)]
pub struct HoldoutUtt<'a> {
    pub id: &'a str,
    pub features: ArrayView2<'a, f64>,
    pub numerator: &'a StateGraph,
}

/// Error of `net` on the hold-out set; infeasible utterances are skipped.
pub fn holdout_error(
    exec: &Executor,
    net: &Network,
    holdout: &[HoldoutUtt<'_>],
    denominator: &StateGraph,
    phones: &PhoneSet,
    metric: HoldoutMetric,
) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::Config("hold-out set is empty".into()));
    }
    // (sum, frames) per utterance, folded in order below
    let parts = exec.map(holdout, |u| -> Result<Option<(f64, usize)>> {
        let log_post = net.log_posteriors(u.features)?;
        match metric {
            HoldoutMetric::FrameCe => {
                let occ = match forward_backward(u.numerator, log_post.view()) {
                    Ok(o) => o,
                    Err(e) if e.is_utterance_level() => return Ok(None),
                    Err(e) => return Err(e),
                };
                let ce: f64 = occ
                    .gamma
                    .iter()
                    .zip(log_post.iter())
                    .filter(|(g, _)| **g > 0.0)
                    .map(|(g, lp)| -g * lp)
                    .sum();
                Ok(Some((ce, occ.num_frames())))
            }
            HoldoutMetric::MmiDisagreement => {
                match mmi_output_grad(log_post.view(), u.numerator, denominator, phones, DenMode::Viterbi) {
                    Ok(r) => Ok(Some((r.frame_agreement, 1))),
                    Err(e) if e.is_utterance_level() => Ok(None),
                    Err(e) => Err(e),
                }
            }
        }
    });
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in parts {
        if let Some((s, n)) = p? {
            sum += s;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Config("no usable hold-out utterances".into()));
    }
    Ok(match metric {
        HoldoutMetric::FrameCe => sum / count as f64,
        HoldoutMetric::MmiDisagreement => 1.0 - sum / count as f64,
    })
}

pub const DEFAULT_MAX_HALVINGS: usize = 8;

/// Keeps the best weights seen on the hold-out set and halves the learning
/// rate whenever the error fails to improve.
#[derive(Debug, Clone)]
pub struct HoldoutController {
    pub best_error: f64,
    pub backup: Network,
    pub lr: f64,
    pub halvings: usize,
    pub max_halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backoff {
    Continue,
    Restored,
}

impl HoldoutController {
    /// No error recorded yet: the first evaluation is always accepted.
    pub fn new(net: &Network, lr: f64, max_halvings: usize) -> Self {
        HoldoutController {
            best_error: f64::INFINITY,
            backup: net.clone(),
            lr,
            halvings: 0,
            max_halvings,
        }
    }

    /// Starts from a known error for the current weights.
    pub fn with_baseline(net: &Network, error: f64, lr: f64, max_halvings: usize) -> Self {
        HoldoutController {
            best_error: error,
            ..Self::new(net, lr, max_halvings)
        }
    }

    /// Re-bases on new weights and error, e.g. after the hold-out targets
    /// themselves change.
    pub fn rebase(&mut self, net: &Network, error: f64) {
        self.backup = net.clone();
        self.best_error = error;
    }

    pub fn is_finished(&self) -> bool {
        self.halvings >= self.max_halvings
    }
}

pub fn holdout_backoff(ctrl: &mut HoldoutController, net: &mut Network, current_error: f64) -> Backoff {
    if current_error < ctrl.best_error {
        ctrl.best_error = current_error;
        ctrl.backup = net.clone();
        Backoff::Continue
    } else {
        *net = ctrl.backup.clone();
        ctrl.lr /= 2.0;
        ctrl.halvings += 1;
        Backoff::Restored
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::{init_network, Layer};
    use crate::hmm::graph::bootstrap_state_chain;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_phones() -> PhoneSet {
        let syms = ["!SIL", "a"].map(String::from).to_vec();
        PhoneSet::new(syms, "!SIL", None, 1).unwrap()
    }

    fn toy_lexicon(ps: &PhoneSet) -> Lexicon {
        let mut lex = Lexicon::new();
        lex.add_symbols("x", &["a"], ps).unwrap();
        lex.add_symbols("y", &["a", "a"], ps).unwrap();
        lex
    }

    fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((frames, dim), || rng.random_range(-1.5..1.5))
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_state_world_has_zero_gradient() {
        let ps = PhoneSet::new(vec!["!SIL".into()], "!SIL", None, 1).unwrap();
        let lex = Lexicon::new();
        let net = init_network(&[3, 4, 1], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(&mut rng, 5, 3);
        let r = mmi_utterance_gradient(&net, f.view(), &[], &lex, &ps, GraphStage::Refined, DenMode::Viterbi)
            .unwrap();
        assert!(r.output_grad.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(r.frame_agreement, 1.0);
    }

    #[test]
    fn rows_sum_to_zero_and_num_below_den() {
        let ps = toy_phones();
        let lex = toy_lexicon(&ps);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..10 {
            let net = init_network(&[3, 5, ps.num_states()], seed).unwrap();
            let f = random_features(&mut rng, 9, 3);
            for mode in [DenMode::Viterbi, DenMode::FullFb] {
                let r = mmi_utterance_gradient(&net, f.view(), &words(&["x", "y"]), &lex, &ps, GraphStage::Refined, mode)
                    .unwrap();
                for row in r.output_grad.rows() {
                    assert!(row.sum().abs() < 1e-6);
                }
                assert!(r.num_loglike.0 <= r.den_loglike.0 + 1e-9);
                assert!(r.den_viterbi_score.0 <= r.den_loglike.0 + 1e-9);
            }
        }
    }

    fn perturbed(net: &Network, idx: usize, delta: f64) -> Network {
        let mut out = net.clone();
        let mut i = idx;
        for l in out.layers_mut() {
            let nw = l.weights.len();
            if i < nw {
                let c = l.weights.ncols();
                l.weights[[i / c, i % c]] += delta;
                return out;
            }
            i -= nw;
            if i < l.bias.len() {
                l.bias[i] += delta;
                return out;
            }
            i -= l.bias.len();
        }
        unreachable!()
    }

    /// Central differences of `num_total − den_viterbi_score` against
    /// backpropagated MMI gradients, skipping samples whose perturbation
    /// changes the denominator best path.
    #[test]
    fn mmi_gradient_matches_finite_differences() {
        let ps = toy_phones();
        let lex = toy_lexicon(&ps);
        let den = build_denominator_graph(&ps).unwrap();
        let num = build_numerator_graph(&words(&["x", "y"]), &lex, &ps, GraphStage::Refined).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut checked_nets = 0;
        for seed in 0..24u64 {
            let net = init_network(&[3, 4, ps.num_states()], seed).unwrap();
            let f = random_features(&mut rng, 8, 3);
            let (res, grads) = mmi_parameter_gradient(&net, f.view(), &num, &den, &ps, DenMode::Viterbi).unwrap();
            let base_path = viterbi_path(&den, net.log_posteriors(f.view()).unwrap().view()).unwrap().states;
            let flat = grads.flatten();
            let objective = |n: &Network| {
                let lp = n.log_posteriors(f.view()).unwrap();
                let r = mmi_output_grad(lp.view(), &num, &den, &ps, DenMode::Viterbi).unwrap();
                let path = viterbi_path(&den, lp.view()).unwrap().states;
                (r.objective(), path)
            };
            let mut ok = true;
            let mut any = false;
            for (i, &g) in flat.iter().enumerate() {
                let (fp, pp) = objective(&perturbed(&net, i, h));
                let (fm, pm) = objective(&perturbed(&net, i, -h));
                if pp != base_path || pm != base_path {
                    continue; // tie region
                }
                any = true;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
                if rel > 1e-4 {
                    ok = false;
                    eprintln!("seed {seed} param {i}: fd {fd} bp {g}");
                }
            }
            assert!(res.objective().is_finite());
            assert!(ok);
            if any {
                checked_nets += 1;
            }
        }
        assert!(checked_nets >= 20);
    }

    #[test]
    fn ce_gradient_is_targets_minus_posteriors() {
        let net = init_network(&[2, 3, 4], 1).unwrap();
        let f = Array2::from_shape_vec((2, 2), vec![0.1, -0.3, 0.7, 0.2]).unwrap();
        let targets = occupancy_from_alignment(&Alignment::from_frame_states(&[1, 3]), 4);
        let g = ce_utterance_gradient(&net, f.view(), &targets).unwrap();
        let (post, _) = net.forward(f.view()).unwrap();
        assert_eq!(g, &targets.gamma - &post);
        let bad = occupancy_from_alignment(&Alignment::from_frame_states(&[1]), 4);
        assert!(ce_utterance_gradient(&net, f.view(), &bad).is_err());
    }

    fn constant_net(outputs: usize) -> Network {
        // zero output layer: uniform posteriors
        Network::from_layers(
            vec![
                Layer {
                    weights: Array2::zeros((2, 2)),
                    bias: Array1::zeros(2),
                },
                Layer {
                    weights: Array2::zeros((outputs, 2)),
                    bias: Array1::zeros(outputs),
                },
            ],
            0,
        )
        .unwrap()
    }

    fn chain_graph(ps: &PhoneSet, lex: &Lexicon, ws: &[String]) -> StateGraph {
        build_numerator_graph(ws, lex, ps, GraphStage::Bootstrap).unwrap()
    }

    #[test]
    fn uniform_posteriors_give_ln_s_frame_ce() {
        let ps = toy_phones();
        let lex = toy_lexicon(&ps);
        let net = constant_net(ps.num_states());
        let g = chain_graph(&ps, &lex, &words(&["x"]));
        let den = build_denominator_graph(&ps).unwrap();
        let f = Array2::zeros((6, 2));
        let hold = [HoldoutUtt {
            id: "u",
            features: f.view(),
            numerator: &g,
        }];
        let e = holdout_error(&Executor::sequential(), &net, &hold, &den, &ps, HoldoutMetric::FrameCe).unwrap();
        assert_abs_diff_eq!(e, (ps.num_states() as f64).ln(), epsilon = 1e-12);
        assert!(holdout_error(&Executor::sequential(), &net, &[], &den, &ps, HoldoutMetric::FrameCe).is_err());
    }

    #[test]
    fn perfect_agreement_gives_zero_disagreement() {
        // output strongly favours the true chain state per frame
        let ps = toy_phones();
        let lex = toy_lexicon(&ps);
        let ws = words(&["x"]);
        let chain = bootstrap_state_chain(&ws, &lex, &ps).unwrap();
        assert_eq!(chain, vec![0, 1, 0]);
        let net = Network::from_layers(
            vec![
                Layer {
                    weights: Array2::eye(2),
                    bias: Array1::zeros(2),
                },
                Layer {
                    weights: Array2::from_shape_vec((2, 2), vec![20.0, 0.0, 0.0, 20.0]).unwrap(),
                    bias: Array1::zeros(2),
                },
            ],
            0,
        )
        .unwrap();
        let states = [0, 0, 1, 1, 1, 0, 0];
        let f = Array2::from_shape_fn((states.len(), 2), |(t, d)| (d == states[t]) as u8 as f64);
        let g = chain_graph(&ps, &lex, &ws);
        let den = build_denominator_graph(&ps).unwrap();
        let hold = [HoldoutUtt {
            id: "u",
            features: f.view(),
            numerator: &g,
        }];
        let e = holdout_error(&Executor::sequential(), &net, &hold, &den, &ps, HoldoutMetric::MmiDisagreement)
            .unwrap();
        assert_eq!(e, 0.0);
    }

    /// Independent per-frame evaluation of the frame-CE metric on a toy set.
    #[test]
    fn frame_ce_matches_per_frame_loop() {
        let ps = toy_phones();
        let lex = toy_lexicon(&ps);
        let den = build_denominator_graph(&ps).unwrap();
        let net = init_network(&[3, 6, 2], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let graphs = [chain_graph(&ps, &lex, &words(&["x"])), chain_graph(&ps, &lex, &words(&["y", "x"]))];
        let feats = [random_features(&mut rng, 7, 3), random_features(&mut rng, 11, 3)];
        let hold: Vec<_> = feats
            .iter()
            .zip(&graphs)
            .map(|(f, g)| HoldoutUtt {
                id: "u",
                features: f.view(),
                numerator: g,
            })
            .collect();
        let got = holdout_error(&Executor::sequential(), &net, &hold, &den, &ps, HoldoutMetric::FrameCe).unwrap();
        let mut sum = 0.0;
        let mut frames = 0;
        for (f, g) in feats.iter().zip(&graphs) {
            let lp = net.log_posteriors(f.view()).unwrap();
            let occ = forward_backward(g, lp.view()).unwrap();
            for t in 0..f.nrows() {
                for s in 0..2 {
                    sum -= occ.gamma[[t, s]] * lp[[t, s]];
                }
                frames += 1;
            }
        }
        assert_abs_diff_eq!(got, sum / frames as f64, epsilon = 1e-12);
    }

    #[test]
    fn backoff_improving_errors_continue() {
        let mut net = init_network(&[2, 3, 2], 1).unwrap();
        let mut c = HoldoutController::new(&net, 0.1, DEFAULT_MAX_HALVINGS);
        for e in [0.5, 0.4, 0.3] {
            assert_eq!(holdout_backoff(&mut c, &mut net, e), Backoff::Continue);
        }
        assert_eq!(c.halvings, 0);
        assert_eq!(c.lr, 0.1);
    }

    #[test]
    fn backoff_restores_snapshot_and_halves() {
        let mut net = init_network(&[2, 3, 2], 1).unwrap();
        let mut c = HoldoutController::new(&net, 0.1, DEFAULT_MAX_HALVINGS);
        holdout_backoff(&mut c, &mut net, 0.5);
        let snapshot = net.clone();
        net.layers_mut()[0].weights[[0, 0]] += 1.0;
        assert_eq!(holdout_backoff(&mut c, &mut net, 0.6), Backoff::Restored);
        assert_eq!(net, snapshot);
        assert_eq!(c.lr, 0.05);
    }

    #[test]
    fn backoff_terminates_after_max_halvings() {
        let mut net = init_network(&[2, 3, 2], 1).unwrap();
        let mut c = HoldoutController::new(&net, 1.0, DEFAULT_MAX_HALVINGS);
        holdout_backoff(&mut c, &mut net, 0.5);
        let mut restores = 0;
        let mut last_lr = c.lr;
        while !c.is_finished() {
            assert_eq!(holdout_backoff(&mut c, &mut net, 0.6), Backoff::Restored);
            assert_eq!(c.lr, last_lr / 2.0);
            last_lr = c.lr;
            restores += 1;
        }
        assert_eq!(restores, DEFAULT_MAX_HALVINGS);
    }

    #[test]
    fn restored_net_reproduces_best_error() {
        let ps = toy_phones();
        let lex = toy_lexicon(&ps);
        let den = build_denominator_graph(&ps).unwrap();
        let g = chain_graph(&ps, &lex, &words(&["y"]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_features(&mut rng, 9, 3);
        let hold = [HoldoutUtt {
            id: "u",
            features: f.view(),
            numerator: &g,
        }];
        let exec = Executor::sequential();
        let mut net = init_network(&[3, 4, 2], 4).unwrap();
        let e0 = holdout_error(&exec, &net, &hold, &den, &ps, HoldoutMetric::FrameCe).unwrap();
        let mut c = HoldoutController::new(&net, 0.1, 8);
        holdout_backoff(&mut c, &mut net, e0);
        net.layers_mut()[1].bias[0] += 50.0;
        let e1 = holdout_error(&exec, &net, &hold, &den, &ps, HoldoutMetric::FrameCe).unwrap();
        assert!(e1 > e0);
        holdout_backoff(&mut c, &mut net, e1);
        let again = holdout_error(&exec, &net, &hold, &den, &ps, HoldoutMetric::FrameCe).unwrap();
        assert_eq!(again, c.best_error);
    }

    #[test]
    fn mode_strings_parse() {
        assert_eq!("full_fb".parse::<DenMode>().unwrap(), DenMode::FullFb);
        assert!("fb".parse::<DenMode>().is_err());
        assert_eq!("mmi_disagreement".parse::<HoldoutMetric>().unwrap(), HoldoutMetric::MmiDisagreement);
    }
}
