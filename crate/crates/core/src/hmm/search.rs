//! Forward-backward and Viterbi over [`StateGraph`]s.
//!
//! Time runs over frames `0..T`; epsilon nodes are evaluated at the
//! boundaries `0..=T` between frames, in epsilon-topological order. The entry
//! node is live only at boundary 0 and the exit is read at boundary T.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::hmm::alignment::Alignment;
use crate::hmm::graph::{NodeKind, StateGraph};
use crate::numerics::{log_add, LogProb};

const NONE: u32 = u32::MAX;

/// Per-frame state posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMatrix {
    /// `T × S`; each row sums to one.
    pub gamma: Array2<f64>,
    pub total_log_likelihood: LogProb,
}

impl OccupancyMatrix {
    pub fn num_frames(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.gamma.ncols()
    }

    /// Index of the largest entry of each row (lowest index on ties).
    pub fn argmax_states(&self) -> Vec<usize> {
        self.gamma
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_inputs(graph: &StateGraph, loglikes: &ArrayView2<f64>) -> Result<()> {
    if loglikes.ncols() < graph.state_span() {
        return Err(Error::Dimension(format!(
            "graph uses {} model states but loglikes have {} columns",
            graph.state_span(),
            loglikes.ncols()
        )));
    }
    if loglikes.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Dimension("loglikes contain NaN or +inf".into()));
    }
    let frames = loglikes.nrows();
    if frames < graph.min_frames() {
        return Err(Error::Infeasible {
            frames,
            min_frames: graph.min_frames(),
        });
    }
    Ok(())
}

fn emission_table(graph: &StateGraph) -> Vec<usize> {
    graph
        .nodes()
        .iter()
        .map(|k| match k {
            NodeKind::Emitting { state, .. } => *state,
            NodeKind::Epsilon => usize::MAX,
        })
        .collect()
}

/// State posteriors given the graph and per-frame state log-likelihoods.
///
/// `total_log_likelihood` is the log-sum over every entry-to-exit path of
/// exactly `T` frames.
pub fn forward_backward(graph: &StateGraph, loglikes: ArrayView2<f64>) -> Result<OccupancyMatrix> {
    check_inputs(graph, &loglikes)?;
    let frames = loglikes.nrows();
    let n = graph.nodes().len();
    let emit_state = emission_table(graph);
    let neg = f64::NEG_INFINITY;

    // alpha[t * n + e]: paths ending in emitting node e after emitting frame t.
    let mut alpha = vec![neg; frames * n];
    // eps_fwd[b * n + z]: paths reaching epsilon node z at boundary b.
    let mut eps_fwd = vec![neg; (frames + 1) * n];

    for b in 0..=frames {
        let eps = &mut eps_fwd[b * n..(b + 1) * n];
        if b == 0 {
            eps[graph.entry()] = 0.0;
        }
        for &z in graph.epsilon_order() {
            let mut acc = eps[z];
            for a in graph.in_arcs(z) {
                let src = if graph.is_emitting(a.from) {
                    if b == 0 {
                        continue;
                    }
                    alpha[(b - 1) * n + a.from]
                } else {
                    eps[a.from]
                };
                acc = log_add(acc, src + a.weight);
            }
            eps[z] = acc;
        }
        if b == frames {
            break;
        }
        let t = b;
        for &e in graph.emitting_nodes() {
            let mut acc = neg;
            for a in graph.in_arcs(e) {
                let src = if graph.is_emitting(a.from) {
                    if t == 0 {
                        continue;
                    }
                    alpha[(t - 1) * n + a.from]
                } else {
                    eps_fwd[t * n + a.from]
                };
                acc = log_add(acc, src + a.weight);
            }
            alpha[t * n + e] = acc + loglikes[[t, emit_state[e]]];
        }
    }

    let total = eps_fwd[frames * n + graph.exit()];
    if total == neg {
        return Err(Error::Infeasible {
            frames,
            min_frames: graph.min_frames(),
        });
    }

    // beta[t * n + e]: completions from emitting node e after frame t.
    let mut beta = vec![neg; frames * n];
    let mut eps_bwd = vec![neg; n];
    let reverse_eps: Vec<usize> = graph.epsilon_order().iter().rev().copied().collect();
    for b in (1..=frames).rev() {
        eps_bwd.iter_mut().for_each(|x| *x = neg);
        if b == frames {
            eps_bwd[graph.exit()] = 0.0;
        }
        for &z in &reverse_eps {
            let mut acc = eps_bwd[z];
            for a in graph.out_arcs(z) {
                let dst = if graph.is_emitting(a.to) {
                    if b == frames {
                        continue;
                    }
                    loglikes[[b, emit_state[a.to]]] + beta[b * n + a.to]
                } else {
                    eps_bwd[a.to]
                };
                acc = log_add(acc, dst + a.weight);
            }
            eps_bwd[z] = acc;
        }
        let t = b - 1;
        for &e in graph.emitting_nodes() {
            let mut acc = neg;
            for a in graph.out_arcs(e) {
                let dst = if graph.is_emitting(a.to) {
                    if b == frames {
                        continue;
                    }
                    loglikes[[b, emit_state[a.to]]] + beta[b * n + a.to]
                } else {
                    eps_bwd[a.to]
                };
                acc = log_add(acc, dst + a.weight);
            }
            beta[t * n + e] = acc;
        }
    }

    let mut gamma = Array2::<f64>::zeros((frames, loglikes.ncols()));
    for t in 0..frames {
        for &e in graph.emitting_nodes() {
            let lp = alpha[t * n + e] + beta[t * n + e] - total;
            if lp > neg {
                gamma[[t, emit_state[e]]] += lp.exp();
            }
        }
    }
    Ok(OccupancyMatrix {
        gamma,
        total_log_likelihood: LogProb(total),
    })
}

/// The best single path through a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BestPath {
    /// Emitting node occupied at each frame.
    pub nodes: Vec<usize>,
    /// Model state emitted at each frame.
    pub states: Vec<usize>,
    pub score: LogProb,
}

/// Best entry-to-exit path of exactly `T` frames.
///
/// Scores accumulate left to right: each arc weight is added in path order
/// and a frame's emission is added on arrival at its emitting node. Among
/// equally scored paths the winner has the lower model-state index at the
/// latest frame where the competing state sequences differ; paths with
/// identical state sequences fall back to the lower predecessor node id.
pub fn viterbi_path(graph: &StateGraph, loglikes: ArrayView2<f64>) -> Result<BestPath> {
    check_inputs(graph, &loglikes)?;
    let frames = loglikes.nrows();
    let n = graph.nodes().len();
    let emit_state = emission_table(graph);
    let neg = f64::NEG_INFINITY;

    let mut score_emit = vec![neg; frames * n];
    let mut bp_emit = vec![NONE; frames * n];
    let mut score_eps = vec![neg; (frames + 1) * n];
    let mut bp_eps = vec![NONE; (frames + 1) * n];

    // A traceback point: an emitting node at a frame, or an epsilon node at a boundary.
    #[derive(Clone, Copy, PartialEq)]
    struct Point {
        node: usize,
        layer: usize,
    }

    let tables = |bp_emit: &[u32], bp_eps: &[u32], p: Point| -> Option<Point> {
        let pred = if graph.is_emitting(p.node) {
            bp_emit[p.layer * n + p.node]
        } else {
            bp_eps[p.layer * n + p.node]
        };
        if pred == NONE {
            return None;
        }
        let pred = pred as usize;
        // emitting predecessors live one frame back from boundaries and
        // from frames alike; epsilon predecessors share the boundary index
        let layer = if graph.is_emitting(pred) { p.layer - 1 } else { p.layer };
        Some(Point { node: pred, layer })
    };

    // Latest emitting point at or before `p` on its best path.
    let emitting_at_or_before = |bp_emit: &[u32], bp_eps: &[u32], mut p: Option<Point>| {
        while let Some(q) = p {
            if graph.is_emitting(q.node) {
                return Some(q);
            }
            p = tables(bp_emit, bp_eps, q);
        }
        None
    };

    // Compares the histories ending at candidate predecessors `a` and `b`.
    let compare = |bp_emit: &[u32], bp_eps: &[u32], a: Point, b: Point| -> Ordering {
        let mut x = emitting_at_or_before(bp_emit, bp_eps, Some(a));
        let mut y = emitting_at_or_before(bp_emit, bp_eps, Some(b));
        loop {
            match (x, y) {
                (None, None) => return Ordering::Equal,
                (Some(p), Some(q)) => {
                    debug_assert_eq!(p.layer, q.layer);
                    if p.node == q.node {
                        return Ordering::Equal;
                    }
                    match emit_state[p.node].cmp(&emit_state[q.node]) {
                        Ordering::Equal => {}
                        other => return other,
                    }
                    x = emitting_at_or_before(bp_emit, bp_eps, tables(bp_emit, bp_eps, p));
                    y = emitting_at_or_before(bp_emit, bp_eps, tables(bp_emit, bp_eps, q));
                }
                // cannot happen for equal-length histories
                (Some(_), None) => return Ordering::Greater,
                (None, Some(_)) => return Ordering::Less,
            }
        }
    };

    for b in 0..=frames {
        if b == 0 {
            score_eps[graph.entry()] = 0.0;
        }
        for &z in graph.epsilon_order() {
            if b == 0 && z == graph.entry() {
                continue;
            }
            let mut best = neg;
            let mut best_pred: Option<Point> = None;
            for a in graph.in_arcs(z) {
                let pred = if graph.is_emitting(a.from) {
                    if b == 0 {
                        continue;
                    }
                    Point { node: a.from, layer: b - 1 }
                } else {
                    Point { node: a.from, layer: b }
                };
                let src = if graph.is_emitting(pred.node) {
                    score_emit[pred.layer * n + pred.node]
                } else {
                    score_eps[pred.layer * n + pred.node]
                };
                if src == neg {
                    continue;
                }
                let s = src + a.weight;
                let better = match best_pred {
                    None => true,
                    Some(bp) => {
                        s > best
                            || (s == best
                                && match compare(&bp_emit, &bp_eps, pred, bp) {
                                    Ordering::Less => true,
                                    Ordering::Equal => pred.node < bp.node,
                                    Ordering::Greater => false,
                                })
                    }
                };
                if better {
                    best = s;
                    best_pred = Some(pred);
                }
            }
            if let Some(p) = best_pred {
                score_eps[b * n + z] = best;
                bp_eps[b * n + z] = p.node as u32;
            }
        }
        if b == frames {
            break;
        }
        let t = b;
        for &e in graph.emitting_nodes() {
            let mut best = neg;
            let mut best_pred: Option<Point> = None;
            for a in graph.in_arcs(e) {
                let pred = if graph.is_emitting(a.from) {
                    if t == 0 {
                        continue;
                    }
                    Point { node: a.from, layer: t - 1 }
                } else {
                    Point { node: a.from, layer: t }
                };
                let src = if graph.is_emitting(pred.node) {
                    score_emit[pred.layer * n + pred.node]
                } else {
                    score_eps[pred.layer * n + pred.node]
                };
                if src == neg {
                    continue;
                }
                let s = src + a.weight;
                let better = match best_pred {
                    None => true,
                    Some(bp) => {
                        s > best
                            || (s == best
                                && match compare(&bp_emit, &bp_eps, pred, bp) {
                                    Ordering::Less => true,
                                    Ordering::Equal => pred.node < bp.node,
                                    Ordering::Greater => false,
                                })
                    }
                };
                if better {
                    best = s;
                    best_pred = Some(pred);
                }
            }
            if let Some(p) = best_pred {
                let s = best + loglikes[[t, emit_state[e]]];
                if s > neg {
                    score_emit[t * n + e] = s;
                    bp_emit[t * n + e] = p.node as u32;
                }
            }
        }
    }

    let score = score_eps[frames * n + graph.exit()];
    if score == neg {
        return Err(Error::Infeasible {
            frames,
            min_frames: graph.min_frames(),
        });
    }

    let mut nodes = vec![0usize; frames];
    let mut p = Some(Point {
        node: graph.exit(),
        layer: frames,
    });
    while let Some(q) = p {
        if graph.is_emitting(q.node) {
            nodes[q.layer] = q.node;
        }
        p = tables(&bp_emit, &bp_eps, q);
    }
    let states = nodes.iter().map(|&v| emit_state[v]).collect();
    Ok(BestPath {
        nodes,
        states,
        score: LogProb(score),
    })
}

/// Best path as an [`Alignment`] plus its log score.
pub fn viterbi(graph: &StateGraph, loglikes: ArrayView2<f64>) -> Result<(Alignment, LogProb)> {
    let path = viterbi_path(graph, loglikes)?;
    Ok((Alignment::from_frame_states(&path.states), path.score))
}

/// Phone sequence traversed by a node path: a phone starts whenever the
/// path enters the first state of a phone HMM from another node.
pub fn decoded_phones(graph: &StateGraph, nodes: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (t, &v) in nodes.iter().enumerate() {
        if let NodeKind::Emitting { phone, pos: 0, .. } = graph.nodes()[v] {
            if t == 0 || nodes[t - 1] != v {
                out.push(phone);
            }
        }
    }
    out
}

/// Hard occupancies: one-hot rows following the alignment.
pub fn occupancy_from_alignment(alignment: &Alignment, num_states: usize) -> OccupancyMatrix {
    let frames = alignment.num_frames();
    let mut gamma = Array2::<f64>::zeros((frames, num_states));
    for s in alignment.segments() {
        for t in s.start..s.end {
            gamma[[t, s.state]] = 1.0;
        }
    }
    OccupancyMatrix {
        gamma,
        total_log_likelihood: LogProb::ONE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::graph::{build_denominator_graph, Arc, GraphBuilder};
    use crate::hmm::phones::PhoneSet;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn single_state_graph() -> StateGraph {
        let mut b = GraphBuilder::new();
        let entry = b.epsilon();
        let exit = b.epsilon();
        let s = b.emitting(0, 0, 0);
        b.arc(entry, s, 1.0);
        b.arc(s, s, 0.5);
        b.arc(s, exit, 0.5);
        b.finish(entry, exit).unwrap()
    }

    /// entry -> s0 -> s1 -> exit, strict left to right with self-loops.
    fn two_state_chain() -> StateGraph {
        let mut b = GraphBuilder::new();
        let entry = b.epsilon();
        let exit = b.epsilon();
        let s0 = b.emitting(0, 0, 0);
        let s1 = b.emitting(1, 0, 1);
        b.arc(entry, s0, 1.0);
        b.arc(s0, s0, 0.5);
        b.arc(s0, s1, 0.5);
        b.arc(s1, s1, 0.5);
        b.arc(s1, exit, 0.5);
        b.finish(entry, exit).unwrap()
    }

    #[test]
    fn single_state_occupancy_is_one() {
        let g = single_state_graph();
        let ll = array![[-3.0], [-0.1], [-7.5], [-2.0]];
        let occ = forward_backward(&g, ll.view()).unwrap();
        for t in 0..4 {
            assert_abs_diff_eq!(occ.gamma[[t, 0]], 1.0, epsilon = 1e-12);
        }
        let (ali, score) = viterbi(&g, ll.view()).unwrap();
        assert_eq!(ali.segments().len(), 1);
        assert_eq!(ali.num_frames(), 4);
        assert!(score.value() <= occ.total_log_likelihood.value());
        assert_abs_diff_eq!(score.value(), occ.total_log_likelihood.value(), epsilon = 1e-12);
    }

    #[test]
    fn two_state_chain_matches_path_enumeration() {
        // T = 3: valid state sequences are 0 0 1 and 0 1 1.
        let g = two_state_chain();
        let ll = array![[-0.2, -1.7], [-0.9, -0.4], [-2.2, -0.3]];
        let p001 = 0.5f64.ln() * 3.0 + (-0.2 - 0.9 - 0.3);
        let p011 = 0.5f64.ln() * 3.0 + (-0.2 - 0.4 - 0.3);
        let z = log_add(p001, p011);
        let w001 = (p001 - z).exp();
        let expected = [[1.0, 0.0], [w001, 1.0 - w001], [0.0, 1.0]];
        let occ = forward_backward(&g, ll.view()).unwrap();
        for t in 0..3 {
            for s in 0..2 {
                assert_abs_diff_eq!(occ.gamma[[t, s]], expected[t][s], epsilon = 1e-10);
            }
        }
        assert_abs_diff_eq!(occ.total_log_likelihood.value(), z, epsilon = 1e-12);
        let (ali, score) = viterbi(&g, ll.view()).unwrap();
        assert_eq!(ali.frame_states(), vec![0, 1, 1]);
        assert_abs_diff_eq!(score.value(), p011, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_graph_gives_symmetric_occupancy() {
        // Two single-state branches in parallel; swapping them is an automorphism.
        let mut b = GraphBuilder::new();
        let entry = b.epsilon();
        let exit = b.epsilon();
        let x = b.emitting(0, 0, 0);
        let y = b.emitting(1, 1, 0);
        for v in [x, y] {
            b.arc(entry, v, 0.5);
            b.arc(v, v, 0.5);
            b.arc(v, exit, 0.5);
        }
        let g = b.finish(entry, exit).unwrap();
        let ll = Array2::from_elem((5, 2), -1.3);
        let occ = forward_backward(&g, ll.view()).unwrap();
        for t in 0..5 {
            assert_abs_diff_eq!(occ.gamma[[t, 0]], occ.gamma[[t, 1]], epsilon = 1e-12);
        }
        // exact tie: lower state wins
        let (ali, _) = viterbi(&g, ll.view()).unwrap();
        assert_eq!(ali.frame_states(), vec![0; 5]);
    }

    #[test]
    fn too_short_is_infeasible() {
        let g = two_state_chain();
        let ll = array![[-1.0, -1.0]];
        assert!(matches!(
            forward_backward(&g, ll.view()),
            Err(Error::Infeasible { frames: 1, min_frames: 2 })
        ));
        assert!(matches!(viterbi(&g, ll.view()), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn impossible_emissions_are_infeasible() {
        let g = two_state_chain();
        let ll = array![[f64::NEG_INFINITY, 0.0], [0.0, 0.0]];
        assert!(matches!(forward_backward(&g, ll.view()), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn rejects_narrow_loglikes() {
        let g = two_state_chain();
        let ll = array![[-1.0], [-1.0]];
        assert!(matches!(forward_backward(&g, ll.view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn occupancy_from_alignment_examples() {
        let ali = Alignment::new(vec![crate::hmm::alignment::Segment {
            state: 2,
            start: 0,
            end: 3,
        }])
        .unwrap();
        let occ = occupancy_from_alignment(&ali, 4);
        assert_eq!(occ.gamma, array![[0., 0., 1., 0.], [0., 0., 1., 0.], [0., 0., 1., 0.]]);
        let empty = occupancy_from_alignment(&Alignment::default(), 4);
        assert_eq!(empty.gamma.dim(), (0, 4));
    }

    #[test]
    fn decoded_phones_from_loop() {
        let ps = PhoneSet::new(vec!["!SIL".into(), "a".into()], "!SIL", None, 1).unwrap();
        let g = build_denominator_graph(&ps).unwrap();
        // strongly prefer a, a, sil
        let ll = array![[-9.0, 0.0], [-9.0, 0.0], [0.0, -9.0]];
        let path = viterbi_path(&g, ll.view()).unwrap();
        assert_eq!(path.states, vec![1, 1, 0]);
        // a self-loop (0.5) beats re-entering a (0.5 * 0.5)
        assert_eq!(decoded_phones(&g, &path.nodes), vec![1, 0]);
        let occ = forward_backward(&g, ll.view()).unwrap();
        assert!(path.score.value() <= occ.total_log_likelihood.value());
    }

    #[test]
    fn viterbi_score_recomputes_exactly() {
        let g = two_state_chain();
        let ll = array![[-0.7, -1.1], [-0.3, -0.2], [-1.9, -0.6], [-0.5, -0.25]];
        let path = viterbi_path(&g, ll.view()).unwrap();
        let mut s = 0.0;
        let mut prev = g.entry();
        for (t, &v) in path.nodes.iter().enumerate() {
            let arc: &Arc = g.out_arcs(prev).find(|a| a.to == v).unwrap();
            s += arc.weight;
            s += ll[[t, path.states[t]]];
            prev = v;
        }
        s += g.out_arcs(prev).find(|a| a.to == g.exit()).unwrap().weight;
        assert_eq!(s, path.score.value());
    }
}
