//! HMM state graphs.
//!
//! A graph is a set of emitting nodes (each bound to a model state) and
//! non-emitting epsilon nodes joined by weighted arcs. Epsilon nodes are
//! traversed without consuming a frame; the epsilon subgraph must be acyclic.
//! Outgoing weights of emitting nodes form a distribution; epsilon nodes
//! carry unnormalized weights (the phone-loop back-arc and exit both weigh 1).

use crate::error::{Error, Result};
use crate::hmm::phones::{Lexicon, PhoneSet};

pub const SELF_LOOP_PROB: f64 = 0.5;
pub const FORWARD_PROB: f64 = 0.5;
pub const SHORT_PAUSE_SKIP_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Emitting {
        state: usize,
        phone: usize,
        pos: usize,
    },
    Epsilon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    /// Natural-log transition weight.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphStage {
    /// First pronunciation per word, no short pauses.
    Bootstrap,
    /// All pronunciation alternatives and an optional short pause between words.
    Refined,
}

impl std::str::FromStr for GraphStage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bootstrap" => Ok(GraphStage::Bootstrap),
            "refined" => Ok(GraphStage::Refined),
            other => Err(format!("unknown graph stage `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateGraph {
    nodes: Vec<NodeKind>,
    arcs: Vec<Arc>,
    entry: usize,
    exit: usize,
    in_arcs: Vec<Vec<usize>>,
    out_arcs: Vec<Vec<usize>>,
    emitting: Vec<usize>,
    epsilon_order: Vec<usize>,
    min_frames: usize,
}

impl StateGraph {
    /// Validates and indexes a graph. `entry` and `exit` must be epsilon nodes.
    pub fn new(nodes: Vec<NodeKind>, arcs: Vec<Arc>, entry: usize, exit: usize) -> Result<Self> {
        let n = nodes.len();
        if entry >= n || exit >= n || entry == exit {
            return Err(Error::Graph("bad entry/exit node".into()));
        }
        if nodes[entry] != NodeKind::Epsilon || nodes[exit] != NodeKind::Epsilon {
            return Err(Error::Graph("entry and exit must be non-emitting".into()));
        }
        let mut in_arcs = vec![Vec::new(); n];
        let mut out_arcs = vec![Vec::new(); n];
        for (i, a) in arcs.iter().enumerate() {
            if a.from >= n || a.to >= n {
                return Err(Error::Graph(format!("arc {i} references a missing node")));
            }
            if a.weight.is_nan() || a.weight > 1e-12 {
                return Err(Error::Graph(format!("arc {i} has weight {}", a.weight)));
            }
            if a.to == entry || a.from == exit {
                return Err(Error::Graph("arcs may not enter the entry or leave the exit".into()));
            }
            if a.from == a.to && nodes[a.from] == NodeKind::Epsilon {
                return Err(Error::Graph("epsilon self-loop".into()));
            }
            out_arcs[a.from].push(i);
            in_arcs[a.to].push(i);
        }

        let emitting: Vec<usize> = (0..n)
            .filter(|&i| matches!(nodes[i], NodeKind::Emitting { .. }))
            .collect();
        for &e in &emitting {
            let total: f64 = out_arcs[e].iter().map(|&a| arcs[a].weight.exp()).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Graph(format!(
                    "outgoing transitions of node {e} sum to {total}"
                )));
            }
        }

        let epsilon_order = epsilon_topological_order(&nodes, &arcs, &in_arcs)?;

        let mut graph = StateGraph {
            nodes,
            arcs,
            entry,
            exit,
            in_arcs,
            out_arcs,
            emitting,
            epsilon_order,
            min_frames: 0,
        };
        graph.check_connected()?;
        graph.min_frames = graph.shortest_path_frames();
        Ok(graph)
    }

    pub fn nodes(&self) -> &[NodeKind] {
        &self.nodes
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    pub fn exit(&self) -> usize {
        self.exit
    }

    pub fn in_arcs(&self, node: usize) -> impl Iterator<Item = &Arc> {
        self.in_arcs[node].iter().map(|&a| &self.arcs[a])
    }

    pub fn out_arcs(&self, node: usize) -> impl Iterator<Item = &Arc> {
        self.out_arcs[node].iter().map(|&a| &self.arcs[a])
    }

    /// Emitting node ids in increasing order.
    pub fn emitting_nodes(&self) -> &[usize] {
        &self.emitting
    }

    pub fn num_emitting(&self) -> usize {
        self.emitting.len()
    }

    /// Epsilon nodes ordered so that every epsilon-to-epsilon arc points forward.
    pub fn epsilon_order(&self) -> &[usize] {
        &self.epsilon_order
    }

    pub fn is_emitting(&self, node: usize) -> bool {
        matches!(self.nodes[node], NodeKind::Emitting { .. })
    }

    pub fn model_state(&self, node: usize) -> Option<usize> {
        match self.nodes[node] {
            NodeKind::Emitting { state, .. } => Some(state),
            NodeKind::Epsilon => None,
        }
    }

    /// Largest model-state index used plus one.
    pub fn state_span(&self) -> usize {
        self.emitting
            .iter()
            .filter_map(|&e| self.model_state(e))
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Fewest frames on any entry-to-exit path.
    pub fn min_frames(&self) -> usize {
        self.min_frames
    }

    /// The same graph with every arc reversed and entry/exit swapped.
    pub fn reversed(&self) -> Result<StateGraph> {
        let arcs = self
            .arcs
            .iter()
            .map(|a| Arc {
                from: a.to,
                to: a.from,
                weight: a.weight,
            })
            .collect();
        // Reversal breaks per-node normalization, so index without re-checking it.
        let n = self.nodes.len();
        let arcs: Vec<Arc> = arcs;
        let mut in_arcs = vec![Vec::new(); n];
        let mut out_arcs = vec![Vec::new(); n];
        for (i, a) in arcs.iter().enumerate() {
            out_arcs[a.from].push(i);
            in_arcs[a.to].push(i);
        }
        let epsilon_order = epsilon_topological_order(&self.nodes, &arcs, &in_arcs)?;
        let mut g = StateGraph {
            nodes: self.nodes.clone(),
            arcs,
            entry: self.exit,
            exit: self.entry,
            in_arcs,
            out_arcs,
            emitting: self.emitting.clone(),
            epsilon_order,
            min_frames: 0,
        };
        g.min_frames = g.shortest_path_frames();
        Ok(g)
    }

    /// True when some entry-to-exit path emits exactly `states`, frame by frame.
    pub fn accepts(&self, states: &[usize]) -> bool {
        let n = self.nodes.len();
        let mut eps = vec![false; n];
        let mut cur = vec![false; n];
        for t in 0..=states.len() {
            eps.iter_mut().for_each(|x| *x = false);
            if t == 0 {
                eps[self.entry] = true;
            }
            for &z in &self.epsilon_order {
                if eps[z] {
                    continue;
                }
                eps[z] = self.in_arcs(z).any(|a| {
                    if self.is_emitting(a.from) {
                        t > 0 && cur[a.from]
                    } else {
                        eps[a.from]
                    }
                });
            }
            if t == states.len() {
                return eps[self.exit];
            }
            let mut next = vec![false; n];
            for &e in &self.emitting {
                if self.model_state(e) != Some(states[t]) {
                    continue;
                }
                next[e] = self.in_arcs(e).any(|a| {
                    if self.is_emitting(a.from) {
                        t > 0 && cur[a.from]
                    } else {
                        eps[a.from]
                    }
                });
            }
            cur = next;
        }
        unreachable!()
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.nodes.len();
        let reach = |start: usize, forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                let next: Vec<usize> = if forward {
                    self.out_arcs(v).map(|a| a.to).collect()
                } else {
                    self.in_arcs(v).map(|a| a.from).collect()
                };
                for u in next {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            seen
        };
        let fwd = reach(self.entry, true);
        let bwd = reach(self.exit, false);
        if let Some(&bad) = self.emitting.iter().find(|&&e| !(fwd[e] && bwd[e])) {
            return Err(Error::Graph(format!(
                "emitting node {bad} is not on any entry-to-exit path"
            )));
        }
        if !fwd[self.exit] {
            return Err(Error::Graph("exit unreachable from entry".into()));
        }
        Ok(())
    }

    /// 0-1 BFS: emitting nodes cost one frame, epsilon nodes none.
    fn shortest_path_frames(&self) -> usize {
        let n = self.nodes.len();
        let mut dist = vec![usize::MAX; n];
        let mut deque = std::collections::VecDeque::new();
        dist[self.entry] = 0;
        deque.push_back(self.entry);
        while let Some(v) = deque.pop_front() {
            for a in self.out_arcs(v) {
                let cost = usize::from(self.is_emitting(a.to));
                let d = dist[v] + cost;
                if d < dist[a.to] {
                    dist[a.to] = d;
                    if cost == 0 {
                        deque.push_front(a.to);
                    } else {
                        deque.push_back(a.to);
                    }
                }
            }
        }
        dist[self.exit]
    }
}

fn epsilon_topological_order(
    nodes: &[NodeKind],
    arcs: &[Arc],
    in_arcs: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let n = nodes.len();
    let is_eps = |i: usize| nodes[i] == NodeKind::Epsilon;
    let mut indegree = vec![0usize; n];
    for a in arcs {
        if is_eps(a.from) && is_eps(a.to) {
            indegree[a.to] += 1;
        }
    }
    let mut order = Vec::new();
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| is_eps(i) && indegree[i] == 0).collect();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (v, ins) in in_arcs.iter().enumerate() {
        for &ai in ins {
            let a = &arcs[ai];
            if is_eps(a.from) && is_eps(v) {
                out[a.from].push(v);
            }
        }
    }
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &u in &out[v] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    let eps_count = (0..n).filter(|&i| is_eps(i)).count();
    if order.len() != eps_count {
        return Err(Error::Graph("epsilon subgraph contains a cycle".into()));
    }
    Ok(order)
}

/// Incremental graph construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<NodeKind>,
    arcs: Vec<Arc>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    pub fn epsilon(&mut self) -> usize {
        self.nodes.push(NodeKind::Epsilon);
        self.nodes.len() - 1
    }

    pub fn emitting(&mut self, state: usize, phone: usize, pos: usize) -> usize {
        self.nodes.push(NodeKind::Emitting { state, phone, pos });
        self.nodes.len() - 1
    }

    pub fn arc(&mut self, from: usize, to: usize, prob: f64) {
        self.arcs.push(Arc {
            from,
            to,
            weight: prob.ln(),
        });
    }

    /// Adds one phone HMM; returns its (first, last) emitting nodes. The last
    /// state's forward probability is left for the caller to attach.
    pub fn phone_hmm(&mut self, phones: &PhoneSet, phone: usize) -> (usize, usize) {
        let len = phones.hmm_len(phone);
        let ids: Vec<usize> = (0..len)
            .map(|pos| self.emitting(phones.model_state(phone, pos), phone, pos))
            .collect();
        for (i, &id) in ids.iter().enumerate() {
            self.arc(id, id, SELF_LOOP_PROB);
            if i + 1 < len {
                self.arc(id, ids[i + 1], FORWARD_PROB);
            }
        }
        (ids[0], ids[len - 1])
    }

    pub fn finish(self, entry: usize, exit: usize) -> Result<StateGraph> {
        StateGraph::new(self.nodes, self.arcs, entry, exit)
    }
}

/// Probability of entering any one branch of the free phone loop. Numerator
/// graphs apply the same factor at every phone entry so that each numerator
/// path carries exactly its denominator weight.
pub fn phone_entry_prob(phones: &PhoneSet) -> f64 {
    1.0 / phones.num_phones() as f64
}

/// Forced-alignment graph for one transcript.
///
/// Utterances always begin and end in silence. At the bootstrap stage each
/// word contributes its first pronunciation and words abut directly; at the
/// refined stage all alternatives are parallel branches (equal weight) and an
/// optional short pause sits between consecutive words.
pub fn build_numerator_graph(
    transcript: &[String],
    lexicon: &Lexicon,
    phones: &PhoneSet,
    stage: GraphStage,
) -> Result<StateGraph> {
    let entry_p = phone_entry_prob(phones);
    let mut b = GraphBuilder::new();
    let entry = b.epsilon();
    let exit = b.epsilon();

    let (sil_first, sil_last) = b.phone_hmm(phones, phones.silence());
    b.arc(entry, sil_first, entry_p);
    let mut junction = b.epsilon();
    b.arc(sil_last, junction, FORWARD_PROB);

    for (w, word) in transcript.iter().enumerate() {
        let prons = lexicon.pronunciations(word)?;
        let prons = match stage {
            GraphStage::Bootstrap => &prons[..1],
            GraphStage::Refined => prons,
        };
        let alt_p = 1.0 / prons.len() as f64;
        let word_end = b.epsilon();
        for pron in prons {
            let mut prev: Option<usize> = None;
            for (i, &phone) in pron.iter().enumerate() {
                let (first, last) = b.phone_hmm(phones, phone);
                match prev {
                    None => b.arc(junction, first, alt_p * entry_p),
                    Some(p) => b.arc(p, first, entry_p),
                }
                if i + 1 == pron.len() {
                    b.arc(last, word_end, FORWARD_PROB);
                } else {
                    let j = b.epsilon();
                    b.arc(last, j, FORWARD_PROB);
                    prev = Some(j);
                }
            }
        }
        junction = word_end;

        let is_last = w + 1 == transcript.len();
        if stage == GraphStage::Refined && !is_last {
            if let Some(sp) = phones.short_pause() {
                let after = b.epsilon();
                let (first, last) = b.phone_hmm(phones, sp);
                b.arc(junction, first, (1.0 - SHORT_PAUSE_SKIP_PROB) * entry_p);
                b.arc(last, after, FORWARD_PROB);
                b.arc(junction, after, SHORT_PAUSE_SKIP_PROB);
                junction = after;
            }
        }
    }

    let (sil_first, sil_last) = b.phone_hmm(phones, phones.silence());
    b.arc(junction, sil_first, entry_p);
    b.arc(sil_last, exit, FORWARD_PROB);
    b.finish(entry, exit)
}

/// Free phone loop: every phone HMM (short pause included) in parallel
/// between a loop-start and a loop-end node, uniform entry weights, and a
/// weight-one back-arc. No language model or priors.
pub fn build_denominator_graph(phones: &PhoneSet) -> Result<StateGraph> {
    let entry_p = phone_entry_prob(phones);
    let mut b = GraphBuilder::new();
    let entry = b.epsilon();
    let exit = b.epsilon();
    let loop_start = b.epsilon();
    let loop_end = b.epsilon();
    b.arc(entry, loop_start, 1.0);
    for phone in 0..phones.num_phones() {
        let (first, last) = b.phone_hmm(phones, phone);
        b.arc(loop_start, first, entry_p);
        b.arc(last, loop_end, FORWARD_PROB);
    }
    b.arc(loop_end, loop_start, 1.0);
    b.arc(loop_end, exit, 1.0);
    b.finish(entry, exit)
}

/// Bootstrap chain of model states: silence, the first pronunciation of each
/// word, silence.
pub fn bootstrap_state_chain(
    transcript: &[String],
    lexicon: &Lexicon,
    phones: &PhoneSet,
) -> Result<Vec<usize>> {
    let mut chain = Vec::new();
    let push_phone = |p: usize, chain: &mut Vec<usize>| {
        for pos in 0..phones.hmm_len(p) {
            chain.push(phones.model_state(p, pos));
        }
    };
    push_phone(phones.silence(), &mut chain);
    for word in transcript {
        for &p in &lexicon.pronunciations(word)?[0] {
            push_phone(p, &mut chain);
        }
    }
    push_phone(phones.silence(), &mut chain);
    Ok(chain)
}
