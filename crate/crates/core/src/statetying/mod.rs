//! Decision-tree tying of context-dependent state variants, with a
//! KL-divergence split criterion over network posteriors.

mod cost;
mod questions;
mod tree;

pub use cost::{cluster_cost, Centroid, CostOptions, KlDirection};
pub use questions::{default_questions, load_questions, parse_questions, questions_to_text, Question, Side};
pub use tree::{
    best_split, build_tie_tree, cd_alignments, cd_alignments_to_text, tied_state_map_text, Split, TieBuild,
    TieOptions, TieTree, TreeNode, DEFAULT_MIN_GAIN,
};

use std::collections::BTreeMap;
use std::fmt;

use crate::corpus::Corpus;
use crate::dnn::Network;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::flatstart::network_features;
use crate::hmm::{phone_spans, Alignments, PhoneSet};
use crate::numerics::Distribution;

/// Symbol written for utterance-edge contexts.
pub const BOUNDARY_SYMBOL: &str = "#";

/// A neighbouring phone, or the utterance edge. Boundary sorts first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Context {
    Boundary,
    Phone(usize),
}

impl Context {
    pub fn symbol<'a>(&self, phones: &'a PhoneSet) -> &'a str {
        match self {
            Context::Boundary => BOUNDARY_SYMBOL,
            Context::Phone(p) => phones.symbol(*p),
        }
    }

    pub fn parse(symbol: &str, phones: &PhoneSet) -> Result<Self> {
        if symbol == BOUNDARY_SYMBOL {
            return Ok(Context::Boundary);
        }
        phones
            .phone_index(symbol)
            .map(Context::Phone)
            .ok_or_else(|| Error::PhoneSet(format!("unknown context phone `{symbol}`")))
    }
}

/// One state of a phone in a specific left/right phone context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextVariant {
    pub center: usize,
    pub pos: usize,
    pub left: Context,
    pub right: Context,
}

impl ContextVariant {
    pub fn display<'a>(&'a self, phones: &'a PhoneSet) -> impl fmt::Display + 'a {
        struct D<'a>(&'a ContextVariant, &'a PhoneSet);
        impl fmt::Display for D<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let (v, ps) = (self.0, self.1);
                write!(
                    f,
                    "{}-{}+{}[{}]",
                    v.left.symbol(ps),
                    ps.symbol(v.center),
                    v.right.symbol(ps),
                    v.pos
                )
            }
        }
        D(self, phones)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantStats {
    pub count: usize,
    pub mean_posterior: Distribution,
}

/// Per-variant frame counts and mean posteriors over CI model states.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub num_states: usize,
    pub variants: BTreeMap<ContextVariant, VariantStats>,
}

impl PosteriorStats {
    pub fn total_count(&self) -> usize {
        self.variants.values().map(|v| v.count).sum()
    }
}

/// Unnormalised sums, mergeable across utterances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialStats {
    pub sums: BTreeMap<ContextVariant, (usize, Vec<f64>)>,
}

impl PartialStats {
    pub fn add_frame(&mut self, v: ContextVariant, posterior: impl IntoIterator<Item = f64>) {
        let entry = self.sums.entry(v).or_insert_with(|| (0, Vec::new()));
        entry.0 += 1;
        let post: Vec<f64> = posterior.into_iter().collect();
        if entry.1.is_empty() {
            entry.1 = post;
        } else {
            for (a, b) in entry.1.iter_mut().zip(post) {
                *a += b;
            }
        }
    }

    pub fn merge(&mut self, other: PartialStats) {
        for (v, (n, sum)) in other.sums {
            match self.sums.get_mut(&v) {
                Some((m, acc)) => {
                    *m += n;
                    for (a, b) in acc.iter_mut().zip(sum) {
                        *a += b;
                    }
                }
                None => {
                    self.sums.insert(v, (n, sum));
                }
            }
        }
    }

    pub fn finalize(self, num_states: usize) -> Result<PosteriorStats> {
        let mut variants = BTreeMap::new();
        for (v, (count, sum)) in self.sums {
            if sum.len() != num_states {
                return Err(Error::Dimension(format!(
                    "posterior sums have {} states, expected {num_states}",
                    sum.len()
                )));
            }
            variants.insert(
                v,
                VariantStats {
                    count,
                    mean_posterior: Distribution::normalized(sum)?,
                },
            );
        }
        Ok(PosteriorStats { num_states, variants })
    }
}

/// Context variant of every frame of a state sequence. Contexts come from
/// neighbouring phone occurrences; utterance edges give [`Context::Boundary`].
pub fn frame_variants(states: &[usize], phones: &PhoneSet) -> Vec<ContextVariant> {
    let spans = phone_spans(states, phones);
    let mut out = Vec::with_capacity(states.len());
    for (i, span) in spans.iter().enumerate() {
        let left = if i == 0 { Context::Boundary } else { Context::Phone(spans[i - 1].phone) };
        let right = spans.get(i + 1).map_or(Context::Boundary, |s| Context::Phone(s.phone));
        for &state in &states[span.start..span.end] {
            out.push(ContextVariant {
                center: span.phone,
                pos: phones.state_position(state),
                left,
                right,
            });
        }
    }
    out
}

/// Accumulates the network's posterior rows per context variant.
/// Utterances without an alignment (e.g. skipped during training) are left out.
pub fn accumulate_stats(
    exec: &Executor,
    net: &Network,
    corpus: &Corpus,
    alignments: &Alignments,
) -> Result<PosteriorStats> {
    let num_states = corpus.phones.num_states();
    if net.output_dim() != num_states {
        return Err(Error::Dimension(format!(
            "network has {} outputs, phone set has {num_states} states",
            net.output_dim()
        )));
    }
    let feats = network_features(corpus, net)?;
    let parts = exec.map_indexed(corpus.utterances.len(), |i| -> Result<PartialStats> {
        let u = &corpus.utterances[i];
        let mut part = PartialStats::default();
        let Some(ali) = alignments.get(&u.id) else { return Ok(part) };
        if ali.num_frames() != u.num_frames() {
            return Err(Error::Utterance {
                utt: u.id.clone(),
                msg: format!(
                    "alignment covers {} frames, features have {}",
                    ali.num_frames(),
                    u.num_frames()
                ),
            });
        }
        let (post, _) = net.forward(feats[i].view())?;
        let variants = frame_variants(&ali.frame_states(), &corpus.phones);
        for (v, row) in variants.into_iter().zip(post.rows()) {
            part.add_frame(v, row.iter().copied());
        }
        Ok(part)
    });
    let mut total = PartialStats::default();
    for p in parts {
        total.merge(p?);
    }
    for id in alignments.keys() {
        if corpus.utterance(id).is_none() {
            return Err(Error::Utterance {
                utt: id.clone(),
                msg: "alignment has no matching utterance in the corpus".into(),
            });
        }
    }
    total.finalize(num_states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::dnn::init_network;
    use crate::hmm::Alignment;

    fn phones() -> PhoneSet {
        let syms = ["!SIL", "a", "b", "!SP"].map(String::from).to_vec();
        PhoneSet::new(syms, "!SIL", Some("!SP"), 3).unwrap()
    }

    #[test]
    fn frame_variants_use_neighbours_and_boundaries() {
        let ps = phones();
        // sil | a | sp | b | sil
        let states = vec![0, 1, 2, 3, 4, 5, 1, 6, 7, 8, 0, 1, 2];
        let v = frame_variants(&states, &ps);
        let show: Vec<String> = v.iter().map(|x| x.display(&ps).to_string()).collect();
        assert_eq!(show[0], "#-!SIL+a[0]");
        assert_eq!(show[3], "!SIL-a+!SIL[0]");
        assert_eq!(show[6], "a-!SIL+b[1]");
        assert_eq!(show[12], "b-!SIL+#[2]");
    }

    #[test]
    fn single_phone_utterance_gives_one_boundary_variant() {
        let ps = PhoneSet::new(vec!["!SIL".into()], "!SIL", None, 1).unwrap();
        let v = frame_variants(&[0; 7], &ps);
        assert!(v.iter().all(|x| *x == v[0]));
        assert_eq!((v[0].left, v[0].right), (Context::Boundary, Context::Boundary));
    }

    #[test]
    fn stats_counts_match_alignment_lengths() {
        let spec = SyntheticSpec {
            phones: 4,
            utterances: 8,
            vocabulary: 5,
            seed: 2,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap().corpus;
        let gt = c.ground_truth().unwrap();
        let net = init_network(&[spec.dim, 8, c.phones.num_states()], 1).unwrap();
        let seq = accumulate_stats(&Executor::sequential(), &net, &c, &gt).unwrap();
        assert_eq!(seq.total_count(), c.total_frames());
        for vs in seq.variants.values() {
            assert!(vs.count >= 1);
            assert!((vs.mean_posterior.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // per-variant counts equal segment bookkeeping
        let mut counts: BTreeMap<ContextVariant, usize> = BTreeMap::new();
        for a in gt.values() {
            for v in frame_variants(&a.frame_states(), &c.phones) {
                *counts.entry(v).or_default() += 1;
            }
        }
        assert!(seq.variants.iter().all(|(v, s)| counts[v] == s.count));
        let par = accumulate_stats(&Executor::with_workers(3), &net, &c, &gt).unwrap();
        assert_eq!(seq, par);

        let mut bad = gt.clone();
        let first = c.utterances[0].id.clone();
        bad.insert(first.clone(), Alignment::from_frame_states(&[0, 1, 2]));
        let err = accumulate_stats(&Executor::sequential(), &net, &c, &bad).unwrap_err();
        assert!(err.to_string().contains(&first));
    }

    #[test]
    fn merge_is_associative_on_counts() {
        let v = ContextVariant {
            center: 1,
            pos: 0,
            left: Context::Boundary,
            right: Context::Phone(2),
        };
        let mut a = PartialStats::default();
        a.add_frame(v, [0.5, 0.5]);
        let mut b = PartialStats::default();
        b.add_frame(v, [1.0, 0.0]);
        a.merge(b);
        let s = a.finalize(2).unwrap();
        assert_eq!(s.variants[&v].count, 2);
        assert_eq!(s.variants[&v].mean_posterior.probs(), &[0.75, 0.25]);
    }
}
