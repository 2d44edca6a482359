use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hmm::{Alignments, PhoneSet};
use crate::statetying::cost::{cluster_cost, CostOptions};
use crate::statetying::questions::{Question, Side};
use crate::statetying::{frame_variants, ContextVariant, PosteriorStats, VariantStats};

/// Smallest cost reduction that still counts as a split.
pub const DEFAULT_MIN_GAIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TieOptions {
    pub target_leaves: usize,
    pub min_gain: f64,
    pub cost: CostOptions,
}

impl TieOptions {
    pub fn new(target_leaves: usize) -> Self {
        TieOptions {
            target_leaves,
            min_gain: DEFAULT_MIN_GAIN,
            cost: CostOptions::default(),
        }
    }
}

/// Best question for a node: index into the question list and its gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub question: usize,
    pub gain: f64,
}

fn members_cost(members: &[(&ContextVariant, &VariantStats)], opts: &CostOptions) -> f64 {
    let m: Vec<(f64, &_)> = members
        .iter()
        .map(|(_, s)| (s.count as f64, &s.mean_posterior))
        .collect();
    cluster_cost(&m, opts)
}

/// The question with the largest cost reduction. Equal gains go to the
/// lexicographically smallest question name.
pub fn best_split(
    members: &[(&ContextVariant, &VariantStats)],
    questions: &[Question],
    min_gain: f64,
    opts: &CostOptions,
) -> Option<Split> {
    if members.len() < 2 {
        return None;
    }
    let all = members_cost(members, opts);
    let mut best: Option<Split> = None;
    for (qi, q) in questions.iter().enumerate() {
        let (yes, no): (Vec<_>, Vec<_>) = members.iter().partition(|(v, _)| q.answer(v));
        if yes.is_empty() || no.is_empty() {
            continue;
        }
        let gain = all - members_cost(&yes, opts) - members_cost(&no, opts);
        if gain < min_gain {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => gain > b.gain || (gain == b.gain && q.name < questions[b.question].name),
        };
        if better {
            best = Some(Split { question: qi, gain });
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf { leaf: usize },
    Internal { question: Question, yes: usize, no: usize },
}

/// One binary tree per (center phone, state position); nodes of all trees
/// share one arena.
#[derive(Debug, Clone, PartialEq)]
pub struct TieTree {
    roots: BTreeMap<(usize, usize), usize>,
    nodes: Vec<TreeNode>,
    num_leaves: usize,
}

impl TieTree {
    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn num_roots(&self) -> usize {
        self.roots.len()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Routes a variant to its tied-state id by answering questions from
    /// its root down. Contexts never seen in training route the same way.
    pub fn map_variant(&self, v: &ContextVariant) -> Result<usize> {
        let mut node = *self.roots.get(&(v.center, v.pos)).ok_or_else(|| {
            Error::PhoneSet(format!(
                "no tree for center phone {} state {}",
                v.center, v.pos
            ))
        })?;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { leaf } => return Ok(*leaf),
                TreeNode::Internal { question, yes, no } => {
                    node = if question.answer(v) { *yes } else { *no };
                }
            }
        }
    }

    /// Pre-order dump:
    ///
    /// ```text
    /// leaves<TAB>N
    /// root<TAB>center<TAB>pos
    /// <id><TAB>q<TAB>NAME<TAB>L|R<TAB>ph ph ...<TAB>yes<TAB>no
    /// <id><TAB>leaf<TAB>leaf_id
    /// ```
    pub fn to_text(&self, phones: &PhoneSet) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "leaves\t{}", self.num_leaves);
        for (&(center, pos), &root) in &self.roots {
            let _ = writeln!(out, "root\t{}\t{pos}", phones.symbol(center));
            let mut stack = vec![root];
            while let Some(n) = stack.pop() {
                match &self.nodes[n] {
                    TreeNode::Leaf { leaf } => {
                        let _ = writeln!(out, "{n}\tleaf\t{leaf}");
                    }
                    TreeNode::Internal { question, yes, no } => {
                        let _ = writeln!(out, "{n}\tq\t{}\t{yes}\t{no}", question.to_line(phones));
                        stack.push(*no);
                        stack.push(*yes);
                    }
                }
            }
        }
        out
    }

    pub fn parse(path: &Path, text: &str, phones: &PhoneSet) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |line: usize, msg: &str| Error::parse(path, line, msg.to_string());
        let num = |line: usize, s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::parse(path, line, format!("expected an integer, got `{s}`")))
        };
        let (ln, header) = lines.next().ok_or_else(|| bad(0, "empty tree file"))?;
        let num_leaves = match header.split('\t').collect::<Vec<_>>()[..] {
            ["leaves", n] => num(ln, n)?,
            _ => return Err(bad(ln, "expected `leaves<TAB>N` header")),
        };
        let mut roots = BTreeMap::new();
        let mut slots: Vec<Option<TreeNode>> = Vec::new();
        // root whose first node is expected next
        let mut awaiting_root: Option<(usize, usize)> = None;
        // node ids still owed by the current pre-order walk
        let mut pending: Vec<usize> = Vec::new();
        for (ln, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f[0] == "root" {
                if awaiting_root.is_some() || !pending.is_empty() {
                    return Err(bad(ln, "previous tree is incomplete"));
                }
                if f.len() != 3 {
                    return Err(bad(ln, "expected root<TAB>center<TAB>pos"));
                }
                let center = phones
                    .phone_index(f[1])
                    .ok_or_else(|| bad(ln, &format!("unknown phone `{}`", f[1])))?;
                let key = (center, num(ln, f[2])?);
                if roots.contains_key(&key) {
                    return Err(bad(ln, "duplicate root"));
                }
                awaiting_root = Some(key);
                continue;
            }
            let id = num(ln, f[0])?;
            // a forest with N leaves has fewer than 2N nodes
            if id >= 2 * num_leaves {
                return Err(bad(ln, &format!("node id {id} out of range for {num_leaves} leaves")));
            }
            if let Some(key) = awaiting_root.take() {
                roots.insert(key, id);
            } else {
                match pending.pop() {
                    Some(expect) if expect == id => {}
                    Some(expect) => return Err(bad(ln, &format!("expected node {expect}, found {id}"))),
                    None => return Err(bad(ln, "node outside of a root")),
                }
            }
            if slots.len() <= id {
                slots.resize(id + 1, None);
            }
            if slots[id].is_some() {
                return Err(bad(ln, &format!("node {id} defined twice")));
            }
            let node = match f.get(1).copied() {
                Some("leaf") if f.len() == 3 => TreeNode::Leaf { leaf: num(ln, f[2])? },
                Some("q") if f.len() == 7 => {
                    let side = Side::parse(f[3]).ok_or_else(|| bad(ln, "side must be L or R"))?;
                    let mut set = BTreeSet::new();
                    for sym in f[4].split_whitespace() {
                        set.insert(
                            phones
                                .phone_index(sym)
                                .ok_or_else(|| bad(ln, &format!("unknown phone `{sym}`")))?,
                        );
                    }
                    let question = Question::new(f[2], side, set, phones).map_err(|e| bad(ln, &e.to_string()))?;
                    let (yes, no) = (num(ln, f[5])?, num(ln, f[6])?);
                    pending.push(no);
                    pending.push(yes);
                    TreeNode::Internal { question, yes, no }
                }
                _ => return Err(bad(ln, "expected a `q` or `leaf` node")),
            };
            slots[id] = Some(node);
        }
        if awaiting_root.is_some() || !pending.is_empty() {
            return Err(bad(0, "tree file ends inside a tree"));
        }
        let nodes: Vec<TreeNode> = slots
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.ok_or_else(|| bad(0, &format!("node {i} is missing"))))
            .collect::<Result<_>>()?;
        let mut leaf_ids: Vec<usize> = nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Leaf { leaf } => Some(*leaf),
                _ => None,
            })
            .collect();
        leaf_ids.sort_unstable();
        if leaf_ids != (0..num_leaves).collect::<Vec<_>>() {
            return Err(bad(0, "leaf ids are not dense in [0, leaves)"));
        }
        Ok(TieTree {
            roots,
            nodes,
            num_leaves,
        })
    }

    pub fn save(&self, path: &Path, phones: &PhoneSet) -> Result<()> {
        std::fs::write(path, self.to_text(phones)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, phones: &PhoneSet) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TieTree::parse(path, &text, phones)
    }
}

/// Result of growing a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TieBuild {
    pub tree: TieTree,
    /// Set when the splittable gain ran out before the target was reached.
    pub warning: Option<String>,
    /// Gain of each accepted split, in split order.
    pub gains: Vec<f64>,
    /// Total leaf cost before any split and after each one.
    pub cost_history: Vec<f64>,
}

struct OpenLeaf<'a> {
    node: usize,
    leaf: usize,
    members: Vec<(&'a ContextVariant, &'a VariantStats)>,
    split: Option<Split>,
}

/// Greedy best-first growth across all (center, position) trees at once:
/// the leaf with the largest gain anywhere is split next.
///
/// Each root starts as one leaf, numbered in root order. A split keeps the
/// parent's id on the yes side and gives the no side the next free id.
pub fn build_tie_tree(stats: &PosteriorStats, questions: &[Question], phones: &PhoneSet, opts: &TieOptions) -> Result<TieBuild> {
    if !(opts.min_gain > 0.0) {
        return Err(Error::Config(format!("min_gain must be positive, got {}", opts.min_gain)));
    }
    let root_keys: Vec<(usize, usize)> = phones
        .modeled_phones()
        .flat_map(|p| (0..phones.hmm_len(p)).map(move |pos| (p, pos)))
        .collect();
    if opts.target_leaves < root_keys.len() {
        return Err(Error::Config(format!(
            "{} tied states requested, but there are {} (phone, state) roots",
            opts.target_leaves,
            root_keys.len()
        )));
    }
    let mut nodes = Vec::with_capacity(2 * opts.target_leaves);
    let mut roots = BTreeMap::new();
    let mut open: Vec<OpenLeaf> = Vec::with_capacity(opts.target_leaves);
    for (leaf, &key) in root_keys.iter().enumerate() {
        roots.insert(key, nodes.len());
        open.push(OpenLeaf {
            node: nodes.len(),
            leaf,
            members: Vec::new(),
            split: None,
        });
        nodes.push(TreeNode::Leaf { leaf });
    }
    for (v, s) in &stats.variants {
        let Some(i) = root_keys.iter().position(|&k| k == (v.center, v.pos)) else {
            return Err(Error::PhoneSet(format!("statistics for unmodeled state {}", v.display(phones))));
        };
        open[i].members.push((v, s));
    }
    for leaf in &mut open {
        leaf.split = best_split(&leaf.members, questions, opts.min_gain, &opts.cost);
    }

    let mut cost: f64 = open.iter().map(|l| members_cost(&l.members, &opts.cost)).sum();
    let mut cost_history = vec![cost];
    let mut gains = Vec::new();
    let mut warning = None;
    let mut num_leaves = open.len();
    while num_leaves < opts.target_leaves {
        // open is ordered by leaf id, so the first maximum wins ties
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.split.map(|s| (i, s.gain)))
            .fold(None, |best: Option<(usize, f64)>, (i, g)| match best {
                Some((_, bg)) if bg >= g => best,
                _ => Some((i, g)),
            });
        let Some((i, _)) = pick else {
            warning = Some(format!(
                "no split gains at least {} remain: stopped at {num_leaves} of {} requested tied states",
                opts.min_gain, opts.target_leaves
            ));
            break;
        };
        let split = open[i].split.expect("picked leaf has a split");
        let question = questions[split.question].clone();
        let (yes, no): (Vec<_>, Vec<_>) = std::mem::take(&mut open[i].members)
            .into_iter()
            .partition(|(v, _)| question.answer(v));
        let (yes_node, no_node) = (nodes.len(), nodes.len() + 1);
        let parent_leaf = open[i].leaf;
        nodes.push(TreeNode::Leaf { leaf: parent_leaf });
        nodes.push(TreeNode::Leaf { leaf: num_leaves });
        nodes[open[i].node] = TreeNode::Internal {
            question,
            yes: yes_node,
            no: no_node,
        };
        open[i] = OpenLeaf {
            node: yes_node,
            leaf: parent_leaf,
            split: best_split(&yes, questions, opts.min_gain, &opts.cost),
            members: yes,
        };
        open.push(OpenLeaf {
            node: no_node,
            leaf: num_leaves,
            split: best_split(&no, questions, opts.min_gain, &opts.cost),
            members: no,
        });
        num_leaves += 1;
        cost -= split.gain;
        gains.push(split.gain);
        cost_history.push(cost);
    }
    Ok(TieBuild {
        tree: TieTree {
            roots,
            nodes,
            num_leaves,
        },
        warning,
        gains,
        cost_history,
    })
}

/// `center<TAB>pos<TAB>left<TAB>right<TAB>leaf_id` for every observed variant.
pub fn tied_state_map_text(tree: &TieTree, stats: &PosteriorStats, phones: &PhoneSet) -> Result<String> {
    let mut out = String::new();
    for v in stats.variants.keys() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            phones.symbol(v.center),
            v.pos,
            v.left.symbol(phones),
            v.right.symbol(phones),
            tree.map_variant(v)?
        );
    }
    Ok(out)
}

/// Per-frame tied-state ids for every alignment.
pub fn cd_alignments(tree: &TieTree, alignments: &Alignments, phones: &PhoneSet) -> Result<BTreeMap<String, Vec<usize>>> {
    alignments
        .iter()
        .map(|(id, ali)| {
            let ids = frame_variants(&ali.frame_states(), phones)
                .iter()
                .map(|v| tree.map_variant(v))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Utterance {
                    utt: id.clone(),
                    msg: e.to_string(),
                })?;
            Ok((id.clone(), ids))
        })
        .collect()
}

/// `UTTID<TAB>start<TAB>end<TAB>tied_id`, one line per run of equal ids.
pub fn cd_alignments_to_text(cd: &BTreeMap<String, Vec<usize>>) -> String {
    let mut out = String::new();
    for (id, frames) in cd {
        let mut start = 0;
        for t in 1..=frames.len() {
            if t == frames.len() || frames[t] != frames[start] {
                let _ = writeln!(out, "{id}\t{start}\t{t}\t{}", frames[start]);
                start = t;
            }
        }
    }
    out
}
