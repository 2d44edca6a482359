use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hmm::graph::StateGraph;
use crate::hmm::phones::PhoneSet;

/// A run of frames `[start, end)` spent in one model state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub state: usize,
    pub start: usize,
    pub end: usize,
}

/// Frame-level state labels of one utterance as contiguous segments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    segments: Vec<Segment>,
}

/// Alignments keyed by utterance id.
pub type Alignments = BTreeMap<String, Alignment>;

impl Alignment {
    /// Checks that segments are non-empty and tile `[0, T)` in order.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for s in &segments {
            if s.start != expected || s.end <= s.start {
                return Err(Error::Dimension(format!(
                    "segment [{}, {}) does not continue at frame {expected}",
                    s.start, s.end
                )));
            }
            expected = s.end;
        }
        Ok(Alignment { segments })
    }

    /// Runs of equal consecutive states become one segment.
    pub fn from_frame_states(states: &[usize]) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (t, &s) in states.iter().enumerate() {
            match segments.last_mut() {
                Some(last) if last.state == s => last.end = t + 1,
                _ => segments.push(Segment {
                    state: s,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        Alignment { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn frame_states(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames());
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.state, s.end - s.start));
        }
        out
    }

    /// Re-walks the graph to confirm the labelled state sequence is a path.
    pub fn check_against(&self, graph: &StateGraph) -> Result<()> {
        if graph.accepts(&self.frame_states()) {
            Ok(())
        } else {
            Err(Error::Graph(
                "alignment state sequence is not a path of its graph".into(),
            ))
        }
    }
}

/// A phone occurrence recovered from a state-level labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhoneSpan {
    pub phone: usize,
    pub start: usize,
    pub end: usize,
}

/// Splits a state sequence into phone occurrences. A new occurrence starts
/// when the phone changes or the in-phone position fails to advance
/// (e.g. `a[2] a[0]` is two consecutive `a`s).
pub fn phone_spans(states: &[usize], phones: &PhoneSet) -> Vec<PhoneSpan> {
    let mut spans: Vec<PhoneSpan> = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (t, &s) in states.iter().enumerate() {
        let phone = phones.state_phone(s);
        let pos = phones.state_position(s);
        let continues = matches!(prev, Some((pp, ppos)) if pp == phone && pos >= ppos);
        match spans.last_mut() {
            Some(last) if continues => last.end = t + 1,
            _ => spans.push(PhoneSpan {
                phone,
                start: t,
                end: t + 1,
            }),
        }
        prev = Some((phone, pos));
    }
    spans
}

/// `UTTID<TAB>start<TAB>end<TAB>phone<TAB>state_pos`, segments sorted by start.
pub fn alignments_to_text(alignments: &Alignments, phones: &PhoneSet) -> String {
    let mut out = String::new();
    for (utt, ali) in alignments {
        for s in ali.segments() {
            let _ = writeln!(
                out,
                "{utt}\t{}\t{}\t{}\t{}",
                s.start,
                s.end,
                phones.symbol(phones.state_phone(s.state)),
                phones.state_position(s.state)
            );
        }
    }
    out
}

pub fn write_alignments(path: &Path, alignments: &Alignments, phones: &PhoneSet) -> Result<()> {
    std::fs::write(path, alignments_to_text(alignments, phones)).map_err(|e| Error::io(path, e))
}

pub fn read_alignments(path: &Path, phones: &PhoneSet) -> Result<Alignments> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(path, line_no, "expected 5 tab-separated fields"));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::parse(path, line_no, format!("bad number `{s}`: {e}")))
        };
        let (start, end, pos) = (num(fields[1])?, num(fields[2])?, num(fields[4])?);
        let phone = phones
            .phone_index(fields[3])
            .ok_or_else(|| Error::parse(path, line_no, format!("unknown phone `{}`", fields[3])))?;
        if pos >= phones.hmm_len(phone) {
            return Err(Error::parse(path, line_no, format!("state position {pos} out of range")));
        }
        raw.entry(fields[0].to_string()).or_default().push(Segment {
            state: phones.model_state(phone, pos),
            start,
            end,
        });
    }
    raw.into_iter()
        .map(|(utt, segs)| {
            let ali = Alignment::new(segs).map_err(|e| Error::Utterance {
                utt: utt.clone(),
                msg: e.to_string(),
            })?;
            Ok((utt, ali))
        })
        .collect()
}
