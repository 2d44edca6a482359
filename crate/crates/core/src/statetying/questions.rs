use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hmm::PhoneSet;
use crate::statetying::{Context, ContextVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "L" => Some(Side::Left),
            "R" => Some(Side::Right),
            _ => None,
        }
    }
}

/// "Is the left (or right) neighbour one of these phones?" The utterance
/// boundary always answers no.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub name: String,
    pub side: Side,
    pub phones: BTreeSet<usize>,
}

impl Question {
    pub fn new(name: &str, side: Side, phones: BTreeSet<usize>, phone_set: &PhoneSet) -> Result<Self> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Config(format!("invalid question name `{name}`")));
        }
        if phones.is_empty() || phones.len() >= phone_set.num_phones() {
            return Err(Error::Config(format!(
                "question `{name}` must name a non-empty proper subset of the phones"
            )));
        }
        if let Some(&p) = phones.iter().find(|&&p| p >= phone_set.num_phones()) {
            return Err(Error::Config(format!("question `{name}` uses unknown phone index {p}")));
        }
        Ok(Question {
            name: name.to_string(),
            side,
            phones,
        })
    }

    pub fn answer(&self, v: &ContextVariant) -> bool {
        let ctx = match self.side {
            Side::Left => v.left,
            Side::Right => v.right,
        };
        matches!(ctx, Context::Phone(p) if self.phones.contains(&p))
    }

    pub fn to_line(&self, phones: &PhoneSet) -> String {
        let syms: Vec<&str> = self.phones.iter().map(|&p| phones.symbol(p)).collect();
        format!("{}\t{}\t{}", self.name, self.side.tag(), syms.join(" "))
    }
}

/// `NAME<TAB>L|R<TAB>ph1 ph2 ...`, one per line; `#` starts a comment line.
pub fn parse_questions(path: &Path, text: &str, phones: &PhoneSet) -> Result<Vec<Question>> {
    let mut out: Vec<Question> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, line_no, "expected NAME<TAB>L|R<TAB>phones"));
        }
        let side = Side::parse(fields[1].trim())
            .ok_or_else(|| Error::parse(path, line_no, format!("side must be L or R, got `{}`", fields[1])))?;
        let mut set = BTreeSet::new();
        for sym in fields[2].split_whitespace() {
            let p = phones
                .phone_index(sym)
                .ok_or_else(|| Error::parse(path, line_no, format!("unknown phone `{sym}`")))?;
            set.insert(p);
        }
        let q = Question::new(fields[0].trim(), side, set, phones)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        if out.iter().any(|o| o.name == q.name) {
            return Err(Error::parse(path, line_no, format!("duplicate question `{}`", q.name)));
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(Error::parse(path, 0, "no questions"));
    }
    Ok(out)
}

pub fn load_questions(path: &Path, phones: &PhoneSet) -> Result<Vec<Question>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_questions(path, &text, phones)
}

pub fn questions_to_text(questions: &[Question], phones: &PhoneSet) -> String {
    let mut out = String::new();
    for q in questions {
        let _ = writeln!(out, "{}", q.to_line(phones));
    }
    out
}

/// A generic question set for phone sets without phonetic classes:
/// silence, each single phone, and runs of consecutive phones of length
/// two and three (in phone-file order), asked on both sides.
pub fn default_questions(phones: &PhoneSet) -> Vec<Question> {
    let speech: Vec<usize> = phones
        .modeled_phones()
        .filter(|&p| p != phones.silence())
        .collect();
    let mut sets: Vec<(String, BTreeSet<usize>)> = vec![("SIL".into(), BTreeSet::from([phones.silence()]))];
    for &p in &speech {
        sets.push((phones.symbol(p).to_uppercase(), BTreeSet::from([p])));
    }
    for width in [2usize, 3] {
        for w in speech.windows(width) {
            let name = w.iter().map(|&p| phones.symbol(p).to_uppercase()).collect::<Vec<_>>().join("_");
            sets.push((name, w.iter().copied().collect()));
        }
    }
    let mut out = Vec::new();
    for side in [Side::Left, Side::Right] {
        for (name, set) in &sets {
            let name = format!("{}_{}", side.tag(), name.trim_start_matches('!'));
            if let Ok(q) = Question::new(&name, side, set.clone(), phones) {
                out.push(q);
            }
        }
    }
    out
}
