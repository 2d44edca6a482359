use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SILENCE: &str = "!SIL";
pub const DEFAULT_SHORT_PAUSE: &str = "!SP";

/// Phone inventory and the model-state index space of its CI HMMs.
///
/// Every phone except the short pause owns `states_per_phone` contiguous
/// model states. The short pause has a single state tied to the middle
/// silence state, so it adds no indices of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneSet {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    silence: usize,
    short_pause: Option<usize>,
    states_per_phone: usize,
    base: Vec<usize>,
    state_phone: Vec<usize>,
}

impl PhoneSet {
    pub fn new(
        symbols: Vec<String>,
        silence: &str,
        short_pause: Option<&str>,
        states_per_phone: usize,
    ) -> Result<Self> {
        if states_per_phone == 0 {
            return Err(Error::PhoneSet("states_per_phone must be positive".into()));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) || s == "#" {
                return Err(Error::PhoneSet(format!("invalid phone symbol `{s}`")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::PhoneSet(format!("duplicate phone `{s}`")));
            }
        }
        let silence = *index
            .get(silence)
            .ok_or_else(|| Error::PhoneSet(format!("silence phone `{silence}` not in set")))?;
        let short_pause = short_pause.and_then(|sp| index.get(sp).copied());
        if short_pause == Some(silence) {
            return Err(Error::PhoneSet("silence and short pause must differ".into()));
        }

        let mut base = vec![0; symbols.len()];
        let mut state_phone = Vec::new();
        for (p, b) in base.iter_mut().enumerate() {
            if Some(p) == short_pause {
                continue;
            }
            *b = state_phone.len();
            state_phone.extend(std::iter::repeat_n(p, states_per_phone));
        }
        if let Some(sp) = short_pause {
            base[sp] = base[silence] + states_per_phone / 2;
        }
        Ok(PhoneSet {
            symbols,
            index,
            silence,
            short_pause,
            states_per_phone,
            base,
            state_phone,
        })
    }

    /// One phone per line. Names matching `silence` / `short_pause` designate
    /// those roles; a missing short-pause line means no short pause model.
    pub fn load(
        path: &Path,
        silence: &str,
        short_pause: &str,
        states_per_phone: usize,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut symbols = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let sym = line.trim();
            if sym.is_empty() {
                continue;
            }
            if sym.split_whitespace().count() != 1 {
                return Err(Error::parse(path, i + 1, "expected one phone symbol per line"));
            }
            symbols.push(sym.to_string());
        }
        Self::new(symbols, silence, Some(short_pause), states_per_phone)
            .map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn num_phones(&self) -> usize {
        self.symbols.len()
    }

    /// Size of the model-state index space (network output dimension).
    pub fn num_states(&self) -> usize {
        self.state_phone.len()
    }

    pub fn states_per_phone(&self) -> usize {
        self.states_per_phone
    }

    pub fn silence(&self) -> usize {
        self.silence
    }

    pub fn short_pause(&self) -> Option<usize> {
        self.short_pause
    }

    pub fn symbol(&self, phone: usize) -> &str {
        &self.symbols[phone]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn phone_index(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Number of HMM states in the topology of `phone`.
    pub fn hmm_len(&self, phone: usize) -> usize {
        if Some(phone) == self.short_pause {
            1
        } else {
            self.states_per_phone
        }
    }

    /// Model-state index of position `pos` within `phone`'s HMM.
    pub fn model_state(&self, phone: usize, pos: usize) -> usize {
        debug_assert!(pos < self.hmm_len(phone));
        self.base[phone] + pos
    }

    /// Phone owning a model state. Tied short-pause states report silence.
    pub fn state_phone(&self, state: usize) -> usize {
        self.state_phone[state]
    }

    pub fn state_position(&self, state: usize) -> usize {
        state - self.base[self.state_phone[state]]
    }

    pub fn is_silence_state(&self, state: usize) -> bool {
        self.state_phone[state] == self.silence
    }

    /// Human-readable state label such as `a[1]`.
    pub fn state_label(&self, state: usize) -> String {
        format!(
            "{}[{}]",
            self.symbol(self.state_phone(state)),
            self.state_position(state)
        )
    }

    /// Phones that carry context-dependent variants (everything but the short pause).
    pub fn modeled_phones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_phones()).filter(move |&p| Some(p) != self.short_pause)
    }
}

/// Word pronunciations as phone-index sequences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lexicon {
    words: BTreeMap<String, Vec<Vec<usize>>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn add(&mut self, word: &str, pron: Vec<usize>) -> Result<()> {
        if pron.is_empty() {
            return Err(Error::Lexicon(format!("empty pronunciation for `{word}`")));
        }
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::Lexicon(format!("invalid word `{word}`")));
        }
        self.words.entry(word.to_string()).or_default().push(pron);
        Ok(())
    }

    pub fn add_symbols(&mut self, word: &str, pron: &[&str], phones: &PhoneSet) -> Result<()> {
        let idx = pron
            .iter()
            .map(|s| {
                phones
                    .phone_index(s)
                    .ok_or_else(|| Error::Lexicon(format!("word `{word}` uses unknown phone `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.add(word, idx)
    }

    pub fn pronunciations(&self, word: &str) -> Result<&[Vec<usize>]> {
        self.words
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, &[Vec<usize>])> {
        self.words.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// `WORD<TAB>ph1 ph2 ...`; repeated words add alternates.
    pub fn load(path: &Path, phones: &PhoneSet) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lex = Lexicon::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected WORD<TAB>phones"))?;
            let pron: Vec<&str> = pron.split_whitespace().collect();
            lex.add_symbols(word.trim(), &pron, phones)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn to_text(&self, phones: &PhoneSet) -> String {
        let mut out = String::new();
        for (word, prons) in &self.words {
            for pron in prons {
                let syms: Vec<&str> = pron.iter().map(|&p| phones.symbol(p)).collect();
                let _ = writeln!(out, "{word}\t{}", syms.join(" "));
            }
        }
        out
    }
}
