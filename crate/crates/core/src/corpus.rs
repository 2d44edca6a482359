//! Utterances, feature/transcript files, deltas, and synthetic corpora.
//!
//! On-disk corpus layout:
//!
//! ```text
//! <dir>/phones.txt         one phone per line
//! <dir>/lexicon.txt        WORD<TAB>ph1 ph2 ...
//! <dir>/transcripts.txt    UTTID<TAB>word word ...
//! <dir>/feats/<id>.fea     FSFT1 feature matrix
//! <dir>/ground_truth.ali   optional reference alignment
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Geometric, Normal};

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::hmm::alignment::{read_alignments, write_alignments, Alignment, Alignments, Segment};
use crate::hmm::phones::{Lexicon, PhoneSet, DEFAULT_SHORT_PAUSE, DEFAULT_SILENCE};

pub const FEATURE_MAGIC: &[u8; 5] = b"FSFT1";
pub const PHONES_FILE: &str = "phones.txt";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const TRANSCRIPTS_FILE: &str = "transcripts.txt";
pub const FEATS_DIR: &str = "feats";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.ali";

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × D`.
    pub features: Array2<f64>,
    pub transcript: Vec<String>,
    pub ground_truth: Option<Alignment>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub phones: PhoneSet,
    pub lexicon: Lexicon,
    /// Sorted by utterance id.
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(phones: PhoneSet, lexicon: Lexicon, mut utterances: Vec<Utterance>) -> Result<Self> {
        utterances.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = utterances.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Config(format!("duplicate utterance id `{}`", w[0].id)));
        }
        let dim = utterances.first().map(|u| u.features.ncols());
        for u in &utterances {
            if u.num_frames() == 0 {
                return Err(Error::Utterance {
                    utt: u.id.clone(),
                    msg: "no frames".into(),
                });
            }
            if Some(u.features.ncols()) != dim {
                return Err(Error::Utterance {
                    utt: u.id.clone(),
                    msg: "feature dimension differs from the rest of the corpus".into(),
                });
            }
        }
        Ok(Corpus {
            phones,
            lexicon,
            utterances,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.features.ncols())
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::num_frames).sum()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.utterances.is_empty() && self.utterances.iter().all(|u| u.ground_truth.is_some())
    }

    pub fn ground_truth(&self) -> Option<Alignments> {
        self.utterances
            .iter()
            .map(|u| u.ground_truth.clone().map(|a| (u.id.clone(), a)))
            .collect()
    }

    /// Replaces every feature matrix by its `[static, Δ, ΔΔ]` expansion.
    pub fn with_deltas(mut self) -> Self {
        for u in &mut self.utterances {
            u.features = add_deltas(u.features.view());
        }
        self
    }

    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.utterances
            .binary_search_by(|u| u.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.utterances[i])
    }
}

/// Regression deltas over a ±`window` frame window with edge replication.
fn deltas(features: ArrayView2<f64>, window: usize) -> Array2<f64> {
    let (frames, dim) = features.dim();
    let denom: f64 = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    let mut out = Array2::zeros((frames, dim));
    for t in 0..frames {
        for k in 1..=window {
            let fwd = (t + k).min(frames - 1);
            let back = t.saturating_sub(k);
            for d in 0..dim {
                out[[t, d]] += k as f64 * (features[[fwd, d]] - features[[back, d]]);
            }
        }
    }
    out /= denom;
    out
}

pub const DELTA_WINDOW: usize = 2;

/// Appends first- and second-order regression deltas (window ±2): `T × 3D`.
pub fn add_deltas(features: ArrayView2<f64>) -> Array2<f64> {
    let (frames, dim) = features.dim();
    let d1 = deltas(features, DELTA_WINDOW);
    let d2 = deltas(d1.view(), DELTA_WINDOW);
    let mut out = Array2::zeros((frames, 3 * dim));
    out.slice_mut(s![.., ..dim]).assign(&features);
    out.slice_mut(s![.., dim..2 * dim]).assign(&d1);
    out.slice_mut(s![.., 2 * dim..]).assign(&d2);
    out
}

pub fn encode_features(features: ArrayView2<f64>) -> Vec<u8> {
    let (frames, dim) = features.dim();
    let mut out = Vec::with_capacity(13 + 4 * frames * dim);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    let err = |offset: usize, msg: &str| Error::Binary {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 5 {
        return Err(err(bytes.len(), "truncated magic"));
    }
    if &bytes[..5] != FEATURE_MAGIC {
        return Err(err(0, "bad magic, expected FSFT1"));
    }
    if bytes.len() < 13 {
        return Err(err(bytes.len(), "truncated header"));
    }
    let frames = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = 13 + 4 * frames * dim;
    if bytes.len() < expected {
        // offset of the first incomplete value
        let whole = (bytes.len() - 13) / 4;
        return Err(err(13 + 4 * whole, "truncated feature data"));
    }
    if bytes.len() > expected {
        return Err(err(expected, "trailing bytes after feature data"));
    }
    let values: Vec<f64> = bytes[13..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((frames, dim), values).expect("size checked"))
}

pub fn write_features(path: &Path, features: ArrayView2<f64>) -> Result<()> {
    std::fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

/// Phone-set naming and topology used when loading a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneOptions {
    pub silence: String,
    pub short_pause: String,
    pub states_per_phone: usize,
}

impl Default for PhoneOptions {
    fn default() -> Self {
        PhoneOptions {
            silence: DEFAULT_SILENCE.into(),
            short_pause: DEFAULT_SHORT_PAUSE.into(),
            states_per_phone: 3,
        }
    }
}

pub fn parse_transcripts(path: &Path, text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, words) = match line.split_once('\t') {
            Some((id, words)) => (id.trim(), words),
            None => (line.trim(), ""),
        };
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::parse(path, i + 1, "missing or malformed utterance id"));
        }
        out.push((
            id.to_string(),
            words.split_whitespace().map(String::from).collect(),
        ));
    }
    Ok(out)
}

pub fn transcripts_to_text<'a>(items: impl IntoIterator<Item = (&'a str, &'a [String])>) -> String {
    let mut out = String::new();
    for (id, words) in items {
        let _ = writeln!(out, "{id}\t{}", words.join(" "));
    }
    out
}

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(FEATS_DIR).join(format!("{id}.fea"))
}

pub fn load_corpus(dir: &Path, opts: &PhoneOptions) -> Result<Corpus> {
    let phones = PhoneSet::load(
        &dir.join(PHONES_FILE),
        &opts.silence,
        &opts.short_pause,
        opts.states_per_phone,
    )?;
    let lexicon = Lexicon::load(&dir.join(LEXICON_FILE), &phones)?;
    let tpath = dir.join(TRANSCRIPTS_FILE);
    let text = std::fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let transcripts = parse_transcripts(&tpath, &text)?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let mut ground_truth = if gt_path.exists() {
        Some(read_alignments(&gt_path, &phones)?)
    } else {
        None
    };
    let mut utterances = Vec::with_capacity(transcripts.len());
    for (id, transcript) in transcripts {
        let features = read_features(&feature_path(dir, &id))?;
        let gt = ground_truth.as_mut().and_then(|g| g.remove(&id));
        if let Some(a) = &gt {
            if a.num_frames() != features.nrows() {
                return Err(Error::Utterance {
                    utt: id,
                    msg: "ground-truth alignment length differs from feature length".into(),
                });
            }
        }
        utterances.push(Utterance {
            id,
            features,
            transcript,
            ground_truth: gt,
        });
    }
    Corpus::new(phones, lexicon, utterances)
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir.join(FEATS_DIR)).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(PHONES_FILE, corpus.phones.to_text())?;
    write(LEXICON_FILE, corpus.lexicon.to_text(&corpus.phones))?;
    write(
        TRANSCRIPTS_FILE,
        transcripts_to_text(
            corpus
                .utterances
                .iter()
                .map(|u| (u.id.as_str(), u.transcript.as_slice())),
        ),
    )?;
    for u in &corpus.utterances {
        write_features(&feature_path(dir, &u.id), u.features.view())?;
    }
    if let Some(gt) = corpus.ground_truth() {
        write_alignments(&dir.join(GROUND_TRUTH_FILE), &gt, &corpus.phones)?;
    }
    Ok(())
}

/// Parameters of a synthetic corpus with known alignments.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Phone count including silence (the short pause comes on top).
    pub phones: usize,
    pub states_per_phone: usize,
    pub dim: usize,
    pub noise_std: f64,
    /// State means are drawn uniformly from `[-mean_spread, mean_spread]^dim`.
    pub mean_spread: f64,
    /// Rejection threshold on pairwise distance between state means.
    pub min_mean_distance: f64,
    pub utterances: usize,
    pub vocabulary: usize,
    pub min_word_phones: usize,
    pub max_word_phones: usize,
    /// Fraction of words that get a second pronunciation.
    pub alternate_fraction: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub mean_state_duration: f64,
    pub mean_silence_duration: f64,
    pub short_pause_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            phones: 10,
            states_per_phone: 3,
            dim: 8,
            noise_std: 0.35,
            mean_spread: 1.0,
            min_mean_distance: 0.8,
            utterances: 200,
            vocabulary: 40,
            min_word_phones: 2,
            max_word_phones: 4,
            alternate_fraction: 0.2,
            min_words: 2,
            max_words: 5,
            mean_state_duration: 3.0,
            mean_silence_duration: 6.0,
            short_pause_prob: 0.3,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn from_config(mut cfg: FlatConfig) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        cfg.take("phones", &mut s.phones)?;
        cfg.take("states_per_phone", &mut s.states_per_phone)?;
        cfg.take("dim", &mut s.dim)?;
        cfg.take("noise_std", &mut s.noise_std)?;
        cfg.take("mean_spread", &mut s.mean_spread)?;
        cfg.take("min_mean_distance", &mut s.min_mean_distance)?;
        cfg.take("utterances", &mut s.utterances)?;
        cfg.take("vocabulary", &mut s.vocabulary)?;
        cfg.take("min_word_phones", &mut s.min_word_phones)?;
        cfg.take("max_word_phones", &mut s.max_word_phones)?;
        cfg.take("alternate_fraction", &mut s.alternate_fraction)?;
        cfg.take("min_words", &mut s.min_words)?;
        cfg.take("max_words", &mut s.max_words)?;
        cfg.take("mean_state_duration", &mut s.mean_state_duration)?;
        cfg.take("mean_silence_duration", &mut s.mean_silence_duration)?;
        cfg.take("short_pause_prob", &mut s.short_pause_prob)?;
        cfg.take("seed", &mut s.seed)?;
        cfg.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.phones < 2 {
            return bad("synthetic corpus needs silence plus at least one phone");
        }
        if self.states_per_phone == 0 || self.dim == 0 || self.utterances == 0 || self.vocabulary == 0 {
            return bad("states_per_phone, dim, utterances and vocabulary must be positive");
        }
        if !(self.noise_std > 0.0) {
            return bad("noise_std must be positive");
        }
        if self.min_word_phones == 0 || self.min_word_phones > self.max_word_phones {
            return bad("word length range is empty");
        }
        if self.min_words > self.max_words {
            return bad("utterance word-count range is empty");
        }
        if self.mean_state_duration < 1.0 || self.mean_silence_duration < 1.0 {
            return bad("mean durations must be at least one frame");
        }
        for (name, p) in [
            ("alternate_fraction", self.alternate_fraction),
            ("short_pause_prob", self.short_pause_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn phone_set(&self) -> Result<PhoneSet> {
        let mut symbols = vec![DEFAULT_SILENCE.to_string()];
        symbols.extend((1..self.phones).map(|i| format!("p{i}")));
        symbols.push(DEFAULT_SHORT_PAUSE.to_string());
        PhoneSet::new(
            symbols,
            DEFAULT_SILENCE,
            Some(DEFAULT_SHORT_PAUSE),
            self.states_per_phone,
        )
    }
}

/// A generated corpus together with the emission means used to make it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// `S × D`, one row per model state.
    pub means: Array2<f64>,
}

fn duration(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let g = Geometric::new(1.0 / mean).expect("probability in (0, 1]");
    1 + g.sample(rng) as usize
}

/// Samples transcripts, durations and Gaussian features around per-state
/// means. Features are rounded to `f32` so the in-memory corpus equals its
/// on-disk form.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let phones = spec.phone_set()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let num_states = phones.num_states();

    let mut means = Array2::<f64>::zeros((num_states, spec.dim));
    for s in 0..num_states {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..spec.dim)
                .map(|_| rng.random_range(-spec.mean_spread..=spec.mean_spread))
                .collect();
            let nearest = (0..s)
                .map(|o| {
                    cand.iter()
                        .zip(means.row(o))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, cand));
            }
            if nearest >= spec.min_mean_distance {
                break;
            }
        }
        let (_, cand) = best.expect("at least one candidate");
        for (d, v) in cand.into_iter().enumerate() {
            means[[s, d]] = v;
        }
    }

    let speech: Vec<usize> = phones
        .modeled_phones()
        .filter(|&p| p != phones.silence())
        .collect();
    let mut lexicon = Lexicon::new();
    let mut words = Vec::with_capacity(spec.vocabulary);
    for w in 0..spec.vocabulary {
        let name = format!("w{w:03}");
        let len = rng.random_range(spec.min_word_phones..=spec.max_word_phones);
        let pron: Vec<usize> = (0..len)
            .map(|_| speech[rng.random_range(0..speech.len())])
            .collect();
        lexicon.add(&name, pron.clone())?;
        if speech.len() > 1 && rng.random_bool(spec.alternate_fraction) {
            let mut alt = pron;
            let i = rng.random_range(0..alt.len());
            let old = alt[i];
            while alt[i] == old {
                alt[i] = speech[rng.random_range(0..speech.len())];
            }
            lexicon.add(&name, alt)?;
        }
        words.push(name);
    }

    let noise = Normal::new(0.0, spec.noise_std).expect("positive std");
    let mut utterances = Vec::with_capacity(spec.utterances);
    for u in 0..spec.utterances {
        let n_words = rng.random_range(spec.min_words..=spec.max_words);
        let transcript: Vec<String> = (0..n_words)
            .map(|_| words[rng.random_range(0..words.len())].clone())
            .collect();

        // (model state, mean duration) sequence
        let mut plan: Vec<(usize, f64)> = Vec::new();
        let silence_states = |plan: &mut Vec<(usize, f64)>| {
            for pos in 0..phones.hmm_len(phones.silence()) {
                plan.push((phones.model_state(phones.silence(), pos), spec.mean_silence_duration));
            }
        };
        silence_states(&mut plan);
        for (i, word) in transcript.iter().enumerate() {
            let prons = lexicon.pronunciations(word)?;
            let pron = &prons[rng.random_range(0..prons.len())];
            for &p in pron {
                for pos in 0..phones.hmm_len(p) {
                    plan.push((phones.model_state(p, pos), spec.mean_state_duration));
                }
            }
            if i + 1 < transcript.len() && rng.random_bool(spec.short_pause_prob) {
                if let Some(sp) = phones.short_pause() {
                    plan.push((phones.model_state(sp, 0), spec.mean_state_duration));
                }
            }
        }
        silence_states(&mut plan);

        let mut states = Vec::new();
        for (state, mean) in plan {
            let d = duration(&mut rng, mean);
            states.extend(std::iter::repeat_n(state, d));
        }
        let mut features = Array2::<f64>::zeros((states.len(), spec.dim));
        for (t, &s) in states.iter().enumerate() {
            for d in 0..spec.dim {
                let v = means[[s, d]] + noise.sample(&mut rng);
                features[[t, d]] = v as f32 as f64;
            }
        }
        utterances.push(Utterance {
            id: format!("utt{u:04}"),
            features,
            transcript,
            ground_truth: Some(Alignment::from_frame_states(&states)),
        });
    }

    Ok(SyntheticCorpus {
        corpus: Corpus::new(phones, lexicon, utterances)?,
        means,
    })
}

/// Phone-level frame accuracy of `hyp` against `reference` over the
/// utterances both contain; `None` if nothing overlaps.
pub fn frame_accuracy(hyp: &Alignments, reference: &Alignments, phones: &PhoneSet) -> Option<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (id, r) in reference {
        let Some(h) = hyp.get(id) else { continue };
        let (hs, rs) = (h.frame_states(), r.frame_states());
        if hs.len() != rs.len() {
            continue;
        }
        total += rs.len();
        correct += hs
            .iter()
            .zip(&rs)
            .filter(|(a, b)| phones.state_phone(**a) == phones.state_phone(**b))
            .count();
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Segments of a ground-truth alignment, re-exported for tests and tools.
pub fn segments_of(a: &Alignment) -> &[Segment] {
    a.segments()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            phones: 4,
            utterances: 12,
            vocabulary: 6,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn constant_signal_has_zero_deltas() {
        let f = Array2::from_elem((7, 3), 2.5);
        let out = add_deltas(f.view());
        assert_eq!(out.dim(), (7, 9));
        assert!(out.slice(s![.., 3..]).iter().all(|&v| v == 0.0));
        assert_eq!(out.slice(s![.., ..3]), f);
    }

    #[test]
    fn ramp_has_slope_delta_in_interior() {
        let f = Array2::from_shape_fn((10, 1), |(t, _)| 0.5 * t as f64 + 1.0);
        let out = add_deltas(f.view());
        for t in 2..8 {
            assert_abs_diff_eq!(out[[t, 1]], 0.5, epsilon = 1e-12);
        }
    }

    /// Direct evaluation of the ±2 regression formula.
    fn reference_delta(x: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        let at = |i: isize| x[i.clamp(0, n - 1) as usize];
        (0..n)
            .map(|t| {
                (1.0 * (at(t + 1) - at(t - 1)) + 2.0 * (at(t + 2) - at(t - 2))) / 10.0
            })
            .collect()
    }

    proptest! {
        #[test]
        fn deltas_match_direct_formula(xs in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let f = Array2::from_shape_vec((xs.len(), 1), xs.clone()).unwrap();
            let out = add_deltas(f.view());
            let d1 = reference_delta(&xs);
            let d2 = reference_delta(&d1);
            for t in 0..xs.len() {
                prop_assert!((out[[t, 0]] - xs[t]).abs() == 0.0);
                prop_assert!((out[[t, 1]] - d1[t]).abs() < 1e-12);
                prop_assert!((out[[t, 2]] - d2[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let c = generate_synthetic(&SyntheticSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn noiseless_limit_is_nearest_mean_separable() {
        let spec = SyntheticSpec {
            noise_std: 1e-6,
            ..small_spec()
        };
        let syn = generate_synthetic(&spec).unwrap();
        for u in &syn.corpus.utterances {
            let truth = u.ground_truth.as_ref().unwrap().frame_states();
            for (t, row) in u.features.rows().into_iter().enumerate() {
                let nearest = (0..syn.means.nrows())
                    .min_by(|&a, &b| {
                        let da: f64 = row.iter().zip(syn.means.row(a)).map(|(x, m)| (x - m).powi(2)).sum();
                        let db: f64 = row.iter().zip(syn.means.row(b)).map(|(x, m)| (x - m).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(nearest, truth[t]);
            }
        }
    }

    #[test]
    fn empirical_means_within_three_standard_errors() {
        let spec = SyntheticSpec {
            utterances: 60,
            ..small_spec()
        };
        let syn = generate_synthetic(&spec).unwrap();
        let s_count = syn.means.nrows();
        let mut sums = Array2::<f64>::zeros((s_count, spec.dim));
        let mut counts = vec![0usize; s_count];
        for u in &syn.corpus.utterances {
            for (t, &s) in u.ground_truth.as_ref().unwrap().frame_states().iter().enumerate() {
                counts[s] += 1;
                for d in 0..spec.dim {
                    sums[[s, d]] += u.features[[t, d]];
                }
            }
        }
        let mut violations = 0;
        let mut checks = 0;
        for s in 0..s_count {
            if counts[s] < 20 {
                continue;
            }
            let bound = 3.0 * spec.noise_std / (counts[s] as f64).sqrt();
            for d in 0..spec.dim {
                checks += 1;
                if (sums[[s, d]] / counts[s] as f64 - syn.means[[s, d]]).abs() > bound {
                    violations += 1;
                }
            }
        }
        // 3-sigma bound: expect ~0.3% violations
        assert!(checks > 50);
        assert!(violations * 100 <= checks, "{violations}/{checks}");
    }

    #[test]
    fn ground_truth_tiles_and_is_graph_consistent() {
        use crate::hmm::graph::{build_numerator_graph, GraphStage};
        let syn = generate_synthetic(&small_spec()).unwrap();
        let c = &syn.corpus;
        for u in &c.utterances {
            let gt = u.ground_truth.as_ref().unwrap();
            assert_eq!(gt.num_frames(), u.num_frames());
            let g = build_numerator_graph(&u.transcript, &c.lexicon, &c.phones, GraphStage::Refined).unwrap();
            gt.check_against(&g).unwrap();
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("fs-corpus-{}", std::process::id()));
        let syn = generate_synthetic(&small_spec()).unwrap();
        save_corpus(&dir, &syn.corpus).unwrap();
        let loaded = load_corpus(&dir, &PhoneOptions::default()).unwrap();
        assert_eq!(loaded, syn.corpus);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_feature_file_names_offset() {
        let f = Array2::from_elem((3, 2), 1.0);
        let bytes = encode_features(f.view());
        let err = decode_features(Path::new("u.fea"), &bytes[..22]).unwrap_err();
        assert!(matches!(err, Error::Binary { offset: 21, .. }), "{err}");
        assert!(err.to_string().contains("offset 21"));
        assert!(decode_features(Path::new("u.fea"), b"FSFT").is_err());
    }

    #[test]
    fn empty_transcript_line_is_silence_only() {
        let t = parse_transcripts(Path::new("t"), "u1\t\nu2\tw1 w2\nu3\n").unwrap();
        assert_eq!(t[0], ("u1".to_string(), vec![]));
        assert_eq!(t[1].1, vec!["w1", "w2"]);
        assert_eq!(t[2].1.len(), 0);
    }

    #[test]
    fn corpus_is_sorted_by_id() {
        let syn = generate_synthetic(&small_spec()).unwrap();
        let mut utts = syn.corpus.utterances.clone();
        utts.reverse();
        let c = Corpus::new(syn.corpus.phones.clone(), syn.corpus.lexicon.clone(), utts).unwrap();
        assert!(c.utterances.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn frame_accuracy_counts_phone_matches() {
        let ps = small_spec().phone_set().unwrap();
        let mut r = Alignments::new();
        r.insert("u".into(), Alignment::from_frame_states(&[0, 1, 2, 3, 4, 5, 0, 1, 2, 2]));
        assert_eq!(frame_accuracy(&r, &r, &ps), Some(1.0));
        let mut h = Alignments::new();
        // same phone, different state still counts; last frame wrong phone
        h.insert("u".into(), Alignment::from_frame_states(&[0, 0, 2, 3, 3, 5, 0, 1, 2, 3]));
        assert_eq!(frame_accuracy(&h, &r, &ps), Some(0.9));
    }

    #[test]
    fn spec_config_rejects_unknown_keys() {
        let cfg = FlatConfig::from_pairs([("phones", "6"), ("bogus", "1")]);
        assert!(SyntheticSpec::from_config(cfg).is_err());
        let cfg = FlatConfig::from_pairs([("noise_std", "0")]);
        assert!(SyntheticSpec::from_config(cfg).is_err());
    }
}
