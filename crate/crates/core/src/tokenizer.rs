//! Frequency-merged subword tokenizers reporting character-level spans.
//!
//! Tokenization is greedy longest-match over a merged vocabulary.
//! Whitespace is a hard segmentation boundary: spans never cross it, and a
//! subword that begins a word is a distinct vocabulary entry from the same
//! characters mid-word (stored with a leading `▁` marker). Two tokenizers
//! trained with different vocabulary sizes or seeds therefore segment the
//! same text differently while tiling the same non-whitespace characters,
//! which is exactly what the span-matching alignment consumes.
//!
//! A model subword whose span overlaps no embedder subword would require
//! the two tokenizers to disagree on whitespace; the hard whitespace
//! boundary rules that out by construction.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Marker prefix for word-initial vocabulary entries.
pub const WORD_MARKER: char = '\u{2581}';

/// A token with its half-open character span into the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subword {
    /// Raw characters covered by the span (no word marker).
    pub text: String,
    /// `(start_char, end_char)` into the tokenized text.
    pub span: (usize, usize),
    /// Vocabulary index.
    pub id: usize,
}

/// An ordered subword vocabulary; index = position in `entries`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, usize>,
    max_entry_chars: usize,
}

impl Vocabulary {
    pub fn from_entries(entries: Vec<String>) -> Result<Vocabulary> {
        if entries.len() < SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary must hold at least the {} special tokens",
                SPECIALS.len()
            )));
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if entries[i] != *special {
                return Err(Error::Config(format!(
                    "vocabulary entry {i} must be `{special}`, found `{}`",
                    entries[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if index.insert(entry.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{entry}`")));
            }
        }
        let max_entry_chars = entries
            .iter()
            .skip(SPECIALS.len())
            .map(|e| e.trim_start_matches(WORD_MARKER).chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocabulary {
            entries,
            index,
            max_entry_chars,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Entry string as stored (word-initial entries carry the marker).
    pub fn entry(&self, id: usize) -> &str {
        &self.entries[id]
    }

    /// Entry characters without the word marker.
    pub fn entry_text(&self, id: usize) -> &str {
        self.entries[id].strip_prefix(WORD_MARKER).unwrap_or(&self.entries[id])
    }

    pub fn is_word_initial(&self, id: usize) -> bool {
        self.entries[id].starts_with(WORD_MARKER)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    fn lookup(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Greedy longest-match segmentation with character spans.
    ///
    /// Whitespace runs separate words; unknown characters map to `<unk>`
    /// with a one-character span. Spans are ordered, non-overlapping, and
    /// tile every non-whitespace character.
    pub fn tokenize_with_spans(&self, text: &str) -> Vec<Subword> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            if chars[pos].is_whitespace() {
                pos += 1;
                continue;
            }
            let word_start = pos;
            let mut word_end = pos;
            while word_end < chars.len() && !chars[word_end].is_whitespace() {
                word_end += 1;
            }
            self.tokenize_word(&chars, word_start, word_end, &mut out);
            pos = word_end;
        }
        out
    }

    fn tokenize_word(&self, chars: &[char], start: usize, end: usize, out: &mut Vec<Subword>) {
        let mut pos = start;
        while pos < end {
            let initial = pos == start;
            let longest = (end - pos).min(self.max_entry_chars);
            let mut matched = None;
            let mut key = String::new();
            for len in (1..=longest).rev() {
                key.clear();
                if initial {
                    key.push(WORD_MARKER);
                }
                key.extend(&chars[pos..pos + len]);
                if let Some(id) = self.lookup(&key) {
                    matched = Some((id, len));
                    break;
                }
            }
            let (id, len) = matched.unwrap_or((UNK, 1));
            out.push(Subword {
                text: chars[pos..pos + len].iter().collect(),
                span: (pos, pos + len),
                id,
            });
            pos += len;
        }
    }

    /// Tokenizes a fragment that is not necessarily a whole word; the
    /// first subword matches word-initial entries only when
    /// `word_initial` is set. Used to ground standalone vocabulary
    /// entries of another tokenizer.
    pub fn tokenize_fragment(&self, text: &str, word_initial: bool) -> Vec<Subword> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        if chars.is_empty() {
            return out;
        }
        if word_initial {
            self.tokenize_word(&chars, 0, chars.len(), &mut out);
            return out;
        }
        // Continuation fragment: every position matches unmarked entries.
        let mut pos = 0;
        while pos < chars.len() {
            let longest = (chars.len() - pos).min(self.max_entry_chars);
            let mut matched = None;
            let mut key = String::new();
            for len in (1..=longest).rev() {
                key.clear();
                key.extend(&chars[pos..pos + len]);
                if let Some(id) = self.lookup(&key) {
                    matched = Some((id, len));
                    break;
                }
            }
            let (id, len) = matched.unwrap_or((UNK, 1));
            out.push(Subword {
                text: chars[pos..pos + len].iter().collect(),
                span: (pos, pos + len),
                id,
            });
            pos += len;
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenize_with_spans(text).iter().map(|s| s.id).collect()
    }

    /// Reconstructs text from token ids using the word-marker convention.
    /// `<pad>`, `<bos>` and `<eos>` are skipped; `<unk>` renders as its
    /// literal entry (the original characters are not recoverable).
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS || id >= self.entries.len() {
                continue;
            }
            let new_word = id == UNK || self.is_word_initial(id);
            if new_word && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(if id == UNK { SPECIALS[UNK] } else { self.entry_text(id) });
        }
        out
    }

    /// Like [`Vocabulary::decode`] but also reports each id's character
    /// span in the produced text (`None` for skipped specials).
    pub fn decode_with_spans(&self, ids: &[usize]) -> (String, Vec<Option<(usize, usize)>>) {
        let mut out = String::new();
        let mut len_chars = 0usize;
        let mut spans = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == PAD || id == BOS || id == EOS || id >= self.entries.len() {
                spans.push(None);
                continue;
            }
            let new_word = id == UNK || self.is_word_initial(id);
            if new_word && !out.is_empty() {
                out.push(' ');
                len_chars += 1;
            }
            let piece = if id == UNK { SPECIALS[UNK] } else { self.entry_text(id) };
            let piece_chars = piece.chars().count();
            spans.push(Some((len_chars, len_chars + piece_chars)));
            out.push_str(piece);
            len_chars += piece_chars;
        }
        (out, spans)
    }

    /// Persists the vocabulary as a newline-delimited UTF-8 list;
    /// index = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = String::new();
        for entry in &self.entries {
            text.push_str(entry);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        Vocabulary::from_entries(text.lines().map(String::from).collect())
    }
}

/// Reconstructs text from subwords by concatenating span-ordered texts,
/// restoring a single space at each whitespace gap.
pub fn detokenize(subwords: &[Subword]) -> String {
    let mut out = String::new();
    let mut prev_end = None;
    for sw in subwords {
        if let Some(end) = prev_end {
            if sw.span.0 > end {
                out.push(' ');
            }
        }
        out.push_str(&sw.text);
        prev_end = Some(sw.span.1);
    }
    out
}

fn tie_hash(seed: u64, left: &str, right: &str) -> u64 {
    // FNV-1a over the seed and pair; only used to order equal-frequency
    // merge candidates, so different seeds produce different vocabularies
    // on tie-heavy corpora.
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in left.bytes().chain([0xffu8]).chain(right.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Trains a vocabulary by greedy highest-frequency pair merging.
///
/// Every character of the corpus stays representable: the base inventory
/// (word-initial and continuation single characters) is always included,
/// so `vocab_size` must cover specials plus that inventory. Ties between
/// equal-frequency pairs are broken by a seeded hash, then lexically.
pub fn train_tokenizer(corpus: &[String], vocab_size: usize, seed: u64) -> Result<Vocabulary> {
    let mut word_counts: HashMap<Vec<String>, u64> = HashMap::new();
    for text in corpus {
        for word in text.split_whitespace() {
            let mut symbols = Vec::new();
            for (i, ch) in word.chars().enumerate() {
                if i == 0 {
                    symbols.push(format!("{WORD_MARKER}{ch}"));
                } else {
                    symbols.push(ch.to_string());
                }
            }
            *word_counts.entry(symbols).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Config("tokenizer corpus contains no words".into()));
    }

    let mut base: Vec<String> = word_counts
        .keys()
        .flat_map(|symbols| symbols.iter().cloned())
        .collect::<std::collections::BTreeSet<String>>()
        .into_iter()
        .collect();
    base.sort();
    let floor = SPECIALS.len() + base.len();
    if vocab_size < floor {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than the character inventory: need at least {floor}"
        )));
    }

    let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    entries.extend(base);

    // Deterministic word order for pair counting.
    let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().collect();
    words.sort();

    while entries.len() < vocab_size {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts.entry((pair[0].clone(), pair[1].clone())).or_default() += count;
            }
        }
        let best = pair_counts.into_iter().max_by(|((al, ar), ac), ((bl, br), bc)| {
            ac.cmp(bc)
                .then_with(|| tie_hash(seed, bl, br).cmp(&tie_hash(seed, al, ar)))
                .then_with(|| (bl, br).cmp(&(al, ar)))
        });
        let Some(((left, right), _)) = best else {
            break; // nothing left to merge
        };
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        entries.push(merged);
    }

    Vocabulary::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manual_vocab(extra: &[&str]) -> Vocabulary {
        let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        entries.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_entries(entries).unwrap()
    }

    #[test]
    fn single_character_base_is_present() {
        let vocab = train_tokenizer(&["aaaa".to_string()], 8, 0).unwrap();
        let entries: Vec<&str> = (0..vocab.size()).map(|i| vocab.entry(i)).collect();
        assert!(entries.contains(&"a"), "{entries:?}");
        assert!(entries.contains(&"\u{2581}a"), "{entries:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<String> = ["ab ab cd", "abcd ab", "cd cd ab"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let a = train_tokenizer(&corpus, 16, 3).unwrap();
        let b = train_tokenizer(&corpus, 16, 3).unwrap();
        let ea: Vec<&str> = (0..a.size()).map(|i| a.entry(i)).collect();
        let eb: Vec<&str> = (0..b.size()).map(|i| b.entry(i)).collect();
        assert_eq!(ea, eb);
    }

    #[test]
    fn merge_sequence_matches_manual_oracle() {
        // Hand-run merge order on a small corpus over {a, b}:
        //   words: ab x4, aab x2, aa x1, bb x1
        //   round 1 pair counts: (▁a,b)=4  (▁a,a)=3  (a,b)=2  (▁b,b)=1  -> ▁ab
        //   round 2 pair counts: (▁a,a)=3  (a,b)=2   (▁b,b)=1           -> ▁aa
        //   round 3 pair counts: (▁aa,b)=2 (▁b,b)=1                     -> ▁aab
        // Unique maxima each round, so the result is seed-independent.
        let corpus = vec!["ab ab aab aa".to_string(), "ab ab aab bb".to_string()];
        let vocab = train_tokenizer(&corpus, 11, 123).unwrap();
        let merges: Vec<&str> = (8..11).map(|i| vocab.entry(i)).collect();
        assert_eq!(merges, vec!["\u{2581}ab", "\u{2581}aa", "\u{2581}aab"]);
        // Base inventory sorted after specials.
        assert_eq!(vocab.entry(4), "a");
        assert_eq!(vocab.entry(5), "b");
        assert_eq!(vocab.entry(6), "\u{2581}a");
        assert_eq!(vocab.entry(7), "\u{2581}b");
    }

    #[test]
    fn vocab_size_below_inventory_is_config_error() {
        let err = train_tokenizer(&["abcdefgh".to_string()], 8, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("character inventory"));
    }

    #[test]
    fn empty_text_yields_no_subwords() {
        let vocab = manual_vocab(&["\u{2581}a", "a"]);
        assert!(vocab.tokenize_with_spans("").is_empty());
    }

    /// All tilings of `word` using the vocabulary, as lists of lengths.
    fn enumerate_segmentations(vocab: &Vocabulary, word: &str) -> Vec<Vec<usize>> {
        fn go(vocab: &Vocabulary, chars: &[char], pos: usize, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos == chars.len() {
                out.push(acc.clone());
                return;
            }
            for len in 1..=chars.len() - pos {
                let mut key = String::new();
                if pos == 0 {
                    key.push(WORD_MARKER);
                }
                key.extend(&chars[pos..pos + len]);
                if vocab.lookup(&key).is_some() {
                    acc.push(len);
                    go(vocab, chars, pos + len, acc, out);
                    acc.pop();
                }
            }
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        go(vocab, &chars, 0, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn longest_match_agrees_with_segmentation_enumeration() {
        let vocab = manual_vocab(&["\u{2581}a", "\u{2581}b", "\u{2581}ab", "a", "b", "ab"]);
        let got = vocab.tokenize_with_spans("ab");
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].text, "ab");
        assert_eq!(got[0].span, (0, 2));

        // Greedy-longest = at each position, the segmentation taking the
        // longest available token; derive it from the full enumeration.
        let all = enumerate_segmentations(&vocab, "ab");
        let greedy = all
            .iter()
            .max_by(|x, y| {
                // lexicographically largest length sequence == greedy
                x.iter().cmp(y.iter())
            })
            .unwrap();
        let got_lens: Vec<usize> = got.iter().map(|s| s.span.1 - s.span.0).collect();
        assert_eq!(&got_lens, greedy);
    }

    #[test]
    fn unknown_characters_map_to_unk_with_unit_span() {
        let vocab = manual_vocab(&["\u{2581}a", "a"]);
        let toks = vocab.tokenize_with_spans("aXa");
        assert_eq!(toks.len(), 3);
        assert_eq!(toks[1].id, UNK);
        assert_eq!(toks[1].span, (1, 2));
        assert_eq!(toks[1].text, "X");
        // Spans still tile the word.
        assert_eq!(detokenize(&toks), "aXa");
    }

    #[test]
    fn decode_round_trips_known_text() {
        let corpus: Vec<String> =
            ["lumina kor tal", "luminb kor", "tal tal lumina"].iter().map(|s| s.to_string()).collect();
        let vocab = train_tokenizer(&corpus, 40, 1).unwrap();
        for text in &corpus {
            let ids = vocab.encode(text);
            assert_eq!(vocab.decode(&ids), *text);
        }
    }

    #[test]
    fn decode_with_spans_reports_positions() {
        let corpus = vec!["ab cd".to_string()];
        let vocab = train_tokenizer(&corpus, 12, 0).unwrap();
        let ids = vocab.encode("ab cd");
        let (text, spans) = vocab.decode_with_spans(&ids);
        assert_eq!(text, "ab cd");
        let chars: Vec<char> = text.chars().collect();
        for (i, span) in spans.iter().enumerate() {
            let (s, e) = span.unwrap();
            let piece: String = chars[s..e].iter().collect();
            assert_eq!(piece, vocab.entry_text(ids[i]));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let corpus = vec!["ab ba aab".to_string()];
        let vocab = train_tokenizer(&corpus, 12, 5).unwrap();
        vocab.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.size(), vocab.size());
        for i in 0..vocab.size() {
            assert_eq!(back.entry(i), vocab.entry(i));
        }
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            proptest::collection::vec(proptest::sample::select(vec!['a', 'b', 'c', 'd']), 1..7),
            1..8,
        )
        .prop_map(|words| {
            words
                .into_iter()
                .map(|w| w.into_iter().collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    proptest! {
        #[test]
        fn round_trip_reconstructs_input(text in arb_text()) {
            let corpus = vec!["ab cd abcd dcba aabb".to_string(), text.clone()];
            let vocab = train_tokenizer(&corpus, 30, 0).unwrap();
            let toks = vocab.tokenize_with_spans(&text);
            prop_assert_eq!(detokenize(&toks), text.clone());
            prop_assert_eq!(vocab.decode(&vocab.encode(&text)), text);
        }

        #[test]
        fn spans_are_ordered_and_tile_non_whitespace(text in arb_text(), v1 in 8usize..40, v2 in 8usize..40) {
            let corpus = vec!["ab cd abcd dcba aabb".to_string(), text.clone()];
            let va = train_tokenizer(&corpus, v1.max(12), 1).unwrap();
            let vb = train_tokenizer(&corpus, v2.max(12), 2).unwrap();
            let cover = |vocab: &Vocabulary| {
                let mut covered = Vec::new();
                let mut prev_end = 0usize;
                for sw in vocab.tokenize_with_spans(&text) {
                    prop_assert!(sw.span.0 < sw.span.1);
                    prop_assert!(sw.span.0 >= prev_end);
                    prev_end = sw.span.1;
                    covered.extend(sw.span.0..sw.span.1);
                }
                Ok(covered)
            };
            let expected: Vec<usize> = text
                .chars()
                .enumerate()
                .filter(|(_, c)| !c.is_whitespace())
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(cover(&va)?, expected.clone());
            prop_assert_eq!(cover(&vb)?, expected);
        }
    }
}
