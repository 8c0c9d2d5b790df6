//! Token inventories for every task granularity.
//!
//! Id 0 is reserved for the CTC blank in every vocabulary; real tokens use the
//! contiguous range `1..=len()`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Id of the CTC blank in every vocabulary.
pub const BLANK: usize = 0;

/// Default number of trigrams/fourgrams kept by [`build_ngram_vocab`].
pub const DEFAULT_TOP_K: usize = 1000;

/// Shared view over unigram alphabets and n-gram vocabularies.
pub trait TokenSet {
    /// Granularity of the tokens: 1 for characters, `n` for n-grams.
    fn granularity(&self) -> usize;

    /// Number of non-blank tokens.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token text for a non-blank id.
    fn token_text(&self, id: usize) -> Option<String>;
}

/// Character inventory of the unigram task. Case-sensitive, sorted by code point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    tokens: Vec<char>,
    id_of: HashMap<char, usize>,
}

impl Alphabet {
    /// Builds an alphabet from an explicit token list. Tokens must be unique.
    pub fn from_tokens(tokens: Vec<char>) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, &c) in tokens.iter().enumerate() {
            if id_of.insert(c, i + 1).is_some() {
                return Err(Error::Config(format!("duplicate alphabet token {c:?}")));
            }
        }
        Ok(Alphabet { tokens, id_of })
    }

    pub fn tokens(&self) -> &[char] {
        &self.tokens
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.id_of.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(1).and_then(|i| self.tokens.get(i)).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.id_of.contains_key(&c)
    }

    /// Maps ids back to text. Blank and out-of-range ids are skipped.
    pub fn ids_to_text(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| self.char_of(id)).collect()
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let lines: Vec<String> = self.tokens.iter().map(|c| c.to_string()).collect();
        write_dump(path, 1, &lines)
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let (n, lines) = read_dump(path)?;
        if n != 1 {
            return Err(Error::parse(path, 1, format!("expected n=1, found n={n}")));
        }
        let mut tokens = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => tokens.push(c),
                _ => return Err(Error::parse(path, i + 2, "alphabet token must be one character")),
            }
        }
        Alphabet::from_tokens(tokens)
    }
}

impl TokenSet for Alphabet {
    fn granularity(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.tokens.len()
    }

    fn token_text(&self, id: usize) -> Option<String> {
        self.char_of(id).map(String::from)
    }
}

/// Lowercase letter n-grams used as targets of an auxiliary task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramVocab {
    n: usize,
    grams: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl NgramVocab {
    /// Builds a vocabulary from explicit grams. Every gram must be `n` letters a-z.
    pub fn from_grams(n: usize, grams: Vec<String>) -> Result<Self> {
        if !(2..=4).contains(&n) {
            return Err(Error::Config(format!("n-gram order must be 2, 3 or 4, got {n}")));
        }
        let mut id_of = HashMap::with_capacity(grams.len());
        for (i, g) in grams.iter().enumerate() {
            if g.len() != n || !g.bytes().all(|b| b.is_ascii_lowercase()) {
                return Err(Error::Config(format!("invalid {n}-gram {g:?}")));
            }
            if id_of.insert(g.clone(), i + 1).is_some() {
                return Err(Error::Config(format!("duplicate gram {g:?}")));
            }
        }
        Ok(NgramVocab { n, grams, id_of })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grams(&self) -> &[String] {
        &self.grams
    }

    pub fn id_of(&self, gram: &str) -> Option<usize> {
        self.id_of.get(gram).copied()
    }

    pub fn gram_of(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.grams.get(i))
            .map(String::as_str)
    }

    /// Copy of this vocabulary without the listed grams; ids are reassigned.
    pub fn without(&self, removed: &[&str]) -> NgramVocab {
        let grams = self
            .grams
            .iter()
            .filter(|g| !removed.contains(&g.as_str()))
            .cloned()
            .collect();
        NgramVocab::from_grams(self.n, grams).expect("subset of a valid vocabulary")
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        write_dump(path, self.n, &self.grams)
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let (n, grams) = read_dump(path)?;
        NgramVocab::from_grams(n, grams).map_err(|e| Error::parse(path, 1, e.to_string()))
    }
}

impl TokenSet for NgramVocab {
    fn granularity(&self) -> usize {
        self.n
    }

    fn len(&self) -> usize {
        self.grams.len()
    }

    fn token_text(&self, id: usize) -> Option<String> {
        self.gram_of(id).map(String::from)
    }
}

/// Target sequence for one task. Never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSeq {
    pub n: usize,
    pub ids: Vec<usize>,
}

impl LabelSeq {
    pub fn new(n: usize, ids: Vec<usize>) -> Self {
        LabelSeq { n, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Collects the distinct characters of all transcripts, sorted by code point.
pub fn build_alphabet<S: AsRef<str>>(transcripts: &[S]) -> Result<Alphabet> {
    let chars: BTreeSet<char> = transcripts.iter().flat_map(|t| t.as_ref().chars()).collect();
    if chars.is_empty() {
        return Err(Error::Config("cannot build an alphabet from empty transcripts".into()));
    }
    Alphabet::from_tokens(chars.into_iter().collect())
}

/// Maximal runs of a-z after lowercasing. Every other character splits runs.
pub fn letter_runs(text: &str) -> Vec<Vec<u8>> {
    let mut runs = Vec::new();
    let mut cur = Vec::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_lowercase() {
            cur.push(c as u8);
        } else if !cur.is_empty() {
            runs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs
}

/// Builds the vocabulary of task `n`.
///
/// Bigrams are the full 26x26 set regardless of the corpus. Trigrams and
/// fourgrams keep the `top_k` most frequent windows over the lowercase letter
/// runs of the corpus, ties broken lexicographically.
pub fn build_ngram_vocab<S: AsRef<str>>(transcripts: &[S], n: usize, top_k: usize) -> Result<NgramVocab> {
    match n {
        2 => {
            let grams = (b'a'..=b'z')
                .flat_map(|a| (b'a'..=b'z').map(move |b| String::from_utf8(vec![a, b]).unwrap()))
                .collect();
            NgramVocab::from_grams(2, grams)
        }
        3 | 4 => {
            if top_k == 0 {
                return Err(Error::Config("top_k must be at least 1".into()));
            }
            let mut counts: HashMap<&[u8], usize> = HashMap::new();
            let runs: Vec<Vec<u8>> = transcripts.iter().flat_map(|t| letter_runs(t.as_ref())).collect();
            for run in &runs {
                for w in run.windows(n) {
                    *counts.entry(w).or_default() += 1;
                }
            }
            let mut ranked: Vec<(&[u8], usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            let grams = ranked
                .into_iter()
                .take(top_k)
                .map(|(g, _)| String::from_utf8(g.to_vec()).unwrap())
                .collect();
            NgramVocab::from_grams(n, grams)
        }
        _ => Err(Error::Config(format!("n-gram order must be 2, 3 or 4, got {n}"))),
    }
}

/// Encodes `text` character by character.
pub fn encode_unigrams(text: &str, alphabet: &Alphabet) -> Result<LabelSeq> {
    let ids = text
        .chars()
        .enumerate()
        .map(|(pos, ch)| alphabet.id_of(ch).ok_or(Error::Encoding { ch, pos }))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelSeq::new(1, ids))
}

fn write_dump(path: &Path, n: usize, tokens: &[String]) -> Result<()> {
    let mut out = format!("#blank={BLANK} n={n}\n");
    for t in tokens {
        out.push_str(t);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_dump(path: &Path) -> Result<(usize, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    let n = header
        .strip_prefix("#blank=0 n=")
        .and_then(|s| s.trim_end_matches('\r').parse::<usize>().ok())
        .ok_or_else(|| Error::parse(path, 1, format!("bad vocabulary header {header:?}")))?;
    let mut tokens: Vec<String> = lines.map(String::from).collect();
    // the file ends with a newline, which leaves one empty trailing piece
    if tokens.last().is_some_and(|t| t.is_empty()) {
        tokens.pop();
    }
    Ok((n, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alphabet_from_two_strings() {
        let a = build_alphabet(&["ab", "ba"]).unwrap();
        assert_eq!(a.tokens(), &['a', 'b']);
        assert_eq!(a.id_of('a'), Some(1));
        assert_eq!(a.id_of('b'), Some(2));
    }

    #[test]
    fn alphabet_is_sorted() {
        let a = build_alphabet(&["better"]).unwrap();
        assert_eq!(a.tokens(), &['b', 'e', 'r', 't']);
    }

    #[test]
    fn alphabet_rejects_empty_input() {
        assert!(matches!(build_alphabet(&[""]), Err(Error::Config(_))));
        assert!(matches!(build_alphabet::<&str>(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn all_bigrams() {
        let v = build_ngram_vocab(&["whatever"], 2, 1).unwrap();
        assert_eq!(v.len(), 676);
        assert_eq!(v.gram_of(1), Some("aa"));
        assert_eq!(v.gram_of(676), Some("zz"));
    }

    #[test]
    fn trigram_ties_break_lexicographically() {
        let v = build_ngram_vocab(&["better"], 3, 2).unwrap();
        assert_eq!(v.grams(), &["bet".to_string(), "ett".to_string()]);
    }

    #[test]
    fn trigram_frequency_wins_over_order() {
        let v = build_ngram_vocab(&["zzz zzz abc"], 3, 1).unwrap();
        assert_eq!(v.grams(), &["zzz".to_string()]);
    }

    #[test]
    fn short_runs_give_empty_vocab() {
        let v = build_ngram_vocab(&["ab"], 3, 10).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn bad_order_is_rejected() {
        assert!(matches!(build_ngram_vocab(&["abc"], 5, 10), Err(Error::Config(_))));
        assert!(matches!(build_ngram_vocab(&["abc"], 1, 10), Err(Error::Config(_))));
    }

    #[test]
    fn encode_better() {
        let a = build_alphabet(&["better"]).unwrap();
        let ids = encode_unigrams("better", &a).unwrap().ids;
        let id = |c| a.id_of(c).unwrap();
        assert_eq!(ids, vec![id('b'), id('e'), id('t'), id('t'), id('e'), id('r')]);
        assert!(encode_unigrams("", &a).unwrap().is_empty());
    }

    #[test]
    fn encode_reports_unknown_position() {
        let a = build_alphabet(&["be"]).unwrap();
        match encode_unigrams("bé", &a) {
            Err(Error::Encoding { ch, pos }) => {
                assert_eq!(ch, 'é');
                assert_eq!(pos, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = build_alphabet(&["the cat, 42"]).unwrap();
        let p = dir.path().join("uni.txt");
        a.write_dump(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("#blank=0 n=1\n \n"));
        assert_eq!(Alphabet::read_dump(&p).unwrap(), a);

        let v = build_ngram_vocab(&["the cat sat on the mat"], 3, 5).unwrap();
        let p = dir.path().join("tri.txt");
        v.write_dump(&p).unwrap();
        assert_eq!(NgramVocab::read_dump(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn encode_round_trips(text in "[a-zA-Z ,.]{0,40}") {
            let a = build_alphabet(&["abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ ,."]).unwrap();
            let seq = encode_unigrams(&text, &a).unwrap();
            prop_assert_eq!(a.ids_to_text(&seq.ids), text);
        }

        #[test]
        fn topk_is_prefix_of_unbounded(corpus in proptest::collection::vec("[a-e ]{0,20}", 1..5), k in 1usize..30, n in 3usize..5) {
            let full = build_ngram_vocab(&corpus, n, usize::MAX).unwrap();
            let part = build_ngram_vocab(&corpus, n, k).unwrap();
            prop_assert!(part.grams().iter().all(|g| full.id_of(g).is_some()));
            prop_assert_eq!(part.grams(), &full.grams()[..part.len()]);
        }
    }
}
