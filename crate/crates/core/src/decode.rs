//! Turning unigram posterior grids into text.
//!
//! Hypotheses are ranked by
//! `ln P_ctc(y|X) + ln(10) * alpha * lm_score(y) + beta * words(y)`, where
//! `lm_score` accumulates log10 language-model terms. A character LM scores
//! every appended character; a word LM scores each word when it is completed
//! by a space or by the end of the grid. Both add an end-of-sentence term at
//! the end of the grid. The word bonus only applies with a word LM.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, log_add, PosteriorGrid};
use crate::error::{Error, Result};
use crate::lm::{char_token, LmLevel, NgramLm, BOS, EOS};
use crate::vocab::{Alphabet, LabelSeq, BLANK};

/// Refusal threshold for [`exhaustive_decode`]: total number of candidate sequences.
pub const EXHAUSTIVE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LmKind {
    #[default]
    None,
    Char,
    Word,
}

impl std::str::FromStr for LmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LmKind::None),
            "char" => Ok(LmKind::Char),
            "word" => Ok(LmKind::Word),
            other => Err(Error::Config(format!("unknown LM kind {other:?} (expected none, char or word)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamParams {
    pub width: usize,
    pub char_lm_weight: f64,
    pub word_lm_weight: f64,
    pub word_bonus: f64,
    pub lm: LmKind,
}

impl Default for BeamParams {
    fn default() -> Self {
        BeamParams {
            width: 64,
            char_lm_weight: 0.8,
            word_lm_weight: 0.8,
            word_bonus: 1.0,
            lm: LmKind::None,
        }
    }
}

impl BeamParams {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        for (name, v) in [
            ("char_lm_weight", self.char_lm_weight),
            ("word_lm_weight", self.word_lm_weight),
            ("word_bonus", self.word_bonus),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A label prefix with its CTC mass split by the last emitted symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub prefix: LabelSeq,
    /// ln probability of alignments ending in blank.
    pub p_blank: f64,
    /// ln probability of alignments ending in the last label.
    pub p_nonblank: f64,
    /// Accumulated unweighted log10 LM terms.
    pub lm_score: f64,
    /// Words completed so far (word LM only).
    pub words: usize,
}

impl Hypothesis {
    pub fn ctc_log_prob(&self) -> f64 {
        log_add(self.p_blank, self.p_nonblank)
    }
}

/// Best path: per-frame argmax (lowest id on ties), squashed, mapped to text.
pub fn greedy_decode(grid: &PosteriorGrid, alphabet: &Alphabet) -> String {
    let lp = grid.log_probs();
    let mut out = String::new();
    let mut prev = BLANK;
    for row in lp.rows() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best != BLANK && best != prev {
            if let Some(c) = alphabet.char_of(best) {
                out.push(c);
            }
        }
        prev = best;
    }
    out
}

/// LM bookkeeping shared by the beam search and the oracle so both compute
/// identical scores for identical prefixes.
struct Fusion<'a> {
    lm: Option<&'a NgramLm>,
    kind: LmKind,
    alpha: f64,
    beta: f64,
    alphabet: &'a Alphabet,
}

impl<'a> Fusion<'a> {
    fn new(alphabet: &'a Alphabet, lm: Option<&'a NgramLm>, params: &BeamParams) -> Result<Self> {
        params.validate()?;
        let (alpha, beta) = match params.lm {
            LmKind::None => (0.0, 0.0),
            LmKind::Char => (params.char_lm_weight, 0.0),
            LmKind::Word => (params.word_lm_weight, params.word_bonus),
        };
        let lm = match (params.lm, lm) {
            (LmKind::None, _) => None,
            (kind, None) => return Err(Error::Config(format!("{kind:?} LM fusion requested but no LM supplied"))),
            (kind, Some(lm)) => {
                let want = if kind == LmKind::Char { LmLevel::Char } else { LmLevel::Word };
                if lm.level() != want {
                    return Err(Error::Config(format!(
                        "decoder expects a {want:?}-level LM but the model is {:?}-level",
                        lm.level()
                    )));
                }
                if want == LmLevel::Char {
                    if let Some(c) = alphabet.tokens().iter().find(|&&c| !lm.covers_char(c)) {
                        return Err(Error::Config(format!("character LM does not cover alphabet symbol {c:?}")));
                    }
                }
                Some(lm)
            }
        };
        Ok(Fusion {
            lm,
            kind: params.lm,
            alpha,
            beta,
            alphabet,
        })
    }

    fn text(&self, ids: &[usize]) -> Vec<char> {
        ids.iter().map(|&i| self.alphabet.char_of(i).expect("valid label id")).collect()
    }

    /// log10 term and completed-word count for appending `c` to `prefix`.
    fn extend(&self, prefix: &[char], c: char) -> Result<(f64, usize)> {
        let Some(lm) = self.lm else { return Ok((0.0, 0)) };
        match self.kind {
            LmKind::Char => {
                let keep = prefix.len().min(lm.order().saturating_sub(1));
                let mut ctx: Vec<String> = Vec::with_capacity(keep + 1);
                if keep < lm.order() - 1 {
                    ctx.push(BOS.to_string());
                }
                ctx.extend(prefix[prefix.len() - keep..].iter().map(|&p| char_token(p)));
                Ok((lm.logprob(&ctx, &char_token(c))?, 0))
            }
            LmKind::Word if c == ' ' => self.complete_word(lm, prefix),
            _ => Ok((0.0, 0)),
        }
    }

    fn complete_word(&self, lm: &NgramLm, prefix: &[char]) -> Result<(f64, usize)> {
        let text: String = prefix.iter().collect();
        if text.ends_with(' ') || text.is_empty() {
            return Ok((0.0, 0));
        }
        let mut words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
        let last = words.pop().expect("non-empty trailing word");
        let mut ctx = vec![BOS];
        ctx.extend(words);
        Ok((lm.logprob(&ctx, last)?, 1))
    }

    /// End-of-grid terms.
    fn finish(&self, prefix: &[char]) -> Result<(f64, usize)> {
        let Some(lm) = self.lm else { return Ok((0.0, 0)) };
        match self.kind {
            LmKind::Char => {
                let mut ctx = vec![BOS.to_string()];
                ctx.extend(prefix.iter().map(|&p| char_token(p)));
                Ok((lm.logprob(&ctx, EOS)?, 0))
            }
            LmKind::Word => {
                let (lp, n) = self.complete_word(lm, prefix)?;
                let text: String = prefix.iter().collect();
                let mut ctx = vec![BOS];
                ctx.extend(text.split(' ').filter(|w| !w.is_empty()));
                Ok((lp + lm.logprob(&ctx, EOS)?, n))
            }
            LmKind::None => Ok((0.0, 0)),
        }
    }

    fn weighted(&self, lm_score: f64, words: usize) -> f64 {
        if self.lm.is_none() {
            return 0.0;
        }
        LN_10 * self.alpha * lm_score + self.beta * words as f64
    }
}

/// Descending score, then lexicographically smaller label sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Every prefix reached during one search, stored once. Nodes carry the
/// cumulative LM terms of their prefix, so the LM is queried once per prefix.
struct PrefixTrie {
    parent: Vec<usize>,
    label: Vec<usize>,
    lm_score: Vec<f64>,
    words: Vec<usize>,
    children: HashMap<(usize, usize), usize>,
}

impl PrefixTrie {
    const ROOT: usize = 0;

    fn new() -> Self {
        PrefixTrie {
            parent: vec![usize::MAX],
            label: vec![BLANK],
            lm_score: vec![0.0],
            words: vec![0],
            children: HashMap::new(),
        }
    }

    fn ids(&self, mut node: usize) -> Vec<usize> {
        let mut ids = Vec::new();
        while node != Self::ROOT {
            ids.push(self.label[node]);
            node = self.parent[node];
        }
        ids.reverse();
        ids
    }

    fn child(&mut self, node: usize, c: usize, fusion: &Fusion<'_>) -> Result<usize> {
        if let Some(&k) = self.children.get(&(node, c)) {
            return Ok(k);
        }
        let prefix = fusion.text(&self.ids(node));
        let (d, w) = fusion.extend(&prefix, fusion.alphabet.char_of(c).expect("valid label id"))?;
        let k = self.parent.len();
        self.parent.push(node);
        self.label.push(c);
        self.lm_score.push(self.lm_score[node] + d);
        self.words.push(self.words[node] + w);
        self.children.insert((node, c), k);
        Ok(k)
    }

    /// [`rank`] over trie nodes; label sequences are only built on score ties.
    fn rank(&self, a: (f64, usize), b: (f64, usize)) -> Ordering {
        match b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal) {
            Ordering::Equal => self.ids(a.1).cmp(&self.ids(b.1)),
            other => other,
        }
    }
}

/// Blank and non-blank ending mass of one live prefix.
#[derive(Clone, Copy)]
struct Mass {
    node: usize,
    p_blank: f64,
    p_nonblank: f64,
}

/// Final hypotheses of a prefix beam search, best first, with their total scores.
pub fn beam_search(
    grid: &PosteriorGrid,
    alphabet: &Alphabet,
    lm: Option<&NgramLm>,
    params: &BeamParams,
) -> Result<Vec<(Hypothesis, f64)>> {
    let fusion = Fusion::new(alphabet, lm, params)?;
    let v = grid.vocab_len();
    if v != alphabet.tokens().len() {
        return Err(Error::Contract(format!(
            "grid has {v} labels but the alphabet has {}",
            alphabet.tokens().len()
        )));
    }
    let lp = grid.log_probs();
    let mut trie = PrefixTrie::new();
    let mut beam = vec![Mass {
        node: PrefixTrie::ROOT,
        p_blank: 0.0,
        p_nonblank: f64::NEG_INFINITY,
    }];
    // position of each node in `next`, valid only for nodes listed there
    let mut slot_of: Vec<usize> = Vec::new();
    for t in 0..grid.frames() {
        let row = lp.row(t);
        let mut next: Vec<Mass> = Vec::with_capacity(beam.len() * (v + 1));
        let slot = |node: usize, next: &mut Vec<Mass>, slot_of: &mut Vec<usize>| -> usize {
            if node >= slot_of.len() {
                slot_of.resize(node + 1, usize::MAX);
            }
            let s = slot_of[node];
            if s < next.len() && next[s].node == node {
                return s;
            }
            next.push(Mass {
                node,
                p_blank: f64::NEG_INFINITY,
                p_nonblank: f64::NEG_INFINITY,
            });
            slot_of[node] = next.len() - 1;
            next.len() - 1
        };
        for h in &beam {
            let total = log_add(h.p_blank, h.p_nonblank);
            let last = (h.node != PrefixTrie::ROOT).then(|| trie.label[h.node]);
            let s = slot(h.node, &mut next, &mut slot_of);
            next[s].p_blank = log_add(next[s].p_blank, total + row[BLANK]);
            if let Some(l) = last {
                next[s].p_nonblank = log_add(next[s].p_nonblank, h.p_nonblank + row[l]);
            }
            for c in 1..=v {
                let mass = if Some(c) == last { h.p_blank + row[c] } else { total + row[c] };
                if mass == f64::NEG_INFINITY {
                    continue;
                }
                let child = trie.child(h.node, c, &fusion)?;
                let s = slot(child, &mut next, &mut slot_of);
                next[s].p_nonblank = log_add(next[s].p_nonblank, mass);
            }
        }
        let mut scored: Vec<(f64, Mass)> = next
            .into_iter()
            .map(|m| {
                let s = log_add(m.p_blank, m.p_nonblank) + fusion.weighted(trie.lm_score[m.node], trie.words[m.node]);
                (s, m)
            })
            .filter(|(s, _)| *s > f64::NEG_INFINITY)
            .collect();
        let by_rank = |a: &(f64, Mass), b: &(f64, Mass)| trie.rank((a.0, a.1.node), (b.0, b.1.node));
        if scored.len() > params.width {
            scored.select_nth_unstable_by(params.width - 1, by_rank);
            scored.truncate(params.width);
        }
        scored.sort_by(by_rank);
        beam = scored.into_iter().map(|(_, m)| m).collect();
        if beam.is_empty() {
            return Ok(Vec::new());
        }
    }
    let mut finals = Vec::with_capacity(beam.len());
    for m in beam {
        let ids = trie.ids(m.node);
        let (d, w) = fusion.finish(&fusion.text(&ids))?;
        let mut h = Hypothesis {
            prefix: LabelSeq::new(1, ids),
            p_blank: m.p_blank,
            p_nonblank: m.p_nonblank,
            lm_score: trie.lm_score[m.node],
            words: trie.words[m.node],
        };
        h.lm_score += d;
        h.words += w;
        let s = h.ctc_log_prob() + fusion.weighted(h.lm_score, h.words);
        finals.push((h, s));
    }
    finals.sort_by(|a, b| rank((a.1, &a.0.prefix.ids), (b.1, &b.0.prefix.ids)));
    Ok(finals)
}

pub fn beam_search_decode(
    grid: &PosteriorGrid,
    alphabet: &Alphabet,
    lm: Option<&NgramLm>,
    params: &BeamParams,
) -> Result<String> {
    let finals = beam_search(grid, alphabet, lm, params)?;
    Ok(finals
        .first()
        .map(|(h, _)| alphabet.ids_to_text(&h.prefix.ids))
        .unwrap_or_default())
}

/// Scores every label sequence of length at most T and returns the best
/// string with its score. Refuses search spaces above [`EXHAUSTIVE_LIMIT`].
pub fn exhaustive_search(
    grid: &PosteriorGrid,
    alphabet: &Alphabet,
    lm: Option<&NgramLm>,
    params: &BeamParams,
) -> Result<(String, f64)> {
    let fusion = Fusion::new(alphabet, lm, params)?;
    let v = grid.vocab_len();
    let t = grid.frames();
    let space: f64 = (0..=t).map(|l| (v as f64).powi(l as i32)).sum();
    if space > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge(format!("{space} candidate sequences (limit {EXHAUSTIVE_LIMIT})")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut seq: Vec<usize> = Vec::new();
    loop {
        let text = fusion.text(&seq);
        let mut lm_score = 0.0;
        let mut words = 0;
        for i in 0..text.len() {
            let (d, w) = fusion.extend(&text[..i], text[i])?;
            lm_score += d;
            words += w;
        }
        let (d, w) = fusion.finish(&text)?;
        lm_score += d;
        words += w;
        let s = -ctc_loss(grid, &seq)? + fusion.weighted(lm_score, words);
        if s > f64::NEG_INFINITY {
            let better = match &best {
                None => true,
                Some((bs, bseq)) => rank((s, &seq), (*bs, bseq)) == Ordering::Less,
            };
            if better {
                best = Some((s, seq.clone()));
            }
        }
        // next sequence in shortlex order
        if !advance(&mut seq, v, t) {
            break;
        }
    }
    Ok(best
        .map(|(s, ids)| (alphabet.ids_to_text(&ids), s))
        .unwrap_or((String::new(), f64::NEG_INFINITY)))
}

fn advance(seq: &mut Vec<usize>, v: usize, max_len: usize) -> bool {
    if v == 0 {
        return false;
    }
    for i in (0..seq.len()).rev() {
        if seq[i] < v {
            seq[i] += 1;
            return true;
        }
        seq[i] = 1;
    }
    if seq.len() == max_len {
        return false;
    }
    seq.push(1);
    seq.iter_mut().for_each(|x| *x = 1);
    true
}

pub fn exhaustive_decode(
    grid: &PosteriorGrid,
    alphabet: &Alphabet,
    lm: Option<&NgramLm>,
    params: &BeamParams,
) -> Result<String> {
    exhaustive_search(grid, alphabet, lm, params).map(|(s, _)| s)
}
