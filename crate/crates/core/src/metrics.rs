//! Edit distance and corpus-level character/word error rates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost insert/delete/substitute distance between two token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn pooled<S: AsRef<str>, H: AsRef<str>, T: PartialEq>(
    refs: &[S],
    hyps: &[H],
    split: impl for<'a> Fn(&'a str) -> Vec<T>,
    what: &str,
) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Input(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let (mut dist, mut total) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        let r = split(r.as_ref());
        dist += levenshtein(&r, &split(h.as_ref()));
        total += r.len();
    }
    if total == 0 {
        return Err(Error::Input(format!("{what} undefined: references contain no tokens")));
    }
    Ok(dist as f64 / total as f64)
}

/// Character error rate: total character edits over total reference characters.
pub fn compute_cer<S: AsRef<str>, H: AsRef<str>>(refs: &[S], hyps: &[H]) -> Result<f64> {
    pooled(refs, hyps, chars, "CER")
}

/// Word error rate over whitespace-separated tokens, pooled like [`compute_cer`].
pub fn compute_wer<S: AsRef<str>, H: AsRef<str>>(refs: &[S], hyps: &[H]) -> Result<f64> {
    pooled(refs, hyps, |s| s.split_whitespace().map(str::to_owned).collect(), "WER")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub char_edits: usize,
    pub word_edits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub char_edits: usize,
    pub word_edits: usize,
    pub ref_chars: usize,
    pub ref_words: usize,
    pub lines: Vec<LineRecord>,
}

impl EvalReport {
    /// Scores `(id, reference, hypothesis)` triples.
    pub fn build(items: &[(String, String, String)]) -> Result<Self> {
        let mut lines = Vec::with_capacity(items.len());
        let (mut ce, mut we, mut rc, mut rw) = (0, 0, 0, 0);
        for (id, r, h) in items {
            let char_edits = levenshtein(&chars(r), &chars(h));
            let word_edits = levenshtein(&words(r), &words(h));
            ce += char_edits;
            we += word_edits;
            rc += r.chars().count();
            rw += words(r).len();
            lines.push(LineRecord {
                id: id.clone(),
                reference: r.clone(),
                hypothesis: h.clone(),
                char_edits,
                word_edits,
            });
        }
        if rc == 0 || rw == 0 {
            return Err(Error::Input("error rates undefined: references are empty".into()));
        }
        Ok(EvalReport {
            cer: ce as f64 / rc as f64,
            wer: we as f64 / rw as f64,
            char_edits: ce,
            word_edits: we,
            ref_chars: rc,
            ref_words: rw,
            lines,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width summary for terminals.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:>8} {:>8} {:>8}", "metric", "rate%", "edits", "ref");
        let _ = writeln!(out, "{:<6} {:>8.2} {:>8} {:>8}", "CER", 100.0 * self.cer, self.char_edits, self.ref_chars);
        let _ = writeln!(out, "{:<6} {:>8.2} {:>8} {:>8}", "WER", 100.0 * self.wer, self.word_edits, self.ref_words);
        let _ = writeln!(out, "lines: {}", self.lines.len());
        out
    }
}
