//! Target decompositions and the CTC collapse mapping.

use crate::error::{Error, Result};
use crate::vocab::{letter_runs, LabelSeq, NgramVocab, TokenSet, BLANK};

/// Collapses repeated ids, then drops blanks.
///
/// `vocab_len` is the number of non-blank tokens; any id above it is rejected.
pub fn squash(alignment: &[usize], vocab_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut prev = None;
    for (t, &id) in alignment.iter().enumerate() {
        if id > vocab_len {
            return Err(Error::Contract(format!(
                "alignment id {id} at frame {t} exceeds vocabulary size {vocab_len}"
            )));
        }
        if Some(id) != prev && id != BLANK {
            out.push(id);
        }
        prev = Some(id);
    }
    Ok(out)
}

/// [`squash`] against a concrete token set.
pub fn squash_with<V: TokenSet>(alignment: &[usize], vocab: &V) -> Result<LabelSeq> {
    squash(alignment, vocab.len()).map(|ids| LabelSeq::new(vocab.granularity(), ids))
}

/// Sliding-window n-gram targets of `text`.
///
/// Windows never cross a non-letter; windows missing from the vocabulary are
/// dropped, which CTC covers with blank frames.
pub fn decompose_ngrams(text: &str, vocab: &NgramVocab) -> LabelSeq {
    let n = vocab.n();
    let mut ids = Vec::new();
    for run in letter_runs(text) {
        for w in run.windows(n) {
            // letter runs are ASCII
            let gram = std::str::from_utf8(w).unwrap();
            if let Some(id) = vocab.id_of(gram) {
                ids.push(id);
            }
        }
    }
    LabelSeq::new(n, ids)
}

/// Hyphen-joined token texts, e.g. `be-et-tt-te-er`.
pub fn format_decomposition<V: TokenSet>(seq: &LabelSeq, vocab: &V) -> String {
    seq.ids
        .iter()
        .map(|&id| vocab.token_text(id).unwrap_or_else(|| "?".into()))
        .collect::<Vec<_>>()
        .join("-")
}
