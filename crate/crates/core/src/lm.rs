//! Backoff n-gram language models: Witten-Bell training, scoring and ARPA I/O.
//!
//! Probabilities are stored as log10 values, as in ARPA files. The model is the
//! interpolated Witten-Bell estimate expressed in backoff form: every observed
//! n-gram stores its interpolated probability and every observed context `h`
//! stores `bow(h) = T(h) / (c(h) + T(h))`, where `T(h)` is the number of
//! distinct tokens seen after `h` and `c(h)` the number of tokens seen after it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// ARPA spelling of the space character in character-level models.
pub const SPACE: &str = "<space>";

/// log10 probability written for `<s>`, which is never predicted.
const BOS_LOGPROB: f64 = -99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmLevel {
    Char,
    Word,
}

impl LmLevel {
    /// Splits a corpus line into model tokens.
    pub fn tokenize(self, line: &str) -> Vec<String> {
        match self {
            LmLevel::Char => line.chars().map(char_token).collect(),
            LmLevel::Word => line.split_whitespace().map(String::from).collect(),
        }
    }
}

impl std::str::FromStr for LmLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(LmLevel::Char),
            "word" => Ok(LmLevel::Word),
            other => Err(Error::Config(format!("unknown LM level {other:?} (expected char or word)"))),
        }
    }
}

/// Token used for a character in a character-level model.
pub fn char_token(c: char) -> String {
    if c == ' ' {
        SPACE.to_string()
    } else {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    logprob: f64,
    backoff: f64,
}

type Gram = Vec<u32>;

#[derive(Debug, Clone)]
pub struct NgramLm {
    order: usize,
    level: LmLevel,
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    /// `tables[k]` holds the (k+1)-grams.
    tables: Vec<HashMap<Gram, Entry>>,
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn level(&self) -> LmLevel {
        self.level
    }

    /// Number of stored n-grams per order.
    pub fn counts(&self) -> Vec<usize> {
        self.tables.iter().map(HashMap::len).collect()
    }

    /// Tokens that can be predicted: everything except `<s>`.
    pub fn predictable_tokens(&self) -> Vec<&str> {
        self.tokens.iter().map(String::as_str).filter(|t| *t != BOS).collect()
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    /// Whether a character-level model can score character `c`.
    pub fn covers_char(&self, c: char) -> bool {
        self.contains_token(&char_token(c))
    }

    fn intern(&self, token: &str) -> Result<u32> {
        match (self.id_of.get(token), self.level) {
            (Some(&id), _) => Ok(id),
            (None, LmLevel::Word) => Ok(self.id_of[UNK]),
            (None, LmLevel::Char) => Err(Error::Scoring(token.to_string())),
        }
    }

    /// log10 P(token | context) under the backoff recursion. Only the last
    /// `order - 1` context tokens are used. Word-level models map unknown words
    /// to `<unk>`.
    pub fn logprob<S: AsRef<str>>(&self, context: &[S], token: &str) -> Result<f64> {
        let w = self.intern(token)?;
        if self.tokens[w as usize] == BOS {
            return Err(Error::Scoring(BOS.to_string()));
        }
        let keep = context.len().min(self.order - 1);
        let ctx = context[context.len() - keep..]
            .iter()
            .map(|t| self.intern(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.score_ids(&ctx, w))
    }

    fn score_ids(&self, ctx: &[u32], w: u32) -> f64 {
        let mut gram = ctx.to_vec();
        gram.push(w);
        if let Some(e) = self.tables[ctx.len()].get(&gram) {
            return e.logprob;
        }
        if ctx.is_empty() {
            // every predictable token has a unigram entry
            return f64::NEG_INFINITY;
        }
        let bow = self.tables[ctx.len() - 1].get(ctx).map_or(0.0, |e| e.backoff);
        bow + self.score_ids(&ctx[1..], w)
    }

    /// log10 probability of a whole line including `</s>`.
    pub fn score_line(&self, line: &str) -> Result<f64> {
        let mut ctx = vec![BOS.to_string()];
        let mut total = 0.0;
        for t in self.level.tokenize(line).into_iter().chain([EOS.to_string()]) {
            total += self.logprob(&ctx, &t)?;
            ctx.push(t);
        }
        Ok(total)
    }

    /// Every stored context (n-grams of order below the maximum), as token strings.
    pub fn contexts(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self.tables[..self.order - 1]
            .iter()
            .flat_map(|t| t.keys())
            .map(|g| g.iter().map(|&i| self.tokens[i as usize].clone()).collect())
            .collect();
        out.sort();
        out
    }

    /// Stored log10 probability of an exact n-gram, if present.
    pub fn stored_logprob(&self, gram: &[&str]) -> Option<f64> {
        let ids = gram.iter().map(|t| self.id_of.get(*t).copied()).collect::<Option<Vec<_>>>()?;
        self.tables.get(ids.len().checked_sub(1)?)?.get(&ids).map(|e| e.logprob)
    }

    /// Stored log10 backoff weight of an exact n-gram, if present.
    pub fn stored_backoff(&self, gram: &[&str]) -> Option<f64> {
        let ids = gram.iter().map(|t| self.id_of.get(*t).copied()).collect::<Option<Vec<_>>>()?;
        self.tables.get(ids.len().checked_sub(1)?)?.get(&ids).map(|e| e.backoff)
    }

    /// Every stored n-gram with its log10 probability, sorted.
    pub fn stored_ngrams(&self) -> Vec<(Vec<String>, f64)> {
        let mut out: Vec<(Vec<String>, f64)> = self
            .tables
            .iter()
            .flat_map(|t| t.iter())
            .map(|(g, e)| (g.iter().map(|&i| self.tokens[i as usize].clone()).collect(), e.logprob))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (k, t) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, t.len());
        }
        for (k, table) in self.tables.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            let mut rows: Vec<(String, &Entry)> = table
                .iter()
                .map(|(g, e)| {
                    let text = g.iter().map(|&i| self.tokens[i as usize].as_str()).collect::<Vec<_>>().join(" ");
                    (text, e)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (text, e) in rows {
                if k + 1 < self.order {
                    let _ = writeln!(out, "{}\t{}\t{}", e.logprob, text, e.backoff);
                } else {
                    let _ = writeln!(out, "{}\t{}", e.logprob, text);
                }
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn write_arpa(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_arpa()).map_err(|e| Error::io(path, e))
    }

    pub fn read_arpa(path: &Path, level: LmLevel) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_arpa(&text, level, &path.display().to_string())
    }

    pub fn parse_arpa(text: &str, level: LmLevel, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(origin, line, msg);
        let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
        let mut i = 0;
        // anything before \data\ is free-form
        while i < lines.len() && lines[i].trim() != "\\data\\" {
            i += 1;
        }
        if i == lines.len() {
            return Err(err(1, "missing \\data\\ header".into()));
        }
        i += 1;
        let mut declared: Vec<usize> = Vec::new();
        while i < lines.len() && !lines[i].trim().is_empty() {
            let l = lines[i].trim();
            let (k, c) = l
                .strip_prefix("ngram ")
                .and_then(|r| r.split_once('='))
                .and_then(|(k, c)| Some((k.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
                .ok_or_else(|| err(i + 1, format!("malformed count line {l:?}")))?;
            if k != declared.len() + 1 {
                return Err(err(i + 1, format!("expected count for order {}, found order {k}", declared.len() + 1)));
            }
            declared.push(c);
            i += 1;
        }
        let order = declared.len();
        if order == 0 {
            return Err(err(i + 1, "no n-gram counts declared".into()));
        }

        let mut tokens: Vec<String> = Vec::new();
        let mut id_of: HashMap<String, u32> = HashMap::new();
        let mut tables: Vec<HashMap<Gram, Entry>> = vec![HashMap::new(); order];
        let mut section: Option<(usize, usize)> = None; // (order, header line)
        let mut finished = false;

        let close = |section: Option<(usize, usize)>, tables: &Vec<HashMap<Gram, Entry>>| -> Result<()> {
            if let Some((k, line)) = section {
                let found = tables[k - 1].len();
                if found != declared[k - 1] {
                    return Err(err(
                        line,
                        format!("\\{k}-grams: section lists {found} entries but header declares {}", declared[k - 1]),
                    ));
                }
            }
            Ok(())
        };

        let mut expected_section = 1;
        while i < lines.len() {
            let raw = lines[i];
            let l = raw.trim();
            let lineno = i + 1;
            i += 1;
            if l.is_empty() {
                continue;
            }
            if l == "\\end\\" {
                close(section, &tables)?;
                if expected_section != order + 1 {
                    return Err(err(lineno, format!("\\end\\ before \\{expected_section}-grams: section")));
                }
                finished = true;
                break;
            }
            if l.starts_with('\\') {
                let k = l
                    .strip_prefix('\\')
                    .and_then(|r| r.strip_suffix("-grams:"))
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| err(lineno, format!("malformed section header {l:?}")))?;
                if k != expected_section {
                    return Err(err(lineno, format!("expected \\{expected_section}-grams: section, found {l:?}")));
                }
                close(section, &tables)?;
                section = Some((k, lineno));
                expected_section += 1;
                continue;
            }
            let Some((k, _)) = section else {
                return Err(err(lineno, format!("entry outside any section: {l:?}")));
            };
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err(lineno, "expected <logprob>\\t<gram>[\\t<backoff>]".into()));
            }
            let logprob: f64 = fields[0]
                .trim()
                .parse()
                .map_err(|_| err(lineno, format!("non-numeric probability {:?}", fields[0])))?;
            let backoff: f64 = match fields.get(2) {
                Some(b) => b.trim().parse().map_err(|_| err(lineno, format!("non-numeric backoff {b:?}")))?,
                None => 0.0,
            };
            if fields.len() == 3 && k == order {
                return Err(err(lineno, "backoff weight on a highest-order n-gram".into()));
            }
            let words: Vec<&str> = fields[1].split(' ').collect();
            if words.len() != k || words.iter().any(|w| w.is_empty()) {
                return Err(err(lineno, format!("expected {k} tokens in {:?}", fields[1])));
            }
            let mut gram = Vec::with_capacity(k);
            for w in words {
                let id = match id_of.get(w) {
                    Some(&id) => id,
                    None if k == 1 => {
                        let special = [BOS, EOS, UNK, SPACE].contains(&w);
                        if level == LmLevel::Char && !special && w.chars().count() != 1 {
                            return Err(err(lineno, format!("token {w:?} is not a character; not a character-level model")));
                        }
                        let id = tokens.len() as u32;
                        tokens.push(w.to_string());
                        id_of.insert(w.to_string(), id);
                        id
                    }
                    None => return Err(err(lineno, format!("token {w:?} has no unigram entry"))),
                };
                gram.push(id);
            }
            if tables[k - 1].insert(gram, Entry { logprob, backoff }).is_some() {
                return Err(err(lineno, format!("duplicate n-gram {:?}", fields[1])));
            }
        }
        if !finished {
            return Err(err(lines.len(), "missing \\end\\ marker".into()));
        }
        for required in [BOS, EOS] {
            if !id_of.contains_key(required) {
                return Err(err(1, format!("unigram section lacks {required}")));
            }
        }
        if level == LmLevel::Word && !id_of.contains_key(UNK) {
            return Err(err(1, format!("word-level model lacks {UNK}")));
        }
        Ok(NgramLm {
            order,
            level,
            tokens,
            id_of,
            tables,
        })
    }
}

/// Trains an interpolated Witten-Bell model of the given order.
///
/// Each line is wrapped as `<s> tokens </s>`. At word level, words seen once
/// are replaced by `<unk>`, which is always part of the vocabulary. The
/// unigram level interpolates with the uniform distribution over predictable
/// tokens, so every token in the vocabulary has non-zero probability.
pub fn train_ngram_lm<S: AsRef<str>>(corpus: &[S], order: usize, level: LmLevel) -> Result<NgramLm> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot train a language model on an empty corpus".into()));
    }
    if !(1..=5).contains(&order) {
        return Err(Error::Config(format!("LM order must be in 1..=5, got {order}")));
    }
    let mut lines: Vec<Vec<String>> = corpus.iter().map(|l| level.tokenize(l.as_ref())).collect();
    if level == LmLevel::Word {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for l in &lines {
            for w in l {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> =
            freq.into_iter().filter(|(_, c)| *c == 1).map(|(w, _)| w.to_string()).collect();
        for l in &mut lines {
            for w in l.iter_mut() {
                if rare.contains(w) {
                    *w = UNK.to_string();
                }
            }
        }
    }

    let mut tokens: Vec<String> = vec![BOS.to_string(), EOS.to_string()];
    if level == LmLevel::Word {
        tokens.push(UNK.to_string());
    }
    let mut seen: Vec<String> = lines.iter().flatten().cloned().collect();
    seen.sort();
    seen.dedup();
    for t in seen {
        if !tokens.contains(&t) {
            tokens.push(t);
        }
    }
    let id_of: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let bos = id_of[BOS];
    let eos = id_of[EOS];

    // counts[k] maps (k+1)-grams to occurrence counts
    let mut counts: Vec<HashMap<Gram, u64>> = vec![HashMap::new(); order];
    for l in &lines {
        let stream: Vec<u32> = std::iter::once(bos)
            .chain(l.iter().map(|t| id_of[t]))
            .chain(std::iter::once(eos))
            .collect();
        for i in 1..stream.len() {
            for k in 1..=order.min(i + 1) {
                *counts[k - 1].entry(stream[i + 1 - k..=i].to_vec()).or_default() += 1;
            }
        }
    }
    // per context: (total continuation count, distinct continuations)
    let mut ctx_stats: Vec<HashMap<Gram, (u64, u64)>> = vec![HashMap::new(); order];
    for (k, table) in counts.iter().enumerate() {
        for (g, &c) in table {
            let s = ctx_stats[k].entry(g[..k].to_vec()).or_default();
            s.0 += c;
            s.1 += 1;
        }
    }

    let vocab_size = tokens.len() - 1; // everything but <s>
    let (n1, t1) = ctx_stats[0].get(&Vec::new()).copied().unwrap_or((0, 0));
    let mut probs: Vec<HashMap<Gram, f64>> = vec![HashMap::new(); order];
    for id in 0..tokens.len() as u32 {
        if id == bos {
            continue;
        }
        let c = counts[0].get(&vec![id]).copied().unwrap_or(0);
        let p = (c as f64 + t1 as f64 / vocab_size as f64) / (n1 + t1) as f64;
        probs[0].insert(vec![id], p);
    }
    for k in 1..order {
        let mut level_probs = HashMap::with_capacity(counts[k].len());
        for (g, &c) in &counts[k] {
            let (ctx_total, ctx_types) = ctx_stats[k][&g[..k]];
            let lower = interpolated(&probs, &g[1..]);
            let p = (c as f64 + ctx_types as f64 * lower) / (ctx_total + ctx_types) as f64;
            level_probs.insert(g.clone(), p);
        }
        probs[k] = level_probs;
    }

    let mut tables: Vec<HashMap<Gram, Entry>> = vec![HashMap::new(); order];
    for (k, level_probs) in probs.iter().enumerate() {
        for (g, &p) in level_probs {
            tables[k].insert(
                g.clone(),
                Entry {
                    logprob: p.log10(),
                    backoff: 0.0,
                },
            );
        }
    }
    tables[0].insert(
        vec![bos],
        Entry {
            logprob: BOS_LOGPROB,
            backoff: 0.0,
        },
    );
    for k in 1..order {
        for (ctx, &(total, types)) in &ctx_stats[k] {
            let bow = types as f64 / (total + types) as f64;
            // every context with continuations was itself counted one order lower
            if let Some(e) = tables[k - 1].get_mut(ctx) {
                e.backoff = bow.log10();
            }
        }
    }
    Ok(NgramLm {
        order,
        level,
        tokens,
        id_of,
        tables,
    })
}

/// Interpolated probability of the last token of `gram` given the rest. Only
/// called for suffixes of observed n-grams, which were counted at the same
/// stream position and so are always present.
fn interpolated(probs: &[HashMap<Gram, f64>], gram: &[u32]) -> f64 {
    probs[gram.len() - 1][gram]
}
