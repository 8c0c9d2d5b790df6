//! CTC loss and gradient via log-space forward-backward, and a brute-force
//! alignment enumerator used as a test oracle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::decomp::squash;
use crate::error::{Error, Result};
use crate::nn::log_softmax_rows;
use crate::vocab::BLANK;

/// Row-stochastic per-frame token distribution, stored as natural logs.
/// Column 0 is the blank.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    logp: Array2<f64>,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl PosteriorGrid {
    /// Validates a probability matrix (entries in [0,1], rows summing to 1).
    pub fn from_probs(p: Array2<f64>) -> Result<Self> {
        if p.ncols() < 1 {
            return Err(Error::Contract("posterior grid needs a blank column".into()));
        }
        for (t, row) in p.axis_iter(Axis(0)).enumerate() {
            if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Contract(format!("frame {t}: probability {x} outside [0,1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!("frame {t}: probabilities sum to {s}")));
            }
        }
        Ok(PosteriorGrid { logp: p.mapv(f64::ln) })
    }

    /// Wraps log-probabilities that are already normalized (e.g. a log-softmax output).
    pub fn from_log_probs(logp: Array2<f64>) -> Self {
        PosteriorGrid { logp }
    }

    pub fn frames(&self) -> usize {
        self.logp.nrows()
    }

    /// Number of non-blank tokens.
    pub fn vocab_len(&self) -> usize {
        self.logp.ncols() - 1
    }

    pub fn log_probs(&self) -> ArrayView2<'_, f64> {
        self.logp.view()
    }

    pub fn probs(&self) -> Array2<f64> {
        self.logp.mapv(f64::exp)
    }

    /// Text form: `T V` then one line of `V+1` probabilities per frame.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.frames(), self.vocab_len());
        for row in self.logp.axis_iter(Axis(0)) {
            let line: Vec<String> = row.iter().map(|l| format!("{}", l.exp())).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty posterior grid"))?;
        let dims: Vec<usize> = header
            .split(' ')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(origin, 1, format!("bad header {header:?}")))?;
        let [frames, v] = dims[..] else {
            return Err(Error::parse(origin, 1, "header must be `T V`"));
        };
        let mut p = Array2::zeros((frames, v + 1));
        for t in 0..frames {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, t + 2, format!("expected {frames} frame lines")))?;
            let row: Vec<f64> = line
                .split(' ')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(origin, i + 1, "non-numeric probability"))?;
            if row.len() != v + 1 {
                return Err(Error::parse(origin, i + 1, format!("expected {} columns, found {}", v + 1, row.len())));
            }
            p.row_mut(t).assign(&ndarray::Array1::from(row));
        }
        if let Some((i, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(origin, i + 1, format!("unexpected trailing line {extra:?}")));
        }
        PosteriorGrid::from_probs(p).map_err(|e| Error::parse(origin, 0, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `ln(e^a + e^b)` without overflow; handles `-inf` operands.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Fewest frames any alignment of `target` needs: one per label plus a blank
/// between each adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + repeats(target)
}

fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], vocab_len: usize) -> Result<()> {
    match target.iter().find(|&&id| id == BLANK || id > vocab_len) {
        Some(id) => Err(Error::Contract(format!(
            "target id {id} is not a non-blank token of a {vocab_len}-token vocabulary"
        ))),
        None => Ok(()),
    }
}

/// Forward-backward result over one (grid, target) pair.
#[derive(Debug, Clone)]
pub struct CtcOutput {
    /// `-ln P(target | grid)`.
    pub loss: f64,
    /// Posterior occupancy of each token per frame; rows sum to 1.
    pub occupancy: Array2<f64>,
}

/// Full forward-backward pass. Fails with [`Error::Infeasible`] when no
/// alignment has non-zero probability.
pub fn ctc_forward_backward(logp: ArrayView2<'_, f64>, target: &[usize]) -> Result<CtcOutput> {
    let (frames, cols) = logp.dim();
    check_target(target, cols.saturating_sub(1))?;
    let infeasible = || Error::Infeasible {
        target_len: target.len(),
        repeats: repeats(target),
        frames,
    };
    if frames == 0 || min_frames(target) > frames {
        return Err(infeasible());
    }

    // blank-interleaved target: -, l1, -, l2, ..., lL, -
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { target[s / 2] }).collect();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((frames, s_len), neg);
    alpha[[0, 0]] = logp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = logp[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = acc + logp[[t, ext[s]]];
        }
    }
    let last = frames - 1;
    let mut loglik = alpha[[last, s_len - 1]];
    if s_len > 1 {
        loglik = log_add(loglik, alpha[[last, s_len - 2]]);
    }
    if loglik == neg || loglik.is_nan() {
        return Err(infeasible());
    }

    // beta[t][s]: log-probability of emitting the rest after frame t from state s
    let mut beta = Array2::from_elem((frames, s_len), neg);
    beta[[last, s_len - 1]] = 0.0;
    if s_len > 1 {
        beta[[last, s_len - 2]] = 0.0;
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]] + logp[[t + 1, ext[s]]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]] + logp[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]] + logp[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = acc;
        }
    }

    let mut occupancy = Array2::zeros((frames, cols));
    for t in 0..frames {
        for s in 0..s_len {
            let v = alpha[[t, s]] + beta[[t, s]];
            if v > neg {
                occupancy[[t, ext[s]]] += (v - loglik).exp();
            }
        }
    }
    Ok(CtcOutput {
        loss: -loglik,
        occupancy,
    })
}

/// `-ln P(target | grid)`, or `+inf` when no alignment exists.
pub fn ctc_loss(grid: &PosteriorGrid, target: &[usize]) -> Result<f64> {
    check_target(target, grid.vocab_len())?;
    match ctc_forward_backward(grid.log_probs(), target) {
        Ok(out) => Ok(out.loss),
        Err(Error::Infeasible { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Loss and its gradient with respect to pre-softmax scores:
/// `softmax(z) - occupancy`.
pub fn ctc_grad(logits: ArrayView2<'_, f64>, target: &[usize]) -> Result<(f64, Array2<f64>)> {
    let logp = log_softmax_rows(logits);
    let out = ctc_forward_backward(logp.view(), target)?;
    let grad = logp.mapv(f64::exp) - &out.occupancy;
    Ok((out.loss, grad))
}

/// Largest alignment space [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Sums the probability of every alignment that squashes to `target`.
pub fn ctc_brute_force(grid: &PosteriorGrid, target: &[usize]) -> Result<f64> {
    let frames = grid.frames();
    let cols = grid.vocab_len() + 1;
    check_target(target, grid.vocab_len())?;
    let space = (cols as f64).powi(frames as i32);
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!("{cols}^{frames} alignments")));
    }
    let p = grid.probs();
    let mut align = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if squash(&align, grid.vocab_len())? == target {
            total += align.iter().enumerate().map(|(t, &k)| p[[t, k]]).product::<f64>();
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == frames {
                return Ok(total);
            }
            align[t] += 1;
            if align[t] < cols {
                break;
            }
            align[t] = 0;
            t += 1;
        }
    }
}

/// Debug rendering of an alignment with `-` for blank.
pub fn format_alignment(alignment: &[usize]) -> String {
    let mut s = String::new();
    for &id in alignment {
        if id == BLANK {
            s.push('-');
        } else {
            let _ = write!(s, "{id}");
        }
    }
    s
}
