//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Tests hold a shared lock so the benchmark experiment is timed without
//! competing for the CPU.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use htr_core::config::{DecoderKind, RunConfig};
use htr_core::ctc::{ctc_brute_force, ctc_grad, ctc_loss, min_frames, PosteriorGrid};
use htr_core::decode::{beam_search_decode, exhaustive_decode, greedy_decode, BeamParams, LmKind};
use htr_core::decomp::{decompose_ngrams, format_decomposition};
use htr_core::image::LineImage;
use htr_core::lm::{train_ngram_lm, LmLevel, NgramLm, BOS, EOS, UNK};
use htr_core::metrics::{compute_cer, compute_wer, levenshtein};
use htr_core::models::{build_model, loss_and_grads, Model, ModelDims, ModelKind, TaskSpec};
use htr_core::nn::{
    column_max_pool, column_max_pool_backward, frame_stack, frame_stack_backward, image_patches, log_softmax_rows,
    time_max_pool, time_max_pool_backward, BiRnn, Dense, PatchLift,
};
use htr_core::pipeline::{run_experiment, ExperimentResults};
use htr_core::synth::SynthConfig;
use htr_core::vocab::{build_alphabet, build_ngram_vocab, encode_unigrams, LabelSeq, NgramVocab};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line outside libtest's capture and fails the test on FAIL.
fn verdict(id: u32, title: &str, ok: bool, detail: &str) {
    let word = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(io::stderr(), "criterion {id} [{word}] {title}: {detail}");
    assert!(ok, "criterion {id} failed: {detail}");
}

fn random_probs(rng: &mut ChaCha8Rng, t: usize, cols: usize) -> Array2<f64> {
    let raw = Array2::from_shape_simple_fn((t, cols), || rng.random_range(0.02..1.0f64));
    let sums = raw.sum_axis(ndarray::Axis(1));
    Array2::from_shape_fn((t, cols), |(i, j)| raw[[i, j]] / sums[i])
}

// ---------------------------------------------------------------- criterion 1

/// Collapses repeats, then drops blanks.
fn squash_oracle(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != 0 {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Sum over all `cols^t` frame paths whose squash equals `target`.
fn path_sum(p: &Array2<f64>, target: &[usize]) -> f64 {
    let (t, cols) = p.dim();
    let mut total = 0.0;
    for code in 0..cols.pow(t as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..t)
            .map(|_| {
                let k = c % cols;
                c /= cols;
                k
            })
            .collect();
        if squash_oracle(&path) == target {
            total += path.iter().enumerate().map(|(i, &k)| p[[i, k]]).product::<f64>();
        }
    }
    total
}

#[test]
fn criterion_1_ctc_matches_brute_force() {
    let _guard = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut feasible = 0;
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(1..=3);
        let p = random_probs(&mut rng, t, v + 1);
        let len = rng.random_range(0..=t);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=v)).collect();
        let grid = PosteriorGrid::from_probs(p.clone()).unwrap();
        let forward = (-ctc_loss(&grid, &target).unwrap()).exp();
        let library = ctc_brute_force(&grid, &target).unwrap();
        let oracle = path_sum(&p, &target);
        if oracle > 0.0 {
            feasible += 1;
        }
        worst = worst.max((forward - oracle).abs()).max((library - oracle).abs());
    }
    let elapsed = started.elapsed();
    let ok = worst <= 1e-9 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "CTC oracle equivalence",
        ok,
        &format!("200 instances ({feasible} feasible), max |diff| {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- criterion 2

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Denominator floor: below it the central difference is dominated by rounding.
const REL_FLOOR: f64 = 1e-5;
/// Minimum distance from a ReLU or max-pool decision boundary.
const KINK_MARGIN: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `x0`, over every coordinate.
fn probe(x0: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        x[i] = x0[i] + EPS;
        let up = f(&x);
        x[i] = x0[i] - EPS;
        let down = f(&x);
        x[i] = x0[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * EPS)));
    }
    worst
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn mat(shape: (usize, usize), v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(shape, v.to_vec()).unwrap()
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

/// Checks every parameter of `model` against `grads` (same order as `params_mut`).
fn probe_params<M: Clone>(
    model: &M,
    grads: &[Array2<f64>],
    params_mut: impl Fn(&mut M) -> Vec<&mut Array2<f64>>,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let mut scratch = model.clone();
    let count = params_mut(&mut scratch).len();
    assert_eq!(count, grads.len());
    let mut worst: f64 = 0.0;
    for k in 0..count {
        let x0 = flat(params_mut(&mut scratch)[k]);
        let shape = grads[k].dim();
        let err = probe(&x0, &flat(&grads[k]), |v| {
            params_mut(&mut scratch)[k].assign(&mat(shape, v));
            loss(&scratch)
        });
        params_mut(&mut scratch)[k].assign(&mat(shape, &x0));
        worst = worst.max(err);
    }
    worst
}

/// Whether the maximum beats the runner-up by the margin. An all-zero window
/// (every unit past a dead ReLU) has no kink.
fn clear_maxima(values: &[f64]) -> bool {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] == 0.0 || sorted.len() == 1 || sorted[0] - sorted[1] > KINK_MARGIN
}

fn column_pool_is_clear(f: &Array3<f64>) -> bool {
    let (d, _, w) = f.dim();
    (0..d).all(|c| (0..w).all(|t| clear_maxima(&f.slice(ndarray::s![c, .., t]).to_vec())))
}

fn time_pool_is_clear(x: &Array2<f64>, k: usize) -> bool {
    let (len, d) = x.dim();
    (0..len / k).all(|t| (0..d).all(|c| clear_maxima(&x.slice(ndarray::s![t * k..t * k + k, c]).to_vec())))
}

fn relu_is_clear(lift: &PatchLift, img: &Array2<f64>) -> bool {
    let patches = image_patches(img.view(), lift.patch_height, lift.patch_width);
    let pre = lift.dense.forward(patches.view()).unwrap();
    pre.iter().all(|v| v.abs() > KINK_MARGIN)
}

struct Kernel {
    name: &'static str,
    worst: f64,
    redrawn: usize,
}

fn grad_ctc(rng: &mut ChaCha8Rng) -> f64 {
    let t = rng.random_range(1..=8);
    let v = rng.random_range(1..=4);
    let logits = Array2::from_shape_simple_fn((t, v + 1), || rng.random_range(-2.0..2.0));
    let mut target: Vec<usize> = (0..rng.random_range(0..=t)).map(|_| rng.random_range(1..=v)).collect();
    while min_frames(&target) > t {
        target.pop();
    }
    let (_, g) = ctc_grad(logits.view(), &target).unwrap();
    probe(&flat(&logits), &flat(&g), |x| ctc_grad(mat((t, v + 1), x).view(), &target).unwrap().0)
}

fn grad_log_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let x = rand_mat(rng, r, c) * 3.0;
    let w = rand_mat(rng, r, c);
    // d/dx sum(w * log_softmax(x)) = w - softmax(x) * rowsum(w)
    let ls = log_softmax_rows(x.view());
    let mut g = w.clone();
    for i in 0..r {
        let s: f64 = w.row(i).sum();
        for j in 0..c {
            g[[i, j]] -= ls[[i, j]].exp() * s;
        }
    }
    probe(&flat(&x), &flat(&g), |v| (log_softmax_rows(mat((r, c), v).view()) * &w).sum())
}

fn grad_dense(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, input, output) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
    let layer = Dense::new(input, output, rng);
    let x = rand_mat(rng, rows, input);
    let w = rand_mat(rng, rows, output);
    let (dx, grads) = layer.backward(x.view(), w.view());
    let loss = |l: &Dense, x: &Array2<f64>| (l.forward(x.view()).unwrap() * &w).sum();
    let ex = probe(&flat(&x), &flat(&dx), |v| loss(&layer, &mat((rows, input), v)));
    ex.max(probe_params(&layer, &grads, |l| l.params_mut(), |l| loss(l, &x)))
}

fn grad_patch_lift(rng: &mut ChaCha8Rng, redrawn: &mut usize) -> f64 {
    loop {
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let ph = [1, 3, 5][rng.random_range(0..3)];
        let pw = [1, 3][rng.random_range(0..2)];
        let lift = PatchLift::new(ph, pw, rng.random_range(1..=4), rng);
        let img = Array2::from_shape_simple_fn((h, w), || rng.random::<f64>());
        if !relu_is_clear(&lift, &img) {
            *redrawn += 1;
            continue;
        }
        let (out, cache) = lift.forward(img.view()).unwrap();
        let wts = Array3::from_shape_simple_fn(out.dim(), || rng.random_range(-1.0..1.0));
        let grads = lift.backward(&cache, wts.view());
        let loss = |l: &PatchLift| (l.forward(img.view()).unwrap().0 * &wts).sum();
        return probe_params(&lift, &grads, |l| l.params_mut(), loss);
    }
}

fn grad_column_pool(rng: &mut ChaCha8Rng, redrawn: &mut usize) -> f64 {
    loop {
        let dim = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
        let f = Array3::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0));
        if !column_pool_is_clear(&f) {
            *redrawn += 1;
            continue;
        }
        let (out, arg) = column_max_pool(f.view()).unwrap();
        let w = Array2::from_shape_simple_fn(out.dim(), || rng.random_range(-1.0..1.0));
        let g = column_max_pool_backward(&arg, w.view(), dim.1);
        return probe(&flat(&f), &flat(&g), |v| {
            let f = Array3::from_shape_vec(dim, v.to_vec()).unwrap();
            (column_max_pool(f.view()).unwrap().0 * &w).sum()
        });
    }
}

fn grad_time_pool(rng: &mut ChaCha8Rng, redrawn: &mut usize) -> f64 {
    loop {
        let k = rng.random_range(1..=3);
        let (len, d) = (rng.random_range(k..=9), rng.random_range(1..=4));
        let x = rand_mat(rng, len, d);
        if !time_pool_is_clear(&x, k) {
            *redrawn += 1;
            continue;
        }
        let (out, arg) = time_max_pool(x.view(), k);
        let w = rand_mat(rng, out.nrows(), d);
        let g = time_max_pool_backward(&arg, w.view(), len);
        return probe(&flat(&x), &flat(&g), |v| (time_max_pool(mat((len, d), v).view(), k).0 * &w).sum());
    }
}

fn grad_frame_stack(rng: &mut ChaCha8Rng) -> f64 {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let (len, d) = (rng.random_range(1..=7), rng.random_range(1..=4));
    let x = rand_mat(rng, len, d);
    let w = rand_mat(rng, len, k * d);
    let g = frame_stack_backward(w.view(), k);
    probe(&flat(&x), &flat(&g), |v| (frame_stack(mat((len, d), v).view(), k).unwrap() * &w).sum())
}

fn grad_birnn(rng: &mut ChaCha8Rng) -> f64 {
    let (len, input, hidden) = (rng.random_range(1..=6), rng.random_range(1..=5), rng.random_range(1..=5));
    let rnn = BiRnn::new(input, hidden, rng);
    let x = rand_mat(rng, len, input);
    let w = rand_mat(rng, len, 2 * hidden);
    let (_, cache) = rnn.forward(x.view()).unwrap();
    let (dx, grads) = rnn.backward(&cache, w.view());
    let loss = |r: &BiRnn, x: &Array2<f64>| (r.forward(x.view()).unwrap().0 * &w).sum();
    let ex = probe(&flat(&x), &flat(&dx), |v| loss(&rnn, &mat((len, input), v)));
    ex.max(probe_params(&rnn, &grads, |r| r.params_mut(), |r| loss(r, &x)))
}

fn composed_dims() -> ModelDims {
    ModelDims {
        height: 8,
        channels: 3,
        patch_height: 3,
        patch_width: 3,
        time_pool: 2,
        stack: 3,
        hidden: 4,
        rnn_layers: 2,
        branch_hidden: 4,
    }
}

fn model_is_clear(model: &Model, img: &Array2<f64>) -> bool {
    if !relu_is_clear(&model.lift, img) {
        return false;
    }
    let (map, _) = model.lift.forward(img.view()).unwrap();
    if !column_pool_is_clear(&map) {
        return false;
    }
    let (cols, _) = column_max_pool(map.view()).unwrap();
    time_pool_is_clear(&cols, model.dims.time_pool)
}

fn grad_model(rng: &mut ChaCha8Rng, kind: ModelKind, redrawn: &mut usize) -> f64 {
    let specs: Vec<TaskSpec> = match kind {
        ModelKind::Single => vec![TaskSpec { n: 1, vocab_len: 3 }],
        _ => vec![
            TaskSpec { n: 1, vocab_len: 3 },
            TaskSpec { n: 2, vocab_len: 4 },
            TaskSpec { n: 3, vocab_len: 5 },
        ],
    };
    loop {
        let model = build_model(kind, &specs, &composed_dims(), rng.random()).unwrap();
        let width = [8, 10, 12][rng.random_range(0..3)];
        let pixels = Array2::from_shape_simple_fn((8, width), || rng.random::<f64>());
        if !model_is_clear(&model, &pixels) {
            *redrawn += 1;
            continue;
        }
        let frames = model.frames_for_width(width);
        let targets: Vec<LabelSeq> = specs
            .iter()
            .map(|s| {
                let mut ids: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=s.vocab_len)).collect();
                while min_frames(&ids) > frames {
                    ids.pop();
                }
                LabelSeq::new(s.n, ids)
            })
            .collect();
        let weights: BTreeMap<String, f64> =
            [("2".to_string(), rng.random_range(0.2..2.0)), ("3".to_string(), rng.random_range(0.2..2.0))].into();
        let img = LineImage::new(pixels);
        let (_, grads) = loss_and_grads(&model, &img, &targets, &weights).unwrap();
        let loss = |m: &Model| loss_and_grads(m, &img, &targets, &weights).unwrap().0.total;
        return probe_params(&model, &grads, |m| m.params_mut(), loss);
    }
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut kernels = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut ChaCha8Rng, &mut usize) -> f64| {
        let mut worst: f64 = 0.0;
        let mut redrawn = 0;
        for _ in 0..50 {
            worst = worst.max(f(&mut rng, &mut redrawn));
        }
        kernels.push(Kernel { name, worst, redrawn });
    };
    run("ctc_grad", &mut |r, _| grad_ctc(r));
    run("log_softmax", &mut |r, _| grad_log_softmax(r));
    run("dense", &mut |r, _| grad_dense(r));
    run("patch_lift", &mut grad_patch_lift);
    run("column_max_pool", &mut grad_column_pool);
    run("time_max_pool", &mut grad_time_pool);
    run("frame_stack", &mut |r, _| grad_frame_stack(r));
    run("birnn", &mut |r, _| grad_birnn(r));
    run("model_single", &mut |r, n| grad_model(r, ModelKind::Single, n));
    run("model_bmt", &mut |r, n| grad_model(r, ModelKind::Bmt, n));
    run("model_hmt", &mut |r, n| grad_model(r, ModelKind::Hmt, n));
    let worst = kernels.iter().map(|k| k.worst).fold(0.0, f64::max);
    let detail = kernels
        .iter()
        .map(|k| {
            let extra = if k.redrawn > 0 { format!(", {} redrawn near a kink", k.redrawn) } else { String::new() };
            format!("{} {:.1e}{extra}", k.name, k.worst)
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        2,
        "gradient correctness",
        worst <= REL_TOL,
        &format!("50 instances per kernel, eps {EPS:e}, worst rel err {worst:.2e} ({detail})"),
    );
}

// ---------------------------------------------------------------- criterion 3

fn all_grams(n: usize) -> Vec<String> {
    let mut grams = vec![String::new()];
    for _ in 0..n {
        grams = grams.iter().flat_map(|g| ('a'..='z').map(move |c| format!("{g}{c}"))).collect();
    }
    grams
}

/// Decomposes "better" and checks both the rendering and the ids.
fn decomposition_row(vocab: &NgramVocab, expected: &str) -> Result<(), String> {
    let seq = decompose_ngrams("better", vocab);
    let shown = format_decomposition(&seq, vocab);
    let ids: Vec<usize> = expected.split('-').map(|g| vocab.id_of(g).unwrap()).collect();
    if shown == expected && seq.ids == ids {
        Ok(())
    } else {
        Err(format!("expected {expected}, got {shown}"))
    }
}

#[test]
fn criterion_3_decompositions_match_the_table() {
    let _guard = serial();
    let bigrams = build_ngram_vocab(&[""], 2, 0).unwrap();
    let trigrams = NgramVocab::from_grams(3, all_grams(3)).unwrap();
    let alphabet = build_alphabet(&["better"]).unwrap();
    let unigram = encode_unigrams("better", &alphabet).unwrap();
    let unigram_ids: Vec<usize> = "better".chars().map(|c| alphabet.id_of(c).unwrap()).collect();
    let unigram_row = if format_decomposition(&unigram, &alphabet) == "b-e-t-t-e-r" && unigram.ids == unigram_ids {
        Ok(())
    } else {
        Err(format!("unigram row gave {}", format_decomposition(&unigram, &alphabet)))
    };
    let rows = [
        ("unigram", unigram_row),
        ("all bigrams", decomposition_row(&bigrams, "be-et-tt-te-er")),
        ("partial bigrams", decomposition_row(&bigrams.without(&["et", "te"]), "be-tt-er")),
        ("all trigrams", decomposition_row(&trigrams, "bet-ett-tte-ter")),
        ("partial trigrams", decomposition_row(&trigrams.without(&["ett"]), "bet-tte-ter")),
        ("bet-ter", decomposition_row(&trigrams.without(&["ett", "tte"]), "bet-ter")),
    ];
    let failures: Vec<String> =
        rows.iter().filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}"))).collect();
    verdict(
        3,
        "decomposition fidelity",
        failures.is_empty(),
        &if failures.is_empty() { "6 of 6 rows reproduced".to_string() } else { failures.join("; ") },
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_beam_search_matches_exhaustive_decoding() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let toy = train_ngram_lm(&["ab ba", "abc", "cab a", "b", "cc ab"], 3, LmLevel::Char).unwrap();
    let mut mismatches = Vec::new();
    for i in 0..200 {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(1..=3);
        let alphabet = build_alphabet(&[&"abc"[..v]]).unwrap();
        let grid = PosteriorGrid::from_probs(random_probs(&mut rng, t, v + 1)).unwrap();
        for (lm, kind) in [(None, LmKind::None), (Some(&toy), LmKind::Char)] {
            // 3^0 + ... + 3^5 = 364 candidates at most
            let params = BeamParams { width: 400, lm: kind, ..Default::default() };
            let beam = beam_search_decode(&grid, &alphabet, lm, &params).unwrap();
            let oracle = exhaustive_decode(&grid, &alphabet, lm, &params).unwrap();
            if beam != oracle {
                mismatches.push(format!("grid {i} {kind:?}: {beam:?} vs {oracle:?}"));
            }
        }
    }
    let alphabet = build_alphabet(&["a"]).unwrap();
    let grid = PosteriorGrid::from_probs(ndarray::array![[0.6, 0.4], [0.6, 0.4]]).unwrap();
    let greedy = greedy_decode(&grid, &alphabet);
    let beams: Vec<String> = [2, 3, 64]
        .iter()
        .map(|&width| beam_search_decode(&grid, &alphabet, None, &BeamParams { width, ..Default::default() }).unwrap())
        .collect();
    let example_ok = greedy.is_empty() && beams.iter().all(|b| b == "a");
    verdict(
        4,
        "decoder oracle equivalence",
        mismatches.is_empty() && example_ok,
        &format!(
            "200 grids x 2 LM settings, {} mismatches{}; marginal example greedy {greedy:?}, beam {beams:?}",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------- criterion 5

fn random_corpus(rng: &mut ChaCha8Rng, words: &[&str], lines: usize) -> Vec<String> {
    (0..lines)
        .map(|_| {
            (0..rng.random_range(1..=6)).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn random_context(rng: &mut ChaCha8Rng, pool: &[String]) -> Vec<String> {
    let mut ctx: Vec<String> = (0..rng.random_range(0..=4)).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
    if rng.random_bool(0.3) {
        ctx.insert(0, BOS.to_string());
    }
    ctx
}

fn fuzzed_lms(rng: &mut ChaCha8Rng) -> Vec<NgramLm> {
    let words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "far", "away"];
    let mut lms = Vec::new();
    for order in 1..=5 {
        let lines = rng.random_range(3..=30);
        let corpus = random_corpus(rng, &words, lines);
        lms.push(train_ngram_lm(&corpus, order, LmLevel::Word).unwrap());
        lms.push(train_ngram_lm(&corpus, order, LmLevel::Char).unwrap());
    }
    lms
}

#[test]
fn criterion_5_language_models_are_valid() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let lms = fuzzed_lms(&mut rng);

    let mut worst_mass: f64 = 0.0;
    for i in 0..100 {
        let lm = &lms[i % lms.len()];
        let mut pool: Vec<String> = lm.predictable_tokens().iter().map(|t| t.to_string()).filter(|t| t != EOS).collect();
        if lm.level() == LmLevel::Word {
            pool.push("zebra".into());
        }
        let ctx = random_context(&mut rng, &pool);
        let mass: f64 = lm.predictable_tokens().iter().map(|t| 10f64.powf(lm.logprob(&ctx, t).unwrap())).sum();
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }

    let dir = tempfile::tempdir().unwrap();
    let mut worst_trip: f64 = 0.0;
    for (i, lm) in lms.iter().enumerate() {
        let path = dir.path().join(format!("{i}.arpa"));
        lm.write_arpa(&path).unwrap();
        let back = NgramLm::read_arpa(&path, lm.level()).unwrap();
        let tokens: Vec<String> = lm.predictable_tokens().iter().map(|t| t.to_string()).collect();
        for _ in 0..100 {
            let ctx = random_context(&mut rng, &tokens);
            let tok = &tokens[rng.random_range(0..tokens.len())];
            worst_trip = worst_trip.max((lm.logprob(&ctx, tok).unwrap() - back.logprob(&ctx, tok).unwrap()).abs());
        }
    }
    let queries = lms.len() * 100;

    // streams: <s> a b </s> | <s> a </s> | <s> b a </s>; 8 tokens of 3 types, |V| = 4 with <unk>
    let table_lm = train_ngram_lm(&["a b", "a", "b a"], 2, LmLevel::Word).unwrap();
    let uni = |c: f64| (c + 3.0 / 4.0) / (8.0 + 3.0);
    let table: &[(&[&str], &str, f64)] = &[
        (&[], "a", uni(3.0)),
        (&[], "b", uni(2.0)),
        (&[], EOS, uni(3.0)),
        (&[], UNK, uni(0.0)),
        (&[BOS], "a", 59.0 / 110.0),
        (&[BOS], "b", 33.0 / 110.0),
        (&[BOS], EOS, 15.0 / 110.0),
        (&[BOS], UNK, 3.0 / 110.0),
        (&["a"], "b", 33.0 / 110.0),
        (&["a"], EOS, 59.0 / 110.0),
        (&["a"], "a", 0.4 * uni(3.0)),
        (&["a"], UNK, 0.4 * uni(0.0)),
        (&["b"], "a", 18.5 / 44.0),
        (&["b"], EOS, 18.5 / 44.0),
        (&["b"], "b", 0.5 * uni(2.0)),
        (&["b"], UNK, 0.5 * uni(0.0)),
    ];
    let mut worst_table: f64 = 0.0;
    for &(ctx, tok, p) in table {
        worst_table = worst_table.max((10f64.powf(table_lm.logprob(ctx, tok).unwrap()) - p).abs());
    }
    let single = train_ngram_lm(&["a a b"], 2, LmLevel::Word).unwrap();
    worst_table = worst_table.max((10f64.powf(single.logprob(&[BOS], "a").unwrap()) - 5.0 / 7.0).abs());

    let ok = worst_mass <= 1e-9 && worst_trip <= 1e-6 && worst_table <= 1e-12;
    verdict(
        5,
        "LM validity",
        ok,
        &format!(
            "100 contexts max |mass-1| {worst_mass:.1e}; {queries} ARPA round-trip queries max diff {worst_trip:.1e}; \
             {} hand-table entries max diff {worst_table:.1e}",
            table.len() + 1
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

/// Index of a list over `{0,1,2}` among all lists of length at most 7,
/// ordered by length then base-3 value.
struct ListIndex {
    offsets: Vec<usize>,
}

impl ListIndex {
    const MAX_LEN: usize = 7;

    fn new() -> Self {
        let mut offsets = vec![0];
        for len in 0..=Self::MAX_LEN {
            offsets.push(offsets[len] + 3usize.pow(len as u32));
        }
        ListIndex { offsets }
    }

    fn total(&self) -> usize {
        self.offsets[Self::MAX_LEN + 1]
    }

    fn decode(&self, idx: usize) -> Vec<u8> {
        let len = (0..=Self::MAX_LEN).find(|&l| idx < self.offsets[l + 1]).unwrap();
        let mut v = idx - self.offsets[len];
        let mut out = vec![0u8; len];
        for slot in out.iter_mut().rev() {
            *slot = (v % 3) as u8;
            v /= 3;
        }
        out
    }

    fn encode(&self, list: &[u8]) -> usize {
        self.offsets[list.len()] + list.iter().fold(0, |acc, &d| acc * 3 + d as usize)
    }
}

#[test]
fn criterion_6_metrics_match_brute_force_and_examples() {
    let _guard = serial();
    let index = ListIndex::new();
    let n = index.total();
    let lists: Vec<Vec<u8>> = (0..n).map(|i| index.decode(i)).collect();
    let tails: Vec<usize> = lists.iter().map(|l| if l.is_empty() { 0 } else { index.encode(&l[1..]) }).collect();
    // the recursive definition, memoized over every pair of lists; tails are
    // shorter, so filling by total length makes every lookup valid
    let mut memo = vec![u8::MAX; n * n];
    let mut by_len: Vec<usize> = (0..n).collect();
    by_len.sort_by_key(|&i| lists[i].len());
    let mut mismatches = 0usize;
    let mut first = None;
    for total in 0..=2 * ListIndex::MAX_LEN {
        for &a in &by_len {
            let la = lists[a].len();
            if la > total || total - la > ListIndex::MAX_LEN {
                continue;
            }
            let lb = total - la;
            for b in index.offsets[lb]..index.offsets[lb + 1] {
                let d = match (la, lb) {
                    (0, _) => lb as u8,
                    (_, 0) => la as u8,
                    _ => {
                        let (ta, tb) = (tails[a], tails[b]);
                        let sub = memo[ta * n + tb] + u8::from(lists[a][0] != lists[b][0]);
                        sub.min(memo[ta * n + b] + 1).min(memo[a * n + tb] + 1)
                    }
                };
                memo[a * n + b] = d;
                if levenshtein(&lists[a], &lists[b]) != d as usize {
                    mismatches += 1;
                    first.get_or_insert((a, b));
                }
            }
        }
    }
    let pairs = n * n;

    let chars = |s: &str| s.chars().collect::<Vec<_>>();
    let examples = [
        ("lev(x, x)", levenshtein(&chars("abc"), &chars("abc")) as f64, 0.0),
        ("lev('', abc)", levenshtein(&chars(""), &chars("abc")) as f64, 3.0),
        ("lev(kitten, sitting)", levenshtein(&chars("kitten"), &chars("sitting")) as f64, 3.0),
        ("CER the cat/the hat", compute_cer(&["the cat"], &["the hat"]).unwrap(), 1.0 / 7.0),
        ("CER pooled", compute_cer(&["abcd", "abcdef"], &["abcx", "xyzdef"]).unwrap(), 4.0 / 10.0),
        ("CER perfect", compute_cer(&["a b", "c"], &["a b", "c"]).unwrap(), 0.0),
        ("WER the cat/the hat", compute_wer(&["the cat"], &["the hat"]).unwrap(), 0.5),
        ("WER insertion", compute_wer(&["the cat"], &["the big cat"]).unwrap(), 0.5),
        ("WER empty hyp", compute_wer(&["one two three"], &[""]).unwrap(), 1.0),
    ];
    let wrong: Vec<String> = examples
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    let detail = format!(
        "{pairs} list pairs, {mismatches} mismatches{}; {} of {} worked examples exact{}",
        first.map(|(a, b)| format!(" (first {:?} vs {:?})", lists[a], lists[b])).unwrap_or_default(),
        examples.len() - wrong.len(),
        examples.len(),
        if wrong.is_empty() { String::new() } else { format!(" ({})", wrong.join("; ")) }
    );
    verdict(6, "metrics", mismatches == 0 && wrong.is_empty(), &detail);
}

// ------------------------------------------------------------ criteria 7 and 8

struct Benchmark {
    results: Result<ExperimentResults, String>,
    elapsed: Duration,
}

fn benchmark_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    RunConfig::load(&path).unwrap()
}

/// Runs the benchmark experiment once; criteria 7 and 8 share its runs.
fn benchmark() -> &'static Benchmark {
    static RUN: OnceLock<Benchmark> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = benchmark_config();
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let results = run_experiment(&cfg, dir.path(), &mut |line| {
            let _ = writeln!(io::stderr(), "  [{:>5.0}s] {line}", started.elapsed().as_secs_f64());
        })
        .map_err(|e| e.to_string());
        let elapsed = started.elapsed();
        if let Ok(r) = &results {
            let _ = write!(io::stderr(), "{}", r.table());
        }
        Benchmark { results, elapsed }
    })
}

fn greedy_median_cer(r: &ExperimentResults, arch: ModelKind, tasks: &[usize]) -> Option<f64> {
    r.row(arch, tasks, DecoderKind::Greedy).map(|row| row.median_cer)
}

#[test]
fn criterion_7_bmt_is_no_worse_than_single_task() {
    let _guard = serial();
    let cfg = benchmark_config();
    assert_eq!(cfg.synth, SynthConfig::default(), "the benchmark uses the default synthetic data");
    assert_eq!((cfg.synth.train_lines, cfg.synth.val_lines, cfg.synth.test_lines), (2000, 200, 400));
    assert_eq!(cfg.experiment.seeds, vec![0, 1, 2]);
    let bench = benchmark();
    let minutes = bench.elapsed.as_secs_f64() / 60.0;
    let r = match &bench.results {
        Ok(r) => r,
        Err(e) => return verdict(7, "multi-task vs single-task", false, &format!("experiment failed: {e}")),
    };
    let single = greedy_median_cer(r, ModelKind::Single, &[1]).unwrap();
    let bmt = greedy_median_cer(r, ModelKind::Bmt, &[1, 2]).unwrap();
    let hmt = greedy_median_cer(r, ModelKind::Hmt, &[1, 2]).unwrap();
    let checks = [
        ("BMT <= single", bmt <= single),
        ("both under 20%", single < 0.2 && bmt < 0.2),
        ("under 45 min", minutes < 45.0),
        ("HMT within 5 pp of BMT", (hmt - bmt).abs() <= 0.05),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        7,
        "multi-task vs single-task",
        failed.is_empty(),
        &format!(
            "median test greedy CER single {:.2}%, BMT(1+2) {:.2}%, HMT(1+2) {:.2}%; wall time {minutes:.1} min{}",
            100.0 * single,
            100.0 * bmt,
            100.0 * hmt,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    );
}

#[test]
fn criterion_8_word_lm_lowers_wer() {
    let _guard = serial();
    let r = match &benchmark().results {
        Ok(r) => r,
        Err(e) => return verdict(8, "word LM vs greedy", false, &format!("experiment failed: {e}")),
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for (arch, tasks) in [(ModelKind::Single, vec![1]), (ModelKind::Bmt, vec![1, 2])] {
        let greedy = r.row(arch, &tasks, DecoderKind::Greedy).unwrap().median_wer;
        let word = r.row(arch, &tasks, DecoderKind::Word).unwrap().median_wer;
        ok &= word < greedy;
        parts.push(format!("{} WER greedy {:.2}% vs word LM {:.2}%", arch.name(), 100.0 * greedy, 100.0 * word));
    }
    verdict(8, "word LM vs greedy", ok, &parts.join("; "));
}

// ---------------------------------------------------------------- criterion 9

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn criterion_9_experiments_are_deterministic() {
    let _guard = serial();
    let mut cfg = RunConfig::default();
    cfg.synth.train_lines = 48;
    cfg.synth.val_lines = 8;
    cfg.synth.test_lines = 8;
    cfg.synth.seed = 9;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.augment = true;
    cfg.dims.hidden = 16;
    cfg.dims.branch_hidden = 16;
    cfg.experiment.seeds = vec![5];
    cfg.experiment.task_sets = vec![vec![1, 2], vec![1, 2, 3]];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg, d.path(), &mut |_| {}).unwrap();
    }
    let (a, b) = (tree(dirs[0].path()), tree(dirs[1].path()));
    let mut differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    differing.extend(b.keys().filter(|k| !a.contains_key(*k)).map(|k| k.display().to_string()));
    let count = |suffix: &str| a.keys().filter(|k| k.to_string_lossy().ends_with(suffix)).count();
    let (checkpoints, hypotheses) = (count("model.json"), count(".tsv"));
    verdict(
        9,
        "determinism",
        differing.is_empty() && checkpoints > 0,
        &format!(
            "{} files compared ({} checkpoints, {} hypothesis files), {} differ{}",
            a.len(),
            checkpoints,
            hypotheses,
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    );
}
