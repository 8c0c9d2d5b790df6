//! Single-task, block multi-task and hierarchical multi-task CTC models.
//!
//! Every architecture shares the encoder: a ReLU patch lift to `d` channels,
//! column-wise max-pooling, temporal max-pooling, frame stacking and
//! `rnn_layers` bidirectional recurrent layers.
//!
//! * `single`: the encoder feeds one unigram head.
//! * `bmt`: the unigram head reads the encoder directly; every coarser task
//!   has its own recurrent layer and head, in parallel on the encoder output.
//! * `hmt`: the encoder feeds the unigram head; each coarser task stacks one
//!   more recurrent layer on the previous level and reads it with its head.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::{ctc_grad, ctc_loss, min_frames, PosteriorGrid};
use crate::decode::greedy_decode;
use crate::decomp::decompose_ngrams;
use crate::error::{Error, Result};
use crate::image::LineImage;
use crate::metrics::{compute_cer, compute_wer};
use crate::nn::{
    column_max_pool, column_max_pool_backward, frame_stack, frame_stack_backward, load_records, log_softmax_rows,
    time_max_pool, time_max_pool_backward, BiRnn, BiRnnCache, Dense, ParamRecords, PatchLift, PatchLiftCache,
    RmsProp, TensorRecord,
};
use crate::synth::{augment_image, AugmentParams, LineSample};
use crate::vocab::{build_alphabet, build_ngram_vocab, encode_unigrams, Alphabet, LabelSeq, NgramVocab, TokenSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Single,
    Bmt,
    Hmt,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Single => "single",
            ModelKind::Bmt => "bmt",
            ModelKind::Hmt => "hmt",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ModelKind::Single),
            "bmt" => Ok(ModelKind::Bmt),
            "hmt" => Ok(ModelKind::Hmt),
            other => Err(Error::Config(format!("unknown model kind {other:?} (expected single, bmt or hmt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Expected image height.
    pub height: usize,
    /// Feature channels of the lift.
    pub channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub time_pool: usize,
    /// Frame-stacking window (odd).
    pub stack: usize,
    pub hidden: usize,
    pub rnn_layers: usize,
    pub branch_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            height: 16,
            channels: 32,
            patch_height: 13,
            patch_width: 3,
            time_pool: 2,
            stack: 3,
            hidden: 64,
            rnn_layers: 2,
            branch_hidden: 64,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("channels", self.channels),
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
            ("time_pool", self.time_pool),
            ("stack", self.stack),
            ("hidden", self.hidden),
            ("rnn_layers", self.rnn_layers),
            ("branch_hidden", self.branch_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model dimension {name} must be positive")));
        }
        if self.stack % 2 == 0 || self.patch_height % 2 == 0 || self.patch_width % 2 == 0 {
            return Err(Error::Config("stack and patch sizes must be odd".into()));
        }
        Ok(())
    }
}

/// Output granularity of one head and the size of its vocabulary (blank excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n: usize,
    pub vocab_len: usize,
}

/// Vocabularies of all tasks of a model: the character alphabet plus one
/// n-gram vocabulary per auxiliary task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVocabs {
    pub alphabet: Alphabet,
    pub ngrams: BTreeMap<usize, NgramVocab>,
}

impl TaskVocabs {
    /// Builds vocabularies for `tasks` (which must contain 1) from transcripts.
    pub fn build<S: AsRef<str>>(transcripts: &[S], tasks: &[usize], top_k: usize) -> Result<Self> {
        check_task_list(tasks)?;
        let alphabet = build_alphabet(transcripts)?;
        let ngrams = tasks
            .iter()
            .filter(|&&n| n > 1)
            .map(|&n| Ok((n, build_ngram_vocab(transcripts, n, top_k)?)))
            .collect::<Result<_>>()?;
        Ok(TaskVocabs { alphabet, ngrams })
    }

    pub fn tasks(&self) -> Vec<usize> {
        std::iter::once(1).chain(self.ngrams.keys().copied()).collect()
    }

    pub fn vocab_len(&self, n: usize) -> Option<usize> {
        if n == 1 {
            Some(self.alphabet.tokens().len())
        } else {
            self.ngrams.get(&n).map(TokenSet::len)
        }
    }

    pub fn specs(&self) -> Vec<TaskSpec> {
        self.tasks()
            .into_iter()
            .map(|n| TaskSpec {
                n,
                vocab_len: self.vocab_len(n).expect("listed task"),
            })
            .collect()
    }

    /// Target sequence of task `n` for `text`.
    pub fn target(&self, n: usize, text: &str) -> Result<LabelSeq> {
        if n == 1 {
            return encode_unigrams(text, &self.alphabet);
        }
        let vocab = self
            .ngrams
            .get(&n)
            .ok_or_else(|| Error::Config(format!("no vocabulary for task {n}")))?;
        Ok(decompose_ngrams(text, vocab))
    }

    fn file_name(n: usize) -> String {
        format!("vocab_{n}.txt")
    }

    /// Writes one dump per task into `dir` and returns their SHA-256 digests.
    pub fn write(&self, dir: &Path) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for n in self.tasks() {
            let path = dir.join(Self::file_name(n));
            if n == 1 {
                self.alphabet.write_dump(&path)?;
            } else {
                self.ngrams[&n].write_dump(&path)?;
            }
            hashes.insert(Self::file_name(n), file_sha256(&path)?);
        }
        Ok(hashes)
    }

    /// Reads the dumps for `tasks` from `dir`, checking digests when given.
    pub fn read(dir: &Path, tasks: &[usize], hashes: Option<&BTreeMap<String, String>>) -> Result<Self> {
        check_task_list(tasks)?;
        let mut alphabet = None;
        let mut ngrams = BTreeMap::new();
        for &n in tasks {
            let name = Self::file_name(n);
            let path = dir.join(&name);
            if let Some(h) = hashes {
                let want = h
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint manifest has no hash for {name}")))?;
                let got = file_sha256(&path)?;
                if &got != want {
                    return Err(Error::Config(format!(
                        "{} does not match the checkpoint (sha256 {got}, expected {want})",
                        path.display()
                    )));
                }
            }
            if n == 1 {
                alphabet = Some(Alphabet::read_dump(&path)?);
            } else {
                let v = NgramVocab::read_dump(&path)?;
                if v.n() != n {
                    return Err(Error::Config(format!("{} holds {}-grams, expected {n}-grams", path.display(), v.n())));
                }
                ngrams.insert(n, v);
            }
        }
        Ok(TaskVocabs {
            alphabet: alphabet.expect("task list contains 1"),
            ngrams,
        })
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn check_task_list(tasks: &[usize]) -> Result<()> {
    if tasks.first() != Some(&1) {
        return Err(Error::Config(format!("task list {tasks:?} must start with the unigram task 1")));
    }
    if tasks.windows(2).any(|w| w[0] >= w[1]) || tasks.iter().any(|&n| n > 4) {
        return Err(Error::Config(format!("task list {tasks:?} must be strictly increasing within 1..=4")));
    }
    Ok(())
}

/// One task branch: an optional private recurrent layer and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub n: usize,
    pub rnn: Option<BiRnn>,
    pub head: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub lift: PatchLift,
    pub encoder: Vec<BiRnn>,
    /// Ordered by ascending `n`; the first branch is the unigram task.
    pub branches: Vec<Branch>,
}

/// Log-form posterior grids keyed by task granularity.
pub type TaskPosteriors = BTreeMap<usize, PosteriorGrid>;

/// Activations saved by [`Model::forward_cached`] for the backward pass.
pub struct ForwardCache {
    lift: PatchLiftCache,
    col_arg: Array2<usize>,
    pooled_in: usize,
    time_arg: Array2<usize>,
    encoder: Vec<BiRnnCache>,
    encoder_out: Array2<f64>,
    branches: Vec<BranchCache>,
}

struct BranchCache {
    rnn: Option<BiRnnCache>,
    head_in: Array2<f64>,
}

/// Assembles and initializes a model. Tasks must be sorted by `n` and start
/// with the unigram task.
pub fn build_model(kind: ModelKind, tasks: &[TaskSpec], dims: &ModelDims, seed: u64) -> Result<Model> {
    dims.validate()?;
    let ns: Vec<usize> = tasks.iter().map(|t| t.n).collect();
    if ns.first() != Some(&1) {
        return Err(Error::Config("the unigram task (n=1) is required".into()));
    }
    check_task_list(&ns)?;
    if kind == ModelKind::Single && tasks.len() != 1 {
        return Err(Error::Config(format!("a single-task model takes only the unigram task, got {ns:?}")));
    }
    if let Some(t) = tasks.iter().find(|t| t.vocab_len == 0) {
        return Err(Error::Config(format!("task {} has an empty vocabulary", t.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lift = PatchLift::new(dims.patch_height, dims.patch_width, dims.channels, &mut rng);
    let mut input = dims.stack * dims.channels;
    let mut encoder = Vec::with_capacity(dims.rnn_layers);
    for _ in 0..dims.rnn_layers {
        encoder.push(BiRnn::new(input, dims.hidden, &mut rng));
        input = 2 * dims.hidden;
    }
    let mut branches = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let rnn = match kind {
            _ if i == 0 => None,
            ModelKind::Single => None,
            ModelKind::Bmt => Some(BiRnn::new(input, dims.branch_hidden, &mut rng)),
            ModelKind::Hmt => {
                let prev = branches.last().map_or(input, |b: &Branch| b.rnn.as_ref().map_or(input, BiRnn::output_dim));
                Some(BiRnn::new(prev, dims.branch_hidden, &mut rng))
            }
        };
        let head_in = rnn.as_ref().map_or(input, BiRnn::output_dim);
        let head = Dense::new(head_in, t.vocab_len + 1, &mut rng);
        branches.push(Branch { n: t.n, rnn, head });
    }
    Ok(Model {
        kind,
        dims: dims.clone(),
        lift,
        encoder,
        branches,
    })
}

impl Model {
    pub fn tasks(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.n).collect()
    }

    /// Named parameters in a fixed order shared with [`Model::params_mut`] and
    /// the gradient list of [`Model::backward`].
    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> =
            self.lift.params().into_iter().map(|(k, v)| (format!("lift.{k}"), v)).collect();
        for (i, l) in self.encoder.iter().enumerate() {
            out.extend(l.params().into_iter().map(|(k, v)| (format!("encoder.{i}.{k}"), v)));
        }
        for b in &self.branches {
            if let Some(r) = &b.rnn {
                out.extend(r.params().into_iter().map(|(k, v)| (format!("task{}.rnn.{k}", b.n), v)));
            }
            out.extend(b.head.params().into_iter().map(|(k, v)| (format!("task{}.head.{k}", b.n), v)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.lift.params_mut();
        for l in &mut self.encoder {
            out.extend(l.params_mut());
        }
        for b in &mut self.branches {
            if let Some(r) = &mut b.rnn {
                out.extend(r.params_mut());
            }
            out.extend(b.head.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Number of output frames for an image of the given width.
    pub fn frames_for_width(&self, width: usize) -> usize {
        width / self.dims.time_pool
    }

    fn check_image(&self, img: &LineImage) -> Result<()> {
        if img.height() != self.dims.height {
            return Err(Error::Input(format!(
                "image height {} does not match the model height {}",
                img.height(),
                self.dims.height
            )));
        }
        if self.frames_for_width(img.width()) == 0 {
            return Err(Error::Input(format!(
                "image width {} gives no frames after {}x temporal pooling",
                img.width(),
                self.dims.time_pool
            )));
        }
        Ok(())
    }

    fn encode(&self, img: &LineImage) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_image(img)?;
        let (map, lift) = self.lift.forward(img.pixels.view())?;
        let (cols, col_arg) = column_max_pool(map.view())?;
        let (pooled, time_arg) = time_max_pool(cols.view(), self.dims.time_pool);
        let mut x = frame_stack(pooled.view(), self.dims.stack)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (y, c) = layer.forward(x.view())?;
            encoder.push(c);
            x = y;
        }
        Ok((
            x.clone(),
            ForwardCache {
                lift,
                col_arg,
                pooled_in: cols.nrows(),
                time_arg,
                encoder,
                encoder_out: x,
                branches: Vec::new(),
            },
        ))
    }

    fn chained(&self) -> bool {
        self.kind == ModelKind::Hmt
    }

    /// Raw logits of every task together with the saved activations.
    pub fn forward_cached(&self, img: &LineImage) -> Result<(Vec<Array2<f64>>, ForwardCache)> {
        let (enc, mut cache) = self.encode(img)?;
        let mut logits = Vec::with_capacity(self.branches.len());
        let mut level = enc;
        for b in &self.branches {
            let input = if self.chained() { level.clone() } else { cache.encoder_out.clone() };
            let (head_in, rnn) = match &b.rnn {
                Some(r) => {
                    let (y, c) = r.forward(input.view())?;
                    (y, Some(c))
                }
                None => (input, None),
            };
            logits.push(b.head.forward(head_in.view())?);
            if self.chained() {
                level = head_in.clone();
            }
            cache.branches.push(BranchCache { rnn, head_in });
        }
        Ok((logits, cache))
    }

    /// Posterior grids of every task.
    pub fn forward(&self, img: &LineImage) -> Result<TaskPosteriors> {
        let (logits, _) = self.forward_cached(img)?;
        Ok(self
            .branches
            .iter()
            .zip(logits)
            .map(|(b, z)| (b.n, PosteriorGrid::from_log_probs(log_softmax_rows(z.view()))))
            .collect())
    }

    /// Posterior grid of task `n` only, skipping branches it does not depend on.
    pub fn forward_task(&self, img: &LineImage, n: usize) -> Result<PosteriorGrid> {
        let idx = self
            .branches
            .iter()
            .position(|b| b.n == n)
            .ok_or_else(|| Error::Config(format!("model has no task {n}")))?;
        let (enc, _) = self.encode(img)?;
        let mut level = enc;
        for (i, b) in self.branches.iter().enumerate() {
            if !self.chained() && i != idx {
                continue;
            }
            let x = match &b.rnn {
                Some(r) => r.forward(level.view())?.0,
                None => level,
            };
            if i == idx {
                let z = b.head.forward(x.view())?;
                return Ok(PosteriorGrid::from_log_probs(log_softmax_rows(z.view())));
            }
            level = x;
        }
        unreachable!("task index located above")
    }

    /// Parameter gradients given the gradient of each task's logits (`None`
    /// for tasks without a loss term). Ordered like [`Model::params`].
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[Option<Array2<f64>>]) -> Vec<Array2<f64>> {
        let nb = self.branches.len();
        assert_eq!(grad_logits.len(), nb, "one gradient slot per task");
        let zeros_like = |ps: Vec<(&'static str, &Array2<f64>)>| -> Vec<Array2<f64>> {
            ps.into_iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect()
        };
        let mut branch_grads: Vec<Vec<Array2<f64>>> = vec![Vec::new(); nb];
        let mut grad_enc: Option<Array2<f64>> = None;
        let accumulate = |acc: &mut Option<Array2<f64>>, g: Array2<f64>| match acc {
            Some(a) => *a += &g,
            None => *acc = Some(g),
        };

        if self.chained() {
            let mut carry: Option<Array2<f64>> = None;
            for i in (0..nb).rev() {
                let b = &self.branches[i];
                let bc = &cache.branches[i];
                let mut g_level = carry.take();
                let head_grads = match &grad_logits[i] {
                    Some(g) => {
                        let (dx, hg) = b.head.backward(bc.head_in.view(), g.view());
                        accumulate(&mut g_level, dx);
                        hg
                    }
                    None => zeros_like(b.head.params()),
                };
                let mut grads = Vec::new();
                if let Some(r) = &b.rnn {
                    match g_level {
                        Some(g) => {
                            let (dx, rg) = r.backward(bc.rnn.as_ref().expect("rnn cache"), g.view());
                            carry = Some(dx);
                            grads.extend(rg);
                        }
                        None => grads.extend(zeros_like(r.params())),
                    }
                } else {
                    carry = g_level;
                }
                grads.extend(head_grads);
                branch_grads[i] = grads;
            }
            grad_enc = carry;
        } else {
            for i in 0..nb {
                let b = &self.branches[i];
                let bc = &cache.branches[i];
                let mut grads = Vec::new();
                match &grad_logits[i] {
                    Some(g) => {
                        let (dx, hg) = b.head.backward(bc.head_in.view(), g.view());
                        match &b.rnn {
                            Some(r) => {
                                let (dx2, rg) = r.backward(bc.rnn.as_ref().expect("rnn cache"), dx.view());
                                accumulate(&mut grad_enc, dx2);
                                grads.extend(rg);
                            }
                            None => accumulate(&mut grad_enc, dx),
                        }
                        grads.extend(hg);
                    }
                    None => {
                        if let Some(r) = &b.rnn {
                            grads.extend(zeros_like(r.params()));
                        }
                        grads.extend(zeros_like(b.head.params()));
                    }
                }
                branch_grads[i] = grads;
            }
        }

        let mut encoder_grads: Vec<Vec<Array2<f64>>> = vec![Vec::new(); self.encoder.len()];
        let lift_grads = match grad_enc {
            Some(mut g) => {
                for (i, layer) in self.encoder.iter().enumerate().rev() {
                    let (dx, lg) = layer.backward(&cache.encoder[i], g.view());
                    encoder_grads[i] = lg;
                    g = dx;
                }
                let g = frame_stack_backward(g.view(), self.dims.stack);
                let g = time_max_pool_backward(&cache.time_arg, g.view(), cache.pooled_in);
                let g = column_max_pool_backward(&cache.col_arg, g.view(), self.dims.height);
                self.lift.backward(&cache.lift, g.view())
            }
            None => {
                for (i, layer) in self.encoder.iter().enumerate() {
                    encoder_grads[i] = zeros_like(layer.params());
                }
                zeros_like(self.lift.params())
            }
        };
        lift_grads
            .into_iter()
            .chain(encoder_grads.into_iter().flatten())
            .chain(branch_grads.into_iter().flatten())
            .collect()
    }

    fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params().into_iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect()
    }

    pub fn to_records(&self) -> ParamRecords {
        self.params()
            .into_iter()
            .map(|(k, v)| (k, TensorRecord::from_matrix(v)))
            .collect()
    }

    pub fn load_params(&mut self, records: &ParamRecords) -> Result<()> {
        let names: Vec<String> = self.params().into_iter().map(|(k, _)| k).collect();
        load_records(records, names.into_iter().zip(self.params_mut()).collect())
    }
}

/// Weight of task `n` (1.0 when unspecified). Keys are task numbers as strings.
pub fn task_weight(weights: &BTreeMap<String, f64>, n: usize) -> f64 {
    weights.get(&n.to_string()).copied().unwrap_or(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_task: BTreeMap<usize, TaskLoss>,
}

/// Whether a target has no usable CTC alignment in `frames` frames.
fn degenerate(target: &LabelSeq, frames: usize) -> bool {
    target.is_empty() || min_frames(&target.ids) > frames
}

/// Weighted sum of per-task CTC losses. Empty or infeasible targets add
/// nothing and are flagged as skipped.
pub fn multitask_loss(
    post: &TaskPosteriors,
    text: &str,
    vocabs: &TaskVocabs,
    weights: &BTreeMap<String, f64>,
) -> Result<LossReport> {
    let mut total = 0.0;
    let mut per_task = BTreeMap::new();
    for (&n, grid) in post {
        let target = vocabs.target(n, text)?;
        let entry = if degenerate(&target, grid.frames()) {
            TaskLoss { loss: 0.0, skipped: true }
        } else {
            let loss = ctc_loss(grid, &target.ids)?;
            total += task_weight(weights, n) * loss;
            TaskLoss { loss, skipped: false }
        };
        per_task.insert(n, entry);
    }
    Ok(LossReport { total, per_task })
}

/// Loss and parameter gradients of [`multitask_loss`] for one sample.
/// Targets are given per task in model order.
pub fn loss_and_grads(
    model: &Model,
    img: &LineImage,
    targets: &[LabelSeq],
    weights: &BTreeMap<String, f64>,
) -> Result<(LossReport, Vec<Array2<f64>>)> {
    let (logits, cache) = model.forward_cached(img)?;
    let mut total = 0.0;
    let mut per_task = BTreeMap::new();
    let mut grad_logits = Vec::with_capacity(logits.len());
    for ((b, z), target) in model.branches.iter().zip(&logits).zip(targets) {
        if degenerate(target, z.nrows()) {
            per_task.insert(b.n, TaskLoss { loss: 0.0, skipped: true });
            grad_logits.push(None);
            continue;
        }
        let w = task_weight(weights, b.n);
        let (loss, g) = ctc_grad(z.view(), &target.ids)?;
        total += w * loss;
        per_task.insert(b.n, TaskLoss { loss, skipped: false });
        grad_logits.push(if w == 0.0 { None } else { Some(g * w) });
    }
    let grads = model.backward(&cache, &grad_logits);
    Ok((LossReport { total, per_task }, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_reduced: f64,
    /// Last epoch trained at `lr`; defaults to half the epochs, rounded up.
    pub lr_switch_epoch: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentParams,
    /// Per-task loss weights keyed by task number; missing tasks weigh 1.0.
    pub task_weights: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            lr_reduced: 1e-4,
            lr_switch_epoch: None,
            batch_size: 8,
            seed: 0,
            augment: false,
            augmentation: AugmentParams::default(),
            task_weights: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_reduced > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (k, w) in &self.task_weights {
            if k.parse::<usize>().map_or(true, |n| !(1..=4).contains(&n)) {
                return Err(Error::Config(format!("task weight key {k:?} is not a task number 1..=4")));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("task weight for {k} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn switch_epoch(&self) -> usize {
        self.lr_switch_epoch.unwrap_or(self.epochs.div_ceil(2))
    }

    /// Learning rate of 1-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.switch_epoch() {
            self.lr
        } else {
            self.lr_reduced
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean weighted total loss per training sample.
    pub train_loss: f64,
    /// Mean loss per task over samples where the task was not skipped.
    pub task_loss: BTreeMap<usize, f64>,
    pub skipped: BTreeMap<usize, usize>,
    pub val_cer: f64,
    pub val_wer: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11e);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Greedy unigram transcriptions of `samples`, in order.
pub fn greedy_transcribe(model: &Model, alphabet: &Alphabet, samples: &[LineSample]) -> Result<Vec<String>> {
    samples
        .par_iter()
        .map(|s| Ok(greedy_decode(&model.forward_task(&s.image, 1)?, alphabet)))
        .collect()
}

/// Trains with seeded shuffled minibatches and RMSProp, keeping the parameters
/// of the epoch with the lowest validation CER (earliest on ties). `observer`
/// sees every epoch record as it is produced.
pub fn train(
    mut model: Model,
    vocabs: &TaskVocabs,
    train_set: &[LineSample],
    val_set: &[LineSample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let tasks = model.tasks();
    if tasks != vocabs.tasks() {
        return Err(Error::Config(format!(
            "model tasks {tasks:?} do not match vocabulary tasks {:?}",
            vocabs.tasks()
        )));
    }
    let targets: Vec<Vec<LabelSeq>> = train_set
        .iter()
        .map(|s| tasks.iter().map(|&n| vocabs.target(n, &s.transcript)).collect())
        .collect::<Result<_>>()?;
    let val_refs: Vec<&str> = val_set.iter().map(|s| s.transcript.as_str()).collect();

    let mut opt = RmsProp::new(model.params().into_iter().map(|(_, p)| p));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut task_sum: BTreeMap<usize, (f64, usize)> = tasks.iter().map(|&n| (n, (0.0, 0))).collect();
        let mut skipped: BTreeMap<usize, usize> = tasks.iter().map(|&n| (n, 0)).collect();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(LossReport, Vec<Array2<f64>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let img = if cfg.augment {
                        augment_image(&s.image, &cfg.augmentation, &mut sample_rng(cfg.seed, epoch, i))
                    } else {
                        s.image.clone()
                    };
                    loss_and_grads(&model, &img, &targets[i], &cfg.task_weights)
                })
                .collect();
            let mut grads = model.zero_grads();
            for (&i, r) in batch.iter().zip(results) {
                let (report, g) = r?;
                if !report.total.is_finite() || g.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                    return Err(Error::NonFinite(format!(
                        "loss {} on training sample {} in epoch {epoch}",
                        report.total, train_set[i].id
                    )));
                }
                loss_sum += report.total;
                for (n, tl) in &report.per_task {
                    if tl.skipped {
                        *skipped.get_mut(n).expect("task") += 1;
                    } else {
                        let e = task_sum.get_mut(n).expect("task");
                        e.0 += tl.loss;
                        e.1 += 1;
                    }
                }
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            opt.step(model.params_mut(), &grads, lr)?;
            steps += 1;
        }
        let hyps = greedy_transcribe(&model, &vocabs.alphabet, val_set)?;
        let val_cer = compute_cer(&val_refs, &hyps)?;
        let val_wer = compute_wer(&val_refs, &hyps)?;
        let record = EpochRecord {
            epoch,
            lr,
            steps,
            train_loss: if train_set.is_empty() { 0.0 } else { loss_sum / train_set.len() as f64 },
            task_loss: task_sum
                .into_iter()
                .map(|(n, (s, c))| (n, if c == 0 { 0.0 } else { s / c as f64 }))
                .collect(),
            skipped,
            val_cer,
            val_wer,
        };
        observer(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val_cer < *b) {
            best = Some((val_cer, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Identifies the checkpoint format on disk.
pub const CHECKPOINT_FORMAT: &str = "ngram-htr-checkpoint/1";
pub const CHECKPOINT_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub kind: ModelKind,
    pub tasks: Vec<TaskSpec>,
    pub dims: ModelDims,
    /// SHA-256 of each vocabulary dump stored next to the checkpoint.
    pub vocab_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub manifest: ModelManifest,
    pub params: ParamRecords,
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Writes `model.json` and the vocabulary dumps into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, vocabs: &TaskVocabs) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab_hashes = vocabs.write(dir)?;
    let ckpt = Checkpoint {
        manifest: ModelManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: model.kind,
            tasks: model
                .branches
                .iter()
                .map(|b| TaskSpec {
                    n: b.n,
                    vocab_len: b.head.output_dim() - 1,
                })
                .collect(),
            dims: model.dims.clone(),
            vocab_hashes,
        },
        params: model.to_records(),
    };
    let path = checkpoint_path(dir);
    let text = serde_json::to_string(&ckpt).map_err(|e| Error::Config(format!("serializing checkpoint: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Model, TaskVocabs)> {
    let path = checkpoint_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&path, e.line(), format!("invalid checkpoint: {e}")))?;
    let m = &ckpt.manifest;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::parse(&path, 1, format!("unsupported checkpoint format {:?}", m.format)));
    }
    let ns: Vec<usize> = m.tasks.iter().map(|t| t.n).collect();
    let vocabs = TaskVocabs::read(dir, &ns, Some(&m.vocab_hashes))?;
    for t in &m.tasks {
        if vocabs.vocab_len(t.n) != Some(t.vocab_len) {
            return Err(Error::Config(format!("vocabulary of task {} does not match the checkpoint", t.n)));
        }
    }
    let mut model = build_model(m.kind, &m.tasks, &m.dims, 0)?;
    model.load_params(&ckpt.params)?;
    Ok((model, vocabs))
}

/// Writes the history as JSON Lines, one record per epoch.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
