//! Deterministic synthetic handwriting: glyph atlas, line rendering,
//! augmentation and train/val/test dataset generation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LineImage;

pub const GLYPH_HEIGHT: usize = 16;
pub const GLYPH_WIDTH: usize = 8;
pub const MIN_INK_DENSITY: f64 = 0.25;
pub const MAX_INK_DENSITY: f64 = 0.55;

const WORDS: &str = include_str!("../data/words.txt");

/// The embedded English word list, most frequent first.
pub fn word_list() -> Vec<&'static str> {
    WORDS.lines().map(str::trim).filter(|w| !w.is_empty()).collect()
}

/// Binary glyph masks for `a`-`z`; space is an empty glyph of random width.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphAtlas {
    masks: BTreeMap<char, Array2<u8>>,
}

fn ink_density(mask: &Array2<u8>) -> f64 {
    mask.iter().map(|&v| v as f64).sum::<f64>() / mask.len() as f64
}

impl GlyphAtlas {
    pub fn mask(&self, c: char) -> Option<&Array2<u8>> {
        self.masks.get(&c)
    }

    pub fn supports(&self, c: char) -> bool {
        c == ' ' || self.masks.contains_key(&c)
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.masks.keys().copied()
    }

    pub fn density(&self, c: char) -> Option<f64> {
        self.masks.get(&c).map(ink_density)
    }
}

/// Builds one mask per lowercase letter. Each mask is a union of 4x4 squares
/// anchored on a 2-pixel lattice inside rows 2..14, so every stroke is at
/// least 4 pixels thick and survives a 3x3 erosion. Masks are re-rolled until
/// their ink density is within bounds and no two letters coincide.
pub fn build_glyph_atlas(seed: u64) -> GlyphAtlas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = BTreeMap::new();
    let mut seen = HashSet::new();
    for c in 'a'..='z' {
        let mask = loop {
            let mut m = Array2::<u8>::zeros((GLYPH_HEIGHT, GLYPH_WIDTH));
            for r0 in (2..=10).step_by(2) {
                for c0 in (0..=GLYPH_WIDTH - 4).step_by(2) {
                    if rng.random_bool(0.3) {
                        m.slice_mut(s![r0..r0 + 4, c0..c0 + 4]).fill(1);
                    }
                }
            }
            let d = ink_density(&m);
            if (MIN_INK_DENSITY..=MAX_INK_DENSITY).contains(&d) && seen.insert(m.clone()) {
                break m;
            }
        };
        masks.insert(c, mask);
    }
    GlyphAtlas { masks }
}

/// Per-glyph variation applied by [`render_line`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum vertical shift in pixels.
    pub jitter: usize,
    pub flip_prob: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub margin: usize,
    pub space_min: usize,
    pub space_max: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            scale_min: 0.75,
            scale_max: 1.25,
            jitter: 1,
            flip_prob: 0.03,
            intensity_min: 0.7,
            intensity_max: 1.0,
            margin: 2,
            space_min: 4,
            space_max: 8,
        }
    }
}

impl RenderParams {
    /// Renders every glyph mask verbatim (spaces still have random width).
    pub fn noiseless() -> Self {
        RenderParams {
            scale_min: 1.0,
            scale_max: 1.0,
            jitter: 0,
            flip_prob: 0.0,
            intensity_min: 1.0,
            intensity_max: 1.0,
            ..RenderParams::default()
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Renders `text` left to right with `margin` blank columns on both sides.
pub fn render_line<R: Rng>(text: &str, atlas: &GlyphAtlas, params: &RenderParams, rng: &mut R) -> Result<LineImage> {
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (pos, ch) in text.chars().enumerate() {
        if ch == ' ' {
            let w = rng.random_range(params.space_min..=params.space_max);
            for _ in 0..w {
                let col = (0..GLYPH_HEIGHT)
                    .map(|_| {
                        if params.flip_prob > 0.0 && rng.random_bool(params.flip_prob) {
                            uniform(rng, params.intensity_min, params.intensity_max)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                columns.push(col);
            }
            continue;
        }
        let mask = atlas.mask(ch).ok_or(Error::Encoding { ch, pos })?;
        let scale = uniform(rng, params.scale_min, params.scale_max);
        let width = ((GLYPH_WIDTH as f64 * scale).round() as usize).max(1);
        let shift = if params.jitter > 0 {
            rng.random_range(-(params.jitter as i64)..=params.jitter as i64) as isize
        } else {
            0
        };
        let ink = uniform(rng, params.intensity_min, params.intensity_max);
        for j in 0..width {
            let src_c = j * GLYPH_WIDTH / width;
            let mut col = vec![0.0; GLYPH_HEIGHT];
            for (r, v) in col.iter_mut().enumerate() {
                let src_r = r as isize - shift;
                let on = (0..GLYPH_HEIGHT as isize).contains(&src_r) && mask[[src_r as usize, src_c]] == 1;
                let on = if params.flip_prob > 0.0 && rng.random_bool(params.flip_prob) { !on } else { on };
                *v = if on { ink } else { 0.0 };
            }
            columns.push(col);
        }
    }
    let width = columns.len() + 2 * params.margin;
    let mut px = Array2::zeros((GLYPH_HEIGHT, width));
    for (j, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            px[[r, params.margin + j]] = *v;
        }
    }
    Ok(LineImage::new(px))
}

/// Strength of [`augment_image`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Shear angle is drawn from `[-max_shear, max_shear]` radians.
    pub max_shear: f64,
    pub morph_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            max_shear: 0.15,
            morph_prob: 0.5,
        }
    }
}

/// Horizontal shear about the middle row, nearest-neighbour sampled.
pub fn shear(img: &LineImage, angle: f64) -> LineImage {
    let (h, w) = img.pixels.dim();
    let k = angle.tan();
    let mid = (h as f64 - 1.0) / 2.0;
    let px = Array2::from_shape_fn((h, w), |(r, c)| {
        let src = (c as f64 - k * (r as f64 - mid)).round();
        if src >= 0.0 && (src as usize) < w {
            img.pixels[[r, src as usize]]
        } else {
            0.0
        }
    });
    LineImage::new(px)
}

fn morph(img: &LineImage, dilate: bool) -> LineImage {
    let (h, w) = img.pixels.dim();
    let px = Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = img.pixels[[r, c]];
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (y, x) = (r as isize + dr, c as isize + dc);
                if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                    let v = img.pixels[[y as usize, x as usize]];
                    acc = if dilate { acc.max(v) } else { acc.min(v) };
                }
            }
        }
        acc
    });
    LineImage::new(px)
}

/// 3x3 grayscale dilation (max filter).
pub fn dilate(img: &LineImage) -> LineImage {
    morph(img, true)
}

/// 3x3 grayscale erosion (min filter).
pub fn erode(img: &LineImage) -> LineImage {
    morph(img, false)
}

/// Random shear followed, with probability `morph_prob`, by a dilation or an
/// erosion. Dimensions are preserved and values clipped to [0,1].
pub fn augment_image<R: Rng>(img: &LineImage, params: &AugmentParams, rng: &mut R) -> LineImage {
    let angle = uniform(rng, -params.max_shear, params.max_shear);
    let mut out = shear(img, angle);
    if params.morph_prob > 0.0 && rng.random_bool(params.morph_prob.min(1.0)) {
        out = if rng.random_bool(0.5) { dilate(&out) } else { erode(&out) };
    }
    out.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Rounds pixels to the 8-bit grid used on disk.
pub fn quantize(img: &mut LineImage) {
    img.pixels.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSample {
    pub id: String,
    pub image: LineImage,
    pub transcript: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_lines: usize,
    pub val_lines: usize,
    pub test_lines: usize,
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
    pub render: RenderParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_lines: 2000,
            val_lines: 200,
            test_lines: 400,
            lexicon_size: 100,
            min_words: 3,
            max_words: 7,
            seed: 0,
            render: RenderParams::default(),
        }
    }
}

impl SynthConfig {
    fn lines(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_lines,
            Split::Val => self.val_lines,
            Split::Test => self.test_lines,
        }
    }
}

/// In-memory synthetic benchmark.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub atlas: GlyphAtlas,
    pub splits: BTreeMap<Split, Vec<LineSample>>,
}

impl SynthData {
    pub fn split(&self, split: Split) -> &[LineSample] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or_default()
    }

    /// Language-model corpus: the training transcripts.
    pub fn lm_corpus(&self) -> Vec<String> {
        self.split(Split::Train).iter().map(|s| s.transcript.clone()).collect()
    }
}

/// Random stream for line `index`, independent of generation order.
fn line_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::Config(format!(
            "invalid words-per-line range {}..={}",
            cfg.min_words, cfg.max_words
        )));
    }
    let words = word_list();
    if cfg.lexicon_size == 0 || cfg.lexicon_size > words.len() {
        return Err(Error::Config(format!(
            "lexicon size must be in 1..={}, got {}",
            words.len(),
            cfg.lexicon_size
        )));
    }
    let lexicon = &words[..cfg.lexicon_size];
    let atlas = build_glyph_atlas(cfg.seed);
    let mut splits = BTreeMap::new();
    let mut offset = 0u64;
    for split in Split::ALL {
        let n = cfg.lines(split);
        let samples: Vec<LineSample> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = line_rng(cfg.seed, offset + i as u64);
                let count = rng.random_range(cfg.min_words..=cfg.max_words);
                let text = (0..count)
                    .map(|_| lexicon[rng.random_range(0..lexicon.len())])
                    .collect::<Vec<_>>()
                    .join(" ");
                let mut image = render_line(&text, &atlas, &cfg.render, &mut rng)?;
                quantize(&mut image);
                Ok(LineSample {
                    id: format!("{}-{:05}", split.name(), i),
                    image,
                    transcript: text,
                })
            })
            .collect::<Result<_>>()?;
        offset += n as u64;
        splits.insert(split, samples);
    }
    Ok(SynthData { atlas, splits })
}

/// Manifest file name of a split inside a dataset directory.
pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.tsv", split.name()))
}

pub const LM_CORPUS_FILE: &str = "lm_corpus.txt";

/// Writes `images/<id>.pgm`, one `<split>.tsv` manifest per split and the LM corpus.
pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (split, samples) in &data.splits {
        let mut manifest = String::new();
        for s in samples {
            let rel = format!("images/{}.pgm", s.id);
            s.image.write_pgm(&dir.join(&rel))?;
            manifest.push_str(&format!("{}\t{}\t{}\n", s.id, rel, s.transcript));
        }
        let path = manifest_path(dir, *split);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    }
    let mut corpus = data.lm_corpus().join("\n");
    corpus.push('\n');
    let path = dir.join(LM_CORPUS_FILE);
    fs::write(&path, corpus).map_err(|e| Error::io(&path, e))
}

/// Reads a TSV manifest; image paths are relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<LineSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ids = HashSet::new();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(rel), Some(transcript)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(path, i + 1, "expected id<TAB>path<TAB>transcript"));
        };
        if !ids.insert(id.to_string()) {
            return Err(Error::parse(path, i + 1, format!("duplicate id {id}")));
        }
        let image = LineImage::read_pgm(&base.join(rel))?;
        samples.push(LineSample {
            id: id.to_string(),
            image,
            transcript: transcript.to_string(),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atlas_is_deterministic() {
        assert_eq!(build_glyph_atlas(7), build_glyph_atlas(7));
        let a = build_glyph_atlas(0);
        let b = build_glyph_atlas(1);
        assert!(a.chars().any(|c| a.mask(c) != b.mask(c)));
    }

    #[test]
    fn atlas_density_bounds() {
        let atlas = build_glyph_atlas(3);
        assert_eq!(atlas.chars().count(), 26);
        assert!(atlas.supports(' '));
        for c in atlas.chars() {
            let d = atlas.density(c).unwrap();
            assert!((MIN_INK_DENSITY..=MAX_INK_DENSITY).contains(&d), "{c}: {d}");
        }
    }

    #[test]
    fn empty_line_is_margins_only() {
        let atlas = build_glyph_atlas(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render_line("", &atlas, &RenderParams::default(), &mut rng).unwrap();
        assert_eq!(img.width(), 4);
        assert_eq!(img.height(), GLYPH_HEIGHT);
    }

    #[test]
    fn two_glyph_width_range() {
        let atlas = build_glyph_atlas(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let w = render_line("ab", &atlas, &RenderParams::default(), &mut rng).unwrap().width();
            assert!((16..=24).contains(&w), "{w}");
        }
    }

    #[test]
    fn noiseless_render_copies_masks() {
        let atlas = build_glyph_atlas(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render_line("ka", &atlas, &RenderParams::noiseless(), &mut rng).unwrap();
        let k = img.pixels.slice(ndarray::s![.., 2..10]).mapv(|v| v as u8);
        let a = img.pixels.slice(ndarray::s![.., 10..18]).mapv(|v| v as u8);
        assert_eq!(&k, atlas.mask('k').unwrap());
        assert_eq!(&a, atlas.mask('a').unwrap());
    }

    #[test]
    fn unknown_char_is_rejected() {
        let atlas = build_glyph_atlas(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            render_line("a?", &atlas, &RenderParams::default(), &mut rng),
            Err(Error::Encoding { ch: '?', pos: 1 })
        ));
    }

    fn sample_image() -> LineImage {
        let atlas = build_glyph_atlas(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        render_line("the cat", &atlas, &RenderParams::default(), &mut rng).unwrap()
    }

    #[test]
    fn zero_shear_is_identity() {
        let img = sample_image();
        assert_eq!(shear(&img, 0.0), img);
        let params = AugmentParams {
            max_shear: 0.0,
            morph_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_image(&img, &params, &mut rng), img);
    }

    #[test]
    fn morphology_is_monotone() {
        let img = sample_image();
        let d = dilate(&img);
        let e = erode(&img);
        assert!(d.pixels.iter().zip(&img.pixels).all(|(a, b)| a >= b));
        assert!(e.pixels.iter().zip(&img.pixels).all(|(a, b)| a <= b));
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let img = sample_image();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment_image(&img, &AugmentParams::default(), &mut rng);
            assert_eq!(out.pixels.dim(), img.pixels.dim());
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            train_lines: 20,
            val_lines: 5,
            test_lines: 6,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn dataset_bookkeeping() {
        let data = generate_dataset(&small_cfg()).unwrap();
        let ids: HashSet<&str> = data.splits.values().flatten().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), 31);
        let lexicon: HashSet<&str> = word_list()[..100].iter().copied().collect();
        for s in data.splits.values().flatten() {
            let words: Vec<&str> = s.transcript.split(' ').collect();
            assert!((3..=7).contains(&words.len()));
            assert!(words.iter().all(|w| lexicon.contains(w)));
            // enough frames for every unigram target
            assert!(s.image.width() / 2 >= s.transcript.chars().count());
        }
        assert_eq!(data.lm_corpus().len(), 20);
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let a = generate_dataset(&small_cfg()).unwrap();
        let b = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(a.splits, b.splits);

        let dir = tempfile::tempdir().unwrap();
        write_dataset(&a, dir.path()).unwrap();
        let back = read_manifest(&manifest_path(dir.path(), Split::Val)).unwrap();
        assert_eq!(back, a.split(Split::Val));
        let corpus = fs::read_to_string(dir.path().join(LM_CORPUS_FILE)).unwrap();
        assert_eq!(corpus.lines().count(), 20);
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        LineImage::blank(16, 4).write_pgm(&dir.path().join("x.pgm")).unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "a\tx.pgm\thi\na\tx.pgm\tho\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Parse { line: 2, .. })));
    }
}
