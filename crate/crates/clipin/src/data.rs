//! Deterministic synthetic paired data.
//!
//! Each sample is driven by a latent vector z ~ N(0, I_k). The image is a
//! fixed random linear map of z squashed through a sigmoid (plus optional
//! pixel noise); the caption is one codebook token per latent dim encoding
//! its sign and magnitude bucket. Ground-truth labels are the signs of the
//! first `classes` latent dims, so both modalities carry the labels by
//! construction and cross-modal alignment is learnable and measurable.
//!
//! Everything is a pure function of (spec, seed): regenerating a corpus is
//! bit-identical, and batch composition at a given step is independent of
//! any other step.

use crate::augment::{augment_image, augment_text, AugmentConfig};
use crate::error::{Error, Result};
use crate::model::{MASK_TOKEN, PAD_TOKEN};
use crate::numerics::{Rng, Tensor, TokenMatrix};
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentSpec {
    /// Latent dimensionality k.
    pub latent_k: usize,
    /// Number of labeled dims (labels are sign(z_j) for j < classes).
    pub classes: usize,
    /// Std-dev of Gaussian pixel noise added after the sigmoid.
    pub noise_sigma: f64,
    /// Probability that a sample reuses the previous sample's latent.
    pub redundancy_rate: f64,
    /// Probability that a caption describes only a random subset of dims.
    pub looseness_rate: f64,
}

impl Default for LatentSpec {
    fn default() -> LatentSpec {
        LatentSpec {
            latent_k: 8,
            classes: 8,
            noise_sigma: 0.05,
            redundancy_rate: 0.0,
            looseness_rate: 0.0,
        }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_k == 0 || self.classes == 0 || self.classes > self.latent_k {
            return Err(Error::Config(format!(
                "need 1 <= classes <= latent_k, got classes={} latent_k={}",
                self.classes, self.latent_k
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma out of range: {}", self.noise_sigma)));
        }
        for (name, v) in [
            ("redundancy_rate", self.redundancy_rate),
            ("looseness_rate", self.looseness_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} out of range: {v}")));
            }
        }
        Ok(())
    }
}

/// Magnitude buckets per sign.
pub const QUANTILE_BUCKETS: usize = 4;
/// Quartile boundaries of |N(0,1)| (half-normal quartiles).
const BUCKET_THRESHOLDS: [f64; 3] = [0.3186393639643751, 0.6744897501960817, 1.1503493803760079];

/// Bijective map between codebook tokens and (dim, sign, magnitude bucket).
/// Token 0 is pad, 1 is mask; real tokens start at 2. The canonical prompt
/// token for a class is its positive sign at the mid-magnitude bucket.
#[derive(Clone, Copy, Debug)]
pub struct Codebook {
    pub latent_k: usize,
}

impl Codebook {
    pub fn new(latent_k: usize) -> Codebook {
        Codebook { latent_k }
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.latent_k * 2 * QUANTILE_BUCKETS
    }

    pub fn token_for(&self, dim: usize, positive: bool, bucket: usize) -> u32 {
        debug_assert!(dim < self.latent_k && bucket < QUANTILE_BUCKETS);
        (2 + dim * 2 * QUANTILE_BUCKETS + (positive as usize) * QUANTILE_BUCKETS + bucket) as u32
    }

    /// (dim, positive, bucket) for a codebook token; None for pad/mask/OOV.
    pub fn decode(&self, token: u32) -> Option<(usize, bool, usize)> {
        let t = token as usize;
        if t < 2 || t >= self.vocab_size() {
            return None;
        }
        let t = t - 2;
        let dim = t / (2 * QUANTILE_BUCKETS);
        let rest = t % (2 * QUANTILE_BUCKETS);
        Some((dim, rest >= QUANTILE_BUCKETS, rest % QUANTILE_BUCKETS))
    }

    fn bucket(magnitude: f64) -> usize {
        BUCKET_THRESHOLDS.iter().filter(|&&t| magnitude > t).count()
    }

    /// One token per latent dim: sign and magnitude bucket of z_j.
    pub fn encode_z(&self, z: &[f64]) -> Vec<u32> {
        debug_assert_eq!(z.len(), self.latent_k);
        z.iter()
            .enumerate()
            .map(|(j, &v)| self.token_for(j, v > 0.0, Codebook::bucket(v.abs())))
            .collect()
    }

    /// Canonical textual form, e.g. "d3+q2", "[PAD]", "[MASK]".
    pub fn token_string(&self, token: u32) -> String {
        match token {
            PAD_TOKEN => "[PAD]".to_string(),
            MASK_TOKEN => "[MASK]".to_string(),
            t => match self.decode(t) {
                Some((dim, positive, bucket)) => {
                    format!("d{dim}{}q{bucket}", if positive { "+" } else { "-" })
                }
                None => format!("[UNK:{t}]"),
            },
        }
    }

    /// Inverse of [`Codebook::token_string`] for well-formed words.
    pub fn parse(&self, word: &str) -> Option<u32> {
        match word {
            "[PAD]" => return Some(PAD_TOKEN),
            "[MASK]" => return Some(MASK_TOKEN),
            _ => {}
        }
        let rest = word.strip_prefix('d')?;
        let sign_pos = rest.find(['+', '-'])?;
        let dim: usize = rest[..sign_pos].parse().ok()?;
        let positive = rest.as_bytes()[sign_pos] == b'+';
        let bucket: usize = rest[sign_pos + 1..].strip_prefix('q')?.parse().ok()?;
        if dim >= self.latent_k || bucket >= QUANTILE_BUCKETS {
            return None;
        }
        Some(self.token_for(dim, positive, bucket))
    }

    /// Zero-shot prompt token for one class: the token asserting the
    /// attribute most strongly (positive sign, top magnitude bucket) — the
    /// least ambiguous single-token description of "class present".
    pub fn prompt_token(&self, class: usize) -> u32 {
        self.token_for(class, true, QUANTILE_BUCKETS - 1)
    }
}

/// Dense boolean label matrix [rows, classes].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BitMatrix {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<BitMatrix> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "bit matrix construction",
                detail: "ragged label rows".into(),
            });
        }
        Ok(BitMatrix { rows: rows.len(), cols, data: rows.iter().flatten().copied().collect() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Fraction of positive labels in one class column.
    pub fn prevalence(&self, col: usize) -> f64 {
        let pos = (0..self.rows).filter(|&i| self.get(i, col)).count();
        pos as f64 / self.rows as f64
    }
}

/// One generated sample: latent, rendered image, caption tokens, labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub z: Vec<f64>,
    /// Flattened [3, side, side] pixels in [0,1].
    pub image: Vec<f64>,
    /// Caption tokens (unpadded, at most max_text_len).
    pub tokens: Vec<u32>,
    pub labels: Vec<bool>,
}

/// A fully materialized deterministic corpus plus its rendering map.
#[derive(Debug)]
pub struct SyntheticCorpus {
    pub spec: LatentSpec,
    pub image_side: usize,
    pub max_text_len: usize,
    pub codebook: Codebook,
    samples: Vec<Sample>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gain applied to the random pixel map so sigmoid outputs use most of [0,1].
const RENDER_GAIN: f64 = 1.5;

impl SyntheticCorpus {
    /// Generates `n` samples. Sample latents and captions derive from
    /// per-sample sub-streams; only the redundancy cache couples consecutive
    /// samples (and only when redundancy_rate > 0).
    pub fn generate(
        spec: LatentSpec,
        image_side: usize,
        max_text_len: usize,
        n: usize,
        rng: &Rng,
    ) -> Result<SyntheticCorpus> {
        spec.validate()?;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let codebook = Codebook::new(spec.latent_k);
        let pixels = 3 * image_side * image_side;
        // frozen rendering map, one row per pixel, scaled so each pixel's
        // pre-sigmoid activation has std RENDER_GAIN
        let mut wrng = rng.stream("w_img");
        let scale = RENDER_GAIN / (spec.latent_k as f64).sqrt();
        let w_img: Vec<f64> = (0..pixels * spec.latent_k).map(|_| wrng.normal() * scale).collect();

        let sample_root = rng.stream("sample");
        let mut samples = Vec::with_capacity(n);
        let mut prev_z: Option<Vec<f64>> = None;
        for i in 0..n {
            let mut srng = sample_root.substream(i as u64);
            let reuse = srng.bernoulli(spec.redundancy_rate);
            let z: Vec<f64> = match (&prev_z, reuse) {
                (Some(p), true) => p.clone(),
                _ => (0..spec.latent_k).map(|_| srng.normal()).collect(),
            };
            let mut image = Vec::with_capacity(pixels);
            for p in 0..pixels {
                let row = &w_img[p * spec.latent_k..(p + 1) * spec.latent_k];
                let act: f64 = row.iter().zip(&z).map(|(w, zi)| w * zi).sum();
                let v = sigmoid(act) + spec.noise_sigma * srng.normal();
                image.push(v.clamp(0.0, 1.0));
            }
            let mut tokens = codebook.encode_z(&z);
            tokens.truncate(max_text_len);
            if srng.bernoulli(spec.looseness_rate) {
                let kept: Vec<u32> =
                    tokens.iter().copied().filter(|_| srng.bernoulli(0.5)).collect();
                tokens = if kept.is_empty() {
                    // never emit an empty caption: keep one random token
                    vec![tokens[srng.below(tokens.len() as u64) as usize]]
                } else {
                    kept
                };
            }
            let labels: Vec<bool> = z[..spec.classes].iter().map(|&v| v > 0.0).collect();
            prev_z = Some(z.clone());
            samples.push(Sample { id: i as u64, z, image, tokens, labels });
        }
        Ok(SyntheticCorpus { spec, image_side, max_text_len, codebook, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.samples.len() / batch_size
    }

    /// Deterministic batch for a global step: the epoch's shuffled order and
    /// each sample's augmentations depend only on (rng, epoch, sample id), so
    /// step t can be reproduced without replaying steps 0..t.
    pub fn batch_for_step(
        &self,
        step: u64,
        batch_size: usize,
        aug: &AugmentConfig,
        rng: &Rng,
    ) -> Result<PairBatch> {
        let bpe = self.batches_per_epoch(batch_size) as u64;
        if bpe == 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds corpus size {}",
                self.samples.len()
            )));
        }
        let epoch = step / bpe;
        let slot = (step % bpe) as usize;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        rng.stream("shuffle").substream(epoch).shuffle(&mut order);
        let ids = &order[slot * batch_size..(slot + 1) * batch_size];
        self.assemble_batch(ids, aug, &rng.stream("augment").substream(epoch))
    }

    fn assemble_batch(
        &self,
        indices: &[usize],
        aug: &AugmentConfig,
        epoch_rng: &Rng,
    ) -> Result<PairBatch> {
        let b = indices.len();
        let side = self.image_side;
        let pixels = 3 * side * side;
        let mut img1 = Vec::with_capacity(b * pixels);
        let mut img2 = Vec::with_capacity(b * pixels);
        let mut tok1 = Vec::with_capacity(b);
        let mut tok2 = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for &idx in indices {
            let s = &self.samples[idx];
            let srng = epoch_rng.substream(s.id);
            let img = Tensor::new(&[3, side, side], s.image.clone())?;
            let (v1, v2) = augment_image(&img, aug, &srng.stream("image"))?;
            img1.extend_from_slice(v1.values());
            img2.extend_from_slice(v2.values());
            let (t1, t2) = augment_text(&s.tokens, aug, &srng.stream("text"));
            tok1.push(t1);
            tok2.push(t2);
            labels.push(s.labels.clone());
            ids.push(s.id);
        }
        Ok(PairBatch {
            ids,
            images_v1: Tensor::new(&[b, 3, side, side], img1)?,
            images_v2: Tensor::new(&[b, 3, side, side], img2)?,
            tokens_v1: TokenMatrix::from_rows(&tok1, self.max_text_len, PAD_TOKEN),
            tokens_v2: TokenMatrix::from_rows(&tok2, self.max_text_len, PAD_TOKEN),
            labels: BitMatrix::from_rows(&labels)?,
        })
    }

    /// All images stacked [N,3,side,side] without augmentation (evaluation).
    pub fn all_images(&self) -> Result<Tensor> {
        let n = self.samples.len();
        let mut flat = Vec::with_capacity(n * 3 * self.image_side * self.image_side);
        for s in &self.samples {
            flat.extend_from_slice(&s.image);
        }
        Tensor::new(&[n, 3, self.image_side, self.image_side], flat)
    }

    /// All captions padded to max_text_len without augmentation.
    pub fn all_tokens(&self) -> TokenMatrix {
        let rows: Vec<Vec<u32>> = self.samples.iter().map(|s| s.tokens.clone()).collect();
        TokenMatrix::from_rows(&rows, self.max_text_len, PAD_TOKEN)
    }

    pub fn labels(&self) -> Result<BitMatrix> {
        let rows: Vec<Vec<bool>> = self.samples.iter().map(|s| s.labels.clone()).collect();
        BitMatrix::from_rows(&rows)
    }
}

/// One training batch: two views per modality plus labels.
pub struct PairBatch {
    pub ids: Vec<u64>,
    pub images_v1: Tensor,
    pub images_v2: Tensor,
    pub tokens_v1: TokenMatrix,
    pub tokens_v2: TokenMatrix,
    pub labels: BitMatrix,
}

// ---- on-disk pair format ----
//
// <dir>/pairs.tsv    id <TAB> relative_image_path <TAB> caption
// <dir>/labels.tsv   id <TAB> bitstring (one char per class)
// <dir>/images/*.ppm binary 8-bit RGB (P6)

/// Writes one image as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, side: usize, pixels: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    buf.extend_from_slice(format!("P6\n{side} {side}\n255\n").as_bytes());
    // interleave RGB per pixel from planar [3,H,W] storage
    let plane = side * side;
    for p in 0..plane {
        for c in 0..3 {
            let v = (pixels[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            buf.push(v);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a binary PPM written by [`write_ppm`] back into planar [0,1] floats.
pub fn read_ppm(path: &Path) -> Result<(usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let fail = |reason: &str| Error::MalformedRecord { line: 0, reason: format!("{}: {reason}", path.display()) };
    // header: three whitespace-separated fields after the magic
    if !bytes.starts_with(b"P6") {
        return Err(fail("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| fail("non-utf8 header"))?
                .to_string(),
        );
    }
    pos += 1; // single whitespace after maxval
    let [w, h, maxval] = &fields[..] else { return Err(fail("truncated header")) };
    let (w, h): (usize, usize) =
        (w.parse().map_err(|_| fail("bad width"))?, h.parse().map_err(|_| fail("bad height"))?);
    if w != h {
        return Err(fail("expected square image"));
    }
    if maxval != "255" {
        return Err(fail("expected maxval 255"));
    }
    let plane = w * h;
    let data = &bytes[pos..];
    if data.len() != 3 * plane {
        return Err(fail("pixel payload size mismatch"));
    }
    let mut pixels = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            pixels[c * plane + p] = data[p * 3 + c] as f64 / 255.0;
        }
    }
    Ok((w, pixels))
}

/// Exports a corpus as pair files + PPM images + labels. Returns the list of
/// files written (relative to `dir`).
pub fn save_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut written = Vec::new();
    let mut pairs = String::new();
    let mut labels = String::new();
    for s in corpus.samples() {
        let rel = format!("images/{:06}.ppm", s.id);
        write_ppm(&dir.join(&rel), corpus.image_side, &s.image)?;
        written.push(PathBuf::from(&rel));
        let caption: Vec<String> =
            s.tokens.iter().map(|&t| corpus.codebook.token_string(t)).collect();
        pairs.push_str(&format!("{}\t{}\t{}\n", s.id, rel, caption.join(" ")));
        let bits: String = s.labels.iter().map(|&b| if b { '1' } else { '0' }).collect();
        labels.push_str(&format!("{}\t{}\n", s.id, bits));
    }
    std::fs::write(dir.join("pairs.tsv"), pairs)?;
    std::fs::write(dir.join("labels.tsv"), labels)?;
    written.push(PathBuf::from("pairs.tsv"));
    written.push(PathBuf::from("labels.tsv"));
    Ok(written)
}

/// A corpus loaded from pair files.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub ids: Vec<u64>,
    pub image_side: usize,
    /// Planar [0,1] pixels per sample.
    pub images: Vec<Vec<f64>>,
    /// Tokenized captions (unpadded).
    pub tokens: Vec<Vec<u32>>,
    /// Labels when labels.tsv is present.
    pub labels: Option<BitMatrix>,
    /// Captions containing words outside the codebook (mapped to mask).
    pub unknown_token_count: usize,
    /// Captions truncated to max_text_len.
    pub truncated_count: usize,
}

/// Loads `<dir>/pairs.tsv` (+ labels.tsv if present). Unknown caption words
/// map to the mask token and are counted, not fatal; malformed records are.
pub fn load_corpus(dir: &Path, codebook: &Codebook, max_text_len: usize) -> Result<LoadedCorpus> {
    let pairs_path = dir.join("pairs.tsv");
    let file = std::fs::File::open(&pairs_path)?;
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut tokens = Vec::new();
    let mut unknown_token_count = 0;
    let mut truncated_count = 0;
    let mut image_side = None;
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (id, rel, caption) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::MalformedRecord {
                    line: lineno,
                    reason: "expected id<TAB>image_path<TAB>caption".into(),
                })
            }
        };
        let id: u64 = id.parse().map_err(|_| Error::MalformedRecord {
            line: lineno,
            reason: format!("bad id '{id}'"),
        })?;
        let (side, pixels) = read_ppm(&dir.join(rel))?;
        match image_side {
            None => image_side = Some(side),
            Some(s) if s != side => {
                return Err(Error::MalformedRecord {
                    line: lineno,
                    reason: format!("image side {side} differs from first record ({s})"),
                })
            }
            _ => {}
        }
        let mut toks = Vec::new();
        for word in caption.split_whitespace() {
            match codebook.parse(word) {
                Some(t) => toks.push(t),
                None => {
                    unknown_token_count += 1;
                    toks.push(MASK_TOKEN);
                }
            }
        }
        if toks.len() > max_text_len {
            toks.truncate(max_text_len);
            truncated_count += 1;
        }
        if toks.is_empty() {
            return Err(Error::MalformedRecord { line: lineno, reason: "empty caption".into() });
        }
        ids.push(id);
        images.push(pixels);
        tokens.push(toks);
    }
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels_path = dir.join("labels.tsv");
    let labels = if labels_path.exists() {
        let mut rows: std::collections::BTreeMap<u64, Vec<bool>> = Default::default();
        let file = std::fs::File::open(&labels_path)?;
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (id, bits) = line.split_once('\t').ok_or(Error::MalformedRecord {
                line: lineno + 1,
                reason: "expected id<TAB>bits".into(),
            })?;
            let id: u64 = id.parse().map_err(|_| Error::MalformedRecord {
                line: lineno + 1,
                reason: format!("bad id '{id}'"),
            })?;
            rows.insert(id, bits.chars().map(|c| c == '1').collect());
        }
        let ordered: Vec<Vec<bool>> = ids
            .iter()
            .map(|id| {
                rows.get(id).cloned().ok_or(Error::MalformedRecord {
                    line: 0,
                    reason: format!("labels.tsv missing id {id}"),
                })
            })
            .collect::<Result<_>>()?;
        Some(BitMatrix::from_rows(&ordered)?)
    } else {
        None
    };
    Ok(LoadedCorpus {
        ids,
        image_side: image_side.expect("non-empty corpus has an image side"),
        images,
        tokens,
        labels,
        unknown_token_count,
        truncated_count,
    })
}

/// FNV-1a over a byte stream; used to fingerprint exported corpora.
pub fn fnv1a_file(path: &Path) -> Result<u64> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = [0u8; 8192];
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Ok(h)
}

/// Order-stable fingerprint of a whole directory tree (names + contents).
pub fn fingerprint_dir(dir: &Path) -> Result<u64> {
    let mut entries = Vec::new();
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut children: Vec<_> =
            std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
        children.sort_by_key(|e| e.file_name());
        for child in children {
            let path = child.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("child of root").to_path_buf());
            }
        }
        Ok(())
    }
    walk(dir, dir, &mut entries)?;
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut mix = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for rel in entries {
        mix(rel.to_string_lossy().as_bytes());
        mix(&fnv1a_file(&dir.join(&rel))?.to_le_bytes());
    }
    Ok(h)
}
