//! Deterministic toy encoders.
//!
//! The image side flattens each grid patch and applies an affine map
//! followed by tanh; the text side averages token embeddings through the
//! same nonlinearity (a bag-of-tokens model). Both L2-normalize their
//! output rows. These are intentionally weak stand-ins: the losses, not
//! the representation power, are what the test suites probe.
//!
//! Parameter checkpoints are flat binary files: magic `EGMA1`, then
//! little-endian u32 dims (d, vocab, patch_pixels, grid rows, grid cols),
//! then little-endian f64s (image projection weights row-major, image
//! bias, token table row-major, log temperature).

use std::collections::HashMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{EgmaError, Result};
use crate::heatmap::{parse_pgm, pgm_bytes, PatchGrid};
use crate::numeric::{norm, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EGMA1";

/// 224×224 grayscale image with pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pixels: Vec<f64>,
}

impl ToyImage {
    pub const SIDE: usize = 224;

    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != Self::SIDE * Self::SIDE {
            return Err(EgmaError::ShapeMismatch {
                what: "image pixels",
                expected: (Self::SIDE, Self::SIDE),
                got: (pixels.len(), 1),
            });
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(EgmaError::NonFiniteFunction {
                at: "image pixel outside [0,1]".to_string(),
            });
        }
        Ok(Self { pixels })
    }

    pub fn zeros() -> Self {
        Self {
            pixels: vec![0.0; Self::SIDE * Self::SIDE],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * Self::SIDE + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * Self::SIDE + col] = v.clamp(0.0, 1.0);
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let gray: Vec<u8> = self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        pgm_bytes(Self::SIDE, Self::SIDE, &gray)
    }

    pub fn from_pgm(bytes: &[u8], source: &str) -> Result<Self> {
        let (w, h, gray) = parse_pgm(bytes, source)?;
        if w != Self::SIDE || h != Self::SIDE {
            return Err(EgmaError::ShapeMismatch {
                what: "image dimensions",
                expected: (Self::SIDE, Self::SIDE),
                got: (h, w),
            });
        }
        Ok(Self {
            pixels: gray.iter().map(|&g| g as f64 / 255.0).collect(),
        })
    }
}

/// Whitespace + lowercase tokenizer over a fixed vocabulary. Trailing
/// sentence terminators are stripped before lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn serialize(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokenize(&self, sentence: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for raw in sentence.split_whitespace() {
            let word = raw.trim_end_matches(['.', '?', '!']).to_lowercase();
            if word.is_empty() {
                continue;
            }
            match self.index.get(&word) {
                Some(&id) => ids.push(id),
                None => return Err(EgmaError::UnknownToken { token: word }),
            }
        }
        if ids.is_empty() {
            return Err(EgmaError::EmptySentence {
                text: sentence.to_string(),
            });
        }
        Ok(ids)
    }
}

/// All learnable encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Patch projection, d × patch_pixels.
    pub w_img: Matrix,
    /// Patch projection bias, length d.
    pub b_img: Vec<f64>,
    /// Token embedding table, vocab × d.
    pub token_emb: Matrix,
    pub grid: PatchGrid,
}

impl EncoderParams {
    pub const DEFAULT_DIM: usize = 16;

    /// Seeded uniform init, fan-in scaled: the patch projection draws from
    /// [-1/sqrt(patch_pixels), 1/sqrt(patch_pixels)] so its pre-activation
    /// stays in tanh's linear range (a 1/sqrt(d) bound saturates tanh at
    /// realistic patch sizes and kills the image gradient), the token
    /// table from [-1/sqrt(d), 1/sqrt(d)].
    pub fn init(dim: usize, vocab_size: usize, grid: PatchGrid, seed: u64) -> Self {
        assert!(dim > 0 && vocab_size > 0);
        assert!(
            grid.divides(ToyImage::SIDE, ToyImage::SIDE),
            "grid must divide the image"
        );
        let patch_pixels = (ToyImage::SIDE / grid.rows) * (ToyImage::SIDE / grid.cols);
        let mut rng = StdRng::seed_from_u64(seed);
        let mut draw = |count: usize, bound: f64| -> Vec<f64> {
            (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let img_bound = 1.0 / (patch_pixels as f64).sqrt();
        let w_img = Matrix::from_vec(dim, patch_pixels, draw(dim * patch_pixels, img_bound)).unwrap();
        let b_img = draw(dim, img_bound);
        let emb_bound = 1.0 / (dim as f64).sqrt();
        let token_emb = Matrix::from_vec(vocab_size, dim, draw(vocab_size * dim, emb_bound)).unwrap();
        Self {
            w_img,
            b_img,
            token_emb,
            grid,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_img.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_emb.rows()
    }

    pub fn patch_pixels(&self) -> usize {
        self.w_img.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_img.data().len() + self.b_img.len() + self.token_emb.data().len()
    }
}

/// Gradients for every learnable parameter, including the log temperature.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w_img: Matrix,
    pub b_img: Vec<f64>,
    pub token_emb: Matrix,
    pub log_tau: f64,
}

impl ParamGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            w_img: Matrix::zeros(p.w_img.rows(), p.w_img.cols()),
            b_img: vec![0.0; p.b_img.len()],
            token_emb: Matrix::zeros(p.token_emb.rows(), p.token_emb.cols()),
            log_tau: 0.0,
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        self.w_img.add_scaled(&other.w_img, 1.0);
        for (a, b) in self.b_img.iter_mut().zip(&other.b_img) {
            *a += b;
        }
        self.token_emb.add_scaled(&other.token_emb, 1.0);
        self.log_tau += other.log_tau;
    }

    pub fn is_finite(&self) -> bool {
        self.w_img.is_finite()
            && self.b_img.iter().all(|v| v.is_finite())
            && self.token_emb.is_finite()
            && self.log_tau.is_finite()
    }
}

/// Forward cache of `encode_image`: flattened patch pixels, pre-norm tanh
/// activations, and their norms.
pub struct ImageCache {
    pub patch_pixels: Vec<Vec<f64>>,
    pub v: Matrix,
    pub norms: Vec<f64>,
}

/// Forward cache of `encode_sentences`.
pub struct SentenceCache {
    pub token_ids: Vec<Vec<usize>>,
    pub v: Matrix,
    pub norms: Vec<f64>,
}

/// Flatten the pixels of grid patch `idx` (row-major patches, row-major
/// pixels within a patch).
fn flatten_patch(img: &ToyImage, grid: &PatchGrid, idx: usize) -> Vec<f64> {
    let ph = ToyImage::SIDE / grid.rows;
    let pw = ToyImage::SIDE / grid.cols;
    let (pr, pc) = (idx / grid.cols, idx % grid.cols);
    let mut out = Vec::with_capacity(ph * pw);
    for r in pr * ph..(pr + 1) * ph {
        for c in pc * pw..(pc + 1) * pw {
            out.push(img.get(r, c));
        }
    }
    out
}

/// Encode an image into n unit-norm patch features.
pub fn encode_image(img: &ToyImage, grid: &PatchGrid, params: &EncoderParams) -> Result<Matrix> {
    Ok(encode_image_cached(img, grid, params)?.0)
}

pub fn encode_image_cached(
    img: &ToyImage,
    grid: &PatchGrid,
    params: &EncoderParams,
) -> Result<(Matrix, ImageCache)> {
    if !grid.divides(ToyImage::SIDE, ToyImage::SIDE) {
        return Err(EgmaError::DimensionMismatch {
            what: "image encoding",
            dims: (ToyImage::SIDE, ToyImage::SIDE),
            grid: (grid.rows, grid.cols),
        });
    }
    let pp = (ToyImage::SIDE / grid.rows) * (ToyImage::SIDE / grid.cols);
    if params.w_img.cols() != pp {
        return Err(EgmaError::ShapeMismatch {
            what: "patch projection",
            expected: (params.dim(), pp),
            got: (params.w_img.rows(), params.w_img.cols()),
        });
    }
    let n = grid.n();
    let d = params.dim();
    let mut features = Matrix::zeros(n, d);
    let mut v_mat = Matrix::zeros(n, d);
    let mut norms = Vec::with_capacity(n);
    let mut patch_pixels = Vec::with_capacity(n);
    for i in 0..n {
        let x = flatten_patch(img, grid, i);
        for j in 0..d {
            let u = crate::numeric::dot(params.w_img.row(j), &x) + params.b_img[j];
            v_mat.set(i, j, u.tanh());
        }
        let r = norm(v_mat.row(i));
        norms.push(r);
        for j in 0..d {
            features.set(i, j, v_mat.get(i, j) / r);
        }
        patch_pixels.push(x);
    }
    Ok((
        features,
        ImageCache {
            patch_pixels,
            v: v_mat,
            norms,
        },
    ))
}

/// Accumulate encoder-parameter gradients from a patch-feature gradient.
pub fn backprop_image(cache: &ImageCache, d_features: &Matrix, grads: &mut ParamGrads) {
    let n = cache.v.rows();
    let d = cache.v.cols();
    for i in 0..n {
        let r = cache.norms[i];
        let v = cache.v.row(i);
        let dp = d_features.row(i);
        // p = v / r; dv = (dp - p (p . dp)) / r
        let p_dot_dp: f64 = v.iter().zip(dp).map(|(vj, g)| (vj / r) * g).sum();
        for j in 0..d {
            let p_j = v[j] / r;
            let dv = (dp[j] - p_j * p_dot_dp) / r;
            let du = dv * (1.0 - v[j] * v[j]);
            if du == 0.0 {
                continue;
            }
            grads.b_img[j] += du;
            let w_row = grads.w_img.row_mut(j);
            for (w, x) in w_row.iter_mut().zip(&cache.patch_pixels[i]) {
                *w += du * x;
            }
        }
    }
}

/// Encode tokenized sentences into m unit-norm features: mean of token
/// embeddings, tanh, L2-normalize. Token order within a sentence does not
/// matter.
pub fn encode_sentences(sentences: &[Vec<usize>], params: &EncoderParams) -> Result<Matrix> {
    Ok(encode_sentences_cached(sentences, params)?.0)
}

pub fn encode_sentences_cached(
    sentences: &[Vec<usize>],
    params: &EncoderParams,
) -> Result<(Matrix, SentenceCache)> {
    assert!(!sentences.is_empty(), "need at least one sentence");
    let d = params.dim();
    let m = sentences.len();
    let mut features = Matrix::zeros(m, d);
    let mut v_mat = Matrix::zeros(m, d);
    let mut norms = Vec::with_capacity(m);
    for (s, ids) in sentences.iter().enumerate() {
        if ids.is_empty() {
            return Err(EgmaError::EmptySentence {
                text: format!("sentence {s}"),
            });
        }
        let mut mean = vec![0.0; d];
        for &id in ids {
            if id >= params.vocab_size() {
                return Err(EgmaError::UnknownToken {
                    token: format!("#{id}"),
                });
            }
            for (acc, e) in mean.iter_mut().zip(params.token_emb.row(id)) {
                *acc += e;
            }
        }
        let inv_t = 1.0 / ids.len() as f64;
        for j in 0..d {
            v_mat.set(s, j, (mean[j] * inv_t).tanh());
        }
        let r = norm(v_mat.row(s));
        norms.push(r);
        for j in 0..d {
            features.set(s, j, v_mat.get(s, j) / r);
        }
    }
    Ok((
        features,
        SentenceCache {
            token_ids: sentences.to_vec(),
            v: v_mat,
            norms,
        },
    ))
}

/// Accumulate embedding-table gradients from a sentence-feature gradient.
pub fn backprop_sentences(cache: &SentenceCache, d_features: &Matrix, grads: &mut ParamGrads) {
    let m = cache.v.rows();
    let d = cache.v.cols();
    for s in 0..m {
        let r = cache.norms[s];
        let v = cache.v.row(s);
        let dp = d_features.row(s);
        let p_dot_dp: f64 = v.iter().zip(dp).map(|(vj, g)| (vj / r) * g).sum();
        let inv_t = 1.0 / cache.token_ids[s].len() as f64;
        for j in 0..d {
            let p_j = v[j] / r;
            let dv = (dp[j] - p_j * p_dot_dp) / r;
            let de = dv * (1.0 - v[j] * v[j]) * inv_t;
            if de == 0.0 {
                continue;
            }
            for &id in &cache.token_ids[s] {
                let row = grads.token_emb.row_mut(id);
                row[j] += de;
            }
        }
    }
}

// ---- checkpoint format -----------------------------------------------------

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize parameters plus the log temperature.
pub fn checkpoint_bytes(params: &EncoderParams, log_tau: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 20 + 8 * (params.param_count() + 1));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, params.dim() as u32);
    push_u32(&mut out, params.vocab_size() as u32);
    push_u32(&mut out, params.patch_pixels() as u32);
    push_u32(&mut out, params.grid.rows as u32);
    push_u32(&mut out, params.grid.cols as u32);
    push_f64s(&mut out, params.w_img.data());
    push_f64s(&mut out, &params.b_img);
    push_f64s(&mut out, params.token_emb.data());
    push_f64s(&mut out, &[log_tau]);
    out
}

pub fn write_checkpoint(path: &Path, params: &EncoderParams, log_tau: f64) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, log_tau))
        .map_err(|e| EgmaError::io(path.display().to_string(), e))
}

pub fn checkpoint_from_bytes(bytes: &[u8], source: &str) -> Result<(EncoderParams, f64)> {
    let bad = |reason: &str| EgmaError::MalformedRow {
        source: source.to_string(),
        line: 0,
        reason: reason.to_string(),
    };
    if bytes.len() < 25 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("missing EGMA1 magic"));
    }
    let u32_at = |pos: usize| u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    let (d, vocab, pp, rows, cols) = (u32_at(5), u32_at(9), u32_at(13), u32_at(17), u32_at(21));
    if d == 0 || vocab == 0 || rows == 0 || cols == 0 {
        return Err(bad("zero dimension in header"));
    }
    let float_count = d * pp + d + vocab * d + 1;
    if bytes.len() != 25 + 8 * float_count {
        return Err(bad("payload size mismatch"));
    }
    let mut floats = Vec::with_capacity(float_count);
    for i in 0..float_count {
        let pos = 25 + 8 * i;
        floats.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
    }
    let mut pos = 0;
    let mut take = |count: usize| {
        let out = floats[pos..pos + count].to_vec();
        pos += count;
        out
    };
    let w_img = Matrix::from_vec(d, pp, take(d * pp)).map_err(|_| bad("non-finite weights"))?;
    let b_img = take(d);
    let token_emb =
        Matrix::from_vec(vocab, d, take(vocab * d)).map_err(|_| bad("non-finite table"))?;
    let log_tau = take(1)[0];
    Ok((
        EncoderParams {
            w_img,
            b_img,
            token_emb,
            grid: PatchGrid { rows, cols },
        },
        log_tau,
    ))
}

pub fn read_checkpoint(path: &Path) -> Result<(EncoderParams, f64)> {
    let bytes = std::fs::read(path).map_err(|e| EgmaError::io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}
