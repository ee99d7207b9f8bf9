//! Attention heatmaps from fixation sets, and their reduction onto the
//! patch grid as the gaze similarity matrix GS (per-sentence gaze mass per
//! patch, max-normalized per row) and the gaze label matrix GL (its
//! binarized support: 1 wherever a sentence's gaze touched a patch).
//!
//! A fixation contributes a duration-weighted isotropic Gaussian centered
//! at (x*width, y*height) with sigma = sigma_frac * min(width, height),
//! truncated at 3 sigma.

use crate::error::{EgmaError, Result};
use crate::numeric::Matrix;
use crate::session::FixationEvent;

pub const DEFAULT_SIGMA_FRAC: f64 = 0.05;

/// Non-negative attention map. All-zero maps are valid: they are the
/// gaze-free sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Regular grid dividing an image (and its heatmaps) into n = rows*cols
/// patches, ordered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        Self { rows, cols }
    }

    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn divides(&self, width: usize, height: usize) -> bool {
        height % self.rows == 0 && width % self.cols == 0
    }
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self { rows: 7, cols: 7 }
    }
}

impl std::fmt::Display for PatchGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl std::str::FromStr for PatchGrid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid must look like 7x7, got {s:?}"))?;
        let rows: usize = r.trim().parse().map_err(|_| format!("bad grid rows {r:?}"))?;
        let cols: usize = c.trim().parse().map_err(|_| format!("bad grid cols {c:?}"))?;
        if rows == 0 || cols == 0 {
            return Err("grid dimensions must be positive".to_string());
        }
        Ok(Self { rows, cols })
    }
}

/// Per-instance gaze supervision: GS is m×n non-negative with rows
/// max-normalized to [0, 1]; GL is its binary support.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeMatrices {
    pub gs: Matrix,
    pub gl: Matrix,
}

impl GazeMatrices {
    pub fn sentences(&self) -> usize {
        self.gs.rows()
    }

    pub fn patches(&self) -> usize {
        self.gs.cols()
    }
}

/// Render a fixation set into a heatmap. An empty set yields the all-zero
/// map (the missing-gaze case).
pub fn render_heatmap(
    fixations: &[FixationEvent],
    out_dims: (usize, usize),
    sigma_frac: f64,
) -> Heatmap {
    let (width, height) = out_dims;
    assert!(width > 0 && height > 0, "heatmap dimensions must be positive");
    assert!(sigma_frac > 0.0, "sigma_frac must be positive");
    let sigma = sigma_frac * width.min(height) as f64;
    let radius = 3.0 * sigma;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut map = Heatmap::zeros(width, height);
    for f in fixations {
        let cx = f.x * width as f64;
        let cy = f.y * height as f64;
        let weight = f.dur_ms as f64;
        let col_lo = ((cx - radius).ceil().max(0.0)) as usize;
        let col_hi = ((cx + radius).floor().min((width - 1) as f64)) as usize;
        let row_lo = ((cy - radius).ceil().max(0.0)) as usize;
        let row_hi = ((cy + radius).floor().min((height - 1) as f64)) as usize;
        for row in row_lo..=row_hi {
            let dy = row as f64 - cy;
            for col in col_lo..=col_hi {
                let dx = col as f64 - cx;
                let d_sq = dx * dx + dy * dy;
                if d_sq <= radius * radius {
                    map.values[row * width + col] += weight * (-d_sq * inv_two_sigma_sq).exp();
                }
            }
        }
    }
    map
}

/// Sum heatmap values per grid patch, row-major patch order.
pub fn bin_to_patches(h: &Heatmap, grid: &PatchGrid) -> Result<Vec<f64>> {
    if !grid.divides(h.width, h.height) {
        return Err(EgmaError::DimensionMismatch {
            what: "heatmap binning",
            dims: (h.height, h.width),
            grid: (grid.rows, grid.cols),
        });
    }
    let ph = h.height / grid.rows;
    let pw = h.width / grid.cols;
    let mut out = vec![0.0; grid.n()];
    for (idx, v) in h.values.iter().enumerate() {
        let row = idx / h.width;
        let col = idx % h.width;
        out[(row / ph) * grid.cols + col / pw] += v;
    }
    Ok(out)
}

/// Stack per-sentence heatmaps into GS/GL. GL marks the raw support
/// (gaze mass > 0); GS rows are then max-normalized to [0, 1] so they sit
/// on the same scale as the binarized similarity matrices they are later
/// added to. Gaze-free sentences keep all-zero rows in both.
pub fn build_gaze_matrices(sentence_heatmaps: &[Heatmap], grid: &PatchGrid) -> Result<GazeMatrices> {
    assert!(!sentence_heatmaps.is_empty(), "need at least one sentence heatmap");
    let (w, h) = (sentence_heatmaps[0].width, sentence_heatmaps[0].height);
    for hm in sentence_heatmaps {
        if hm.width != w || hm.height != h {
            return Err(EgmaError::ShapeMismatch {
                what: "sentence heatmaps",
                expected: (h, w),
                got: (hm.height, hm.width),
            });
        }
    }
    let m = sentence_heatmaps.len();
    let n = grid.n();
    let mut gs = Matrix::zeros(m, n);
    let mut gl = Matrix::zeros(m, n);
    for (j, hm) in sentence_heatmaps.iter().enumerate() {
        let raw = bin_to_patches(hm, grid)?;
        let max = raw.iter().cloned().fold(0.0f64, f64::max);
        for (i, &v) in raw.iter().enumerate() {
            if v > 0.0 {
                gl.set(j, i, 1.0);
                gs.set(j, i, v / max);
            }
        }
    }
    Ok(GazeMatrices { gs, gl })
}

// ---- PGM export / import -------------------------------------------------

/// Binary PGM (P5, maxval 255) with values linearly scaled from [0, max].
pub fn heatmap_to_pgm(h: &Heatmap) -> Vec<u8> {
    let max = h.values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let bytes: Vec<u8> = h.values.iter().map(|&v| (v * scale).round() as u8).collect();
    pgm_bytes(h.width, h.height, &bytes)
}

pub fn pgm_bytes(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Parse a binary PGM (P5, maxval 255) produced by `pgm_bytes`.
pub fn parse_pgm(bytes: &[u8], source: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| EgmaError::MalformedRow {
        source: source.to_string(),
        line: 1,
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    // magic, width, height, maxval separated by single whitespace bytes
    for _ in 0..4 {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        pos += 1; // single whitespace separator
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = &bytes[pos..];
    if data.len() != width * height {
        return Err(bad("pixel payload size mismatch"));
    }
    Ok((width, height, data.to_vec()))
}

/// CSV export of GS/GL with header `sentence_idx,patch_idx,gs,gl`.
pub fn gaze_matrices_csv(gm: &GazeMatrices) -> String {
    let mut out = String::from("sentence_idx,patch_idx,gs,gl\n");
    for j in 0..gm.sentences() {
        for i in 0..gm.patches() {
            out.push_str(&format!("{},{},{},{}\n", j, i, gm.gs.get(j, i), gm.gl.get(j, i)));
        }
    }
    out
}
