//! Fine-grained contrastive alignment.
//!
//! Instance-level CLIP losses over a b×b similarity matrix, per-instance
//! sentence↔patch similarities, the gaze-guided multi-label cross-entropy
//! (MLCE) against the GL support matrix, and the combined fine-grained
//! alignment loss
//!
//! ```text
//! L_EGF = (1/2b) sum_k (fL_k^S2P + fL_k^P2S)
//!       + (1/2)  sum_k (L_hat_k^T2I + L_hat_k^I2T)
//! ```
//!
//! where the L_hat terms are CLIP losses over the cross-instance mean-max
//! similarity matrices. Samples without gaze contribute nothing to the fL
//! sum; mixed batches are the normal case, not an error.
//!
//! Every loss here returns its analytic gradient; the gradcheck module
//! holds these to the central-difference oracle.

use crate::error::{EgmaError, Result};
use crate::heatmap::GazeMatrices;
use crate::numeric::{
    cosine_backward_left, cosine_backward_right, cosine_matrix, cosine_matrix_backward,
    log_softmax, norm, softmax, Matrix,
};

/// Per-instance encoder outputs: patch features (n×d) and sentence
/// features (m×d). Encoders emit unit rows; the losses do not rely on
/// that (they take true cosines), so perturbed inputs stay well-defined.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub patches: Matrix,
    pub sentences: Matrix,
}

impl EmbeddingBundle {
    pub fn new(patches: Matrix, sentences: Matrix) -> Result<Self> {
        if patches.cols() != sentences.cols() {
            return Err(EgmaError::ShapeMismatch {
                what: "bundle feature dimension",
                expected: (patches.rows(), patches.cols()),
                got: (sentences.rows(), sentences.cols()),
            });
        }
        Ok(Self { patches, sentences })
    }

    pub fn n_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.rows()
    }

    pub fn dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn rows_unit_norm(&self, tol: f64) -> bool {
        let unit = |m: &Matrix| (0..m.rows()).all(|i| (norm(m.row(i)) - 1.0).abs() <= tol);
        unit(&self.patches) && unit(&self.sentences)
    }
}

/// Sentence-to-patch (m×n) and patch-to-sentence (n×m) cosine matrices of
/// one instance; the two are exact transposes.
#[derive(Debug, Clone, PartialEq)]
pub struct FineSimPair {
    pub x_s2p: Matrix,
    pub x_p2s: Matrix,
}

/// Shared contrastive temperature, stored in log-space so positivity is
/// structural.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub log_tau: f64,
}

impl ContrastiveConfig {
    pub const DEFAULT_TAU: f64 = 0.07;

    pub fn with_tau(tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(EgmaError::NonPositiveTemperature { tau });
        }
        Ok(Self { log_tau: tau.ln() })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self::with_tau(Self::DEFAULT_TAU).unwrap()
    }
}

/// Gradient of a loss with respect to one bundle.
#[derive(Debug, Clone)]
pub struct BundleGrad {
    pub patches: Matrix,
    pub sentences: Matrix,
}

impl BundleGrad {
    pub fn zeros_like(e: &EmbeddingBundle) -> Self {
        Self {
            patches: Matrix::zeros(e.patches.rows(), e.patches.cols()),
            sentences: Matrix::zeros(e.sentences.rows(), e.sentences.cols()),
        }
    }

    pub fn add_scaled(&mut self, other: &BundleGrad, scale: f64) {
        self.patches.add_scaled(&other.patches, scale);
        self.sentences.add_scaled(&other.sentences, scale);
    }

    pub fn is_finite(&self) -> bool {
        self.patches.is_finite() && self.sentences.is_finite()
    }
}

/// Softmax cross-entropy of one logit row against a target distribution.
/// Returns (loss, d_loss/d_logits, d_loss/d_log_tau).
pub(crate) fn ce_row(logits: &[f64], target: &[f64], tau: f64) -> Result<(f64, Vec<f64>, f64)> {
    debug_assert_eq!(logits.len(), target.len());
    let ls = log_softmax(logits, tau)?;
    let p = softmax(logits, tau)?;
    let loss = -target.iter().zip(&ls).map(|(t, l)| t * l).sum::<f64>();
    let d_logits: Vec<f64> = p.iter().zip(target).map(|(pc, tc)| (pc - tc) / tau).collect();
    // d/d log tau = (1/tau) * (t.v - p.v)
    let d_log_tau = logits
        .iter()
        .zip(target.iter().zip(&p))
        .map(|(v, (t, pc))| (t - pc) * v)
        .sum::<f64>()
        / tau;
    Ok((loss, d_logits, d_log_tau))
}

/// Instance-level similarity matrices of a batch: s_i2t[k,l] =
/// cos(z_I_k, z_T_l), and s_t2i its exact transpose.
pub fn instance_similarities(z_images: &Matrix, z_texts: &Matrix) -> Result<(Matrix, Matrix)> {
    if z_images.rows() != z_texts.rows() {
        return Err(EgmaError::ShapeMismatch {
            what: "instance similarity batch",
            expected: (z_images.rows(), z_images.cols()),
            got: (z_texts.rows(), z_texts.cols()),
        });
    }
    let s_i2t = cosine_matrix(z_images, z_texts)?;
    let s_t2i = s_i2t.transpose();
    Ok((s_i2t, s_t2i))
}

/// Per-sample CLIP losses over a b×b similarity matrix: row k contributes
/// -(1/b) log softmax(row_k / tau)[k], the interior 1/b included.
pub fn clip_loss(sim: &Matrix, tau: f64) -> Result<Vec<f64>> {
    Ok(clip_loss_grad(sim, tau)?.losses)
}

#[derive(Debug, Clone)]
pub struct ClipGrad {
    pub losses: Vec<f64>,
    /// Gradient of the *sum* of per-sample losses w.r.t. the matrix.
    pub d_sim: Matrix,
    pub d_log_tau: f64,
}

pub fn clip_loss_grad(sim: &Matrix, tau: f64) -> Result<ClipGrad> {
    if sim.rows() != sim.cols() {
        return Err(EgmaError::ShapeMismatch {
            what: "clip similarity matrix",
            expected: (sim.rows(), sim.rows()),
            got: (sim.rows(), sim.cols()),
        });
    }
    let b = sim.rows();
    let scale = 1.0 / b as f64;
    let mut losses = Vec::with_capacity(b);
    let mut d_sim = Matrix::zeros(b, b);
    let mut d_log_tau = 0.0;
    let mut target = vec![0.0; b];
    for k in 0..b {
        target[k] = 1.0;
        let (loss, d_row, d_lt) = ce_row(sim.row(k), &target, tau)?;
        target[k] = 0.0;
        losses.push(scale * loss);
        for (j, g) in d_row.iter().enumerate() {
            d_sim.set(k, j, scale * g);
        }
        d_log_tau += scale * d_lt;
    }
    Ok(ClipGrad {
        losses,
        d_sim,
        d_log_tau,
    })
}

/// Sentence↔patch cosine matrices of one instance.
pub fn fine_similarities(e: &EmbeddingBundle) -> Result<FineSimPair> {
    let x_s2p = cosine_matrix(&e.sentences, &e.patches)?;
    let x_p2s = x_s2p.transpose();
    Ok(FineSimPair { x_s2p, x_p2s })
}

/// Multi-label cross-entropy: each row with at least one positive label is
/// scored against its normalized multi-hot target; all-zero rows are
/// skipped (missing gaze supplies no supervision, not a uniform target);
/// the result is the mean over contributing rows.
pub fn mlce_loss(logits: &Matrix, labels: &Matrix, tau: f64) -> Result<f64> {
    Ok(mlce_loss_grad(logits, labels, tau)?.0)
}

pub fn mlce_loss_grad(logits: &Matrix, labels: &Matrix, tau: f64) -> Result<(f64, Matrix, f64)> {
    if logits.rows() != labels.rows() || logits.cols() != labels.cols() {
        return Err(EgmaError::ShapeMismatch {
            what: "mlce logits vs labels",
            expected: (logits.rows(), logits.cols()),
            got: (labels.rows(), labels.cols()),
        });
    }
    let mut row_results = Vec::new();
    for r in 0..logits.rows() {
        let lab = labels.row(r);
        let total: f64 = lab.iter().sum();
        if total == 0.0 {
            continue;
        }
        let target: Vec<f64> = lab.iter().map(|v| v / total).collect();
        row_results.push((r, ce_row(logits.row(r), &target, tau)?));
    }
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    if row_results.is_empty() {
        return Ok((0.0, d_logits, 0.0));
    }
    let inv_r = 1.0 / row_results.len() as f64;
    let mut value = 0.0;
    let mut d_log_tau = 0.0;
    for (r, (loss, d_row, d_lt)) in row_results {
        value += inv_r * loss;
        d_log_tau += inv_r * d_lt;
        for (c, g) in d_row.iter().enumerate() {
            d_logits.set(r, c, inv_r * g);
        }
    }
    Ok((value, d_logits, d_log_tau))
}

/// Cross-instance mean-max similarity of two instances:
///
/// ```text
/// s_hat_i2t(k,l) = mean_i max_j cos(P_k_i, S_l_j)
/// s_hat_t2i(k,l) = mean_j max_i cos(S_k_j, P_l_i)
/// ```
pub fn fine_instance_similarity(e_k: &EmbeddingBundle, e_l: &EmbeddingBundle) -> Result<(f64, f64)> {
    let c_kl = cosine_matrix(&e_k.patches, &e_l.sentences)?;
    let i2t = mean_of_row_maxes(&c_kl).0;
    let c_lk = cosine_matrix(&e_l.patches, &e_k.sentences)?;
    let t2i = mean_of_col_maxes(&c_lk).0;
    Ok((i2t, t2i))
}

/// Directional mean-max similarity between two token sets: mean over rows
/// of `query` of the max cosine against rows of `target`. With patch rows
/// as the query this is the i2t score; with sentence rows, t2i.
pub fn mean_max_similarity(query: &Matrix, target: &Matrix) -> Result<f64> {
    Ok(mean_of_row_maxes(&cosine_matrix(query, target)?).0)
}

/// Mean over rows of the row max; also returns the argmax column per row.
fn mean_of_row_maxes(c: &Matrix) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(c.rows());
    for i in 0..c.rows() {
        let row = c.row(i);
        let (mut best, mut best_j) = (row[0], 0);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_j = j;
            }
        }
        total += best;
        argmax.push(best_j);
    }
    (total / c.rows() as f64, argmax)
}

/// Mean over columns of the column max; also returns the argmax row per column.
fn mean_of_col_maxes(c: &Matrix) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(c.cols());
    for j in 0..c.cols() {
        let (mut best, mut best_i) = (c.get(0, j), 0);
        for i in 1..c.rows() {
            let v = c.get(i, j);
            if v > best {
                best = v;
                best_i = i;
            }
        }
        total += best;
        argmax.push(best_i);
    }
    (total / c.cols() as f64, argmax)
}

/// Everything `egf_loss` reports: batch-aggregated components (each
/// already carrying its loss-formula prefactor, so `value` is their exact
/// sum), per-bundle gradients, and the shared temperature gradient.
#[derive(Debug, Clone)]
pub struct EgfOutput {
    pub fl_s2p: f64,
    pub fl_p2s: f64,
    pub fg_i2t: f64,
    pub fg_t2i: f64,
    pub value: f64,
    pub grads: Vec<BundleGrad>,
    pub d_log_tau: f64,
}

/// Fine-grained alignment loss of a (possibly mixed) batch.
pub fn egf_loss(
    batch: &[EmbeddingBundle],
    gaze: &[Option<&GazeMatrices>],
    cfg: &ContrastiveConfig,
) -> Result<EgfOutput> {
    assert_eq!(batch.len(), gaze.len(), "batch and gaze lists must align");
    assert!(!batch.is_empty(), "batch must be non-empty");
    let b = batch.len();
    let tau = cfg.tau();
    let mut grads: Vec<BundleGrad> = batch.iter().map(BundleGrad::zeros_like).collect();
    let mut d_log_tau = 0.0;

    // MLCE over within-instance similarities, skipped where gaze is absent.
    let half_b = 1.0 / (2.0 * b as f64);
    let mut fl_s2p = 0.0;
    let mut fl_p2s = 0.0;
    for (k, e) in batch.iter().enumerate() {
        let Some(gm) = gaze[k] else { continue };
        if gm.gl.rows() != e.n_sentences() || gm.gl.cols() != e.n_patches() {
            return Err(EgmaError::ShapeMismatch {
                what: "gaze matrices vs bundle",
                expected: (e.n_sentences(), e.n_patches()),
                got: (gm.gl.rows(), gm.gl.cols()),
            });
        }
        let fine = fine_similarities(e)?;
        let (v_s2p, d_s2p, dlt_s2p) = mlce_loss_grad(&fine.x_s2p, &gm.gl, tau)?;
        let gl_t = gm.gl.transpose();
        let (v_p2s, d_p2s, dlt_p2s) = mlce_loss_grad(&fine.x_p2s, &gl_t, tau)?;
        fl_s2p += half_b * v_s2p;
        fl_p2s += half_b * v_p2s;
        d_log_tau += half_b * (dlt_s2p + dlt_p2s);

        // x_s2p = cos(S, P) and x_p2s = cos(P, S); fold both mlce grads
        // (scaled by the 1/2b prefactor) back through the cosines.
        let scale_into = |m: &Matrix| {
            let mut out = m.clone();
            for v in out.data_mut() {
                *v *= half_b;
            }
            out
        };
        let g = &mut grads[k];
        cosine_matrix_backward(
            &e.sentences,
            &e.patches,
            &fine.x_s2p,
            &scale_into(&d_s2p),
            &mut g.sentences,
            &mut g.patches,
        );
        cosine_matrix_backward(
            &e.patches,
            &e.sentences,
            &fine.x_p2s,
            &scale_into(&d_p2s),
            &mut g.patches,
            &mut g.sentences,
        );
    }

    // Cross-instance mean-max similarity matrices. c_mats[a][t] =
    // cos(P_a, S_t) serves both directions: i2t(k,l) reads c_mats[k][l]
    // row-wise, t2i(k,l) reads c_mats[l][k] column-wise.
    let mut c_mats: Vec<Vec<Matrix>> = Vec::with_capacity(b);
    for e_a in batch {
        let mut row = Vec::with_capacity(b);
        for e_t in batch {
            row.push(cosine_matrix(&e_a.patches, &e_t.sentences)?);
        }
        c_mats.push(row);
    }
    let mut f_i2t = Matrix::zeros(b, b);
    let mut f_t2i = Matrix::zeros(b, b);
    let mut arg_i2t: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(b); b];
    let mut arg_t2i: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(b); b];
    for k in 0..b {
        for l in 0..b {
            let (v, am) = mean_of_row_maxes(&c_mats[k][l]);
            f_i2t.set(k, l, v);
            arg_i2t[k].push(am);
            let (v, am) = mean_of_col_maxes(&c_mats[l][k]);
            f_t2i.set(k, l, v);
            arg_t2i[k].push(am);
        }
    }

    let clip_i2t = clip_loss_grad(&f_i2t, tau)?;
    let clip_t2i = clip_loss_grad(&f_t2i, tau)?;
    let fg_i2t = 0.5 * clip_i2t.losses.iter().sum::<f64>();
    let fg_t2i = 0.5 * clip_t2i.losses.iter().sum::<f64>();
    d_log_tau += 0.5 * (clip_i2t.d_log_tau + clip_t2i.d_log_tau);

    // Scatter dF onto the per-pair cosine matrices through the mean-max
    // bookkeeping, then run one cosine backward per (image a, text t) pair.
    let mut g_mats: Vec<Vec<Matrix>> = c_mats
        .iter()
        .map(|row| row.iter().map(|c| Matrix::zeros(c.rows(), c.cols())).collect())
        .collect();
    for k in 0..b {
        for l in 0..b {
            let w = 0.5 * clip_i2t.d_sim.get(k, l);
            if w != 0.0 {
                let n_k = batch[k].n_patches() as f64;
                for (i, &j_star) in arg_i2t[k][l].iter().enumerate() {
                    let cur = g_mats[k][l].get(i, j_star);
                    g_mats[k][l].set(i, j_star, cur + w / n_k);
                }
            }
            let w = 0.5 * clip_t2i.d_sim.get(k, l);
            if w != 0.0 {
                let m_k = batch[k].n_sentences() as f64;
                for (j, &i_star) in arg_t2i[k][l].iter().enumerate() {
                    let cur = g_mats[l][k].get(i_star, j);
                    g_mats[l][k].set(i_star, j, cur + w / m_k);
                }
            }
        }
    }
    for a in 0..b {
        for t in 0..b {
            cosine_backward_left(
                &batch[a].patches,
                &batch[t].sentences,
                &c_mats[a][t],
                &g_mats[a][t],
                &mut grads[a].patches,
            );
            cosine_backward_right(
                &batch[a].patches,
                &batch[t].sentences,
                &c_mats[a][t],
                &g_mats[a][t],
                &mut grads[t].sentences,
            );
        }
    }

    let value = fl_s2p + fl_p2s + fg_i2t + fg_t2i;
    Ok(EgfOutput {
        fl_s2p,
        fl_p2s,
        fg_i2t,
        fg_t2i,
        value,
        grads,
        d_log_tau,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::rngs::StdRng;
    use rand::Rng;

    pub fn unit_rows(rng: &mut StdRng, rows: usize, d: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, d);
        for i in 0..rows {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = norm(&v);
                if n > 1e-3 {
                    for (j, x) in v.iter().enumerate() {
                        m.set(i, j, x / n);
                    }
                    break;
                }
            }
        }
        m
    }

    pub fn random_bundle(rng: &mut StdRng, n: usize, m: usize, d: usize) -> EmbeddingBundle {
        EmbeddingBundle::new(unit_rows(rng, n, d), unit_rows(rng, m, d)).unwrap()
    }

    pub fn random_gaze(rng: &mut StdRng, m: usize, n: usize) -> GazeMatrices {
        let mut gs = Matrix::zeros(m, n);
        let mut gl = Matrix::zeros(m, n);
        for j in 0..m {
            if rng.gen_bool(0.3) {
                continue; // gaze-free sentence
            }
            for i in 0..n {
                if rng.gen_bool(0.4) {
                    gs.set(j, i, rng.gen_range(0.1..1.0));
                    gl.set(j, i, 1.0);
                }
            }
        }
        GazeMatrices { gs, gl }
    }
}
