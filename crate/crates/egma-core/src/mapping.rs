//! Gaze-weighted cross-modal mapping.
//!
//! Alignment weight matrices combine a sparsified-binarized view of the
//! model's own fine-grained similarities with the gaze similarity matrix:
//!
//! ```text
//! W_I2T = norm(omega(x_P2S) + GS^T)      (n×m)
//! W_T2I = norm(omega(x_S2P) + GS)        (m×n)
//! ```
//!
//! omega keeps the top ceil(rho*c) entries per row and sets them to 1;
//! norm is per-row L1 normalization, so the mapped features
//!
//! ```text
//! Cross_P_i = sum_j S_j * W_I2T[i,j],   Cross_S_j = sum_i P_i * W_T2I[j,i]
//! ```
//!
//! are convex combinations of the source rows. The mapping loss contrasts
//! mapped rows against their targets token-wise (patch index as the batch
//! axis), and the total training loss is L = L_EGF + L_EGM.
//!
//! omega and norm are piecewise constant in the embeddings, so no gradient
//! flows through the weights themselves; the EGM gradient reaches the
//! encoders through the linear map and the token-wise cosines.

use crate::alignment::{
    clip_loss_grad, egf_loss, fine_similarities, BundleGrad, ContrastiveConfig, EmbeddingBundle,
    FineSimPair,
};
use crate::error::{EgmaError, Result};
use crate::heatmap::GazeMatrices;
use crate::numeric::{cosine_matrix, cosine_matrix_backward, Matrix};

/// Sparsity and temperature knobs of the mapping module. The temperature
/// is the same learnable scalar the contrastive losses use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    /// Keep-fraction of omega, in (0, 1].
    pub rho: f64,
    pub contrastive: ContrastiveConfig,
}

impl MappingConfig {
    pub const DEFAULT_RHO: f64 = 0.25;

    pub fn tau(&self) -> f64 {
        self.contrastive.tau()
    }
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            rho: Self::DEFAULT_RHO,
            contrastive: ContrastiveConfig::default(),
        }
    }
}

/// Row-stochastic alignment weights: every row sums to 1, entries >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrices {
    pub w_i2t: Matrix,
    pub w_t2i: Matrix,
}

/// Per row, keep the top ceil(rho*c) entries by value (ties broken toward
/// the lower column index), set kept entries to 1 and the rest to 0.
pub fn sparse_binarize(x: &Matrix, rho: f64) -> Matrix {
    assert!(rho > 0.0 && rho <= 1.0, "rho must be in (0, 1]");
    let c = x.cols();
    let keep = (rho * c as f64).ceil() as usize;
    let mut out = Matrix::zeros(x.rows(), c);
    let mut order: Vec<usize> = Vec::with_capacity(c);
    for r in 0..x.rows() {
        let row = x.row(r);
        order.clear();
        order.extend(0..c);
        // stable sort by value descending keeps lower indices first on ties
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        for &j in order.iter().take(keep) {
            out.set(r, j, 1.0);
        }
    }
    out
}

/// Divide each row by its sum; an all-zero row becomes uniform 1/c so the
/// result is always row-stochastic.
pub fn row_normalize(x: &Matrix) -> Matrix {
    debug_assert!(x.data().iter().all(|&v| v >= 0.0), "entries must be non-negative");
    let c = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    out
}

/// Alignment weights from the fine similarities and (when present) the
/// gaze similarity matrix; without gaze the GS term is omitted and the
/// weights reduce to the normalized omega output.
pub fn alignment_weights(
    fine: &FineSimPair,
    gaze: Option<&GazeMatrices>,
    cfg: &MappingConfig,
) -> Result<WeightMatrices> {
    let mut base_i2t = sparse_binarize(&fine.x_p2s, cfg.rho);
    let mut base_t2i = sparse_binarize(&fine.x_s2p, cfg.rho);
    if let Some(gm) = gaze {
        if gm.gs.rows() != fine.x_s2p.rows() || gm.gs.cols() != fine.x_s2p.cols() {
            return Err(EgmaError::ShapeMismatch {
                what: "gaze similarity vs fine similarities",
                expected: (fine.x_s2p.rows(), fine.x_s2p.cols()),
                got: (gm.gs.rows(), gm.gs.cols()),
            });
        }
        base_i2t.add_scaled(&gm.gs.transpose(), 1.0);
        base_t2i.add_scaled(&gm.gs, 1.0);
    }
    Ok(WeightMatrices {
        w_i2t: row_normalize(&base_i2t),
        w_t2i: row_normalize(&base_t2i),
    })
}

/// Map sentence features onto the patch axis and patch features onto the
/// sentence axis with the row-stochastic weights.
pub fn cross_map(e: &EmbeddingBundle, w: &WeightMatrices) -> Result<(Matrix, Matrix)> {
    if w.w_i2t.rows() != e.n_patches() || w.w_i2t.cols() != e.n_sentences() {
        return Err(EgmaError::ShapeMismatch {
            what: "w_i2t vs bundle",
            expected: (e.n_patches(), e.n_sentences()),
            got: (w.w_i2t.rows(), w.w_i2t.cols()),
        });
    }
    if w.w_t2i.rows() != e.n_sentences() || w.w_t2i.cols() != e.n_patches() {
        return Err(EgmaError::ShapeMismatch {
            what: "w_t2i vs bundle",
            expected: (e.n_sentences(), e.n_patches()),
            got: (w.w_t2i.rows(), w.w_t2i.cols()),
        });
    }
    let cross_p = w.w_i2t.matmul(&e.sentences);
    let cross_s = w.w_t2i.matmul(&e.patches);
    Ok((cross_p, cross_s))
}

/// Token-wise mapping contrast: rows of `mapped` against rows of `target`,
/// positives on the diagonal of their cosine matrix, each row contributing
/// -(1/rows) log softmax(row/tau)[row].
pub fn mapping_contrast_loss(mapped: &Matrix, target: &Matrix, tau: f64) -> Result<f64> {
    let c = cosine_matrix(mapped, target)?;
    Ok(clip_loss_grad(&c, tau)?.losses.iter().sum())
}

/// Everything `egm_loss` reports.
#[derive(Debug, Clone)]
pub struct EgmOutput {
    pub ml_i: f64,
    pub ml_t: f64,
    pub value: f64,
    pub grads: Vec<BundleGrad>,
    pub d_log_tau: f64,
}

/// Cross-modal mapping loss of a (possibly mixed) batch:
/// L_EGM = (1/2) sum_k (mL_k^I + mL_k^T).
pub fn egm_loss(
    batch: &[EmbeddingBundle],
    gaze: &[Option<&GazeMatrices>],
    cfg: &MappingConfig,
) -> Result<EgmOutput> {
    assert_eq!(batch.len(), gaze.len(), "batch and gaze lists must align");
    assert!(!batch.is_empty(), "batch must be non-empty");
    let tau = cfg.tau();
    let mut ml_i = 0.0;
    let mut ml_t = 0.0;
    let mut d_log_tau = 0.0;
    let mut grads: Vec<BundleGrad> = batch.iter().map(BundleGrad::zeros_like).collect();

    for (k, e) in batch.iter().enumerate() {
        let fine = fine_similarities(e)?;
        let w = alignment_weights(&fine, gaze[k], cfg)?;
        let (cross_p, cross_s) = cross_map(e, &w)?;

        // image side: mapped patches vs real patches, n-way
        let c_i = cosine_matrix(&cross_p, &e.patches)?;
        let clip_i = clip_loss_grad(&c_i, tau)?;
        ml_i += 0.5 * clip_i.losses.iter().sum::<f64>();
        d_log_tau += 0.5 * clip_i.d_log_tau;
        let mut g = clip_i.d_sim;
        for v in g.data_mut() {
            *v *= 0.5;
        }
        let mut d_cross_p = Matrix::zeros(cross_p.rows(), cross_p.cols());
        cosine_matrix_backward(&cross_p, &e.patches, &c_i, &g, &mut d_cross_p, &mut grads[k].patches);
        // Cross_P = W_I2T * S with W constant
        grads[k].sentences.add_scaled(&w.w_i2t.transpose().matmul(&d_cross_p), 1.0);

        // text side: mapped sentences vs real sentences, m-way
        let c_t = cosine_matrix(&cross_s, &e.sentences)?;
        let clip_t = clip_loss_grad(&c_t, tau)?;
        ml_t += 0.5 * clip_t.losses.iter().sum::<f64>();
        d_log_tau += 0.5 * clip_t.d_log_tau;
        let mut g = clip_t.d_sim;
        for v in g.data_mut() {
            *v *= 0.5;
        }
        let mut d_cross_s = Matrix::zeros(cross_s.rows(), cross_s.cols());
        cosine_matrix_backward(&cross_s, &e.sentences, &c_t, &g, &mut d_cross_s, &mut grads[k].sentences);
        grads[k].patches.add_scaled(&w.w_t2i.transpose().matmul(&d_cross_s), 1.0);
    }

    Ok(EgmOutput {
        ml_i,
        ml_t,
        value: ml_i + ml_t,
        grads,
        d_log_tau,
    })
}

/// Every loss component of one batch, with the full gradient. Components
/// carry their formula prefactors, so the sums below are exact:
/// `l_egf = fl_s2p + fl_p2s + fg_i2t + fg_t2i`, `l_egm = ml_i + ml_t`,
/// `total = l_egf + l_egm`.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub fl_s2p: f64,
    pub fl_p2s: f64,
    pub fg_i2t: f64,
    pub fg_t2i: f64,
    pub l_egf: f64,
    pub ml_i: f64,
    pub ml_t: f64,
    pub l_egm: f64,
    pub total: f64,
    pub grads: Vec<BundleGrad>,
    pub d_log_tau: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,fl_s2p,fl_p2s,fg_i2t,fg_t2i,l_egf,ml_i,ml_t,l_egm,total,tau";

    pub fn csv_row(&self, step: u64, tau: f64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{},{tau}",
            self.fl_s2p,
            self.fl_p2s,
            self.fg_i2t,
            self.fg_t2i,
            self.l_egf,
            self.ml_i,
            self.ml_t,
            self.l_egm,
            self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.fl_s2p, self.fl_p2s, self.fg_i2t, self.fg_t2i, self.l_egf, self.ml_i, self.ml_t,
            self.l_egm, self.total, self.d_log_tau,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.grads.iter().all(|g| g.is_finite())
    }
}

/// Full training loss L = L_EGF + L_EGM with all components and gradients.
pub fn total_loss(
    batch: &[EmbeddingBundle],
    gaze: &[Option<&GazeMatrices>],
    cfg: &MappingConfig,
) -> Result<LossBreakdown> {
    let egf = egf_loss(batch, gaze, &cfg.contrastive)?;
    let egm = egm_loss(batch, gaze, cfg)?;
    let mut grads = egf.grads;
    for (g, e) in grads.iter_mut().zip(&egm.grads) {
        g.add_scaled(e, 1.0);
    }
    Ok(LossBreakdown {
        fl_s2p: egf.fl_s2p,
        fl_p2s: egf.fl_p2s,
        fg_i2t: egf.fg_i2t,
        fg_t2i: egf.fg_t2i,
        l_egf: egf.value,
        ml_i: egm.ml_i,
        ml_t: egm.ml_t,
        l_egm: egm.value,
        total: egf.value + egm.value,
        grads,
        d_log_tau: egf.d_log_tau + egm.d_log_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::test_support::{random_bundle, random_gaze};
    use crate::numeric::{compare_grads, finite_diff_grad_slice, norm};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sparse_binarize_keeps_everything_at_rho_one() {
        let x = Matrix::from_rows(&[vec![0.3, -0.1, 0.9], vec![0.0, 0.0, 0.0]]).unwrap();
        let b = sparse_binarize(&x, 1.0);
        assert!(b.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sparse_binarize_keeps_top_one_at_third() {
        let x = Matrix::from_rows(&[vec![0.9, 0.1, 0.5]]).unwrap();
        let b = sparse_binarize(&x, 1.0 / 3.0);
        assert_eq!(b.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sparse_binarize_breaks_ties_toward_lower_index() {
        let x = Matrix::from_rows(&[vec![0.4, 0.4, 0.4]]).unwrap();
        let b = sparse_binarize(&x, 1.0 / 3.0);
        assert_eq!(b.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn row_normalize_examples() {
        let x = Matrix::from_rows(&[vec![2.0, 2.0], vec![1.0, 3.0]]).unwrap();
        let n = row_normalize(&x);
        assert_eq!(n.row(0), &[0.5, 0.5]);
        assert_eq!(n.row(1), &[0.25, 0.75]);
        let z = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let n = row_normalize(&z);
        for &v in n.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_without_gaze_are_normalized_omega_only() {
        let mut rng = StdRng::seed_from_u64(3);
        let e = random_bundle(&mut rng, 4, 3, 5);
        let fine = fine_similarities(&e).unwrap();
        let cfg = MappingConfig::default();
        let w = alignment_weights(&fine, None, &cfg).unwrap();
        let want = row_normalize(&sparse_binarize(&fine.x_p2s, cfg.rho));
        assert_eq!(w.w_i2t, want);
    }

    #[test]
    fn one_hot_gaze_row_dominates_a_zero_omega_row() {
        // hand-compose the W_T2I formula on a 1×n row with omega zeroed out
        let mut gs_row = Matrix::zeros(1, 5);
        gs_row.set(0, 3, 0.8);
        let w = row_normalize(&gs_row);
        assert_eq!(w.row(0), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rho_one_and_zero_gaze_gives_uniform_rows() {
        let mut rng = StdRng::seed_from_u64(5);
        let e = random_bundle(&mut rng, 4, 2, 5);
        let fine = fine_similarities(&e).unwrap();
        let cfg = MappingConfig {
            rho: 1.0,
            ..Default::default()
        };
        let gm = GazeMatrices {
            gs: Matrix::zeros(2, 4),
            gl: Matrix::zeros(2, 4),
        };
        let w = alignment_weights(&fine, Some(&gm), &cfg).unwrap();
        for i in 0..4 {
            for &v in w.w_i2t.row(i) {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
        for j in 0..2 {
            for &v in w.w_t2i.row(j) {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weight_rows_sum_to_one_on_random_inputs() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..30 {
            let e = random_bundle(&mut rng, 4, 3, 6);
            let fine = fine_similarities(&e).unwrap();
            let gm = random_gaze(&mut rng, 3, 4);
            for gaze in [None, Some(&gm)] {
                let w = alignment_weights(&fine, gaze, &MappingConfig::default()).unwrap();
                for r in 0..w.w_i2t.rows() {
                    let s: f64 = w.w_i2t.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    assert!(w.w_i2t.row(r).iter().all(|&v| v >= 0.0));
                }
                for r in 0..w.w_t2i.rows() {
                    let s: f64 = w.w_t2i.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gaze_argmax_survives_normalization() {
        // GS row peaked at patch 2 stays the argmax of the weight row when
        // omega's kept entry lands on the same patch.
        let x_s2p = Matrix::from_rows(&[vec![0.1, 0.2, 0.9, 0.3]]).unwrap();
        let fine = FineSimPair {
            x_p2s: x_s2p.transpose(),
            x_s2p,
        };
        let mut gs = Matrix::zeros(1, 4);
        gs.set(0, 2, 1.0);
        let gm = GazeMatrices {
            gl: {
                let mut gl = Matrix::zeros(1, 4);
                gl.set(0, 2, 1.0);
                gl
            },
            gs,
        };
        let w = alignment_weights(&fine, Some(&gm), &MappingConfig::default()).unwrap();
        let row = w.w_t2i.row(0);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn cross_map_with_one_hot_weights_copies_rows() {
        let mut rng = StdRng::seed_from_u64(11);
        let e = random_bundle(&mut rng, 2, 2, 4);
        let w = WeightMatrices {
            w_i2t: Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            w_t2i: Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
        };
        let (cross_p, cross_s) = cross_map(&e, &w).unwrap();
        assert_eq!(cross_p.row(0), e.sentences.row(1));
        assert_eq!(cross_p.row(1), e.sentences.row(0));
        for c in 0..4 {
            let mean = (e.patches.get(0, c) + e.patches.get(1, c)) / 2.0;
            assert!((cross_s.get(0, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_map_matches_direct_summation() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..50 {
            let e = random_bundle(&mut rng, 2, 2, 3);
            let raw =
                Matrix::from_vec(2, 2, (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let w = WeightMatrices {
                w_i2t: row_normalize(&raw),
                w_t2i: row_normalize(&raw),
            };
            let (cross_p, cross_s) = cross_map(&e, &w).unwrap();
            for i in 0..2 {
                for c in 0..3 {
                    let direct: f64 =
                        (0..2).map(|j| e.sentences.get(j, c) * w.w_i2t.get(i, j)).sum();
                    assert!((cross_p.get(i, c) - direct).abs() < 1e-12);
                    let direct: f64 = (0..2).map(|j| e.patches.get(j, c) * w.w_t2i.get(i, j)).sum();
                    assert!((cross_s.get(i, c) - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_map_outputs_stay_in_the_convex_hull() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..30 {
            let e = random_bundle(&mut rng, 4, 3, 5);
            let fine = fine_similarities(&e).unwrap();
            let gm = random_gaze(&mut rng, 3, 4);
            let w = alignment_weights(&fine, Some(&gm), &MappingConfig::default()).unwrap();
            let (cross_p, _) = cross_map(&e, &w).unwrap();
            for i in 0..4 {
                for c in 0..5 {
                    let lo = (0..3).map(|j| e.sentences.get(j, c)).fold(f64::INFINITY, f64::min);
                    let hi = (0..3)
                        .map(|j| e.sentences.get(j, c))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let v = cross_p.get(i, c);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn egm_is_zero_for_single_token_instances() {
        let e = EmbeddingBundle::new(
            Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let out = egm_loss(&[e], &[None], &MappingConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for slot in 0..n {
                let mut q: Vec<usize> =
                    p.iter().map(|&v| if v >= slot { v + 1 } else { v }).collect();
                q.insert(0, slot);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn matched_mapping_minimizes_the_contrast_over_row_permutations() {
        // orthogonal target rows; the identity assignment of mapped rows
        // must beat every other permutation
        let p = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let perms = permutations(4);
        let mut losses = Vec::new();
        for perm in &perms {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| p.row(i).to_vec()).collect();
            let mapped = Matrix::from_rows(&rows).unwrap();
            losses.push(mapping_contrast_loss(&mapped, &p, 0.5).unwrap());
        }
        let identity_loss = losses[perms.iter().position(|p| p == &[0, 1, 2, 3]).unwrap()];
        for (perm, &l) in perms.iter().zip(&losses) {
            if perm != &[0, 1, 2, 3] {
                assert!(identity_loss < l, "{perm:?} beat identity: {l} vs {identity_loss}");
            }
        }
    }

    /// Straight-line re-implementation of the whole EGM formula using
    /// nothing but loops, exp, and ln.
    fn egm_reference(
        batch: &[EmbeddingBundle],
        gaze: &[Option<&GazeMatrices>],
        cfg: &MappingConfig,
    ) -> f64 {
        let tau = cfg.tau();
        let cos = |a: &[f64], v: &[f64]| {
            let d: f64 = a.iter().zip(v).map(|(x, y)| x * y).sum();
            d / (norm(a) * norm(v))
        };
        let mut total = 0.0;
        for (k, e) in batch.iter().enumerate() {
            let (n, m, d) = (e.n_patches(), e.n_sentences(), e.dim());
            let mut x_s2p = vec![vec![0.0; n]; m];
            for (j, row) in x_s2p.iter_mut().enumerate() {
                for (i, v) in row.iter_mut().enumerate() {
                    *v = cos(e.sentences.row(j), e.patches.row(i));
                }
            }
            let topk = |row: &[f64], rho: f64| {
                let keep = (rho * row.len() as f64).ceil() as usize;
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
                let mut out = vec![0.0; row.len()];
                for &j in idx.iter().take(keep) {
                    out[j] = 1.0;
                }
                out
            };
            let normalize = |mut row: Vec<f64>| {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    for v in &mut row {
                        *v /= s;
                    }
                } else {
                    let u = 1.0 / row.len() as f64;
                    row.fill(u);
                }
                row
            };
            let mut w_i2t = Vec::new();
            for i in 0..n {
                let col: Vec<f64> = (0..m).map(|j| x_s2p[j][i]).collect();
                let mut row = topk(&col, cfg.rho);
                if let Some(gm) = gaze[k] {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += gm.gs.get(j, i);
                    }
                }
                w_i2t.push(normalize(row));
            }
            let mut w_t2i = Vec::new();
            for j in 0..m {
                let mut row = topk(&x_s2p[j], cfg.rho);
                if let Some(gm) = gaze[k] {
                    for (i, v) in row.iter_mut().enumerate() {
                        *v += gm.gs.get(j, i);
                    }
                }
                w_t2i.push(normalize(row));
            }
            let cross_p: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..d)
                        .map(|c| (0..m).map(|j| e.sentences.get(j, c) * w_i2t[i][j]).sum())
                        .collect()
                })
                .collect();
            let cross_s: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    (0..d)
                        .map(|c| (0..n).map(|i| e.patches.get(i, c) * w_t2i[j][i]).sum())
                        .collect()
                })
                .collect();
            let ce_diag = |rows: &[Vec<f64>], targets: &Matrix| {
                let t = rows.len();
                let mut acc = 0.0;
                for (i, r) in rows.iter().enumerate() {
                    let logits: Vec<f64> = (0..t).map(|j| cos(r, targets.row(j)) / tau).collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    acc += -(logits[i] - lse) / t as f64;
                }
                acc
            };
            total += 0.5 * (ce_diag(&cross_p, &e.patches) + ce_diag(&cross_s, &e.sentences));
        }
        total
    }

    #[test]
    fn egm_matches_independent_reference_on_toy_batch() {
        let mut rng = StdRng::seed_from_u64(19);
        let batch: Vec<EmbeddingBundle> = (0..2).map(|_| random_bundle(&mut rng, 3, 2, 5)).collect();
        let g0 = random_gaze(&mut rng, 2, 3);
        let gaze: Vec<Option<&GazeMatrices>> = vec![Some(&g0), None];
        let cfg = MappingConfig::default();
        let out = egm_loss(&batch, &gaze, &cfg).unwrap();
        let want = egm_reference(&batch, &gaze, &cfg);
        assert!((out.value - want).abs() < 1e-10, "{} vs {want}", out.value);
    }

    #[test]
    fn total_loss_is_the_exact_sum_of_its_components() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let batch: Vec<EmbeddingBundle> =
                (0..3).map(|_| random_bundle(&mut rng, 4, 2, 6)).collect();
            let gazes: Vec<Option<GazeMatrices>> = (0..3)
                .map(|_| rng.gen_bool(0.5).then(|| random_gaze(&mut rng, 2, 4)))
                .collect();
            let gaze: Vec<Option<&GazeMatrices>> = gazes.iter().map(|g| g.as_ref()).collect();
            let out = total_loss(&batch, &gaze, &MappingConfig::default()).unwrap();
            assert_eq!(out.total, out.l_egf + out.l_egm);
            assert_eq!(out.l_egf, out.fl_s2p + out.fl_p2s + out.fg_i2t + out.fg_t2i);
            assert_eq!(out.l_egm, out.ml_i + out.ml_t);
        }
    }

    #[test]
    fn gaze_free_batch_equals_zeroed_gs_recomputation() {
        let mut rng = StdRng::seed_from_u64(29);
        let batch: Vec<EmbeddingBundle> = (0..3).map(|_| random_bundle(&mut rng, 4, 2, 6)).collect();
        let absent: Vec<Option<&GazeMatrices>> = vec![None; 3];
        let zeroed_gm: Vec<GazeMatrices> = (0..3)
            .map(|_| GazeMatrices {
                gs: Matrix::zeros(2, 4),
                gl: Matrix::zeros(2, 4),
            })
            .collect();
        let zeroed: Vec<Option<&GazeMatrices>> = zeroed_gm.iter().map(Some).collect();
        let cfg = MappingConfig::default();
        let a = total_loss(&batch, &absent, &cfg).unwrap();
        let b = total_loss(&batch, &zeroed, &cfg).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!((a.l_egf - b.l_egf).abs() < 1e-12);
        assert!((a.l_egm - b.l_egm).abs() < 1e-12);
    }

    #[test]
    fn loss_breakdown_csv_row_roundtrips_exactly() {
        let mut rng = StdRng::seed_from_u64(31);
        let batch: Vec<EmbeddingBundle> = (0..2).map(|_| random_bundle(&mut rng, 3, 2, 5)).collect();
        let gaze: Vec<Option<&GazeMatrices>> = vec![None; 2];
        let out = total_loss(&batch, &gaze, &MappingConfig::default()).unwrap();
        let row = out.csv_row(17, 0.07);
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), LossBreakdown::CSV_HEADER.split(',').count());
        let total: f64 = fields[9].parse().unwrap();
        let l_egf: f64 = fields[5].parse().unwrap();
        let l_egm: f64 = fields[8].parse().unwrap();
        assert_eq!(total, out.total);
        assert_eq!(total, l_egf + l_egm);
    }

    #[test]
    fn egm_and_total_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(37);
        for trial in 0..4 {
            let (b, n, m, d) = (3, 3, 2, 5);
            let batch: Vec<EmbeddingBundle> =
                (0..b).map(|_| random_bundle(&mut rng, n, m, d)).collect();
            let gazes: Vec<Option<GazeMatrices>> = (0..b)
                .map(|k| (k != 0).then(|| random_gaze(&mut rng, m, n)))
                .collect();
            let gaze: Vec<Option<&GazeMatrices>> = gazes.iter().map(|g| g.as_ref()).collect();
            let log_tau: f64 = rng.gen_range(-0.6..0.4);
            let cfg = MappingConfig {
                rho: 0.4,
                contrastive: ContrastiveConfig { log_tau },
            };

            let mut flat = Vec::new();
            for e in &batch {
                flat.extend_from_slice(e.patches.data());
                flat.extend_from_slice(e.sentences.data());
            }
            flat.push(log_tau);
            let rebuild = |flat: &[f64]| {
                let mut pos = 0;
                let mut bb = Vec::new();
                for e in &batch {
                    let np = e.patches.rows() * e.patches.cols();
                    let p = Matrix::from_vec(
                        e.patches.rows(),
                        e.patches.cols(),
                        flat[pos..pos + np].to_vec(),
                    )
                    .unwrap();
                    pos += np;
                    let ns = e.sentences.rows() * e.sentences.cols();
                    let s = Matrix::from_vec(
                        e.sentences.rows(),
                        e.sentences.cols(),
                        flat[pos..pos + ns].to_vec(),
                    )
                    .unwrap();
                    pos += ns;
                    bb.push(EmbeddingBundle::new(p, s).unwrap());
                }
                (
                    bb,
                    MappingConfig {
                        rho: cfg.rho,
                        contrastive: ContrastiveConfig { log_tau: flat[pos] },
                    },
                )
            };

            for use_total in [false, true] {
                let (value_grads, d_log_tau): (Vec<BundleGrad>, f64) = if use_total {
                    let out = total_loss(&batch, &gaze, &cfg).unwrap();
                    (out.grads, out.d_log_tau)
                } else {
                    let out = egm_loss(&batch, &gaze, &cfg).unwrap();
                    (out.grads, out.d_log_tau)
                };
                let fd = finite_diff_grad_slice(
                    |flat| {
                        let (bb, cfg) = rebuild(flat);
                        if use_total {
                            total_loss(&bb, &gaze, &cfg).unwrap().total
                        } else {
                            egm_loss(&bb, &gaze, &cfg).unwrap().value
                        }
                    },
                    &flat,
                    1e-5,
                )
                .unwrap();
                let mut analytic = Vec::new();
                for g in &value_grads {
                    analytic.extend_from_slice(g.patches.data());
                    analytic.extend_from_slice(g.sentences.data());
                }
                analytic.push(d_log_tau);
                let rep = compare_grads(&analytic, &fd, 1e-4);
                assert!(
                    rep.passed,
                    "trial {trial} total={use_total}: rel err {} at {}",
                    rep.max_rel_err, rep.worst_coordinate
                );
            }
        }
    }
}
