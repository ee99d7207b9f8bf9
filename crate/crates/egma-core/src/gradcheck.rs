//! Finite-difference validation of every analytic gradient.
//!
//! Each loss component is checked on random instances at the reference
//! sizes (b=4 samples, n=4 patches, m=3 sentences, d=8) against central
//! differences with the relative-error metric from the numeric module.
//!
//! The mean-max and top-k operators are piecewise smooth; central
//! differences are only meaningful away from their switching surfaces, so
//! the instance sampler rejects draws where a max or a top-k boundary is
//! within `KINK_MARGIN` of a tie. The margin is two orders of magnitude
//! above anything an `EPS`-sized probe can move a cosine.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::alignment::{
    clip_loss, clip_loss_grad, egf_loss, mlce_loss, mlce_loss_grad, ContrastiveConfig,
    EmbeddingBundle,
};
use crate::encoders::{
    backprop_image, backprop_sentences, encode_image_cached, encode_sentences_cached,
    EncoderParams, ParamGrads, ToyImage,
};
use crate::error::Result;
use crate::heatmap::{GazeMatrices, PatchGrid};
use crate::mapping::{egm_loss, total_loss, MappingConfig};
use crate::numeric::{cosine_matrix, finite_diff_grad_slice, norm, rel_err, Matrix};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;

const B: usize = 4;
const N_PATCHES: usize = 4;
const M_SENTENCES: usize = 3;
const DIM: usize = 8;

pub const COMPONENTS: &[&str] = &[
    "clip_loss",
    "mlce_loss",
    "egf_loss",
    "egm_loss",
    "total_loss",
    "encoder_params",
];

/// Worst observation for one component across all trials.
#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub component: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub worst_trial: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub reports: Vec<ComponentReport>,
    pub passed: bool,
}

impl GradCheckOutcome {
    pub fn worst(&self) -> &ComponentReport {
        self.reports
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
            .expect("non-empty")
    }
}

struct Worst {
    component: &'static str,
    trials: usize,
    max_rel_err: f64,
    worst_coordinate: usize,
    worst_trial: usize,
}

impl Worst {
    fn new(component: &'static str) -> Self {
        Self {
            component,
            trials: 0,
            max_rel_err: 0.0,
            worst_coordinate: 0,
            worst_trial: 0,
        }
    }

    fn observe(&mut self, trial: usize, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        self.trials = self.trials.max(trial + 1);
        for (i, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
            let e = rel_err(a, f);
            if e > self.max_rel_err {
                self.max_rel_err = e;
                self.worst_coordinate = i;
                self.worst_trial = trial;
            }
        }
    }

    fn finish(self) -> ComponentReport {
        ComponentReport {
            component: self.component,
            trials: self.trials,
            max_rel_err: self.max_rel_err,
            worst_coordinate: self.worst_coordinate,
            worst_trial: self.worst_trial,
            passed: self.max_rel_err < TOLERANCE,
        }
    }
}

fn unit_rows(rng: &mut StdRng, rows: usize, d: usize) -> Matrix {
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

fn random_gaze(rng: &mut StdRng, m: usize, n: usize) -> GazeMatrices {
    let mut gs = Matrix::zeros(m, n);
    let mut gl = Matrix::zeros(m, n);
    for j in 0..m {
        if rng.gen_bool(0.25) {
            continue;
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

fn random_log_tau(rng: &mut StdRng) -> f64 {
    rng.gen_range(0.5f64.ln()..1.5f64.ln())
}

/// Smallest margin of any max or top-k decision in the losses of this
/// batch; instances below `KINK_MARGIN` are resampled.
fn kink_margin(batch: &[EmbeddingBundle], rho: f64) -> f64 {
    let mut margin = f64::INFINITY;
    let row_gap = |c: &Matrix| {
        let mut worst = f64::INFINITY;
        for i in 0..c.rows() {
            let row = c.row(i);
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &v in row {
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            if second.is_finite() {
                worst = worst.min(best - second);
            }
        }
        worst
    };
    let topk_gap = |c: &Matrix, rho: f64| {
        let keep = (rho * c.cols() as f64).ceil() as usize;
        if keep >= c.cols() {
            return f64::INFINITY;
        }
        let mut worst = f64::INFINITY;
        for i in 0..c.rows() {
            let mut row = c.row(i).to_vec();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            worst = worst.min(row[keep - 1] - row[keep]);
        }
        worst
    };
    for e_a in batch {
        for e_b in batch {
            let c = cosine_matrix(&e_a.patches, &e_b.sentences).expect("unit rows");
            margin = margin.min(row_gap(&c));
            margin = margin.min(row_gap(&c.transpose())); // column maxes
        }
    }
    for e in batch {
        let x_s2p = cosine_matrix(&e.sentences, &e.patches).expect("unit rows");
        margin = margin.min(topk_gap(&x_s2p, rho));
        margin = margin.min(topk_gap(&x_s2p.transpose(), rho));
    }
    margin
}

struct Instance {
    batch: Vec<EmbeddingBundle>,
    gazes: Vec<Option<GazeMatrices>>,
    log_tau: f64,
}

fn sample_instance(rng: &mut StdRng, rho: f64) -> Instance {
    loop {
        let batch: Vec<EmbeddingBundle> = (0..B)
            .map(|_| {
                EmbeddingBundle::new(
                    unit_rows(rng, N_PATCHES, DIM),
                    unit_rows(rng, M_SENTENCES, DIM),
                )
                .unwrap()
            })
            .collect();
        if kink_margin(&batch, rho) < KINK_MARGIN {
            continue;
        }
        let gazes: Vec<Option<GazeMatrices>> = (0..B)
            .map(|_| {
                rng.gen_bool(0.7)
                    .then(|| random_gaze(rng, M_SENTENCES, N_PATCHES))
            })
            .collect();
        return Instance {
            batch,
            gazes,
            log_tau: random_log_tau(rng),
        };
    }
}

fn flatten_instance(inst: &Instance) -> Vec<f64> {
    let mut flat = Vec::new();
    for e in &inst.batch {
        flat.extend_from_slice(e.patches.data());
        flat.extend_from_slice(e.sentences.data());
    }
    flat.push(inst.log_tau);
    flat
}

fn rebuild_instance(flat: &[f64]) -> (Vec<EmbeddingBundle>, f64) {
    let per_bundle = (N_PATCHES + M_SENTENCES) * DIM;
    let mut batch = Vec::with_capacity(B);
    for k in 0..B {
        let base = k * per_bundle;
        let p = Matrix::from_vec(
            N_PATCHES,
            DIM,
            flat[base..base + N_PATCHES * DIM].to_vec(),
        )
        .unwrap();
        let s = Matrix::from_vec(
            M_SENTENCES,
            DIM,
            flat[base + N_PATCHES * DIM..base + per_bundle].to_vec(),
        )
        .unwrap();
        batch.push(EmbeddingBundle::new(p, s).unwrap());
    }
    (batch, flat[B * per_bundle])
}

fn check_clip(rng: &mut StdRng, trials: usize, corrupt: bool) -> Result<ComponentReport> {
    let mut worst = Worst::new("clip_loss");
    for trial in 0..trials {
        let data: Vec<f64> = (0..B * B).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sim = Matrix::from_vec(B, B, data.clone()).unwrap();
        let log_tau = random_log_tau(rng);
        let g = clip_loss_grad(&sim, log_tau.exp())?;
        let mut analytic: Vec<f64> = g.d_sim.data().to_vec();
        analytic.push(g.d_log_tau);
        if corrupt && trial == 0 {
            analytic[0] += 1e-2;
        }
        let mut flat = data;
        flat.push(log_tau);
        let fd = finite_diff_grad_slice(
            |flat| {
                let m = Matrix::from_vec(B, B, flat[..B * B].to_vec()).unwrap();
                clip_loss(&m, flat[B * B].exp()).unwrap().iter().sum()
            },
            &flat,
            EPS,
        )?;
        worst.observe(trial, &analytic, &fd);
    }
    Ok(worst.finish())
}

fn check_mlce(rng: &mut StdRng, trials: usize, corrupt: bool) -> Result<ComponentReport> {
    let mut worst = Worst::new("mlce_loss");
    for trial in 0..trials {
        let data: Vec<f64> = (0..M_SENTENCES * N_PATCHES)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let logits = Matrix::from_vec(M_SENTENCES, N_PATCHES, data.clone()).unwrap();
        let mut labels = Matrix::zeros(M_SENTENCES, N_PATCHES);
        for j in 0..M_SENTENCES {
            for i in 0..N_PATCHES {
                if rng.gen_bool(0.4) {
                    labels.set(j, i, 1.0);
                }
            }
        }
        let log_tau = random_log_tau(rng);
        let (_, d_logits, d_log_tau) = mlce_loss_grad(&logits, &labels, log_tau.exp())?;
        let mut analytic: Vec<f64> = d_logits.data().to_vec();
        analytic.push(d_log_tau);
        if corrupt && trial == 0 {
            analytic[0] += 1e-2;
        }
        let mut flat = data;
        flat.push(log_tau);
        let fd = finite_diff_grad_slice(
            |flat| {
                let m = Matrix::from_vec(
                    M_SENTENCES,
                    N_PATCHES,
                    flat[..M_SENTENCES * N_PATCHES].to_vec(),
                )
                .unwrap();
                mlce_loss(&m, &labels, flat[M_SENTENCES * N_PATCHES].exp()).unwrap()
            },
            &flat,
            EPS,
        )?;
        worst.observe(trial, &analytic, &fd);
    }
    Ok(worst.finish())
}

#[derive(Clone, Copy, PartialEq)]
enum BundleLoss {
    Egf,
    Egm,
    Total,
}

fn check_bundle_loss(
    rng: &mut StdRng,
    trials: usize,
    which: BundleLoss,
    corrupt: bool,
) -> Result<ComponentReport> {
    let name = match which {
        BundleLoss::Egf => "egf_loss",
        BundleLoss::Egm => "egm_loss",
        BundleLoss::Total => "total_loss",
    };
    let rho = MappingConfig::DEFAULT_RHO;
    let mut worst = Worst::new(name);
    for trial in 0..trials {
        let inst = sample_instance(rng, rho);
        let gaze: Vec<Option<&GazeMatrices>> = inst.gazes.iter().map(|g| g.as_ref()).collect();
        let cfg = MappingConfig {
            rho,
            contrastive: ContrastiveConfig {
                log_tau: inst.log_tau,
            },
        };
        let (grads, d_log_tau) = match which {
            BundleLoss::Egf => {
                let out = egf_loss(&inst.batch, &gaze, &cfg.contrastive)?;
                (out.grads, out.d_log_tau)
            }
            BundleLoss::Egm => {
                let out = egm_loss(&inst.batch, &gaze, &cfg)?;
                (out.grads, out.d_log_tau)
            }
            BundleLoss::Total => {
                let out = total_loss(&inst.batch, &gaze, &cfg)?;
                (out.grads, out.d_log_tau)
            }
        };
        let mut analytic = Vec::new();
        for g in &grads {
            analytic.extend_from_slice(g.patches.data());
            analytic.extend_from_slice(g.sentences.data());
        }
        analytic.push(d_log_tau);
        if corrupt && trial == 0 {
            analytic[0] += 1e-2;
        }
        let flat = flatten_instance(&inst);
        let fd = finite_diff_grad_slice(
            |flat| {
                let (batch, log_tau) = rebuild_instance(flat);
                let cfg = MappingConfig {
                    rho,
                    contrastive: ContrastiveConfig { log_tau },
                };
                match which {
                    BundleLoss::Egf => egf_loss(&batch, &gaze, &cfg.contrastive).unwrap().value,
                    BundleLoss::Egm => egm_loss(&batch, &gaze, &cfg).unwrap().value,
                    BundleLoss::Total => total_loss(&batch, &gaze, &cfg).unwrap().total,
                }
            },
            &flat,
            EPS,
        )?;
        worst.observe(trial, &analytic, &fd);
    }
    Ok(worst.finish())
}

/// End-to-end check: gradients of the total loss with respect to the
/// encoder parameters. The projection and embedding tables are too large
/// for exhaustive probing, so a seeded sample of their coordinates is
/// probed alongside every bias and the log temperature.
fn check_encoder(rng: &mut StdRng, trials: usize, corrupt: bool) -> Result<ComponentReport> {
    let grid = PatchGrid::new(2, 2); // n = 4 patches
    let vocab_size = 10;
    let rho = MappingConfig::DEFAULT_RHO;
    let mut worst = Worst::new("encoder_params");
    for trial in 0..trials {
        // resample images/sentences until the induced losses sit away
        // from max/top-k kinks
        let (images, sentences, gazes, params, log_tau) = loop {
            let images: Vec<ToyImage> = (0..B)
                .map(|_| {
                    let mut img = ToyImage::zeros();
                    for r in 0..ToyImage::SIDE {
                        for c in 0..ToyImage::SIDE {
                            img.set(r, c, rng.gen_range(0.0..1.0));
                        }
                    }
                    img
                })
                .collect();
            let sentences: Vec<Vec<Vec<usize>>> = (0..B)
                .map(|_| {
                    (0..M_SENTENCES)
                        .map(|_| {
                            let t = rng.gen_range(1..4);
                            (0..t).map(|_| rng.gen_range(0..vocab_size)).collect()
                        })
                        .collect()
                })
                .collect();
            let gazes: Vec<Option<GazeMatrices>> = (0..B)
                .map(|_| {
                    rng.gen_bool(0.7)
                        .then(|| random_gaze(rng, M_SENTENCES, N_PATCHES))
                })
                .collect();
            let params = EncoderParams::init(DIM, vocab_size, grid, rng.gen());
            let log_tau = random_log_tau(rng);
            let batch: Vec<EmbeddingBundle> = images
                .iter()
                .zip(&sentences)
                .map(|(img, sents)| {
                    let p = crate::encoders::encode_image(img, &grid, &params).unwrap();
                    let s = crate::encoders::encode_sentences(sents, &params).unwrap();
                    EmbeddingBundle::new(p, s).unwrap()
                })
                .collect();
            if kink_margin(&batch, rho) >= KINK_MARGIN {
                break (images, sentences, gazes, params, log_tau);
            }
        };
        let gaze: Vec<Option<&GazeMatrices>> = gazes.iter().map(|g| g.as_ref()).collect();

        let eval = |params: &EncoderParams, log_tau: f64| -> f64 {
            let batch: Vec<EmbeddingBundle> = images
                .iter()
                .zip(&sentences)
                .map(|(img, sents)| {
                    let p = crate::encoders::encode_image(img, &grid, params).unwrap();
                    let s = crate::encoders::encode_sentences(sents, params).unwrap();
                    EmbeddingBundle::new(p, s).unwrap()
                })
                .collect();
            let cfg = MappingConfig {
                rho,
                contrastive: ContrastiveConfig { log_tau },
            };
            total_loss(&batch, &gaze, &cfg).unwrap().total
        };

        // analytic gradient via the encoder backward passes
        let mut grads = ParamGrads::zeros_like(&params);
        {
            let cfg = MappingConfig {
                rho,
                contrastive: ContrastiveConfig { log_tau },
            };
            let mut caches = Vec::new();
            let mut batch = Vec::new();
            for (img, sents) in images.iter().zip(&sentences) {
                let (p, ic) = encode_image_cached(img, &grid, &params)?;
                let (s, sc) = encode_sentences_cached(sents, &params)?;
                batch.push(EmbeddingBundle::new(p, s)?);
                caches.push((ic, sc));
            }
            let breakdown = total_loss(&batch, &gaze, &cfg)?;
            for ((ic, sc), g) in caches.iter().zip(&breakdown.grads) {
                backprop_image(ic, &g.patches, &mut grads);
                backprop_sentences(sc, &g.sentences, &mut grads);
            }
            grads.log_tau = breakdown.d_log_tau;
        }

        // probe: every bias, sampled projection/table coordinates, log tau
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut probe_w = |params: &EncoderParams, r: usize, c: usize, a: f64| {
            let mut plus = params.clone();
            plus.w_img.set(r, c, plus.w_img.get(r, c) + EPS);
            let mut minus = params.clone();
            minus.w_img.set(r, c, minus.w_img.get(r, c) - EPS);
            numeric.push((eval(&plus, log_tau) - eval(&minus, log_tau)) / (2.0 * EPS));
            analytic.push(a);
        };
        for _ in 0..20 {
            let (r, c) = (rng.gen_range(0..DIM), rng.gen_range(0..params.patch_pixels()));
            probe_w(&params, r, c, grads.w_img.get(r, c));
        }
        for j in 0..DIM {
            let mut plus = params.clone();
            plus.b_img[j] += EPS;
            let mut minus = params.clone();
            minus.b_img[j] -= EPS;
            numeric.push((eval(&plus, log_tau) - eval(&minus, log_tau)) / (2.0 * EPS));
            analytic.push(grads.b_img[j]);
        }
        let used: Vec<usize> = {
            let mut ids: Vec<usize> = sentences.iter().flatten().flatten().copied().collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        for _ in 0..20 {
            let id = used[rng.gen_range(0..used.len())];
            let j = rng.gen_range(0..DIM);
            let mut plus = params.clone();
            plus.token_emb.set(id, j, plus.token_emb.get(id, j) + EPS);
            let mut minus = params.clone();
            minus.token_emb.set(id, j, minus.token_emb.get(id, j) - EPS);
            numeric.push((eval(&plus, log_tau) - eval(&minus, log_tau)) / (2.0 * EPS));
            analytic.push(grads.token_emb.get(id, j));
        }
        numeric.push((eval(&params, log_tau + EPS) - eval(&params, log_tau - EPS)) / (2.0 * EPS));
        analytic.push(grads.log_tau);

        if corrupt && trial == 0 {
            analytic[0] += 1e-2;
        }
        worst.observe(trial, &analytic, &numeric);
    }
    Ok(worst.finish())
}

/// Run the full suite. `corrupt` names a component whose analytic gradient
/// is deliberately damaged on its first trial (a harness self-test hook).
pub fn run_gradcheck(seed: u64, trials: usize, corrupt: Option<&str>) -> Result<GradCheckOutcome> {
    assert!(trials >= 1);
    let mut rng = StdRng::seed_from_u64(seed);
    let hit = |name: &str| corrupt == Some(name);
    let reports = vec![
        check_clip(&mut rng, trials, hit("clip_loss"))?,
        check_mlce(&mut rng, trials, hit("mlce_loss"))?,
        check_bundle_loss(&mut rng, trials, BundleLoss::Egf, hit("egf_loss"))?,
        check_bundle_loss(&mut rng, trials, BundleLoss::Egm, hit("egm_loss"))?,
        check_bundle_loss(&mut rng, trials, BundleLoss::Total, hit("total_loss"))?,
        check_encoder(&mut rng, trials, hit("encoder_params"))?,
    ];
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradCheckOutcome { reports, passed })
}
