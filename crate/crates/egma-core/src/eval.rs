//! Zero-shot evaluation: prompt-bank classification (accuracy, macro-F1)
//! and bidirectional retrieval (precision at top-K).
//!
//! Both tasks score with the directional mean-max similarity used in
//! training. Classification averages the similarity over a class's
//! prompts; ties go to the lower class index. Retrieval ranks the gallery
//! per query with ties broken toward the lower gallery index, and P@K is
//! the mean fraction of the top K sharing the query's class.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::alignment::mean_max_similarity;
use crate::dataset::TrainSample;
use crate::encoders::{encode_image, encode_sentences, EncoderParams, Vocabulary};
use crate::error::{EgmaError, Result};
use crate::numeric::{norm, Matrix};

/// Named classes, each with at least one prompt sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub classes: Vec<String>,
    pub prompts: Vec<Vec<String>>,
}

impl PromptBank {
    /// Parse `class_name<TAB>prompt sentence` lines; class order follows
    /// first appearance.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut classes: Vec<String> = Vec::new();
        let mut prompts: Vec<Vec<String>> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((class, prompt)) = line.split_once('\t') else {
                return Err(EgmaError::MalformedRow {
                    source: source.to_string(),
                    line: idx + 1,
                    reason: "expected class_name<TAB>prompt".to_string(),
                });
            };
            let class = class.trim();
            let prompt = prompt.trim();
            match classes.iter().position(|c| c == class) {
                Some(i) => prompts[i].push(prompt.to_string()),
                None => {
                    classes.push(class.to_string());
                    prompts.push(vec![prompt.to_string()]);
                }
            }
        }
        if classes.is_empty() {
            return Err(EgmaError::EmptyBank);
        }
        Ok(Self { classes, prompts })
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (c, ps) in self.classes.iter().zip(&self.prompts) {
            for p in ps {
                out.push_str(&format!("{c}\t{p}\n"));
            }
        }
        out
    }
}

/// Evaluation metrics; all values sit in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub p_at_k: Vec<(usize, f64)>,
}

impl EvalResult {
    pub fn report_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("accuracy,{}\n", self.accuracy));
        out.push_str(&format!("macro_f1,{}\n", self.macro_f1));
        for (k, p) in &self.p_at_k {
            out.push_str(&format!("p_at_{k},{p}\n"));
        }
        for (name, f1) in class_names.iter().zip(&self.per_class_f1) {
            out.push_str(&format!("f1_{name},{f1}\n"));
        }
        out
    }
}

/// Retrieval direction: which modality queries and which is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// A sample pushed through the trained encoders, ready for scoring.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub patches: Matrix,
    pub sentences: Matrix,
    pub class_idx: usize,
}

/// Encode labeled samples with the trained parameters.
pub fn encode_dataset(samples: &[TrainSample], params: &EncoderParams) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            let class_idx = s.class_idx.ok_or_else(|| EgmaError::MalformedRow {
                source: s.id.clone(),
                line: 0,
                reason: "sample has no class label".to_string(),
            })?;
            Ok(EncodedSample {
                patches: encode_image(&s.image, &params.grid, params)?,
                sentences: encode_sentences(&s.sentences, params)?,
                class_idx,
            })
        })
        .collect()
}

/// Per-class scores: mean over the class's prompt features of the
/// image-to-prompt mean-max similarity.
pub fn classify_scores(patches: &Matrix, prompt_feats: &[Vec<Matrix>]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(prompt_feats.len());
    for class_prompts in prompt_feats {
        let mut acc = 0.0;
        for feats in class_prompts {
            acc += mean_max_similarity(patches, feats)?;
        }
        scores.push(acc / class_prompts.len() as f64);
    }
    Ok(scores)
}

fn argmax_lowest_tie(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Zero-shot classification of labeled samples against a prompt bank.
/// Returns per-sample predictions and the aggregate metrics.
pub fn zero_shot_classify(
    samples: &[EncodedSample],
    bank: &PromptBank,
    params: &EncoderParams,
    vocab: &Vocabulary,
) -> Result<(Vec<usize>, EvalResult)> {
    if bank.classes.is_empty() {
        return Err(EgmaError::EmptyBank);
    }
    let mut prompt_feats = Vec::with_capacity(bank.classes.len());
    for prompts in &bank.prompts {
        if prompts.is_empty() {
            return Err(EgmaError::EmptyBank);
        }
        let feats = prompts
            .iter()
            .map(|p| {
                let ids = vocab.tokenize(p)?;
                encode_sentences(&[ids], params)
            })
            .collect::<Result<Vec<_>>>()?;
        prompt_feats.push(feats);
    }
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let scores = classify_scores(&s.patches, &prompt_feats)?;
        predictions.push(argmax_lowest_tie(&scores));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class_idx).collect();
    let (accuracy, per_class_f1) = classification_metrics(&predictions, &labels, bank.classes.len());
    let macro_f1 = per_class_f1.iter().sum::<f64>() / per_class_f1.len() as f64;
    Ok((
        predictions,
        EvalResult {
            accuracy,
            macro_f1,
            per_class_f1,
            p_at_k: Vec::new(),
        },
    ))
}

/// Accuracy and per-class F1 from predictions and labels.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> (f64, Vec<f64>) {
    assert_eq!(predictions.len(), labels.len());
    assert!(!predictions.is_empty());
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / predictions.len() as f64;
    let mut f1 = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == c && **l == c)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == c && **l != c)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p != c && **l == c)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        f1.push(if denom > 0.0 { 2.0 * tp / denom } else { 0.0 });
    }
    (accuracy, f1)
}

/// Precision at top-K for each requested K. Queries rank the gallery by
/// mean-max similarity in the given direction.
pub fn retrieval_p_at_k(
    queries: &[EncodedSample],
    gallery: &[EncodedSample],
    k_list: &[usize],
    direction: Direction,
) -> Result<Vec<(usize, f64)>> {
    let max_k = k_list.iter().copied().max().unwrap_or(0);
    if gallery.len() < max_k {
        return Err(EgmaError::GalleryTooSmall {
            gallery: gallery.len(),
            k: max_k,
        });
    }
    assert!(!queries.is_empty(), "need at least one query");
    let mut hits_at: Vec<f64> = vec![0.0; k_list.len()];
    for q in queries {
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(gallery.len());
        for (gi, g) in gallery.iter().enumerate() {
            let s = match direction {
                Direction::ImageToText => mean_max_similarity(&q.patches, &g.sentences)?,
                Direction::TextToImage => mean_max_similarity(&q.sentences, &g.patches)?,
            };
            scored.push((gi, s));
        }
        // stable sort by score descending keeps lower gallery index on ties
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (ki, &k) in k_list.iter().enumerate() {
            let relevant = scored[..k].iter().filter(|(gi, _)| gallery[*gi].class_idx == q.class_idx).count();
            hits_at[ki] += relevant as f64 / k as f64;
        }
    }
    Ok(k_list
        .iter()
        .zip(&hits_at)
        .map(|(&k, h)| (k, h / queries.len() as f64))
        .collect())
}

/// Monte-Carlo chance baseline: P@1 of retrieval over random unit
/// features with `per_class` gallery items in each of `num_classes`
/// balanced classes.
pub fn monte_carlo_p1_baseline(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let unit = |rng: &mut StdRng| -> Matrix {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 1e-6 {
                return Matrix::from_vec(1, dim, v.iter().map(|x| x / n).collect()).unwrap();
            }
        }
    };
    let mut total = 0.0;
    for _ in 0..trials {
        let gallery: Vec<EncodedSample> = (0..num_classes * per_class)
            .map(|i| EncodedSample {
                patches: unit(&mut rng),
                sentences: unit(&mut rng),
                class_idx: i % num_classes,
            })
            .collect();
        let queries: Vec<EncodedSample> = (0..num_classes)
            .map(|c| EncodedSample {
                patches: unit(&mut rng),
                sentences: unit(&mut rng),
                class_idx: c,
            })
            .collect();
        let p = retrieval_p_at_k(&queries, &gallery, &[1], Direction::TextToImage).unwrap();
        total += p[0].1;
    }
    total / trials as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::PatchGrid;

    fn unit_row(v: &[f64]) -> Matrix {
        let n = norm(v);
        Matrix::from_vec(1, v.len(), v.iter().map(|x| x / n).collect()).unwrap()
    }

    fn item(patch: &[f64], sentence: &[f64], class_idx: usize) -> EncodedSample {
        EncodedSample {
            patches: unit_row(patch),
            sentences: unit_row(sentence),
            class_idx,
        }
    }

    #[test]
    fn prompt_bank_parses_and_groups_by_class() {
        let bank = PromptBank::parse("a\tfirst prompt.\nb\tother.\na\tsecond prompt.\n", "mem").unwrap();
        assert_eq!(bank.classes, vec!["a", "b"]);
        assert_eq!(bank.prompts[0].len(), 2);
        assert_eq!(bank.prompts[1].len(), 1);
        let rt = PromptBank::parse(&bank.serialize(), "mem").unwrap();
        assert_eq!(rt, bank);
        assert!(matches!(PromptBank::parse("", "mem"), Err(EgmaError::EmptyBank)));
        assert!(PromptBank::parse("no tab here\n", "mem").is_err());
    }

    #[test]
    fn planted_prompt_wins_the_argmax() {
        // image patches contain the planted vector; class 1's prompt is
        // that vector, other classes are orthogonal
        let patches = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let prompt_feats = vec![
            vec![unit_row(&[0.0, 1.0, 0.0])],
            vec![unit_row(&[1.0, 0.0, 0.0])],
            vec![unit_row(&[0.0, -1.0, 0.0])],
        ];
        let scores = classify_scores(&patches, &prompt_feats).unwrap();
        assert_eq!(argmax_lowest_tie(&scores), 1);
    }

    #[test]
    fn ties_resolve_to_the_lowest_class_index() {
        assert_eq!(argmax_lowest_tie(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax_lowest_tie(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn duplicated_prompts_do_not_change_scores() {
        let patches = Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let p = unit_row(&[0.3, 0.7]);
        let single = classify_scores(&patches, &[vec![p.clone()]]).unwrap();
        let doubled = classify_scores(&patches, &[vec![p.clone(), p]]).unwrap();
        assert!((single[0] - doubled[0]).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let (acc, f1) = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        assert_eq!(acc, 1.0);
        assert!(f1.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn metrics_agree_with_confusion_matrix_oracle() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let c = rng.gen_range(2..5);
            let n = rng.gen_range(5..40);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let (acc, f1) = classification_metrics(&preds, &labels, c);

            // brute-force confusion matrix
            let mut conf = vec![vec![0usize; c]; c];
            for (&p, &l) in preds.iter().zip(&labels) {
                conf[l][p] += 1;
            }
            let acc_oracle: f64 =
                (0..c).map(|i| conf[i][i]).sum::<usize>() as f64 / n as f64;
            assert!((acc - acc_oracle).abs() < 1e-15);
            for k in 0..c {
                let tp = conf[k][k] as f64;
                let fp: f64 = (0..c).filter(|&l| l != k).map(|l| conf[l][k] as f64).sum();
                let fn_: f64 = (0..c).filter(|&p| p != k).map(|p| conf[k][p] as f64).sum();
                let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                let f1_oracle = if prec + rec > 0.0 {
                    2.0 * prec * rec / (prec + rec)
                } else {
                    0.0
                };
                assert!((f1[k] - f1_oracle).abs() < 1e-12, "class {k}");
            }
        }
    }

    #[test]
    fn single_matching_gallery_item_gives_perfect_p1() {
        let q = item(&[1.0, 0.0], &[0.0, 1.0], 0);
        let g = item(&[0.0, 1.0], &[1.0, 0.0], 0);
        let p = retrieval_p_at_k(&[q], &[g], &[1], Direction::TextToImage).unwrap();
        assert_eq!(p, vec![(1, 1.0)]);
    }

    #[test]
    fn hand_built_ranking_gives_p5_of_two_fifths() {
        // five gallery items; the two relevant ones sit anywhere in top-5
        let q = item(&[1.0, 0.0], &[1.0, 0.0], 0);
        let gallery = vec![
            item(&[1.0, 0.0], &[0.0, 1.0], 0),
            item(&[0.9, 0.1], &[0.0, 1.0], 1),
            item(&[0.8, 0.2], &[0.0, 1.0], 0),
            item(&[0.7, 0.3], &[0.0, 1.0], 1),
            item(&[0.6, 0.4], &[0.0, 1.0], 1),
        ];
        let p = retrieval_p_at_k(&[q], &gallery, &[5], Direction::TextToImage).unwrap();
        assert_eq!(p, vec![(5, 0.4)]);
    }

    #[test]
    fn gallery_permutation_does_not_change_p_at_k() {
        use rand::rngs::StdRng;
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        let queries: Vec<EncodedSample> = (0..4)
            .map(|c| {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                item(&v, &s, c)
            })
            .collect();
        let gallery: Vec<EncodedSample> = (0..12)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                item(&v, &s, i % 4)
            })
            .collect();
        let base = retrieval_p_at_k(&queries, &gallery, &[1, 5, 10], Direction::TextToImage).unwrap();
        let mut shuffled = gallery.clone();
        shuffled.shuffle(&mut rng);
        let after = retrieval_p_at_k(&queries, &shuffled, &[1, 5, 10], Direction::TextToImage).unwrap();
        for ((k1, p1), (k2, p2)) in base.iter().zip(&after) {
            assert_eq!(k1, k2);
            assert!((p1 - p2).abs() < 1e-12);
        }
    }

    #[test]
    fn small_gallery_is_rejected() {
        let q = item(&[1.0, 0.0], &[0.0, 1.0], 0);
        let g = item(&[0.0, 1.0], &[1.0, 0.0], 0);
        assert!(matches!(
            retrieval_p_at_k(&[q], &[g], &[1, 5, 10], Direction::TextToImage),
            Err(EgmaError::GalleryTooSmall { gallery: 1, k: 10 })
        ));
    }

    #[test]
    fn random_features_score_near_chance() {
        let p1 = monte_carlo_p1_baseline(8, 8, 16, 40, 11);
        assert!((p1 - 0.125).abs() < 0.05, "baseline {p1}");
    }

    #[test]
    fn report_csv_lists_all_metrics() {
        let r = EvalResult {
            accuracy: 0.75,
            macro_f1: 0.5,
            per_class_f1: vec![0.25, 0.75],
            p_at_k: vec![(1, 0.5), (5, 0.4)],
        };
        let csv = r.report_csv(&["north".to_string(), "south".to_string()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,value");
        assert!(lines.contains(&"accuracy,0.75"));
        assert!(lines.contains(&"p_at_5,0.4"));
        assert!(lines.contains(&"f1_south,0.75"));
    }

    #[test]
    fn encode_dataset_requires_labels() {
        let params = EncoderParams::init(4, 8, PatchGrid::default(), 1);
        let sample = TrainSample {
            id: "u1".into(),
            image: crate::encoders::ToyImage::zeros(),
            sentences: vec![vec![0]],
            gaze: None,
            class_idx: None,
        };
        assert!(encode_dataset(&[sample], &params).is_err());
    }
}
