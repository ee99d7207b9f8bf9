//! Synthetic planted-correspondence data.
//!
//! Each sample draws one of eight classes. Its image carries a
//! class-specific striped texture in a class-specific grid cell over a
//! noise background; its transcript contains one generic sentence and one
//! class sentence (in random order); its fixations dwell on the textured
//! cell during the class sentence's interval. The gaze matrices therefore
//! mark the true (sentence, patch) correspondence, and retrieval /
//! classification ground truth is the class.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::dataset::RawSample;
use crate::encoders::{ToyImage, Vocabulary};
use crate::eval::PromptBank;
use crate::heatmap::PatchGrid;
use crate::session::{segment_sentences, FixationEvent, GazeSession, TimedWord};

pub const NUM_CLASSES: usize = 8;

/// Vocabulary layout the generator builds sentences from: entries 0..8 are
/// the class words, 8..16 the sentence scaffolding.
pub fn default_vocab() -> Vocabulary {
    Vocabulary::parse(
        "alpha\nbeta\ngamma\ndelta\nepsilon\nzeta\neta\ntheta\n\
         the\nimage\nshows\na\nscan\nsignal\nis\nstrong\n",
    )
}

/// A raw sample plus the planted ground truth.
#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub raw: RawSample,
    pub class_idx: usize,
    /// Sentence index of the class sentence.
    pub planted_sentence: usize,
    /// Row-major patch index of the textured cell.
    pub planted_patch: usize,
}

/// Cell every image's marker texture occupies; the generic sentence
/// describes this region.
fn marker_cell(grid: &PatchGrid) -> (usize, usize) {
    (grid.rows / 2, grid.cols / 2)
}

/// Distinct class cells on the (1,3,5)×(1,3,5) lattice, skipping the
/// center so no class collides with the marker.
fn class_cell(class_idx: usize, grid: &PatchGrid) -> (usize, usize) {
    const LATTICE: [(usize, usize); 8] = [
        (1, 1),
        (1, 3),
        (1, 5),
        (3, 1),
        (3, 5),
        (5, 1),
        (5, 3),
        (5, 5),
    ];
    let (r, c) = LATTICE[class_idx % LATTICE.len()];
    (r % grid.rows, c % grid.cols)
}

fn class_word(vocab: &Vocabulary, class_idx: usize) -> String {
    vocab.token(class_idx).to_string()
}

fn words_of(vocab: &Vocabulary, ids: &[usize], terminate: bool) -> Vec<String> {
    let mut out: Vec<String> = ids.iter().map(|&i| vocab.token(i).to_string()).collect();
    if terminate {
        let last = out.last_mut().unwrap();
        last.push('.');
    }
    out
}

/// Generate `num_samples` planted samples. Deterministic in the seed.
pub fn generate_planted_dataset(
    num_samples: usize,
    grid: &PatchGrid,
    vocab: &Vocabulary,
    seed: u64,
) -> Vec<PlantedSample> {
    assert!(
        vocab.len() >= 16,
        "generator needs 8 class words plus 8 scaffold words"
    );
    assert!(grid.divides(ToyImage::SIDE, ToyImage::SIDE));
    let mut rng = StdRng::seed_from_u64(seed);
    let ph = ToyImage::SIDE / grid.rows;
    let pw = ToyImage::SIDE / grid.cols;
    let mut out = Vec::with_capacity(num_samples);
    for idx in 0..num_samples {
        let class_idx = idx % NUM_CLASSES;
        let (cell_row, cell_col) = class_cell(class_idx, grid);
        let (marker_row, marker_col) = marker_cell(grid);

        // image: low background noise, a solid marker block at the center
        // cell (present in every image), and a striped texture at the
        // class cell whose frequency and orientation encode the class
        let mut image = ToyImage::zeros();
        for r in 0..ToyImage::SIDE {
            for c in 0..ToyImage::SIDE {
                image.set(r, c, rng.gen_range(0.0..0.1));
            }
        }
        for r in marker_row * ph..(marker_row + 1) * ph {
            for c in marker_col * pw..(marker_col + 1) * pw {
                image.set(r, c, 0.9);
            }
        }
        let freq = (1 + class_idx % 4) as f64;
        let horizontal = class_idx < 4;
        for r in cell_row * ph..(cell_row + 1) * ph {
            for c in cell_col * pw..(cell_col + 1) * pw {
                let t = if horizontal {
                    (c - cell_col * pw) as f64 / pw as f64
                } else {
                    (r - cell_row * ph) as f64 / ph as f64
                };
                let stripe = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * t).sin();
                image.set(r, c, stripe);
            }
        }

        // transcript: generic + class sentence in random order, 300 ms words
        let generic = words_of(vocab, &[8, 9, 10, 11, 12], true);
        let class_sentence = words_of(vocab, &[8, class_idx, 13], true);
        let class_first = rng.gen_bool(0.5);
        let ordered: Vec<&[String]> = if class_first {
            vec![&class_sentence, &generic]
        } else {
            vec![&generic, &class_sentence]
        };
        let planted_sentence = usize::from(!class_first);
        let generic_sentence = usize::from(class_first);
        let mut words = Vec::new();
        let mut t = 0i64;
        for sent in ordered {
            for w in sent {
                words.push(TimedWord {
                    text: w.clone(),
                    t_start_ms: t,
                    t_end_ms: t + 300,
                });
                t += 300;
            }
        }
        let sentences = segment_sentences(&words);

        // fixations: dwells on the class cell during the class sentence
        // and (usually) on the marker during the generic sentence; the
        // occasional generic sentence loses its gaze, like a blink would
        let jitter = (pw.min(ph) as f64 / 2.0 - 8.0).max(0.0);
        let mut fixations = Vec::new();
        let mut dwell = |span: &crate::session::SentenceSpan,
                         cell: (usize, usize),
                         count: i64,
                         rng: &mut StdRng,
                         fixations: &mut Vec<FixationEvent>| {
            let cx = (cell.1 * pw + pw / 2) as f64;
            let cy = (cell.0 * ph + ph / 2) as f64;
            let interval = span.t_end_ms - span.t_start_ms;
            for f in 0..count {
                fixations.push(FixationEvent {
                    t_ms: span.t_start_ms + f * interval / count + 10,
                    x: (cx + rng.gen_range(-jitter..=jitter)) / ToyImage::SIDE as f64,
                    y: (cy + rng.gen_range(-jitter..=jitter)) / ToyImage::SIDE as f64,
                    dur_ms: rng.gen_range(100..300),
                });
            }
        };
        let generic_has_gaze = rng.gen_bool(0.8);
        for s_idx in 0..sentences.len() {
            if s_idx == planted_sentence {
                dwell(&sentences[s_idx], (cell_row, cell_col), 5, &mut rng, &mut fixations);
            } else if s_idx == generic_sentence && generic_has_gaze {
                dwell(&sentences[s_idx], (marker_row, marker_col), 3, &mut rng, &mut fixations);
            }
        }
        fixations.sort_by_key(|f| f.t_ms);

        let id = format!("planted{idx:05}");
        let session = GazeSession {
            image_path: format!("images/{id}.pgm"),
            image_width: ToyImage::SIDE as u32,
            image_height: ToyImage::SIDE as u32,
            fixations,
            words,
            sentences,
        };
        out.push(PlantedSample {
            raw: RawSample {
                id,
                image,
                session,
                class_idx: Some(class_idx),
                class_name: Some(class_word(vocab, class_idx)),
            },
            class_idx,
            planted_sentence,
            planted_patch: cell_row * grid.cols + cell_col,
        });
    }
    out
}

/// Prompt bank matching the planted class sentences (two prompts per
/// class: the full sentence and a short form).
pub fn planted_prompt_bank(vocab: &Vocabulary) -> PromptBank {
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    let mut prompts = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        classes.push(class_word(vocab, c));
        prompts.push(vec![
            words_of(vocab, &[8, c, 13], true).join(" "),
            words_of(vocab, &[c, 13], true).join(" "),
        ]);
    }
    PromptBank { classes, prompts }
}
