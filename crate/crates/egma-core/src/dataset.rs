//! Dataset assembly: session manifests, on-disk splits, and the pipeline
//! from raw sessions to training samples (tokenized sentences plus gaze
//! matrices).
//!
//! Split layout on disk:
//!
//! ```text
//! split/
//!   manifest.csv     one line per session:
//!                    session_id,image_path,fixation_csv,transcript_csv,width,height
//!   labels.csv       header session_id,class_idx,class_name (optional)
//!   vocab.txt        one token per line
//!   images/          224×224 binary PGM per session
//!   fixations/       fixation CSV per session
//!   transcripts/     transcript CSV per session
//! ```

use std::path::Path;

use crate::encoders::{ToyImage, Vocabulary};
use crate::error::{EgmaError, Result};
use crate::heatmap::{build_gaze_matrices, render_heatmap, GazeMatrices, Heatmap, PatchGrid};
use crate::session::{
    fixation_csv, fixations_in_interval, parse_session, transcript_csv, GazeSession,
};

/// One fully materialized training sample.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: ToyImage,
    /// Token ids per sentence, in transcript order.
    pub sentences: Vec<Vec<usize>>,
    pub gaze: Option<GazeMatrices>,
    pub class_idx: Option<usize>,
}

/// An in-memory dataset tied to the vocabulary and grid it was built with.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub vocab: Vocabulary,
    pub grid: PatchGrid,
}

/// A sample before preprocessing: the image plus its parsed session.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub id: String,
    pub image: ToyImage,
    pub session: GazeSession,
    pub class_idx: Option<usize>,
    pub class_name: Option<String>,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub session_id: String,
    pub image_path: String,
    pub fixation_csv: String,
    pub transcript_csv: String,
    pub width: u32,
    pub height: u32,
}

pub fn parse_manifest(text: &str, source: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(EgmaError::MalformedRow {
                source: source.to_string(),
                line: idx + 1,
                reason: format!("expected 6 columns, got {}", cols.len()),
            });
        }
        let dim = |s: &str| -> Result<u32> {
            s.trim().parse().map_err(|_| EgmaError::MalformedRow {
                source: source.to_string(),
                line: idx + 1,
                reason: format!("bad dimension {s:?}"),
            })
        };
        entries.push(ManifestEntry {
            session_id: cols[0].trim().to_string(),
            image_path: cols[1].trim().to_string(),
            fixation_csv: cols[2].trim().to_string(),
            transcript_csv: cols[3].trim().to_string(),
            width: dim(cols[4])?,
            height: dim(cols[5])?,
        });
    }
    Ok(entries)
}

pub fn manifest_line(e: &ManifestEntry) -> String {
    format!(
        "{},{},{},{},{},{}",
        e.session_id, e.image_path, e.fixation_csv, e.transcript_csv, e.width, e.height
    )
}

/// Render the per-sentence heatmaps of a session at 224×224.
pub fn session_heatmaps(session: &GazeSession, sigma_frac: f64) -> Vec<Heatmap> {
    session
        .sentences
        .iter()
        .map(|span| {
            let fx = fixations_in_interval(session, span);
            render_heatmap(&fx, (ToyImage::SIDE, ToyImage::SIDE), sigma_frac)
        })
        .collect()
}

/// Preprocess one raw sample: tokenize its sentences and, unless the
/// session is gaze-free, build its gaze matrices.
pub fn to_train_sample(
    raw: &RawSample,
    vocab: &Vocabulary,
    grid: &PatchGrid,
    sigma_frac: f64,
) -> Result<TrainSample> {
    let sentences = raw
        .session
        .sentences
        .iter()
        .map(|span| vocab.tokenize(&span.text))
        .collect::<Result<Vec<_>>>()?;
    let gaze = if raw.session.is_gaze_free() {
        None
    } else {
        Some(build_gaze_matrices(&session_heatmaps(&raw.session, sigma_frac), grid)?)
    };
    Ok(TrainSample {
        id: raw.id.clone(),
        image: raw.image.clone(),
        sentences,
        gaze,
        class_idx: raw.class_idx,
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| EgmaError::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| EgmaError::io(path.display().to_string(), e))
}

/// Write raw samples as an on-disk split.
pub fn write_split(dir: &Path, raws: &[RawSample], vocab: &Vocabulary) -> Result<()> {
    for sub in ["images", "fixations", "transcripts"] {
        std::fs::create_dir_all(dir.join(sub))
            .map_err(|e| EgmaError::io(dir.join(sub).display().to_string(), e))?;
    }
    let mut manifest = String::new();
    let mut labels = String::from("session_id,class_idx,class_name\n");
    let mut any_label = false;
    for raw in raws {
        let id = &raw.id;
        write_file(&dir.join(format!("images/{id}.pgm")), &raw.image.to_pgm())?;
        write_file(
            &dir.join(format!("fixations/{id}.csv")),
            fixation_csv(&raw.session.fixations).as_bytes(),
        )?;
        write_file(
            &dir.join(format!("transcripts/{id}.csv")),
            transcript_csv(&raw.session.words).as_bytes(),
        )?;
        manifest.push_str(&manifest_line(&ManifestEntry {
            session_id: id.clone(),
            image_path: format!("images/{id}.pgm"),
            fixation_csv: format!("fixations/{id}.csv"),
            transcript_csv: format!("transcripts/{id}.csv"),
            width: ToyImage::SIDE as u32,
            height: ToyImage::SIDE as u32,
        }));
        manifest.push('\n');
        if let (Some(ci), Some(cn)) = (raw.class_idx, raw.class_name.as_ref()) {
            labels.push_str(&format!("{id},{ci},{cn}\n"));
            any_label = true;
        }
    }
    write_file(&dir.join("manifest.csv"), manifest.as_bytes())?;
    if any_label {
        write_file(&dir.join("labels.csv"), labels.as_bytes())?;
    }
    write_file(&dir.join("vocab.txt"), vocab.serialize().as_bytes())?;
    Ok(())
}

fn parse_labels(text: &str, source: &str) -> Result<Vec<(String, usize, String)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue; // header
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(EgmaError::MalformedRow {
                source: source.to_string(),
                line: idx + 1,
                reason: format!("expected 3 columns, got {}", cols.len()),
            });
        }
        let ci: usize = cols[1].trim().parse().map_err(|_| EgmaError::MalformedRow {
            source: source.to_string(),
            line: idx + 1,
            reason: "bad class index".to_string(),
        })?;
        out.push((cols[0].trim().to_string(), ci, cols[2].trim().to_string()));
    }
    Ok(out)
}

/// Load an on-disk split, running the full preprocessing pipeline.
pub fn load_split(dir: &Path, grid: &PatchGrid, sigma_frac: f64) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.csv");
    let entries = parse_manifest(&read_to_string(&manifest_path)?, &manifest_path.display().to_string())?;
    let vocab = Vocabulary::parse(&read_to_string(&dir.join("vocab.txt"))?);
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        parse_labels(&read_to_string(&labels_path)?, &labels_path.display().to_string())?
    } else {
        Vec::new()
    };
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let session = parse_session(
            &dir.join(&e.fixation_csv),
            &dir.join(&e.transcript_csv),
            &e.image_path,
            (e.width, e.height),
        )?;
        let img_path = dir.join(&e.image_path);
        let bytes = std::fs::read(&img_path).map_err(|err| EgmaError::io(img_path.display().to_string(), err))?;
        let image = ToyImage::from_pgm(&bytes, &img_path.display().to_string())?;
        let class_idx = labels
            .iter()
            .find(|(id, _, _)| id == &e.session_id)
            .map(|(_, ci, _)| *ci);
        let raw = RawSample {
            id: e.session_id.clone(),
            image,
            session,
            class_idx,
            class_name: None,
        };
        samples.push(to_train_sample(&raw, &vocab, grid, sigma_frac)?);
    }
    Ok(Dataset {
        samples,
        vocab,
        grid: *grid,
    })
}

/// Class names recorded in a split's labels file, indexed by class_idx.
pub fn load_class_names(dir: &Path) -> Result<Vec<String>> {
    let labels_path = dir.join("labels.csv");
    let labels = parse_labels(&read_to_string(&labels_path)?, &labels_path.display().to_string())?;
    let max_idx = labels.iter().map(|(_, ci, _)| *ci).max().unwrap_or(0);
    let mut names = vec![String::new(); max_idx + 1];
    for (_, ci, cn) in labels {
        names[ci] = cn;
    }
    Ok(names)
}
