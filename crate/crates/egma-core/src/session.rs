//! Reading-session ingestion: fixation logs, word-timed transcripts,
//! sentence segmentation, and the assignment of fixations to sentence
//! time intervals.
//!
//! Intervals are half-open `[start, end)` so adjacent sentences stay
//! disjoint; fixations falling between sentences (silence gaps) have no
//! textual anchor and are dropped by the interval filter.

use std::ops::Range;
use std::path::Path;

use crate::error::{EgmaError, Result};

pub const FIXATION_HEADER: &str = "t_ms,x,y,dur_ms";
pub const TRANSCRIPT_HEADER: &str = "word,t_start_ms,t_end_ms";

/// One gaze dwell event. Coordinates are normalized to [0, 1]
/// regardless of source resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixationEvent {
    pub t_ms: i64,
    pub x: f64,
    pub y: f64,
    pub dur_ms: u32,
}

/// One transcript token with its utterance interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedWord {
    pub text: String,
    pub t_start_ms: i64,
    pub t_end_ms: i64,
}

/// A maximal run of words ending at a sentence terminator.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceSpan {
    pub text: String,
    pub word_range: Range<usize>,
    pub t_start_ms: i64,
    pub t_end_ms: i64,
}

/// One reading session: fixation stream, word-timed transcript, image
/// reference, and the derived sentence spans.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSession {
    pub image_path: String,
    pub image_width: u32,
    pub image_height: u32,
    pub fixations: Vec<FixationEvent>,
    pub words: Vec<TimedWord>,
    pub sentences: Vec<SentenceSpan>,
}

impl GazeSession {
    /// A session with no fixations at all (blink loss, tracker dropout).
    pub fn is_gaze_free(&self) -> bool {
        self.fixations.is_empty()
    }
}

fn malformed(source: &str, line: usize, reason: impl Into<String>) -> EgmaError {
    EgmaError::MalformedRow {
        source: source.to_string(),
        line,
        reason: reason.into(),
    }
}

/// Parse fixation CSV text (header `t_ms,x,y,dur_ms`).
pub fn parse_fixation_rows(text: &str, source: &str) -> Result<Vec<FixationEvent>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == FIXATION_HEADER => {}
        _ => return Err(malformed(source, 1, format!("expected header {FIXATION_HEADER:?}"))),
    }
    let mut events: Vec<FixationEvent> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(malformed(source, lineno, format!("expected 4 columns, got {}", cols.len())));
        }
        let t_ms: i64 = cols[0]
            .trim()
            .parse()
            .map_err(|_| malformed(source, lineno, "t_ms not an integer"))?;
        let x: f64 = cols[1]
            .trim()
            .parse()
            .map_err(|_| malformed(source, lineno, "x not a number"))?;
        let y: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| malformed(source, lineno, "y not a number"))?;
        let dur_ms: i64 = cols[3]
            .trim()
            .parse()
            .map_err(|_| malformed(source, lineno, "dur_ms not an integer"))?;
        if t_ms < 0 {
            return Err(malformed(source, lineno, "t_ms negative"));
        }
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(malformed(source, lineno, "x/y outside [0,1]"));
        }
        if dur_ms <= 0 || dur_ms > u32::MAX as i64 {
            return Err(malformed(source, lineno, "dur_ms not a positive integer"));
        }
        if let Some(prev) = events.last() {
            if t_ms < prev.t_ms {
                return Err(EgmaError::NonMonotonicTime {
                    source: source.to_string(),
                    line: lineno,
                });
            }
        }
        events.push(FixationEvent {
            t_ms,
            x,
            y,
            dur_ms: dur_ms as u32,
        });
    }
    Ok(events)
}

/// Parse transcript CSV text (header `word,t_start_ms,t_end_ms`).
/// Words must be sorted and non-overlapping in time.
pub fn parse_transcript_rows(text: &str, source: &str) -> Result<Vec<TimedWord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRANSCRIPT_HEADER => {}
        _ => {
            return Err(malformed(
                source,
                1,
                format!("expected header {TRANSCRIPT_HEADER:?}"),
            ))
        }
    }
    let mut words: Vec<TimedWord> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(malformed(source, lineno, format!("expected 3 columns, got {}", cols.len())));
        }
        let text = cols[0].trim().to_string();
        if text.is_empty() {
            return Err(malformed(source, lineno, "empty word"));
        }
        let t_start_ms: i64 = cols[1]
            .trim()
            .parse()
            .map_err(|_| malformed(source, lineno, "t_start_ms not an integer"))?;
        let t_end_ms: i64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| malformed(source, lineno, "t_end_ms not an integer"))?;
        if t_start_ms >= t_end_ms {
            return Err(malformed(source, lineno, "t_start_ms must precede t_end_ms"));
        }
        if let Some(prev) = words.last() {
            if t_start_ms < prev.t_end_ms {
                return Err(EgmaError::NonMonotonicTime {
                    source: source.to_string(),
                    line: lineno,
                });
            }
        }
        words.push(TimedWord {
            text,
            t_start_ms,
            t_end_ms,
        });
    }
    if words.is_empty() {
        return Err(EgmaError::EmptyTranscript {
            source: source.to_string(),
        });
    }
    Ok(words)
}

fn ends_sentence(word: &str) -> bool {
    matches!(word.chars().last(), Some('.') | Some('?') | Some('!'))
}

/// Split words into sentences: maximal runs ending at a token whose text
/// terminates with '.', '?', or '!'. A trailing run with no terminator
/// forms a final sentence. Every word belongs to exactly one sentence.
pub fn segment_sentences(words: &[TimedWord]) -> Vec<SentenceSpan> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, w) in words.iter().enumerate() {
        let is_last = i + 1 == words.len();
        if ends_sentence(&w.text) || is_last {
            let range = start..i + 1;
            let text = words[range.clone()]
                .iter()
                .map(|w| w.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            spans.push(SentenceSpan {
                text,
                word_range: range,
                t_start_ms: words[start].t_start_ms,
                t_end_ms: words[i].t_end_ms,
            });
            start = i + 1;
        }
    }
    spans
}

/// Fixations whose timestamp falls in the span's half-open interval
/// `[t_start_ms, t_end_ms)`. May be empty: a sentence spoken too fast for
/// the tracker, or lost to blinks, simply has no gaze.
pub fn fixations_in_interval(session: &GazeSession, span: &SentenceSpan) -> Vec<FixationEvent> {
    session
        .fixations
        .iter()
        .filter(|f| f.t_ms >= span.t_start_ms && f.t_ms < span.t_end_ms)
        .copied()
        .collect()
}

/// Parse a session from its fixation and transcript CSV files.
pub fn parse_session(
    fixation_file: &Path,
    transcript_file: &Path,
    image_path: &str,
    image_dims: (u32, u32),
) -> Result<GazeSession> {
    let fix_text = std::fs::read_to_string(fixation_file)
        .map_err(|e| EgmaError::io(fixation_file.display().to_string(), e))?;
    let tr_text = std::fs::read_to_string(transcript_file)
        .map_err(|e| EgmaError::io(transcript_file.display().to_string(), e))?;
    session_from_text(
        &fix_text,
        &fixation_file.display().to_string(),
        &tr_text,
        &transcript_file.display().to_string(),
        image_path,
        image_dims,
    )
}

/// In-memory variant of `parse_session`, used by tests and round-trips.
pub fn session_from_text(
    fixation_text: &str,
    fixation_source: &str,
    transcript_text: &str,
    transcript_source: &str,
    image_path: &str,
    image_dims: (u32, u32),
) -> Result<GazeSession> {
    let fixations = parse_fixation_rows(fixation_text, fixation_source)?;
    let words = parse_transcript_rows(transcript_text, transcript_source)?;
    let sentences = segment_sentences(&words);
    Ok(GazeSession {
        image_path: image_path.to_string(),
        image_width: image_dims.0,
        image_height: image_dims.1,
        fixations,
        words,
        sentences,
    })
}

/// Serialize fixations back to the CSV format `parse_fixation_rows` reads.
pub fn fixation_csv(fixations: &[FixationEvent]) -> String {
    let mut out = String::from(FIXATION_HEADER);
    out.push('\n');
    for f in fixations {
        out.push_str(&format!("{},{},{},{}\n", f.t_ms, f.x, f.y, f.dur_ms));
    }
    out
}

/// Serialize words back to the CSV format `parse_transcript_rows` reads.
pub fn transcript_csv(words: &[TimedWord]) -> String {
    let mut out = String::from(TRANSCRIPT_HEADER);
    out.push('\n');
    for w in words {
        out.push_str(&format!("{},{},{}\n", w.text, w.t_start_ms, w.t_end_ms));
    }
    out
}
