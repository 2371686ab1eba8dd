use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use super::{evaluate_pope, EvalError, EvalRecord, Label, MetricsReport};
use crate::pipeline::{binary_decision, PipelineTranscript};
use crate::score::Threshold;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: Threshold,
    pub report: MetricsReport,
}

fn index(transcripts: &[PipelineTranscript]) -> HashMap<(&str, &str), &PipelineTranscript> {
    transcripts
        .iter()
        .map(|t| ((t.header.image_id.as_deref().unwrap_or(""), t.header.instruction.as_str()), t))
        .collect()
}

/// Transcript answering each record, in record order.
pub fn match_transcripts<'a>(
    transcripts: &'a [PipelineTranscript],
    records: &[EvalRecord],
) -> Result<Vec<&'a PipelineTranscript>, EvalError> {
    let idx = index(transcripts);
    records
        .iter()
        .map(|r| {
            idx.get(&(r.image_id.as_str(), r.question.as_str())).copied().ok_or_else(|| {
                EvalError::MissingTranscript { image_id: r.image_id.clone(), question: r.question.clone() }
            })
        })
        .collect()
}

/// Re-score stored transcripts at every threshold in `grid`. No model calls.
pub fn sweep_lambda(
    transcripts: &[PipelineTranscript],
    grid: &[Threshold],
    records: &[EvalRecord],
) -> Result<Vec<SweepPoint>, EvalError> {
    let matched = match_transcripts(transcripts, records)?;
    for t in &matched {
        let Some(result) = &t.result else {
            return Err(EvalError::MissingScores { run_id: t.run_id().to_string(), object: "<unfinished run>".into() });
        };
        if result.short_circuited {
            continue;
        }
        if let Some(q) = &result.queried_object {
            if t.object(q).is_none() {
                return Err(EvalError::MissingScores { run_id: t.run_id().to_string(), object: q.clone() });
            }
        }
    }
    grid.iter()
        .map(|&threshold| {
            let preds: Vec<Label> = matched
                .iter()
                .zip(records)
                .map(|(t, r)| binary_decision(t, threshold).resolve(r.label))
                .collect();
            Ok(SweepPoint { threshold, report: evaluate_pope(&preds, records)? })
        })
        .collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl ClassStats {
    fn of(counts: &[usize], class: &'static str) -> Result<Self, EvalError> {
        if counts.is_empty() {
            return Err(EvalError::EmptyClass(class));
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { n: counts.len(), mean, std: var.sqrt() })
    }
}

impl fmt::Display for ClassStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttributeCountStats {
    pub existent: ClassStats,
    pub hallucinated: ClassStats,
}

impl fmt::Display for AttributeCountStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "existent      {} (n={})", self.existent, self.existent.n)?;
        write!(f, "hallucinated  {} (n={})", self.hallucinated, self.hallucinated.n)
    }
}

pub fn count_stats(existent: &[usize], hallucinated: &[usize]) -> Result<AttributeCountStats, EvalError> {
    Ok(AttributeCountStats {
        existent: ClassStats::of(existent, "existent")?,
        hallucinated: ClassStats::of(hallucinated, "hallucinated")?,
    })
}

/// Attribute counts split by ground truth. `exists(image_id, object)` answers
/// whether the object is really in the image; `None` skips the object.
pub fn attribute_count_stats<F>(transcripts: &[PipelineTranscript], exists: F) -> Result<AttributeCountStats, EvalError>
where
    F: Fn(&str, &str) -> Option<bool>,
{
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for t in transcripts {
        let image = t.header.image_id.as_deref().unwrap_or("");
        for o in &t.objects {
            match exists(image, &o.name) {
                Some(true) => real.push(o.n_attributes()),
                Some(false) => fake.push(o.n_attributes()),
                None => {}
            }
        }
    }
    count_stats(&real, &fake)
}
