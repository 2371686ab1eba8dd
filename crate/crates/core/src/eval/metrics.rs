use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::ser::{Serialize, SerializeStruct, Serializer};

use super::{EvalError, EvalRecord, Label};

pub type Rational = Ratio<u64>;

fn ratio(num: u64, den: u64) -> Rational {
    if den == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(num, den)
    }
}

pub fn to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `r` as a percentage with two decimals.
pub fn percent(r: Rational) -> String {
    format!("{:.2}", to_f64(r) * 100.0)
}

/// Confusion counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Yes, Label::Yes) => self.tp += 1,
            (Label::Yes, Label::No) => self.fp += 1,
            (Label::No, Label::No) => self.tn += 1,
            (Label::No, Label::Yes) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.total();
        let accuracy = ratio(self.tp + self.tn, n);
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        // 2pr/(p+r) simplifies to 2tp/(2tp+fp+fn).
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        MetricsReport { counts: *self, n_records: n, accuracy, precision, recall, f1, acc_plus: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub counts: Confusion,
    pub n_records: u64,
    pub accuracy: Rational,
    pub precision: Rational,
    pub recall: Rational,
    pub f1: Rational,
    pub acc_plus: Option<Rational>,
}

impl MetricsReport {
    pub fn yes_ratio(&self) -> Rational {
        ratio(self.counts.tp + self.counts.fp, self.n_records)
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("MetricsReport", 11)?;
        st.serialize_field("n_records", &self.n_records)?;
        st.serialize_field("tp", &self.counts.tp)?;
        st.serialize_field("fp", &self.counts.fp)?;
        st.serialize_field("tn", &self.counts.tn)?;
        st.serialize_field("fn", &self.counts.fn_)?;
        st.serialize_field("accuracy", &to_f64(self.accuracy))?;
        st.serialize_field("precision", &to_f64(self.precision))?;
        st.serialize_field("recall", &to_f64(self.recall))?;
        st.serialize_field("f1", &to_f64(self.f1))?;
        st.serialize_field("yes_ratio", &to_f64(self.yes_ratio()))?;
        st.serialize_field("acc_plus", &self.acc_plus.map(to_f64))?;
        st.end()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "acc {} | prec {} | rec {} | f1 {} | yes {} | n {}",
            percent(self.accuracy),
            percent(self.precision),
            percent(self.recall),
            percent(self.f1),
            percent(self.yes_ratio()),
            self.n_records
        )?;
        if let Some(ap) = self.acc_plus {
            write!(f, " | acc+ {}", percent(ap))?;
        }
        Ok(())
    }
}

/// Exact confusion-matrix metrics of `predictions` against the record labels.
pub fn evaluate_pope(predictions: &[Label], records: &[EvalRecord]) -> Result<MetricsReport, EvalError> {
    if predictions.len() != records.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), records: records.len() });
    }
    let mut c = Confusion::default();
    for (p, r) in predictions.iter().zip(records) {
        c.add(*p, r.label);
    }
    Ok(c.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmeScores {
    pub acc: Rational,
    pub acc_plus: Rational,
}

impl fmt::Display for MmeScores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {}", percent(self.acc), percent(self.acc_plus))
    }
}

/// Per-question accuracy and per-image accuracy+ (both questions right).
pub fn evaluate_mme(per_image: &[(bool, bool)]) -> Result<MmeScores, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::Empty);
    }
    let images = per_image.len() as u64;
    let correct: u64 = per_image.iter().map(|(a, b)| u64::from(*a) + u64::from(*b)).sum();
    let both = per_image.iter().filter(|(a, b)| *a && *b).count() as u64;
    Ok(MmeScores { acc: ratio(correct, 2 * images), acc_plus: ratio(both, images) })
}

/// Group per-question correctness into per-image pairs, in first-seen image order.
pub fn mme_pairs(records: &[EvalRecord], correct: &[bool]) -> Result<Vec<(bool, bool)>, EvalError> {
    if records.len() != correct.len() {
        return Err(EvalError::LengthMismatch { predictions: correct.len(), records: records.len() });
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (r, ok) in records.iter().zip(correct) {
        let g = groups.entry(r.image_id.as_str()).or_default();
        if g.is_empty() {
            order.push(r.image_id.as_str());
        }
        g.push(*ok);
    }
    order
        .into_iter()
        .map(|id| match groups[id].as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(EvalError::MalformedPair(id.to_string())),
        })
        .collect()
}
