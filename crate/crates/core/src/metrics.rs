//! Error rates and expected calibration error.

use std::io::Write;

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

fn mismatch_rate<T: PartialEq>(estimated: &[T], truth: &[T], what: &str) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{what}: {} estimates for {} reference values",
            estimated.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid(format!("{what}: nothing to compare")));
    }
    let errors = estimated.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / truth.len() as f64)
}

/// Fraction of (user, time) slots whose symbol decision is wrong.
pub fn ser(estimated: &[usize], truth: &[usize]) -> Result<f64> {
    mismatch_rate(estimated, truth, "symbol error rate")
}

/// Fraction of mismatched bits.
pub fn ber(estimated: &[u8], truth: &[u8]) -> Result<f64> {
    mismatch_rate(estimated, truth, "bit error rate")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    /// Probability assigned to the hard decision.
    pub confidence: f64,
    pub correct: bool,
    pub user: usize,
    pub time: usize,
}

/// Records for decisions laid out `[i * users + k]`.
pub fn prediction_records(
    decisions: &[usize],
    confidences: &[f64],
    truth: &[usize],
    users: usize,
) -> Result<Vec<PredictionRecord>> {
    if decisions.len() != truth.len() || confidences.len() != truth.len() || users == 0 {
        return Err(Error::invalid("decisions, confidences and labels disagree in length"));
    }
    Ok(decisions
        .iter()
        .zip(confidences)
        .zip(truth)
        .enumerate()
        .map(|(n, ((&d, &c), &t))| PredictionRecord {
            confidence: c,
            correct: d == t,
            user: n % users,
            time: n / users,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BinStats {
    pub count: usize,
    pub correct: usize,
    pub confidence_sum: f64,
}

impl BinStats {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn confidence(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.confidence_sum / self.count as f64
        }
    }
}

/// Confidence histogram over `R` equal bins `((r-1)/R, r/R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityTable {
    pub bins: Vec<BinStats>,
}

/// Bin of `confidence` among `bins` left-open, right-closed intervals.
/// Zero joins the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let r = bins as f64;
    let mut idx = ((confidence * r).ceil() as usize).clamp(1, bins);
    while idx > 1 && confidence <= (idx - 1) as f64 / r {
        idx -= 1;
    }
    while idx < bins && confidence > idx as f64 / r {
        idx += 1;
    }
    idx - 1
}

impl ReliabilityTable {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("at least one confidence bin is required"));
        }
        Ok(Self {
            bins: vec![BinStats::default(); bins],
        })
    }

    pub fn from_records(records: &[PredictionRecord], bins: usize) -> Result<Self> {
        let mut table = Self::new(bins)?;
        for r in records {
            table.add(r)?;
        }
        Ok(table)
    }

    pub fn add(&mut self, record: &PredictionRecord) -> Result<()> {
        let c = record.confidence;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0,1]")));
        }
        let idx = bin_index(c, self.bins.len());
        let b = &mut self.bins[idx];
        b.count += 1;
        b.correct += usize::from(record.correct);
        b.confidence_sum += c;
        Ok(())
    }

    /// Sums counts and count-weighted statistics of two tables.
    pub fn merge(&mut self, other: &ReliabilityTable) -> Result<()> {
        if other.bins.len() != self.bins.len() {
            return Err(Error::invalid("cannot merge tables with different bin counts"));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.count += b.count;
            a.correct += b.correct;
            a.confidence_sum += b.confidence_sum;
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn ece(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("expected calibration error of an empty record set"));
        }
        let mut e = 0.0;
        for b in self.bins.iter().filter(|b| b.count > 0) {
            e += (b.count as f64 / total as f64) * (b.accuracy() - b.confidence()).abs();
        }
        Ok(e)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::invalid(format!("reliability CSV: {e}"));
        w.write_record(["bin_low", "bin_high", "count", "acc", "conf"]).map_err(io)?;
        let r = self.bins.len() as f64;
        for (i, b) in self.bins.iter().enumerate() {
            w.write_record([
                (i as f64 / r).to_string(),
                ((i + 1) as f64 / r).to_string(),
                b.count.to_string(),
                b.accuracy().to_string(),
                b.confidence().to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("reliability CSV: {e}")))
    }
}

/// Expected calibration error over `bins` bins, with its table.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<(f64, ReliabilityTable)> {
    if records.is_empty() {
        return Err(Error::invalid("expected calibration error of an empty record set"));
    }
    let table = ReliabilityTable::from_records(records, bins)?;
    Ok((table.ece()?, table))
}
