//! Response pattern enumeration and data ingestion.
//!
//! All 2^J binary patterns are kept in a fixed canonical order: index r is
//! the binary expansion of r with the first item as the most significant bit,
//! so the last item varies fastest. Counts are real-valued so the same
//! pipeline serves observed samples and population proportions.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{LcaError, Result};

/// Largest supported item count; 2^20 patterns is the practical table limit.
pub const MAX_ITEMS: usize = 20;

/// The full table of 2^J binary response patterns in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternTable {
    items: usize,
}

impl PatternTable {
    pub fn new(items: usize) -> Result<Self> {
        if !(1..=MAX_ITEMS).contains(&items) {
            return Err(LcaError::Bounds {
                what: "item count J",
                got: items.to_string(),
                allowed: "1..=20",
            });
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> usize {
        self.items
    }

    /// Number of patterns R = 2^J.
    pub fn len(&self) -> usize {
        1usize << self.items
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Level of item `k` (0-based) in pattern `r`.
    #[inline]
    pub fn level(&self, r: usize, k: usize) -> u8 {
        ((r >> (self.items - 1 - k)) & 1) as u8
    }

    /// Pattern index as a 0/1 tuple.
    pub fn pattern(&self, r: usize) -> Vec<u8> {
        (0..self.items).map(|k| self.level(r, k)).collect()
    }

    /// Canonical index of a 0/1 tuple.
    pub fn index_of(&self, pattern: &[u8]) -> Result<usize> {
        if pattern.len() != self.items {
            return Err(LcaError::Dimension(format!(
                "pattern length {} does not match J={}",
                pattern.len(),
                self.items
            )));
        }
        let mut r = 0usize;
        for &b in pattern {
            if b > 1 {
                return Err(LcaError::Validation(format!("non-binary level {b}")));
            }
            r = (r << 1) | b as usize;
        }
        Ok(r)
    }
}

/// Enumerate all 2^J patterns in canonical order.
pub fn enumerate_patterns(items: usize) -> Result<PatternTable> {
    PatternTable::new(items)
}

/// Observed (or population) pattern counts over the full table.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    pub table: PatternTable,
    /// Length-R vector of nonnegative counts; absent patterns hold 0.
    pub counts: DVector<f64>,
    /// Total count N = sum of `counts`.
    pub n_total: f64,
    /// Item names from the input header (empty when constructed in memory).
    pub item_names: Vec<String>,
}

impl ObservedData {
    pub fn from_counts(items: usize, counts: DVector<f64>) -> Result<Self> {
        let table = PatternTable::new(items)?;
        if counts.len() != table.len() {
            return Err(LcaError::Dimension(format!(
                "counts length {} does not match R={}",
                counts.len(),
                table.len()
            )));
        }
        if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(LcaError::Validation(
                "counts must be finite and nonnegative".into(),
            ));
        }
        let n_total = counts.sum();
        Ok(Self {
            table,
            counts,
            n_total,
            item_names: Vec::new(),
        })
    }

    /// Population proportions as data: counts sum to 1.
    pub fn from_proportions(items: usize, probs: DVector<f64>) -> Result<Self> {
        let data = Self::from_counts(items, probs)?;
        if (data.n_total - 1.0).abs() > 1e-8 {
            return Err(LcaError::Validation(format!(
                "proportions sum to {} rather than 1",
                data.n_total
            )));
        }
        Ok(data)
    }

    /// Aggregate raw 0/1 rows into the full count table.
    pub fn from_raw_rows(items: usize, rows: &[Vec<u8>]) -> Result<Self> {
        let table = PatternTable::new(items)?;
        let mut counts = DVector::zeros(table.len());
        for row in rows {
            let r = table.index_of(row)?;
            counts[r] += 1.0;
        }
        let mut data = Self::from_counts(items, counts)?;
        data.item_names = Vec::new();
        Ok(data)
    }

    /// Observed count of the (1,1) cell in the marginal crosstable of a
    /// 1-based item pair.
    pub fn pair_count_11(&self, pair: (usize, usize)) -> f64 {
        let (j, k) = (pair.0 - 1, pair.1 - 1);
        (0..self.table.len())
            .filter(|&r| self.table.level(r, j) == 1 && self.table.level(r, k) == 1)
            .map(|r| self.counts[r])
            .sum()
    }
}

/// Draw multinomial counts over the pattern probabilities by inverse-CDF
/// lookup, one observation at a time (deterministic given the RNG stream).
pub(crate) fn multinomial_counts<R: rand::Rng>(
    probs: &DVector<f64>,
    n: u64,
    rng: &mut R,
) -> DVector<f64> {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs.iter() {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    let mut counts = DVector::zeros(probs.len());
    for _ in 0..n {
        let u: f64 = rng.gen_range(0.0..total);
        let idx = cdf.partition_point(|&c| c <= u).min(probs.len() - 1);
        counts[idx] += 1.0;
    }
    counts
}

/// Input mode for `ingest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestMode {
    /// One row per observation, J columns of {0,1}.
    Raw,
    /// J pattern columns plus a column named exactly `count`.
    Aggregated,
}

/// Detect the mode from a header: a column named exactly `count` means
/// aggregated data.
pub fn detect_mode(headers: &[String]) -> IngestMode {
    if headers.iter().any(|h| h == "count") {
        IngestMode::Aggregated
    } else {
        IngestMode::Raw
    }
}

/// Read a CSV file (UTF-8, comma-separated, first row header) into the full
/// pattern-count table.
pub fn ingest(path: &Path, mode: IngestMode) -> Result<ObservedData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();

    let count_col = match mode {
        IngestMode::Raw => None,
        IngestMode::Aggregated => Some(
            headers
                .iter()
                .position(|h| h == "count")
                .ok_or_else(|| LcaError::Schema("aggregated file has no `count` column".into()))?,
        ),
    };
    let item_cols: Vec<usize> = (0..headers.len()).filter(|i| Some(*i) != count_col).collect();
    let items = item_cols.len();
    let table = PatternTable::new(items)?;
    let mut counts = DVector::zeros(table.len());

    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 2; // 1-based, after the header
        if record.len() != headers.len() {
            return Err(LcaError::Schema(format!(
                "row {} has {} columns, header has {}",
                row_no,
                record.len(),
                headers.len()
            )));
        }
        let mut pattern = Vec::with_capacity(items);
        for &c in &item_cols {
            let cell = &record[c];
            match cell {
                "0" => pattern.push(0u8),
                "1" => pattern.push(1u8),
                other => {
                    return Err(LcaError::Parse {
                        row: row_no,
                        column: headers[c].clone(),
                        message: format!("non-binary cell `{other}`"),
                    })
                }
            }
        }
        let r = table.index_of(&pattern)?;
        match count_col {
            None => counts[r] += 1.0,
            Some(c) => {
                let value: f64 = record[c].parse().map_err(|_| LcaError::Parse {
                    row: row_no,
                    column: "count".into(),
                    message: format!("cannot parse count `{}`", &record[c]),
                })?;
                if value < 0.0 {
                    return Err(LcaError::Validation(format!(
                        "negative count {} at row {}",
                        value, row_no
                    )));
                }
                counts[r] += value;
            }
        }
    }

    let mut data = ObservedData::from_counts(items, counts)?;
    data.item_names = item_cols.iter().map(|&c| headers[c].clone()).collect();
    if data.n_total <= 0.0 {
        return Err(LcaError::Validation("total count is zero".into()));
    }
    Ok(data)
}
