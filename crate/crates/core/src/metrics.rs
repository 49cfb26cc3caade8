//! Continual-learning metrics over a lower-triangular score matrix
//! `a[k][j]`: the score on task `j` after training through task `k`
//! (both 1-based, `j <= k`).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CoprError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

fn check_score(k: usize, j: usize, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CoprError::InvalidConfig(format!(
            "score a[{k}][{j}] = {v} outside [0, 1]"
        )));
    }
    Ok(())
}

impl ScoreMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from complete rows; row `k` (1-based) must have `k` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Append the next evaluation row.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len() + 1;
        if row.len() != k {
            return Err(CoprError::InvalidConfig(format!(
                "row {k} needs {k} scores, got {}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            check_score(k, j + 1, v)?;
        }
        self.rows.push(row.into_iter().map(Some).collect());
        Ok(())
    }

    pub fn set(&mut self, k: usize, j: usize, value: f64) -> Result<()> {
        if k == 0 || j == 0 || j > k {
            return Err(CoprError::InvalidConfig(format!(
                "a[{k}][{j}] is outside the lower triangle"
            )));
        }
        check_score(k, j, value)?;
        while self.rows.len() < k {
            let next = self.rows.len() + 1;
            self.rows.push(vec![None; next]);
        }
        self.rows[k - 1][j - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k.checked_sub(1)?)?.get(j.checked_sub(1)?)?.to_owned()
    }

    /// Number of evaluation points (rows).
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    /// Fully populated row `k`.
    pub fn row(&self, k: usize) -> Result<Vec<f64>> {
        k.checked_sub(1)
            .and_then(|i| self.rows.get(i))
            .and_then(|r| r.iter().copied().collect::<Option<Vec<_>>>())
            .ok_or(CoprError::IncompleteRow(k))
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            rows: self.rows.iter().take(k).cloned().collect(),
        }
    }

    /// CSV with header `k,j,score`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (k, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(score) = v {
                    w.serialize(ScoreRecord {
                        k: k + 1,
                        j: j + 1,
                        score: *score,
                    })
                    .map_err(csv_error)?;
                }
            }
        }
        w.flush().map_err(|e| CoprError::io("<score csv>", e))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut m = Self::new();
        for (i, rec) in csv::Reader::from_reader(reader).deserialize().enumerate() {
            let rec: ScoreRecord = rec.map_err(|e| CoprError::Malformed {
                line: i + 2,
                reason: e.to_string(),
            })?;
            m.set(rec.k, rec.j, rec.score)?;
        }
        Ok(m)
    }
}

fn csv_error(e: csv::Error) -> CoprError {
    CoprError::InvalidConfig(format!("csv: {e}"))
}

#[derive(Serialize, Deserialize)]
struct ScoreRecord {
    k: usize,
    j: usize,
    score: f64,
}

/// `AA_k = (1/k) Σ_{j≤k} a[k][j]`.
pub fn average_accuracy(m: &ScoreMatrix, k: usize) -> Result<f64> {
    let row = m.row(k)?;
    Ok(row.iter().sum::<f64>() / k as f64)
}

/// `AIA_k = (1/k) Σ_{i≤k} AA_i`.
pub fn average_incremental_accuracy(m: &ScoreMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(CoprError::IncompleteRow(0));
    }
    let mut total = 0.0;
    for i in 1..=k {
        total += average_accuracy(m, i)?;
    }
    Ok(total / k as f64)
}

fn check_history(m: &ScoreMatrix, k: usize) -> Result<()> {
    if k < 2 {
        return Err(CoprError::UndefinedAtFirstTask);
    }
    for i in 1..=k {
        m.row(i)?;
    }
    Ok(())
}

/// `FM_k = (1/(k−1)) Σ_{j<k} max_{i<k} (a[i][j] − a[k][j])`, the max taken
/// over the evaluation points where task `j` had been seen.
pub fn forgetting_measure(m: &ScoreMatrix, k: usize) -> Result<f64> {
    check_history(m, k)?;
    let current = m.row(k)?;
    let mut total = 0.0;
    for j in 1..k {
        let peak = (j..k)
            .map(|i| m.row(i).map(|r| r[j - 1]))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        total += peak - current[j - 1];
    }
    Ok(total / (k - 1) as f64)
}

/// `BWT_k = (1/(k−1)) Σ_{j<k} (a[k][j] − a[j][j])`.
pub fn backward_transfer(m: &ScoreMatrix, k: usize) -> Result<f64> {
    check_history(m, k)?;
    let current = m.row(k)?;
    let mut total = 0.0;
    for j in 1..k {
        total += current[j - 1] - m.row(j)?[j - 1];
    }
    Ok(total / (k - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    #[serde(rename = "AA")]
    pub aa: f64,
    #[serde(rename = "AIA")]
    pub aia: f64,
    #[serde(rename = "FM")]
    pub fm: Option<f64>,
    #[serde(rename = "BWT")]
    pub bwt: Option<f64>,
}

pub fn metrics_at(m: &ScoreMatrix, k: usize) -> Result<MetricsRow> {
    Ok(MetricsRow {
        k,
        aa: average_accuracy(m, k)?,
        aia: average_incremental_accuracy(m, k)?,
        fm: (k >= 2).then(|| forgetting_measure(m, k)).transpose()?,
        bwt: (k >= 2).then(|| backward_transfer(m, k)).transpose()?,
    })
}

/// Metrics at every evaluation point of a complete matrix.
pub fn summarize(m: &ScoreMatrix) -> Result<Vec<MetricsRow>> {
    (1..=m.len()).map(|k| metrics_at(m, k)).collect()
}

/// CSV with header `k,AA,AIA,FM,BWT`; FM and BWT are empty at `k = 1`.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| CoprError::io("<metrics csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed() {
        let m = ScoreMatrix::from_rows(vec![vec![0.8], vec![0.8, 0.6]]).unwrap();
        assert!((average_accuracy(&m, 2).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(average_accuracy(&m, 1).unwrap(), 0.8);
        assert!((average_incremental_accuracy(&m, 2).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(
            average_incremental_accuracy(&m, 1).unwrap(),
            average_accuracy(&m, 1).unwrap()
        );
        let ones = ScoreMatrix::from_rows(vec![vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(average_accuracy(&ones, 2).unwrap(), 1.0);
    }

    #[test]
    fn forgetting_and_transfer() {
        let decline = ScoreMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.5]]).unwrap();
        assert!((forgetting_measure(&decline, 2).unwrap() - 0.2).abs() < 1e-12);
        assert!((backward_transfer(&decline, 2).unwrap() + 0.2).abs() < 1e-12);
        let improve = ScoreMatrix::from_rows(vec![vec![0.7], vec![0.9, 0.5]]).unwrap();
        assert!((forgetting_measure(&improve, 2).unwrap() + 0.2).abs() < 1e-12);
        let flat = ScoreMatrix::from_rows(vec![vec![0.6], vec![0.6, 0.6], vec![0.6; 3]]).unwrap();
        assert_eq!(forgetting_measure(&flat, 3).unwrap(), 0.0);
        assert_eq!(backward_transfer(&flat, 3).unwrap(), 0.0);
        assert!(matches!(
            forgetting_measure(&flat, 1),
            Err(CoprError::UndefinedAtFirstTask)
        ));
        assert!(matches!(
            backward_transfer(&flat, 1),
            Err(CoprError::UndefinedAtFirstTask)
        ));
    }

    #[test]
    fn incomplete_rows() {
        let mut m = ScoreMatrix::new();
        m.set(2, 2, 0.5).unwrap();
        assert!(matches!(average_accuracy(&m, 2), Err(CoprError::IncompleteRow(2))));
        assert!(matches!(average_accuracy(&m, 1), Err(CoprError::IncompleteRow(1))));
        assert!(m.set(1, 2, 0.5).is_err());
        assert!(m.set(1, 1, 1.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = ScoreMatrix::from_rows(vec![vec![0.25], vec![0.5, 0.125]]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,j,score\n"));
        assert_eq!(ScoreMatrix::read_csv(buf.as_slice()).unwrap(), m);
        let mut out = Vec::new();
        write_metrics_csv(&summarize(&m).unwrap(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("k,AA,AIA,FM,BWT\n1,0.25,0.25,,\n"));
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..7).prop_flat_map(|n| {
            (1..=n)
                .map(|k| proptest::collection::vec(0.0f64..=1.0, k))
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn bounds(rows in matrix_strategy()) {
            let m = ScoreMatrix::from_rows(rows).unwrap();
            for r in summarize(&m).unwrap() {
                prop_assert!((0.0..=1.0).contains(&r.aa));
                prop_assert!((0.0..=1.0).contains(&r.aia));
                if let (Some(fm), Some(bwt)) = (r.fm, r.bwt) {
                    prop_assert!((-1.0..=1.0).contains(&fm));
                    prop_assert!((-1.0..=1.0).contains(&bwt));
                }
            }
        }

        #[test]
        fn future_rows_do_not_matter(rows in matrix_strategy(), extra in proptest::collection::vec(0.0f64..=1.0, 8)) {
            let m = ScoreMatrix::from_rows(rows.clone()).unwrap();
            let mut longer = m.clone();
            let next = rows.len() + 1;
            longer.push_row(extra[..next].to_vec()).unwrap();
            prop_assert_eq!(summarize(&m).unwrap(), summarize(&longer.truncated(rows.len())).unwrap());
            for k in 1..=rows.len() {
                prop_assert_eq!(metrics_at(&m, k).unwrap(), metrics_at(&longer, k).unwrap());
            }
        }

        #[test]
        fn fm_is_negative_bwt_under_monotone_decline(
            diag in proptest::collection::vec(0.5f64..=1.0, 6),
            drops in proptest::collection::vec(0.0f64..=0.08, 36),
            n in 2usize..7,
        ) {
            // a[k][j] = a[j][j] minus a cumulative, nondecreasing drop.
            let mut rows = Vec::new();
            for k in 1..=n {
                let row: Vec<f64> = (1..=k)
                    .map(|j| diag[j - 1] - drops[(j - 1) * 6..(j - 1) * 6 + (k - j)].iter().sum::<f64>())
                    .collect();
                rows.push(row);
            }
            let m = ScoreMatrix::from_rows(rows).unwrap();
            for k in 2..=n {
                prop_assert_eq!(forgetting_measure(&m, k).unwrap(), -backward_transfer(&m, k).unwrap());
            }
        }
    }
}
