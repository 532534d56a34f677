//! Score matrix bookkeeping and the AVG / Last / BWT summaries.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rows[t][i]` is the score on task `i` after training stage `t` (0-based
/// here, so stage `t` has trained tasks `0..=t`). The zero-shot row holds the
/// scores of the untouched backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n: usize,
    pub zero_shot: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub avg: f64,
    pub last: f64,
    /// `None` for the final task.
    pub bwt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_task: Vec<TaskMetrics>,
    pub mean_avg: f64,
    pub mean_last: f64,
    /// Mean over the tasks with a defined BWT; `None` when N == 1.
    pub mean_bwt: Option<f64>,
}

impl ScoreMatrix {
    pub fn new(n: usize) -> Self {
        ScoreMatrix {
            n,
            zero_shot: vec![0.0; n],
            rows: Vec::new(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut m = ScoreMatrix::new(n);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.n {
            return Err(Error::contract(format!("score row has {} entries, expected {}", row.len(), self.n)));
        }
        if self.rows.len() == self.n {
            return Err(Error::contract("score matrix already complete"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t][i]
    }

    fn check(&self, i: usize) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::contract("score matrix is incomplete"));
        }
        if i >= self.n {
            return Err(Error::contract(format!("task index {i} out of range for {} tasks", self.n)));
        }
        Ok(())
    }

    /// Mean of column `i` over all stages.
    pub fn avg(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.rows.iter().map(|r| r[i]).sum::<f64>() / self.n as f64)
    }

    /// Score on task `i` after the final stage.
    pub fn last(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.rows[self.n - 1][i])
    }

    /// Mean change of task `i`'s score relative to the stage right after it
    /// was trained. Undefined for the final task.
    pub fn bwt(&self, i: usize) -> Result<Option<f64>> {
        self.check(i)?;
        if i + 1 == self.n {
            return Ok(None);
        }
        let diag = self.rows[i][i];
        let later = &self.rows[i + 1..];
        Ok(Some(
            later.iter().map(|r| r[i] - diag).sum::<f64>() / later.len() as f64,
        ))
    }

    pub fn summary(&self) -> Result<Summary> {
        if self.n == 0 {
            return Err(Error::contract("empty score matrix"));
        }
        let per_task = (0..self.n)
            .map(|i| {
                Ok(TaskMetrics {
                    avg: self.avg(i)?,
                    last: self.last(i)?,
                    bwt: self.bwt(i)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.n as f64;
        let bwts: Vec<f64> = per_task.iter().filter_map(|m| m.bwt).collect();
        Ok(Summary {
            mean_avg: per_task.iter().map(|m| m.avg).sum::<f64>() / n,
            mean_last: per_task.iter().map(|m| m.last).sum::<f64>() / n,
            mean_bwt: (!bwts.is_empty()).then(|| bwts.iter().sum::<f64>() / bwts.len() as f64),
            per_task,
        })
    }
}

/// `"-"` for an undefined value, otherwise fixed 4 decimals.
pub fn format_metric(v: Option<f64>) -> alloc::string::String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => alloc::string::String::from("-"),
    }
}
