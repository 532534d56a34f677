//! Literal 1-based transcription of the AVG / Last / BWT definitions.

/// `a[t][i]` with t, i in 1..=n; index 0 is unused.
pub struct OneBased {
    n: usize,
    a: Vec<Vec<f64>>,
}

impl OneBased {
    pub fn new(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut a = vec![vec![f64::NAN; n + 1]; n + 1];
        for t in 1..=n {
            for i in 1..=n {
                a[t][i] = rows[t - 1][i - 1];
            }
        }
        OneBased { n, a }
    }

    pub fn avg(&self, i: usize) -> f64 {
        let mut s = 0.0;
        for t in 1..=self.n {
            s += self.a[t][i];
        }
        s / self.n as f64
    }

    pub fn last(&self, i: usize) -> f64 {
        self.a[self.n][i]
    }

    pub fn bwt(&self, i: usize) -> Option<f64> {
        if i == self.n {
            return None;
        }
        let mut s = 0.0;
        for t in i + 1..=self.n {
            s += self.a[t][i] - self.a[i][i];
        }
        Some(s / (self.n - i) as f64)
    }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(1.0)
}
