//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so a gradient that is zero
    /// analytically must match within `tolerance * floor` absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates over tolerance whose `[x - h, x + h]` window straddles a
    /// kink (ReLU or a max-pool switch). Finite differences are no oracle there.
    pub non_smooth: usize,
    /// Over the remaining (smooth) coordinates.
    pub max_rel_error: f64,
    pub worst: Option<(ParamId, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.non_smooth += other.non_smooth;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Every element of every listed parameter.
pub fn all_coords(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter()
        .flat_map(|&id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect()
}

impl GradCheck {
    /// Compares the tape gradient of the scalar built by `f` against central
    /// differences at `coords`. `ids` are made trainable for the analytic pass
    /// and restored afterwards, values included.
    ///
    /// A coordinate over tolerance counts as non-smooth when its one-sided
    /// differences disagree by at least the mismatch: a kink inside the window
    /// makes them differ by about twice the central-difference error, while a
    /// wrong gradient leaves them close to each other.
    pub fn run<F>(&self, store: &mut ParamStore, ids: &[ParamId], coords: &[(ParamId, usize)], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let saved: Vec<(bool, Option<Vec<f64>>)> = ids
            .iter()
            .map(|&id| {
                let t = store.get(id);
                (t.requires_grad(), t.grad().map(<[f64]>::to_vec))
            })
            .collect();
        for &id in ids {
            let t = store.get_mut(id);
            t.set_requires_grad(true);
            t.zero_grad();
        }
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss, store)?;
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&(id, i)| store.get(id).grad().map_or(0.0, |g| g[i]))
            .collect();

        let eval = |store: &ParamStore| -> Result<f64> {
            let mut tape = Tape::no_grad();
            let v = f(&mut tape, store)?;
            Ok(tape.scalar(v))
        };
        let f0 = eval(store)?;
        let mut report = GradCheckReport::default();
        for (&(id, i), &a) in coords.iter().zip(&analytic) {
            let x = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = x + self.h;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[i] = x - self.h;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[i] = x;

            let n = (fp - fm) / (2.0 * self.h);
            let gap = libm::fabs(a - n);
            let one_sided = libm::fabs((fp - f0) / self.h - (f0 - fm) / self.h);
            let rel = gap / libm::fabs(a).max(libm::fabs(n)).max(self.floor);
            report.checked += 1;
            if rel > self.tolerance && one_sided >= gap {
                report.non_smooth += 1;
                continue;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((id, i));
            }
        }

        for (&id, (rg, grad)) in ids.iter().zip(saved) {
            let t = store.get_mut(id);
            t.set_requires_grad(rg);
            t.set_grad(grad)?;
        }
        Ok(report)
    }
}
