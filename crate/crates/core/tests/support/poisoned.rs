use std::cell::Cell;
use std::rc::Rc;

use dmole_core::data::{Batch, Dataset, TrainData};

/// Training split that turns to NaN and counts every read once poisoned.
pub struct Poisoned {
    pub inner: Dataset,
    pub poisoned: Rc<Cell<bool>>,
    pub reads: Rc<Cell<usize>>,
    pub late_reads: Rc<Cell<usize>>,
}

impl TrainData for Poisoned {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn batch(&self, indices: &[usize]) -> Batch {
        let mut b = self.inner.batch(indices);
        if self.poisoned.get() {
            self.late_reads.set(self.late_reads.get() + 1);
            b.vision.iter_mut().for_each(|v| *v = f64::NAN);
            b.text.iter_mut().for_each(|v| *v = f64::NAN);
        } else {
            self.reads.set(self.reads.get() + 1);
        }
        b
    }
}
