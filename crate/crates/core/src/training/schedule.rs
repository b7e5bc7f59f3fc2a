//! Step learning-rate schedule and batch settings.

use crate::config::Doc;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub step_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay_factor: 0.1,
            step_epochs: 10,
            epochs: 30,
            batch_size: 16,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !(self.decay_factor > 0.0) || self.step_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "schedule",
                "base_lr must be non-negative; decay_factor, step_epochs and batch_size positive",
            ));
        }
        Ok(())
    }

    /// `base_lr · decay_factor^⌊epoch / step_epochs⌋`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay_factor.powi((epoch / self.step_epochs) as i32)
    }

    pub fn write(&self, doc: &mut Doc) {
        let s = "schedule";
        doc.set(s, "base_lr", self.base_lr);
        doc.set(s, "decay_factor", self.decay_factor);
        doc.set(s, "step_epochs", self.step_epochs);
        doc.set(s, "epochs", self.epochs);
        doc.set(s, "batch_size", self.batch_size);
    }

    pub fn read(doc: &mut Doc) -> Result<Self> {
        let s = "schedule";
        let mut c = Self::default();
        doc.take_parse(s, "base_lr", &mut c.base_lr)?;
        doc.take_parse(s, "decay_factor", &mut c.decay_factor)?;
        doc.take_parse(s, "step_epochs", &mut c.step_epochs)?;
        doc.take_parse(s, "epochs", &mut c.epochs)?;
        doc.take_parse(s, "batch_size", &mut c.batch_size)?;
        Ok(c)
    }
}
