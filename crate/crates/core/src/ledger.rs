//! Bit-level accounting of tester state against a memory budget.
//!
//! Testers charge one entry per logical register (sample buffer, running sum,
//! count vector, partition key, repetition counters) and release it when the
//! register is no longer live. Control state that depends only on the problem
//! parameters is not charged.

use serde::Serialize;
use std::io::Write;

use crate::error::{Error, Result};

/// Width of a counter over `{0, ..., max_value}`: `ceil(log2(max_value + 1))`, at least 1.
pub fn bits_for_counter(max_value: u64) -> u64 {
    if max_value == 0 {
        1
    } else {
        u64::from(64 - max_value.leading_zeros())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LedgerEventKind {
    Charge,
    Release,
}

/// One row of the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEvent {
    pub label: String,
    pub bits: u64,
    pub event: LedgerEventKind,
    pub running_total: u64,
}

#[derive(Debug, Clone)]
pub struct BitLedger {
    budget_bits: u64,
    live: Vec<(String, u64)>,
    log: Vec<LedgerEvent>,
    current_bits: u64,
    peak_bits: u64,
    /// Largest total demanded, including a refused charge.
    demanded_peak: u64,
}

impl BitLedger {
    pub fn new(budget_bits: u64) -> Self {
        Self { budget_bits, live: Vec::new(), log: Vec::new(), current_bits: 0, peak_bits: 0, demanded_peak: 0 }
    }

    pub fn budget_bits(&self) -> u64 {
        self.budget_bits
    }

    pub fn current_bits(&self) -> u64 {
        self.current_bits
    }

    pub fn peak_bits(&self) -> u64 {
        self.peak_bits
    }

    /// The peak the run asked for. Equals [`peak_bits`](Self::peak_bits) unless a
    /// charge was refused.
    pub fn demanded_peak(&self) -> u64 {
        self.demanded_peak
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.log
    }

    pub fn is_charged(&self, label: &str) -> bool {
        self.live.iter().any(|(l, _)| l == label)
    }

    pub fn charge(&mut self, label: impl Into<String>, bits: u64) -> Result<()> {
        let label = label.into();
        if self.is_charged(&label) {
            return Err(Error::LabelInUse(label));
        }
        let total = self.current_bits + bits;
        self.demanded_peak = self.demanded_peak.max(total);
        if total > self.budget_bits {
            return Err(Error::BudgetExceeded { label, overshoot: total - self.budget_bits });
        }
        self.current_bits = total;
        self.peak_bits = self.peak_bits.max(total);
        self.log.push(LedgerEvent { label: label.clone(), bits, event: LedgerEventKind::Charge, running_total: total });
        self.live.push((label, bits));
        Ok(())
    }

    pub fn release(&mut self, label: &str) -> Result<()> {
        let idx =
            self.live.iter().position(|(l, _)| l == label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let (label, bits) = self.live.swap_remove(idx);
        self.current_bits -= bits;
        self.log.push(LedgerEvent { label, bits, event: LedgerEventKind::Release, running_total: self.current_bits });
        Ok(())
    }

    /// Writes the audit log as CSV rows `label,bits,event,running_total`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.log {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}
