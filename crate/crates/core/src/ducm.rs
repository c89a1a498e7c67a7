//! Dynamically updating characteristic cell-model.
//!
//! Each cell keeps a table of charge buckets (10 mAh wide by default) spanning
//! its discharge window. An entry remembers where in the bucket it was
//! observed (`charge_mah`) and the voltage seen there. Self-authentication
//! looks a live sample up by voltage, reads off the charge the model expects
//! at that voltage and compares it with the charge the sample reports.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery_sim::{V_MAX, V_MIN};
use crate::fuel_gauge::Measurement;
use crate::CellId;

#[derive(Debug, Error, PartialEq)]
pub enum DucmError {
    #[error("trace leaves buckets {missing:?} uncovered")]
    Incomplete { missing: Vec<u32> },
    #[error("trace has no in-window samples for cell {0}")]
    EmptyTrace(CellId),
    #[error("voltage {0} V outside the {V_MIN}..={V_MAX} V window")]
    OutOfWindow(f64),
    #[error("measurement for cell {got} offered to the model of cell {expected}")]
    WrongCell { expected: CellId, got: CellId },
    #[error("tolerance tau_mah must be positive, got {0} mAh")]
    Tolerance(f64),
    #[error("reliability needs at least one attempt")]
    NoAttempts,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DucmConfig {
    pub bucket_width_mah: f64,
    /// Measurement cycles between refreshes.
    pub update_interval: u64,
    /// Self-authentication tolerance, mAh.
    pub tau_mah: f64,
}

impl Default for DucmConfig {
    fn default() -> Self {
        Self {
            bucket_width_mah: 10.0,
            update_interval: 1,
            tau_mah: 1.0,
        }
    }
}

impl DucmConfig {
    pub fn validate(&self) -> Result<(), DucmError> {
        if !(self.bucket_width_mah.is_finite() && self.bucket_width_mah > 0.0) {
            return Err(DucmError::Config("bucket_width_mah must be positive".into()));
        }
        if self.update_interval == 0 {
            return Err(DucmError::Config("update_interval must be at least 1".into()));
        }
        Tolerance::new(self.tau_mah)?;
        Ok(())
    }

    pub fn tolerance(&self) -> Result<Tolerance, DucmError> {
        Tolerance::new(self.tau_mah)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Tolerance(f64);

impl Tolerance {
    pub fn new(tau_mah: f64) -> Result<Self, DucmError> {
        if tau_mah.is_finite() && tau_mah > 0.0 {
            Ok(Self(tau_mah))
        } else {
            Err(DucmError::Tolerance(tau_mah))
        }
    }

    pub fn mah(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub charge_mah: f64,
    pub expected_voltage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelfAuth {
    Pass { residual_mah: f64 },
    Fail { residual_mah: f64 },
}

impl SelfAuth {
    pub fn passed(&self) -> bool {
        matches!(self, SelfAuth::Pass { .. })
    }

    pub fn residual_mah(&self) -> f64 {
        match *self {
            SelfAuth::Pass { residual_mah } | SelfAuth::Fail { residual_mah } => residual_mah,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ducm {
    pub cell_id: CellId,
    pub bucket_width_mah: f64,
    /// Indexed by bucket; bucket `i` covers `[i*w, (i+1)*w)` mAh drawn.
    entries: Vec<Entry>,
    pub last_update: u64,
    pub update_interval: u64,
}

fn in_window(v: f64) -> bool {
    (V_MIN..=V_MAX).contains(&v)
}

impl Ducm {
    /// Build a model from one full-discharge trace: each bucket holds the mean
    /// charge and mean voltage of the samples that fell in it.
    pub fn bootstrap(cell_id: CellId, trace: &[Measurement], config: &DucmConfig, now: u64) -> Result<Self, DucmError> {
        config.validate()?;
        let width = config.bucket_width_mah;
        let mut sums: Vec<(f64, f64, u32)> = Vec::new();
        for m in trace.iter().filter(|m| in_window(m.voltage)) {
            if m.cell_id != cell_id {
                return Err(DucmError::WrongCell {
                    expected: cell_id,
                    got: m.cell_id,
                });
            }
            let q = m.charge_drawn_mah().max(0.0);
            let b = (q / width) as usize;
            if b >= sums.len() {
                sums.resize(b + 1, (0.0, 0.0, 0));
            }
            sums[b].0 += q;
            sums[b].1 += m.voltage;
            sums[b].2 += 1;
        }
        if sums.is_empty() {
            return Err(DucmError::EmptyTrace(cell_id));
        }
        let missing: Vec<u32> = sums
            .iter()
            .enumerate()
            .filter(|(_, s)| s.2 == 0)
            .map(|(i, _)| i as u32)
            .collect();
        if !missing.is_empty() {
            return Err(DucmError::Incomplete { missing });
        }
        let entries = sums
            .into_iter()
            .map(|(q, v, n)| Entry {
                charge_mah: q / n as f64,
                expected_voltage: v / n as f64,
            })
            .collect();
        let mut model = Self {
            cell_id,
            bucket_width_mah: width,
            entries,
            last_update: now,
            update_interval: config.update_interval,
        };
        model.enforce_monotone(&[]);
        Ok(model)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn is_due(&self, now: u64) -> bool {
        now.saturating_sub(self.last_update) >= self.update_interval
    }

    /// Overwrite every bucket seen in `recent` with its latest sample, provided
    /// a full update interval has elapsed. Returns whether anything changed.
    pub fn refresh(&mut self, recent: &[Measurement], now: u64) -> bool {
        if !self.is_due(now) {
            return false;
        }
        let width = self.bucket_width_mah;
        let mut written: Vec<usize> = Vec::new();
        for m in recent
            .iter()
            .filter(|m| m.cell_id == self.cell_id && in_window(m.voltage))
        {
            let q = m.charge_drawn_mah().max(0.0);
            let b = (q / width) as usize;
            let entry = Entry {
                charge_mah: q,
                expected_voltage: m.voltage,
            };
            if b < self.entries.len() {
                self.entries[b] = entry;
            } else if b == self.entries.len() {
                self.entries.push(entry);
            } else {
                // a sample past a gap cannot be placed without inventing the gap
                continue;
            }
            if !written.contains(&b) {
                written.push(b);
            }
        }
        self.last_update = now;
        if !written.is_empty() {
            written.sort_unstable();
            self.enforce_monotone(&written);
        }
        true
    }

    /// Restore non-increasing voltage along the buckets. Entries not in
    /// `fresh` (sorted) give way to fresh ones; residual jitter between fresh
    /// entries is flattened forward.
    fn enforce_monotone(&mut self, fresh: &[usize]) {
        let n = self.entries.len();
        if n < 2 {
            return;
        }
        let (lo, hi) = match (fresh.first(), fresh.last()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => (0, n - 1),
        };
        for i in (lo + 1)..=hi {
            let prev = self.entries[i - 1].expected_voltage;
            if self.entries[i].expected_voltage > prev {
                self.entries[i].expected_voltage = prev;
            }
        }
        // stale buckets ahead of the freshest data
        for i in (hi + 1)..n {
            let prev = self.entries[i - 1].expected_voltage;
            if self.entries[i].expected_voltage <= prev {
                break;
            }
            self.entries[i].expected_voltage = prev;
        }
        // stale buckets behind it
        for i in (0..lo).rev() {
            let next = self.entries[i + 1].expected_voltage;
            if self.entries[i].expected_voltage >= next {
                break;
            }
            self.entries[i].expected_voltage = next;
        }
    }

    /// Charge drawn at which the model expects to see `voltage`: linear
    /// interpolation between the two entries bracketing the reading, or along
    /// the end segment when the reading lies beyond the outermost entries.
    pub fn expected_charge_at(&self, voltage: f64) -> f64 {
        let e = &self.entries;
        if e.len() == 1 {
            return e[0].charge_mah;
        }
        // voltages are non-increasing, so this is the first entry at or below
        let idx = e
            .partition_point(|x| x.expected_voltage > voltage)
            .clamp(1, e.len() - 1);
        let (hi, lo) = (e[idx - 1], e[idx]);
        let span = hi.expected_voltage - lo.expected_voltage;
        if span <= 0.0 {
            // flat stretch: take the nearer anchor
            return if voltage >= hi.expected_voltage {
                hi.charge_mah
            } else {
                lo.charge_mah
            };
        }
        let t = (hi.expected_voltage - voltage) / span;
        (hi.charge_mah + t * (lo.charge_mah - hi.charge_mah)).max(0.0)
    }

    /// Residual, in mAh, between a live sample and this model.
    pub fn residual(&self, m: &Measurement) -> Result<f64, DucmError> {
        if m.cell_id != self.cell_id {
            return Err(DucmError::WrongCell {
                expected: self.cell_id,
                got: m.cell_id,
            });
        }
        self.residual_against(m)
    }

    /// Residual of a sample from any cell, converted with that sample's own
    /// capacity. Used to probe look-alike cells.
    pub fn residual_against(&self, m: &Measurement) -> Result<f64, DucmError> {
        if !in_window(m.voltage) {
            return Err(DucmError::OutOfWindow(m.voltage));
        }
        Ok((self.expected_charge_at(m.voltage) - m.charge_drawn_mah()).abs())
    }

    pub fn self_authenticate(&self, m: &Measurement, tol: Tolerance) -> Result<SelfAuth, DucmError> {
        let residual_mah = self.residual(m)?;
        Ok(if residual_mah <= tol.mah() {
            SelfAuth::Pass { residual_mah }
        } else {
            SelfAuth::Fail { residual_mah }
        })
    }
}

/// Percentage of successful authentications.
pub fn reliability(successes: u64, attempts: u64) -> Result<f64, DucmError> {
    if attempts == 0 {
        return Err(DucmError::NoAttempts);
    }
    Ok(100.0 * successes as f64 / attempts as f64)
}

/// Dump models as `cell_id,bucket_mAh,expected_voltage_V,last_update`, where
/// `bucket_mAh` is the charge position the voltage was observed at.
pub fn write_ducm_csv<W: Write>(mut out: W, models: &[Ducm]) -> std::io::Result<()> {
    writeln!(out, "cell_id,bucket_mAh,expected_voltage_V,last_update")?;
    for model in models {
        for e in &model.entries {
            writeln!(
                out,
                "{},{:.3},{:.6},{}",
                model.cell_id, e.charge_mah, e.expected_voltage, model.last_update
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Synthetic linear cell: 4.0 V at 0 mAh falling 0.2 mV per mAh.
    fn sample(cell: CellId, q: f64, ts: u64) -> Measurement {
        Measurement {
            cell_id: cell,
            soc_percent: 100.0 * (1.0 - q / 2500.0),
            voltage: 4.0 - 0.0002 * q,
            timestamp: ts,
            capacity_mah: 2500.0,
        }
    }

    fn linear_trace(cell: CellId, step: f64, end: f64) -> Vec<Measurement> {
        let n = (end / step) as u64;
        // sample mid-step so no point sits on a bucket edge
        (0..n).map(|i| sample(cell, (i as f64 + 0.5) * step, i)).collect()
    }

    fn model() -> Ducm {
        Ducm::bootstrap(0, &linear_trace(0, 0.25, 2700.0), &DucmConfig::default(), 0).unwrap()
    }

    #[test]
    fn tolerance_must_be_positive() {
        assert!(Tolerance::new(0.0).is_err());
        assert!(Tolerance::new(-1.0).is_err());
        assert!(Tolerance::new(f64::NAN).is_err());
        assert_eq!(Tolerance::new(1.0).unwrap().mah(), 1.0);
    }

    #[test]
    fn bootstrap_of_noiseless_trace_is_bucket_means() {
        let m = model();
        // 2700 mAh at 0.2 mV/mAh reaches 3.46 V, inside the window
        assert_eq!(m.entries().len(), 270);
        for (i, e) in m.entries().iter().enumerate() {
            let centre = i as f64 * 10.0 + 5.0;
            assert!((e.charge_mah - centre).abs() < 1e-9);
            assert!((e.expected_voltage - (4.0 - 0.0002 * centre)).abs() < 1e-9);
        }
    }

    #[test]
    fn bootstrap_with_gap_lists_missing_buckets() {
        let trace: Vec<Measurement> = linear_trace(0, 0.25, 2000.0)
            .into_iter()
            .filter(|m| {
                let q = m.charge_drawn_mah();
                !(500.0..530.0).contains(&q)
            })
            .collect();
        match Ducm::bootstrap(0, &trace, &DucmConfig::default(), 0) {
            Err(DucmError::Incomplete { missing }) => assert_eq!(missing, vec![50, 51, 52]),
            other => panic!("expected incomplete model, got {other:?}"),
        }
    }

    #[test]
    fn bootstrap_rejects_empty_and_foreign_traces() {
        assert_eq!(
            Ducm::bootstrap(0, &[], &DucmConfig::default(), 0),
            Err(DucmError::EmptyTrace(0))
        );
        let foreign = linear_trace(1, 1.0, 100.0);
        assert!(matches!(
            Ducm::bootstrap(0, &foreign, &DucmConfig::default(), 0),
            Err(DucmError::WrongCell { expected: 0, got: 1 })
        ));
    }

    #[test]
    fn exact_sample_passes_at_any_tolerance() {
        let m = model();
        for q in [3.0, 517.25, 1333.3, 2600.0] {
            let s = sample(0, q, 9);
            for tau in [1e-6, 0.01, 1.0] {
                let out = m.self_authenticate(&s, Tolerance::new(tau).unwrap()).unwrap();
                assert!(out.passed(), "q={q} tau={tau} residual={}", out.residual_mah());
            }
        }
    }

    #[test]
    fn shifted_curve_fails_tight_tolerance() {
        let m = model();
        // 5 mV lower at the same charge looks like 25 mAh further along
        let mut s = sample(0, 1000.0, 1);
        s.voltage -= 0.005;
        let out = m.self_authenticate(&s, Tolerance::new(1.0).unwrap()).unwrap();
        assert!(!out.passed());
        assert!((out.residual_mah() - 25.0).abs() < 1e-6);
        assert!(m.self_authenticate(&s, Tolerance::new(50.0).unwrap()).unwrap().passed());
    }

    #[test]
    fn out_of_window_and_wrong_cell_are_errors() {
        let m = model();
        let mut s = sample(0, 10.0, 1);
        s.voltage = 4.01;
        assert_eq!(
            m.self_authenticate(&s, Tolerance::new(1.0).unwrap()),
            Err(DucmError::OutOfWindow(4.01))
        );
        s.voltage = 3.44;
        assert!(m.self_authenticate(&s, Tolerance::new(1.0).unwrap()).is_err());
        let other = sample(3, 10.0, 1);
        assert!(matches!(
            m.self_authenticate(&other, Tolerance::new(1.0).unwrap()),
            Err(DucmError::WrongCell { .. })
        ));
    }

    #[test]
    fn refresh_waits_for_interval() {
        let config = DucmConfig {
            update_interval: 10,
            ..DucmConfig::default()
        };
        let mut m = Ducm::bootstrap(0, &linear_trace(0, 0.25, 2700.0), &config, 100).unwrap();
        let before = m.clone();
        let mut fresh = sample(0, 505.0, 105);
        fresh.voltage -= 0.001;
        assert!(!m.refresh(&[fresh], 105));
        assert_eq!(m, before);
        assert!(m.refresh(&[fresh], 110));
        assert_eq!(m.last_update, 110);
        assert!((m.entries()[50].charge_mah - 505.0).abs() < 1e-9);
        assert_eq!(m.entries()[50].expected_voltage, fresh.voltage);
    }

    #[test]
    fn refresh_overwrites_with_latest_sample() {
        let mut m = model();
        let a = sample(0, 701.0, 1);
        let mut b = sample(0, 702.0, 2);
        b.voltage -= 0.0001;
        m.refresh(&[a, b], 5);
        assert!((m.entries()[70].charge_mah - 702.0).abs() < 1e-9);
        assert_eq!(m.entries()[70].expected_voltage, b.voltage);
    }

    #[test]
    fn refresh_keeps_model_monotone() {
        let mut m = model();
        // a new cycle running 3 mV high overwrites one bucket
        let mut s = sample(0, 1205.0, 1);
        s.voltage += 0.003;
        m.refresh(&[s], 1);
        assert!(m
            .entries()
            .windows(2)
            .all(|w| w[1].expected_voltage <= w[0].expected_voltage));
        assert_eq!(m.entries()[120].expected_voltage, s.voltage);
    }

    #[test]
    fn refresh_extends_past_the_end() {
        let mut m = model();
        let n = m.entries().len();
        let s = sample(0, n as f64 * 10.0 + 1.0, 1);
        m.refresh(&[s], 1);
        assert_eq!(m.entries().len(), n + 1);
    }

    #[test]
    fn reliability_formula() {
        assert_eq!(reliability(0, 10).unwrap(), 0.0);
        assert_eq!(reliability(10, 10).unwrap(), 100.0);
        assert!((reliability(8992, 10000).unwrap() - 89.92).abs() < 1e-9);
        assert_eq!(reliability(1, 0), Err(DucmError::NoAttempts));
    }

    #[test]
    fn csv_dump_layout() {
        let m = model();
        let mut buf = Vec::new();
        write_ducm_csv(&mut buf, &[m]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "cell_id,bucket_mAh,expected_voltage_V,last_update");
        assert_eq!(lines.len(), 271);
        assert_eq!(lines[1], "0,5.000,3.999000,0");
    }
}
