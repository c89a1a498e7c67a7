//! Noisy fuel-gauge front end: turns simulator truth into quantized
//! (SoC, voltage) samples after a per-cell learning discharge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery_sim::{BatteryError, Bess};
use crate::{CellId, MEASUREMENT_PERIOD_S};

/// Gauge accuracy bound: SoC within one percentage point, voltage within 1 %.
pub const MAX_SOC_ERROR_PP: f64 = 1.0;
pub const MAX_VOLTAGE_ERROR_REL: f64 = 0.01;

// Domain tags keep the per-sample and per-cell random streams apart.
const TAG_SAMPLE: u64 = 0x5341_4d50;
const TAG_CAPACITY: u64 = 0x4341_5041;

#[derive(Debug, Error, PartialEq)]
pub enum GaugeError {
    #[error("cell {0} has not completed a learning cycle")]
    NotLearned(CellId),
    #[error(transparent)]
    Battery(#[from] BatteryError),
    #[error("invalid gauge configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaugeConfig {
    /// Half-width of the uniform SoC error, percentage points (or a fraction
    /// of the reading when `soc_noise_relative` is set).
    pub soc_noise_pp: f64,
    pub soc_noise_relative: bool,
    /// Half-width of the uniform voltage error as a fraction of the reading.
    pub voltage_noise_rel: f64,
    pub soc_resolution_pp: f64,
    pub voltage_resolution_v: f64,
    /// Half-width of the relative error of the capacity learned per cell.
    pub capacity_learning_error: f64,
}

impl Default for GaugeConfig {
    fn default() -> Self {
        Self {
            soc_noise_pp: 0.01,
            soc_noise_relative: false,
            voltage_noise_rel: 5e-6,
            soc_resolution_pp: 0.001,
            voltage_resolution_v: 1e-5,
            capacity_learning_error: 0.0025,
        }
    }
}

impl GaugeConfig {
    /// Worst-case error the configuration can produce must fit the gauge bound.
    pub fn validate(&self) -> Result<(), GaugeError> {
        let soc_worst = if self.soc_noise_relative {
            self.soc_noise_pp * 100.0
        } else {
            self.soc_noise_pp
        } + self.soc_resolution_pp / 2.0
            + 100.0 * self.capacity_learning_error;
        if !(soc_worst.is_finite() && self.soc_noise_pp >= 0.0) || soc_worst > MAX_SOC_ERROR_PP {
            return Err(GaugeError::Config(format!(
                "worst-case SoC error {soc_worst} pp exceeds {MAX_SOC_ERROR_PP} pp"
            )));
        }
        // 3.45 V is the smallest in-window reading, so the absolute quantization
        // error is largest in relative terms there.
        let v_worst = self.voltage_noise_rel + self.voltage_resolution_v / 2.0 / 3.45;
        if !(v_worst.is_finite() && self.voltage_noise_rel >= 0.0) || v_worst > MAX_VOLTAGE_ERROR_REL {
            return Err(GaugeError::Config(format!(
                "worst-case voltage error {v_worst} exceeds {MAX_VOLTAGE_ERROR_REL}"
            )));
        }
        if self.soc_resolution_pp < 0.0 || self.voltage_resolution_v < 0.0 {
            return Err(GaugeError::Config("resolutions must be non-negative".into()));
        }
        if !(0.0..0.02).contains(&self.capacity_learning_error) {
            return Err(GaugeError::Config(
                "capacity_learning_error must lie in [0, 0.02)".into(),
            ));
        }
        Ok(())
    }
}

/// One gauge sample. `capacity_mah` is the capacity the gauge used to
/// express `soc_percent`, so the sample converts back to charge drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub cell_id: CellId,
    pub soc_percent: f64,
    pub voltage: f64,
    pub timestamp: u64,
    pub capacity_mah: f64,
}

impl Measurement {
    pub fn charge_drawn_mah(&self) -> f64 {
        self.capacity_mah * (1.0 - self.soc_percent / 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LearnedCell {
    /// Relative calibration error of the learned capacity.
    capacity_error: f64,
    learned_capacity_mah: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeState {
    pub config: GaugeConfig,
    pub noise_seed: u64,
    learned: Vec<Option<LearnedCell>>,
}

fn keyed_rng(noise_seed: u64, tag: u64, timestamp: u64, cell_id: CellId) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&noise_seed.to_be_bytes());
    seed[8..16].copy_from_slice(&tag.to_be_bytes());
    seed[16..24].copy_from_slice(&timestamp.to_be_bytes());
    seed[24] = cell_id;
    ChaCha8Rng::from_seed(seed)
}

fn symmetric(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

fn quantize(value: f64, step: f64) -> f64 {
    if step > 0.0 {
        (value / step).round() * step
    } else {
        value
    }
}

impl GaugeState {
    pub fn new(n_cells: usize, noise_seed: u64, config: GaugeConfig) -> Result<Self, GaugeError> {
        config.validate()?;
        Ok(Self {
            config,
            noise_seed,
            learned: vec![None; n_cells],
        })
    }

    pub fn is_learned(&self, cell_id: CellId) -> bool {
        matches!(self.learned.get(cell_id as usize), Some(Some(_)))
    }

    pub fn learned_capacity_mah(&self, cell_id: CellId) -> Option<f64> {
        self.learned
            .get(cell_id as usize)
            .copied()
            .flatten()
            .map(|l| l.learned_capacity_mah)
    }

    /// Run `cell_id` through one full discharge and learn its capacity.
    ///
    /// A cell that is not at the top of a cycle is recharged first. The cell is
    /// left at the cutoff. Returns the samples taken every measurement period
    /// during the discharge, stamped `first_timestamp, first_timestamp + 1, ...`,
    /// which is the trace a cell model bootstraps from.
    pub fn learn_cycle(
        &mut self,
        bess: &mut Bess,
        cell_id: CellId,
        first_timestamp: u64,
    ) -> Result<Vec<Measurement>, GaugeError> {
        let idx = cell_id as usize;
        if idx >= bess.len() || idx >= self.learned.len() {
            return Err(BatteryError::UnknownCell(idx).into());
        }
        if bess.cells[idx].charge_drawn_mah > 0.0 || bess.cells[idx].cycle_complete {
            bess.recharge(&[cell_id])?;
        }
        let mut rng = keyed_rng(self.noise_seed, TAG_CAPACITY, 0, cell_id);
        let capacity_error = symmetric(&mut rng, self.config.capacity_learning_error);
        self.learned[idx] = Some(LearnedCell {
            capacity_error,
            learned_capacity_mah: bess.cells[idx].params.rated_capacity_mah * (1.0 + capacity_error),
        });

        let mut trace = Vec::new();
        let mut ts = first_timestamp;
        trace.push(self.sample(bess, cell_id, ts)?);
        while !bess.cells[idx].cycle_complete {
            bess.step_cell(cell_id, MEASUREMENT_PERIOD_S)?;
            ts += 1;
            trace.push(self.sample(bess, cell_id, ts)?);
        }
        Ok(trace)
    }

    pub fn measure(&self, bess: &Bess, cell_ids: &[CellId], timestamp: u64) -> Result<Vec<Measurement>, GaugeError> {
        cell_ids.iter().map(|&id| self.sample(bess, id, timestamp)).collect()
    }

    fn sample(&self, bess: &Bess, cell_id: CellId, timestamp: u64) -> Result<Measurement, GaugeError> {
        let cell = bess.cell(cell_id)?;
        let learned = self
            .learned
            .get(cell_id as usize)
            .copied()
            .flatten()
            .ok_or(GaugeError::NotLearned(cell_id))?;
        // The gauge tracks capacity fade, carrying the calibration error it
        // picked up during learning.
        let capacity = cell.params.rated_capacity_mah * (1.0 + learned.capacity_error);
        let clean_soc = 100.0 * (capacity - cell.charge_drawn_mah) / capacity;

        let mut rng = keyed_rng(self.noise_seed, TAG_SAMPLE, timestamp, cell_id);
        let soc_half = if self.config.soc_noise_relative {
            self.config.soc_noise_pp * clean_soc.abs()
        } else {
            self.config.soc_noise_pp
        };
        let soc_noise = symmetric(&mut rng, soc_half);
        let v_noise = symmetric(&mut rng, self.config.voltage_noise_rel);

        let soc = quantize(clean_soc + soc_noise, self.config.soc_resolution_pp).clamp(0.0, 100.0);
        let voltage = quantize(cell.true_voltage * (1.0 + v_noise), self.config.voltage_resolution_v);
        Ok(Measurement {
            cell_id,
            soc_percent: soc,
            voltage,
            timestamp,
            capacity_mah: capacity,
        })
    }
}
