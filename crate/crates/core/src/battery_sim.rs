//! Seedable simulation of an N-cell li-ion pack under constant load.
//!
//! Every cell follows the same piecewise-linear discharge template shifted by
//! a per-cell offset, a smooth per-cycle perturbation, and the ohmic drop of
//! its internal resistance. Capacity shrinks a little on every recharge.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::CellId;

/// Upper edge of the operating window, volts.
pub const V_MAX: f64 = 4.0;
/// Lower edge of the operating window (discharge cutoff), volts.
pub const V_MIN: f64 = 3.45;
/// A challenge names up to six distinct cells, so smaller packs are refused.
pub const MIN_PACK_CELLS: usize = 7;
/// Cell ids are 8 bits wide on the wire.
pub const MAX_PACK_CELLS: usize = 256;

/// (soc, volts) knots of the open-circuit template, ascending in soc.
const BASE_CURVE: [(f64, f64); 5] = [(0.0, 3.45), (0.1, 3.55), (0.4, 3.72), (0.8, 3.92), (1.0, 4.00)];

// Weights of the two harmonics in the cycle perturbation; they sum to one so
// the perturbation never exceeds the configured amplitude.
const CYCLE_NOISE_W1: f64 = 0.7;
const CYCLE_NOISE_W2: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum BatteryError {
    #[error("pack size {0} outside supported range {MIN_PACK_CELLS}..={MAX_PACK_CELLS}")]
    PackSize(usize),
    #[error("unknown cell id {0}")]
    UnknownCell(usize),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("invalid pack configuration: {0}")]
    Config(String),
}

/// Open-circuit template voltage at a state of charge in `[0, 1]`.
pub fn base_curve(soc: f64) -> f64 {
    let soc = soc.clamp(0.0, 1.0);
    for pair in BASE_CURVE.windows(2) {
        let (s0, v0) = pair[0];
        let (s1, v1) = pair[1];
        if soc <= s1 {
            return v0 + (soc - s0) / (s1 - s0) * (v1 - v0);
        }
    }
    BASE_CURVE[BASE_CURVE.len() - 1].1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackConfig {
    pub nominal_capacity_mah: f64,
    /// Relative half-width of the uniform capacity spread between cells.
    pub capacity_spread: f64,
    pub nominal_resistance_mohm: f64,
    pub resistance_spread: f64,
    /// Half-width of the uniform per-cell curve offset, millivolts.
    pub curve_offset_mv: f64,
    /// Peak amplitude of the per-cycle perturbation, millivolts.
    pub cycle_noise_mv: f64,
    /// Fractional capacity loss per recharge.
    pub aging_rate: f64,
    /// Relative half-width of the per-cell spread around `aging_rate`.
    pub aging_spread: f64,
    pub load_ma: f64,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self {
            nominal_capacity_mah: 2500.0,
            capacity_spread: 0.02,
            nominal_resistance_mohm: 32.0,
            resistance_spread: 0.05,
            curve_offset_mv: 15.0,
            cycle_noise_mv: 0.1,
            aging_rate: 3.5e-4,
            aging_spread: 0.1,
            load_ma: 500.0,
        }
    }
}

impl PackConfig {
    pub fn validate(&self) -> Result<(), BatteryError> {
        let positive = [
            ("nominal_capacity_mah", self.nominal_capacity_mah),
            ("nominal_resistance_mohm", self.nominal_resistance_mohm),
            ("load_ma", self.load_ma),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(BatteryError::Config(format!("{name} must be positive")));
            }
        }
        let fractions = [
            ("capacity_spread", self.capacity_spread),
            ("resistance_spread", self.resistance_spread),
            ("aging_rate", self.aging_rate),
            ("aging_spread", self.aging_spread),
        ];
        for (name, value) in fractions {
            if !(0.0..1.0).contains(&value) {
                return Err(BatteryError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..=8.0).contains(&self.cycle_noise_mv) {
            return Err(BatteryError::Config("cycle_noise_mv must lie in [0, 8]".into()));
        }
        if !(self.curve_offset_mv.is_finite() && self.curve_offset_mv >= 0.0) {
            return Err(BatteryError::Config("curve_offset_mv must be non-negative".into()));
        }
        Ok(())
    }
}

/// Manufacturing parameters of one cell. `rated_capacity_mah` is the current
/// capacity and shrinks with every recharge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellParams {
    pub cell_id: CellId,
    pub rated_capacity_mah: f64,
    pub internal_resistance_mohm: f64,
    pub curve_offset_v: f64,
    pub aging_rate: f64,
    pub rng_seed: u64,
}

/// Smooth low-frequency voltage perturbation, redrawn on every recharge.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CycleNoise {
    amplitude_v: f64,
    phase1: f64,
    phase2: f64,
}

impl CycleNoise {
    fn draw(rng_seed: u64, cycle_index: u32, amplitude_v: f64) -> Self {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&rng_seed.to_be_bytes());
        seed[8..12].copy_from_slice(&cycle_index.to_be_bytes());
        let mut rng = ChaCha8Rng::from_seed(seed);
        Self {
            amplitude_v,
            phase1: rng.gen_range(0.0..2.0 * PI),
            phase2: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, soc: f64) -> f64 {
        self.amplitude_v
            * (CYCLE_NOISE_W1 * (2.0 * PI * soc + self.phase1).sin()
                + CYCLE_NOISE_W2 * (4.0 * PI * soc + self.phase2).sin())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub params: CellParams,
    pub cycle_index: u32,
    pub charge_drawn_mah: f64,
    pub true_voltage: f64,
    /// Set once the cell hits the cutoff; cleared by `recharge`.
    pub cycle_complete: bool,
    noise: CycleNoise,
}

impl CellState {
    fn new(params: CellParams, cycle_noise_v: f64, load_ma: f64) -> Self {
        let noise = CycleNoise::draw(params.rng_seed, 0, cycle_noise_v);
        let mut cell = Self {
            params,
            cycle_index: 0,
            charge_drawn_mah: 0.0,
            true_voltage: V_MAX,
            cycle_complete: false,
            noise,
        };
        cell.true_voltage = cell.voltage_at(0.0, load_ma);
        cell
    }

    /// State of charge as a fraction of the current rated capacity.
    pub fn true_soc(&self) -> f64 {
        (1.0 - self.charge_drawn_mah / self.params.rated_capacity_mah).clamp(0.0, 1.0)
    }

    /// Terminal voltage this cell would show at `charge_mah` drawn in the
    /// current cycle, before cutoff saturation.
    pub fn voltage_at(&self, charge_mah: f64, load_ma: f64) -> f64 {
        let soc = (1.0 - charge_mah / self.params.rated_capacity_mah).clamp(0.0, 1.0);
        let ohmic = load_ma / 1000.0 * self.params.internal_resistance_mohm / 1000.0;
        let v = base_curve(soc) + self.params.curve_offset_v + self.noise.at(soc) - ohmic;
        v.min(V_MAX)
    }

    fn discharge(&mut self, dt_s: f64, load_ma: f64) {
        if self.cycle_complete {
            return;
        }
        self.charge_drawn_mah += load_ma * dt_s / 3600.0;
        let v = self.voltage_at(self.charge_drawn_mah, load_ma);
        if v <= V_MIN || self.charge_drawn_mah >= self.params.rated_capacity_mah {
            self.true_voltage = V_MIN;
            self.cycle_complete = true;
        } else {
            // The perturbation is too gentle to reverse the template slope, but
            // keep the trajectory monotone regardless of configuration.
            self.true_voltage = v.min(self.true_voltage);
        }
    }

    fn recharge(&mut self, load_ma: f64) {
        self.cycle_index += 1;
        self.charge_drawn_mah = 0.0;
        self.cycle_complete = false;
        self.params.rated_capacity_mah *= 1.0 - self.params.aging_rate;
        self.noise = CycleNoise::draw(self.params.rng_seed, self.cycle_index, self.noise.amplitude_v);
        self.true_voltage = self.voltage_at(0.0, load_ma);
    }
}

/// Battery energy storage system: the pack plus its load and clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Bess {
    pub cells: Vec<CellState>,
    pub load_ma: f64,
    pub sim_time_s: f64,
}

/// Build a pack whose per-cell parameters are drawn deterministically from `seed`.
pub fn create_pack(seed: u64, n_cells: usize, config: &PackConfig) -> Result<Bess, BatteryError> {
    if !(MIN_PACK_CELLS..=MAX_PACK_CELLS).contains(&n_cells) {
        return Err(BatteryError::PackSize(n_cells));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = |rng: &mut ChaCha8Rng, half: f64| {
        if half > 0.0 {
            rng.gen_range(-half..half)
        } else {
            0.0
        }
    };
    let cells = (0..n_cells)
        .map(|i| {
            let params = CellParams {
                cell_id: i as CellId,
                rated_capacity_mah: config.nominal_capacity_mah * (1.0 + spread(&mut rng, config.capacity_spread)),
                internal_resistance_mohm: config.nominal_resistance_mohm
                    * (1.0 + spread(&mut rng, config.resistance_spread)),
                curve_offset_v: spread(&mut rng, config.curve_offset_mv) / 1000.0,
                aging_rate: config.aging_rate * (1.0 + spread(&mut rng, config.aging_spread)),
                rng_seed: rng.gen(),
            };
            CellState::new(params, config.cycle_noise_mv / 1000.0, config.load_ma)
        })
        .collect();
    Ok(Bess {
        cells,
        load_ma: config.load_ma,
        sim_time_s: 0.0,
    })
}

impl Bess {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, id: CellId) -> Result<&CellState, BatteryError> {
        self.cells
            .get(id as usize)
            .ok_or(BatteryError::UnknownCell(id as usize))
    }

    /// Advance every cell by `dt_s` seconds of constant load.
    pub fn step(&mut self, dt_s: f64) -> Result<(), BatteryError> {
        check_step(dt_s)?;
        let load = self.load_ma;
        for cell in &mut self.cells {
            cell.discharge(dt_s, load);
        }
        self.sim_time_s += dt_s;
        Ok(())
    }

    /// Discharge a single cell without advancing the pack clock. Used by the
    /// gauge learning cycle, which runs cells through the load one at a time.
    pub fn step_cell(&mut self, id: CellId, dt_s: f64) -> Result<(), BatteryError> {
        check_step(dt_s)?;
        let load = self.load_ma;
        self.cells
            .get_mut(id as usize)
            .ok_or(BatteryError::UnknownCell(id as usize))?
            .discharge(dt_s, load);
        Ok(())
    }

    pub fn recharge(&mut self, cell_ids: &[CellId]) -> Result<(), BatteryError> {
        if let Some(&bad) = cell_ids.iter().find(|&&id| id as usize >= self.cells.len()) {
            return Err(BatteryError::UnknownCell(bad as usize));
        }
        let load = self.load_ma;
        for &id in cell_ids {
            self.cells[id as usize].recharge(load);
        }
        Ok(())
    }

    /// Recharge every cell that reached the cutoff; returns their ids.
    pub fn recharge_completed(&mut self) -> Vec<CellId> {
        let done: Vec<CellId> = self
            .cells
            .iter()
            .filter(|c| c.cycle_complete)
            .map(|c| c.params.cell_id)
            .collect();
        let load = self.load_ma;
        for &id in &done {
            self.cells[id as usize].recharge(load);
        }
        done
    }
}

fn check_step(dt_s: f64) -> Result<(), BatteryError> {
    if dt_s.is_finite() && dt_s > 0.0 {
        Ok(())
    } else {
        Err(BatteryError::InvalidStep(dt_s))
    }
}

/// One row of the trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub cell_id: CellId,
    pub cycle: u32,
    pub charge_drawn_mah: f64,
    pub true_voltage: f64,
}

impl TrajectorySample {
    pub fn of(cell: &CellState) -> Self {
        Self {
            cell_id: cell.params.cell_id,
            cycle: cell.cycle_index,
            charge_drawn_mah: cell.charge_drawn_mah,
            true_voltage: cell.true_voltage,
        }
    }
}

pub fn write_trajectory_csv<W: Write>(mut out: W, samples: &[TrajectorySample]) -> std::io::Result<()> {
    writeln!(out, "cell_id,cycle,charge_drawn_mAh,true_voltage_V")?;
    for s in samples {
        writeln!(
            out,
            "{},{},{:.4},{:.6}",
            s.cell_id, s.cycle, s.charge_drawn_mah, s.true_voltage
        )?;
    }
    Ok(())
}
