//! The outstation's measurement loop: pack, gauge and one cell model per cell
//! advanced together, one measurement cycle at a time.

use thiserror::Error;

use crate::battery_sim::{create_pack, BatteryError, Bess, PackConfig};
use crate::ducm::{Ducm, DucmConfig, DucmError, SelfAuth, Tolerance};
use crate::fuel_gauge::{GaugeConfig, GaugeError, GaugeState, Measurement};
use crate::{CellId, MEASUREMENT_PERIOD_S};

// Keeps the gauge noise stream independent of the pack parameter stream.
const GAUGE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error(transparent)]
    Battery(#[from] BatteryError),
    #[error(transparent)]
    Gauge(#[from] GaugeError),
    #[error(transparent)]
    Model(#[from] DucmError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub bess: Bess,
    pub gauge: GaugeState,
    pub models: Vec<Ducm>,
    /// Index of the latest measurement cycle.
    pub now: u64,
    /// When false the models are never refreshed after bootstrap.
    pub tracking: bool,
    pending: Vec<Vec<Measurement>>,
}

impl Plant {
    /// Build a pack, run every cell through its learning discharge, bootstrap
    /// its model from that trace and recharge it.
    pub fn commission(
        seed: u64,
        n_cells: usize,
        pack: &PackConfig,
        gauge: &GaugeConfig,
        ducm: &DucmConfig,
    ) -> Result<Self, PlantError> {
        ducm.validate()?;
        let mut bess = create_pack(seed, n_cells, pack)?;
        let mut gauge = GaugeState::new(n_cells, seed ^ GAUGE_SEED_SALT, gauge.clone())?;
        let mut traces = Vec::with_capacity(n_cells);
        let mut last_ts = 0;
        for id in 0..n_cells {
            // every learning trace starts at 0; samples are told apart by cell id
            let trace = gauge.learn_cycle(&mut bess, id as CellId, 0)?;
            last_ts = last_ts.max(trace.last().map_or(0, |m| m.timestamp));
            traces.push(trace);
        }
        let now = last_ts + 1;
        let models = traces
            .iter()
            .enumerate()
            .map(|(id, trace)| Ducm::bootstrap(id as CellId, trace, ducm, now))
            .collect::<Result<Vec<_>, _>>()?;
        bess.recharge_completed();
        Ok(Self {
            bess,
            gauge,
            models,
            now,
            tracking: true,
            pending: vec![Vec::new(); n_cells],
        })
    }

    pub fn n_cells(&self) -> usize {
        self.bess.len()
    }

    pub fn set_update_interval(&mut self, interval: u64) {
        for m in &mut self.models {
            m.update_interval = interval;
        }
    }

    /// Advance one measurement cycle: discharge, swap in fresh charge for any
    /// cell that hit the cutoff, and sample every cell.
    pub fn tick(&mut self) -> Result<Vec<Measurement>, PlantError> {
        self.bess.step(MEASUREMENT_PERIOD_S)?;
        self.bess.recharge_completed();
        self.now += 1;
        let ids: Vec<CellId> = (0..self.n_cells()).map(|i| i as CellId).collect();
        Ok(self.gauge.measure(&self.bess, &ids, self.now)?)
    }

    pub fn check(&self, m: &Measurement, tol: Tolerance) -> Result<SelfAuth, PlantError> {
        let model = self
            .models
            .get(m.cell_id as usize)
            .ok_or(BatteryError::UnknownCell(m.cell_id as usize))?;
        Ok(model.self_authenticate(m, tol)?)
    }

    /// Queue this cycle's samples and fold them into the models that are due.
    pub fn absorb(&mut self, measurements: &[Measurement]) {
        if !self.tracking {
            return;
        }
        for m in measurements {
            if let Some(buf) = self.pending.get_mut(m.cell_id as usize) {
                buf.push(*m);
            }
        }
        let now = self.now;
        for (model, buf) in self.models.iter_mut().zip(&mut self.pending) {
            if model.refresh(buf, now) {
                buf.clear();
            }
        }
    }
}
