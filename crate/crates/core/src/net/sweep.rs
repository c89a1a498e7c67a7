//! Reliability sweep: authenticate every cell on every measurement cycle and
//! report the pass rate per (update interval, tolerance), averaged over seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::battery_sim::PackConfig;
use crate::ducm::{reliability, DucmConfig, DucmError, Tolerance};
use crate::fuel_gauge::GaugeConfig;
use crate::plant::{Plant, PlantError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub taus_mah: Vec<f64>,
    pub intervals: Vec<u64>,
    pub n_measurements: u64,
    pub n_seeds: u64,
    /// Also run with models frozen after bootstrap.
    pub include_pre_ducm: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus_mah: vec![1.0, 5.0, 10.0, 25.0, 50.0],
            intervals: vec![1, 10, 100, 1000],
            n_measurements: 10_000,
            n_seeds: 10,
            include_pre_ducm: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), DucmError> {
        if self.taus_mah.is_empty() || self.intervals.is_empty() {
            return Err(DucmError::Config("sweep ranges must be non-empty".into()));
        }
        if self.n_measurements == 0 || self.n_seeds == 0 {
            return Err(DucmError::Config("sweep needs measurements and seeds".into()));
        }
        if self.intervals.contains(&0) {
            return Err(DucmError::Config("update intervals must be at least 1".into()));
        }
        for &tau in &self.taus_mah {
            Tolerance::new(tau)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    /// Models refreshed every `interval` cycles.
    Tracked(u64),
    /// Models frozen after bootstrap.
    PreDucm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub curve: Curve,
    pub tau_mah: f64,
    /// Mean over seeds of the per-seed reliability.
    pub reliability_pct: f64,
    pub per_seed_pct: Vec<f64>,
    pub n_attempts: u64,
}

/// Pass counts per tolerance for one run of the measurement loop.
pub fn run_loop(plant: &mut Plant, taus: &[Tolerance], n_measurements: u64) -> Result<(Vec<u64>, u64), PlantError> {
    let mut passes = vec![0u64; taus.len()];
    let mut attempts = 0u64;
    for _ in 0..n_measurements {
        let ms = plant.tick()?;
        for m in &ms {
            attempts += 1;
            // a reading outside the window cannot be authenticated
            let Ok(residual) = plant.models[m.cell_id as usize].residual(m) else {
                continue;
            };
            for (count, tau) in passes.iter_mut().zip(taus) {
                if residual <= tau.mah() {
                    *count += 1;
                }
            }
        }
        plant.absorb(&ms);
    }
    Ok((passes, attempts))
}

/// Run the sweep for seeds `base_seed .. base_seed + n_seeds`.
pub fn run_reliability_sweep(
    config: &SweepConfig,
    base_seed: u64,
    n_cells: usize,
    pack: &PackConfig,
    gauge: &GaugeConfig,
    ducm: &DucmConfig,
) -> Result<Vec<SweepPoint>, PlantError> {
    config.validate()?;
    let taus: Vec<Tolerance> = config
        .taus_mah
        .iter()
        .map(|&t| Tolerance::new(t))
        .collect::<Result<_, _>>()?;
    let mut curves: Vec<Curve> = config.intervals.iter().map(|&i| Curve::Tracked(i)).collect();
    if config.include_pre_ducm {
        curves.push(Curve::PreDucm);
    }
    // per curve, per tau, per seed
    let mut pct = vec![vec![Vec::new(); taus.len()]; curves.len()];
    let mut attempts = vec![0u64; curves.len()];
    for seed in base_seed..base_seed + config.n_seeds {
        let base = Plant::commission(seed, n_cells, pack, gauge, ducm)?;
        for (ci, curve) in curves.iter().enumerate() {
            let mut plant = base.clone();
            match *curve {
                Curve::Tracked(interval) => plant.set_update_interval(interval),
                Curve::PreDucm => plant.tracking = false,
            }
            let (passes, n) = run_loop(&mut plant, &taus, config.n_measurements)?;
            attempts[ci] += n;
            for (ti, &p) in passes.iter().enumerate() {
                pct[ci][ti].push(reliability(p, n)?);
            }
        }
    }
    let mut points = Vec::new();
    for (ci, curve) in curves.iter().enumerate() {
        for (ti, tau) in taus.iter().enumerate() {
            let per_seed = std::mem::take(&mut pct[ci][ti]);
            points.push(SweepPoint {
                curve: *curve,
                tau_mah: tau.mah(),
                reliability_pct: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                per_seed_pct: per_seed,
                n_attempts: attempts[ci],
            });
        }
    }
    Ok(points)
}

pub fn write_sweep_csv<W: Write>(mut out: W, points: &[SweepPoint]) -> std::io::Result<()> {
    writeln!(out, "curve,update_interval,tau_mah,reliability_pct,n_seeds,n_attempts")?;
    for p in points {
        let (name, interval) = match p.curve {
            Curve::Tracked(i) => ("ducm", i.to_string()),
            Curve::PreDucm => ("pre_ducm", String::new()),
        };
        writeln!(
            out,
            "{},{},{},{:.4},{},{}",
            name,
            interval,
            p.tau_mah,
            p.reliability_pct,
            p.per_seed_pct.len(),
            p.n_attempts
        )?;
    }
    Ok(())
}
