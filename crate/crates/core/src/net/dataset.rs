//! CRSeq dataset export: accepted (challenge, reply) pairs from live rounds.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::crseq::write_crseq_csv;
use crate::ducm::Tolerance;
use crate::endpoints::{ChallengeOutcome, MasterSession, OutstationSession, ProtocolError};
use crate::net::config::ExperimentConfig;
use crate::plant::{Plant, PlantError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot write dataset {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid dataset request: {0}")]
    Config(String),
}

/// Run rounds against a freshly commissioned pack until `n` have been
/// accepted. Rounds the outstation refuses are retried.
pub fn generate_crseqs(config: &ExperimentConfig, seed: u64, n: u64) -> Result<Vec<(u64, u64)>, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Config("need at least one record".into()));
    }
    let plant = Plant::commission(seed, config.protocol.n_cells, &config.pack, &config.gauge, &config.ducm)?;
    let tol = Tolerance::new(config.ducm.tau_mah).map_err(|e| DatasetError::Config(e.to_string()))?;
    let mut master = MasterSession::new(plant.n_cells(), seed ^ 0xDA7A);
    let mut outstation = OutstationSession::new(plant, tol, seed ^ 0xC47);
    master.variant = config.protocol.transform.into();
    outstation.variant = master.variant;
    master.accept_enrollment(outstation.offer_enrollment()?)?;
    outstation.confirm_enrollment()?;

    let mut records = Vec::with_capacity(n as usize);
    while (records.len() as u64) < n {
        let ch = master.build_challenge()?;
        match outstation.handle_challenge(ch.encode())? {
            ChallengeOutcome::Reply(r) => {
                let verdict = master.verify_reply(r)?;
                outstation.handle_verdict(&verdict)?;
                if verdict.is_accept() {
                    records.push((ch.encode(), r.0));
                }
            }
            ChallengeOutcome::Abort(reason) => master.abort(reason.name()),
        }
        master.take_events();
        outstation.take_events();
        if master.state() == crate::endpoints::MasterState::Aborted {
            master.resume()?;
        }
    }
    Ok(records)
}

pub fn export_crseq_dataset(config: &ExperimentConfig, seed: u64, n: u64, path: &Path) -> Result<u64, DatasetError> {
    let records = generate_crseqs(config, seed, n)?;
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_crseq_csv(BufWriter::new(file), &records).map_err(io_err)?;
    Ok(records.len() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.protocol.n_cells = 12;
        c
    }

    #[test]
    fn export_is_deterministic_and_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        assert_eq!(export_crseq_dataset(&config(), 5, 100, &a).unwrap(), 100);
        export_crseq_dataset(&config(), 5, 100, &b).unwrap();
        let text = std::fs::read_to_string(&a).unwrap();
        assert_eq!(text, std::fs::read_to_string(&b).unwrap());
        assert_eq!(text.lines().count(), 100);
        for line in text.lines() {
            assert_eq!(line.len(), 33);
            let (c, r) = line.split_once(',').unwrap();
            assert!(c
                .chars()
                .chain(r.chars())
                .all(|ch| ch.is_ascii_hexdigit() && !ch.is_ascii_uppercase()));
        }
    }

    #[test]
    fn unwritable_path_is_reported() {
        let err = export_crseq_dataset(&config(), 5, 1, Path::new("/nonexistent/dir/out.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/out.csv"));
    }

    #[test]
    fn zero_records_is_refused() {
        assert!(matches!(generate_crseqs(&config(), 0, 0), Err(DatasetError::Config(_))));
    }
}
