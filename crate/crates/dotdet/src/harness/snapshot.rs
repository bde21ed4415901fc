//! Versioned snapshot of a trained run: model parameters plus every EMA
//! state, tagged with the config fingerprint. JSON keeps the file
//! inspectable and round-trips `f64` exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::model::ModelParams;
use crate::harness::train::TrainerState;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub config_hash: String,
    pub params: ModelParams,
    pub state: TrainerState,
}

impl Snapshot {
    pub fn new(config_hash: String, params: ModelParams, state: TrainerState) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            config_hash,
            params,
            state,
        }
    }
}

pub fn write_snapshot(path: &Path, snapshot: &Snapshot) -> Result<()> {
    let encoded = serde_json::to_string(snapshot)
        .map_err(|e| Error::Format(format!("snapshot encode: {e}")))?;
    fs::write(path, encoded).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let snapshot: Snapshot = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if snapshot.version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!(
            "{}: snapshot version {} (expected {SNAPSHOT_VERSION})",
            path.display(),
            snapshot.version
        )));
    }
    snapshot.params.validate()?;
    Ok(snapshot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::TrainConfig;

    #[test]
    fn snapshot_round_trip_is_exact() {
        let cfg = TrainConfig::default();
        let params = ModelParams::init(4, 16, 8, 99).unwrap();
        let mut state = TrainerState::new(&cfg).unwrap();
        state.aug.update(crate::stats::ScalarStats {
            mean: 0.123_456_789_012_345,
            std: 0.05,
        });
        state.ctx.reference = Some(vec![0.1, -0.2, 1.0 / 3.0]);
        state
            .stab
            .cluster_means
            .insert(crate::stabilize::GroupKey(-3, 7), vec![0.25, f64::EPSILON]);

        let snapshot = Snapshot::new(cfg.fingerprint(), params, state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        write_snapshot(&path, &snapshot).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(snapshot, back);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let cfg = TrainConfig::default();
        let params = ModelParams::init(2, 8, 8, 1).unwrap();
        let state = TrainerState::new(&cfg).unwrap();
        let mut snapshot = Snapshot::new(cfg.fingerprint(), params, state);
        snapshot.version = 999;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        write_snapshot(&path, &snapshot).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Format(_))));
    }
}
