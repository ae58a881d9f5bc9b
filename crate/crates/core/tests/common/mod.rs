#![allow(dead_code)]

use std::path::Path;

use fd_core::config::{DatasetSource, FdConfig, Schedule};
use fd_core::datasets::SyntheticSpec;

/// Eight training identities and three held-out ones.
pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        identities: 11,
        test_identities: 3,
        images_per_identity: 6,
        queries_per_identity: 2,
        seed,
        ..Default::default()
    }
}

/// Desk settings on the small synthetic set with short schedules.
pub fn small_config(data: &Path, seed: u64, epochs: usize) -> FdConfig {
    let mut cfg = FdConfig::desk(data, seed);
    cfg.dataset = DatasetSource::Synthetic {
        root: data.to_path_buf(),
        spec: small_spec(7),
    };
    cfg.optimizer.batch_size = 16;
    cfg.teacher_schedule = Schedule {
        lr: 0.01,
        halve_every: 20,
        epochs,
    };
    cfg.student_schedule = cfg.teacher_schedule;
    cfg
}
