//! Communication cost accounting: `c = r · n · s · 2` (upload and download).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub rounds: u64,
    pub clients: u64,
    pub payload_bytes: u64,
    pub total_bytes: u64,
}

pub fn comm_cost(rounds: u64, clients: u64, payload_bytes: u64) -> CostReport {
    CostReport {
        rounds,
        clients,
        payload_bytes,
        total_bytes: rounds * clients * payload_bytes * 2,
    }
}

/// Cost in decimal megabytes for a payload given in kilobytes.
pub fn comm_cost_mb(rounds: u64, clients: u64, payload_kb: f64) -> f64 {
    (rounds * clients * 2) as f64 * payload_kb / 1000.0
}
