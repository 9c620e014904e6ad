use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::codec;

/// Traffic between the coordinator and one machine.
///
/// `frame_floats` counts only the eigenvector entries of the first round; the
/// local eigenvalues that travel with them are itemized separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineCost {
    pub machine: usize,
    pub frame_floats: u64,
    pub local_eigenvalue_floats: u64,
    pub broadcast_floats: u64,
    pub rayleigh_floats: u64,
    /// Worker to coordinator, both rounds, encoded bytes.
    pub bytes_up: u64,
    /// Coordinator to worker, both rounds, encoded bytes.
    pub bytes_down: u64,
}

/// Per-machine and total communication counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    machines: BTreeMap<usize, MachineCost>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&mut self, machine: usize) -> &mut MachineCost {
        self.machines.entry(machine).or_insert_with(|| MachineCost {
            machine,
            ..MachineCost::default()
        })
    }

    /// First round: a top-`rank` request down, a `d x rank` frame plus `rank`
    /// local eigenvalues up.
    pub fn record_frames(&mut self, machine: usize, rank: usize, d: usize) {
        let e = self.entry(machine);
        e.frame_floats += (rank * d) as u64;
        e.local_eigenvalue_floats += rank as u64;
        e.bytes_down += codec::request_len() as u64;
        e.bytes_up += codec::frames_len(rank, d) as u64;
    }

    /// Eigenvalue round: the `d x k` aggregated frame down, `k` Rayleigh quotients up.
    pub fn record_eigenvalue_round(&mut self, machine: usize, k: usize, d: usize) {
        let e = self.entry(machine);
        e.broadcast_floats += (k * d) as u64;
        e.rayleigh_floats += k as u64;
        e.bytes_down += codec::broadcast_len(k, d) as u64;
        e.bytes_up += codec::rayleigh_len(k) as u64;
    }

    pub fn machines(&self) -> impl Iterator<Item = &MachineCost> {
        self.machines.values()
    }

    pub fn machine(&self, machine: usize) -> Option<&MachineCost> {
        self.machines.get(&machine)
    }

    fn total(&self, f: impl Fn(&MachineCost) -> u64) -> u64 {
        self.machines.values().map(f).sum()
    }

    /// `sum_l rank_l * d`.
    pub fn frame_floats(&self) -> u64 {
        self.total(|c| c.frame_floats)
    }

    pub fn local_eigenvalue_floats(&self) -> u64 {
        self.total(|c| c.local_eigenvalue_floats)
    }

    pub fn broadcast_floats(&self) -> u64 {
        self.total(|c| c.broadcast_floats)
    }

    pub fn rayleigh_floats(&self) -> u64 {
        self.total(|c| c.rayleigh_floats)
    }

    /// Every float exchanged in either direction.
    pub fn total_floats(&self) -> u64 {
        self.frame_floats() + self.local_eigenvalue_floats() + self.broadcast_floats() + self.rayleigh_floats()
    }

    pub fn bytes_up(&self) -> u64 {
        self.total(|c| c.bytes_up)
    }

    pub fn bytes_down(&self) -> u64 {
        self.total(|c| c.bytes_down)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_arithmetic() {
        let mut l = CommLedger::new();
        for m in 0..3 {
            l.record_frames(m, 2, 10);
        }
        assert_eq!(l.frame_floats(), 60);
        assert_eq!(l.local_eigenvalue_floats(), 6);
        assert_eq!(l.broadcast_floats(), 0);
        for m in 0..3 {
            l.record_eigenvalue_round(m, 2, 10);
        }
        assert_eq!(l.broadcast_floats(), 60);
        assert_eq!(l.rayleigh_floats(), 6);
        assert_eq!(l.total_floats(), 132);
    }
}
