//! Traffic counters accrued by kernels.

use std::ops::AddAssign;

/// Counters for one PE, or the aggregate over a launch.
///
/// Traffic counters (`flops` through `local_words`) aggregate by summation.
/// `barriers` and `rounds` count collective steps, so the aggregate holds the
/// per-PE maximum rather than the sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TrafficStats {
    pub flops: u64,
    pub global_read_words: u64,
    pub global_write_words: u64,
    /// Words moved between PE arenas by put/get.
    pub remote_words: u64,
    /// Σ nwords × hop distance over all put/get calls.
    pub remote_word_hops: u64,
    /// Words of local arena traffic, including the operand traffic charged
    /// by tile multiplies.
    pub local_words: u64,
    pub barriers: u64,
    pub rounds: u64,
}

impl TrafficStats {
    pub fn global_words(&self) -> u64 {
        self.global_read_words + self.global_write_words
    }

    /// Fold one PE's counters into an aggregate.
    pub fn absorb(&mut self, pe: &TrafficStats) {
        self.flops += pe.flops;
        self.global_read_words += pe.global_read_words;
        self.global_write_words += pe.global_write_words;
        self.remote_words += pe.remote_words;
        self.remote_word_hops += pe.remote_word_hops;
        self.local_words += pe.local_words;
        self.barriers = self.barriers.max(pe.barriers);
        self.rounds = self.rounds.max(pe.rounds);
    }

    pub fn aggregate<'a>(per_pe: impl IntoIterator<Item = &'a TrafficStats>) -> TrafficStats {
        let mut total = TrafficStats::default();
        for s in per_pe {
            total.absorb(s);
        }
        total
    }
}

impl AddAssign<&TrafficStats> for TrafficStats {
    fn add_assign(&mut self, rhs: &TrafficStats) {
        self.absorb(rhs);
    }
}

/// Per-PE counters for one launch together with their aggregate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchStats {
    pub per_pe: Vec<TrafficStats>,
    pub aggregate: TrafficStats,
}

impl LaunchStats {
    pub fn from_per_pe(per_pe: Vec<TrafficStats>) -> Self {
        let aggregate = TrafficStats::aggregate(&per_pe);
        Self { per_pe, aggregate }
    }

    pub fn pes(&self) -> usize {
        self.per_pe.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_sums_traffic_and_maxes_collectives() {
        let a = TrafficStats {
            flops: 10,
            global_read_words: 2,
            remote_word_hops: 3,
            barriers: 2,
            rounds: 4,
            ..Default::default()
        };
        let b = TrafficStats {
            flops: 5,
            global_write_words: 7,
            barriers: 2,
            rounds: 4,
            ..Default::default()
        };
        let s = LaunchStats::from_per_pe(vec![a, b]);
        assert_eq!(s.aggregate.flops, 15);
        assert_eq!(s.aggregate.global_words(), 9);
        assert_eq!(s.aggregate.remote_word_hops, 3);
        assert_eq!(s.aggregate.barriers, 2);
        assert_eq!(s.aggregate.rounds, 4);
        assert_eq!(s.pes(), 2);
    }
}
