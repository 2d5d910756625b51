use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Exact multiply-add and event counts accumulated by the scan kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    /// Multiply-adds spent applying the low-rank transition `U(Vᵀh)`.
    pub transition_macs: u64,
    /// Multiply-adds spent applying an explicit `d×d` transition.
    pub dense_transition_macs: u64,
    /// Input injection `B x`.
    pub input_macs: u64,
    /// Readout `C h + D x`.
    pub output_macs: u64,
    /// Passive decay of unselected steps.
    pub decay_macs: u64,
    /// Steps that received the full ODE update.
    pub full_updates: u64,
    /// Steps that only decayed.
    pub decay_updates: u64,
    /// Comparisons made while picking the top-k steps of each segment.
    pub selection_comparisons: u64,
}

impl OpCounter {
    pub fn total_macs(&self) -> u64 {
        self.transition_macs + self.dense_transition_macs + self.input_macs + self.output_macs + self.decay_macs
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, o: Self) {
        self.transition_macs += o.transition_macs;
        self.dense_transition_macs += o.dense_transition_macs;
        self.input_macs += o.input_macs;
        self.output_macs += o.output_macs;
        self.decay_macs += o.decay_macs;
        self.full_updates += o.full_updates;
        self.decay_updates += o.decay_updates;
        self.selection_comparisons += o.selection_comparisons;
    }
}
