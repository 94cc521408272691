//! Fan-out of one global seed into independent per-component streams.
//!
//! Component `c` draws from `ChaCha8Rng::seed_from_u64(global)` on stream `c`.
//! Derived seeds are the first `u64` of that stream; per-item generators use
//! the derived seed as key and the item index as stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Data = 1,
    Model = 2,
    Targets = 3,
    RandFilter = 4,
    Victims = 5,
}

pub fn component_rng(global: u64, component: Component) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global);
    rng.set_stream(component as u64);
    rng
}

pub fn component_seed(global: u64, component: Component) -> u64 {
    component_rng(global, component).next_u64()
}

/// Generator for one item inside a component, e.g. RandFilter on target `t`.
pub fn item_rng(global: u64, component: Component, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(component_seed(global, component));
    rng.set_stream(item as u64);
    rng
}
