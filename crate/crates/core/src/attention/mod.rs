//! Linear attention blocks and the learned layers they are built from.

mod kernel;
mod layers;

pub use kernel::{Attention, AttentionConfig};
pub use layers::{xavier_bound, Linear, PosEmbed};
