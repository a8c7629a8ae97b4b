//! Feature-enhancement blocks placed between encoder and decoder.

mod mini_aspp;
mod psa;
mod sppm;

pub use mini_aspp::{MiniAspp, MiniAsppSpec, MINI_ASPP_BRANCHES};
pub use psa::{Psa, PsaParts, PsaSpec};
pub use sppm::{Sppm, SppmParts, SppmSpec};
