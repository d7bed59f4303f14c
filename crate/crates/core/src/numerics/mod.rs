//! Dense `f64` tensors, a reverse-mode gradient tape, neural layers and Adam.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod tape;
pub mod train;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Splits a seed into an independent sub-stream seed (splitmix64 step).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
