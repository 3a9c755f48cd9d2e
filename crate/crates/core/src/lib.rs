//! Simulation toolkit for compressed decentralized consensus and optimization.

pub mod compress;
pub mod consensus;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod optim;
pub mod theory;
pub mod topology;
pub mod trace;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` of the master seed `master`.
///
/// Streams are counter-mode splits of one ChaCha key, so a stream's output
/// does not depend on how many other streams are in use.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}
