//! Seeding and deterministic parallel sample loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Generator for sample `index` of a run seeded with `seed`. Each index gets its own
/// ChaCha stream, so samples are independent of scheduling and of each other.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples processed per parallel batch before results are folded in order.
pub const BATCH: usize = 64;

/// Runs `produce(i)` for `i in 0..count` in parallel batches and hands the results to
/// `consume` strictly in index order, so floating-point accumulation is reproducible.
pub fn ordered_map<T, P, C>(count: usize, produce: P, mut consume: C)
where
    T: Send,
    P: Fn(usize) -> T + Sync + Send,
    C: FnMut(usize, T),
{
    let mut start = 0;
    while start < count {
        let end = (start + BATCH).min(count);
        let batch: Vec<T> = (start..end).into_par_iter().map(&produce).collect();
        for (offset, item) in batch.into_iter().enumerate() {
            consume(start + offset, item);
        }
        start = end;
    }
}
