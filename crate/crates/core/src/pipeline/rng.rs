use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Independent Xoshiro256++ stream for one work item.
///
/// The seed and each key are folded through SplitMix64, so the stream depends
/// only on `(seed, keys)` and never on which worker draws it.
pub fn sample_rng(seed: u64, keys: &[u64]) -> Xoshiro256PlusPlus {
    let mut state = splitmix(seed);
    for &k in keys {
        state = splitmix(state ^ splitmix(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    Xoshiro256PlusPlus::seed_from_u64(state)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Thread pool sized by `OTML_THREADS` (default: available parallelism).
pub fn worker_pool() -> rayon::ThreadPool {
    let n = std::env::var("OTML_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool")
}
