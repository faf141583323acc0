//! Keyed random streams.
//!
//! Every random decision in the pipeline draws from a stream addressed by
//! `(seed, id, step, slot)`. Streams are independent of each other and of the
//! order in which they are opened, so the result of a batch never depends on
//! how many workers assembled it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Named purposes for a stream. Distinct slots never share random bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Slot {
    Init = 1,
    WeakAug = 2,
    StrongAug = 3,
    CutMix = 4,
    Sampler = 5,
    Scene = 6,
    KMeans = 7,
    Schedule = 8,
    RandomSelect = 9,
    Split = 10,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a, stable across platforms.
pub fn hash_id(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Open the stream for `(seed, id, step, slot)`.
pub fn stream(seed: u64, id: &str, step: u64, slot: Slot) -> Stream {
    let mut state = seed;
    let mut mix = |v: u64| {
        state ^= v;
        splitmix64(&mut state)
    };
    let k0 = mix(hash_id(id));
    let k1 = mix(step);
    let k2 = mix(slot as u64);
    let k3 = mix(0x5354_5245_414d);
    let mut key = [0u8; 32];
    for (chunk, k) in key.chunks_mut(8).zip([k0, k1, k2, k3]) {
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Fisher-Yates permutation of `0..n` drawn from `rng`.
pub fn permutation(n: usize, rng: &mut Stream) -> Vec<usize> {
    use rand::Rng;
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Index of the `step`-th draw of `batch` items from an epoch-shuffled pool of
/// size `n`. Epoch `e` uses the permutation keyed by `(seed, tag, e)`.
pub fn epoch_batch(seed: u64, tag: &str, n: usize, batch: usize, step: u64) -> Vec<usize> {
    assert!(n > 0, "empty pool");
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch as u64 {
        let pos = step * batch as u64 + b;
        let epoch = pos / n as u64;
        let within = (pos % n as u64) as usize;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = stream(seed, tag, epoch, Slot::Sampler);
            cached = Some((epoch, permutation(n, &mut rng)));
        }
        out.push(cached.as_ref().unwrap().1[within]);
    }
    out
}
