use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream derived from a base seed and a list of labels, so that
/// independent sub-experiments never share random numbers.
pub(crate) fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &l in labels {
        h = splitmix(h ^ splitmix(l.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
