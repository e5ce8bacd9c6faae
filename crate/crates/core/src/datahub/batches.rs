use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index batches for one epoch. `shuffle` permutes with a ChaCha stream seeded by `seed`.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn iterate_batches<'a, S>(samples: &'a [S], batch_size: usize, shuffle: bool, seed: u64) -> impl Iterator<Item = Vec<&'a S>> + 'a {
    batch_indices(samples.len(), batch_size, shuffle, seed)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &samples[i]).collect())
}
