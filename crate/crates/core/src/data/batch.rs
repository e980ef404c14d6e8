use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MatchExample;

/// A slice of examples processed together; padding happens when the batch
/// is laid out for the encoder.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub examples: Vec<&'a MatchExample>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Splits `examples` into batches covering each example exactly once.
/// `shuffle_seed` permutes the order deterministically; `None` keeps it.
///
/// # Panics
/// If `batch_size` is zero.
pub fn batch_iter(examples: &[MatchExample], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch<'_>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| Batch { examples: idx.iter().map(|&i| &examples[i]).collect() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize) -> Vec<MatchExample> {
        (0..n).map(|i| MatchExample { label: (i % 2) as u8, latent_x: vec![i], ..Default::default() }).collect()
    }

    #[test]
    fn partitions_into_full_batches_and_a_remainder() {
        let ex = examples(10);
        let sizes: Vec<usize> = batch_iter(&ex, 3, Some(1)).iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn every_example_appears_once() {
        let ex = examples(17);
        let mut seen: Vec<usize> =
            batch_iter(&ex, 4, Some(9)).iter().flat_map(|b| b.examples.iter().map(|e| e.latent_x[0])).collect();
        seen.sort();
        assert_eq!(seen, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_seed_gives_fixed_order() {
        let ex = examples(20);
        let order = |seed| -> Vec<usize> {
            batch_iter(&ex, 6, Some(seed)).iter().flat_map(|b| b.examples.iter().map(|e| e.latent_x[0])).collect()
        };
        assert_eq!(order(5), order(5));
        assert_ne!(order(5), order(6));
    }
}
