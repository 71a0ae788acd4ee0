use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

/// Label-stratified mini-batches covering every index once.
///
/// Each class is shuffled and spread evenly over the epoch, so every batch
/// holds classes in roughly their overall proportions. A trailing batch
/// smaller than half of `batch_size` is merged into the one before it.
pub fn stratified_batches<R: Rng>(labels: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(labels.len());
    for members in by_class.values_mut() {
        members.shuffle(rng);
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + rng.gen::<f64>()) / n, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().unwrap().len() * 2 < batch_size {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn covers_every_index_once_with_mixed_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // skewed: class 0 has 900 rows, class 1 has 100
        let labels: Vec<usize> = (0..1000).map(|i| usize::from(i % 10 == 0)).collect();
        let batches = stratified_batches(&labels, 64, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..1000).collect::<Vec<_>>());
        for b in &batches {
            let classes: BTreeSet<usize> = b.iter().map(|&i| labels[i]).collect();
            assert!(classes.len() >= 2);
            let ones = b.iter().filter(|&&i| labels[i] == 1).count() as f64 / b.len() as f64;
            assert!((ones - 0.1).abs() < 0.05, "{ones}");
        }
        assert!(batches.iter().all(|b| b.len() >= 32));
    }

    #[test]
    fn deterministic_per_seed() {
        let labels: Vec<usize> = (0..300).map(|i| i % 7).collect();
        let a = stratified_batches(&labels, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let b = stratified_batches(&labels, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let c = stratified_batches(&labels, 32, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
