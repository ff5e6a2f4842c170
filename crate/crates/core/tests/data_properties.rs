//! IDX round trips, batching coverage and the synthetic blob task.

use std::collections::BTreeSet;
use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;
use vac_core::data::{
    batches, parse_idx_images, parse_idx_labels, synthetic_blobs, write_idx_images, write_idx_labels, IdxImages,
};
use vac_core::{BatchPlan, Dataset, Source, Split};

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn idx_case() -> impl Strategy<Value = (IdxImages, Vec<u8>)> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(count, rows, cols)| {
        (
            prop::collection::vec(any::<u8>(), count * rows * cols),
            prop::collection::vec(0u8..10, count),
        )
            .prop_map(move |(pixels, labels)| (IdxImages { count, rows, cols, pixels }, labels))
    })
}

proptest! {
    #[test]
    fn idx_bytes_round_trip((images, labels) in idx_case()) {
        prop_assert_eq!(parse_idx_images(&write_idx_images(&images)).unwrap(), images);
        prop_assert_eq!(parse_idx_labels(&write_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn plain_and_gzip_directories_load_identically((images, labels) in idx_case(), compress in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (write_idx_images(&images), write_idx_labels(&labels));
        let (img, lab, suffix) = if compress { (gzip(&img), gzip(&lab), ".gz") } else { (img, lab, "") };
        std::fs::write(dir.path().join(format!("train-images-idx3-ubyte{suffix}")), img).unwrap();
        std::fs::write(dir.path().join(format!("train-labels-idx1-ubyte{suffix}")), lab).unwrap();
        let ds = Dataset::load_dir(dir.path(), Split::Train, Source::Mnist, None).unwrap();
        prop_assert_eq!(ds.images.shape(), &[images.count, 1, images.rows, images.cols][..]);
        for (v, &p) in ds.images.data().iter().zip(&images.pixels) {
            prop_assert_eq!(*v, f64::from(p) / 255.0);
        }
        let want: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        prop_assert_eq!(ds.labels, want);
    }

    #[test]
    fn every_sample_appears_once_per_epoch(n in 1usize..300, batch in 1usize..70, seed in any::<u64>(), epoch in 0usize..5) {
        let plan = BatchPlan { seed, batch_size: batch };
        let bs = batches(n, &plan, epoch);
        prop_assert_eq!(bs.len(), plan.num_batches(n));
        prop_assert!(bs.iter().all(|b| !b.is_empty() && b.len() <= batch));
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn shuffles_differ_across_seeds_and_epochs() {
    let perms: BTreeSet<Vec<usize>> =
        (0..10).map(|seed| BatchPlan { seed, batch_size: 8 }.permutation(100, 0)).collect();
    assert_eq!(perms.len(), 10);
    let plan = BatchPlan { seed: 4, batch_size: 8 };
    assert_ne!(plan.permutation(100, 0), plan.permutation(100, 1));
    assert_eq!(plan.permutation(100, 3), plan.permutation(100, 3));
}

#[test]
fn nearest_neighbour_separates_the_blobs() {
    let train = synthetic_blobs(200, 8, 0.3, 1).unwrap();
    let test = synthetic_blobs(200, 8, 0.3, 2).unwrap();
    let mut correct = 0;
    for i in 0..test.len() {
        let x = test.images.item(i);
        let best = (0..train.len())
            .min_by(|&a, &b| {
                let d = |j: usize| train.images.item(j).iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        if train.labels[best] == test.labels[i] {
            correct += 1;
        }
    }
    assert!(correct >= 198, "{correct}/200");
}

#[test]
fn blobs_are_balanced_and_reproducible() {
    let a = synthetic_blobs(100, 6, 0.2, 9).unwrap();
    let b = synthetic_blobs(100, 6, 0.2, 9).unwrap();
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 50);
    assert_ne!(synthetic_blobs(100, 6, 0.2, 10).unwrap().images.data(), a.images.data());
}
