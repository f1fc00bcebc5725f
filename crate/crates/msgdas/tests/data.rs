use std::collections::HashSet;

use msgdas::config::SearchConfig;
use msgdas::data::{gen_synthetic, linear_probe_accuracy, split_equal, Dataset};
use msgdas::HarnessError;
use msgdas_core::Tensor;
use proptest::prelude::*;

#[test]
fn synthetic_classes_are_balanced() {
    let ds = gen_synthetic(1000, 2, 16, 0).unwrap();
    assert_eq!(ds.len(), 1000);
    assert_eq!(ds.class_counts(), vec![500, 500]);
    assert_eq!(ds.images.shape(), &[1000, 3, 16, 16]);
    let ds = gen_synthetic(10, 3, 4, 0).unwrap();
    assert_eq!(ds.class_counts(), vec![4, 3, 3]);
}

#[test]
fn synthetic_is_deterministic_per_seed() {
    let a = gen_synthetic(64, 2, 8, 5).unwrap();
    let b = gen_synthetic(64, 2, 8, 5).unwrap();
    let c = gen_synthetic(64, 2, 8, 6).unwrap();
    assert_eq!(a, b);
    assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a.images, c.images);
}

#[test]
fn synthetic_rejects_fewer_images_than_classes() {
    assert!(matches!(gen_synthetic(1, 2, 8, 0), Err(HarnessError::Config(_))));
    assert!(matches!(gen_synthetic(4, 0, 8, 0), Err(HarnessError::Config(_))));
}

#[test]
fn linear_probe_separates_the_desk_profile() {
    let s = SearchConfig::desk().data.synthetic;
    let ds = gen_synthetic(s.n, s.classes, s.hw, 0).unwrap();
    let (train, test) = split_equal(&ds, 1).unwrap();
    let acc = linear_probe_accuracy(&train, &test, 200, 0.05);
    assert!(acc >= 0.9, "probe accuracy {acc}");
}

#[test]
fn labels_do_not_exceed_class_count() {
    let images = Tensor::zeros(&[2, 1, 2, 2]);
    assert!(Dataset::new("x", 2, images.clone(), vec![0, 1]).is_ok());
    assert!(matches!(Dataset::new("x", 2, images.clone(), vec![0, 2]), Err(HarnessError::Config(_))));
    assert!(Dataset::new("x", 2, images, vec![0]).is_err());
}

#[test]
fn split_needs_an_even_size() {
    let ds = gen_synthetic(9, 3, 4, 0).unwrap();
    assert!(matches!(split_equal(&ds, 0), Err(HarnessError::Config(_))));
}

/// Rows are identified by their bit patterns; the generator's noise makes
/// every image distinct.
fn row_keys(ds: &Dataset) -> Vec<Vec<u32>> {
    let per: usize = ds.image_shape().iter().product();
    ds.images.data().chunks(per).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn equal_split_is_disjoint_and_exhaustive(half in 1usize..40, classes in 2usize..5, seed in any::<u64>()) {
        let n = (2 * half).max(classes + classes % 2);
        let ds = gen_synthetic(n, classes, 4, seed).unwrap();
        let (a, b) = split_equal(&ds, seed ^ 1).unwrap();
        prop_assert_eq!(a.len(), b.len());
        prop_assert_eq!(a.len() + b.len(), ds.len());
        let ka: HashSet<Vec<u32>> = row_keys(&a).into_iter().collect();
        let kb: HashSet<Vec<u32>> = row_keys(&b).into_iter().collect();
        prop_assert!(ka.is_disjoint(&kb));
        let all: HashSet<Vec<u32>> = row_keys(&ds).into_iter().collect();
        prop_assert_eq!(all.len(), ds.len());
        let union: HashSet<Vec<u32>> = ka.union(&kb).cloned().collect();
        prop_assert_eq!(union, all);
        let mut counts = a.class_counts();
        for (c, k) in counts.iter_mut().zip(b.class_counts()) {
            *c += k;
        }
        prop_assert_eq!(counts, ds.class_counts());
    }
}
