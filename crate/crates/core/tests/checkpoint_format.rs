//! Container round trips and corruption handling.

use proptest::prelude::*;
use vac_core::nn::{checkpoint_load, checkpoint_save, read_tensors, write_tensors, ParamSet};
use vac_core::{Tensor, VacError};

fn tensor_case() -> impl Strategy<Value = Vec<(String, Tensor)>> {
    prop::collection::vec(
        (prop::collection::vec(1usize..4, 0..4), any::<u64>()).prop_map(|(shape, seed)| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) & !(0x7ffu64 << 52) | (0x3ffu64 << 52))).collect();
            Tensor::new(shape, data).unwrap()
        }),
        0..5,
    )
    .prop_map(|ts| ts.into_iter().enumerate().map(|(i, t)| (format!("encoder.t{i}"), t)).collect())
}

proptest! {
    #[test]
    fn tensors_round_trip_bitwise(tensors in tensor_case()) {
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back = read_tensors(&bytes).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((na, ta), (nb, tb)) in tensors.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn every_proper_prefix_is_rejected(tensors in tensor_case(), cut in any::<prop::sample::Index>()) {
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(read_tensors(&bytes[..at]).is_err());
    }
}

#[test]
fn parameter_sets_survive_the_disk() {
    let mut params = ParamSet::new();
    params.add("encoder.conv1.weight", Tensor::from_vec(vec![0.1, -0.2, f64::MIN_POSITIVE])).unwrap();
    params.add("classifier.logits.bias", Tensor::from_vec(vec![3.5])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.vacb");
    checkpoint_save(&params, &path).unwrap();
    let back = checkpoint_load(&path).unwrap();
    assert_eq!(back.flat_values(), params.flat_values());
    assert_eq!(back.iter().map(|p| p.name.clone()).collect::<Vec<_>>(), vec!["encoder.conv1.weight", "classifier.logits.bias"]);
}

#[test]
fn foreign_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.vacb");
    std::fs::write(&path, b"PK\x03\x04 definitely not a checkpoint").unwrap();
    assert!(matches!(checkpoint_load(&path), Err(VacError::Format(_))));
    assert!(matches!(checkpoint_load(dir.path().join("missing")), Err(VacError::Io(_))));
}
