mod common;

use proptest::prelude::*;
use uwsplat::bmm::combine;
use uwsplat::Mask;

use common::density::{averages, T_D};

#[test]
fn compensation_equalises_attenuated_gradients() {
    let [a, b] = averages(true);
    assert!(a > 0.0 && b > 0.0);
    assert!((b / a - 1.0).abs() < 0.05, "compensated ratio {}", b / a);
}

#[test]
fn uncompensated_gradients_scale_with_attenuation() {
    let [a, b] = averages(false);
    let expected = T_D[1] / T_D[0];
    assert!((b / a / expected - 1.0).abs() < 0.10, "uncompensated ratio {}", b / a);
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), w * h).prop_map(move |d| Mask::from_data(w, h, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn union_law(
        (a, b, c) in (1usize..24, 1usize..24)
            .prop_flat_map(|(w, h)| (mask_strategy(w, h), mask_strategy(w, h), mask_strategy(w, h)))
    ) {
        let u = combine(&a, &b, &c).unwrap();
        for i in 0..u.data.len() {
            prop_assert_eq!(u.data[i], a.data[i] || b.data[i] || c.data[i]);
        }
    }
}

#[test]
fn union_rejects_mismatched_shapes() {
    let a = Mask::new(4, 4, false);
    let b = Mask::new(4, 5, false);
    assert!(combine(&a, &b, &a).is_err());
}
