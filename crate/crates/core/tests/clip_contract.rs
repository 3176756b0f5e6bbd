mod common;

use proptest::prelude::*;

use common::*;
use iep_core::params::GradSet;
use iep_core::transfer::{clip_combine, ClipMode, ClipPolicy};
use iep_core::Tensor;

#[test]
fn contract_over_a_thousand_random_sets() {
    let out = clip_contract(1000, 17);
    assert!(out.worst_excess <= 1e-9, "norm exceeded target by {}", out.worst_excess);
    assert!(out.direction_preserved);
    assert!(out.literal_exact);
}

fn set(v: &[f64]) -> GradSet {
    let mut g = GradSet::new();
    g.insert("w", Tensor::vector(v.to_vec()).unwrap());
    g
}

proptest! {
    #[test]
    fn clipped_knowledge_never_outgrows_the_target(
        t in prop::collection::vec(-1e3f64..1e3, 3),
        z in prop::collection::vec(-1e6f64..1e6, 3),
        a in prop::collection::vec(-1e-6f64..1e-6, 3),
    ) {
        let (total, n) = clip_combine(&set(&t), &set(&z), &set(&a), &ClipPolicy::default());
        prop_assert!(n.int_post <= n.target + 1e-9);
        prop_assert!(n.alt_post <= n.target + 1e-9);
        prop_assert!(total.get("w").unwrap().data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn literal_mode_never_shrinks(
        t in prop::collection::vec(-10f64..10.0, 3),
        z in prop::collection::vec(-10f64..10.0, 3),
    ) {
        let p = ClipPolicy::new(ClipMode::PaperLiteralMax, 1e-12).unwrap();
        let (_, n) = clip_combine(&set(&t), &set(&z), &GradSet::new(), &p);
        prop_assert!(n.int_post >= n.int_pre * (1.0 - 1e-12));
    }
}
