//! Reverse-mode gradients against central finite differences.

use imgep_core::tensor::gradcheck::{check, random_suite, relative_error};
use imgep_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

#[test]
fn randomized_networks_match_finite_differences() {
    for seed in 0..3 {
        let reports = random_suite(24, seed, H).unwrap();
        assert_eq!(reports.len(), 24);
        for r in reports {
            assert!(r.checked > 0);
            assert!(
                r.max_rel_error < TOLERANCE,
                "seed {seed} {}: {:.3e}",
                r.name,
                r.max_rel_error
            );
        }
    }
}

#[test]
fn suite_covers_every_op_family() {
    let names: Vec<String> = random_suite(12, 0, H)
        .unwrap()
        .into_iter()
        .map(|r| r.name)
        .collect();
    for family in [
        "dense-sigmoid",
        "conv k3 s1",
        "conv k4 s2",
        "conv-transpose k4 s2",
        "relu",
        "gaussian-head",
        "mini-vae",
    ] {
        assert!(
            names.iter().any(|n| n.contains(family)),
            "{family} missing from {names:?}"
        );
    }
}

#[test]
fn scaled_sum_is_exact() {
    let p = vec![Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap()];
    let r = check("scaled sum", &p, H, |g, ids| {
        let s = g.scale(ids[0], 2.0);
        Ok(g.sum(s))
    })
    .unwrap();
    assert_eq!(r.checked, 3);
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn relative_error_uses_a_floor() {
    assert_eq!(relative_error(2.0, 1.0), 0.5);
    assert!((relative_error(1e-7, 0.0) - 1e-4).abs() < 1e-15);
}
