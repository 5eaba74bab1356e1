mod common;

use common::{fd_max_relative_error, random_dataset};
use seqfreq::CellKind;

#[test]
fn bptt_matches_finite_differences_for_every_cell() {
    for kind in CellKind::ALL {
        for (layers, hidden, n, seed) in [(1, 3, 6, 1), (2, 4, 8, 2), (3, 2, 10, 3)] {
            let d = random_dataset(seed, n, 2);
            let err = fd_max_relative_error(kind, layers, hidden, seed + 10, &d);
            println!("{kind} layers={layers} hidden={hidden} n={n}: max rel err {err:.3e}");
            assert!(
                err < 1e-4,
                "{kind} layers={layers} hidden={hidden}: {err:e}"
            );
        }
    }
}

#[test]
fn bptt_matches_finite_differences_on_long_unlabelled_tail() {
    // the last change near the start leaves a long suffix that must not
    // contribute to the gradient
    for kind in CellKind::ALL {
        let d = random_dataset(77, 40, 1);
        let err = fd_max_relative_error(kind, 2, 3, 5, &d);
        assert!(err < 1e-4, "{kind}: {err:e}");
    }
}
