//! Invariants of the shift-quantification statistics.

use proptest::prelude::*;
use subpop_lab::quantify::{
    chi_squared, cramers_v, mutual_information, normalized_mi, tschuprows_t, ContingencyTable,
};
use subpop_lab::shiftgen::{generate, GenSpec};

fn table() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2usize..5, 2usize..5).prop_flat_map(|(a, c)| {
        prop::collection::vec(prop::collection::vec(0u64..30, c), a).prop_map(|mut t| {
            t[0][0] += 1;
            t
        })
    })
}

fn transpose(t: &[Vec<u64>]) -> Vec<Vec<u64>> {
    (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).collect()).collect()
}

fn ct(t: Vec<Vec<u64>>) -> ContingencyTable {
    ContingencyTable::new(t).unwrap()
}

proptest! {
    #[test]
    fn statistics_are_bounded_and_symmetric(t in table()) {
        let (mi, nmi) = (mutual_information(&ct(t.clone())).unwrap(), normalized_mi(&ct(t.clone())).unwrap());
        prop_assert!(mi >= 0.0);
        prop_assert!((0.0..=1.0).contains(&nmi));
        prop_assert!((0.0..=1.0).contains(&cramers_v(&ct(t.clone())).unwrap()));
        prop_assert!((0.0..=1.0).contains(&tschuprows_t(&ct(t.clone())).unwrap()));
        let tt = transpose(&t);
        prop_assert!((mutual_information(&ct(tt.clone())).unwrap() - mi).abs() < 1e-12);
        prop_assert!((chi_squared(&ct(tt)).unwrap() - chi_squared(&ct(t)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn row_permutation_leaves_statistics_unchanged(t in table(), shift in 0usize..4) {
        let mut p = t.clone();
        let k = shift % p.len();
        p.rotate_left(k);
        prop_assert!((normalized_mi(&ct(p.clone())).unwrap() - normalized_mi(&ct(t.clone())).unwrap()).abs() < 1e-12);
        prop_assert!((cramers_v(&ct(p)).unwrap() - cramers_v(&ct(t)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn square_tables_have_equal_v_and_t(n in 2usize..5, seed in 0u64..1000) {
        let t: Vec<Vec<u64>> = (0..n)
            .map(|i| (0..n).map(|j| (seed * 31 + (i * 7 + j * 3) as u64) % 17 + 1).collect())
            .collect();
        prop_assert!((cramers_v(&ct(t.clone())).unwrap() - tschuprows_t(&ct(t)).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn sc_dependence_grows_with_correlation() {
    let nmi: Vec<f64> = [0.5, 0.7, 0.9, 0.99]
        .iter()
        .map(|&rho| {
            let spec = GenSpec { n_train: 20_000, ..GenSpec::spurious(rho, 1.0, 3) };
            let splits = generate(&spec).unwrap();
            normalized_mi(&ContingencyTable::from_dataset(&splits.train)).unwrap()
        })
        .collect();
    assert!(nmi.windows(2).all(|w| w[0] < w[1]), "{nmi:?}");
    assert!(nmi[0] < 1e-3);
}
