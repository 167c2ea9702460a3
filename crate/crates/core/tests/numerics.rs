use conststyle_core::numerics::{cholesky_psd, eigh_psd, sqrt_psd, SymMatrix};
use proptest::prelude::*;

/// `A A^T + shift I` for a random square `A`.
fn spd(dim: usize, raw: &[f64], shift: f64) -> SymMatrix {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            m[i * dim + j] = (0..dim).map(|k| raw[i * dim + k] * raw[j * dim + k]).sum::<f64>();
        }
        m[i * dim + i] += shift;
    }
    SymMatrix::symmetrized(dim, m)
}

fn spd_strategy() -> impl Strategy<Value = SymMatrix> {
    (1usize..7).prop_flat_map(|d| (proptest::collection::vec(-2.0f64..2.0, d * d), 0.05f64..1.0).prop_map(move |(raw, s)| spd(d, &raw, s)))
}

fn matmul(a: &SymMatrix, b: &SymMatrix) -> SymMatrix {
    SymMatrix::symmetrized(a.dim(), a.matmul(b))
}

proptest! {
    #[test]
    fn fourth_root_to_the_fourth(m in spd_strategy()) {
        let q = sqrt_psd(&sqrt_psd(&m, 1e-12).unwrap(), 1e-12).unwrap();
        let q2 = matmul(&q, &q);
        let q4 = matmul(&q2, &q2);
        prop_assert!(q4.frobenius_distance(&m) <= 1e-6 * m.frobenius_norm().max(1.0));
    }

    #[test]
    fn cholesky_recovers_its_factor(d in 1usize..7, raw in proptest::collection::vec(-1.0f64..1.0, 36), diag in proptest::collection::vec(0.5f64..2.0, 6)) {
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                l[i * d + j] = raw[i * 6 + j];
            }
            l[i * d + i] = diag[i];
        }
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = (0..d).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
            }
        }
        let got = cholesky_psd(&SymMatrix::symmetrized(d, m)).unwrap();
        for (a, b) in got.as_slice().iter().zip(&l) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn eigenvalues_ignore_symmetric_permutation(m in spd_strategy(), seed in any::<u64>()) {
        let d = m.dim();
        let mut perm: Vec<usize> = (0..d).collect();
        let mut s = seed;
        for i in (1..d).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<f64> = (0..d * d).map(|k| m.get(perm[k / d], perm[k % d])).collect();
        let a = eigh_psd(&m).unwrap().values;
        let b = eigh_psd(&SymMatrix::symmetrized(d, permuted)).unwrap().values;
        let scale = m.frobenius_norm().max(1.0);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn eigendecomposition_reconstructs(m in spd_strategy()) {
        let e = eigh_psd(&m).unwrap();
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(e.reconstruct().frobenius_distance(&m) < 1e-10 * m.frobenius_norm().max(1.0));
    }
}

#[test]
fn diagonal_example() {
    let e = eigh_psd(&SymMatrix::from_diagonal(&[9.0, 4.0])).unwrap();
    assert_eq!(e.values, vec![4.0, 9.0]);
    assert!(e.vectors.iter().all(|v| *v == 0.0 || v.abs() == 1.0));
    let r = sqrt_psd(&SymMatrix::from_diagonal(&[4.0, 9.0]), 1e-12).unwrap();
    assert!((r.get(0, 0) - 2.0).abs() < 1e-12 && (r.get(1, 1) - 3.0).abs() < 1e-12 && r.get(0, 1) == 0.0);
}
