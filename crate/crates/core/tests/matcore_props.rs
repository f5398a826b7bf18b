use mfslq::matcore::{is_psd, min_eigenvalue, pinv, range_condition};
use mfslq::{Matrix, Vector};
use proptest::prelude::*;

/// Matrix with prescribed singular values spread log-uniformly over `[1/cond, 1]`.
fn conditioned(r: usize, c: usize, cond: f64, entries: &[f64]) -> Matrix {
    let raw = Matrix::from_iterator(r, c, entries.iter().cloned());
    let svd = raw.svd(true, true);
    let k = r.min(c);
    let sv = Vector::from_fn(k, |i, _| {
        if k == 1 {
            1.0
        } else {
            cond.powf(-(i as f64) / (k - 1) as f64)
        }
    });
    svd.u.unwrap() * Matrix::from_diagonal(&sv) * svd.v_t.unwrap()
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn arb_dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=6, 1usize..=6)
}

fn det(m: &Matrix) -> f64 {
    m.clone().lu().determinant()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn penrose_identities(
        (r, c) in arb_dims(),
        log_cond in 0.0f64..6.0,
        entries in prop::collection::vec(-1.0f64..1.0, 36),
    ) {
        let m = conditioned(r, c, 10f64.powf(log_cond), &entries[..r * c]);
        prop_assume!(m.norm() > 0.0);
        let p = pinv(&m, 0.0).unwrap();
        let mp = &m * &p;
        let pm = &p * &m;
        prop_assert!(rel(&(&mp * &m), &m) <= 1e-10);
        prop_assert!(rel(&(&pm * &p), &p) <= 1e-10);
        prop_assert!(rel(&mp.transpose(), &mp) <= 1e-10);
        prop_assert!(rel(&pm.transpose(), &pm) <= 1e-10);
    }

    #[test]
    fn psd_agrees_with_leading_minors(
        n in 1usize..=5,
        entries in prop::collection::vec(-1.0f64..1.0, 25),
        shift in -1.0f64..2.0,
    ) {
        let raw = Matrix::from_iterator(n, n, entries[..n * n].iter().cloned());
        let m = (&raw + raw.transpose()) * 0.5 + Matrix::identity(n, n) * shift;
        let lam = min_eigenvalue(&m).unwrap();
        prop_assume!(lam.abs() > 1e-6);
        let by_minors = (1..=n).all(|k| det(&m.view((0, 0), (k, k)).into_owned()) > 0.0);
        prop_assert_eq!(is_psd(&m, 0.0).unwrap(), by_minors);
    }

    #[test]
    fn range_condition_holds_on_range(
        (r, c) in arb_dims(),
        k in 1usize..=3,
        entries in prop::collection::vec(-1.0f64..1.0, 36),
        xs in prop::collection::vec(-2.0f64..2.0, 18),
    ) {
        let a = Matrix::from_iterator(r, c, entries[..r * c].iter().cloned());
        let x = Matrix::from_iterator(c, k, xs[..c * k].iter().cloned());
        prop_assert!(range_condition(&a, &(&a * x), 1e-9).unwrap());
    }
}

#[test]
fn pinv_fixtures() {
    let z = pinv(&Matrix::zeros(1, 1), 0.0).unwrap();
    assert_eq!(z[(0, 0)], 0.0);
    let i3 = Matrix::identity(3, 3);
    assert!(rel(&pinv(&i3, 0.0).unwrap(), &i3) < 1e-15);
    let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.0]));
    let p = pinv(&d, 0.0).unwrap();
    assert_eq!(p, Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 0.0])));
    assert!(pinv(&Matrix::from_element(1, 1, f64::NAN), 0.0).is_err());
}

#[test]
fn psd_fixtures() {
    let d = |a: f64, b: f64| Matrix::from_diagonal(&Vector::from_vec(vec![a, b]));
    assert!(is_psd(&d(1.0, 2.0), 0.5).unwrap());
    assert!(!is_psd(&d(1.0, -1.0), 0.0).unwrap());
    assert!(is_psd(&Matrix::zeros(2, 2), 0.0).unwrap());
    assert!(is_psd(&Matrix::zeros(2, 3), 0.0).is_err());
}

#[test]
fn range_fixtures() {
    let one = Matrix::from_element(1, 1, 1.0);
    assert!(!range_condition(&Matrix::zeros(1, 1), &one, 1e-9).unwrap());
    assert!(range_condition(
        &Matrix::identity(2, 2),
        &Matrix::from_element(2, 1, 3.0),
        1e-9
    )
    .unwrap());
    let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
    let b = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
    assert!(range_condition(&a, &b, 1e-9).unwrap());
    assert!(range_condition(&a, &Matrix::zeros(3, 1), 1e-9).is_err());
}
