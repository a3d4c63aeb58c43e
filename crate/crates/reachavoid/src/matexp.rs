//! Dense matrix exponential via Pade approximation with scaling and squaring.

use nalgebra::DMatrix;

/// Degree-13 Pade numerator coefficients (Higham's method).
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];

const B7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];

const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];

const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.539398330063230e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068;
const THETA13: f64 = 5.371920351148152;

fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// `exp(M)` for a square matrix with finite entries.
pub fn matrix_exponential(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(m.nrows(), m.ncols(), "matrix exponential requires square input");
    assert!(
        m.iter().all(|v| v.is_finite()),
        "matrix exponential requires finite entries"
    );
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let norm = one_norm(m);
    if norm <= THETA3 {
        return pade(m, &B3);
    }
    if norm <= THETA5 {
        return pade(m, &B5);
    }
    if norm <= THETA7 {
        return pade(m, &B7);
    }
    if norm <= THETA9 {
        return pade(m, &B9);
    }
    // Scale so the norm drops below theta13, apply the degree-13
    // approximant, and square back up.
    let s = ((norm / THETA13).log2().ceil()).max(0.0) as u32;
    let scaled = m / 2f64.powi(s as i32);
    let mut e = pade13(&scaled);
    for _ in 0..s {
        e = &e * &e;
    }
    e
}

/// Diagonal Pade approximant for degrees 3..=9 using even/odd splitting.
fn pade(a: &DMatrix<f64>, b: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let ident = DMatrix::identity(n, n);
    let a2 = a * a;
    // U = A * (sum over odd k of b_k A^(k-1)), V = sum over even k.
    let mut u_inner = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    let mut a_pow = ident.clone(); // A^(2j)
    let half = b.len() / 2;
    for j in 0..half {
        u_inner += &a_pow * b[2 * j + 1];
        v += &a_pow * b[2 * j];
        if j + 1 < half {
            a_pow = &a_pow * &a2;
        }
    }
    let u = a * u_inner;
    solve_pade(&u, &v)
}

fn pade13(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ident = DMatrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &B13;
    let u = a * (&a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1]);
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    solve_pade(&u, &v)
}

fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let lhs = v - u;
    let rhs = v + u;
    lhs.full_piv_lu()
        .solve(&rhs)
        .expect("Pade denominator is nonsingular for scaled inputs")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(4, 4);
        let e = matrix_exponential(&z);
        assert_eq!(e, DMatrix::identity(4, 4));
    }

    #[test]
    fn exp_of_diagonal() {
        let d = dmatrix![1.0, 0.0; 0.0, -2.0];
        let e = matrix_exponential(&d);
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((e[(1, 1)] - (-2f64).exp()).abs() < 1e-14);
        assert!(e[(0, 1)].abs() < 1e-15 && e[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn nilpotent_closed_form() {
        // exp([[0,1],[0,0]] * h) = [[1,h],[0,1]]
        let h = 0.37;
        let m = dmatrix![0.0, h; 0.0, 0.0];
        let e = matrix_exponential(&m);
        assert!((e[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((e[(0, 1)] - h).abs() < 1e-15);
        assert!(e[(1, 0)].abs() < 1e-15);
        assert!((e[(1, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn group_inverse_identity() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            let e = matrix_exponential(&m);
            let einv = matrix_exponential(&(-&m));
            let prod = &e * &einv;
            let err = (&prod - DMatrix::identity(5, 5)).norm();
            assert!(err < 1e-9, "group inverse residual {err}");
        }
    }

    #[test]
    fn semigroup_property_with_scaling() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            // Norms above theta13 exercise the scaling branch.
            let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-2.0..2.0));
            let e1 = matrix_exponential(&m);
            let ehalf = matrix_exponential(&(&m * 0.5));
            let err = (&e1 - &ehalf * &ehalf).norm() / e1.norm().max(1.0);
            assert!(err < 1e-12, "semigroup residual {err}");
        }
    }
}
