//! Matrix exponential by scaling and squaring with diagonal Padé
//! approximants (Higham, 2005), and its Fréchet derivative.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.53939833006323e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
];
const THETA_13: f64 = 5.371920351148152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
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

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn solve_pade(u: DMatrix<f64>, v: DMatrix<f64>) -> DMatrix<f64> {
    let p = &v + &u;
    let q = v - u;
    q.lu().solve(&p).expect("Padé denominator is nonsingular within the theta bounds")
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut power = id.clone();
    let mut u = &id * b[1];
    let mut v = &id * b[0];
    for k in (2..b.len()).step_by(2) {
        power = &power * &a2;
        v += &power * b[k];
        if k + 1 < b.len() {
            u += &power * b[k + 1];
        }
    }
    solve_pade(a * u, v)
}

fn pade13(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let b = &B13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    solve_pade(u, v)
}

/// `exp(A)` for a general square matrix.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm requires a square matrix");
    let norm = norm1(a);
    for (m, theta) in THETA {
        if norm <= theta {
            return match m {
                3 => pade_low(a, &B3),
                5 => pade_low(a, &B5),
                7 => pade_low(a, &B7),
                _ => pade_low(a, &B9),
            };
        }
    }
    let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
    let scaled = a / 2f64.powi(s);
    let mut x = pade13(&scaled);
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

/// `exp(A)` together with the Fréchet derivative `L(A, E)`, the directional
/// derivative of the exponential at `A` along `E`.
///
/// Both come out of the exponential of the block matrix `[[A, E], [0, A]]`.
pub fn expm_frechet(a: &DMatrix<f64>, e: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut block = DMatrix::<f64>::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, n)).copy_from(e);
    block.view_mut((n, n), (n, n)).copy_from(a);
    let x = expm(&block);
    (x.view((0, 0), (n, n)).into_owned(), x.view((0, n), (n, n)).into_owned())
}

/// Checks that `q` is a generator: square, finite, non-negative
/// off-diagonal entries and zero row sums.
pub fn check_generator(q: &DMatrix<f64>) -> Result<()> {
    if !q.is_square() {
        return Err(Error::InvalidGenerator("matrix is not square".into()));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidGenerator("non-finite entry".into()));
    }
    for (i, row) in q.row_iter().enumerate() {
        let scale = row.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        if row.iter().enumerate().any(|(j, &x)| j != i && x < 0.0) {
            return Err(Error::InvalidGenerator(format!("negative off-diagonal entry in row {i}")));
        }
        if row.sum().abs() > 1e-10 * scale {
            return Err(Error::InvalidGenerator(format!("row {i} sums to {}", row.sum())));
        }
    }
    Ok(())
}

/// Transition matrix `exp(Q·dt)` of a generator over a duration `dt ≥ 0`.
///
/// Round-off negatives down to `-1e-14` are clamped to zero.
pub fn transition_matrix(q: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    check_generator(q)?;
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("duration must be finite and non-negative, got {dt}")));
    }
    let n = q.nrows();
    if dt == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let mut p = expm(&(q * dt));
    p.iter_mut().for_each(|x| {
        if (-1e-14..0.0).contains(x) {
            *x = 0.0
        }
    });
    Ok(p)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Taylor series with 200 terms on `A / 2^s` (norm below 1/2), squared back.
    pub(crate) fn taylor_oracle(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let norm = norm1(a);
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scaled = a / 2f64.powi(s);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..200 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    pub(crate) fn random_generator(rng: &mut impl Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let mut q = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random_bool(0.7) {
                    q[(i, j)] = scale * rng.random::<f64>();
                }
            }
            let s: f64 = q.row(i).sum();
            q[(i, i)] = -s;
        }
        q
    }

    #[test]
    fn two_state_closed_form() {
        for (a, dt) in [(0.3, 0.7), (2.0, 5.0), (1e-4, 1.0), (40.0, 3.0)] {
            let q = DMatrix::from_row_slice(2, 2, &[-a, a, 0.0, 0.0]);
            let p = transition_matrix(&q, dt).unwrap();
            let e = (-a * dt).exp();
            assert!((p[(0, 0)] - e).abs() < 1e-12, "{a} {dt}");
            assert!((p[(0, 1)] - (1.0 - e)).abs() < 1e-12);
            assert_eq!((p[(1, 0)], p[(1, 1)]), (0.0, 1.0));
        }
    }

    #[test]
    fn zero_duration_is_identity() {
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(transition_matrix(&q, 0.0).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn matches_series_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scale in [0.01, 0.3, 1.0, 4.0, 20.0] {
            let q = random_generator(&mut rng, 4, scale);
            let p = transition_matrix(&q, 0.7).unwrap();
            let oracle = taylor_oracle(&(&q * 0.7));
            assert!((&p - &oracle).abs().max() < 1e-10, "scale {scale}");
            for row in p.row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn general_matrix_against_oracle() {
        let a = DMatrix::from_row_slice(3, 3, &[0.1, -2.0, 0.5, 1.5, 0.3, -0.2, 0.0, 0.4, -1.0]);
        assert!((expm(&a) - taylor_oracle(&a)).abs().max() < 1e-12);
    }

    #[test]
    fn frechet_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_generator(&mut rng, 3, 1.5);
        let e = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        let (ea, l) = expm_frechet(&a, &e);
        assert!((ea - expm(&a)).abs().max() < 1e-12);
        let h = 1e-6;
        let fd = (expm(&(&a + &e * h)) - expm(&(&a - &e * h))) / (2.0 * h);
        assert!((l - fd).abs().max() < 1e-8);
    }

    #[test]
    fn rejects_non_generators() {
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, 0.0]);
        assert!(matches!(transition_matrix(&bad, 1.0), Err(Error::InvalidGenerator(_))));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
        assert!(transition_matrix(&neg, 1.0).is_err());
    }
}
