use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 100;

/// Singular values of a rank-2 tensor by one-sided Jacobi rotations,
/// in descending order.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = match a.shape() {
        [m, n] => (*m, *n),
        s => {
            return Err(Error::shape(format!(
                "singular values need a matrix, got {s:?}"
            )))
        }
    };
    if !a.is_finite() {
        return Err(Error::NonFinite("matrix for singular values".into()));
    }
    // columns of the thinner orientation, stored contiguously
    let (rows, cols) = if m >= n { (m, n) } else { (n, m) };
    let mut c: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| {
                    if m >= n {
                        a.data()[i * n + j]
                    } else {
                        a.data()[j * n + i]
                    }
                })
                .collect()
        })
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&c[p], &c[p]);
                let beta = dot(&c[q], &c[q]);
                let gamma = dot(&c[p], &c[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = c.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (u, v) = (*x, *y);
                    *x = cs * u - sn * v;
                    *y = sn * u + cs * v;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = c.iter().map(|col| dot(col, col).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Sum of singular values (nuclear norm) of the stacked samples `a: [m, n]`.
pub fn svd_diversity(a: &Tensor) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_matrices() {
        assert_eq!(svd_diversity(&Tensor::zeros(&[3, 2])).unwrap(), 0.0);
        assert_eq!(svd_diversity(&Tensor::identity(3)).unwrap(), 3.0);
        let d = Tensor::matrix(&[vec![3.0, 0.0], vec![0.0, -4.0]]).unwrap();
        assert_eq!(singular_values(&d).unwrap(), [4.0, 3.0]);
    }

    #[test]
    fn known_two_by_two() {
        // [[2, 0], [1, 2]]: AᵀA = [[5, 2], [2, 4]] has eigenvalues (9 ± √17)/2
        let a = Tensor::matrix(&[vec![2.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let r = 17f64.sqrt();
        let want = ((9.0 + r) / 2.0).sqrt() + ((9.0 - r) / 2.0).sqrt();
        assert!((svd_diversity(&a).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn repeated_rows() {
        let row = [1.0, -2.0, 0.5];
        let a = Tensor::matrix(&vec![row.to_vec(); 5]).unwrap();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((svd_diversity(&a).unwrap() - 5f64.sqrt() * norm).abs() < 1e-8);
    }

    #[test]
    fn wide_matches_tall() {
        let a = Tensor::matrix(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]]).unwrap();
        let at = Tensor::matrix(
            &(0..4)
                .map(|j| vec![a.data()[j], a.data()[4 + j]])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let (x, y) = (singular_values(&a).unwrap(), singular_values(&at).unwrap());
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
