//! Small dense helpers used by the numerical oracles.

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    det
}

/// `log |det m|` and the sign of the determinant.
pub fn log_abs_determinant(m: &[Vec<f64>]) -> (f64, f64) {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut sign = 1.0;
    let mut log = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return (f64::NEG_INFINITY, 0.0);
        }
        if pivot != col {
            a.swap(pivot, col);
            sign = -sign;
        }
        let p = a[col][col];
        sign *= p.signum();
        log += p.abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / p;
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    (log, sign)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_determinants() {
        assert_eq!(determinant(&[vec![2.0]]), 2.0);
        let m = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(determinant(&m), -1.0);
        let m = vec![vec![2.0, 0.0, 1.0], vec![1.0, 3.0, 2.0], vec![1.0, 1.0, 1.0]];
        // 2(3−2) − 0 + 1(1−3) = 0
        assert!(determinant(&m).abs() < 1e-12);
        let m = vec![vec![4.0, 3.0], vec![6.0, 3.0]];
        assert!((determinant(&m) + 6.0).abs() < 1e-12);
        let (l, s) = log_abs_determinant(&m);
        assert!((l - 6f64.ln()).abs() < 1e-12 && s == -1.0);
    }
}
