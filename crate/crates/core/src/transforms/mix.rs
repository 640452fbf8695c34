/// Unit-lower-triangular mixing matrix. Only the strictly lower entries are
/// stored, row-major: entry `(i, j)` with `j < i` lives at `i(i−1)/2 + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerMixL {
    dim: usize,
    entries: Vec<f64>,
}

pub fn mix_entry_count(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

impl LowerMixL {
    pub fn new(dim: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), mix_entry_count(dim), "strictly lower entry count");
        Self { dim, entries }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, vec![0.0; mix_entry_count(dim)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `L[i][j]` including the implicit unit diagonal and zero upper triangle.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match j.cmp(&i) {
            std::cmp::Ordering::Less => self.entries[i * (i - 1) / 2 + j],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => 0.0,
        }
    }
}

/// `z' = Lz`; the log-determinant is exactly zero.
pub fn mix_fwd(z: &[f64], l: &LowerMixL) -> (Vec<f64>, f64) {
    assert_eq!(z.len(), l.dim);
    let out = (0..l.dim)
        .map(|i| z[i] + (0..i).map(|j| l.get(i, j) * z[j]).sum::<f64>())
        .collect();
    (out, 0.0)
}

/// Forward substitution: `z_i = z'_i − Σ_{j<i} L_ij z_j`.
pub fn mix_inv(zp: &[f64], l: &LowerMixL) -> Vec<f64> {
    assert_eq!(zp.len(), l.dim);
    let mut z = Vec::with_capacity(l.dim);
    for i in 0..l.dim {
        let acc: f64 = (0..i).map(|j| l.get(i, j) * z[j]).sum();
        z.push(zp[i] - acc);
    }
    z
}
