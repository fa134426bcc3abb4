//! A synthetic tangent model whose Jacobian rows are orthonormal has the
//! identity as its NTK; similarity between two such models is exactly 1.

use kdlab::model::TangentModel;
use kdlab::ntk;
use kdlab::Result;

/// `f(x)_k = ⟨θ, e_{slot(x)·d + k}⟩` with `slot(x) = round(x₀)`, so the
/// Jacobian at `x` is a block of distinct standard basis rows.
struct OneHotModel {
    d: usize,
    slots: usize,
    /// Parameter permutation; different permutations give different
    /// parameterizations of the same kernel.
    perm: Vec<usize>,
}

impl OneHotModel {
    fn new(d: usize, slots: usize, shift: usize) -> Self {
        let p = d * slots;
        Self {
            d,
            slots,
            perm: (0..p).map(|i| (i + shift) % p).collect(),
        }
    }

    fn slot(&self, x: &[f64]) -> usize {
        (x[0].round() as usize).min(self.slots - 1)
    }
}

impl TangentModel for OneHotModel {
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        self.d
    }
    fn num_params(&self) -> usize {
        self.d * self.slots
    }
    fn forward(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.d])
    }
    fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.num_params();
        let mut j = vec![0.0; self.d * p];
        for k in 0..self.d {
            j[k * p + self.perm[self.slot(x) * self.d + k]] = 1.0;
        }
        Ok(j)
    }
    fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.num_params()];
        for k in 0..self.d {
            g[self.perm[self.slot(x) * self.d + k]] += v[k];
        }
        Ok(g)
    }
    fn jvp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok((0..self.d).map(|k| u[self.perm[self.slot(x) * self.d + k]]).collect())
    }
}

fn inputs(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| vec![i as f64]).collect()
}

#[test]
fn kernel_is_identity() {
    let m = OneHotModel::new(3, 5, 2);
    let xs = inputs(5);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let k = ntk::batch_kernel(&m, &refs).unwrap();
    let n = k.base.order();
    assert_eq!(n, 15);
    for i in 0..n {
        for j in 0..n {
            assert_eq!(k.base.get(i, j), if i == j { 1.0 } else { 0.0 }, "({i},{j})");
        }
    }
    let v: Vec<f64> = (0..n).map(|i| i as f64 - 3.5).collect();
    assert_eq!(ntk::kernel_vec_product(&m, &refs, &v).unwrap(), v);
}

#[test]
fn identity_kernels_have_unit_similarity() {
    let f = OneHotModel::new(2, 8, 0);
    let g = OneHotModel::new(2, 8, 5);
    let xs = inputs(8);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let est = ntk::ntk_similarity(&f, &g, &refs, 32, 11).unwrap();
    assert_eq!(est.mean, 1.0);
    assert_eq!(est.std_error, 0.0);
    assert_eq!(est.resampled, 0);
}
