//! Empirical neural tangent kernels.
//!
//! Block layout is example-major, class-minor: row `i·d + a` of a batch
//! kernel belongs to output `a` of example `i`. Kernel-machine code and
//! target flattening use the same convention.

use crate::error::{Error, Result};
use crate::linalg::{self, dot, SymMatrix};
use crate::model::TangentModel;
use crate::par;
use crate::rng;

/// Largest dense kernel order we are willing to materialize.
pub const MAX_DENSE_ORDER: usize = 4096;

/// Dense batch NTK, `(b·d) × (b·d)`.
#[derive(Debug, Clone)]
pub struct NtkMatrix {
    pub base: SymMatrix,
    pub batch_size: usize,
    pub output_dim: usize,
    pub source_step: u64,
}

impl NtkMatrix {
    pub fn order(&self) -> usize {
        self.base.order()
    }

    /// The `d × d` block for examples `i` and `j`, row-major.
    pub fn block(&self, i: usize, j: usize) -> Vec<f64> {
        let d = self.output_dim;
        let mut out = Vec::with_capacity(d * d);
        for a in 0..d {
            for b in 0..d {
                out.push(self.base.get(i * d + a, j * d + b));
            }
        }
        out
    }
}

/// Dense rectangular kernel between new points (rows) and training points (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossKernel {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub data: Vec<f64>,
}

impl CrossKernel {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dims("cross kernel matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }
}

impl From<&SymMatrix> for CrossKernel {
    fn from(m: &SymMatrix) -> Self {
        Self {
            rows: m.order(),
            cols: m.order(),
            data: m.entries().to_vec(),
        }
    }
}

/// Per-example Jacobians (`d × P`, row-major), computed in parallel.
pub fn jacobians<M: TangentModel>(m: &M, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    par::map_slice(xs, |x| m.jacobian(x)).into_iter().collect()
}

/// `J(x)·J(x')ᵀ`, a `d × d` row-major block.
pub fn pair_kernel<M: TangentModel>(m: &M, x: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
    let d = m.output_dim();
    let np = m.num_params();
    let ja = m.jacobian(x)?;
    let jb = m.jacobian(x2)?;
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            out[a * d + b] = dot(&ja[a * np..(a + 1) * np], &jb[b * np..(b + 1) * np]);
        }
    }
    Ok(out)
}

/// Dense batch NTK. Each entry is an independent dot product, so the result
/// does not depend on how rows are distributed over threads.
pub fn batch_kernel<M: TangentModel>(m: &M, xs: &[&[f64]]) -> Result<NtkMatrix> {
    if xs.is_empty() {
        return Err(Error::InvalidSpec("batch kernel needs at least one example".into()));
    }
    let d = m.output_dim();
    let order = xs.len() * d;
    if order > MAX_DENSE_ORDER {
        return Err(Error::InvalidSpec(format!(
            "dense kernel order {order} exceeds the cap of {MAX_DENSE_ORDER}"
        )));
    }
    let np = m.num_params();
    let jacs = jacobians(m, xs)?;
    let feature = |r: usize| -> &[f64] {
        let (i, a) = (r / d, r % d);
        &jacs[i][a * np..(a + 1) * np]
    };
    let upper: Vec<Vec<f64>> = par::map_range(order, |r| {
        let fr = feature(r);
        (r..order).map(|c| dot(fr, feature(c))).collect()
    });
    let mut entries = vec![0.0; order * order];
    for (r, row) in upper.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let c = r + k;
            entries[r * order + c] = v;
            entries[c * order + r] = v;
        }
    }
    Ok(NtkMatrix {
        base: SymMatrix::from_symmetric_unchecked(order, entries),
        batch_size: xs.len(),
        output_dim: d,
        source_step: m.step_index(),
    })
}

/// Kernel between `new_xs` (rows) and `train_xs` (columns).
pub fn cross_kernel<M: TangentModel>(m: &M, new_xs: &[&[f64]], train_xs: &[&[f64]]) -> Result<CrossKernel> {
    let d = m.output_dim();
    let np = m.num_params();
    let jn = jacobians(m, new_xs)?;
    let jt = jacobians(m, train_xs)?;
    let rows = new_xs.len() * d;
    let cols = train_xs.len() * d;
    let data: Vec<Vec<f64>> = par::map_range(rows, |r| {
        let fr = &jn[r / d][(r % d) * np..(r % d + 1) * np];
        (0..cols)
            .map(|c| dot(fr, &jt[c / d][(c % d) * np..(c % d + 1) * np]))
            .collect()
    });
    Ok(CrossKernel {
        rows,
        cols,
        data: data.concat(),
    })
}

/// `K·v` without forming `K`: one vector-Jacobian product per example summed
/// into a parameter-space vector, then one Jacobian-vector product per example.
pub fn kernel_vec_product<M: TangentModel>(m: &M, xs: &[&[f64]], v: &[f64]) -> Result<Vec<f64>> {
    let d = m.output_dim();
    if v.len() != xs.len() * d {
        return Err(Error::dims("kernel_vec_product vector", xs.len() * d, v.len()));
    }
    let pulls = par::map_range(xs.len(), |i| m.vjp(xs[i], &v[i * d..(i + 1) * d]));
    let mut u = vec![0.0; m.num_params()];
    for g in pulls {
        u.iter_mut().zip(g?).for_each(|(acc, x)| *acc += x);
    }
    let pushes = par::map_slice(xs, |x| m.jvp(x, &u));
    let mut out = Vec::with_capacity(v.len());
    for block in pushes {
        out.extend(block?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NtkSimEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub num_probes: usize,
    pub probe_seed: u64,
    /// Probes discarded because a kernel product nearly vanished.
    pub resampled: usize,
}

/// Probes whose kernel products have a norm below this are resampled.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine between two vectors as `⟨a,b⟩ / √(⟨a,a⟩⟨b,b⟩)`, clamped to `[-1, 1]`.
///
/// For `a == b` this is exactly 1, since `√(s·s) == s` in IEEE arithmetic.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()).clamp(-1.0, 1.0)
}

/// Monte-Carlo estimate of `E_v[cos(K_f v, K_g v)]` over standard Gaussian
/// probes, using matrix-free kernel products.
pub fn ntk_similarity<S: TangentModel, T: TangentModel>(
    student: &S,
    teacher: &T,
    xs: &[&[f64]],
    num_probes: usize,
    probe_seed: u64,
) -> Result<NtkSimEstimate> {
    if student.output_dim() != teacher.output_dim() {
        return Err(Error::dims("teacher output width", student.output_dim(), teacher.output_dim()));
    }
    if num_probes < 2 {
        return Err(Error::InvalidSpec("ntk similarity needs at least 2 probes".into()));
    }
    if xs.is_empty() {
        return Err(Error::InvalidSpec("ntk similarity needs at least one example".into()));
    }
    let n = xs.len() * student.output_dim();
    let mut rng = rng::seeded(probe_seed);
    let mut values = Vec::with_capacity(num_probes);
    let mut degenerate = 0usize;
    while values.len() < num_probes {
        let v = rng::normal_vec(&mut rng, n);
        let kf = kernel_vec_product(student, xs, &v)?;
        let kg = kernel_vec_product(teacher, xs, &v)?;
        if linalg::norm2(&kf) < DEGENERATE_NORM || linalg::norm2(&kg) < DEGENERATE_NORM {
            degenerate += 1;
            if degenerate > num_probes {
                return Err(Error::DegenerateKernel {
                    degenerate,
                    attempts: degenerate + values.len(),
                });
            }
            continue;
        }
        values.push(cosine(&kf, &kg));
    }
    let (mean, std_error) = mean_and_std_error(&values);
    Ok(NtkSimEstimate {
        mean,
        std_error,
        num_probes,
        probe_seed,
        resampled: degenerate,
    })
}

/// Sample mean and `sample_std / √n` (with the `n − 1` denominator).
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Condition number of the dense batch NTK.
pub fn ntk_condition_number<M: TangentModel>(m: &M, xs: &[&[f64]]) -> Result<f64> {
    let k = batch_kernel(m, xs)?;
    Ok(linalg::condition_number(&k.base))
}
