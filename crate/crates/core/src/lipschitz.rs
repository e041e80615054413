//! Block spectral norms from feature maps.
//!
//! A block's spectral norm is estimated from a batch of its inputs and
//! outputs through the transmitting matrix `T = AᵀA` with `A = Ẑ_inᵀ Ẑ_out`
//! (rows are samples), followed by power iteration on `T`. The estimate is
//! `sqrt(λ_max(T))`.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, shape_err, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added to column norms.
pub const COLUMN_EPS: f64 = 1e-12;
/// Iterations used inside training loops.
pub const TRAIN_ITERS: usize = 20;
/// Iterations used when checking against dense solvers.
pub const VERIFY_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeatures<T> {
    pub z: Tensor<T>,
    /// Columns whose norm was below the guard and were left at zero.
    pub zero_columns: Vec<usize>,
}

/// Scales each feature column to unit L2 norm over the batch.
pub fn feature_normalize<T: Scalar>(z: &Tensor<T>) -> Result<NormalizedFeatures<T>> {
    let (m, d) = z.dims();
    if m == 0 {
        return Err(invalid("feature_normalize on an empty batch"));
    }
    let mut norms = vec![T::zero(); d];
    for i in 0..m {
        for (n, &v) in norms.iter_mut().zip(z.row(i)) {
            *n = *n + v * v;
        }
    }
    let eps = T::lit(COLUMN_EPS);
    let mut zero_columns = Vec::new();
    for (j, n) in norms.iter_mut().enumerate() {
        *n = n.sqrt();
        if *n <= eps {
            zero_columns.push(j);
        }
        *n = *n + eps;
    }
    let mut data = z.data().to_vec();
    for row in data.chunks_mut(d) {
        for (v, &n) in row.iter_mut().zip(&norms) {
            *v = *v / n;
        }
    }
    Ok(NormalizedFeatures {
        z: Tensor::from_vec(m, d, data),
        zero_columns,
    })
}

/// Which sides of the block are column-normalized before forming `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransmitOptions {
    pub normalize_input: bool,
    pub normalize_output: bool,
}

impl Default for TransmitOptions {
    fn default() -> Self {
        Self {
            normalize_input: true,
            normalize_output: true,
        }
    }
}

impl TransmitOptions {
    /// Input normalized, output kept as the block produced it. With a linear
    /// block applied to normalized input, `T` then carries the block's gain.
    pub fn input_only() -> Self {
        Self {
            normalize_input: true,
            normalize_output: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmittingMatrix<T> {
    pub t: Tensor<T>,
    pub d_in: usize,
    pub d_out: usize,
    pub batch: usize,
}

pub fn transmitting_matrix<T: Scalar>(z_in: &Tensor<T>, z_out: &Tensor<T>) -> Result<TransmittingMatrix<T>> {
    transmitting_matrix_with(z_in, z_out, TransmitOptions::default())
}

pub fn transmitting_matrix_with<T: Scalar>(
    z_in: &Tensor<T>,
    z_out: &Tensor<T>,
    opts: TransmitOptions,
) -> Result<TransmittingMatrix<T>> {
    if z_in.rows() != z_out.rows() {
        return Err(shape_err(
            "transmitting_matrix",
            format!("batch sizes differ: {} vs {}", z_in.rows(), z_out.rows()),
        ));
    }
    let a_in = if opts.normalize_input {
        feature_normalize(z_in)?.z
    } else {
        z_in.clone()
    };
    let a_out = if opts.normalize_output {
        feature_normalize(z_out)?.z
    } else {
        z_out.clone()
    };
    let a = a_in.matmul_tn(&a_out)?;
    let t = a.matmul_tn(&a)?;
    // Symmetrize away rounding differences between (i, j) and (j, i).
    let half = T::lit(0.5);
    let t = t.zip_map(&t.transpose(), |x, y| (x + y) * half);
    Ok(TransmittingMatrix {
        t,
        d_in: z_in.cols(),
        d_out: z_out.cols(),
        batch: z_in.rows(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate<T> {
    pub value: T,
    pub iterations: usize,
}

/// Unit-norm Gaussian start vector of length `n`.
pub fn start_vector<T: Scalar>(rng: &mut SeededRng, n: usize) -> Tensor<T> {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v = vec![1.0 / (n as f64).sqrt(); n];
    }
    Tensor::from_vec(n, 1, v.into_iter().map(T::lit).collect())
}

fn matvec<T: Scalar>(t: &Tensor<T>, v: &[T]) -> Vec<T> {
    (0..t.rows())
        .map(|i| t.row(i).iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect()
}

/// Repeated `m = Tv, μ = ‖m‖, v = m/μ`, returning `sqrt(μ)`.
pub fn power_iteration<T: Scalar>(
    t: &TransmittingMatrix<T>,
    n_iter: usize,
    rng: &mut SeededRng,
) -> Result<SpectralEstimate<T>> {
    power_iteration_matrix(&t.t, n_iter, rng)
}

/// Power iteration on any square symmetric matrix.
pub fn power_iteration_matrix<T: Scalar>(
    t: &Tensor<T>,
    n_iter: usize,
    rng: &mut SeededRng,
) -> Result<SpectralEstimate<T>> {
    if n_iter == 0 {
        return Err(invalid("power iteration needs n_iter >= 1"));
    }
    let (r, c) = t.dims();
    if r != c {
        return Err(shape_err("power_iteration", format!("matrix is {r}x{c}, not square")));
    }
    if !t.is_finite() {
        return Err(invalid("power iteration on a non-finite matrix"));
    }
    let mut v = start_vector::<T>(rng, r).into_data();
    let mut mu = T::zero();
    for k in 1..=n_iter {
        let m = matvec(t, &v);
        mu = m.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
        if mu == T::zero() {
            return Ok(SpectralEstimate {
                value: T::zero(),
                iterations: k,
            });
        }
        v = m.into_iter().map(|x| x / mu).collect();
    }
    Ok(SpectralEstimate {
        value: mu.sqrt(),
        iterations: n_iter,
    })
}

pub fn block_spectral_norm<T: Scalar>(
    z_in: &Tensor<T>,
    z_out: &Tensor<T>,
    n_iter: usize,
    rng: &mut SeededRng,
) -> Result<T> {
    let t = transmitting_matrix(z_in, z_out)?;
    Ok(power_iteration(&t, n_iter, rng)?.value)
}

/// `Σ_i |sn_G_i − sn_S|`.
pub fn j_fi<T: Scalar>(sn_s: T, sn_g: &[T]) -> Result<T> {
    if sn_g.is_empty() {
        return Err(invalid("j_fi needs at least one teacher"));
    }
    Ok(sn_g.iter().fold(T::zero(), |acc, &g| acc + (g - sn_s).abs()))
}

// Graph builders. The start vector is a constant, so the estimate is
// differentiable through every iteration.

pub fn feature_normalize_node<T: Scalar>(g: &mut Graph<T>, z: NodeId) -> Result<NodeId> {
    let n = g.col_l2_norm(z)?;
    let n = g.offset(T::lit(COLUMN_EPS), n)?;
    g.div(z, n)
}

pub fn transmitting_matrix_node<T: Scalar>(
    g: &mut Graph<T>,
    z_in: NodeId,
    z_out: NodeId,
    opts: TransmitOptions,
) -> Result<NodeId> {
    let a_in = if opts.normalize_input {
        feature_normalize_node(g, z_in)?
    } else {
        z_in
    };
    let a_out = if opts.normalize_output {
        feature_normalize_node(g, z_out)?
    } else {
        z_out
    };
    let a_in_t = g.transpose(a_in)?;
    let a = g.matmul(a_in_t, a_out)?;
    let a_t = g.transpose(a)?;
    g.matmul(a_t, a)
}

pub fn power_iteration_node<T: Scalar>(g: &mut Graph<T>, t: NodeId, start: Tensor<T>, n_iter: usize) -> Result<NodeId> {
    if n_iter == 0 {
        return Err(invalid("power iteration needs n_iter >= 1"));
    }
    let (r, c) = g.shape(t);
    if r != c || start.dims() != (r, 1) {
        return Err(shape_err(
            "power_iteration_node",
            format!("matrix {r}x{c} with start {:?}", start.shape()),
        ));
    }
    let mut v = g.constant(start);
    let mut mu = None;
    for _ in 0..n_iter {
        let m = g.matmul(t, v)?;
        let sq = g.square(m)?;
        let s = g.sum(sq)?;
        let norm = g.sqrt(s)?;
        let guarded = g.offset(T::lit(1e-30), norm)?;
        v = g.div(m, guarded)?;
        mu = Some(norm);
    }
    g.sqrt(mu.expect("n_iter >= 1"))
}

pub fn block_spectral_norm_node<T: Scalar>(
    g: &mut Graph<T>,
    z_in: NodeId,
    z_out: NodeId,
    n_iter: usize,
    rng: &mut SeededRng,
) -> Result<NodeId> {
    let t = transmitting_matrix_node(g, z_in, z_out, TransmitOptions::default())?;
    let (d, _) = g.shape(t);
    let start = start_vector(rng, d);
    power_iteration_node(g, t, start, n_iter)
}

/// `Σ_i |sn_G_i − sn_S|` with the teacher norms as constants.
pub fn j_fi_node<T: Scalar>(g: &mut Graph<T>, sn_s: NodeId, sn_g: &[T]) -> Result<NodeId> {
    let (first, rest) = sn_g
        .split_first()
        .ok_or_else(|| invalid("j_fi needs at least one teacher"))?;
    let diff = g.offset(-*first, sn_s)?;
    let mut total = g.abs(diff)?;
    for &sn in rest {
        let diff = g.offset(-sn, sn_s)?;
        let a = g.abs(diff)?;
        total = g.add(total, a)?;
    }
    Ok(total)
}
