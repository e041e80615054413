//! Training objectives.
//!
//! Each loss exists twice: a direct evaluation on tensors and a builder that
//! appends the same computation to a [`Graph`] for differentiation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{input_gradient_expression, softplus, Bindings, DenseNodes, Graph, NodeId, UnaryOp};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Critic, Leaf, Module};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound on row norms when normalizing.
pub const NORM_EPS: f64 = 1e-12;
/// Angular margin in radians.
pub const DEFAULT_MARGIN: f64 = 0.2;
/// Gradient-penalty weight.
pub const DEFAULT_GP_WEIGHT: f64 = 10.0;

/// Per-teacher constraint values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherTerms {
    pub j_sim: f64,
    pub j_mi: f64,
    pub j_fi: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub j_mae: f64,
    pub j_sim: f64,
    pub j_mi: f64,
    pub j_fi: f64,
    pub per_teacher: Vec<TeacherTerms>,
}

impl LossTerms {
    pub fn new(j_mae: f64, j_sim: f64, j_mi: f64, j_fi: f64) -> Self {
        Self {
            j_mae,
            j_sim,
            j_mi,
            j_fi,
            per_teacher: Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.j_mae, self.j_sim, self.j_mi, self.j_fi]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Raw weights `λ1..λ4` for MAE, Sim, MI and FI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mae: f64,
    pub sim: f64,
    pub mi: f64,
    pub fi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mae: 3.0,
            sim: 0.5,
            mi: 0.5,
            fi: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(mae: f64, sim: f64, mi: f64, fi: f64) -> Self {
        Self { mae, sim, mi, fi }
    }

    /// `λ̄_t = λ_t / Σ λ_k`.
    pub fn normalized(&self) -> Result<[f64; 4]> {
        let raw = [self.mae, self.sim, self.mi, self.fi];
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!(
                "loss weights must be finite and nonnegative, got {raw:?}"
            )));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(invalid("loss weights sum to zero"));
        }
        Ok(raw.map(|v| v / total))
    }
}

fn check_same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(what, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean Euclidean distance between true and predicted locations.
pub fn j_mae<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<T> {
    check_same_shape("j_mae", y, y_hat)?;
    if y.rows() == 0 {
        return Err(invalid("j_mae on an empty batch"));
    }
    Ok(y.sub(y_hat).row_norms().mean())
}

fn normalize_rows<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let norms = z.row_norms();
    let eps = T::lit(NORM_EPS);
    let c = z.cols();
    let mut data = z.data().to_vec();
    for (i, chunk) in data.chunks_mut(c).enumerate() {
        let n = norms.data()[i].max(eps);
        chunk.iter_mut().for_each(|v| *v = *v / n);
    }
    Tensor::from_vec(z.rows(), c, data)
}

/// Mean per-row cosine similarity, the `c̄` inside the angular loss.
///
/// Computed as `1 − mean(‖â − b̂‖²)/2`, which equals the mean of `â·b̂` for
/// unit rows but is exactly 1 when the rows coincide.
pub fn mean_cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_same_shape("mean_cosine", a, b)?;
    let d = normalize_rows(a).sub(&normalize_rows(b)).map(|v| v * v);
    let half_dist = d.sum() / T::from_usize(2 * a.rows()).unwrap();
    Ok(T::one() - half_dist)
}

/// Angular similarity loss `max(0, 1 − cos(arccos(c̄) + α))`.
pub fn j_sim<T: Scalar>(z_s: &Tensor<T>, z_g: &Tensor<T>, margin: T) -> Result<T> {
    check_same_shape("j_sim", z_s, z_g)?;
    let c = mean_cosine(z_s, z_g)?.max(-T::one()).min(T::one());
    Ok((T::one() - (c.acos() + margin).cos()).max(T::zero()))
}

/// Row `k` of the result is row `k + 1 mod B` of the input.
pub fn cyclic_shift_pairing<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let b = z.rows();
    if b < 2 {
        return Err(invalid("cyclic shift pairing needs at least 2 rows"));
    }
    Tensor::concat_rows(&[&z.slice_rows(1, b), &z.slice_rows(0, 1)])
}

/// Jensen-Shannon mutual-information bound for one teacher:
/// `mean(−softplus(−joint)) − mean(softplus(product))`.
pub fn j_mi_term<T: Scalar>(joint: &Tensor<T>, product: &Tensor<T>) -> Result<T> {
    if joint.is_empty() || product.is_empty() {
        return Err(invalid("j_mi_term on empty statistics"));
    }
    if !joint.is_finite() || !product.is_finite() {
        return Err(invalid("j_mi_term on non-finite statistics"));
    }
    let pos = joint.map(|v| -softplus(-v)).mean();
    let neg = product.map(softplus).mean();
    Ok(pos - neg)
}

pub fn critic_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
    if real.is_empty() || fake.is_empty() {
        return Err(invalid("critic loss on an empty batch"));
    }
    Ok(fake.mean() - real.mean())
}

pub fn generator_adv_loss<T: Scalar>(fake: &Tensor<T>) -> Result<T> {
    if fake.is_empty() {
        return Err(invalid("generator loss on an empty batch"));
    }
    Ok(-fake.mean())
}

/// WGAN-GP penalty `mean((‖∇C(x̂)‖ − 1)²)` at `x̂ = ε·real + (1−ε)·fake`,
/// with `eps` a `[B, 1]` column.
pub fn gradient_penalty<T: Scalar>(
    critic: &Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<T> {
    check_same_shape("gradient_penalty", real, fake)?;
    let (b, d) = real.dims();
    let mut g = Graph::new();
    let r = g.input("real", b, d);
    let f = g.input("fake", b, d);
    let e = g.input("eps", b, 1);
    let layers = critic.net.leaves(&mut g, Leaf::Frozen);
    let gp = gradient_penalty_node(&mut g, &layers, r, f, e)?;
    let mut bind = Bindings::new();
    bind.bind("real", real).bind("fake", fake).bind("eps", eps);
    critic.bind(&mut bind);
    g.forward(&bind)?;
    g.scalar_value(gp)
}

/// `λ̄1·mae + λ̄2·sim − λ̄3·mi + λ̄4·fi`; the MI bound is maximized.
pub fn j_overall(weights: &LossWeights, terms: &LossTerms) -> Result<f64> {
    let [a, b, c, d] = weights.normalized()?;
    Ok(a * terms.j_mae + b * terms.j_sim - c * terms.j_mi + d * terms.j_fi)
}

// Graph builders.

pub fn j_mae_node<T: Scalar>(g: &mut Graph<T>, y: NodeId, y_hat: NodeId) -> Result<NodeId> {
    if g.shape(y) != g.shape(y_hat) {
        return Err(shape_err(
            "j_mae_node",
            format!("{:?} vs {:?}", g.shape(y), g.shape(y_hat)),
        ));
    }
    let diff = g.sub(y, y_hat)?;
    let dist = g.row_l2_norm(diff)?;
    g.mean(dist)
}

fn normalize_rows_node<T: Scalar>(g: &mut Graph<T>, z: NodeId) -> Result<NodeId> {
    let n = g.row_l2_norm(z)?;
    let n = g.clamp(T::lit(NORM_EPS), T::infinity(), n)?;
    g.div(z, n)
}

pub fn mean_cosine_node<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err(
            "mean_cosine_node",
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    let an = normalize_rows_node(g, a)?;
    let bn = normalize_rows_node(g, b)?;
    let diff = g.sub(an, bn)?;
    let sq = g.square(diff)?;
    let per_row = g.sum_rows(sq)?;
    let mean = g.mean(per_row)?;
    let half = g.scale(T::lit(-0.5), mean)?;
    g.offset(T::one(), half)
}

pub fn j_sim_node<T: Scalar>(g: &mut Graph<T>, z_s: NodeId, z_g: NodeId, margin: T) -> Result<NodeId> {
    let c = mean_cosine_node(g, z_s, z_g)?;
    let c = g.clamp(-T::one(), T::one(), c)?;
    let angle = g.unary(UnaryOp::Acos, c)?;
    let angle = g.offset(margin, angle)?;
    let cos = g.unary(UnaryOp::Cos, angle)?;
    let neg = g.neg(cos)?;
    let loss = g.offset(T::one(), neg)?;
    g.relu(loss)
}

pub fn cyclic_shift_node<T: Scalar>(g: &mut Graph<T>, z: NodeId) -> Result<NodeId> {
    let (b, _) = g.shape(z);
    if b < 2 {
        return Err(invalid("cyclic shift pairing needs at least 2 rows"));
    }
    let tail = g.slice_rows(z, 1, b)?;
    let head = g.slice_rows(z, 0, 1)?;
    g.concat_rows(tail, head)
}

pub fn j_mi_term_node<T: Scalar>(g: &mut Graph<T>, joint: NodeId, product: NodeId) -> Result<NodeId> {
    let nj = g.neg(joint)?;
    let sp = g.softplus(nj)?;
    let pos = g.mean(sp)?;
    let sq = g.softplus(product)?;
    let neg = g.mean(sq)?;
    let pos = g.neg(pos)?;
    g.sub(pos, neg)
}

pub fn critic_loss_node<T: Scalar>(g: &mut Graph<T>, real: NodeId, fake: NodeId) -> Result<NodeId> {
    let r = g.mean(real)?;
    let f = g.mean(fake)?;
    g.sub(f, r)
}

pub fn generator_adv_loss_node<T: Scalar>(g: &mut Graph<T>, fake: NodeId) -> Result<NodeId> {
    let f = g.mean(fake)?;
    g.neg(f)
}

/// Gradient penalty on a dense critic chain, differentiable with respect
/// to the critic's weights.
pub fn gradient_penalty_node<T: Scalar>(
    g: &mut Graph<T>,
    critic: &[DenseNodes],
    real: NodeId,
    fake: NodeId,
    eps: NodeId,
) -> Result<NodeId> {
    let diff = g.sub(real, fake)?;
    let step = g.mul(eps, diff)?;
    let x_hat = g.add(fake, step)?;
    let (_, grad) = input_gradient_expression(g, critic, x_hat)?;
    let norm = g.row_l2_norm(grad)?;
    let dev = g.offset(-T::one(), norm)?;
    let sq = g.square(dev)?;
    g.mean(sq)
}

/// Weighted overall loss from optional term nodes. Terms that are `None`
/// are disabled and drop out of the weight normalization.
pub fn j_overall_node<T: Scalar>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    mae: NodeId,
    sim: Option<NodeId>,
    mi: Option<NodeId>,
    fi: Option<NodeId>,
) -> Result<NodeId> {
    let effective = LossWeights {
        mae: weights.mae,
        sim: if sim.is_some() { weights.sim } else { 0.0 },
        mi: if mi.is_some() { weights.mi } else { 0.0 },
        fi: if fi.is_some() { weights.fi } else { 0.0 },
    };
    let [a, b, c, d] = effective.normalized()?;
    let mut total = g.scale(T::lit(a), mae)?;
    for (node, w) in [(sim, b), (mi, -c), (fi, d)] {
        if let Some(n) = node {
            let term = g.scale(T::lit(w), n)?;
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}
