//! Expert training: fit a specialized network on one source dataset together
//! with a WGAN-GP surrogate teacher that models its representation space.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dense_forward, AdamState, Bindings, Graph};
use crate::data::{batch_indices, FingerprintDataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    critic_loss_node, generator_adv_loss_node, gradient_penalty_node, j_mae, j_mae_node, j_sim_node, mean_cosine,
    DEFAULT_GP_WEIGHT, DEFAULT_MARGIN,
};
use crate::nn::{
    build_critic, build_generator, build_specialized, Critic, Generator, Leaf, LocationScale, ModelDims, Module,
    SpecializedNetwork,
};
use crate::rng::{derive_seed, seeded, uniform_tensor, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Critic updates per joint update.
    pub c_step: usize,
    pub margin: f64,
    pub gp_weight: f64,
    /// Mixing of `j_mae(S)`, `j_mae(R(Z_G))` and `j_sim` in the generator loss.
    pub beta: [f64; 3],
    pub batch_size: usize,
    /// Adds `−mean C(Z_G)` to the generator loss.
    pub adversarial: bool,
    /// Set programmatically; run configs derive it from the master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            c_step: 5,
            margin: DEFAULT_MARGIN,
            gp_weight: DEFAULT_GP_WEIGHT,
            beta: [1.0; 3],
            batch_size: 128,
            adversarial: true,
            seed: 0,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_step == 0 {
            return Err(invalid("c_step must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return Err(invalid("gradient-penalty weight must be nonnegative"));
        }
        if !self.margin.is_finite() || self.beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(invalid("margin and beta weights must be finite, beta nonnegative"));
        }
        Ok(())
    }
}

/// Where a teacher came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub name: String,
    pub n_anchors: usize,
    pub seed: u64,
}

/// A trained surrogate teacher with the networks it was fitted against.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle<T> {
    pub generator: Generator<T>,
    pub critic: Critic<T>,
    pub specialized: SpecializedNetwork<T>,
    pub source: SourceInfo,
}

impl<T: Scalar> TeacherBundle<T> {
    pub fn d_repr(&self) -> usize {
        self.generator.d_repr()
    }

    /// Mean cosine similarity between `S`'s representations of `x` and a
    /// fresh generator batch of the same size.
    pub fn alignment(&self, x: &Tensor<T>, rng: &mut SeededRng) -> Result<f64> {
        let z_s = self.specialized.forward(x)?.z_e;
        let noise = self.generator.sample_noise(rng, x.rows());
        let z_g = self.generator.forward(&noise)?.z_e;
        Ok(mean_cosine(&z_s, &z_g)?.as_f64())
    }

    /// `j_mae(y, R(Z_G))` with one fresh noise row per location.
    pub fn generator_mae(&self, y: &Tensor<T>, rng: &mut SeededRng) -> Result<f64> {
        let noise = self.generator.sample_noise(rng, y.rows());
        let z_g = self.generator.forward(&noise)?.z_e;
        Ok(j_mae(y, &self.specialized.regress(&z_g)?)?.as_f64())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub mae_s: f64,
    pub mae_g: f64,
    pub sim: f64,
    pub adv: f64,
    pub generator_loss: f64,
}

/// Per-epoch means over batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertEpoch {
    pub epoch: usize,
    pub j_mae: f64,
    pub j_mae_g: f64,
    pub j_sim: f64,
    pub adv: f64,
    pub generator_loss: f64,
    pub critic_loss: f64,
    pub gradient_penalty: f64,
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// One Adam step of the critic on `critic_loss + gp_weight · penalty`, with
/// `Z_S^E(x)` as real and `Z_G^E(noise)` as fake samples.
#[allow(clippy::too_many_arguments)]
pub fn critic_update_step<T: Scalar>(
    critic: &mut Critic<T>,
    adam: &mut AdamState<T>,
    specialized: &SpecializedNetwork<T>,
    generator: &Generator<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    rng: &mut SeededRng,
    cfg: &ExpertConfig,
) -> Result<CriticReport> {
    let b = x.rows();
    if b < 2 || noise.rows() != b {
        return Err(invalid(format!(
            "critic step needs matching batches of >= 2 rows, got {b} and {}",
            noise.rows()
        )));
    }
    let real = specialized.forward(x)?.z_e;
    let fake = generator.forward(noise)?.z_e;
    let eps = uniform_tensor::<T>(rng, b, 1, 0.0, 1.0);
    let d = real.cols();

    let mut g = Graph::new();
    let r = g.input("real", b, d);
    let f = g.input("fake", b, d);
    let e = g.input("eps", b, 1);
    let layers = critic.net.leaves(&mut g, Leaf::Trainable);
    let cr = dense_forward(&mut g, &layers, r)?.output();
    let cf = dense_forward(&mut g, &layers, f)?.output();
    let w = critic_loss_node(&mut g, cr, cf)?;
    let (loss, gp) = if cfg.gp_weight > 0.0 {
        let gp = gradient_penalty_node(&mut g, &layers, r, f, e)?;
        let weighted = g.scale(T::lit(cfg.gp_weight), gp)?;
        (g.add(w, weighted)?, Some(gp))
    } else {
        (w, None)
    };

    let mut bind = Bindings::new();
    bind.bind("real", &real).bind("fake", &fake).bind("eps", &eps);
    critic.bind(&mut bind);
    g.forward(&bind)?;
    let report = CriticReport {
        loss: finite("critic loss", g.scalar_value(loss)?.as_f64())?,
        wasserstein: g.scalar_value(w)?.as_f64(),
        penalty: gp.map_or(Ok(0.0), |n| g.scalar_value(n).map(|v| v.as_f64()))?,
    };
    let grads = g.backward(loss)?;
    adam.step(critic.params_mut(), &grads, T::lit(cfg.lr))?;
    Ok(report)
}

/// Optimizers for one expert triple.
#[derive(Debug, Clone)]
pub struct ExpertOptimizers<T> {
    pub specialized: AdamState<T>,
    pub generator: AdamState<T>,
    pub critic: AdamState<T>,
}

impl<T: Scalar> Default for ExpertOptimizers<T> {
    fn default() -> Self {
        Self {
            specialized: AdamState::default(),
            generator: AdamState::default(),
            critic: AdamState::default(),
        }
    }
}

/// One joint step: `S` descends its own `j_mae`; `G` descends
/// `β1·j_mae(S) + β2·j_mae(R(Z_G)) + β3·j_sim(Z_S, Z_G) [− mean C(Z_G)]` with
/// `R` and `C` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn joint_update_step<T: Scalar>(
    specialized: &mut SpecializedNetwork<T>,
    generator: &mut Generator<T>,
    critic: &Critic<T>,
    opt: &mut ExpertOptimizers<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    noise: &Tensor<T>,
    cfg: &ExpertConfig,
) -> Result<JointReport> {
    let (b, n) = x.dims();
    if b < 2 || noise.rows() != b || y.rows() != b {
        return Err(invalid("joint step needs matching batches of >= 2 rows"));
    }
    let [b1, b2, b3] = cfg.beta;

    let mut gs = Graph::new();
    let xi = gs.input("x", b, n);
    let yi = gs.input("y", b, 2);
    let s_nodes = specialized.graph_forward(&mut gs, xi, Leaf::Trainable)?;
    let mae_s = j_mae_node(&mut gs, yi, s_nodes.y_hat)?;
    let mut bind = Bindings::new();
    bind.bind("x", x).bind("y", y);
    specialized.bind(&mut bind);
    gs.forward(&bind)?;
    let mae_s_value = finite("specialized j_mae", gs.scalar_value(mae_s)?.as_f64())?;
    let z_s = gs.value(s_nodes.z_e)?.clone();
    let grads_s = gs.backward(mae_s)?;

    let d = z_s.cols();
    let mut gg = Graph::new();
    let ni = gg.input("noise", b, noise.cols());
    let zsi = gg.input("z_s", b, d);
    let yi = gg.input("y", b, 2);
    let (_, z_g) = generator.graph_forward(&mut gg, ni, Leaf::Trainable)?;
    let y_g = specialized.graph_regress(&mut gg, z_g, Leaf::Frozen)?;
    let mae_g = j_mae_node(&mut gg, yi, y_g)?;
    let sim = j_sim_node(&mut gg, zsi, z_g, T::lit(cfg.margin))?;
    let t2 = gg.scale(T::lit(b2), mae_g)?;
    let t3 = gg.scale(T::lit(b3), sim)?;
    let mut loss = gg.add(t2, t3)?;
    let adv = if cfg.adversarial {
        let c = critic.net.graph_forward(&mut gg, z_g, Leaf::Frozen)?;
        let adv = generator_adv_loss_node(&mut gg, c)?;
        loss = gg.add(loss, adv)?;
        Some(adv)
    } else {
        None
    };
    let mut bind = Bindings::new();
    bind.bind("noise", noise).bind("z_s", &z_s).bind("y", y);
    generator.bind(&mut bind);
    specialized.bind(&mut bind);
    critic.bind(&mut bind);
    gg.forward(&bind)?;
    let rest = gg.scalar_value(loss)?.as_f64();
    let report = JointReport {
        mae_s: mae_s_value,
        mae_g: gg.scalar_value(mae_g)?.as_f64(),
        sim: gg.scalar_value(sim)?.as_f64(),
        adv: adv.map_or(Ok(0.0), |a| gg.scalar_value(a).map(|v| v.as_f64()))?,
        generator_loss: finite("generator loss", b1 * mae_s_value + rest)?,
    };
    let grads_g = gg.backward(loss)?;

    opt.specialized
        .step(specialized.params_mut(), &grads_s, T::lit(cfg.lr))?;
    opt.generator.step(generator.params_mut(), &grads_g, T::lit(cfg.lr))?;
    Ok(report)
}

/// Freshly initialized expert triple for a source with `n_anchors` inputs.
pub fn init_expert<T: Scalar>(
    n_anchors: usize,
    locations: &Tensor<T>,
    dims: &ModelDims,
    seed: u64,
) -> Result<(SpecializedNetwork<T>, Generator<T>, Critic<T>)> {
    let mut s = build_specialized(
        n_anchors,
        dims.hidden,
        dims.d_repr,
        derive_seed(seed, "expert.specialized"),
    )?;
    s.location = LocationScale::fit(locations);
    let g = build_generator(
        dims.d_noise,
        dims.hidden,
        dims.d_repr,
        derive_seed(seed, "expert.generator"),
    )?;
    let c = build_critic(dims.d_repr, dims.hidden, derive_seed(seed, "expert.critic"))?;
    Ok((s, g, c))
}

/// Runs `epochs × batches` of `c_step` critic updates followed by one joint
/// update. A trailing single-row batch is skipped.
pub fn train_expert<T: Scalar>(
    source: &FingerprintDataset<T>,
    name: &str,
    dims: &ModelDims,
    cfg: &ExpertConfig,
    mut on_epoch: impl FnMut(&ExpertEpoch),
) -> Result<TeacherBundle<T>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(invalid("source dataset is empty"));
    }
    let (mut s, mut g, mut c) = init_expert(source.n_anchors(), &source.y, dims, cfg.seed)?;
    let mut opt = ExpertOptimizers::default();
    let mut batch_rng = seeded(derive_seed(cfg.seed, "expert.batches"));
    let mut noise_rng = seeded(derive_seed(cfg.seed, "expert.noise"));
    let mut gp_rng = seeded(derive_seed(cfg.seed, "expert.penalty"));

    for epoch in 0..cfg.epochs {
        let mut sum = ExpertEpoch::default();
        let mut joint_steps = 0usize;
        let mut critic_steps = 0usize;
        for idx in batch_indices(source.len(), cfg.batch_size, &mut batch_rng) {
            if idx.len() < 2 {
                continue;
            }
            let x = source.x.select_rows(&idx);
            let y = source.y.select_rows(&idx);
            for _ in 0..cfg.c_step {
                let noise = g.sample_noise(&mut noise_rng, idx.len());
                let r = critic_update_step(&mut c, &mut opt.critic, &s, &g, &x, &noise, &mut gp_rng, cfg)?;
                sum.critic_loss += r.loss;
                sum.gradient_penalty += r.penalty;
                critic_steps += 1;
            }
            let noise = g.sample_noise(&mut noise_rng, idx.len());
            let r = joint_update_step(&mut s, &mut g, &c, &mut opt, &x, &y, &noise, cfg)?;
            sum.j_mae += r.mae_s;
            sum.j_mae_g += r.mae_g;
            sum.j_sim += r.sim;
            sum.adv += r.adv;
            sum.generator_loss += r.generator_loss;
            joint_steps += 1;
        }
        let jn = joint_steps.max(1) as f64;
        let cn = critic_steps.max(1) as f64;
        on_epoch(&ExpertEpoch {
            epoch,
            j_mae: sum.j_mae / jn,
            j_mae_g: sum.j_mae_g / jn,
            j_sim: sum.j_sim / jn,
            adv: sum.adv / jn,
            generator_loss: sum.generator_loss / jn,
            critic_loss: sum.critic_loss / cn,
            gradient_penalty: sum.gradient_penalty / cn,
        });
    }
    Ok(TeacherBundle {
        generator: g,
        critic: c,
        specialized: s,
        source: SourceInfo {
            name: name.to_string(),
            n_anchors: source.n_anchors(),
            seed: cfg.seed,
        },
    })
}
