//! Expert distilling: train a target specialized network against frozen
//! surrogate teachers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{dense_forward, AdamState, Bindings, Graph, NodeId};
use crate::data::{batch_indices, FingerprintDataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::expert::TeacherBundle;
use crate::lipschitz::{block_spectral_norm, block_spectral_norm_node, j_fi_node, TRAIN_ITERS};
use crate::losses::{
    cyclic_shift_node, j_mae_node, j_mi_term_node, j_overall_node, j_sim_node, LossTerms, LossWeights, TeacherTerms,
    DEFAULT_MARGIN,
};
use crate::nn::{
    build_mi_estimator, build_specialized, Leaf, LocationScale, MiEstimator, ModelDims, Module, SpecializedNetwork,
};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which teacher constraints join `J_MAE` in the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintMask {
    pub sim: bool,
    pub mi: bool,
    pub fi: bool,
}

impl ConstraintMask {
    pub const NONE: Self = Self {
        sim: false,
        mi: false,
        fi: false,
    };
    pub const ALL: Self = Self {
        sim: true,
        mi: true,
        fi: true,
    };

    pub fn any(&self) -> bool {
        self.sim || self.mi || self.fi
    }

    /// The six masks of the ablation grid, baseline first.
    pub fn ablation_grid() -> [Self; 6] {
        let m = |sim, mi, fi| Self { sim, mi, fi };
        [
            Self::NONE,
            m(true, false, false),
            m(false, true, false),
            m(true, true, false),
            m(false, false, true),
            Self::ALL,
        ]
    }

    /// Parses a comma-separated list such as `sim,mi`; empty means none.
    pub fn parse(s: &str) -> Result<Self> {
        let mut mask = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "sim" => mask.sim = true,
                "mi" => mask.mi = true,
                "fi" => mask.fi = true,
                "all" => mask = Self::ALL,
                "none" => {}
                other => return Err(invalid(format!("unknown constraint `{other}`"))),
            }
        }
        Ok(mask)
    }
}

impl fmt::Display for ConstraintMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.sim, "Sim"), (self.mi, "MI"), (self.fi, "FI")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub margin: f64,
    pub batch_size: usize,
    pub power_iters: usize,
    /// Set programmatically; run configs derive it from the master seed.
    #[serde(skip)]
    pub seed: u64,
    pub constraints: ConstraintMask,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            weights: LossWeights::default(),
            margin: DEFAULT_MARGIN,
            batch_size: 128,
            power_iters: TRAIN_ITERS,
            seed: 0,
            constraints: ConstraintMask::ALL,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch size must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.power_iters == 0 {
            return Err(invalid("power_iters must be >= 1"));
        }
        if !(self.weights.mae > 0.0) {
            return Err(invalid("the J_MAE weight must be positive"));
        }
        self.weights.normalized()?;
        if !self.margin.is_finite() {
            return Err(invalid("margin must be finite"));
        }
        Ok(())
    }
}

/// Forward pass of one distilling batch, ready for differentiation.
pub struct BatchLoss<T> {
    pub graph: Graph<T>,
    pub loss: NodeId,
    pub terms: LossTerms,
    pub value: f64,
}

/// Teacher-side quantities for one batch, computed outside the graph.
struct TeacherSide<T> {
    z_f: Tensor<T>,
    z_e: Tensor<T>,
}

/// Builds and evaluates the overall loss of one batch. `noise[i]` feeds
/// teacher `i`; `rng` seeds the power-iteration start vectors.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss<T: Scalar>(
    target: &SpecializedNetwork<T>,
    teachers: &[TeacherBundle<T>],
    psi: &MiEstimator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    noise: &[Tensor<T>],
    rng: &mut SeededRng,
    cfg: &DistillConfig,
) -> Result<BatchLoss<T>> {
    let mask = cfg.constraints;
    let (b, n) = x.dims();
    if y.rows() != b {
        return Err(shape_err(
            "distill batch",
            format!("{b} fingerprints, {} locations", y.rows()),
        ));
    }
    if mask.any() {
        if teachers.is_empty() {
            return Err(invalid("teacher constraints enabled but no teachers given"));
        }
        if noise.len() != teachers.len() {
            return Err(invalid(format!(
                "{} noise batches for {} teachers",
                noise.len(),
                teachers.len()
            )));
        }
        for (i, t) in teachers.iter().enumerate() {
            if t.d_repr() != target.d_repr() {
                return Err(shape_err(
                    "distill",
                    format!(
                        "teacher {i} has d_repr {} but the target has {}",
                        t.d_repr(),
                        target.d_repr()
                    ),
                ));
            }
        }
    }
    if mask.mi && b < 2 {
        return Err(invalid("J_MI needs batches of at least 2 rows"));
    }
    if mask.mi && psi.d_repr() != target.d_repr() {
        return Err(shape_err("distill", "MI estimator width does not match the target"));
    }

    let sides: Vec<TeacherSide<T>> = if mask.any() {
        teachers
            .iter()
            .zip(noise)
            .map(|(t, z)| {
                let out = t.generator.forward(z)?;
                Ok(TeacherSide {
                    z_f: out.z_f,
                    z_e: out.z_e,
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut g = Graph::new();
    let xi = g.input("x", b, n);
    let yi = g.input("y", b, 2);
    let s = target.graph_forward(&mut g, xi, Leaf::Trainable)?;
    let mae = j_mae_node(&mut g, yi, s.y_hat)?;

    let names: Vec<(String, String)> = (0..sides.len())
        .map(|i| (format!("teacher{i}.z_f"), format!("teacher{i}.z_e")))
        .collect();
    let z_g: Vec<NodeId> = sides
        .iter()
        .zip(&names)
        .map(|(side, (_, e))| g.input(e.as_str(), b, side.z_e.cols()))
        .collect();

    let mut sim_nodes = Vec::new();
    let mut sim_total = None;
    if mask.sim {
        for &zg in &z_g {
            let v = j_sim_node(&mut g, s.z_e, zg, T::lit(cfg.margin))?;
            sim_total = Some(match sim_total {
                Some(acc) => g.add(acc, v)?,
                None => v,
            });
            sim_nodes.push(v);
        }
    }

    let mut mi_nodes = Vec::new();
    let mut mi_total = None;
    if mask.mi {
        let layers = psi.net.leaves(&mut g, Leaf::Trainable);
        let shifted = cyclic_shift_node(&mut g, s.z_e)?;
        for &zg in &z_g {
            let joint_in = g.concat_cols(zg, s.z_e)?;
            let joint = dense_forward(&mut g, &layers, joint_in)?.output();
            let prod_in = g.concat_cols(zg, shifted)?;
            let product = dense_forward(&mut g, &layers, prod_in)?.output();
            let v = j_mi_term_node(&mut g, joint, product)?;
            mi_total = Some(match mi_total {
                Some(acc) => g.add(acc, v)?,
                None => v,
            });
            mi_nodes.push(v);
        }
    }

    let mut sn_g = Vec::new();
    let mut fi_total = None;
    let mut sn_s = None;
    if mask.fi {
        let node = block_spectral_norm_node(&mut g, s.z_f, s.z_e, cfg.power_iters, rng)?;
        for side in &sides {
            sn_g.push(block_spectral_norm(&side.z_f, &side.z_e, cfg.power_iters, rng)?);
        }
        fi_total = Some(j_fi_node(&mut g, node, &sn_g)?);
        sn_s = Some(node);
    }

    let loss = j_overall_node(&mut g, &cfg.weights, mae, sim_total, mi_total, fi_total)?;

    let mut bind = Bindings::new();
    bind.bind("x", x).bind("y", y);
    for (side, (_, e)) in sides.iter().zip(&names) {
        bind.bind(e.as_str(), &side.z_e);
    }
    target.bind(&mut bind);
    if mask.mi {
        psi.bind(&mut bind);
    }
    g.forward(&bind)?;

    let val =
        |g: &Graph<T>, n: Option<NodeId>| -> Result<f64> { n.map_or(Ok(0.0), |n| Ok(g.scalar_value(n)?.as_f64())) };
    let sn_s_value = val(&g, sn_s)?;
    let per_teacher = (0..sides.len())
        .map(|i| {
            Ok(TeacherTerms {
                j_sim: val(&g, sim_nodes.get(i).copied())?,
                j_mi: val(&g, mi_nodes.get(i).copied())?,
                j_fi: sn_g.get(i).map_or(0.0, |sn| (sn.as_f64() - sn_s_value).abs()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let terms = LossTerms {
        j_mae: g.scalar_value(mae)?.as_f64(),
        j_sim: val(&g, sim_total)?,
        j_mi: val(&g, mi_total)?,
        j_fi: val(&g, fi_total)?,
        per_teacher,
    };
    let value = g.scalar_value(loss)?.as_f64();
    if !value.is_finite() || !terms.is_finite() {
        return Err(Error::NonFinite(format!("distill loss {value} with terms {terms:?}")));
    }
    Ok(BatchLoss {
        graph: g,
        loss,
        terms,
        value,
    })
}

/// Overall loss and its terms for one batch.
#[allow(clippy::too_many_arguments)]
pub fn distill_batch_loss<T: Scalar>(
    target: &SpecializedNetwork<T>,
    teachers: &[TeacherBundle<T>],
    psi: &MiEstimator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    noise: &[Tensor<T>],
    rng: &mut SeededRng,
    cfg: &DistillConfig,
) -> Result<(f64, LossTerms)> {
    let b = build_batch_loss(target, teachers, psi, x, y, noise, rng, cfg)?;
    Ok((b.value, b.terms))
}

/// Per-epoch means over batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub terms: LossTerms,
    pub j_overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome<T> {
    pub specialized: SpecializedNetwork<T>,
    pub mi_estimator: MiEstimator<T>,
}

/// Target network and MI estimator before any update.
pub fn init_target<T: Scalar>(
    target: &FingerprintDataset<T>,
    dims: &ModelDims,
    seed: u64,
) -> Result<(SpecializedNetwork<T>, MiEstimator<T>)> {
    let mut s = build_specialized(
        target.n_anchors(),
        dims.hidden,
        dims.d_repr,
        derive_seed(seed, "distill.specialized"),
    )?;
    s.location = LocationScale::fit(&target.y);
    let psi = build_mi_estimator(dims.d_repr, dims.hidden, derive_seed(seed, "distill.mi"))?;
    Ok((s, psi))
}

/// Trains the target on `J_overall`. Teachers are only read. With no
/// constraint enabled the teacher list may be empty.
pub fn distill<T: Scalar>(
    target: &FingerprintDataset<T>,
    teachers: &[TeacherBundle<T>],
    dims: &ModelDims,
    cfg: &DistillConfig,
    mut on_epoch: impl FnMut(&DistillEpoch),
) -> Result<DistillOutcome<T>> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(invalid("target dataset is empty"));
    }
    if cfg.constraints.any() && teachers.is_empty() {
        return Err(invalid("distilling with constraints needs at least one teacher"));
    }
    let (mut s, mut psi) = init_target(target, dims, cfg.seed)?;
    let mut adam = AdamState::<T>::default();
    let mut batch_rng = seeded(derive_seed(cfg.seed, "distill.batches"));
    let mut noise_rng = seeded(derive_seed(cfg.seed, "distill.noise"));
    let mut power_rng = seeded(derive_seed(cfg.seed, "distill.power"));
    let lr = T::lit(cfg.lr);

    for epoch in 0..cfg.epochs {
        let mut sum = LossTerms::default();
        let mut overall = 0.0;
        let mut steps = 0usize;
        for idx in batch_indices(target.len(), cfg.batch_size, &mut batch_rng) {
            if idx.len() < 2 {
                continue;
            }
            let x = target.x.select_rows(&idx);
            let y = target.y.select_rows(&idx);
            let noise: Vec<Tensor<T>> = if cfg.constraints.any() {
                teachers
                    .iter()
                    .map(|t| t.generator.sample_noise(&mut noise_rng, idx.len()))
                    .collect()
            } else {
                Vec::new()
            };
            let batch = build_batch_loss(&s, teachers, &psi, &x, &y, &noise, &mut power_rng, cfg)?;
            let grads = batch.graph.backward(batch.loss)?;
            if cfg.constraints.mi {
                let params = s.params_mut().into_iter().chain(psi.params_mut());
                adam.step(params, &grads, lr)?;
            } else {
                adam.step(s.params_mut(), &grads, lr)?;
            }
            accumulate(&mut sum, &batch.terms);
            overall += batch.value;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        on_epoch(&DistillEpoch {
            epoch,
            terms: scale_terms(&sum, 1.0 / k),
            j_overall: overall / k,
        });
    }
    Ok(DistillOutcome {
        specialized: s,
        mi_estimator: psi,
    })
}

fn accumulate(sum: &mut LossTerms, t: &LossTerms) {
    sum.j_mae += t.j_mae;
    sum.j_sim += t.j_sim;
    sum.j_mi += t.j_mi;
    sum.j_fi += t.j_fi;
    if sum.per_teacher.len() < t.per_teacher.len() {
        sum.per_teacher.resize(t.per_teacher.len(), TeacherTerms::default());
    }
    for (a, b) in sum.per_teacher.iter_mut().zip(&t.per_teacher) {
        a.j_sim += b.j_sim;
        a.j_mi += b.j_mi;
        a.j_fi += b.j_fi;
    }
}

fn scale_terms(t: &LossTerms, k: f64) -> LossTerms {
    LossTerms {
        j_mae: t.j_mae * k,
        j_sim: t.j_sim * k,
        j_mi: t.j_mi * k,
        j_fi: t.j_fi * k,
        per_teacher: t
            .per_teacher
            .iter()
            .map(|p| TeacherTerms {
                j_sim: p.j_sim * k,
                j_mi: p.j_mi * k,
                j_fi: p.j_fi * k,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: ConstraintMask,
    pub report: EvalReport,
}

/// Distills once per mask with otherwise identical settings and evaluates
/// each result on `test`.
pub fn ablate<T: Scalar>(
    train: &FingerprintDataset<T>,
    test: &FingerprintDataset<T>,
    teachers: &[TeacherBundle<T>],
    dims: &ModelDims,
    cfg: &DistillConfig,
    masks: &[ConstraintMask],
) -> Result<Vec<AblationRow>> {
    if masks.is_empty() {
        return Err(invalid("ablation needs at least one mask"));
    }
    masks
        .iter()
        .map(|&mask| {
            let run = DistillConfig {
                constraints: mask,
                ..cfg.clone()
            };
            let out = distill(train, teachers, dims, &run, |_| {})?;
            Ok(AblationRow {
                mask,
                report: evaluate(&out.specialized, test)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_environment, normalize_rss, sample_fingerprints, EnvironmentConfig, RssNormalization};
    use crate::expert::{init_expert, SourceInfo};

    fn dims() -> ModelDims {
        ModelDims {
            hidden: 16,
            d_repr: 8,
            d_noise: 8,
        }
    }

    fn dataset(n_anchors: usize, m: usize, seed: u64) -> FingerprintDataset<f64> {
        let env = generate_environment(
            &EnvironmentConfig {
                n_anchors,
                ..Default::default()
            },
            seed,
        )
        .unwrap();
        normalize_rss(
            &sample_fingerprints(&env, m, seed + 7).unwrap(),
            RssNormalization::default(),
        )
        .unwrap()
    }

    fn teacher(n_anchors: usize, seed: u64) -> TeacherBundle<f64> {
        let src = dataset(n_anchors, 16, seed);
        let (s, g, c) = init_expert(n_anchors, &src.y, &dims(), seed).unwrap();
        TeacherBundle {
            generator: g,
            critic: c,
            specialized: s,
            source: SourceInfo {
                name: format!("src{seed}"),
                n_anchors,
                seed,
            },
        }
    }

    #[test]
    fn mask_parsing_and_labels() {
        assert_eq!(ConstraintMask::parse("").unwrap(), ConstraintMask::NONE);
        assert_eq!(ConstraintMask::parse("sim, MI").unwrap().to_string(), "{Sim, MI}");
        assert_eq!(ConstraintMask::parse("all").unwrap(), ConstraintMask::ALL);
        assert!(ConstraintMask::parse("kl").is_err());
        let grid = ConstraintMask::ablation_grid();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0], ConstraintMask::NONE);
        assert_eq!(grid[5], ConstraintMask::ALL);
    }

    #[test]
    fn mae_only_with_perfect_predictions_is_zero() {
        let data = dataset(5, 8, 1);
        let (s, psi) = init_target(&data, &dims(), 0).unwrap();
        let y = s.predict(&data.x).unwrap();
        let cfg = DistillConfig {
            constraints: ConstraintMask::NONE,
            ..Default::default()
        };
        let (loss, terms) = distill_batch_loss(&s, &[], &psi, &data.x, &y, &[], &mut seeded(0), &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(terms.j_mae, 0.0);
    }

    #[test]
    fn zeroed_estimator_gives_constant_mi_term() {
        let data = dataset(5, 8, 2);
        let (s, mut psi) = init_target(&data, &dims(), 0).unwrap();
        let last = psi.net.layers().len() - 1;
        for (name, p) in psi.params_mut() {
            if name.starts_with(&format!("Psi.{last}")) {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let teachers = vec![teacher(3, 1), teacher(4, 2)];
        let noise: Vec<_> = teachers
            .iter()
            .map(|t| t.generator.sample_noise(&mut seeded(3), 8))
            .collect();
        let cfg = DistillConfig {
            constraints: ConstraintMask {
                mi: true,
                ..ConstraintMask::NONE
            },
            ..Default::default()
        };
        let (_, terms) =
            distill_batch_loss(&s, &teachers, &psi, &data.x, &data.y, &noise, &mut seeded(0), &cfg).unwrap();
        for t in &terms.per_teacher {
            assert!((t.j_mi + 2.0 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let data = dataset(5, 8, 3);
        let (s, psi) = init_target(&data, &dims(), 0).unwrap();
        let mut t = teacher(3, 1);
        let wide = ModelDims { d_repr: 12, ..dims() };
        let src = dataset(3, 8, 9);
        t.generator = init_expert(3, &src.y, &wide, 1).unwrap().1;
        let noise = vec![t.generator.sample_noise(&mut seeded(0), 8)];
        let cfg = DistillConfig::default();
        assert!(distill_batch_loss(&s, &[t], &psi, &data.x, &data.y, &noise, &mut seeded(0), &cfg).is_err());
    }

    #[test]
    fn zero_epochs_leaves_target_at_initialization() {
        let data = dataset(5, 16, 4);
        let cfg = DistillConfig {
            epochs: 0,
            seed: 3,
            ..Default::default()
        };
        let out = distill(&data, &[teacher(3, 1)], &dims(), &cfg, |_| {}).unwrap();
        assert_eq!(out.specialized, init_target(&data, &dims(), 3).unwrap().0);
    }

    #[test]
    fn zero_teacher_weights_reduce_to_supervised_training() {
        let data = dataset(5, 40, 5);
        let teachers = vec![teacher(3, 1), teacher(6, 2)];
        let base = DistillConfig {
            epochs: 3,
            batch_size: 16,
            seed: 9,
            constraints: ConstraintMask::NONE,
            ..Default::default()
        };
        let zeroed = DistillConfig {
            weights: LossWeights::new(3.0, 0.0, 0.0, 0.0),
            constraints: ConstraintMask::ALL,
            ..base.clone()
        };
        let mut a = Vec::new();
        let out_a = distill(&data, &[], &dims(), &base, |e| a.push(e.terms.j_mae)).unwrap();
        let mut b = Vec::new();
        let out_b = distill(&data, &teachers, &dims(), &zeroed, |e| b.push(e.terms.j_mae)).unwrap();
        assert_eq!(a, b);
        assert_eq!(out_a.specialized, out_b.specialized);
    }

    #[test]
    fn teachers_untouched_and_runs_repeatable() {
        let data = dataset(5, 24, 6);
        let teachers = vec![teacher(3, 1), teacher(6, 2)];
        let before = teachers.clone();
        let cfg = DistillConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let mut la = Vec::new();
        let a = distill(&data, &teachers, &dims(), &cfg, |e| la.push(e.clone())).unwrap();
        let mut lb = Vec::new();
        let b = distill(&data, &teachers, &dims(), &cfg, |e| lb.push(e.clone())).unwrap();
        assert_eq!(teachers, before);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la[0].terms.per_teacher.len(), 2);
    }

    #[test]
    fn ablation_grid_emits_one_report_per_mask() {
        let train = dataset(5, 24, 7);
        let test = dataset(5, 12, 8);
        let cfg = DistillConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let rows = ablate(
            &train,
            &test,
            &[teacher(3, 1)],
            &dims(),
            &cfg,
            &ConstraintMask::ablation_grid(),
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        let baseline = distill(
            &train,
            &[],
            &dims(),
            &DistillConfig {
                constraints: ConstraintMask::NONE,
                ..cfg.clone()
            },
            |_| {},
        )
        .unwrap();
        assert_eq!(rows[0].report, evaluate(&baseline.specialized, &test).unwrap());
    }
}
