//! Fully connected network roles: the specialized network `S = {F, E, R}`,
//! the surrogate generator `G = {F, E}`, the Wasserstein critic and the
//! mutual-information estimator.
//!
//! Every network can run directly on tensors or be embedded in a [`Graph`]
//! with its weights as trainable parameters or frozen inputs. Both paths use
//! the same kernels, so their outputs agree bitwise.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dense_forward, Activation, Bindings, DenseNodes, Graph, NodeId};
use crate::error::{invalid, Result};
use crate::rng::{normal_tensor, seeded, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default widths for desk-scale runs.
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_REPR: usize = 64;
pub const DEFAULT_NOISE: usize = 64;

/// Layer widths shared by every network in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub hidden: usize,
    pub d_repr: usize,
    pub d_noise: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            d_repr: DEFAULT_REPR,
            d_noise: DEFAULT_NOISE,
        }
    }
}

/// Anything holding named parameter tensors.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<(&str, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)>;

    fn bind<'a>(&'a self, b: &mut Bindings<'a, T>) {
        for (name, t) in self.params() {
            b.bind(name, t);
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// How a network's weights enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaf {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
    weight_name: String,
    bias_name: String,
}

impl<T: Scalar> Dense<T> {
    fn init(name: &str, fan_in: usize, fan_out: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let std = match activation {
            Activation::Relu => (2.0 / fan_in as f64).sqrt(),
            _ => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        Self {
            weight: normal_tensor(rng, fan_in, fan_out, std),
            bias: Tensor::zeros(1, fan_out),
            activation,
            weight_name: format!("{name}.weight"),
            bias_name: format!("{name}.bias"),
        }
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        if bias.dims() != (1, weight.cols()) {
            return Err(invalid(format!(
                "{name}: bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
            weight_name: format!("{name}.weight"),
            bias_name: format!("{name}.bias"),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = x.matmul(&self.weight)?;
        let (r, c) = z.dims();
        let b = self.bias.data();
        let mut data = z.into_data();
        for i in 0..r {
            for j in 0..c {
                let v = data[i * c + j] + b[j];
                data[i * c + j] = self.activation.apply(v);
            }
        }
        Ok(Tensor::from_vec(r, c, data))
    }
}

/// A chain of dense layers under a common name prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    name: String,
    layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `dims = [in, h1, ..., out]`, one activation per layer.
    pub fn new(name: &str, dims: &[usize], activations: &[Activation], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || dims.len() != activations.len() + 1 {
            return Err(invalid(format!(
                "{name}: {} dims for {} layers",
                dims.len(),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(invalid(format!("{name}: widths must be >= 1, got {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(l, (w, &act))| Dense::init(&format!("{name}.{l}"), w[0], w[1], act, rng))
            .collect();
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn from_layers(name: &str, layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid(format!("{name}: no layers")));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(invalid(format!("{name}: layer widths do not chain")));
            }
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.in_dim() {
            return Err(invalid(format!(
                "{}: input width {} != {}",
                self.name,
                x.cols(),
                self.in_dim()
            )));
        }
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Registers this chain's weights as graph leaves.
    pub fn leaves(&self, g: &mut Graph<T>, leaf: Leaf) -> Vec<DenseNodes> {
        self.layers
            .iter()
            .map(|l| {
                let (wr, wc) = l.weight.dims();
                let (weight, bias) = match leaf {
                    Leaf::Trainable => (g.param(&l.weight_name, wr, wc), g.param(&l.bias_name, 1, wc)),
                    Leaf::Frozen => (g.input(&l.weight_name, wr, wc), g.input(&l.bias_name, 1, wc)),
                };
                DenseNodes {
                    weight,
                    bias,
                    activation: l.activation,
                }
            })
            .collect()
    }

    pub fn graph_forward(&self, g: &mut Graph<T>, x: NodeId, leaf: Leaf) -> Result<NodeId> {
        let nodes = self.leaves(g, leaf);
        Ok(dense_forward(g, &nodes, x)?.output())
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn params(&self) -> Vec<(&str, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|l| [(l.weight_name.as_str(), &l.weight), (l.bias_name.as_str(), &l.bias)])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    (l.weight_name.as_str(), &mut l.weight),
                    (l.bias_name.as_str(), &mut l.bias),
                ]
            })
            .collect()
    }
}

/// Fixed affine map from regressor output to meters:
/// `ŷ = raw · scale + center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationScale<T> {
    pub center: [T; 2],
    pub scale: T,
}

impl<T: Scalar> Default for LocationScale<T> {
    fn default() -> Self {
        Self {
            center: [T::zero(), T::zero()],
            scale: T::one(),
        }
    }
}

impl<T: Scalar> LocationScale<T> {
    /// Centers on the mean location and scales by the pooled standard
    /// deviation of the coordinates.
    pub fn fit(locations: &Tensor<T>) -> Self {
        let m = T::from_usize(locations.rows()).unwrap();
        let mut center = [T::zero(); 2];
        for i in 0..locations.rows() {
            for (k, c) in center.iter_mut().enumerate() {
                *c = *c + locations.get(i, k);
            }
        }
        center.iter_mut().for_each(|c| *c = *c / m);
        let mut var = T::zero();
        for i in 0..locations.rows() {
            for (k, c) in center.iter().enumerate() {
                let d = locations.get(i, k) - *c;
                var = var + d * d;
            }
        }
        let std = (var / (m + m)).sqrt();
        let scale = if std > T::lit(1e-9) { std } else { T::one() };
        Self { center, scale }
    }

    fn center_row(&self) -> Tensor<T> {
        Tensor::from_vec(1, 2, self.center.to_vec())
    }

    pub fn apply(&self, raw: &Tensor<T>) -> Tensor<T> {
        let scaled = raw.scale(self.scale);
        let (r, _) = scaled.dims();
        let mut data = scaled.into_data();
        for i in 0..r {
            for k in 0..2 {
                data[i * 2 + k] = data[i * 2 + k] + self.center[k];
            }
        }
        Tensor::from_vec(r, 2, data)
    }

    pub fn graph_apply(&self, g: &mut Graph<T>, raw: NodeId) -> Result<NodeId> {
        let scaled = g.scale(self.scale, raw)?;
        let c = g.constant(self.center_row());
        g.add(scaled, c)
    }
}

/// Outputs of a specialized forward pass.
#[derive(Debug, Clone)]
pub struct SpecializedOutput<T> {
    pub z_f: Tensor<T>,
    pub z_e: Tensor<T>,
    pub y_hat: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct SpecializedNodes {
    pub z_f: NodeId,
    pub z_e: NodeId,
    pub y_hat: NodeId,
}

/// Specialized localization network: Framer, Extractor, Regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecializedNetwork<T> {
    pub framer: Mlp<T>,
    pub extractor: Mlp<T>,
    pub regressor: Mlp<T>,
    pub location: LocationScale<T>,
}

impl<T: Scalar> SpecializedNetwork<T> {
    pub fn n_anchors(&self) -> usize {
        self.framer.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.framer.out_dim()
    }

    pub fn d_repr(&self) -> usize {
        self.extractor.out_dim()
    }

    pub fn frame(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.framer.forward(x)
    }

    pub fn extract(&self, z_f: &Tensor<T>) -> Result<Tensor<T>> {
        self.extractor.forward(z_f)
    }

    /// Regressor including the fixed location scaling.
    pub fn regress(&self, z_e: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.location.apply(&self.regressor.forward(z_e)?))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<SpecializedOutput<T>> {
        let z_f = self.frame(x)?;
        let z_e = self.extract(&z_f)?;
        let y_hat = self.regress(&z_e)?;
        Ok(SpecializedOutput { z_f, z_e, y_hat })
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.y_hat)
    }

    pub fn graph_forward(&self, g: &mut Graph<T>, x: NodeId, leaf: Leaf) -> Result<SpecializedNodes> {
        let z_f = self.framer.graph_forward(g, x, leaf)?;
        let z_e = self.extractor.graph_forward(g, z_f, leaf)?;
        let y_hat = self.graph_regress(g, z_e, leaf)?;
        Ok(SpecializedNodes { z_f, z_e, y_hat })
    }

    pub fn graph_regress(&self, g: &mut Graph<T>, z_e: NodeId, leaf: Leaf) -> Result<NodeId> {
        let raw = self.regressor.graph_forward(g, z_e, leaf)?;
        self.location.graph_apply(g, raw)
    }
}

impl<T: Scalar> Module<T> for SpecializedNetwork<T> {
    fn params(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut p = self.framer.params();
        p.extend(self.extractor.params());
        p.extend(self.regressor.params());
        p
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let mut p = self.framer.params_mut();
        p.extend(self.extractor.params_mut());
        p.extend(self.regressor.params_mut());
        p
    }
}

/// Surrogate teacher generator; layer 1 is `F^G`, layers 2-3 are `E^G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub framer: Mlp<T>,
    pub extractor: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput<T> {
    pub z_f: Tensor<T>,
    pub z_e: Tensor<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn d_noise(&self) -> usize {
        self.framer.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.framer.out_dim()
    }

    pub fn d_repr(&self) -> usize {
        self.extractor.out_dim()
    }

    pub fn forward(&self, noise: &Tensor<T>) -> Result<GeneratorOutput<T>> {
        let z_f = self.framer.forward(noise)?;
        let z_e = self.extractor.forward(&z_f)?;
        Ok(GeneratorOutput { z_f, z_e })
    }

    pub fn graph_forward(&self, g: &mut Graph<T>, noise: NodeId, leaf: Leaf) -> Result<(NodeId, NodeId)> {
        let z_f = self.framer.graph_forward(g, noise, leaf)?;
        let z_e = self.extractor.graph_forward(g, z_f, leaf)?;
        Ok((z_f, z_e))
    }

    /// Standard normal noise batch.
    pub fn sample_noise(&self, rng: &mut SeededRng, batch: usize) -> Tensor<T> {
        normal_tensor(rng, batch, self.d_noise(), 1.0)
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn params(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut p = self.framer.params();
        p.extend(self.extractor.params());
        p
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let mut p = self.framer.params_mut();
        p.extend(self.extractor.params_mut());
        p
    }
}

/// Wasserstein critic: one logit per representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn d_repr(&self) -> usize {
        self.net.in_dim()
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.forward(z)
    }
}

impl<T: Scalar> Module<T> for Critic<T> {
    fn params(&self) -> Vec<(&str, &Tensor<T>)> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        self.net.params_mut()
    }
}

/// Statistics network on concatenated `(teacher, target)` representation
/// pairs, shared across all teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct MiEstimator<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> MiEstimator<T> {
    pub fn d_repr(&self) -> usize {
        self.net.in_dim() / 2
    }

    pub fn forward(&self, z_teacher: &Tensor<T>, z_target: &Tensor<T>) -> Result<Tensor<T>> {
        if z_teacher.cols() != self.d_repr() || z_target.cols() != self.d_repr() {
            return Err(invalid("MI estimator: representation width mismatch"));
        }
        self.net.forward(&Tensor::concat_cols(z_teacher, z_target)?)
    }

    pub fn graph_forward(&self, g: &mut Graph<T>, z_teacher: NodeId, z_target: NodeId, leaf: Leaf) -> Result<NodeId> {
        let pair = g.concat_cols(z_teacher, z_target)?;
        self.net.graph_forward(g, pair, leaf)
    }
}

impl<T: Scalar> Module<T> for MiEstimator<T> {
    fn params(&self) -> Vec<(&str, &Tensor<T>)> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        self.net.params_mut()
    }
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(invalid(format!("{what} must be >= 1")))
    } else {
        Ok(())
    }
}

pub fn build_specialized<T: Scalar>(
    n_anchors: usize,
    h: usize,
    d_repr: usize,
    seed: u64,
) -> Result<SpecializedNetwork<T>> {
    build_specialized_named("S", n_anchors, h, d_repr, seed)
}

/// As [`build_specialized`] with a custom parameter-name prefix, so that
/// several specialized networks can share one graph.
pub fn build_specialized_named<T: Scalar>(
    prefix: &str,
    n_anchors: usize,
    h: usize,
    d_repr: usize,
    seed: u64,
) -> Result<SpecializedNetwork<T>> {
    positive("n_anchors", n_anchors)?;
    positive("hidden width", h)?;
    positive("d_repr", d_repr)?;
    let mut rng = seeded(seed);
    use Activation::*;
    Ok(SpecializedNetwork {
        framer: Mlp::new(&format!("{prefix}.framer"), &[n_anchors, h], &[Relu], &mut rng)?,
        extractor: Mlp::new(&format!("{prefix}.extractor"), &[h, h, d_repr], &[Relu, Relu], &mut rng)?,
        regressor: Mlp::new(&format!("{prefix}.regressor"), &[d_repr, 2], &[Identity], &mut rng)?,
        location: LocationScale::default(),
    })
}

pub fn build_generator<T: Scalar>(d_noise: usize, h: usize, d_repr: usize, seed: u64) -> Result<Generator<T>> {
    build_generator_named("G", d_noise, h, d_repr, seed)
}

pub fn build_generator_named<T: Scalar>(
    prefix: &str,
    d_noise: usize,
    h: usize,
    d_repr: usize,
    seed: u64,
) -> Result<Generator<T>> {
    positive("d_noise", d_noise)?;
    positive("hidden width", h)?;
    positive("d_repr", d_repr)?;
    let mut rng = seeded(seed);
    use Activation::*;
    Ok(Generator {
        framer: Mlp::new(&format!("{prefix}.framer"), &[d_noise, h], &[Relu], &mut rng)?,
        extractor: Mlp::new(
            &format!("{prefix}.extractor"),
            &[h, h, d_repr],
            &[Relu, Identity],
            &mut rng,
        )?,
    })
}

pub fn build_critic<T: Scalar>(d_repr: usize, h: usize, seed: u64) -> Result<Critic<T>> {
    build_critic_named("C", d_repr, h, seed)
}

pub fn build_critic_named<T: Scalar>(prefix: &str, d_repr: usize, h: usize, seed: u64) -> Result<Critic<T>> {
    positive("d_repr", d_repr)?;
    positive("hidden width", h)?;
    let mut rng = seeded(seed);
    use Activation::*;
    Ok(Critic {
        net: Mlp::new(prefix, &[d_repr, h, h, 1], &[Relu, Relu, Identity], &mut rng)?,
    })
}

pub fn build_mi_estimator<T: Scalar>(d_repr: usize, h: usize, seed: u64) -> Result<MiEstimator<T>> {
    positive("d_repr", d_repr)?;
    positive("hidden width", h)?;
    let mut rng = seeded(seed);
    use Activation::*;
    Ok(MiEstimator {
        net: Mlp::new("Psi", &[2 * d_repr, h, h, 1], &[Relu, Relu, Identity], &mut rng)?,
    })
}

/// Rejects generators whose representation width differs from the target's.
pub fn check_homogeneous<T: Scalar>(target: &SpecializedNetwork<T>, generators: &[&Generator<T>]) -> Result<()> {
    for (i, g) in generators.iter().enumerate() {
        if g.d_repr() != target.d_repr() {
            return Err(invalid(format!(
                "generator {i} has d_repr {} but the target has {}",
                g.d_repr(),
                target.d_repr()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specialized_shapes_and_determinism() {
        let s = build_specialized::<f64>(520, 128, 64, 3).unwrap();
        assert_eq!(s.d_repr(), 64);
        let x = Tensor::zeros(4, 520);
        let out = s.forward(&x).unwrap();
        assert_eq!(out.z_f.dims(), (4, 128));
        assert_eq!(out.z_e.dims(), (4, 64));
        assert_eq!(out.y_hat.dims(), (4, 2));
        assert!(out.y_hat.is_finite());
        assert_eq!(s, build_specialized::<f64>(520, 128, 64, 3).unwrap());
        assert_ne!(s, build_specialized::<f64>(520, 128, 64, 4).unwrap());
    }

    #[test]
    fn generator_critic_estimator_shapes() {
        let g = build_generator::<f64>(64, 128, 64, 1).unwrap();
        let mut rng = seeded(0);
        let out = g.forward(&g.sample_noise(&mut rng, 128)).unwrap();
        assert_eq!(out.z_f.cols(), 128);
        assert_eq!(out.z_e.cols(), 64);
        let c = build_critic::<f64>(64, 128, 2).unwrap();
        assert_eq!(c.forward(&out.z_e).unwrap().dims(), (128, 1));
        let psi = build_mi_estimator::<f64>(64, 128, 3).unwrap();
        assert_eq!(psi.forward(&out.z_e, &out.z_e).unwrap().dims(), (128, 1));
    }

    #[test]
    fn zero_widths_rejected() {
        assert!(build_specialized::<f64>(0, 8, 4, 0).is_err());
        assert!(build_generator::<f64>(4, 0, 4, 0).is_err());
        assert!(build_critic::<f64>(4, 8, 0).is_ok());
    }

    #[test]
    fn homogeneity_enforced() {
        let s = build_specialized::<f64>(8, 16, 8, 0).unwrap();
        let good = build_generator::<f64>(4, 16, 8, 0).unwrap();
        let bad = build_generator::<f64>(4, 16, 6, 0).unwrap();
        assert!(check_homogeneous(&s, &[&good]).is_ok());
        assert!(check_homogeneous(&s, &[&good, &bad]).is_err());
    }

    #[test]
    fn split_forward_matches_monolithic_and_graph() {
        let mut s = build_specialized::<f64>(6, 10, 5, 9).unwrap();
        s.location = LocationScale {
            center: [3.0, -1.0],
            scale: 2.5,
        };
        let mut rng = seeded(1);
        let x = normal_tensor::<f64>(&mut rng, 7, 6, 1.0);
        let mono = s.forward(&x).unwrap();
        let zf = s.frame(&x).unwrap();
        let ze = s.extract(&zf).unwrap();
        let y = s.regress(&ze).unwrap();
        assert_eq!(mono.y_hat.data(), y.data());

        let mut g = Graph::new();
        let xin = g.input("x", 7, 6);
        let nodes = s.graph_forward(&mut g, xin, Leaf::Trainable).unwrap();
        let mut b = Bindings::new();
        b.bind("x", &x);
        s.bind(&mut b);
        g.forward(&b).unwrap();
        assert_eq!(g.value(nodes.y_hat).unwrap().data(), y.data());
        assert_eq!(g.value(nodes.z_e).unwrap().data(), ze.data());
    }
}
