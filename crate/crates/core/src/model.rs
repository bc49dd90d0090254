//! Fully connected regression network with context vectors concatenated into
//! the activations of chosen layers.
//!
//! Layer `l` receives the previous activations (the raw input for `l = 0`)
//! followed by every context injected at `l`, in context order. Hidden layers
//! use the configured activation; the output layer is linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Array, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("network.input_dim", "must be at least 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::config("network.output_dim", "must be at least 1"));
        }
        if self.hidden.is_empty() {
            return Err(Error::config("network.hidden", "at least one hidden layer is required"));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("network.hidden[{i}]"), "width must be at least 1"));
        }
        Ok(())
    }
}

/// One context vector: its size, where it is concatenated, and which task
/// factors it is meant to encode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSlot {
    pub size: usize,
    /// 0 concatenates with the input, `l` with the activations of hidden layer `l`.
    #[serde(default)]
    pub layer: usize,
    /// Names of the task factors this context owns.
    pub factors: Vec<String>,
}

impl ContextSlot {
    pub fn new(size: usize, layer: usize, factors: &[&str]) -> Self {
        Self {
            size,
            layer,
            factors: factors.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn label(&self) -> String {
        format!("[{}]", self.factors.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub slots: Vec<ContextSlot>,
}

impl ContextSpec {
    pub fn new(slots: Vec<ContextSlot>) -> Self {
        Self { slots }
    }

    /// A single context of `size` parameters at the input, owning `factors`.
    pub fn single(size: usize, factors: &[&str]) -> Self {
        Self::new(vec![ContextSlot::new(size, 0, factors)])
    }

    /// An empty spec, for models without contexts (MAML, ANIL).
    pub fn none() -> Self {
        Self::new(Vec::new())
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.size).collect()
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.size == 0 {
                return Err(Error::config(
                    format!("contexts.slots[{i}].size"),
                    "context vectors need at least one parameter",
                ));
            }
            if slot.layer > net.hidden.len() {
                return Err(Error::config(
                    format!("contexts.slots[{i}].layer"),
                    format!(
                        "injection layer {} exceeds hidden layer count {}",
                        slot.layer,
                        net.hidden.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Network plus context layout; the shape contract shared by parameters,
/// context banks and the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub network: NetworkConfig,
    pub contexts: ContextSpec,
}

impl Architecture {
    pub fn new(network: NetworkConfig, contexts: ContextSpec) -> Result<Self> {
        network.validate()?;
        contexts.validate(&network)?;
        Ok(Self { network, contexts })
    }

    pub fn num_layers(&self) -> usize {
        self.network.hidden.len() + 1
    }

    /// `(input extent, output extent)` of each layer's weight matrix.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let net = &self.network;
        let mut widths = vec![net.input_dim];
        widths.extend(&net.hidden);
        (0..self.num_layers())
            .map(|l| {
                let ctx: usize = self
                    .contexts
                    .slots
                    .iter()
                    .filter(|s| s.layer == l)
                    .map(|s| s.size)
                    .sum();
                let out = if l < net.hidden.len() {
                    net.hidden[l]
                } else {
                    net.output_dim
                };
                (widths[l] + ctx, out)
            })
            .collect()
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                LayerParams {
                    weight: Array::from_parts(vec![fan_in, fan_out], w),
                    bias: Array::zeros(&[1, fan_out]),
                }
            })
            .collect();
        ParamSet { layers }
    }

    pub fn zero_contexts(&self) -> ContextBank {
        ContextBank::zeros(&self.contexts)
    }

    /// Forward pass on graph values. `x` is `(batch, input_dim)`.
    pub fn forward(&self, layers: &[LayerVars], contexts: &[Tensor], x: &Tensor) -> Result<Tensor> {
        if layers.len() != self.num_layers() {
            return Err(Error::shape(
                "forward",
                format!("{} layers for a {}-layer network", layers.len(), self.num_layers()),
            ));
        }
        if contexts.len() != self.contexts.k() {
            return Err(Error::shape(
                "forward",
                format!("{} context vectors for {} slots", contexts.len(), self.contexts.k()),
            ));
        }
        for (i, (c, slot)) in contexts.iter().zip(&self.contexts.slots).enumerate() {
            if c.shape() != [1, slot.size] {
                return Err(Error::shape(
                    "forward",
                    format!("context {i} has shape {:?}, expected [1, {}]", c.shape(), slot.size),
                ));
            }
        }
        let n = match x.shape() {
            [n, d] if *d == self.network.input_dim => *n,
            other => {
                return Err(Error::shape(
                    "forward",
                    format!("input {other:?}, expected (batch, {})", self.network.input_dim),
                ))
            }
        };

        let hidden = self.network.hidden.len();
        let mut h = x.clone();
        for (l, layer) in layers.iter().enumerate() {
            let injected: Vec<Tensor> = self
                .contexts
                .slots
                .iter()
                .zip(contexts)
                .filter(|(s, _)| s.layer == l)
                .map(|(_, c)| c.broadcast_rows(n))
                .collect::<Result<_>>()?;
            let input = if injected.is_empty() {
                h
            } else {
                let mut parts = vec![&h];
                parts.extend(injected.iter());
                concat_cols(&parts)?
            };
            let z = input.matmul(&layer.weight)?.add_row(&layer.bias)?;
            h = if l < hidden { z.relu()? } else { z };
        }
        Ok(h)
    }

    /// Forward pass on plain values.
    pub fn predict(&self, params: &ParamSet, contexts: &ContextBank, x: &Array) -> Result<Array> {
        let out = self.forward(
            &params.constants(),
            &contexts.constants(),
            &Tensor::constant(x.clone()),
        )?;
        Ok(out.to_array())
    }
}

/// Mean of squared residuals.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.value().numel() == 0 {
        return Err(Error::shape("mse_loss", "empty batch"));
    }
    pred.sub(target)?.square()?.mean()
}

/// Weights are stored `(input extent, output extent)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Array,
    pub bias: Array,
}

/// Shared network parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

/// A layer's weight and bias as graph values.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerVars {
    pub fn both(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }
}

impl ParamSet {
    pub fn leaves(&self, tape: &Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
            })
            .collect()
    }

    pub fn constants(&self) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: Tensor::constant(l.weight.clone()),
                bias: Tensor::constant(l.bias.clone()),
            })
            .collect()
    }

    /// Weight and bias of every layer, in layer order.
    pub fn arrays(&self) -> impl Iterator<Item = &Array> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays().map(Array::numel).sum()
    }

    /// Order-sensitive hash of every value's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for a in self.arrays() {
            for v in a.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl LayerVars {
    pub fn to_params(&self) -> LayerParams {
        LayerParams {
            weight: self.weight.to_array(),
            bias: self.bias.to_array(),
        }
    }
}

/// The `K` context vectors, each stored as a `(1, size)` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextBank {
    pub vectors: Vec<Array>,
}

impl ContextBank {
    pub fn zeros(spec: &ContextSpec) -> Self {
        Self {
            vectors: spec
                .slots
                .iter()
                .map(|s| Array::zeros(&[1, s.size]))
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn constants(&self) -> Vec<Tensor> {
        self.vectors.iter().cloned().map(Tensor::constant).collect()
    }

    pub fn from_tensors(ts: &[Tensor]) -> Self {
        Self {
            vectors: ts.iter().map(Tensor::to_array).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.iter().all(|v| v.data().iter().all(|&x| x == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(hidden: &[usize], slots: Vec<ContextSlot>) -> Architecture {
        Architecture::new(NetworkConfig::mlp(1, hidden, 1), ContextSpec::new(slots)).unwrap()
    }

    #[test]
    fn first_layer_extent_counts_input_contexts() {
        let a = arch(
            &[40, 40],
            vec![ContextSlot::new(3, 0, &["A"]), ContextSlot::new(3, 0, &["P"])],
        );
        let p = a.init_params(0);
        assert_eq!(p.layers[0].weight.shape(), &[7, 40]);
        assert_eq!(p.layers[1].weight.shape(), &[40, 40]);
        assert_eq!(p.layers[2].weight.shape(), &[40, 1]);
    }

    #[test]
    fn cavia_six_parameter_context() {
        let a = arch(&[40, 40], vec![ContextSlot::new(6, 0, &["A", "P"])]);
        assert_eq!(a.init_params(3).layers[0].weight.shape(), &[7, 40]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = arch(&[40, 40], vec![ContextSlot::new(6, 0, &["A", "P"])]);
        let p = a.init_params(11);
        assert_eq!(p, a.init_params(11));
        assert_ne!(p, a.init_params(12));
        for (l, (fan_in, _)) in p.layers.iter().zip(a.layer_shapes()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() < bound));
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn routed_injection_shapes() {
        // amplitude at layer 1, y-shift at layer 2, phase with the input
        let a = Architecture::new(
            NetworkConfig::mlp(1, &[40, 40, 40, 40], 1),
            ContextSpec::new(vec![
                ContextSlot::new(3, 1, &["A"]),
                ContextSlot::new(3, 2, &["Y"]),
                ContextSlot::new(3, 0, &["P"]),
            ]),
        )
        .unwrap();
        let shapes: Vec<usize> = a.layer_shapes().iter().map(|s| s.0).collect();
        assert_eq!(shapes, vec![4, 43, 43, 40, 40]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(NetworkConfig::mlp(1, &[], 1).validate().is_err());
        assert!(NetworkConfig::mlp(1, &[40, 0], 1).validate().is_err());
        let net = NetworkConfig::mlp(1, &[40, 40], 1);
        let too_deep = ContextSpec::new(vec![ContextSlot::new(2, 3, &["A"])]);
        assert!(matches!(too_deep.validate(&net), Err(Error::Config { .. })));
        let empty = ContextSpec::new(vec![ContextSlot::new(0, 0, &["A"])]);
        let err = empty.validate(&net).unwrap_err().to_string();
        assert!(err.contains("slots[0].size"), "{err}");
    }

    #[test]
    fn batch_in_batch_out() {
        let a = arch(&[40, 40], vec![ContextSlot::new(3, 0, &["A"])]);
        let p = a.init_params(1);
        let x = Array::column((0..100).map(|i| i as f64 / 10.0 - 5.0).collect());
        let y = a.predict(&p, &a.zero_contexts(), &x).unwrap();
        assert_eq!(y.shape(), &[100, 1]);
    }

    #[test]
    fn forward_rejects_wrong_context_shape() {
        let a = arch(&[8], vec![ContextSlot::new(3, 0, &["A"])]);
        let p = a.init_params(1);
        let bad = ContextBank {
            vectors: vec![Array::zeros(&[1, 2])],
        };
        assert!(a.predict(&p, &bad, &Array::column(vec![0.0])).is_err());
    }

    #[test]
    fn mse_examples() {
        let t = |v: Vec<f64>| Tensor::constant(Array::column(v));
        assert_eq!(mse_loss(&t(vec![1.0, 2.0]), &t(vec![1.0, 2.0])).unwrap().item(), 0.0);
        assert_eq!(mse_loss(&t(vec![0.0, 0.0]), &t(vec![1.0, 3.0])).unwrap().item(), 5.0);
        assert!(mse_loss(&t(vec![]), &t(vec![])).is_err());
        assert!(mse_loss(&t(vec![1.0]), &t(vec![1.0, 2.0])).is_err());
    }
}
