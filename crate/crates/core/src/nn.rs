//! Layers and sequential composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{conv_out_extent, deconv_out_extent, Gradients, ParamKey, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Tanh,
    Sigmoid,
    /// `0.5 · (tanh(x) + 1)`, mapping onto `(0, 1)`.
    UnitTanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { inputs: usize, units: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Deconv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Reshape { shape: Vec<usize> },
    Activation { activation: Activation },
    /// Learned per-feature (per-channel for images) scale and shift.
    BatchAffine { features: usize },
}

impl LayerSpec {
    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, units } => {
                if input != [*inputs] {
                    return dim_err(format!("dense({inputs}->{units}) fed {input:?}"));
                }
                Ok(vec![*units])
            }
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => {
                let [c, h, w] = input else {
                    return dim_err(format!("conv fed non-image shape {input:?}"));
                };
                if c != in_channels {
                    return dim_err(format!("conv expects {in_channels} channels, got {c}"));
                }
                match (conv_out_extent(*h, *kernel, *stride, *pad), conv_out_extent(*w, *kernel, *stride, *pad)) {
                    (Some(oh), Some(ow)) => Ok(vec![*out_channels, oh, ow]),
                    _ => dim_err(format!("conv kernel {kernel} larger than padded {h}x{w}")),
                }
            }
            LayerSpec::Deconv { in_channels, out_channels, kernel, stride, pad } => {
                let [c, h, w] = input else {
                    return dim_err(format!("deconv fed non-image shape {input:?}"));
                };
                if c != in_channels {
                    return dim_err(format!("deconv expects {in_channels} channels, got {c}"));
                }
                match (deconv_out_extent(*h, *kernel, *stride, *pad), deconv_out_extent(*w, *kernel, *stride, *pad)) {
                    (Some(oh), Some(ow)) => Ok(vec![*out_channels, oh, ow]),
                    _ => dim_err(format!("deconv of {h}x{w} is empty")),
                }
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return dim_err(format!("reshape {input:?} -> {shape:?} changes element count"));
                }
                Ok(shape.clone())
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::BatchAffine { features } => {
                if input.first() != Some(features) {
                    return dim_err(format!("batch-affine over {features} features fed {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Parameter shapes in registration order.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, units } => vec![vec![*inputs, *units], vec![*units]],
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => vec![
                vec![*out_channels, *in_channels, *kernel, *kernel],
                vec![*out_channels, 1, 1],
            ],
            LayerSpec::Deconv { in_channels, out_channels, kernel, .. } => vec![
                vec![*in_channels, *out_channels, *kernel, *kernel],
                vec![*out_channels, 1, 1],
            ],
            LayerSpec::BatchAffine { features } => {
                let mut s = vec![*features];
                s.extend(std::iter::repeat_n(1, input.len().saturating_sub(1)));
                vec![s.clone(), s]
            }
            LayerSpec::Reshape { .. } | LayerSpec::Activation { .. } => vec![],
        }
    }

    /// He fan-in. For transposed convolutions each output receives
    /// `in · (k / stride)²` contributions.
    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerSpec::Deconv { in_channels, kernel, stride, .. } => {
                (in_channels * kernel * kernel / (stride * stride)).max(1)
            }
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar = f32> {
    pub spec: LayerSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Weights ~ N(0, 2 / fan_in), biases and shifts zero, scales one.
    pub fn init_params(spec: LayerSpec, input: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let shapes = spec.param_shapes(input);
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match (&spec, i) {
                (LayerSpec::BatchAffine { .. }, 0) => vec![T::one(); n],
                (_, 0) => (0..n).map(|_| T::lit(normal.sample(rng))).collect(),
                _ => vec![T::zero(); n],
            };
            params.push(Tensor::parameter(shape, data)?);
        }
        Ok(Self { spec, params })
    }

    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, group: u16, first: u32) -> Result<Var<'t, T>> {
        let p = |i: usize| tape.param(ParamKey::new(group, first + i as u32), &self.params[i]);
        match &self.spec {
            LayerSpec::Dense { .. } => x.matmul(p(0))?.add(p(1)),
            LayerSpec::Conv { stride, pad, .. } => x.conv2d(p(0), *stride, *pad)?.add(p(1)),
            LayerSpec::Deconv { stride, pad, .. } => x.deconv2d(p(0), *stride, *pad)?.add(p(1)),
            LayerSpec::Reshape { shape } => {
                let mut full = vec![x.shape()[0]];
                full.extend_from_slice(shape);
                x.reshape(&full)
            }
            LayerSpec::Activation { activation } => match activation {
                Activation::Relu => x.relu(),
                Activation::LeakyRelu { alpha } => x.leaky_relu(*alpha),
                Activation::Tanh => x.tanh(),
                Activation::Sigmoid => x.sigmoid(),
                Activation::UnitTanh => Ok(x.tanh()?.affine(0.5, 0.5)),
            },
            LayerSpec::BatchAffine { .. } => x.mul(p(0))?.add(p(1)),
        }
    }
}

/// Anything owning parameter tensors addressable by [`ParamKey`].
pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &str, &Tensor<T>));

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>>;

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.numel());
        n
    }

    fn keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        self.visit(&mut |k, _, _| keys.push(k));
        keys
    }
}

/// Ordered layers with a declared per-example input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T: Scalar = f32> {
    name: String,
    group: u16,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    names: Vec<String>,
}

impl<T: Scalar> Sequential<T> {
    /// Builds and initializes a network; shapes are checked layer by layer.
    pub fn new(
        name: &str,
        group: u16,
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let next = spec.output_shape(&shape)?;
            layers.push(Layer::init_params(spec, &shape, &mut rng)?);
            shape = next;
        }
        let names = param_names(name, &layers);
        Ok(Self {
            name: name.to_string(),
            group,
            input_shape,
            output_shape: shape,
            layers,
            names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> u16 {
        self.group
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    fn check_input(&self, x: &Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return dim_err(format!(
                "{} expects [N, {:?}] input, got {shape:?}",
                self.name, self.input_shape
            ));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x)?;
        let mut h = x;
        let mut first = 0u32;
        for layer in &self.layers {
            h = layer.forward(tape, h, self.group, first)?;
            first += layer.params.len() as u32;
        }
        Ok(h)
    }

    /// Forward pass that also returns the output of layer `tap`.
    pub fn forward_tapped<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        tap: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if tap >= self.layers.len() {
            return dim_err(format!("{} has no layer {tap}", self.name));
        }
        self.check_input(&x)?;
        let mut h = x;
        let mut tapped = x;
        let mut first = 0u32;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h, self.group, first)?;
            first += layer.params.len() as u32;
            if i == tap {
                tapped = h;
            }
        }
        Ok((h, tapped))
    }

    pub fn zero_grad(&mut self) {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .for_each(|p| p.zero_grad());
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .for_each(|p| p.set_requires_grad(on));
    }

    /// Adds every gradient addressed to this network's group.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (key, g) in grads.params() {
            if key.group != self.group {
                continue;
            }
            let name = self.name.clone();
            let t = self
                .param_mut(key)
                .ok_or_else(|| Error::Contract(format!("{name} has no parameter {key:?}")))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Every gradient buffer is exactly zero (or absent).
    pub fn grads_are_zero(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter())
            .all(|p| p.grad().is_none_or(|g| g.iter().all(|v| *v == T::zero())))
    }

    pub fn params_flat(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_flat_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// Parameter names in registration order, e.g. `gen.3.weight`.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Replaces all parameters; shapes must match exactly.
    pub fn load_params(&mut self, mut values: Vec<Tensor<T>>) -> Result<()> {
        let count = self.params_flat().count();
        if values.len() != count {
            return dim_err(format!("{} has {count} parameters, got {}", self.name, values.len()));
        }
        for (dst, src) in self.params_flat_mut().zip(values.drain(..)) {
            if dst.shape() != src.shape() {
                return dim_err(format!("parameter shape {:?} vs stored {:?}", dst.shape(), src.shape()));
            }
            let trainable = dst.requires_grad();
            *dst = Tensor::new(src.shape().to_vec(), src.into_data())?;
            dst.set_requires_grad(trainable);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            name: self.name.clone(),
            group: self.group,
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l.params.iter().map(|p| p.cast()).collect(),
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

fn param_names<T: Scalar>(net: &str, layers: &[Layer<T>]) -> Vec<String> {
    let mut names = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let labels: &[&str] = match layer.spec {
            LayerSpec::BatchAffine { .. } => &["scale", "shift"],
            _ => &["weight", "bias"],
        };
        for label in labels.iter().take(layer.params.len()) {
            names.push(format!("{net}.{i}.{label}"));
        }
    }
    names
}

impl<T: Scalar> Parameters<T> for Sequential<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &str, &Tensor<T>)) {
        for (i, (p, name)) in self.params_flat().zip(&self.names).enumerate() {
            f(ParamKey::new(self.group, i as u32), name, p);
        }
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        if key.group != self.group {
            return None;
        }
        self.params_flat_mut().nth(key.index as usize)
    }
}

/// A bare list of tensors registered as group 0, for checking primitives.
#[derive(Clone, Debug)]
pub struct ParamList<T: Scalar>(pub Vec<Tensor<T>>);

impl<T: Scalar> ParamList<T> {
    pub fn vars<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamKey::new(0, i as u32), t))
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for ParamList<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &str, &Tensor<T>)) {
        for (i, t) in self.0.iter().enumerate() {
            f(ParamKey::new(0, i as u32), "p", t);
        }
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        if key.group != 0 {
            return None;
        }
        self.0.get_mut(key.index as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(i: usize, o: usize) -> LayerSpec {
        LayerSpec::Dense { inputs: i, units: o }
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = Sequential::<f32>::new("n", 0, vec![4], vec![dense(4, 4)], 7).unwrap();
        let b = Sequential::<f32>::new("n", 0, vec![4], vec![dense(4, 4)], 7).unwrap();
        let bits = |s: &Sequential<f32>| s.layers[0].params[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.layers[0].params[1].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn he_std_matches_monte_carlo() {
        // 10^5 weights from a 400-input dense layer.
        let net = Sequential::<f64>::new("n", 0, vec![400], vec![dense(400, 250)], 11).unwrap();
        let w = net.layers[0].params[0].data();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = (2.0f64 / 400.0).sqrt();
        assert!((var.sqrt() / target - 1.0).abs() < 0.05, "std {} vs {target}", var.sqrt());
    }

    #[test]
    fn empty_sequential_is_identity() {
        let net = Sequential::<f64>::new("id", 0, vec![3], vec![], 0).unwrap();
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = net.forward(&tape, x).unwrap();
        assert_eq!(&*y.data(), &*x.data());
    }

    #[test]
    fn reshape_keeps_row_major_order() {
        let net = Sequential::<f32>::new(
            "r",
            0,
            vec![2500],
            vec![LayerSpec::Reshape { shape: vec![1, 50, 50] }],
            0,
        )
        .unwrap();
        assert_eq!(net.output_shape(), &[1, 50, 50]);
        let tape = Tape::new();
        let v: Vec<f32> = (0..2500).map(|i| i as f32).collect();
        let x = tape.constant(&Tensor::new(vec![1, 2500], v.clone()).unwrap());
        let y = net.forward(&tape, x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 50, 50]);
        assert_eq!(&*y.data(), v.as_slice());
    }

    #[test]
    fn incompatible_layers_rejected() {
        let err = Sequential::<f32>::new("bad", 0, vec![4], vec![dense(5, 2)], 0);
        assert!(matches!(err, Err(Error::Dimension(_))));
        let err = Sequential::<f32>::new(
            "bad",
            0,
            vec![6],
            vec![LayerSpec::Reshape { shape: vec![1, 2, 2] }],
            0,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
        let net = Sequential::<f32>::new("ok", 0, vec![4], vec![dense(4, 2)], 0).unwrap();
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 3]).unwrap());
        assert!(matches!(net.forward(&tape, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_forward_has_no_cross_talk() {
        let net = Sequential::<f32>::new(
            "c",
            0,
            vec![1, 8, 8],
            vec![
                LayerSpec::Conv { in_channels: 1, out_channels: 3, kernel: 4, stride: 2, pad: 1 },
                LayerSpec::Activation { activation: Activation::Relu },
                LayerSpec::Reshape { shape: vec![48] },
                dense(48, 5),
            ],
            3,
        )
        .unwrap();
        let a: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..64).map(|i| (i as f32 * 0.11).cos()).collect();
        let tape = Tape::new();
        let one = |v: &Vec<f32>| {
            let x = tape.constant(&Tensor::new(vec![1, 1, 8, 8], v.clone()).unwrap());
            net.forward(&tape, x).unwrap().value().into_data()
        };
        let (ya, yb) = (one(&a), one(&b));
        let both = tape.constant(&Tensor::new(vec![2, 1, 8, 8], [a, b].concat()).unwrap());
        let y = net.forward(&tape, both).unwrap().value().into_data();
        for (u, v) in y.iter().zip(ya.iter().chain(&yb)) {
            assert!((u - v).abs() <= 1e-5);
        }
    }

    #[test]
    fn param_names_follow_layers() {
        let net = Sequential::<f32>::new(
            "gen",
            2,
            vec![4],
            vec![dense(4, 8), LayerSpec::Activation { activation: Activation::Relu }, dense(8, 2)],
            0,
        )
        .unwrap();
        assert_eq!(net.param_names(), &["gen.0.weight", "gen.0.bias", "gen.2.weight", "gen.2.bias"]);
        assert_eq!(net.parameter_count(), 4 * 8 + 8 + 8 * 2 + 2);
    }
}
