//! The four networks and reparameterized latent sampling.
//!
//! A cognitive encoder and a visual encoder both map onto the same latent
//! space so that one generator serves both. The discriminator scores images
//! and exposes one hidden layer for feature-matching reconstruction.

pub mod checkpoint;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Error, Result};
use crate::nn::{Activation, LayerSpec, Parameters, Sequential};
use crate::tensor::{conv_out_extent, ParamKey, Scalar, Tape, Tensor, Var};

/// Clamp applied to discriminator probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-6;

/// The four networks, doubling as tape parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Net {
    Cog,
    Vis,
    Gen,
    Disc,
}

impl Net {
    pub const ALL: [Net; 4] = [Net::Cog, Net::Vis, Net::Gen, Net::Disc];

    pub fn group(self) -> u16 {
        match self {
            Net::Cog => 0,
            Net::Vis => 1,
            Net::Gen => 2,
            Net::Disc => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Net::Cog => "e_cog",
            Net::Vis => "e_vis",
            Net::Gen => "gen",
            Net::Disc => "disc",
        }
    }

    pub fn from_name(name: &str) -> Option<Net> {
        Net::ALL.into_iter().find(|n| n.name() == name)
    }
}

fn default_kernel() -> usize {
    4
}
fn default_alpha() -> f64 {
    0.2
}

/// Architecture hyperparameters. The defaults are the reference configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    /// Encoder input width (active voxels).
    pub d_x: usize,
    pub d_z: usize,
    pub image_channels: usize,
    /// Square image side.
    pub image_size: usize,
    /// Conv stack widths of the visual encoder and discriminator; the
    /// generator mirrors them.
    pub conv_channels: [usize; 3],
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub cog_hidden: usize,
    pub vis_hidden: usize,
    /// Discriminator layer whose output serves as `D_l`; `None` picks the
    /// activation after the last convolution.
    #[serde(default)]
    pub feature_layer: Option<usize>,
    #[serde(default = "default_alpha")]
    pub leaky_alpha: f64,
    /// Encoders emit a mean only (no log-variance, no sampling).
    #[serde(default)]
    pub deterministic: bool,
    /// Insert per-channel affine layers after hidden convolutions.
    #[serde(default)]
    pub batch_affine: bool,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            d_x: 2048,
            d_z: 64,
            image_channels: 1,
            image_size: 100,
            conv_channels: [32, 64, 128],
            kernel: 4,
            cog_hidden: 512,
            vis_hidden: 512,
            feature_layer: None,
            leaky_alpha: 0.2,
            deterministic: false,
            batch_affine: false,
        }
    }
}

impl Arch {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }

    pub fn image_numel(&self) -> usize {
        self.image_channels * self.image_size * self.image_size
    }

    /// Encoder head width: `μ ‖ log σ²`, or `μ` alone when deterministic.
    pub fn head_width(&self) -> usize {
        if self.deterministic {
            self.d_z
        } else {
            2 * self.d_z
        }
    }

    /// Spatial side after the three stride-2 convolutions.
    pub fn encoded_side(&self) -> Result<usize> {
        let mut s = self.image_size;
        for _ in 0..3 {
            s = conv_out_extent(s, self.kernel, 2, 1)
                .ok_or_else(|| Error::Config(format!("image side {} too small for three convolutions", self.image_size)))?;
        }
        Ok(s)
    }

    /// Generator seed side and the padding of its last transposed
    /// convolution, chosen so that the output side equals `image_size`.
    pub fn generator_geometry(&self) -> Result<(usize, usize)> {
        let base = self.image_size.div_ceil(8);
        let span = 2 * (4 * base - 1) + self.kernel;
        if span < self.image_size || !(span - self.image_size).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "image side {} unreachable by three stride-2 deconvolutions with kernel {}",
                self.image_size, self.kernel
            )));
        }
        Ok((base, (span - self.image_size) / 2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_z == 0 || self.image_channels == 0 || self.cog_hidden == 0 || self.vis_hidden == 0 {
            return Err(Error::Config("architecture widths must be positive".into()));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Config("conv channels must be positive".into()));
        }
        if self.kernel < 2 {
            return Err(Error::Config("kernel must be at least 2".into()));
        }
        self.encoded_side()?;
        self.generator_geometry()?;
        Ok(())
    }

    fn maybe_affine(&self, specs: &mut Vec<LayerSpec>, features: usize) {
        if self.batch_affine {
            specs.push(LayerSpec::BatchAffine { features });
        }
    }

    fn conv_stack(&self, act: Activation) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut cin = self.image_channels;
        for &c in &self.conv_channels {
            specs.push(LayerSpec::Conv { in_channels: cin, out_channels: c, kernel: self.kernel, stride: 2, pad: 1 });
            self.maybe_affine(&mut specs, c);
            specs.push(LayerSpec::Activation { activation: act });
            cin = c;
        }
        specs
    }

    fn flat_features(&self) -> Result<usize> {
        let s = self.encoded_side()?;
        Ok(self.conv_channels[2] * s * s)
    }

    pub fn cog_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { inputs: self.d_x, units: self.cog_hidden },
            LayerSpec::Activation { activation: Activation::Relu },
            LayerSpec::Dense { inputs: self.cog_hidden, units: self.head_width() },
        ]
    }

    pub fn vis_specs(&self) -> Result<Vec<LayerSpec>> {
        let flat = self.flat_features()?;
        let mut specs = self.conv_stack(Activation::Relu);
        specs.push(LayerSpec::Reshape { shape: vec![flat] });
        specs.push(LayerSpec::Dense { inputs: flat, units: self.vis_hidden });
        specs.push(LayerSpec::Activation { activation: Activation::Relu });
        specs.push(LayerSpec::Dense { inputs: self.vis_hidden, units: self.head_width() });
        Ok(specs)
    }

    pub fn gen_specs(&self) -> Result<Vec<LayerSpec>> {
        let (base, last_pad) = self.generator_geometry()?;
        let [c1, c2, c3] = self.conv_channels;
        let mut specs = vec![
            LayerSpec::Dense { inputs: self.d_z, units: c3 * base * base },
            LayerSpec::Activation { activation: Activation::Relu },
            LayerSpec::Reshape { shape: vec![c3, base, base] },
        ];
        for (cin, cout) in [(c3, c2), (c2, c1)] {
            specs.push(LayerSpec::Deconv { in_channels: cin, out_channels: cout, kernel: self.kernel, stride: 2, pad: 1 });
            self.maybe_affine(&mut specs, cout);
            specs.push(LayerSpec::Activation { activation: Activation::Relu });
        }
        specs.push(LayerSpec::Deconv {
            in_channels: c1,
            out_channels: self.image_channels,
            kernel: self.kernel,
            stride: 2,
            pad: last_pad,
        });
        specs.push(LayerSpec::Activation { activation: Activation::UnitTanh });
        Ok(specs)
    }

    pub fn disc_specs(&self) -> Result<Vec<LayerSpec>> {
        let flat = self.flat_features()?;
        let mut specs = self.conv_stack(Activation::LeakyRelu { alpha: self.leaky_alpha });
        specs.push(LayerSpec::Reshape { shape: vec![flat] });
        specs.push(LayerSpec::Dense { inputs: flat, units: 1 });
        specs.push(LayerSpec::Activation { activation: Activation::Sigmoid });
        Ok(specs)
    }

    /// Index of the discriminator layer exposed as `D_l`.
    pub fn feature_layer_index(&self) -> Result<usize> {
        let specs = self.disc_specs()?;
        match self.feature_layer {
            Some(l) if l + 2 < specs.len() => Ok(l),
            Some(l) => Err(Error::Config(format!("feature layer {l} is not a hidden discriminator layer"))),
            // reshape, dense, sigmoid follow the last activation
            None => Ok(specs.len() - 4),
        }
    }
}

/// A (z-scored) voxel activation vector with an optional region mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CognitiveSignal {
    pub values: Vec<f32>,
    pub mask: Option<Vec<bool>>,
}

impl CognitiveSignal {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("cognitive signal contains non-finite values".into()));
        }
        Ok(Self { values, mask: None })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return dim_err(format!("mask of {} entries for {} voxels", mask.len(), self.values.len()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    /// Values of the voxels selected by the mask (all when unmasked).
    pub fn active(&self) -> Vec<f32> {
        match &self.mask {
            None => self.values.clone(),
            Some(m) => self.values.iter().zip(m).filter(|(_, k)| **k).map(|(v, _)| *v).collect(),
        }
    }

    pub fn active_dim(&self) -> usize {
        self.mask.as_ref().map_or(self.values.len(), |m| m.iter().filter(|k| **k).count())
    }
}

/// A `C × H × W` image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusImage {
    pub id: String,
    pub shape: [usize; 3],
    pub pixels: Vec<f32>,
}

impl StimulusImage {
    pub fn new(id: impl Into<String>, shape: [usize; 3], pixels: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != pixels.len() {
            return dim_err(format!("image shape {shape:?} with {} pixels", pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { id: id.into(), shape, pixels })
    }

    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|v| T::lit(*v as f64)).collect();
        Tensor::new(self.shape.to_vec(), data).expect("validated shape")
    }
}

/// Owned latent posterior parameters and the drawn sample for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T: Scalar = f32> {
    pub mu: Vec<T>,
    /// `None` for deterministic encoders.
    pub log_var: Option<Vec<T>>,
    pub sample: Vec<T>,
}

/// Discriminator response to one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T: Scalar = f32> {
    pub prob: T,
    pub features: Tensor<T>,
}

/// Source of the reparameterization noise.
pub enum Noise<'a, T: Scalar> {
    /// `sample = μ`.
    Mean,
    /// An explicit `[N, d_z]` draw.
    Given(&'a Tensor<T>),
    Draw(&'a mut dyn RngCore),
}

/// Latent posterior on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Latent<'t, T: Scalar> {
    pub mu: Var<'t, T>,
    pub log_var: Option<Var<'t, T>>,
    pub sample: Var<'t, T>,
}

/// Discriminator pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Judgement<'t, T: Scalar> {
    /// `[N, 1]`, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub prob: Var<'t, T>,
    pub features: Var<'t, T>,
}

pub fn standard_normal<T: Scalar>(rng: &mut dyn RngCore, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// The four networks plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Scalar = f32> {
    pub arch: Arch,
    pub e_cog: Sequential<T>,
    pub e_vis: Sequential<T>,
    pub gen: Sequential<T>,
    pub disc: Sequential<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Fresh He-initialized networks; each net draws from its own seeded stream.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let sub = |n: Net| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(n.group() as u64 + 1);
        let e_cog = Sequential::new(Net::Cog.name(), Net::Cog.group(), vec![arch.d_x], arch.cog_specs(), sub(Net::Cog))?;
        let e_vis = Sequential::new(Net::Vis.name(), Net::Vis.group(), arch.image_shape().to_vec(), arch.vis_specs()?, sub(Net::Vis))?;
        let gen = Sequential::new(Net::Gen.name(), Net::Gen.group(), vec![arch.d_z], arch.gen_specs()?, sub(Net::Gen))?;
        let disc = Sequential::new(Net::Disc.name(), Net::Disc.group(), arch.image_shape().to_vec(), arch.disc_specs()?, sub(Net::Disc))?;
        debug_assert_eq!(gen.output_shape(), &arch.image_shape());
        Ok(Self { arch, e_cog, e_vis, gen, disc })
    }

    pub fn net(&self, n: Net) -> &Sequential<T> {
        match n {
            Net::Cog => &self.e_cog,
            Net::Vis => &self.e_vis,
            Net::Gen => &self.gen,
            Net::Disc => &self.disc,
        }
    }

    pub fn net_mut(&mut self, n: Net) -> &mut Sequential<T> {
        match n {
            Net::Cog => &mut self.e_cog,
            Net::Vis => &mut self.e_vis,
            Net::Gen => &mut self.gen,
            Net::Disc => &mut self.disc,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            e_cog: self.e_cog.cast(),
            e_vis: self.e_vis.cast(),
            gen: self.gen.cast(),
            disc: self.disc.cast(),
        }
    }

    pub fn zero_grad(&mut self) {
        Net::ALL.into_iter().for_each(|n| self.net_mut(n).zero_grad());
    }

    /// Splits an encoder head into a latent posterior and draws its sample.
    pub fn reparameterize<'t>(&self, head: Var<'t, T>, noise: Noise<'_, T>) -> Result<Latent<'t, T>> {
        let tape = head.tape();
        let n = head.shape()[0];
        let d_z = self.arch.d_z;
        if self.arch.deterministic {
            return Ok(Latent { mu: head, log_var: None, sample: head });
        }
        let mu = head.narrow(1, 0, d_z)?;
        let log_var = head.narrow(1, d_z, d_z)?;
        let eps = match noise {
            Noise::Mean => return Ok(Latent { mu, log_var: Some(log_var), sample: mu }),
            Noise::Given(e) => {
                if e.shape() != [n, d_z] {
                    return contract(format!("noise of shape {:?}, expected [{n}, {d_z}]", e.shape()));
                }
                tape.constant(e)
            }
            Noise::Draw(rng) => tape.constant(&standard_normal(rng, &[n, d_z])),
        };
        let sample = log_var.scale(0.5).exp()?.mul(eps)?.add(mu)?;
        Ok(Latent { mu, log_var: Some(log_var), sample })
    }

    /// `[N, d_x]` signals to latents.
    pub fn encode_cognitive_batch<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        noise: Noise<'_, T>,
    ) -> Result<Latent<'t, T>> {
        let head = self.e_cog.forward(tape, x)?;
        self.reparameterize(head, noise)
    }

    /// `[N, C, H, W]` images to latents.
    pub fn encode_visual_batch<'t>(
        &self,
        tape: &'t Tape<T>,
        y: Var<'t, T>,
        noise: Noise<'_, T>,
    ) -> Result<Latent<'t, T>> {
        let head = self.e_vis.forward(tape, y)?;
        self.reparameterize(head, noise)
    }

    pub fn generate_batch<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        self.gen.forward(tape, z)
    }

    pub fn discriminate_batch<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Judgement<'t, T>> {
        let l = self.arch.feature_layer_index()?;
        let (prob, features) = self.disc.forward_tapped(tape, y, l)?;
        Ok(Judgement { prob: prob.clamp(PROB_EPS, 1.0 - PROB_EPS), features })
    }

    fn latent_code(&self, lat: &Latent<'_, T>) -> LatentCode<T> {
        LatentCode {
            mu: lat.mu.value().into_data(),
            log_var: lat.log_var.map(|v| v.value().into_data()),
            sample: lat.sample.value().into_data(),
        }
    }

    fn check_eps(&self, eps: Option<&[T]>) -> Result<Option<Tensor<T>>> {
        eps.map(|e| {
            if e.len() != self.arch.d_z {
                return contract(format!("noise of length {}, expected {}", e.len(), self.arch.d_z));
            }
            Tensor::new(vec![1, e.len()], e.to_vec())
        })
        .transpose()
    }

    /// One signal to a latent code. With no `eps` and no `rng` the sample is `μ`.
    pub fn encode_cognitive(
        &self,
        x: &CognitiveSignal,
        eps: Option<&[T]>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LatentCode<T>> {
        let active = x.active();
        if active.len() != self.arch.d_x {
            return contract(format!("signal has {} active voxels, encoder expects {}", active.len(), self.arch.d_x));
        }
        let eps = self.check_eps(eps)?;
        let tape = Tape::new();
        let xv = tape.constant_from(vec![1, active.len()], active.iter().map(|v| T::lit(*v as f64)).collect())?;
        let lat = self.encode_cognitive_batch(&tape, xv, match (eps.as_ref(), rng) {
            (Some(e), _) => Noise::Given(e),
            (None, Some(r)) => Noise::Draw(r),
            (None, None) => Noise::Mean,
        })?;
        Ok(self.latent_code(&lat))
    }

    pub fn encode_visual(
        &self,
        y: &StimulusImage,
        eps: Option<&[T]>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LatentCode<T>> {
        if y.shape != self.arch.image_shape() {
            return contract(format!("image shape {:?}, encoder expects {:?}", y.shape, self.arch.image_shape()));
        }
        let eps = self.check_eps(eps)?;
        let tape = Tape::new();
        let t = y.tensor::<T>().reshape(vec![1, y.shape[0], y.shape[1], y.shape[2]])?;
        let lat = self.encode_visual_batch(&tape, tape.constant(&t), match (eps.as_ref(), rng) {
            (Some(e), _) => Noise::Given(e),
            (None, Some(r)) => Noise::Draw(r),
            (None, None) => Noise::Mean,
        })?;
        Ok(self.latent_code(&lat))
    }

    /// Decodes one latent vector. Pixels are rounded to f32 and clamped to `[0, 1]`.
    pub fn generate(&self, id: impl Into<String>, z: &[T]) -> Result<StimulusImage> {
        if z.len() != self.arch.d_z {
            return contract(format!("latent of length {}, generator expects {}", z.len(), self.arch.d_z));
        }
        let tape = Tape::new();
        let zv = tape.constant_from(vec![1, z.len()], z.to_vec())?;
        let img = self.generate_batch(&tape, zv)?;
        let pixels = img.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        StimulusImage::new(id, self.arch.image_shape(), pixels)
    }

    pub fn discriminate(&self, y: &StimulusImage) -> Result<DiscriminatorOutput<T>> {
        if y.shape != self.arch.image_shape() {
            return dim_err(format!("image shape {:?}, discriminator expects {:?}", y.shape, self.arch.image_shape()));
        }
        let tape = Tape::new();
        let t = y.tensor::<T>().reshape(vec![1, y.shape[0], y.shape[1], y.shape[2]])?;
        let j = self.discriminate_batch(&tape, tape.constant(&t))?;
        let f = j.features.value();
        let shape = f.shape()[1..].to_vec();
        Ok(DiscriminatorOutput { prob: j.prob.item(), features: f.reshape(shape)? })
    }
}

impl<T: Scalar> Parameters<T> for ModelBundle<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &str, &Tensor<T>)) {
        for n in Net::ALL {
            self.net(n).visit(f);
        }
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        let net = Net::ALL.into_iter().find(|n| n.group() == key.group)?;
        self.net_mut(net).param_mut(key)
    }
}
