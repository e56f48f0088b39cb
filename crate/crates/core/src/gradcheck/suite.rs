//! Seeded finite-difference checks for every layer kind, every network and
//! every objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, GradCheck, GradCheckReport};
use crate::error::Result;
use crate::loss::{feat_match_rec, gan_loss_d, gan_loss_g, kl_prior, stage_pass, Batch, Objective, Pass, Stage};
use crate::model::{standard_normal, Arch, ModelBundle, Net, Noise};
use crate::nn::{Activation, LayerSpec, ParamList, Parameters, Sequential};
use crate::tensor::{ParamKey, Tape, Tensor, Var};

const INPUT_GROUP: u16 = 15;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub report: GradCheckReport,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut t = standard_normal::<f64>(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v *= scale);
    t
}

fn param(t: Tensor<f64>) -> Tensor<f64> {
    Tensor::parameter(t.shape().to_vec(), t.into_data()).expect("valid shape")
}

/// A network with a trainable input and a fixed random read-out, so that
/// the checked scalar depends on every output element.
struct NetCase {
    net: Sequential<f64>,
    input: Tensor<f64>,
    readout: Tensor<f64>,
    /// Intermediate layer read out alongside the output.
    tap: Option<(usize, Tensor<f64>)>,
}

impl Parameters<f64> for NetCase {
    fn visit(&self, f: &mut dyn FnMut(ParamKey, &str, &Tensor<f64>)) {
        self.net.visit(f);
        f(ParamKey::new(INPUT_GROUP, 0), "input", &self.input);
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<f64>> {
        if key.group == INPUT_GROUP {
            return Some(&mut self.input);
        }
        self.net.param_mut(key)
    }
}

impl NetCase {
    fn new(specs: Vec<LayerSpec>, input: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_net(Sequential::new("case", 0, input.to_vec(), specs, rng.random())?, batch, rng)
    }

    fn with_net(net: Sequential<f64>, batch: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut shape = vec![batch];
        shape.extend_from_slice(net.input_shape());
        let input = param(randn(rng, &shape, 1.0));
        let mut out = vec![batch];
        out.extend_from_slice(net.output_shape());
        let readout = randn(rng, &out, 1.0);
        Ok(Self { net, input, readout, tap: None })
    }

    fn loss<'t>(&self, tape: &'t Tape<f64>) -> Result<Var<'t, f64>> {
        let x = tape.param(ParamKey::new(INPUT_GROUP, 0), &self.input);
        match &self.tap {
            None => Ok(self.net.forward(tape, x)?.mul(tape.constant(&self.readout))?.sum()),
            Some((l, r)) => {
                let (y, f) = self.net.forward_tapped(tape, x, *l)?;
                let a = y.mul(tape.constant(&self.readout))?.sum();
                a.add(f.mul(tape.constant(r))?.sum())
            }
        }
    }
}

fn small_arch(deterministic: bool) -> Arch {
    Arch {
        d_x: 6,
        d_z: 2,
        image_size: 8,
        conv_channels: [2, 3, 2],
        cog_hidden: 4,
        vis_hidden: 4,
        deterministic,
        ..Arch::default()
    }
}

fn layer_specs(kind: &str) -> (Vec<LayerSpec>, Vec<usize>) {
    let act = |a: Activation| LayerSpec::Activation { activation: a };
    match kind {
        "dense" => (vec![LayerSpec::Dense { inputs: 5, units: 3 }], vec![5]),
        "conv" => (
            vec![LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, pad: 1 }],
            vec![2, 5, 5],
        ),
        "deconv" => (
            vec![LayerSpec::Deconv { in_channels: 2, out_channels: 2, kernel: 4, stride: 2, pad: 1 }],
            vec![2, 3, 3],
        ),
        "reshape" => (
            vec![LayerSpec::Reshape { shape: vec![2, 2, 3] }, LayerSpec::Conv { in_channels: 2, out_channels: 1, kernel: 2, stride: 1, pad: 0 }],
            vec![12],
        ),
        "relu" => (vec![act(Activation::Relu)], vec![6]),
        "leaky-relu" => (vec![act(Activation::LeakyRelu { alpha: 0.2 })], vec![6]),
        "tanh" => (vec![act(Activation::Tanh)], vec![6]),
        "sigmoid" => (vec![act(Activation::Sigmoid)], vec![6]),
        "unit-tanh" => (vec![act(Activation::UnitTanh)], vec![6]),
        "batch-affine" => (vec![LayerSpec::BatchAffine { features: 2 }], vec![2, 3, 3]),
        "mlp-3" => (
            vec![
                LayerSpec::Dense { inputs: 4, units: 5 },
                act(Activation::Tanh),
                LayerSpec::Dense { inputs: 5, units: 5 },
                act(Activation::Relu),
                LayerSpec::Dense { inputs: 5, units: 2 },
            ],
            vec![4],
        ),
        _ => unreachable!("unknown layer case {kind}"),
    }
}

pub const LAYER_CASES: &[&str] = &[
    "dense", "conv", "deconv", "reshape", "relu", "leaky-relu", "tanh", "sigmoid", "unit-tanh", "batch-affine", "mlp-3",
];

pub const NETWORK_CASES: &[&str] = &["e_cog", "e_vis", "gen", "disc", "disc-features"];

pub const LOSS_CASES: &[&str] = &[
    "kl-prior",
    "gan-d",
    "gan-g",
    "feat-match-rec",
    "reparameterize",
    "stage1-d",
    "stage1-g",
    "stage2-d",
    "stage2-g",
    "stage3-d",
    "stage3-g",
    "stage1-g-deterministic",
];

pub fn case_names() -> Vec<&'static str> {
    LAYER_CASES.iter().chain(NETWORK_CASES).chain(LOSS_CASES).copied().collect()
}

fn net_case(name: &str, rng: &mut ChaCha8Rng) -> Result<NetCase> {
    if let Some(net) = Net::from_name(name.strip_suffix("-features").unwrap_or(name)) {
        let b = ModelBundle::<f64>::new(small_arch(false), rng.random())?;
        let mut c = NetCase::with_net(b.net(net).clone(), 2, rng)?;
        if name.ends_with("-features") {
            let l = b.arch.feature_layer_index()?;
            let mut shape = vec![2];
            shape.extend(b.arch.disc_specs()?[..=l].iter().try_fold(b.arch.image_shape().to_vec(), |s, spec| spec.output_shape(&s))?);
            c.tap = Some((l, randn(rng, &shape, 1.0)));
        }
        if net == Net::Vis || net == Net::Disc {
            // pixel inputs live in [0, 1]
            c.input.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * v.tanh());
        }
        return Ok(c);
    }
    let (specs, input) = layer_specs(name);
    let mut c = NetCase::new(specs, &input, 2, rng)?;
    // perturb the zero-initialized biases so that they matter
    for p in c.net.params_flat_mut() {
        if p.data().iter().all(|v| *v == 0.0) {
            let n = p.numel();
            p.data_mut().copy_from_slice(&randn(rng, &[n], 0.3).into_data());
        }
    }
    Ok(c)
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    param(Tensor::new(vec![n, 1], (0..n).map(|_| rng.random_range(0.05..0.95)).collect()).expect("shape"))
}

fn loss_case(name: &str, rng: &mut ChaCha8Rng, cfg: &GradCheck) -> Result<GradCheckReport> {
    match name {
        "kl-prior" => {
            let mut p = ParamList(vec![param(randn(rng, &[2, 3], 1.0)), param(randn(rng, &[2, 3], 1.0))]);
            check(&mut p, cfg, |t, p| {
                let v = p.vars(t);
                kl_prior(v[0], v[1])
            })
        }
        "gan-d" => {
            let mut p = ParamList(vec![probs(rng, 3), probs(rng, 3)]);
            check(&mut p, cfg, |t, p| {
                let v = p.vars(t);
                gan_loss_d(v[0], v[1])
            })
        }
        "gan-g" => {
            let mut p = ParamList(vec![probs(rng, 4)]);
            check(&mut p, cfg, |t, p| gan_loss_g(p.vars(t)[0]))
        }
        "feat-match-rec" => {
            let mut p = ParamList(vec![param(randn(rng, &[2, 3, 2, 2], 1.0)), param(randn(rng, &[2, 3, 2, 2], 1.0))]);
            check(&mut p, cfg, |t, p| {
                let v = p.vars(t);
                feat_match_rec(v[0], v[1])
            })
        }
        "reparameterize" => {
            let b = ModelBundle::<f64>::new(small_arch(false), 0)?;
            let eps = randn(rng, &[2, 2], 1.0);
            let readout = randn(rng, &[2, 2], 1.0);
            let mut p = ParamList(vec![param(randn(rng, &[2, 4], 1.0))]);
            check(&mut p, cfg, |t, p| {
                let lat = b.reparameterize(p.vars(t)[0], Noise::Given(&eps))?;
                Ok(lat.sample.mul(t.constant(&readout))?.sum())
            })
        }
        _ => {
            let deterministic = name.ends_with("-deterministic");
            let mut b = ModelBundle::<f64>::new(small_arch(deterministic), rng.random())?;
            let stage = match &name[..6] {
                "stage1" => Stage::I,
                "stage2" => Stage::II,
                _ => Stage::III,
            };
            let pass = if name[7..].starts_with('d') { Pass::Discriminator } else { Pass::Generator };
            let x = randn(rng, &[2, 6], 1.0);
            let unit = |t: Tensor<f64>| {
                let mut t = t;
                t.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.45 * v.tanh());
                t
            };
            let y = unit(randn(rng, &[2, 1, 8, 8], 1.0));
            let teacher = Some(unit(randn(rng, &[2, 1, 8, 8], 1.0)));
            let batch = Batch { x, y, teacher };
            let eps = randn(rng, &[2, 2], 1.0);
            let obj = Objective::new(stage);
            let cfg = GradCheck { max_coords_per_tensor: 6, ..cfg.clone() };
            check(&mut b, &cfg, |t, b| Ok(stage_pass(b, t, &batch, &obj, pass, (!deterministic).then_some(&eps))?.loss))
        }
    }
}

/// Runs `instances` seeded instances of one named case.
pub fn run_case(name: &str, instances: usize, seed: u64, cfg: &GradCheck) -> Result<CaseResult> {
    let mut report = GradCheckReport::default();
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let cfg = GradCheck { seed: seed ^ k as u64, ..cfg.clone() };
        let r = if LOSS_CASES.contains(&name) {
            loss_case(name, &mut rng, &cfg)?
        } else {
            let mut c = net_case(name, &mut rng)?;
            check(&mut c, &cfg, |t, c| c.loss(t))?
        };
        report.merge(&r);
    }
    Ok(CaseResult { name: name.to_string(), instances, report })
}

pub fn run_suite(instances: usize, seed: u64, cfg: &GradCheck) -> Result<Vec<CaseResult>> {
    case_names().into_iter().map(|n| run_case(n, instances, seed, cfg)).collect()
}
