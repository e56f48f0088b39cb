//! Training objectives and the per-stage composites.
//!
//! Each stage runs two passes per step. The discriminator pass scores the
//! stage's (real, fake) pair with [`gan_loss_d`]; the generator-side pass
//! combines feature-matching reconstruction, the KL prior and the
//! non-saturating [`gan_loss_g`] for the parameters the stage trains.
//! All reductions are means over batch and feature elements, except the KL
//! prior, which sums over latent dimensions before the batch mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{DiscriminatorOutput, Judgement, Latent, LatentCode, ModelBundle, Net, Noise, PROB_EPS};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn number(self) -> u8 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.number() == n)
    }
}

/// The two halves of a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    Discriminator,
    Generator,
}

pub const TERM_REC: &str = "rec";
pub const TERM_PRIOR: &str = "prior";
pub const TERM_GAN_D: &str = "gan_d";
pub const TERM_GAN_G: &str = "gan_g";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 1.0, prior: 1.0 }
    }
}

impl LossWeights {
    pub fn of(&self, term: &str) -> f64 {
        match term {
            TERM_REC => self.rec,
            TERM_PRIOR => self.prior,
            _ => 1.0,
        }
    }
}

/// Loss terms of one step. `total` is the weighted sum of `terms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn new(stage: Stage, terms: BTreeMap<String, f64>, w: &LossWeights) -> Self {
        let total = terms.iter().map(|(k, v)| w.of(k) * v).sum();
        Self { stage, total, terms }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    /// `|total − Σ w·term|`.
    pub fn identity_error(&self, w: &LossWeights) -> f64 {
        (self.total - self.terms.iter().map(|(k, v)| w.of(k) * v).sum::<f64>()).abs()
    }

    /// Element-wise mean of several reports of one stage.
    pub fn mean(stage: Stage, reports: &[LossReport], w: &LossWeights) -> Self {
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        for r in reports {
            for (k, v) in &r.terms {
                *terms.entry(k.clone()).or_default() += v / reports.len() as f64;
            }
        }
        Self::new(stage, terms, w)
    }
}

fn check_finite<T: Scalar>(v: &Var<'_, T>, what: &str) -> Result<()> {
    if v.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} contains non-finite values")))
    }
}

/// `0.5 · Σ_i (exp(lv_i) + μ_i² − 1 − lv_i)`, summed over latent dims and
/// averaged over the batch.
pub fn kl_prior<'t, T: Scalar>(mu: Var<'t, T>, log_var: Var<'t, T>) -> Result<Var<'t, T>> {
    check_finite(&mu, "latent mean")?;
    check_finite(&log_var, "latent log-variance")?;
    if mu.shape() != log_var.shape() {
        return contract(format!("mean {:?} and log-variance {:?} differ in shape", mu.shape(), log_var.shape()));
    }
    let n = mu.shape()[0] as f64;
    let t = log_var.exp()?.add(mu.square()?)?.sub(log_var)?;
    Ok(t.affine(0.5, -0.5).sum().scale(1.0 / n))
}

/// `−mean[log p_real + log(1 − p_fake)]`.
pub fn gan_loss_d<'t, T: Scalar>(p_real: Var<'t, T>, p_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    let lo = PROB_EPS;
    let real = p_real.clamp(lo, 1.0 - lo).log()?.mean();
    let fake = p_fake.clamp(lo, 1.0 - lo).affine(-1.0, 1.0).log()?.mean();
    real.add(fake)?.neg()
}

/// Non-saturating generator loss `−mean log p_fake`.
pub fn gan_loss_g<'t, T: Scalar>(p_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    p_fake.clamp(PROB_EPS, 1.0 - PROB_EPS).log()?.mean().neg()
}

/// `0.5 · mean((D_l(target) − D_l(recon))²)`.
pub fn feat_match_rec<'t, T: Scalar>(target: Var<'t, T>, recon: Var<'t, T>) -> Result<Var<'t, T>> {
    if target.shape() != recon.shape() {
        return contract(format!("feature shapes {:?} and {:?} differ", target.shape(), recon.shape()));
    }
    Ok(target.sub(recon)?.square()?.mean().scale(0.5))
}

fn code_vars<'t, T: Scalar>(tape: &'t Tape<T>, code: &LatentCode<T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d = code.mu.len();
    let lv = code.log_var.clone().ok_or_else(|| Error::Contract("deterministic codes carry no prior".into()))?;
    Ok((tape.constant_from(vec![1, d], code.mu.clone())?, tape.constant_from(vec![1, d], lv)?))
}

/// KL prior of one owned latent code.
pub fn kl_prior_code<T: Scalar>(code: &LatentCode<T>) -> Result<f64> {
    let tape = Tape::new();
    let (mu, lv) = code_vars(&tape, code)?;
    Ok(kl_prior(mu, lv)?.item().as_f64())
}

pub fn gan_loss_d_value<T: Scalar>(real: &DiscriminatorOutput<T>, fake: &DiscriminatorOutput<T>) -> Result<f64> {
    let tape = Tape::new();
    Ok(gan_loss_d(tape.scalar(real.prob), tape.scalar(fake.prob))?.item().as_f64())
}

pub fn gan_loss_g_value<T: Scalar>(fake: &DiscriminatorOutput<T>) -> Result<f64> {
    let tape = Tape::new();
    Ok(gan_loss_g(tape.scalar(fake.prob))?.item().as_f64())
}

pub fn feat_match_rec_value<T: Scalar>(target: &DiscriminatorOutput<T>, recon: &DiscriminatorOutput<T>) -> Result<f64> {
    let tape = Tape::new();
    Ok(feat_match_rec(tape.constant(&target.features), tape.constant(&recon.features))?.item().as_f64())
}

/// One minibatch. `teacher` holds the cached Stage-I reconstructions `ỹ`.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub teacher: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch { x: self.x.cast(), y: self.y.cast(), teacher: self.teacher.as_ref().map(|t| t.cast()) }
    }
}

/// What a stage objective needs beyond the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub stage: Stage,
    /// Encoder trained with the generator in Stage I.
    pub stage1_encoder: Net,
    pub weights: LossWeights,
}

impl Objective {
    pub fn new(stage: Stage) -> Self {
        Self { stage, stage1_encoder: Net::Vis, weights: LossWeights::default() }
    }

    /// Networks whose parameters this pass updates.
    pub fn update_set(&self, pass: Pass) -> Vec<Net> {
        match (pass, self.stage) {
            (Pass::Discriminator, _) => vec![Net::Disc],
            (Pass::Generator, Stage::I) => {
                let mut v = vec![self.stage1_encoder, Net::Gen];
                v.sort();
                v
            }
            (Pass::Generator, Stage::II) => vec![Net::Cog],
            (Pass::Generator, Stage::III) => vec![Net::Gen],
        }
    }

    pub fn groups(&self, pass: Pass) -> Vec<u16> {
        self.update_set(pass).into_iter().map(Net::group).collect()
    }
}

/// Scalar loss of one pass plus its named terms (unweighted) and diagnostics.
pub struct PassOutput<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    pub terms: Vec<(&'static str, Var<'t, T>)>,
    /// Fraction of correct real/fake calls in a discriminator pass.
    pub d_accuracy: Option<f64>,
}

impl<T: Scalar> PassOutput<'_, T> {
    pub fn term_values(&self) -> BTreeMap<String, f64> {
        self.terms.iter().map(|(k, v)| (k.to_string(), v.item().as_f64())).collect()
    }
}

fn accuracy<T: Scalar>(real: &Judgement<'_, T>, fake: &Judgement<'_, T>) -> f64 {
    let r = real.prob.data().iter().filter(|p| p.as_f64() > 0.5).count();
    let f = fake.prob.data().iter().filter(|p| p.as_f64() < 0.5).count();
    (r + f) as f64 / (real.prob.numel() + fake.prob.numel()) as f64
}

fn noise<T: Scalar>(eps: Option<&Tensor<T>>) -> Noise<'_, T> {
    eps.map_or(Noise::Mean, Noise::Given)
}

/// The stage's generator-side latent and its decoded image.
fn student<'t, T: Scalar>(
    bundle: &ModelBundle<T>,
    tape: &'t Tape<T>,
    batch: &Batch<T>,
    obj: &Objective,
    eps: Option<&Tensor<T>>,
) -> Result<(Latent<'t, T>, Var<'t, T>)> {
    let lat = match (obj.stage, obj.stage1_encoder) {
        (Stage::I, Net::Vis) => bundle.encode_visual_batch(tape, tape.constant(&batch.y), noise(eps))?,
        (Stage::I, Net::Cog) | (Stage::II | Stage::III, _) => {
            bundle.encode_cognitive_batch(tape, tape.constant(&batch.x), noise(eps))?
        }
        (Stage::I, other) => return contract(format!("{} cannot serve as the Stage-I encoder", other.name())),
    };
    let img = bundle.generate_batch(tape, lat.sample)?;
    Ok((lat, img))
}

fn real_images<'t, T: Scalar>(tape: &'t Tape<T>, batch: &Batch<T>, stage: Stage) -> Result<Var<'t, T>> {
    match stage {
        Stage::II => batch
            .teacher
            .as_ref()
            .map(|t| tape.constant(t))
            .ok_or_else(|| Error::Contract("Stage II needs the teacher reconstruction cache".into())),
        Stage::I | Stage::III => Ok(tape.constant(&batch.y)),
    }
}

/// Builds one pass of a stage objective on `tape`. Which parameters
/// receive gradient is decided by the tape's tracked groups.
pub fn stage_pass<'t, T: Scalar>(
    bundle: &ModelBundle<T>,
    tape: &'t Tape<T>,
    batch: &Batch<T>,
    obj: &Objective,
    pass: Pass,
    eps: Option<&Tensor<T>>,
) -> Result<PassOutput<'t, T>> {
    let real = real_images(tape, batch, obj.stage)?;
    let (lat, fake) = student(bundle, tape, batch, obj, eps)?;
    let jf = bundle.discriminate_batch(tape, fake)?;
    match pass {
        Pass::Discriminator => {
            let jr = bundle.discriminate_batch(tape, real)?;
            let gan_d = gan_loss_d(jr.prob, jf.prob)?;
            Ok(PassOutput { loss: gan_d, terms: vec![(TERM_GAN_D, gan_d)], d_accuracy: Some(accuracy(&jr, &jf)) })
        }
        Pass::Generator => {
            let gan_g = gan_loss_g(jf.prob)?;
            if obj.stage == Stage::III {
                return Ok(PassOutput { loss: gan_g, terms: vec![(TERM_GAN_G, gan_g)], d_accuracy: None });
            }
            let jr = bundle.discriminate_batch(tape, real)?;
            let rec = feat_match_rec(jr.features, jf.features)?;
            let mut loss = rec.scale(obj.weights.rec).add(gan_g)?;
            let mut terms = vec![(TERM_REC, rec), (TERM_GAN_G, gan_g)];
            if let Some(lv) = lat.log_var {
                let prior = kl_prior(lat.mu, lv)?;
                loss = loss.add(prior.scale(obj.weights.prior))?;
                terms.push((TERM_PRIOR, prior));
            }
            Ok(PassOutput { loss, terms, d_accuracy: None })
        }
    }
}

/// Both passes evaluated without any update, as one report.
pub fn stage_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    batch: &Batch<T>,
    obj: &Objective,
    eps: Option<&Tensor<T>>,
) -> Result<LossReport> {
    let mut terms = BTreeMap::new();
    for pass in [Pass::Discriminator, Pass::Generator] {
        let tape = Tape::new();
        terms.extend(stage_pass(bundle, &tape, batch, obj, pass, eps)?.term_values());
    }
    Ok(LossReport::new(obj.stage, terms, &obj.weights))
}

pub fn stage1_loss<T: Scalar>(bundle: &ModelBundle<T>, batch: &Batch<T>, eps: Option<&Tensor<T>>) -> Result<LossReport> {
    stage_loss(bundle, batch, &Objective::new(Stage::I), eps)
}

pub fn stage2_loss<T: Scalar>(bundle: &ModelBundle<T>, batch: &Batch<T>, eps: Option<&Tensor<T>>) -> Result<LossReport> {
    stage_loss(bundle, batch, &Objective::new(Stage::II), eps)
}

pub fn stage3_loss<T: Scalar>(bundle: &ModelBundle<T>, batch: &Batch<T>, eps: Option<&Tensor<T>>) -> Result<LossReport> {
    stage_loss(bundle, batch, &Objective::new(Stage::III), eps)
}
