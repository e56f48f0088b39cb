//! Reconstruction metrics and reports.
//!
//! SSIM uses a uniform 8×8 window at stride 1 with population statistics,
//! `C1 = (0.01 L)²`, `C2 = (0.03 L)²` and `L = 1`, averaged over windows and
//! channels. Pix-Com is a two-alternative forced choice: a reconstruction
//! "picks" whichever of the true stimulus and one seeded distractor of the
//! same family it correlates with more; ties score one half.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pgm, PairedDataset};
use crate::error::{contract, dim_err, Error, Result};
use crate::model::checkpoint::InferenceModel;
use crate::model::{CognitiveSignal, ModelBundle, StimulusImage};
use crate::registry::{Named, Registry};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Pearson correlation of two equally long pixel vectors.
pub fn pcc(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return dim_err(format!("pcc of {} and {} values", a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|v| *v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("undefined correlation: constant input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Local SSIM values, one per window position, channel-major.
pub fn ssim_map(a: &StimulusImage, b: &StimulusImage) -> Result<Vec<f64>> {
    if a.shape != b.shape {
        return dim_err(format!("ssim of shapes {:?} and {:?}", a.shape, b.shape));
    }
    let [c, h, w] = a.shape;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return contract(format!("{h}×{w} image is smaller than the {k}×{k} window"));
    }
    let n = (k * k) as f64;
    let mut out = Vec::with_capacity(c * (h - k + 1) * (w - k + 1));
    for ch in 0..c {
        let pa = &a.pixels[ch * h * w..(ch + 1) * h * w];
        let pb = &b.pixels[ch * h * w..(ch + 1) * h * w];
        for r in 0..=h - k {
            for s in 0..=w - k {
                let (mut sa, mut sb) = (0.0, 0.0);
                for i in r..r + k {
                    for j in s..s + k {
                        sa += pa[i * w + j] as f64;
                        sb += pb[i * w + j] as f64;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
                for i in r..r + k {
                    for j in s..s + k {
                        let (x, y) = (pa[i * w + j] as f64 - ma, pb[i * w + j] as f64 - mb);
                        vaa += x * x;
                        vbb += y * y;
                        vab += x * y;
                    }
                }
                let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (vaa + vbb + SSIM_C2);
                out.push(num / den);
            }
        }
    }
    Ok(out)
}

pub fn ssim(a: &StimulusImage, b: &StimulusImage) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// A similarity between a reconstruction and a stimulus.
pub trait Metric: Named + Send + Sync {
    fn score(&self, recon: &StimulusImage, stimulus: &StimulusImage) -> Result<f64>;
}

pub struct Pcc;

impl Named for Pcc {
    fn name(&self) -> &'static str {
        "pcc"
    }
}

impl Metric for Pcc {
    fn score(&self, recon: &StimulusImage, stimulus: &StimulusImage) -> Result<f64> {
        if recon.shape != stimulus.shape {
            return dim_err(format!("pcc of shapes {:?} and {:?}", recon.shape, stimulus.shape));
        }
        pcc(&recon.pixels, &stimulus.pixels)
    }
}

pub struct Ssim;

impl Named for Ssim {
    fn name(&self) -> &'static str {
        "ssim"
    }
}

impl Metric for Ssim {
    fn score(&self, recon: &StimulusImage, stimulus: &StimulusImage) -> Result<f64> {
        ssim(recon, stimulus)
    }
}

/// Mean squared pixel error.
pub struct Mse;

impl Named for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }
}

impl Metric for Mse {
    fn score(&self, recon: &StimulusImage, stimulus: &StimulusImage) -> Result<f64> {
        if recon.shape != stimulus.shape {
            return dim_err(format!("mse of shapes {:?} and {:?}", recon.shape, stimulus.shape));
        }
        let n = recon.pixels.len() as f64;
        Ok(recon.pixels.iter().zip(&stimulus.pixels).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n)
    }
}

pub fn metrics() -> Registry<dyn Metric> {
    let mut r: Registry<dyn Metric> = Registry::new("metric");
    r.register(Box::new(Pcc)).register(Box::new(Ssim)).register(Box::new(Mse));
    r
}

/// One 2AFC decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixComTrial {
    pub index: usize,
    pub distractor: usize,
    pub pcc_true: Option<f64>,
    pub pcc_distractor: Option<f64>,
    /// 1, 0 or 0.5 for a tie (including undefined correlations).
    pub outcome: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixCom {
    pub score: f64,
    pub trials: Vec<PixComTrial>,
}

/// Seeded distractor per entry: uniform over the other entries sharing its family.
pub fn draw_distractors(families: &[&str], seed: u64) -> Result<Vec<usize>> {
    if families.len() < 2 {
        return contract("two-alternative trials need at least two stimuli");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    families
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let pool: Vec<usize> = (0..families.len()).filter(|&j| j != i && families[j] == *f).collect();
            if pool.is_empty() {
                return contract(format!("stimulus {i} has no other stimulus of family {f}"));
            }
            Ok(pool[rng.random_range(0..pool.len())])
        })
        .collect()
}

/// Pix-Com over aligned reconstructions and stimuli.
pub fn pixcom(recons: &[StimulusImage], stimuli: &[StimulusImage], families: &[&str], seed: u64) -> Result<PixCom> {
    if recons.len() != stimuli.len() || families.len() != stimuli.len() {
        return contract(format!(
            "{} reconstructions, {} stimuli and {} family labels",
            recons.len(),
            stimuli.len(),
            families.len()
        ));
    }
    let distractors = draw_distractors(families, seed)?;
    let mut trials = Vec::with_capacity(recons.len());
    for (i, (r, &d)) in recons.iter().zip(&distractors).enumerate() {
        let pt = pcc(&r.pixels, &stimuli[i].pixels).ok();
        let pd = pcc(&r.pixels, &stimuli[d].pixels).ok();
        let outcome = match (pt, pd) {
            (Some(a), Some(b)) if a > b => 1.0,
            (Some(a), Some(b)) if a < b => 0.0,
            _ => 0.5,
        };
        trials.push(PixComTrial { index: i, distractor: d, pcc_true: pt, pcc_distractor: pd, outcome });
    }
    let score = trials.iter().map(|t| t.outcome).sum::<f64>() / trials.len() as f64;
    Ok(PixCom { score, trials })
}

/// Anything that maps a signal to an image at test time.
pub trait Decoder: Sync {
    fn reconstruct(&self, id: &str, x: &CognitiveSignal) -> Result<StimulusImage>;
}

impl Decoder for ModelBundle {
    fn reconstruct(&self, id: &str, x: &CognitiveSignal) -> Result<StimulusImage> {
        let code = self.encode_cognitive(x, None, None)?;
        self.generate(id, &code.mu)
    }
}

impl Decoder for InferenceModel {
    fn reconstruct(&self, id: &str, x: &CognitiveSignal) -> Result<StimulusImage> {
        InferenceModel::reconstruct(self, id, x)
    }
}

/// Reconstructs `idx` records on up to `threads` workers; output order follows `idx`.
pub fn reconstruct_all(decoder: &dyn Decoder, data: &PairedDataset, idx: &[usize], threads: usize) -> Result<Vec<StimulusImage>> {
    let threads = threads.clamp(1, idx.len().max(1));
    let chunk = idx.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<StimulusImage>>> = std::thread::scope(|s| {
        let handles: Vec<_> = idx
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&i| decoder.reconstruct(&data.records[i].image.id, &data.records[i].signal))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("reconstruction worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(idx.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Images with a defined value.
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self { mean, std, n: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    /// `None` where the metric is undefined (e.g. PCC of a constant image).
    pub scores: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScores>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub pixcom: f64,
    pub pixcom_trials: Vec<PixComTrial>,
    pub n_trials: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregates.get(metric).map(|a| a.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&String> = self.aggregates.keys().collect();
        let mut s = String::from("id");
        names.iter().for_each(|n| {
            let _ = write!(s, ",{n}");
        });
        s.push('\n');
        for img in &self.per_image {
            s.push_str(&img.id);
            for n in &names {
                match img.scores.get(*n).copied().flatten() {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Scores aligned reconstructions against stimuli with the named metrics.
pub fn evaluate(
    recons: &[StimulusImage],
    stimuli: &[StimulusImage],
    families: &[&str],
    metric_names: &[&str],
    seed: u64,
) -> Result<EvalReport> {
    let reg = metrics();
    let chosen: Vec<&dyn Metric> = metric_names.iter().map(|n| reg.get(n)).collect::<Result<_>>()?;
    let mut per_image = Vec::with_capacity(recons.len());
    let mut columns: BTreeMap<String, Vec<f64>> = chosen.iter().map(|m| (m.name().to_string(), Vec::new())).collect();
    for (r, y) in recons.iter().zip(stimuli) {
        let mut scores = BTreeMap::new();
        for m in &chosen {
            let v = match m.score(r, y) {
                Ok(v) => Some(v),
                Err(Error::Domain(msg)) => {
                    warn!("{} undefined for {}: {msg}; excluded from aggregates", m.name(), y.id);
                    None
                }
                Err(e) => return Err(e),
            };
            if let Some(v) = v {
                columns.get_mut(m.name()).expect("column").push(v);
            }
            scores.insert(m.name().to_string(), v);
        }
        per_image.push(ImageScores { id: y.id.clone(), scores });
    }
    let aggregates = columns.into_iter().filter_map(|(k, v)| Aggregate::of(&v).map(|a| (k, a))).collect();
    let pc = pixcom(recons, stimuli, families, seed)?;
    Ok(EvalReport { per_image, aggregates, pixcom: pc.score, n_trials: pc.trials.len(), pixcom_trials: pc.trials, seed })
}

/// Reconstructs every test signal with the latent at `μ` and scores it.
pub fn make_report(
    decoder: &dyn Decoder,
    data: &PairedDataset,
    metric_names: &[&str],
    seed: u64,
    threads: usize,
) -> Result<(EvalReport, Vec<StimulusImage>)> {
    if data.test.is_empty() {
        return contract("test split is empty");
    }
    let recons = reconstruct_all(decoder, data, &data.test, threads)?;
    let stimuli: Vec<StimulusImage> = data.test.iter().map(|&i| data.records[i].image.clone()).collect();
    let families: Vec<&str> = data.test.iter().map(|&i| data.records[i].family.as_str()).collect();
    let report = evaluate(&recons, &stimuli, &families, metric_names, seed)?;
    Ok((report, recons))
}

/// Writes `report.json`, `metrics.csv` and one `<id>.pgm` triptych per test image.
pub fn write_outputs(dir: &Path, report: &EvalReport, stimuli: &[StimulusImage], recons: &[StimulusImage]) -> Result<()> {
    fs::create_dir_all(dir.join("triptychs"))?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    for (y, r) in stimuli.iter().zip(recons) {
        pgm::write_pgm(&dir.join("triptychs").join(format!("{}.pgm", y.id)), &pgm::triptych(y, r)?)?;
    }
    Ok(())
}
