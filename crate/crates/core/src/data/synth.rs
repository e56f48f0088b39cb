//! Procedural stimuli and a simulated voxel-response model.
//!
//! A response is `x = W · φ(y) + σ · n`, optionally passed through `tanh`,
//! where `φ` is an area-averaged 20×20 downsample of every channel and `W`
//! is a fixed Gaussian map with entries of variance `1 / (400 · C)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, Provenance, Record};
use crate::error::{dim_err, Error, Result};
use crate::model::{CognitiveSignal, StimulusImage};
use crate::registry::{Named, Registry};
use crate::tensor::Scalar;

/// Side of the downsampled feature grid.
pub const FEATURE_GRID: usize = 20;

const SUPERSAMPLE: usize = 3;

fn default_family() -> String {
    "geometric-shapes".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    #[serde(default = "default_family")]
    pub family: String,
    pub d_x: usize,
    pub noise_sigma: f64,
    /// Apply `tanh` to the noisy linear response.
    #[serde(default)]
    pub nonlinear: bool,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub n_train: usize,
    pub n_test: usize,
}

fn one() -> usize {
    1
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            family: default_family(),
            d_x: 2048,
            noise_sigma: 0.1,
            nonlinear: false,
            image_size: 100,
            channels: 1,
            n_train: 1200,
            n_test: 50,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 {
            return Err(Error::Config("d_x must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is below the 8-pixel minimum", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.n_train == 0 || self.n_test < 2 {
            return Err(Error::Config("need at least one training and two test pairs".into()));
        }
        families().get(&self.family)?;
        Ok(())
    }
}

/// A procedural image family. `draw` returns the class index and a
/// `size × size` coverage map in `[0, 1]`.
pub trait StimulusFamily: Named + Send + Sync {
    fn classes(&self) -> &'static [&'static str];
    fn draw(&self, rng: &mut ChaCha8Rng, size: usize) -> (usize, Vec<f32>);
}

/// Renders an indicator function with `SUPERSAMPLE²` samples per pixel.
/// Coordinates passed to `inside` are in `[0, 1]²`.
fn rasterize(size: usize, inside: impl Fn(f64, f64) -> bool) -> Vec<f32> {
    let s = SUPERSAMPLE;
    let mut out = vec![0.0f32; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut hits = 0;
            for i in 0..s {
                for j in 0..s {
                    let y = (r as f64 + (i as f64 + 0.5) / s as f64) / size as f64;
                    let x = (c as f64 + (j as f64 + 0.5) / s as f64) / size as f64;
                    hits += inside(x, y) as usize;
                }
            }
            out[r * size + c] = hits as f32 / (s * s) as f32;
        }
    }
    out
}

/// Random rectangles, crosses and ellipses at random position, scale and angle.
pub struct GeometricShapes;

impl Named for GeometricShapes {
    fn name(&self) -> &'static str {
        "geometric-shapes"
    }
}

impl StimulusFamily for GeometricShapes {
    fn classes(&self) -> &'static [&'static str] {
        &["rectangle", "cross", "ellipse"]
    }

    fn draw(&self, rng: &mut ChaCha8Rng, size: usize) -> (usize, Vec<f32>) {
        let class = rng.random_range(0..3);
        let (cx, cy) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
        let (a, b) = (rng.random_range(0.12..0.3), rng.random_range(0.12..0.3));
        let t = rng.random_range(0.05..0.1);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sn, cs) = theta.sin_cos();
        let local = move |x: f64, y: f64| {
            let (dx, dy) = (x - cx, y - cy);
            (cs * dx + sn * dy, -sn * dx + cs * dy)
        };
        let map = match class {
            0 => rasterize(size, |x, y| {
                let (u, v) = local(x, y);
                u.abs() < a && v.abs() < b
            }),
            1 => rasterize(size, |x, y| {
                let (u, v) = local(x, y);
                (u.abs() < a && v.abs() < t) || (u.abs() < t && v.abs() < b)
            }),
            _ => rasterize(size, |x, y| {
                let (u, v) = local(x, y);
                (u / a).powi(2) + (v / b).powi(2) < 1.0
            }),
        };
        (class, map)
    }
}

/// Random open polylines of two to four strokes, glyph-like.
pub struct DigitStrokes;

impl Named for DigitStrokes {
    fn name(&self) -> &'static str {
        "digits-like-strokes"
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (qx * qx + qy * qy).sqrt()
}

impl StimulusFamily for DigitStrokes {
    fn classes(&self) -> &'static [&'static str] {
        &["two-stroke", "three-stroke", "four-stroke"]
    }

    fn draw(&self, rng: &mut ChaCha8Rng, size: usize) -> (usize, Vec<f32>) {
        let class = rng.random_range(0..3);
        let pts: Vec<(f64, f64)> =
            (0..class + 3).map(|_| (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8))).collect();
        let width = rng.random_range(0.04..0.08);
        let map = rasterize(size, |x, y| pts.windows(2).any(|w| segment_distance((x, y), w[0], w[1]) < width));
        (class, map)
    }
}

pub fn families() -> Registry<dyn StimulusFamily> {
    let mut r: Registry<dyn StimulusFamily> = Registry::new("stimulus family");
    r.register(Box::new(GeometricShapes)).register(Box::new(DigitStrokes));
    r
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Images with their class names. Foreground intensity is drawn from
/// `[0.6, 1]` per channel on a black background.
pub fn gen_labeled(
    family: &str,
    n: usize,
    seed: u64,
    size: usize,
    channels: usize,
) -> Result<Vec<(StimulusImage, &'static str)>> {
    if n == 0 {
        return Err(Error::Contract("at least one stimulus must be requested".into()));
    }
    let reg = families();
    let fam = reg.get(family)?;
    let mut rng = stream(seed, 0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (class, cover) = fam.draw(&mut rng, size);
        let tint: Vec<f32> = (0..channels).map(|_| rng.random_range(0.6..=1.0)).collect();
        let mut pixels = Vec::with_capacity(channels * size * size);
        for t in &tint {
            pixels.extend(cover.iter().map(|c| (c * t).clamp(0.0, 1.0)));
        }
        let img = StimulusImage::new(format!("{family}-{seed:x}-{i:05}"), [channels, size, size], pixels)?;
        out.push((img, fam.classes()[class]));
    }
    Ok(out)
}

/// `n` seeded stimuli from a registered family.
pub fn gen_stimuli(family: &str, n: usize, seed: u64, size: usize, channels: usize) -> Result<Vec<StimulusImage>> {
    Ok(gen_labeled(family, n, seed, size, channels)?.into_iter().map(|(i, _)| i).collect())
}

/// Area-averaging resample of one `size × size` plane to `grid × grid`.
fn area_weights(size: usize, grid: usize) -> Vec<f64> {
    let cell = size as f64 / grid as f64;
    let mut w = vec![0.0; grid * size];
    for i in 0..grid {
        let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
        for p in 0..size {
            let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
            w[i * size + p] = overlap / cell;
        }
    }
    w
}

/// `φ(y)`: every channel downsampled to `grid × grid`, flattened channel-major.
pub fn downsample(img: &StimulusImage, grid: usize) -> Vec<f64> {
    let [ch, h, w] = img.shape;
    let (wr, wc) = (area_weights(h, grid), area_weights(w, grid));
    let mut out = Vec::with_capacity(ch * grid * grid);
    for c in 0..ch {
        let plane = &img.pixels[c * h * w..(c + 1) * h * w];
        // rows first: tmp[i][x] = Σ_y wr[i][y] · plane[y][x]
        let mut tmp = vec![0.0; grid * w];
        for i in 0..grid {
            for y in 0..h {
                let k = wr[i * h + y];
                if k != 0.0 {
                    for x in 0..w {
                        tmp[i * w + x] += k * plane[y * w + x] as f64;
                    }
                }
            }
        }
        for i in 0..grid {
            for j in 0..grid {
                out.push((0..w).map(|x| wc[j * w + x] * tmp[i * w + x]).sum());
            }
        }
    }
    out
}

/// A fixed linear voxel map over downsampled image features.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseModel {
    pub d_x: usize,
    pub features: usize,
    pub grid: usize,
    /// Row-major `d_x × features`.
    pub weights: Vec<f64>,
    pub noise_sigma: f64,
    pub nonlinear: bool,
}

impl ResponseModel {
    pub fn random(params: &SynthParams, seed: u64) -> Result<Self> {
        let features = FEATURE_GRID * FEATURE_GRID * params.channels;
        let normal = Normal::new(0.0, (1.0 / features as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = stream(seed, 1);
        let weights = (0..params.d_x * features).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            d_x: params.d_x,
            features,
            grid: FEATURE_GRID,
            weights,
            noise_sigma: params.noise_sigma,
            nonlinear: params.nonlinear,
        })
    }

    /// `W = I` over a single-channel feature grid, noiseless and linear.
    pub fn identity(grid: usize) -> Self {
        let f = grid * grid;
        let mut weights = vec![0.0; f * f];
        (0..f).for_each(|i| weights[i * f + i] = 1.0);
        Self { d_x: f, features: f, grid, weights, noise_sigma: 0.0, nonlinear: false }
    }

    /// Raw (un-normalized) responses in f64.
    pub fn respond(&self, images: &[StimulusImage], seed: u64) -> Result<Vec<Vec<f64>>> {
        let n = images.len();
        let mut phi = Vec::with_capacity(n * self.features);
        for img in images {
            let f = downsample(img, self.grid);
            if f.len() != self.features {
                return dim_err(format!("image yields {} features, response model expects {}", f.len(), self.features));
            }
            phi.extend(f);
        }
        let mut x = vec![0.0f64; n * self.d_x];
        let fe = self.features as isize;
        // X = Φ · Wᵀ
        f64::gemm(n, self.features, self.d_x, &phi, fe, 1, &self.weights, 1, fe, 0.0, &mut x, self.d_x as isize, 1);
        let mut rng = stream(seed, 2);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for v in &mut x {
            if self.noise_sigma > 0.0 {
                *v += self.noise_sigma * normal.sample(&mut rng);
            }
            if self.nonlinear {
                *v = v.tanh();
            }
        }
        Ok(x.chunks(self.d_x).map(|c| c.to_vec()).collect())
    }
}

/// Per-dimension standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Population statistics over `rows[idx]`. Constant dimensions keep unit scale.
    pub fn fit(rows: &[Vec<f64>], idx: &[usize]) -> Result<Self> {
        let first = idx.first().ok_or_else(|| Error::Contract("z-scoring needs at least one row".into()))?;
        let d = rows[*first].len();
        let n = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in idx {
            mean.iter_mut().zip(&rows[i]).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in idx {
            var.iter_mut().zip(rows[i].iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2));
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f32> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| ((v - m) / s) as f32).collect()
    }
}

/// Simulated, z-scored signals. Normalization statistics come from the
/// rows listed in `fit_on` only.
pub fn simulate_responses(
    images: &[StimulusImage],
    params: &SynthParams,
    seed: u64,
    fit_on: &[usize],
) -> Result<(Vec<CognitiveSignal>, ZScore)> {
    let model = ResponseModel::random(params, seed)?;
    let raw = model.respond(images, seed)?;
    let z = ZScore::fit(&raw, fit_on)?;
    let signals = raw.iter().map(|r| CognitiveSignal::new(z.apply(r))).collect::<Result<_>>()?;
    Ok((signals, z))
}

/// The full synthetic dataset: the first `n_train` records train, the rest test.
pub fn synthesize(params: &SynthParams, seed: u64) -> Result<PairedDataset> {
    params.validate()?;
    let n = params.n_train + params.n_test;
    let images = gen_stimuli(&params.family, n, seed, params.image_size, params.channels)?;
    let train: Vec<usize> = (0..params.n_train).collect();
    let (signals, _) = simulate_responses(&images, params, seed, &train)?;
    let records = signals
        .into_iter()
        .zip(images)
        .map(|(signal, image)| Record { signal, image, family: params.family.clone() })
        .collect();
    let ds = PairedDataset {
        records,
        train,
        test: (params.n_train..n).collect(),
        d_x: params.d_x,
        image_shape: [params.channels, params.image_size, params.image_size],
        provenance: Provenance::Synthetic { seed, params: params.clone() },
    };
    ds.validate()?;
    Ok(ds)
}
