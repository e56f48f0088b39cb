//! Acceptance gate. One PASS/FAIL line per criterion; exits nonzero if any fail.
//!
//! Positional arguments select criteria by substring, e.g.
//! `cargo test -p dvaegan-cli --test acceptance -- metric rating`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dvaegan_core::data::{gen_stimuli, synthesize, PairedDataset, SynthParams};
use dvaegan_core::eval::{make_report, pcc, pixcom, ssim, EvalReport};
use dvaegan_core::gradcheck::suite::run_suite;
use dvaegan_core::gradcheck::GradCheck;
use dvaegan_core::loss::{feat_match_rec, gan_loss_d, kl_prior, LossWeights, Pass, Stage};
use dvaegan_core::model::checkpoint::load_checkpoint;
use dvaegan_core::model::{Arch, ModelBundle, Net, StimulusImage};
use dvaegan_core::train::{checkpoint_path, resolve_arch, train_from, train_full, PassEvent, TrainConfig, TrainLog};
use dvaegan_core::Tape;
use dvaegan_rating::build_session;
use dvaegan_rating::scripted::simulate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Beta, ContinuousCDF, StudentsT};

type Outcome = anyhow::Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);
type BenchCriterion = (&'static str, fn(&mut Bench) -> Outcome);

const SCHEMES: [&str; 3] = ["full", "vae-gan", "cnn-encoder"];
const SEEDS: [u64; 3] = [0, 1, 2];
const PCC_MIN: f64 = 0.6;
const PIXCOM_MIN: f64 = 0.8;
const UNTRAINED_INITS: u64 = 20;

fn bench_params() -> SynthParams {
    SynthParams { image_size: 32, ..SynthParams::default() }
}

fn bench_arch() -> Arch {
    Arch { image_size: 32, conv_channels: [16, 32, 64], ..Arch::default() }
}

fn bench_config(scheme: &str, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: [12, 10, 4],
        lr: 3e-4,
        batch_size: 32,
        seed,
        ablation: scheme.into(),
        weights: LossWeights { rec: 100.0, prior: 1.0 },
        ..TrainConfig::default()
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

struct Run {
    log: TrainLog,
    report: EvalReport,
    elapsed: Duration,
}

/// Benchmark dataset and trained runs, shared by the criteria that need them.
struct Bench {
    data: PairedDataset,
    dir: tempfile::TempDir,
    runs: BTreeMap<(String, u64), Run>,
}

impl Bench {
    fn new() -> anyhow::Result<Self> {
        Ok(Self { data: synthesize(&bench_params(), 0)?, dir: tempfile::tempdir()?, runs: BTreeMap::new() })
    }

    fn run_dir(&self, tag: &str) -> PathBuf {
        self.dir.path().join(tag)
    }

    fn train(&self, scheme: &str, seed: u64, out: Option<&Path>) -> anyhow::Result<Run> {
        let t = Instant::now();
        let (bundle, log) = train_full(&self.data, &bench_arch(), &bench_config(scheme, seed), out)?;
        let elapsed = t.elapsed();
        let (report, _) = make_report(&bundle, &self.data, &["pcc", "ssim"], 0, threads())?;
        eprintln!(
            "  trained {scheme} seed {seed} in {:.0?}: pcc {:.4}, pixcom {:.3}",
            elapsed,
            report.mean("pcc").unwrap_or(f64::NAN),
            report.pixcom
        );
        Ok(Run { log, report, elapsed })
    }

    fn run(&mut self, scheme: &str, seed: u64) -> anyhow::Result<&Run> {
        let key = (scheme.to_string(), seed);
        if !self.runs.contains_key(&key) {
            let out = self.run_dir(&format!("{scheme}-{seed}"));
            let r = self.train(scheme, seed, Some(&out))?;
            self.runs.insert(key.clone(), r);
        }
        Ok(&self.runs[&key])
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let cfg = GradCheck::default();
    let results = run_suite(20, 7, &cfg)?;
    let elapsed = t.elapsed();
    let worst = results.iter().max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err)).unwrap();
    let failing: Vec<&str> = results.iter().filter(|r| !r.report.passed(1e-4)).map(|r| r.name.as_str()).collect();
    let checked: usize = results.iter().map(|r| r.report.checked).sum();
    let ok = failing.is_empty() && results.iter().all(|r| r.instances >= 20) && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{} cases x 20 instances, {checked} coordinates, worst {} at {:.2e}, failing {failing:?}, {:.1?}",
            results.len(),
            worst.name,
            worst.report.max_rel_err,
            elapsed
        ),
    ))
}

fn loss_oracles() -> Outcome {
    let tape = Tape::<f64>::new();
    let kl = kl_prior(tape.constant_from(vec![1, 1], vec![1.0])?, tape.constant_from(vec![1, 1], vec![0.0])?)?.item();
    // log q(z) - log p(z) for q = N(1, 1), p = N(0, 1) is z - 1/2
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let mc = (0..n).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal) - 0.5).sum::<f64>() / n as f64;
    let kl_ok = (kl - mc).abs() <= 0.01 * mc.abs();

    let half = tape.constant_from(vec![1, 1], vec![0.5])?;
    let gd = gan_loss_d(half, half)?.item();
    let gd_ok = (gd - 2.0 * std::f64::consts::LN_2).abs() <= 1e-6;

    let y: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
    let yv = tape.constant_from(vec![2, 32], y)?;
    let fm = feat_match_rec(yv, yv)?.item();

    Ok((kl_ok && gd_ok && fm == 0.0, format!("kl {kl:.6} vs monte-carlo {mc:.6}; gan_d(0.5, 0.5) {gd:.9}; feat_match(y, y) {fm}")))
}

fn freeze_contracts() -> Outcome {
    let params = SynthParams { d_x: 64, image_size: 16, n_train: 20, n_test: 4, ..SynthParams::default() };
    let data = synthesize(&params, 3)?;
    let arch = Arch { d_z: 8, image_size: 16, conv_channels: [4, 8, 8], cog_hidden: 32, vis_hidden: 32, ..Arch::default() };
    // 20 pairs at batch 4: 5 steps per epoch, 50 per stage
    let cfg = TrainConfig { epochs: [10, 10, 10], batch_size: 4, lr: 1e-3, seed: 11, ..TrainConfig::default() };
    let arch = resolve_arch(&Arch { d_x: data.active_dim(), ..arch }, &data, &cfg)?;
    let mut bundle = ModelBundle::new(arch, cfg.seed)?;
    let flat = |b: &ModelBundle, n: Net| -> Vec<Vec<f32>> { b.net(n).params_flat().map(|t| t.data().to_vec()).collect() };
    let mut prev: BTreeMap<Net, Vec<Vec<f32>>> = Net::ALL.into_iter().map(|n| (n, flat(&bundle, n))).collect();
    let mut steps: BTreeMap<Stage, u64> = BTreeMap::new();
    let mut violations = 0usize;
    let mut checks = 0usize;
    let mut obs = |ev: &PassEvent, b: &ModelBundle| {
        for n in Net::ALL {
            let now = flat(b, n);
            if !ev.updated.contains(&n) {
                checks += 1;
                if now != prev[&n] || !b.net(n).grads_are_zero() {
                    violations += 1;
                }
            }
            prev.insert(n, now);
        }
        if ev.pass == Pass::Generator {
            *steps.entry(ev.stage).or_default() += 1;
        }
    };
    train_from(&mut bundle, &data, &cfg, Stage::I, 0, None, Some(&mut obs))?;
    let per_stage: Vec<u64> = Stage::ALL.iter().map(|s| steps.get(s).copied().unwrap_or(0)).collect();
    Ok((violations == 0 && per_stage.iter().all(|&s| s == 50), format!("steps per stage {per_stage:?}, {checks} frozen-network checks, {violations} violations")))
}

fn distillation(bench: &mut Bench) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let s = bench.run("full", seed)?.log.stage(Stage::II).ok_or_else(|| anyhow::anyhow!("no stage II log"))?;
        let (Some(before), Some(after)) = (s.latent_distance_before, s.latent_distance_after()) else {
            anyhow::bail!("stage II latent distances missing");
        };
        ok &= after < 0.5 * before;
        parts.push(format!("seed {seed}: {before:.2} -> {after:.2} ({:.1}%)", 100.0 * after / before));
    }
    Ok((ok, parts.join(", ")))
}

fn end_to_end(bench: &mut Bench) -> Outcome {
    let data = &bench.data;
    let split_ok = data.train.len() == 1200 && data.test.len() == 50;
    let r = bench.run("full", 0)?;
    let (p, pc, elapsed) = (r.report.mean("pcc").unwrap_or(f64::NAN), r.report.pixcom, r.elapsed);
    let data = &bench.data;
    let arch = resolve_arch(&Arch { d_x: data.active_dim(), ..bench_arch() }, data, &bench_config("full", 0))?;
    let mut untrained = 0.0;
    for k in 0..UNTRAINED_INITS {
        let b = ModelBundle::new(arch.clone(), 1000 + k)?;
        untrained += make_report(&b, data, &["pcc"], k, threads())?.0.pixcom;
    }
    untrained /= UNTRAINED_INITS as f64;
    let ok = split_ok && p >= PCC_MIN && pc >= PIXCOM_MIN && (untrained - 0.5).abs() <= 0.05 && elapsed <= Duration::from_secs(30 * 60);
    Ok((
        ok,
        format!(
            "{} train / {} test; pcc {p:.4} (>= {PCC_MIN}), pixcom {pc:.3} (>= {PIXCOM_MIN}), training {:.0?}; untrained pixcom {untrained:.3} over {} trials",
            data.train.len(),
            data.test.len(),
            elapsed,
            UNTRAINED_INITS as usize * data.test.len()
        ),
    ))
}

fn ablation_ordering(bench: &mut Bench) -> Outcome {
    let mut pccs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        for s in SCHEMES {
            let p = bench.run(s, seed)?.report.mean("pcc").unwrap_or(f64::NAN);
            pccs.entry(s).or_default().push(p);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let [full, vae, cnn] = SCHEMES.map(|s| mean(&pccs[s]));
    let d: Vec<f64> = pccs["full"].iter().zip(&pccs["vae-gan"]).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let sd = (d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = md / (sd / n.sqrt());
    let crit = StudentsT::new(0.0, 1.0, n - 1.0)?.inverse_cdf(0.95);
    let ok = full >= vae && vae >= cnn && t > crit;
    Ok((
        ok,
        format!("mean pcc full {full:.4}, vae-gan {vae:.4}, cnn-encoder {cnn:.4}; full - vae-gan paired t {t:.2} vs one-sided 95% critical {crit:.2}"),
    ))
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut range_ok = true;
    for _ in 0..200 {
        let a: Vec<f32> = (0..64).map(|_| rng.random::<f32>()).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.random::<f32>()).collect();
        let (scale, shift) = (rng.random_range(0.1f32..5.0), rng.random_range(-2.0f32..2.0));
        let sa: Vec<f32> = a.iter().map(|x| scale * x + shift).collect();
        let ab = pcc(&a, &b)?;
        range_ok &= (-1.0..=1.0).contains(&ab);
        worst = worst.max((ab - pcc(&b, &a)?).abs()).max((ab - pcc(&sa, &b)?).abs());
    }
    let pcc_ok = range_ok && worst < 1e-5;

    let img = |px: Vec<f32>| StimulusImage::new("m", [1, 16, 16], px);
    let a = img((0..256).map(|_| rng.random::<f32>()).collect())?;
    let self_ssim = ssim(&a, &a)?;
    let zero = ssim(&img(vec![0.0; 256])?, &img(vec![1.0; 256])?)?;
    let c1 = 0.01f64 * 0.01;
    let closed = c1 / (1.0 + c1);
    let ssim_ok = (self_ssim - 1.0).abs() < 1e-12 && (zero - closed).abs() < 1e-8 && (closed - 9.999e-5).abs() < 1e-8;

    let stimuli = gen_stimuli("geometric-shapes", 1000, 9, 16, 1)?;
    let noise: Vec<StimulusImage> = stimuli
        .iter()
        .map(|s| StimulusImage::new(format!("noise-{}", s.id), s.shape, (0..s.pixels.len()).map(|_| rng.random::<f32>()).collect()))
        .collect::<Result<_, _>>()?;
    let pc = pixcom(&noise, &stimuli, &vec!["geometric-shapes"; 1000], 4)?;
    let pix_ok = pc.trials.len() == 1000 && (pc.score - 0.5).abs() <= 0.05;
    Ok((
        pcc_ok && ssim_ok && pix_ok,
        format!(
            "pcc symmetry/affine max deviation {worst:.1e}; ssim(a, a) {self_ssim}; zero-variance {zero:.6e} vs {closed:.6e}; noise pixcom {:.3} over {}",
            pc.score,
            pc.trials.len()
        ),
    ))
}

fn determinism(bench: &mut Bench) -> Outcome {
    bench.run("full", 0)?;
    let a_dir = bench.run_dir("full-0");
    let b_dir = bench.run_dir("full-0-again");
    let again = bench.train("full", 0, Some(&b_dir))?;
    let first = &bench.runs[&("full".to_string(), 0)];
    let same_file = |x: &Path, y: &Path| -> anyhow::Result<bool> { Ok(std::fs::read(x)? == std::fs::read(y)?) };
    let mut ok = first.report.to_json()? == again.report.to_json()?;
    for s in Stage::ALL {
        ok &= same_file(&checkpoint_path(&a_dir, s), &checkpoint_path(&b_dir, s))?;
    }

    let cfg = bench_config("full", 0);
    let mut resumed = Vec::new();
    for from in [Stage::I, Stage::II] {
        let (mut b, meta) = load_checkpoint(&checkpoint_path(&a_dir, from))?;
        let dir = bench.run_dir(&format!("resume-{}", from.number()));
        std::fs::create_dir_all(&dir)?;
        let next = Stage::from_number(from.number() + 1).unwrap();
        train_from(&mut b, &bench.data, &cfg, next, meta.step, Some(&dir), None)?;
        let mut same = same_file(&checkpoint_path(&a_dir, Stage::III), &checkpoint_path(&dir, Stage::III))?;
        same &= make_report(&b, &bench.data, &["pcc", "ssim"], 0, threads())?.0.to_json()? == first.report.to_json()?;
        ok &= same;
        resumed.push(format!("from stage {}: {}", from.number(), if same { "identical" } else { "differs" }));
    }
    Ok((ok, format!("rerun checkpoints and report {}; resume {}", if ok { "identical" } else { "compared" }, resumed.join(", "))))
}

fn clopper_pearson(k: u64, n: u64, level: f64) -> anyhow::Result<(f64, f64)> {
    let a = (1.0 - level) / 2.0;
    let lo = if k == 0 { 0.0 } else { Beta::new(k as f64, (n - k + 1) as f64)?.inverse_cdf(a) };
    let hi = if k == n { 1.0 } else { Beta::new((k + 1) as f64, (n - k) as f64)?.inverse_cdf(1.0 - a) };
    Ok((lo, hi))
}

fn rating_protocol() -> Outcome {
    let n = 1000;
    let stimuli = gen_stimuli("geometric-shapes", n, 21, 8, 1)?;
    let recons: Vec<StimulusImage> = stimuli
        .iter()
        .map(|s| StimulusImage::new(format!("recon-{}", s.id), s.shape, s.pixels.iter().map(|p| 0.8 * p + 0.1).collect()))
        .collect::<Result<_, _>>()?;
    let session = build_session(&recons, &stimuli, &vec!["geometric-shapes"; n], 21)?;
    let oracle = simulate(session.clone(), "oracle", 1, 0)?;
    let random = simulate(session, "random", 1, 5)?;
    let k = (random.pooled * n as f64).round() as u64;
    let (lo, hi) = clopper_pearson(k, n as u64, 0.99)?;
    let ok = oracle.pooled == 1.0 && oracle.n_choices == n && random.n_choices == n && lo <= 0.5 && 0.5 <= hi;
    Ok((ok, format!("oracle {:.3} over {}; random {k}/{n}, exact 99% interval ({lo:.4}, {hi:.4})", oracle.pooled, oracle.n_choices)))
}

fn with_bench(cache: &mut Option<Bench>, f: fn(&mut Bench) -> Outcome) -> Outcome {
    if cache.is_none() {
        *cache = Some(Bench::new()?);
    }
    f(cache.as_mut().unwrap())
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut bench = None;

    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    };
    let quick: [Criterion; 5] = [
        ("gradient-correctness", gradients),
        ("loss-oracles", loss_oracles),
        ("stage-freeze-contracts", freeze_contracts),
        ("metric-properties", metric_properties),
        ("rating-protocol", rating_protocol),
    ];
    for (name, f) in quick {
        if selected(name) {
            report(name, f());
        }
    }
    let heavy: [BenchCriterion; 4] = [
        ("distillation", distillation),
        ("end-to-end-benchmark", end_to_end),
        ("ablation-ordering", ablation_ordering),
        ("determinism", determinism),
    ];
    for (name, f) in heavy {
        if selected(name) {
            report(name, with_bench(&mut bench, f));
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
