use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dvaegan_core::data::{dvgt, load_manifest, pgm, save_manifest, synthesize, PairedDataset, Split};
use dvaegan_core::eval::{evaluate, reconstruct_all, write_outputs};
use dvaegan_core::loss::Stage;
use dvaegan_core::model::checkpoint::{load_checkpoint, InferenceModel};
use dvaegan_core::model::{ModelBundle, StimulusImage};
use dvaegan_core::train::scheme::schemes;
use dvaegan_core::train::{checkpoint_path, resolve_arch, train_from, TrainLog};
use dvaegan_core::{Error, Tensor};
use dvaegan_rating::scripted;
use dvaegan_rating::server::{load_session, save_session, serve, ServeConfig};
use dvaegan_rating::{build_session, RatingSession};
use serde::{Deserialize, Serialize};

use crate::config::{threads, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dvaegan", version, about = "Reconstruct stimulus images from cognitive signals")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        d_x: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Train through the scheme's stages, checkpointing after each.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full | vae-gan | cnn-encoder
        #[arg(long)]
        ablation: Option<String>,
        /// Resume at this stage from the previous stage's checkpoint in `--out`.
        #[arg(long)]
        stage: Option<u8>,
        /// Epochs per stage, e.g. `12,10,4`.
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
    },
    /// Decode signals with the cognitive encoder and generator only.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score test reconstructions: PCC, SSIM and Pix-Com.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `reconstruct`.
        #[arg(long)]
        recons: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and serve a rating session, or drive it with scripted raters.
    Rate {
        #[arg(long)]
        session_file: PathBuf,
        /// With `--recons`, (re)build the session file from these.
        #[arg(long, requires = "recons")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        recons: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Serve `/api/result` before every rater has finished.
        #[arg(long)]
        force_result: bool,
        /// Directory of the browser bundle to serve at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Give each rater their own seeded trial order.
        #[arg(long)]
        per_rater_order: bool,
        /// Run scripted raters instead of serving: oracle | random.
        #[arg(long)]
        simulate: Option<String>,
        #[arg(long, default_value_t = 1)]
        raters: usize,
        /// Where `--simulate` writes the result (default: next to the session file).
        #[arg(long)]
        result_out: Option<PathBuf>,
    },
}

/// 2 for configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let config = err.chain().any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config(_))));
    if config {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth { out, family, n_train, n_test, image_size, d_x, noise_sigma } => {
            let mut cfg = cfg;
            let p = &mut cfg.synth;
            p.family = family.unwrap_or(std::mem::take(&mut p.family));
            p.n_train = n_train.unwrap_or(p.n_train);
            p.n_test = n_test.unwrap_or(p.n_test);
            p.image_size = image_size.unwrap_or(p.image_size);
            p.d_x = d_x.unwrap_or(p.d_x);
            p.noise_sigma = noise_sigma.unwrap_or(p.noise_sigma);
            cfg.validate()?;
            cmd_synth(&cfg, &out)
        }
        Command::Train { data, out, ablation, stage, epochs } => {
            let mut cfg = cfg;
            if let Some(a) = ablation {
                cfg.train.ablation = a;
            }
            if let Some(e) = epochs {
                let Ok(e) = <[usize; 3]>::try_from(e.as_slice()) else {
                    return Err(Error::Config(format!("--epochs needs three values, got {}", e.len())).into());
                };
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            cmd_train(&cfg, &data, &out, stage)
        }
        Command::Reconstruct { checkpoint, data, out, split } => {
            cfg.validate()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            cmd_reconstruct(&checkpoint, &data, &out, split)
        }
        Command::Evaluate { data, recons, out } => {
            cfg.validate()?;
            cmd_evaluate(&cfg, &data, &recons, &out)
        }
        Command::Rate { session_file, data, recons, bind, force_result, static_dir, per_rater_order, simulate, raters, result_out } => {
            cfg.validate()?;
            let session = match (data, recons) {
                (Some(d), Some(r)) => {
                    let mut s = rating_session(&cfg, &d, &r)?;
                    s.per_rater_order = per_rater_order;
                    save_session(&session_file, &s)?;
                    println!("session {}: {} trials -> {}", s.id, s.n_trials(), session_file.display());
                    s
                }
                _ => load_session(&session_file).with_context(|| format!("loading {}", session_file.display()))?,
            };
            match simulate {
                Some(policy) => {
                    let result = scripted::simulate(session, &policy, raters, cfg.seed())?;
                    let path = result_out.unwrap_or_else(|| session_file.with_extension("result.json"));
                    fs::write(&path, serde_json::to_string_pretty(&result)? + "\n")?;
                    println!("hum-com {:.4} over {} choices -> {}", result.pooled, result.n_choices, path.display());
                    Ok(())
                }
                None => {
                    let sc = ServeConfig { session_file, bind, force_result, static_dir };
                    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
                    rt.block_on(serve(&sc))?;
                    Ok(())
                }
            }
        }
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let ds = synthesize(&cfg.synth, cfg.seed())?;
    let path = save_manifest(&ds, out)?;
    println!(
        "{} records ({} train / {} test), d_x {}, image {:?}, families {:?} -> {}",
        ds.records.len(),
        ds.train.len(),
        ds.test.len(),
        ds.d_x,
        ds.image_shape,
        ds.families(),
        path.display()
    );
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<PairedDataset> {
    load_manifest(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, stage: Option<u8>) -> anyhow::Result<()> {
    let data = load_data(data)?;
    let tc = &cfg.train;
    let first = match stage {
        None => Stage::I,
        Some(n) => Stage::from_number(n).ok_or_else(|| Error::Config(format!("--stage must be 1, 2 or 3, got {n}")))?,
    };
    let reg = schemes();
    let scheme = reg.get(&tc.ablation)?;
    let stages = scheme.stages();
    let Some(pos) = stages.iter().position(|s| *s == first) else {
        bail!(Error::Config(format!("scheme {} has no stage {}", tc.ablation, first.number())));
    };
    fs::create_dir_all(out)?;
    let (mut bundle, step0) = if pos == 0 {
        let mut arch = cfg.arch.clone();
        arch.d_x = data.active_dim();
        [arch.image_channels, arch.image_size] = [data.image_shape[0], data.image_shape[1]];
        (ModelBundle::new(resolve_arch(&arch, &data, tc)?, tc.seed)?, 0)
    } else {
        let prev = checkpoint_path(out, stages[pos - 1]);
        let (b, meta) = load_checkpoint(&prev).with_context(|| format!("resuming from {}", prev.display()))?;
        if meta.scheme != tc.ablation || meta.seed != tc.seed {
            bail!(Error::Config(format!(
                "{} was written by scheme {} seed {}, not {} seed {}",
                prev.display(),
                meta.scheme,
                meta.seed,
                tc.ablation,
                tc.seed
            )));
        }
        (b, meta.step)
    };
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let log = train_from(&mut bundle, &data, tc, first, step0, Some(out), None)?;
    let jsonl = log.to_jsonl()?;
    let log_file = out.join("train_log.jsonl");
    if pos == 0 {
        fs::write(&log_file, jsonl)?;
    } else {
        use std::io::Write;
        fs::OpenOptions::new().create(true).append(true).open(&log_file)?.write_all(jsonl.as_bytes())?;
    }
    print_train_summary(&log, out);
    Ok(())
}

fn print_train_summary(log: &TrainLog, out: &Path) {
    for s in &log.stages {
        let last = s.epochs.last();
        print!("stage {}: {} steps", s.stage.number(), s.steps);
        if let Some(e) = last {
            print!(", final loss {:.4}", e.total);
        }
        if let (Some(b), Some(a)) = (s.latent_distance_before, s.latent_distance_after()) {
            print!(", latent distance {b:.3} -> {a:.3}");
        }
        println!(" -> {}", checkpoint_path(out, s.stage).display());
    }
}

/// Index of a reconstruction directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconIndex {
    pub version: u32,
    pub checkpoint: Option<String>,
    pub ids: Vec<String>,
}

pub const RECON_INDEX: &str = "recons.json";

/// Writes `recons.json`, `recons/<id>.dvgt` and `pgm/<id>.pgm`.
pub fn write_recons(dir: &Path, images: &[StimulusImage], checkpoint: Option<&Path>) -> anyhow::Result<()> {
    fs::create_dir_all(dir.join("recons"))?;
    fs::create_dir_all(dir.join("pgm"))?;
    for img in images {
        let t = Tensor::new(img.shape.to_vec(), img.pixels.clone())?;
        dvgt::write_tensor(&dir.join("recons").join(format!("{}.dvgt", img.id)), &t)?;
        pgm::write_pgm(&dir.join("pgm").join(format!("{}.pgm", img.id)), img)?;
    }
    let index = ReconIndex {
        version: 1,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        ids: images.iter().map(|i| i.id.clone()).collect(),
    };
    fs::write(dir.join(RECON_INDEX), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(())
}

pub fn read_recons(dir: &Path) -> anyhow::Result<Vec<StimulusImage>> {
    let index: ReconIndex = serde_json::from_slice(&fs::read(dir.join(RECON_INDEX)).with_context(|| format!("reading {}", dir.join(RECON_INDEX).display()))?)?;
    index
        .ids
        .iter()
        .map(|id| {
            let t: Tensor = dvgt::read_tensor(&dir.join("recons").join(format!("{id}.dvgt")))?;
            let [c, h, w] = <[usize; 3]>::try_from(t.shape()).map_err(|_| Error::Validation(format!("reconstruction {id} is not C×H×W")))?;
            Ok(StimulusImage::new(id.clone(), [c, h, w], t.into_data())?)
        })
        .collect()
}

fn cmd_reconstruct(checkpoint: &Path, data: &Path, out: &Path, split: Split) -> anyhow::Result<()> {
    let workers = threads()?;
    let model = InferenceModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = load_data(data)?;
    let idx = data.split(split).to_vec();
    let images = reconstruct_all(&model, &data, &idx, workers)?;
    write_recons(out, &images, Some(checkpoint))?;
    let footprint = model.footprint();
    fs::write(out.join("footprint.json"), serde_json::to_string_pretty(&footprint)? + "\n")?;
    for f in &footprint {
        println!("loaded {}: {} tensors, {} parameters, {} bytes", f.net, f.tensors, f.parameters, f.bytes);
    }
    println!("{} reconstructions -> {}", images.len(), out.display());
    Ok(())
}

/// Test stimuli, their families and the reconstructions, aligned by id.
fn aligned(data: &PairedDataset, recons: &Path) -> anyhow::Result<(Vec<StimulusImage>, Vec<String>, Vec<StimulusImage>)> {
    let recon = read_recons(recons)?;
    let stimuli: Vec<StimulusImage> = data.test.iter().map(|&i| data.records[i].image.clone()).collect();
    let families = data.test.iter().map(|&i| data.records[i].family.clone()).collect();
    let ids: Vec<&str> = stimuli.iter().map(|s| s.id.as_str()).collect();
    let rids: Vec<&str> = recon.iter().map(|s| s.id.as_str()).collect();
    if ids != rids {
        bail!(Error::Validation(format!(
            "reconstructions in {} do not match the test split ({} vs {} images)",
            recons.display(),
            rids.len(),
            ids.len()
        )));
    }
    Ok((stimuli, families, recon))
}

fn cmd_evaluate(cfg: &RunConfig, data: &Path, recons: &Path, out: &Path) -> anyhow::Result<()> {
    let data = load_data(data)?;
    let (stimuli, families, recon) = aligned(&data, recons)?;
    let fam: Vec<&str> = families.iter().map(|s| s.as_str()).collect();
    let names: Vec<&str> = cfg.eval.metrics.iter().map(|s| s.as_str()).collect();
    let report = evaluate(&recon, &stimuli, &fam, &names, cfg.seed())?;
    write_outputs(out, &report, &stimuli, &recon)?;
    for (name, a) in &report.aggregates {
        println!("{name} {:.4} ± {:.4} (n = {})", a.mean, a.std, a.n);
    }
    println!("pixcom {:.4} over {} trials -> {}", report.pixcom, report.n_trials, out.display());
    Ok(())
}

fn rating_session(cfg: &RunConfig, data: &Path, recons: &Path) -> anyhow::Result<RatingSession> {
    let data = load_data(data)?;
    let (stimuli, families, recon) = aligned(&data, recons)?;
    let fam: Vec<&str> = families.iter().map(|s| s.as_str()).collect();
    Ok(build_session(&recon, &stimuli, &fam, cfg.seed())?)
}
