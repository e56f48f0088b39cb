//! Tar checkpoints: `meta.json` plus `params/<name>.dvgt` per parameter tensor.
//!
//! Headers carry zero mtime, uid and gid so identical parameters give
//! identical archive bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dvgt;
use crate::error::{Error, Result};
use crate::model::{Arch, CognitiveSignal, ModelBundle, Net, StimulusImage};
use crate::nn::{Parameters, Sequential};
use crate::tensor::{Tape, Tensor};

pub const META_ENTRY: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: Arch,
    /// Last completed stage; 0 for an untrained bundle.
    pub stage: u8,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: String,
}

fn append(builder: &mut tar::Builder<impl Write>, path: &str, bytes: &[u8]) -> Result<()> {
    let mut h = tar::Header::new_gnu();
    h.set_size(bytes.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut h, path, bytes)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, meta: &CheckpointMeta) -> Result<()> {
    if meta.arch != bundle.arch {
        return Err(Error::Contract("checkpoint metadata describes a different architecture".into()));
    }
    let mut builder = tar::Builder::new(BufWriter::new(File::create(path)?));
    append(&mut builder, META_ENTRY, serde_json::to_string_pretty(meta)?.as_bytes())?;
    let mut entries = Vec::new();
    bundle.visit(&mut |_, name, t| entries.push((format!("params/{name}.dvgt"), dvgt::encode(t))));
    for (name, bytes) in entries {
        append(&mut builder, &name, &bytes?)?;
    }
    builder.into_inner()?.flush()?;
    Ok(())
}

/// Reads `meta.json` and every parameter entry accepted by `want`.
fn read_entries(path: &Path, want: impl Fn(&str) -> bool) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    let mut archive = tar::Archive::new(BufReader::new(File::open(path)?));
    let mut meta = None;
    let mut params = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        if name == META_ENTRY {
            let mut s = String::new();
            entry.read_to_string(&mut s)?;
            meta = Some(serde_json::from_str::<CheckpointMeta>(&s)?);
        } else if let Some(p) = name.strip_prefix("params/").and_then(|p| p.strip_suffix(".dvgt")) {
            if want(p) {
                let mut bytes = Vec::new();
                entry.read_to_end(&mut bytes)?;
                params.push((p.to_string(), dvgt::decode(&bytes)?));
            }
        }
    }
    let meta = meta.ok_or_else(|| Error::Validation(format!("{} has no {META_ENTRY}", path.display())))?;
    Ok((meta, params))
}

fn fill(net: &mut Sequential, entries: &mut Vec<(String, Tensor)>) -> Result<()> {
    let mut values = Vec::new();
    for name in net.param_names().to_vec() {
        let pos = entries
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
        values.push(entries.swap_remove(pos).1);
    }
    net.load_params(values)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let (meta, mut entries) = read_entries(path, |_| true)?;
    let mut bundle = ModelBundle::new(meta.arch.clone(), 0)?;
    for n in Net::ALL {
        fill(bundle.net_mut(n), &mut entries)?;
    }
    if let Some((name, _)) = entries.first() {
        return Err(Error::Validation(format!("checkpoint has unexpected parameter {name}")));
    }
    Ok((bundle, meta))
}

/// Parameter inventory of a loaded network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetFootprint {
    pub net: String,
    pub tensors: usize,
    pub parameters: usize,
    pub bytes: usize,
}

/// The test-time path: cognitive encoder and generator only.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub arch: Arch,
    pub meta: CheckpointMeta,
    e_cog: Sequential,
    gen: Sequential,
}

impl InferenceModel {
    /// Loads only the cognitive encoder and generator entries; the visual
    /// encoder and discriminator are never decoded.
    pub fn load(path: &Path) -> Result<Self> {
        let cog = format!("{}.", Net::Cog.name());
        let gen = format!("{}.", Net::Gen.name());
        let (meta, mut entries) = read_entries(path, |p| p.starts_with(&cog) || p.starts_with(&gen))?;
        let arch = meta.arch.clone();
        arch.validate()?;
        let mut e_cog = Sequential::new(Net::Cog.name(), Net::Cog.group(), vec![arch.d_x], arch.cog_specs(), 0)?;
        let mut g = Sequential::new(Net::Gen.name(), Net::Gen.group(), vec![arch.d_z], arch.gen_specs()?, 0)?;
        fill(&mut e_cog, &mut entries)?;
        fill(&mut g, &mut entries)?;
        Ok(Self { arch, meta, e_cog, gen: g })
    }

    pub fn footprint(&self) -> Vec<NetFootprint> {
        [&self.e_cog, &self.gen]
            .into_iter()
            .map(|n| {
                let parameters = n.params_flat().map(|t| t.numel()).sum::<usize>();
                NetFootprint { net: n.name().into(), tensors: n.params_flat().count(), parameters, bytes: parameters * 4 }
            })
            .collect()
    }

    /// Reconstruction with the latent fixed at `μ`.
    pub fn reconstruct(&self, id: &str, x: &CognitiveSignal) -> Result<StimulusImage> {
        let active = x.active();
        if active.len() != self.arch.d_x {
            return Err(Error::Config(format!(
                "signal has {} active voxels but the checkpoint expects {}",
                active.len(),
                self.arch.d_x
            )));
        }
        let tape = Tape::new();
        let head = self.e_cog.forward(&tape, tape.constant_from(vec![1, active.len()], active)?)?;
        let mu = if self.arch.deterministic { head } else { head.narrow(1, 0, self.arch.d_z)? };
        let img = self.gen.forward(&tape, mu)?;
        let pixels = img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        StimulusImage::new(id, self.arch.image_shape(), pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        Arch {
            d_x: 10,
            d_z: 3,
            image_size: 8,
            conv_channels: [2, 2, 3],
            cog_hidden: 4,
            vis_hidden: 4,
            ..Arch::default()
        }
    }

    fn meta(a: &Arch) -> CheckpointMeta {
        CheckpointMeta { arch: a.clone(), stage: 1, step: 7, seed: 3, scheme: "full".into() }
    }

    #[test]
    fn round_trip_is_exact_and_bytes_are_stable() {
        let b = ModelBundle::<f32>::new(arch(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.tar"), dir.path().join("b.tar"));
        save_checkpoint(&p1, &b, &meta(&b.arch)).unwrap();
        save_checkpoint(&p2, &b, &meta(&b.arch)).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (back, m) = load_checkpoint(&p1).unwrap();
        assert_eq!(m, meta(&b.arch));
        for n in Net::ALL {
            let a: Vec<_> = b.net(n).params_flat().map(|t| t.data().to_vec()).collect();
            let c: Vec<_> = back.net(n).params_flat().map(|t| t.data().to_vec()).collect();
            assert_eq!(a, c);
            assert_eq!(b.net(n).parameter_count(), back.net(n).parameter_count());
        }
    }

    #[test]
    fn inference_loads_only_the_test_path() {
        let b = ModelBundle::<f32>::new(arch(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tar");
        save_checkpoint(&p, &b, &meta(&b.arch)).unwrap();
        let inf = InferenceModel::load(&p).unwrap();
        let nets: Vec<_> = inf.footprint().into_iter().map(|f| f.net).collect();
        assert_eq!(nets, vec!["e_cog", "gen"]);
        let x = CognitiveSignal::new((0..10).map(|i| i as f32 / 10.0).collect()).unwrap();
        let direct = b.encode_cognitive(&x, None, None).unwrap();
        assert_eq!(inf.reconstruct("r", &x).unwrap(), b.generate("r", &direct.mu).unwrap());
        let bad = CognitiveSignal::new(vec![0.0; 4]).unwrap();
        assert!(matches!(inf.reconstruct("r", &bad), Err(Error::Config(_))));
    }
}
