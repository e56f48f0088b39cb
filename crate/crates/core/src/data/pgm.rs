//! Netpbm export: binary PGM (`P5`) for grayscale, PPM (`P6`) for colour.

use std::fs;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::model::StimulusImage;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[C, H, W]` image with `C ∈ {1, 3}`.
pub fn encode(img: &StimulusImage) -> Result<Vec<u8>> {
    let [c, h, w] = img.shape;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return dim_err(format!("netpbm needs 1 or 3 channels, got {c}")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(img.pixels[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &StimulusImage) -> Result<()> {
    fs::write(path, encode(img)?)?;
    Ok(())
}

/// Reads back a file written by [`write_pgm`].
pub fn read_pgm(path: &Path, id: &str) -> Result<StimulusImage> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos as u64, msg: "truncated netpbm header".into() });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format { offset: 0, msg: format!("unsupported netpbm magic {m:?}") }),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format { offset: 0, msg: format!("bad header field {s:?}") });
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != c * h * w {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("expected {} pixel bytes, found {}", c * h * w, body.len()),
        });
    }
    let mut pixels = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            pixels[ch * h * w + p] = body[p * c + ch] as f32 / 255.0;
        }
    }
    StimulusImage::new(id, [c, h, w], pixels)
}

/// Panels placed left to right with a one-pixel white gutter.
pub fn hconcat(id: &str, panels: &[&StimulusImage]) -> Result<StimulusImage> {
    let first = panels.first().ok_or_else(|| Error::Contract("no panels to concatenate".into()))?;
    let [c, h, w] = first.shape;
    if panels.iter().any(|p| p.shape != first.shape) {
        return dim_err("panels must share one shape");
    }
    let k = panels.len();
    let tw = k * w + (k - 1);
    let mut px = vec![1.0; c * h * tw];
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + 1);
        for ch in 0..c {
            for y in 0..h {
                let src = &p.pixels[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                px[ch * h * tw + y * tw + x0..ch * h * tw + y * tw + x0 + w].copy_from_slice(src);
            }
        }
    }
    StimulusImage::new(id, [c, h, tw], px)
}

/// `stimulus | reconstruction | |difference|`.
pub fn triptych(stimulus: &StimulusImage, recon: &StimulusImage) -> Result<StimulusImage> {
    if stimulus.shape != recon.shape {
        return dim_err(format!("stimulus {:?} vs reconstruction {:?}", stimulus.shape, recon.shape));
    }
    let diff = StimulusImage::new(
        "diff",
        stimulus.shape,
        stimulus.pixels.iter().zip(&recon.pixels).map(|(a, b)| (a - b).abs()).collect(),
    )?;
    hconcat(&stimulus.id, &[stimulus, recon, &diff])
}
