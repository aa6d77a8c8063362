//! File formats: binary latents and 8-bit PGM renders.
//!
//! A latent file is the magic `ADLT`, five little-endian `u32`s (format
//! version, height, width, channels, time label) and then the values as
//! little-endian `f64`, token-major.

use std::io::{Read, Write};

use crate::blending::{Mask, SubjectAttentionMap};
use crate::error::{Error, Result};
use crate::flow::Latent;

const MAGIC: &[u8; 4] = b"ADLT";
const VERSION: u32 = 1;

pub fn write_latent(latent: &Latent, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    for v in [
        VERSION,
        latent.height as u32,
        latent.width as u32,
        latent.dim as u32,
        latent.time_label,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &latent.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn latent_bytes(latent: &Latent) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + latent.data.len() * 8);
    write_latent(latent, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_latent(input: &mut impl Read) -> Result<Latent> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_latent(&bytes)
}

pub fn parse_latent(bytes: &[u8]) -> Result<Latent> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::InvalidInput("not a latent file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::InvalidInput(format!("unsupported latent version {}", word(0))));
    }
    let (h, w, d, label) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    let body = &bytes[24..];
    if body.len() != h * w * d * 8 {
        return Err(Error::InvalidInput(format!(
            "latent body is {} bytes, header says {h}x{w}x{d}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let latent = Latent::from_vec(h, w, d, data)?.with_time_label(label);
    latent.ensure_finite("latent file")?;
    Ok(latent)
}

/// Binary PGM of row-major 8-bit pixels.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Channel norms stretched to the full gray range. A flat latent renders
/// black.
pub fn render_latent(latent: &Latent) -> Vec<u8> {
    let norms = latent.channel_norms();
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = norms
        .iter()
        .map(|n| if span > 0.0 { to_byte((n - lo) / span) } else { 0 })
        .collect();
    pgm(latent.width, latent.height, &pixels)
}

pub fn render_mask(mask: &Mask) -> Vec<u8> {
    let pixels: Vec<u8> = mask.cells.iter().map(|&c| if c { 255 } else { 0 }).collect();
    pgm(mask.width, mask.height, &pixels)
}

pub fn render_map(map: &SubjectAttentionMap) -> Vec<u8> {
    let pixels: Vec<u8> = map.values.iter().map(|&v| to_byte(v)).collect();
    pgm(map.width, map.height, &pixels)
}
