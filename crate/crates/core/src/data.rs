//! Desk-scale data: procedural clear scenes, smooth transmission fields,
//! haze synthesis from the atmospheric scattering model, and PPM file IO.
//!
//! Everything is pure per `(seed, index)`; regenerating a dataset from the
//! same spec is bit-identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// splitmix64-style mixing so every (stream, index) pair gets an
/// independent, reproducible RNG seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_SCENE: u64 = 1;
const STREAM_TRANSMISSION: u64 = 2;
const STREAM_AIRLIGHT: u64 = 3;

/// One synthesized sample: clear scene J, transmission t, airlight A, and
/// the hazy composite I = J*t + A*(1-t).
#[derive(Debug, Clone)]
pub struct HazePair<S> {
    /// `[3,H,W]` in [0,1]
    pub clear: Tensor<S>,
    /// `[1,H,W]` in [t_min, t_max]
    pub transmission: Tensor<S>,
    pub airlight: f64,
    /// `[3,H,W]`
    pub hazy: Tensor<S>,
}

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { count: 100, size: 32, seed: 0, t_min: 0.2, t_max: 0.9 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.t_min) || !(0.0..=1.0).contains(&self.t_max) || self.t_min > self.t_max {
            return Err(Error::invalid(format!(
                "transmission range [{}, {}] must satisfy 0 <= t_min <= t_max <= 1",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Atmospheric scattering composite: `I = J*t + A*(1-t)` elementwise, the
/// `[1,H,W]` transmission broadcast over the three color channels.
pub fn synth_haze<S: Scalar>(clear: &Tensor<S>, t: &Tensor<S>, airlight: f64) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::invalid(format!("airlight {airlight} outside [0, 1]")));
    }
    let (c, h, w) = match clear.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("synth_haze", format!("clear image shape {:?}, expected [3,H,W]", clear.shape()))),
    };
    if t.shape() != [1, h, w] {
        return Err(Error::shape(
            "synth_haze",
            format!("transmission shape {:?}, expected [1,{h},{w}]", t.shape()),
        ));
    }
    for (name, tensor) in [("clear", clear), ("transmission", t)] {
        if tensor.data().iter().any(|v| v.to_f64() < 0.0 || v.to_f64() > 1.0) {
            return Err(Error::invalid(format!("{name} values outside [0, 1]")));
        }
    }
    let a = S::from_f64(airlight);
    let mut hazy = Tensor::zeros([c, h, w]);
    let hd = hazy.data_mut();
    let jd = clear.data();
    let td = t.data();
    for ci in 0..c {
        for s in 0..h * w {
            let tv = td[s];
            hd[ci * h * w + s] = jd[ci * h * w + s] * tv + a * (S::ONE - tv);
        }
    }
    Ok(hazy)
}

/// Procedural clear scene: a color gradient base with a checkerboard overlay
/// and a few soft blobs, clamped into [0.02, 0.98] so haze always changes
/// the image. Deterministic per (seed, index).
pub fn gen_scene<S: Scalar>(spec: &DatasetSpec, index: usize) -> Result<Tensor<S>> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_SCENE, index as u64));
    let mut img = vec![0.0f64; 3 * n * n];

    for ci in 0..3 {
        let base = rng.gen_range(0.25..0.75);
        let gx = rng.gen_range(0.1..0.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let gy = rng.gen_range(0.1..0.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let plane = &mut img[ci * n * n..(ci + 1) * n * n];
        for y in 0..n {
            for x in 0..n {
                let u = x as f64 / n.max(2) as f64;
                let v = y as f64 / n.max(2) as f64;
                plane[y * n + x] = base + gx * (u - 0.5) + gy * (v - 0.5);
            }
        }
    }

    // checkerboard overlay shared across channels
    let cell = *[4usize, 8].get(rng.gen_range(0..2)).unwrap();
    let amplitude = rng.gen_range(0.05..0.2);
    let phase = rng.gen_range(0..2usize);
    for ci in 0..3 {
        let plane = &mut img[ci * n * n..(ci + 1) * n * n];
        for y in 0..n {
            for x in 0..n {
                if (x / cell + y / cell + phase) % 2 == 0 {
                    plane[y * n + x] += amplitude;
                } else {
                    plane[y * n + x] -= amplitude;
                }
            }
        }
    }

    // soft blobs, each tinting one channel more than the others
    let blob_count = rng.gen_range(2..5);
    for _ in 0..blob_count {
        let cx = rng.gen_range(0.0..n as f64);
        let cy = rng.gen_range(0.0..n as f64);
        let radius = rng.gen_range(n as f64 / 8.0..n as f64 / 3.0);
        let strength = rng.gen_range(-0.35..0.35);
        let channel = rng.gen_range(0..3usize);
        for ci in 0..3 {
            let gain = if ci == channel { strength } else { strength * 0.3 };
            let plane = &mut img[ci * n * n..(ci + 1) * n * n];
            for y in 0..n {
                for x in 0..n {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    plane[y * n + x] += gain * (-d2 / (2.0 * radius * radius)).exp();
                }
            }
        }
    }

    let data = img.iter().map(|&v| S::from_f64(v.clamp(0.02, 0.98))).collect();
    Tensor::new([3, n, n], data)
}

/// Smooth transmission field: a 4x4 random grid, neighbor differences
/// capped so the bilinear interpolation never steps more than 0.2 between
/// adjacent pixels, upsampled to the full resolution.
pub fn gen_transmission<S: Scalar>(spec: &DatasetSpec, index: usize) -> Result<Tensor<S>> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_TRANSMISSION, index as u64));

    const GRID: usize = 4;
    let mut grid = [0.0f64; GRID * GRID];
    for cellv in grid.iter_mut() {
        *cellv = rng.gen_range(spec.t_min..=spec.t_max);
    }
    // Cap adjacent grid differences so per-pixel steps stay within 0.2 even
    // on small images (the full interpolation crosses GRID-1 cells over n-1
    // pixels).
    if n > 1 {
        // 0.995 margin keeps interpolation rounding under the 0.2 bound
        let max_step = 0.2 * 0.995 * (n - 1) as f64 / (GRID - 1) as f64;
        if max_step < spec.t_max - spec.t_min {
            for r in 0..GRID {
                for c in 0..GRID {
                    let mut lo = spec.t_min;
                    let mut hi = spec.t_max;
                    if c > 0 {
                        let left = grid[r * GRID + c - 1];
                        lo = lo.max(left - max_step);
                        hi = hi.min(left + max_step);
                    }
                    if r > 0 {
                        let up = grid[(r - 1) * GRID + c];
                        lo = lo.max(up - max_step);
                        hi = hi.min(up + max_step);
                    }
                    grid[r * GRID + c] = grid[r * GRID + c].clamp(lo, hi);
                }
            }
        }
    }

    let mut out = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = if n == 1 {
                (0.0, 0.0)
            } else {
                (
                    x as f64 / (n - 1) as f64 * (GRID - 1) as f64,
                    y as f64 / (n - 1) as f64 * (GRID - 1) as f64,
                )
            };
            let (x0, y0) = (u.floor().min((GRID - 2) as f64) as usize, v.floor().min((GRID - 2) as f64) as usize);
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            let g = |r: usize, c: usize| grid[r * GRID + c];
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
            let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
            out[y * n + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    let data = out.iter().map(|&v| S::from_f64(v.clamp(spec.t_min, spec.t_max))).collect();
    Tensor::new([1, n, n], data)
}

/// Airlight for one sample, uniform in [0.7, 1.0].
pub fn gen_airlight(spec: &DatasetSpec, index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_AIRLIGHT, index as u64));
    rng.gen_range(0.7..=1.0)
}

/// Build the full pair for one index.
pub fn gen_pair<S: Scalar>(spec: &DatasetSpec, index: usize) -> Result<HazePair<S>> {
    let clear = gen_scene(spec, index)?;
    let transmission = gen_transmission(spec, index)?;
    let airlight = gen_airlight(spec, index);
    let hazy = synth_haze(&clear, &transmission, airlight)?;
    Ok(HazePair { clear, transmission, airlight, hazy })
}

/// Generate the whole dataset described by `spec`.
pub fn gen_dataset<S: Scalar>(spec: &DatasetSpec) -> Result<Vec<HazePair<S>>> {
    (0..spec.count).map(|i| gen_pair(spec, i)).collect()
}

// ---------------------------------------------------------------------------
// PPM P6 IO
// ---------------------------------------------------------------------------

/// Write a `[3,H,W]` image in [0,1] as binary PPM, maxval 255, rounding
/// half away from zero.
pub fn ppm_write<S: Scalar>(img: &Tensor<S>, path: &Path) -> Result<()> {
    let bytes = ppm_encode(img)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn ppm_encode<S: Scalar>(img: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w) = match img.shape()[..] {
        [c, h, w] if c == 3 => (c, h, w),
        _ => return Err(Error::shape("ppm_write", format!("expected [3,H,W], got {:?}", img.shape()))),
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let v = data[ci * h * w + y * w + x].to_f64().clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(bytes)
}

pub fn ppm_read<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    ppm_decode(&bytes)
}

/// Skip whitespace and `#` comments, then parse one unsigned decimal field.
fn ppm_field(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::PpmHeader(format!("expected integer at byte {start}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::PpmHeader("non-utf8 header".to_string()))?
        .parse::<u32>()
        .map_err(|e| Error::PpmHeader(format!("bad integer: {e}")))
}

pub fn ppm_decode<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::PpmHeader("missing P6 magic".to_string()));
    }
    let mut pos = 2;
    let w = ppm_field(bytes, &mut pos)? as usize;
    let h = ppm_field(bytes, &mut pos)? as usize;
    let maxval = ppm_field(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::PpmUnsupportedMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(Error::PpmHeader(format!("degenerate dimensions {w}x{h}")));
    }
    // exactly one whitespace byte separates header from payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::PpmHeader("missing separator before payload".to_string()));
    }
    pos += 1;
    let expected = 3 * w * h;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::PpmTruncated { expected, got: payload.len() });
    }
    let mut data = vec![S::ZERO; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                let byte = payload[(y * w + x) * 3 + ci];
                data[ci * h * w + y * w + x] = S::from_f64(byte as f64 / 255.0);
            }
        }
    }
    Tensor::new([3, h, w], data)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Write the dataset index: one "hazy.ppm clear.ppm" relative-path pair per
/// line.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (hazy, clear) in entries {
        text.push_str(hazy);
        text.push(' ');
        text.push_str(clear);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        match (fields.next(), fields.next(), fields.next()) {
            (Some(hazy), Some(clear), None) => entries.push((hazy.to_string(), clear.to_string())),
            _ => {
                return Err(Error::invalid(format!(
                    "manifest line {}: expected 'hazy.ppm clear.ppm', got '{line}'",
                    lineno + 1
                )))
            }
        }
    }
    Ok(entries)
}

/// A (hazy, clear) image pair as the trainer consumes it.
#[derive(Debug, Clone)]
pub struct ImagePair<S> {
    pub hazy: Tensor<S>,
    pub clear: Tensor<S>,
}

impl<S: Scalar> From<HazePair<S>> for ImagePair<S> {
    fn from(pair: HazePair<S>) -> Self {
        ImagePair { hazy: pair.hazy, clear: pair.clear }
    }
}

/// Load every pair referenced by a manifest, resolving paths relative to the
/// manifest's directory.
pub fn load_pairs<S: Scalar>(manifest_path: &Path) -> Result<Vec<ImagePair<S>>> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest_path)?
        .into_iter()
        .map(|(hazy, clear)| {
            Ok(ImagePair { hazy: ppm_read(&dir.join(hazy))?, clear: ppm_read(&dir.join(clear))? })
        })
        .collect()
}

#[cfg(test)]
mod tests;
