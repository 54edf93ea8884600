//! Binary cube and measurement files, synthetic datasets and band export.
//!
//! Cube files (`HSC1`) hold `H, W, C` as little-endian `u32` followed by
//! `H*W*C` little-endian `f32` values, band-major then row-major.
//! Measurement files (`MSR1`) hold `H, width` and `H*width` `f32` values
//! row-major. Values are stored in single precision, so a cube read back
//! from disk equals the written cube rounded to `f32`.

use crate::error::{Error, Result};
use crate::mask::{mask_from_text, mask_to_text};
use crate::optics::{Cube, Mask, Measurement};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const MEAS_MAGIC: &[u8; 4] = b"MSR1";
pub const CUBE_EXT: &str = "hsc";

fn header_u32(bytes: &[u8], at: usize, field: &str) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::format(field, "file too short for header"))
}

fn payload(bytes: &[u8], start: usize, n: usize) -> Result<Vec<f64>> {
    let want = n.checked_mul(4).and_then(|b| b.checked_add(start));
    if want != Some(bytes.len()) {
        return Err(Error::format(
            "payload",
            format!("expected {} bytes of data, found {}", n.saturating_mul(4), bytes.len().saturating_sub(start)),
        ));
    }
    let vals: Vec<f64> = bytes[start..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::format("payload", format!("value {i} is not finite")));
    }
    Ok(vals)
}

fn push_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_cube(cube: &Cube) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * cube.data.len());
    out.extend_from_slice(CUBE_MAGIC);
    for d in [cube.h, cube.w, cube.c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32s(&mut out, &cube.data);
    out
}

pub fn decode_cube(bytes: &[u8]) -> Result<Cube> {
    if bytes.get(..4) != Some(CUBE_MAGIC) {
        return Err(Error::format("magic", "expected HSC1"));
    }
    let (h, w, c) = (header_u32(bytes, 4, "H")?, header_u32(bytes, 8, "W")?, header_u32(bytes, 12, "C")?);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format("H/W/C", format!("zero extent in {h}x{w}x{c}")));
    }
    let n = h.checked_mul(w).and_then(|v| v.checked_mul(c)).ok_or_else(|| Error::format("H/W/C", "overflow"))?;
    Cube::new(h, w, c, payload(bytes, 16, n)?)
}

pub fn encode_measurement(m: &Measurement) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.data.len());
    out.extend_from_slice(MEAS_MAGIC);
    for d in [m.h, m.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32s(&mut out, &m.data);
    out
}

pub fn decode_measurement(bytes: &[u8]) -> Result<Measurement> {
    if bytes.get(..4) != Some(MEAS_MAGIC) {
        return Err(Error::format("magic", "expected MSR1"));
    }
    let (h, width) = (header_u32(bytes, 4, "H")?, header_u32(bytes, 8, "width")?);
    if h == 0 || width == 0 {
        return Err(Error::format("H/width", format!("zero extent in {h}x{width}")));
    }
    let n = h.checked_mul(width).ok_or_else(|| Error::format("H/width", "overflow"))?;
    Measurement::new(h, width, payload(bytes, 12, n)?)
}

pub fn read_cube(path: &Path) -> Result<Cube> {
    decode_cube(&fs::read(path)?)
}

pub fn write_cube(path: &Path, cube: &Cube) -> Result<()> {
    Ok(fs::write(path, encode_cube(cube))?)
}

pub fn read_measurement(path: &Path) -> Result<Measurement> {
    decode_measurement(&fs::read(path)?)
}

pub fn write_measurement(path: &Path, m: &Measurement) -> Result<()> {
    Ok(fs::write(path, encode_measurement(m))?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    mask_from_text(&fs::read_to_string(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    Ok(fs::write(path, mask_to_text(mask))?)
}

/// Rounds every value to single precision, matching what a file round trip
/// would store.
pub fn quantize_f32(cube: &mut Cube) {
    cube.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Parses `HxWxC`.
pub fn parse_geometry(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format("geometry", format!("expected HxWxC, got {s:?}")))?;
    match parts[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => Err(Error::format("geometry", format!("expected three positive extents HxWxC, got {s:?}"))),
    }
}

/// One synthetic scene in `[0,1]`: a dim smooth background, 3 to 5 Gaussian
/// blobs each with its own smooth spectral envelope, and 1 or 2 rectangles
/// whose value ramps linearly across bands. Overlaps add, then clamp.
pub fn synthetic_cube<R: Rng + ?Sized>(h: usize, w: usize, c: usize, rng: &mut R) -> Cube {
    let mut data = vec![0.0; h * w * c];
    let t = |i: usize| if c > 1 { i as f64 / (c - 1) as f64 } else { 0.5 };
    let (fh, fw) = (h as f64, w as f64);
    // background: gentle gradient with a band tilt
    let (gx, gy, tilt) = (rng.random_range(0.0..0.15), rng.random_range(0.0..0.15), rng.random_range(-0.05..0.05));
    for i in 0..c {
        for m in 0..h {
            for n in 0..w {
                data[(i * h + m) * w + n] = 0.05 + gx * n as f64 / fw + gy * m as f64 / fh + tilt * t(i);
            }
        }
    }
    for _ in 0..rng.random_range(3..=5) {
        let (cy, cx) = (rng.random_range(0.0..fh), rng.random_range(0.0..fw));
        let s = rng.random_range(0.08..0.25) * fh.min(fw);
        let amp = rng.random_range(0.4..0.9);
        let (mu, width) = (rng.random_range(0.0..1.0), rng.random_range(0.25..0.8));
        for i in 0..c {
            let spec = amp * (-((t(i) - mu) / width).powi(2) / 2.0).exp();
            for m in 0..h {
                for n in 0..w {
                    let r2 = (m as f64 - cy).powi(2) + (n as f64 - cx).powi(2);
                    data[(i * h + m) * w + n] += spec * (-r2 / (2.0 * s * s)).exp();
                }
            }
        }
    }
    for _ in 0..rng.random_range(1..=2) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = ((y0 + rng.random_range(h / 8 + 1..=h / 2 + 1)).min(h), (x0 + rng.random_range(w / 8 + 1..=w / 2 + 1)).min(w));
        let (a, b) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        for i in 0..c {
            let v = a + (b - a) * t(i);
            for m in y0..y1 {
                for n in x0..x1 {
                    data[(i * h + m) * w + n] = v;
                }
            }
        }
    }
    let mut cube = Cube { h, w, c, data };
    cube.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    quantize_f32(&mut cube);
    cube
}

/// `count` seeded synthetic cubes; cube `i` depends only on `(seed, i)`.
pub fn synthetic_dataset(count: usize, h: usize, w: usize, c: usize, seed: u64) -> Vec<Cube> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synthetic_cube(h, w, c, &mut rng)
        })
        .collect()
}

pub fn cube_file_name(i: usize) -> String {
    format!("cube_{i:04}.{CUBE_EXT}")
}

/// Writes a synthetic dataset and returns the file paths.
pub fn make_dataset(dir: &Path, count: usize, h: usize, w: usize, c: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    synthetic_dataset(count, h, w, c, seed)
        .iter()
        .enumerate()
        .map(|(i, cube)| {
            let p = dir.join(cube_file_name(i));
            write_cube(&p, cube)?;
            Ok(p)
        })
        .collect()
}

/// Reads every `*.hsc` file of `dir` in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Cube>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == CUBE_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Usage(format!("no .{CUBE_EXT} files in {}", dir.display())));
    }
    paths.iter().map(|p| read_cube(p)).collect()
}

/// 8-bit gray level of a value: clamp to `[0,1]`, scale by 255, round half up.
pub fn to_gray8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_png_gray(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.write_image_data(pixels).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

/// Writes `band_XX.png` per band into `dir`.
pub fn export_bands_png(cube: &Cube, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..cube.c)
        .map(|i| {
            let px: Vec<u8> = cube.band(i).iter().map(|&v| to_gray8(v)).collect();
            let p = dir.join(format!("band_{i:02}.png"));
            fs::write(&p, encode_png_gray(cube.w, cube.h, &px)?)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_file_size_and_roundtrip() {
        let cube = synthetic_dataset(1, 4, 6, 3, 9).pop().unwrap();
        let bytes = encode_cube(&cube);
        assert_eq!(bytes.len(), 4 * 4 * 6 * 3 + 16);
        let back = decode_cube(&bytes).unwrap();
        assert_eq!(back, cube);
        assert_eq!(encode_cube(&back), bytes);
    }

    #[test]
    fn cube_format_errors_name_the_field() {
        let bytes = encode_cube(&Cube::zeros(2, 2, 2));
        let e = decode_cube(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(e.contains("payload"), "{e}");
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode_cube(&bad).unwrap_err().to_string().contains("magic"));
        let mut nan = bytes;
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_cube(&nan).is_err());
        assert!(decode_cube(b"HSC1").is_err());
    }

    #[test]
    fn measurement_roundtrip() {
        let m = Measurement::new(2, 3, vec![0.0, 1.5, -2.0, 3.25, 4.0, 5.0]).unwrap();
        let bytes = encode_measurement(&m);
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(decode_measurement(&bytes).unwrap(), m);
        assert!(decode_measurement(&bytes[..20]).is_err());
    }

    #[test]
    fn geometry_parsing() {
        assert_eq!(parse_geometry("32x32x8").unwrap(), (32, 32, 8));
        assert!(parse_geometry("32x32").is_err());
        assert!(parse_geometry("0x4x4").is_err());
        assert!(parse_geometry("ax4x4").is_err());
    }

    #[test]
    fn synthetic_data_is_seeded_bounded_and_spread() {
        let a = synthetic_dataset(3, 32, 32, 8, 5);
        assert_eq!(a, synthetic_dataset(3, 32, 32, 8, 5));
        assert_ne!(a[0], a[1]);
        for cube in &a {
            assert!(cube.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let mut bins = [0usize; 10];
            for v in &cube.data {
                bins[((v * 10.0) as usize).min(9)] += 1;
            }
            assert!(bins.iter().filter(|&&b| b > 0).count() >= 5, "{bins:?}");
        }
    }

    #[test]
    fn gray_levels_round_half_up() {
        assert_eq!(to_gray8(0.5), 128);
        assert_eq!(to_gray8(0.0), 0);
        assert_eq!(to_gray8(1.0), 255);
        assert_eq!(to_gray8(-3.0), 0);
        assert_eq!(to_gray8(2.0), 255);
        assert_eq!(to_gray8(1.5 / 255.0), 2);
    }
}
