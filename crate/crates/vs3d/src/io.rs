//! On-disk formats: network checkpoints, latent-grid dumps, calibrated-φ
//! caches, PGM renders, and CSV tables. All binary payloads are
//! little-endian f64/u32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Result, VsError};
use crate::flow::{Condition, ConditionRole};
use crate::rasi::{PhiCache, PhiEntry};
use crate::tar::AgreementField;
use crate::toyworld::{LatentGrid, Mlp};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VS3DTOY1";
pub const GRID_MAGIC: &[u8; 8] = b"VS3DGRID";
pub const PHI_MAGIC: &[u8; 8] = b"VS3DPHI1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(VsError::Checkpoint("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expect: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != expect {
            return Err(VsError::Checkpoint(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expect),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(VsError::Checkpoint(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize an MLP checkpoint: magic, layer count, per-layer
/// (rows, cols, weights row-major, biases), condition width.
pub fn encode_checkpoint(mlp: &Mlp, cond_width: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(mlp.layers().len() as u32).to_le_bytes());
    for (w, b) in mlp.layers() {
        out.extend_from_slice(&(w.shape()[0] as u32).to_le_bytes());
        out.extend_from_slice(&(w.shape()[1] as u32).to_le_bytes());
        push_f64s(&mut out, w.data());
        push_f64s(&mut out, b.data());
    }
    out.extend_from_slice(&(cond_width as u32).to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Mlp, usize)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let layer_count = r.u32()? as usize;
    if layer_count == 0 || layer_count > 64 {
        return Err(VsError::Checkpoint(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 || rows * cols > 64 << 20 {
            return Err(VsError::Checkpoint(format!("implausible layer {rows}×{cols}")));
        }
        let w = Tensor::new(vec![rows, cols], r.f64s(rows * cols)?)
            .map_err(|e| VsError::Checkpoint(format!("weights: {e}")))?;
        let b = Tensor::new(vec![cols], r.f64s(cols)?)
            .map_err(|e| VsError::Checkpoint(format!("biases: {e}")))?;
        layers.push((w, b));
    }
    let cond_width = r.u32()? as usize;
    r.done()?;
    Ok((Mlp::from_layers(layers)?, cond_width))
}

pub fn save_checkpoint(path: &Path, mlp: &Mlp, cond_width: usize) -> Result<()> {
    fs::write(path, encode_checkpoint(mlp, cond_width))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Mlp, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| VsError::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Latent dump: magic, ndim, dims, f64 payload.
pub fn encode_grid(values: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(values.shape().len() as u32).to_le_bytes());
    for &d in values.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f64s(&mut out, values.data());
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    r.magic(GRID_MAGIC)?;
    let ndim = r.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(VsError::Checkpoint(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let t = Tensor::new(shape, r.f64s(n)?).map_err(|e| VsError::Checkpoint(e.to_string()))?;
    r.done()?;
    Ok(t)
}

pub fn save_grid(path: &Path, values: &Tensor) -> Result<()> {
    fs::write(path, encode_grid(values))?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_grid(&bytes)
}

/// Calibrated-φ cache: magic, entry count, condition width, then per entry
/// (step, initial loss, final loss, φ values).
pub fn encode_phi_cache(cache: &PhiCache, cond_width: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PHI_MAGIC);
    out.extend_from_slice(&(cache.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cond_width as u32).to_le_bytes());
    for e in cache.entries() {
        if e.phi.width() != cond_width {
            return Err(VsError::InvalidArgument("inconsistent φ width in cache".into()));
        }
        out.extend_from_slice(&(e.step as u32).to_le_bytes());
        push_f64s(&mut out, &[e.loss_initial, e.loss_final]);
        push_f64s(&mut out, e.phi.values());
    }
    Ok(out)
}

pub fn decode_phi_cache(bytes: &[u8], schedule_times: &dyn Fn(usize) -> f64) -> Result<PhiCache> {
    let mut r = Reader::new(bytes);
    r.magic(PHI_MAGIC)?;
    let count = r.u32()? as usize;
    let width = r.u32()? as usize;
    let mut cache = PhiCache::new();
    for _ in 0..count {
        let step = r.u32()? as usize;
        let losses = r.f64s(2)?;
        let phi = Condition::new(r.f64s(width)?, ConditionRole::OptimizedNull)?;
        cache.insert(PhiEntry {
            step,
            t: schedule_times(step),
            loss_initial: losses[0],
            loss_final: losses[1],
            inner_steps_used: 0,
            phi,
        });
    }
    r.done()?;
    Ok(cache)
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(VsError::InvalidArgument(format!(
            "pgm: {}x{} needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Occupancy render: sign(z) mapped to black/white.
pub fn grid_sign_pixels(grid: &LatentGrid) -> Vec<u8> {
    grid.values
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 255 } else { 0 })
        .collect()
}

pub fn save_grid_pgm(path: &Path, grid: &LatentGrid) -> Result<()> {
    write_pgm(path, grid.resolution, grid.resolution, &grid_sign_pixels(grid))
}

/// Agreement dump: CSV of (coord_x, coord_y, d, p_flow).
pub fn agreement_csv(field: &AgreementField) -> String {
    let mut out = String::from("coord_x,coord_y,d,p_flow\n");
    for (i, c) in field.coords.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", c[1], c[0], field.d[i], field.p_flow[i]));
    }
    out
}

/// Agreement heat render on its grid: background black, tokens shaded
/// 55..255 by preserve confidence.
pub fn agreement_pixels(field: &AgreementField, resolution: usize) -> Vec<u8> {
    let mut px = vec![0u8; resolution * resolution];
    for (i, c) in field.coords.iter().enumerate() {
        let (row, col) = (c[0] as usize, c[1] as usize);
        if row < resolution && col < resolution {
            px[row * resolution + col] = 55 + (field.p_flow[i] * 200.0).round() as u8;
        }
    }
    px
}

/// Loss curve CSV: one `step,loss` row per entry.
pub fn loss_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(&[5, 7, 3], &mut rng).unwrap();
        let bytes = encode_checkpoint(&mlp, 8);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let (back, width) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(width, 8);
        for ((w1, b1), (w2, b2)) in mlp.layers().iter().zip(back.layers()) {
            assert_eq!(w1, w2);
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(&[3, 2], &mut rng).unwrap();
        let mut bytes = encode_checkpoint(&mlp, 8);
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
        let bytes = encode_checkpoint(&mlp, 8);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn grid_roundtrip() {
        let t = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64 - 4.0).collect()).unwrap();
        let bytes = encode_grid(&t);
        assert_eq!(decode_grid(&bytes).unwrap(), t);
    }

    #[test]
    fn phi_cache_roundtrip() {
        let mut cache = PhiCache::new();
        for k in [3usize, 7] {
            cache.insert(PhiEntry {
                step: k,
                t: 1.0 - k as f64 / 25.0,
                loss_initial: 0.5,
                loss_final: 0.25,
                inner_steps_used: 3,
                phi: Condition::new(vec![k as f64; 8], ConditionRole::OptimizedNull).unwrap(),
            });
        }
        let bytes = encode_phi_cache(&cache, 8).unwrap();
        let back = decode_phi_cache(&bytes, &|k| 1.0 - k as f64 / 25.0).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get(3).unwrap().values(), &[3.0; 8]);
        assert_eq!(back.entry(7).unwrap().loss_final, 0.25);
    }

    #[test]
    fn pgm_header() {
        let dir = std::env::temp_dir().join("vs3d_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        write_pgm(&path, 2, 2, &[0, 255, 128, 64]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 64]);
    }
}
