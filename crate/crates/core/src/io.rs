//! Bit-exact readers and writers: P5/P6 portable anymaps, Pf float maps
//! and the model checkpoint format. Everything multi-byte is little-endian.
//!
//! Checkpoint layout (version 1):
//!
//! ```text
//! magic      4 bytes  "ADCK"
//! version    u32
//! config     levels u32, base_channels u32, in_channels u32,
//!            out_channels u32, seed u64
//! n_tensors  u32
//! tensor     name_len u32, name bytes (UTF-8), rank u32, dims u32 × rank,
//!            data f32 × prod(dims)
//! opt_flag   u8 (0 = no optimizer state)
//! [if 1]     t u64, then per model parameter in order: m tensor record,
//!            v tensor record (same wire format as above, names "m.<p>" and
//!            "v.<p>")
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCK";
const CHECKPOINT_VERSION: u32 = 1;

// ── Portable anymap (P5 grayscale / P6 RGB, maxval 255) ────────────────

/// Read a binary P5 or P6 image; sample k maps to k/255.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let magic = pnm_token(path, &bytes, &mut cursor)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(path, format!("unsupported magic {other:?}"))),
    };
    let w: usize = parse_dim(path, &pnm_token(path, &bytes, &mut cursor)?)?;
    let h: usize = parse_dim(path, &pnm_token(path, &bytes, &mut cursor)?)?;
    let maxval: usize = parse_dim(path, &pnm_token(path, &bytes, &mut cursor)?)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload = &bytes[cursor..];
    let expected = w * h * channels;
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    // Interleaved rows to channel planes.
    let mut img = Image::zeros(h, w, channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let v = payload[(y * w + x) * channels + c] as f32 / 255.0;
                img.set(c, y, x, v);
            }
        }
    }
    Ok(img)
}

/// Write as P5 (1 channel) or P6 (3 channels); values round to v*255.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.h * img.w * img.channels + 32);
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    out.extend_from_slice(format!("{magic}\n{} {}\n255\n", img.w, img.h).as_bytes());
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..img.channels {
                let v = (img.at(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
                out.push(v);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Class masks persist as P5 with pixel value = class × 50.
pub fn write_class_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(mask.h * mask.w + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", mask.w, mask.h).as_bytes());
    for &v in mask.data() {
        out.push((v.clamp(0.0, 4.0) * 50.0).round() as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn pnm_token(path: &Path, bytes: &[u8], cursor: &mut usize) -> Result<String> {
    // Skip whitespace and '#' comments.
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
            continue;
        }
        break;
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    if start == *cursor {
        return Err(Error::format(path, "unexpected end of header"));
    }
    let token = std::str::from_utf8(&bytes[start..*cursor])
        .map_err(|_| Error::format(path, "non-ASCII header"))?
        .to_string();
    // Consume the single whitespace terminating the token.
    if *cursor < bytes.len() {
        *cursor += 1;
    }
    Ok(token)
}

fn parse_dim(path: &Path, token: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| Error::format(path, format!("invalid header field {token:?}")))
}

// ── Portable float map ("Pf", grayscale, little-endian, bottom-up) ─────

/// Write a continuous mask as a Pf float map (scale -1.0, rows bottom-up).
pub fn write_float_map(mask: &Mask, path: &Path) -> Result<()> {
    if mask.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "float map written to {}",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(mask.h * mask.w * 4 + 32);
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", mask.w, mask.h).as_bytes());
    for y in (0..mask.h).rev() {
        for x in 0..mask.w {
            out.extend_from_slice(&mask.at(y, x).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_float_map(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let magic = pnm_token(path, &bytes, &mut cursor)?;
    if magic != "Pf" {
        return Err(Error::format(
            path,
            format!("expected grayscale float map \"Pf\", got {magic:?}"),
        ));
    }
    let w = parse_dim(path, &pnm_token(path, &bytes, &mut cursor)?)?;
    let h = parse_dim(path, &pnm_token(path, &bytes, &mut cursor)?)?;
    let scale: f32 = pnm_token(path, &bytes, &mut cursor)?
        .parse()
        .map_err(|_| Error::format(path, "invalid scale field"))?;
    if scale >= 0.0 {
        return Err(Error::format(
            path,
            "big-endian float maps (scale >= 0) are not supported; write with scale -1.0",
        ));
    }
    let payload = &bytes[cursor..];
    if payload.len() < w * h * 4 {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {} bytes", w * h * 4),
        ));
    }
    let mut mask = Mask::filled(h, w, 0.0);
    for (row, chunk) in payload.chunks_exact(4 * w).take(h).enumerate() {
        let y = h - 1 - row; // bottom-up storage
        for (x, quad) in chunk.chunks_exact(4).enumerate() {
            mask.set(y, x, f32::from_le_bytes([quad[0], quad[1], quad[2], quad[3]]));
        }
    }
    Ok(mask)
}

// ── Checkpoints ─────────────────────────────────────────────────────────

pub fn save_checkpoint(model: &Model, opt: Option<&AdamState>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let cfg = model.config();
    for v in [
        cfg.levels as u32,
        cfg.base_channels as u32,
        cfg.in_channels as u32,
        cfg.out_channels as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&cfg.seed.to_le_bytes()).map_err(io)?;

    w.write_all(&(model.params().len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in model.params() {
        write_tensor_record(&mut w, name, t).map_err(io)?;
    }

    match opt {
        None => w.write_all(&[0u8]).map_err(io)?,
        Some(state) => {
            w.write_all(&[1u8]).map_err(io)?;
            w.write_all(&state.t.to_le_bytes()).map_err(io)?;
            for (i, (name, p)) in model.params().iter().enumerate() {
                let m = Tensor::new(p.shape().to_vec(), state.m[i].clone())?;
                let v = Tensor::new(p.shape().to_vec(), state.v[i].clone())?;
                write_tensor_record(&mut w, &format!("m.{name}"), &m).map_err(io)?;
                write_tensor_record(&mut w, &format!("v.{name}"), &v).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

fn write_tensor_record<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<AdamState>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(path, &mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let version = read_u32(path, &mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let levels = read_u32(path, &mut r, "config.levels")? as usize;
    let base_channels = read_u32(path, &mut r, "config.base_channels")? as usize;
    let in_channels = read_u32(path, &mut r, "config.in_channels")? as usize;
    let out_channels = read_u32(path, &mut r, "config.out_channels")? as usize;
    let mut seed_bytes = [0u8; 8];
    read_exact(path, &mut r, &mut seed_bytes, "config.seed")?;
    let cfg = ModelConfig {
        levels,
        base_channels,
        in_channels,
        out_channels,
        seed: u64::from_le_bytes(seed_bytes),
    };

    let n = read_u32(path, &mut r, "tensor count")? as usize;
    let expected = cfg.param_specs();
    if n != expected.len() {
        return Err(Error::format(
            path,
            format!(
                "{} tensors inconsistent with config (expected {})",
                n,
                expected.len()
            ),
        ));
    }
    let mut params = Vec::with_capacity(n);
    for (name, shape) in &expected {
        let (rec_name, t) = read_tensor_record(path, &mut r, name)?;
        if &rec_name != name || t.shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {rec_name} {:?} inconsistent with config (expected {name} {:?})",
                    t.shape(),
                    shape
                ),
            ));
        }
        params.push((rec_name, t));
    }
    let model = Model::from_parts(cfg, params)?;

    let mut flag = [0u8; 1];
    read_exact(path, &mut r, &mut flag, "optimizer flag")?;
    let opt = match flag[0] {
        0 => None,
        1 => {
            let mut t_bytes = [0u8; 8];
            read_exact(path, &mut r, &mut t_bytes, "optimizer step")?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, shape) in model.config().param_specs() {
                for (prefix, store) in [("m", &mut m), ("v", &mut v)] {
                    let label = format!("{prefix}.{name}");
                    let (rec_name, t) = read_tensor_record(path, &mut r, &label)?;
                    if rec_name != label || t.shape() != shape.as_slice() {
                        return Err(Error::format(
                            path,
                            format!("optimizer record {rec_name} inconsistent with {label}"),
                        ));
                    }
                    store.push(t.data().to_vec());
                }
            }
            Some(AdamState {
                m,
                v,
                t: u64::from_le_bytes(t_bytes),
            })
        }
        other => {
            return Err(Error::format(path, format!("invalid optimizer flag {other}")));
        }
    };
    Ok((model, opt))
}

fn read_tensor_record(
    path: &Path,
    r: &mut impl Read,
    context: &str,
) -> Result<(String, Tensor<f32>)> {
    let name_len = read_u32(path, r, context)? as usize;
    if name_len > 4096 {
        return Err(Error::format(
            path,
            format!("implausible name length {name_len} in record {context}"),
        ));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(path, r, &mut name_bytes, context)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::format(path, format!("non-UTF-8 name in record {context}")))?;
    let rank = read_u32(path, r, &name)? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::format(path, format!("record {name}: invalid rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(path, r, &name)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0f32; numel];
    let mut buf = vec![0u8; numel * 4];
    read_exact(path, r, &mut buf, &name)?;
    for (slot, quad) in data.iter_mut().zip(buf.chunks_exact(4)) {
        *slot = f32::from_le_bytes([quad[0], quad[1], quad[2], quad[3]]);
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn read_u32(path: &Path, r: &mut impl Read, context: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(path, r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact(path: &Path, r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {context}")))
}
