//! Binary checkpoint format for the learned optimizer's weights, plus the
//! sidecar state file that makes meta-training resumable bit-exactly.
//!
//! Layout (all integers little-endian):
//!   magic "LOPT" | version u32 | 9 flag bytes | S, K_P, K_T, K_G as u32 |
//!   array count u32 | arrays (name len u32, name bytes, rank u32,
//!   dims u64.., data f64..) | crc64 of all preceding bytes
//!
//! The array names are exactly the stable names enumerated by
//! `MetaParams::arrays`, in order. Save / load / save round-trips
//! byte-identically; any single-bit corruption fails the checksum.

use anyhow::{bail, Context, Result};
use lopt_core::meta::MetaOptState;
use lopt_core::ndarray::NdArray;
use lopt_core::optimizer::{FeatureFlags, MetaParams, Sizes};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LOPT";
pub const VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 4] = b"LOPS";

// CRC-64/XZ (reflected ECMA-182 polynomial).
const CRC64_POLY: u64 = 0xC96C_5795_D787_0F42;

fn crc64_table() -> [u64; 256] {
    let mut table = [0u64; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u64;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ CRC64_POLY
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

pub fn crc64(bytes: &[u8]) -> u64 {
    let table = crc64_table();
    let mut crc = !0u64;
    for &b in bytes {
        crc = table[((crc ^ b as u64) & 0xff) as usize] ^ (crc >> 8);
    }
    !crc
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_array(buf: &mut Vec<u8>, name: &str, arr: &NdArray) {
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, arr.shape().len() as u32);
    for &d in arr.shape() {
        push_u64(buf, d as u64);
    }
    for &v in arr.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(
                "truncated file: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<(String, NdArray)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .context("array name is not utf-8")?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        let arr = NdArray::from_vec(shape, data).map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok((name, arr))
    }
}

pub fn encode(meta: &MetaParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    let f = &meta.flags;
    for b in [
        f.attention,
        f.multi_timescale,
        f.dynamic_input_scaling,
        f.relative_lr,
        f.shortcut,
        f.trainable_init,
        f.appendix_param_noise,
        f.appendix_prev_timescale,
        f.appendix_unnormalized_step,
    ] {
        buf.push(b as u8);
    }
    push_u32(&mut buf, f.timescales as u32);
    push_u32(&mut buf, meta.sizes.k_param as u32);
    push_u32(&mut buf, meta.sizes.k_tensor as u32);
    push_u32(&mut buf, meta.sizes.k_global as u32);
    let arrays = meta.arrays();
    push_u32(&mut buf, arrays.len() as u32);
    for (name, arr) in arrays {
        push_array(&mut buf, &name, arr);
    }
    let crc = crc64(&buf);
    push_u64(&mut buf, crc);
    buf
}

pub fn decode(bytes: &[u8]) -> Result<MetaParams> {
    if bytes.len() < 12 {
        bail!("file too short for a checkpoint header");
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = crc64(body);
    if stored != computed {
        bail!("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}");
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        bail!("bad magic {:?}, expected {:?}", magic, MAGIC);
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let mut flag_bytes = [0u8; 9];
    flag_bytes.copy_from_slice(r.take(9)?);
    let flags = FeatureFlags {
        attention: flag_bytes[0] != 0,
        multi_timescale: flag_bytes[1] != 0,
        dynamic_input_scaling: flag_bytes[2] != 0,
        relative_lr: flag_bytes[3] != 0,
        shortcut: flag_bytes[4] != 0,
        trainable_init: flag_bytes[5] != 0,
        appendix_param_noise: flag_bytes[6] != 0,
        appendix_prev_timescale: flag_bytes[7] != 0,
        appendix_unnormalized_step: flag_bytes[8] != 0,
        timescales: r.u32()? as usize,
    };
    let sizes = Sizes {
        k_param: r.u32()? as usize,
        k_tensor: r.u32()? as usize,
        k_global: r.u32()? as usize,
    };
    let count = r.u32()? as usize;
    let mut meta = MetaParams::init(flags, sizes, 0);
    let expected: Vec<String> = meta.arrays().into_iter().map(|(n, _)| n).collect();
    if count != expected.len() {
        bail!("checkpoint has {count} arrays, expected {}", expected.len());
    }
    let mut parsed = Vec::with_capacity(count);
    for expected_name in &expected {
        let (name, arr) = r.array()?;
        if &name != expected_name {
            bail!("unexpected array '{name}', expected '{expected_name}'");
        }
        parsed.push(arr);
    }
    if r.pos != body.len() {
        bail!("{} trailing bytes after the last array", body.len() - r.pos);
    }
    for ((name, slot), arr) in meta.arrays_mut().into_iter().zip(parsed) {
        if slot.shape() != arr.shape() {
            bail!(
                "array '{name}' has shape {:?}, expected {:?}",
                arr.shape(),
                slot.shape()
            );
        }
        *slot = arr;
    }
    Ok(meta)
}

/// Atomically write bytes: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    {
        let mut f = std::fs::File::create(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn temp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Fail fast when the target is not writable (before any compute).
pub fn check_writable(path: &Path) -> Result<()> {
    let tmp = temp_path(path);
    std::fs::File::create(&tmp)
        .with_context(|| format!("output path {} is not writable", path.display()))?;
    std::fs::remove_file(&tmp).ok();
    Ok(())
}

pub fn save(path: &Path, meta: &MetaParams) -> Result<()> {
    write_atomic(path, &encode(meta))
}

pub fn load(path: &Path) -> Result<MetaParams> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("parsing checkpoint {}", path.display()))
}

/// Meta-optimizer sidecar: everything beyond the weights that a resumed
/// sync run needs to reproduce the uninterrupted run bit-exactly.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub iteration: u64,
    pub moving_avg: Option<f64>,
    pub opt: MetaOptState,
}

pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".state");
    checkpoint.with_file_name(name)
}

pub fn save_state(path: &Path, meta: &MetaParams, state: &ResumeState) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    push_u32(&mut buf, VERSION);
    push_u64(&mut buf, state.iteration);
    buf.push(state.moving_avg.is_some() as u8);
    buf.extend_from_slice(&state.moving_avg.unwrap_or(0.0).to_le_bytes());
    buf.extend_from_slice(&state.opt.learning_rate.to_le_bytes());
    buf.extend_from_slice(&state.opt.decay.to_le_bytes());
    let names: Vec<String> = meta.arrays().into_iter().map(|(n, _)| n).collect();
    push_u32(&mut buf, state.opt.mean_square.len() as u32);
    for (name, arr) in names.iter().zip(&state.opt.mean_square) {
        push_array(&mut buf, name, arr);
    }
    let crc = crc64(&buf);
    push_u64(&mut buf, crc);
    write_atomic(path, &buf)
}

pub fn load_state(path: &Path, meta: &MetaParams) -> Result<ResumeState> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading resume state {}", path.display()))?;
    if bytes.len() < 12 {
        bail!("state file too short");
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if stored != crc64(body) {
        bail!("state checksum mismatch");
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != STATE_MAGIC {
        bail!("bad state magic");
    }
    if r.u32()? != VERSION {
        bail!("unsupported state version");
    }
    let iteration = r.u64()?;
    let has_avg = r.take(1)?[0] != 0;
    let avg = r.f64()?;
    let learning_rate = r.f64()?;
    let decay = r.f64()?;
    let count = r.u32()? as usize;
    let names: Vec<String> = meta.arrays().into_iter().map(|(n, _)| n).collect();
    if count != names.len() {
        bail!("state has {count} accumulators, expected {}", names.len());
    }
    let mut mean_square = Vec::with_capacity(count);
    for expected in &names {
        let (name, arr) = r.array()?;
        if &name != expected {
            bail!("unexpected accumulator '{name}', expected '{expected}'");
        }
        mean_square.push(arr);
    }
    Ok(ResumeState {
        iteration,
        moving_avg: has_avg.then_some(avg),
        opt: MetaOptState {
            mean_square,
            learning_rate,
            decay,
        },
    })
}
