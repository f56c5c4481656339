//! On-disk volume formats: NIfTI-1 (plain or gzip) and a headerless
//! raw+sidecar pair for trivially writable fixtures.
//!
//! NIfTI-1 essentials honored here: 348-byte header, sizeof_hdr = 348 with
//! byte order detected from it, magic "n+1\0" (payload in the same file at
//! vox_offset) or "ni1\0" (payload in a sibling .img), dim[1..3] extents
//! with x fastest on disk, pixdim spacing, and scl_slope/scl_inter scaling
//! applied when the slope is nonzero. Values are re-laid out to this
//! crate's depth-fastest order on read and back on write.

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const HDR_LEN: usize = 348;
const MAGIC_SAME: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum DiskType {
    U8,
    I16,
    I32,
    F32,
    F64,
    U16,
}

impl DiskType {
    fn from_code(code: i16) -> Option<DiskType> {
        match code {
            2 => Some(DiskType::U8),
            4 => Some(DiskType::I16),
            8 => Some(DiskType::I32),
            16 => Some(DiskType::F32),
            64 => Some(DiskType::F64),
            512 => Some(DiskType::U16),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            DiskType::U8 => 1,
            DiskType::I16 | DiskType::U16 => 2,
            DiskType::I32 | DiskType::F32 => 4,
            DiskType::F64 => 8,
        }
    }

    fn decode(self, raw: &[u8], swap: bool) -> f64 {
        let get = |n: usize| -> u64 {
            let mut v = 0u64;
            for i in 0..n {
                let b = raw[if swap { n - 1 - i } else { i }];
                v |= (b as u64) << (8 * i);
            }
            v
        };
        match self {
            DiskType::U8 => raw[0] as f64,
            DiskType::I16 => get(2) as u16 as i16 as f64,
            DiskType::U16 => get(2) as u16 as f64,
            DiskType::I32 => get(4) as u32 as i32 as f64,
            DiskType::F32 => f32::from_bits(get(4) as u32) as f64,
            DiskType::F64 => f64::from_bits(get(8)),
        }
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), reason)
}

/// Reads a file, transparently gunzipping when it starts with the gzip
/// magic bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| bad(path, format!("gzip stream is corrupt: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz")) {
        let file = std::fs::File::create(path)?;
        let mut gz = flate2::write::GzEncoder::new(file, flate2::Compression::fast());
        gz.write_all(bytes)?;
        gz.finish()?;
        Ok(())
    } else {
        Ok(std::fs::write(path, bytes)?)
    }
}

struct Header {
    swap: bool,
    extents: [usize; 3],
    spacing: [f64; 3],
    disk: DiskType,
    vox_offset: usize,
    slope: f32,
    inter: f32,
    pair: bool,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HDR_LEN {
        return Err(bad(path, format!("header truncated: {} of {HDR_LEN} bytes", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let swap = match le {
        348 => false,
        _ if le.swap_bytes() == 348 => true,
        _ => return Err(bad(path, format!("not a NIfTI-1 file: sizeof_hdr = {le}"))),
    };
    let magic: &[u8; 4] = bytes[344..348].try_into().unwrap();
    let pair = match magic {
        m if m == MAGIC_SAME => false,
        m if m == MAGIC_PAIR => true,
        m => return Err(bad(path, format!("bad magic {:?}", String::from_utf8_lossy(m)))),
    };
    let i16_at = |off: usize| {
        let v = i16::from_le_bytes(bytes[off..off + 2].try_into().unwrap());
        if swap {
            v.swap_bytes()
        } else {
            v
        }
    };
    let f32_at = |off: usize| {
        let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        f32::from_bits(if swap { v.swap_bytes() } else { v })
    };

    let rank = i16_at(40);
    if !(1..=7).contains(&rank) {
        return Err(bad(path, format!("dim[0] = {rank} is outside 1..=7")));
    }
    let dim = |i: usize| -> i16 {
        if i as i16 <= rank {
            i16_at(40 + 2 * i)
        } else {
            1
        }
    };
    for i in 4..=7 {
        if dim(i) > 1 {
            return Err(bad(path, format!("only 3-D volumes are supported, dim[{i}] = {}", dim(i))));
        }
    }
    let mut extents = [0usize; 3];
    let mut spacing = [1f64; 3];
    for a in 0..3 {
        let d = dim(a + 1);
        if d < 1 {
            return Err(bad(path, format!("dim[{}] = {d} is not positive", a + 1)));
        }
        extents[a] = d as usize;
        let p = f32_at(76 + 4 * (a + 1)) as f64;
        spacing[a] = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }
    let code = i16_at(70);
    let disk = DiskType::from_code(code)
        .ok_or_else(|| bad(path, format!("unsupported datatype code {code}")))?;
    let vox_offset = f32_at(108).max(0.0) as usize;
    Ok(Header {
        swap,
        extents,
        spacing,
        disk,
        vox_offset: if pair { 0 } else { vox_offset.max(HDR_LEN) },
        slope: f32_at(112),
        inter: f32_at(116),
        pair,
    })
}

fn read_nifti_as(path: &Path, kind: VolumeKind) -> Result<Volume> {
    let bytes = read_maybe_gz(path)?;
    let hdr = parse_header(path, &bytes)?;
    let payload_owner;
    let payload: &[u8] = if hdr.pair {
        let img: PathBuf = path.with_extension("img");
        payload_owner = read_maybe_gz(&img)?;
        &payload_owner
    } else {
        &bytes
    };
    let n: usize = hdr.extents.iter().product();
    let bs = hdr.disk.bytes();
    let need = hdr.vox_offset + n * bs;
    if payload.len() < need {
        return Err(bad(
            path,
            format!("truncated payload: need {need} bytes, file has {}", payload.len()),
        ));
    }
    let raw = &payload[hdr.vox_offset..need];
    let scale = hdr.slope.is_finite() && hdr.slope != 0.0;
    let (e0, e1, e2) = (hdr.extents[0], hdr.extents[1], hdr.extents[2]);
    let mut data = vec![0.0; n];
    // Disk order runs x fastest; ours runs depth (z) fastest.
    let mut cursor = 0;
    for z in 0..e2 {
        for y in 0..e1 {
            for x in 0..e0 {
                let mut v = hdr.disk.decode(&raw[cursor..cursor + bs], hdr.swap);
                if scale {
                    v = v * hdr.slope as f64 + hdr.inter as f64;
                }
                data[(x * e1 + y) * e2 + z] = v;
                cursor += bs;
            }
        }
    }
    if kind == VolumeKind::Label {
        if let Some(v) = data.iter().find(|v| !(v.fract() == 0.0 && **v >= 0.0)) {
            return Err(bad(path, format!("label volume holds non-integer value {v}")));
        }
    }
    Volume::new(hdr.extents, hdr.spacing, kind, data)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti_as(path.as_ref(), VolumeKind::Intensity)
}

pub fn read_nifti_labels(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti_as(path.as_ref(), VolumeKind::Label)
}

/// Writes single-file NIfTI-1 (gzipped when the path ends in .gz):
/// float64 for intensity volumes, int32 for labels, so values in either
/// kind roundtrip bitwise.
pub fn write_nifti(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let disk = match v.kind {
        VolumeKind::Intensity => DiskType::F64,
        VolumeKind::Label => DiskType::I32,
    };
    if v.kind == VolumeKind::Label {
        if let Some(x) = v.data.iter().find(|x| **x > i32::MAX as f64) {
            return Err(bad(path, format!("label {x} does not fit int32")));
        }
    }
    let n = v.numel();
    let mut bytes = vec![0u8; HDR_LEN + 4 + n * disk.bytes()];
    bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
    bytes[40..42].copy_from_slice(&3i16.to_le_bytes());
    for a in 0..3 {
        let off = 42 + 2 * a;
        bytes[off..off + 2].copy_from_slice(&(v.extents[a] as i16).to_le_bytes());
        let poff = 80 + 4 * a;
        bytes[poff..poff + 4].copy_from_slice(&(v.spacing[a] as f32).to_le_bytes());
    }
    let code: i16 = match disk {
        DiskType::F64 => 64,
        _ => 8,
    };
    bytes[70..72].copy_from_slice(&code.to_le_bytes());
    bytes[72..74].copy_from_slice(&((disk.bytes() * 8) as i16).to_le_bytes());
    bytes[108..112].copy_from_slice(&((HDR_LEN + 4) as f32).to_le_bytes());
    bytes[344..348].copy_from_slice(MAGIC_SAME);
    let mut cursor = HDR_LEN + 4;
    for z in 0..v.extents[2] {
        for y in 0..v.extents[1] {
            for x in 0..v.extents[0] {
                let val = v.at(x, y, z);
                match disk {
                    DiskType::F64 => {
                        bytes[cursor..cursor + 8].copy_from_slice(&val.to_le_bytes());
                        cursor += 8;
                    }
                    _ => {
                        bytes[cursor..cursor + 4].copy_from_slice(&(val as i32).to_le_bytes());
                        cursor += 4;
                    }
                }
            }
        }
    }
    write_maybe_gz(path, &bytes)
}

/// Reads the raw format: a headerless little-endian float32 or uint16
/// payload in this crate's voxel order, described by `<path>.meta`.
pub fn read_raw(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let meta_path = sidecar(path);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| bad(&meta_path, format!("cannot read sidecar: {e}")))?;
    let mut extents = None;
    let mut spacing = None;
    let mut kind = None;
    let mut dtype = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(&meta_path, format!("line {}: expected key = value", ln + 1)))?;
        let value = value.trim();
        match key.trim() {
            "extents" => {
                let v: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(&meta_path, format!("extents: {e}")))?;
                extents = Some(<[usize; 3]>::try_from(v).map_err(|v: Vec<usize>| {
                    bad(&meta_path, format!("extents needs 3 values, got {}", v.len()))
                })?);
            }
            "spacing" => {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(&meta_path, format!("spacing: {e}")))?;
                spacing = Some(<[f64; 3]>::try_from(v).map_err(|v: Vec<f64>| {
                    bad(&meta_path, format!("spacing needs 3 values, got {}", v.len()))
                })?);
            }
            "kind" => {
                kind = Some(match value {
                    "intensity" => VolumeKind::Intensity,
                    "label" => VolumeKind::Label,
                    other => return Err(bad(&meta_path, format!("unknown kind {other:?}"))),
                });
            }
            "dtype" => {
                dtype = Some(match value {
                    "float32" => DiskType::F32,
                    "uint16" => DiskType::U16,
                    other => return Err(bad(&meta_path, format!("unknown dtype {other:?}"))),
                });
            }
            other => return Err(bad(&meta_path, format!("unknown key {other:?}"))),
        }
    }
    let extents = extents.ok_or_else(|| bad(&meta_path, "missing extents"))?;
    let spacing = spacing.ok_or_else(|| bad(&meta_path, "missing spacing"))?;
    let kind = kind.ok_or_else(|| bad(&meta_path, "missing kind"))?;
    let dtype = dtype.ok_or_else(|| bad(&meta_path, "missing dtype"))?;

    let raw = std::fs::read(path)?;
    let n: usize = extents.iter().product();
    if raw.len() != n * dtype.bytes() {
        return Err(bad(
            path,
            format!("payload is {} bytes but {extents:?} {dtype:?} needs {}", raw.len(), n * dtype.bytes()),
        ));
    }
    let data = raw.chunks_exact(dtype.bytes()).map(|c| dtype.decode(c, false)).collect();
    Volume::new(extents, spacing, kind, data)
}

/// Writes the raw format: float32 for intensity, uint16 for labels, plus
/// the sidecar. Label values must fit uint16.
pub fn write_raw(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let (dtype, name) = match v.kind {
        VolumeKind::Intensity => (DiskType::F32, "float32"),
        VolumeKind::Label => (DiskType::U16, "uint16"),
    };
    let mut raw = Vec::with_capacity(v.numel() * dtype.bytes());
    for &x in &v.data {
        match dtype {
            DiskType::F32 => raw.extend_from_slice(&(x as f32).to_le_bytes()),
            _ => {
                if x > u16::MAX as f64 {
                    return Err(bad(path, format!("label {x} does not fit uint16")));
                }
                raw.extend_from_slice(&(x as u16).to_le_bytes());
            }
        }
    }
    std::fs::write(path, raw)?;
    let kind = match v.kind {
        VolumeKind::Intensity => "intensity",
        VolumeKind::Label => "label",
    };
    let meta = format!(
        "extents = {} {} {}\nspacing = {} {} {}\nkind = {kind}\ndtype = {name}\n",
        v.extents[0], v.extents[1], v.extents[2], v.spacing[0], v.spacing[1], v.spacing[2],
    );
    Ok(std::fs::write(sidecar(path), meta)?)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

/// Reads either format by extension: .nii / .nii.gz / .hdr are NIfTI,
/// anything else is raw+sidecar.
pub fn read_auto(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume> {
    let path = path.as_ref();
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".hdr") {
        read_nifti_as(path, kind)
    } else {
        let v = read_raw(path)?;
        if v.kind != kind {
            return Err(bad(path, format!("sidecar declares {:?}, expected {kind:?}", v.kind)));
        }
        Ok(v)
    }
}
