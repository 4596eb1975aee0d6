//! On-disk formats: `PPV1` volumes, 16-bit PGM slices and their JSON
//! sidecars.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AugRecord, Image, SliceImage, Volume};
use crate::error::{Error, Result};
use crate::geom::PlanePose;

const VOLUME_MAGIC: &[u8; 4] = b"PPV1";
const HEADER_LEN: usize = 16;

/// Header `PPV1` + `u32` D, H, W (little endian), then `D·H·W` little-endian
/// `f32` voxels, z-major.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let [d, h, w] = v.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.data().len());
    out.extend_from_slice(VOLUME_MAGIC);
    for n in [d, h, w] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &x in v.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], origin: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format(origin, "missing PPV1 header"));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| Error::format(origin, "dims overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(Error::format(
            origin,
            format!(
                "expected {} voxel bytes for {dims:?}, found {}",
                4 * n,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(dims, data)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

/// Binary (`P5`) PGM with maxval 65535; intensities in `[0, 1]` are scaled
/// and rounded, stored big-endian as the format requires.
pub fn encode_pgm16(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(2 * img.data.len());
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8], origin: &Path) -> Result<Image> {
    // Header: magic, width, height, maxval separated by whitespace, with
    // optional `#` comments, then exactly one whitespace byte.
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(origin, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P5" {
        return Err(Error::format(
            origin,
            format!("unsupported magic {}", fields[0]),
        ));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(origin, format!("bad header field {s}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(origin, format!("bad maxval {maxval}")));
    }
    let n = width * height;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let body = bytes.get(i..).unwrap_or(&[]);
    if body.len() < n * bpp {
        return Err(Error::format(origin, "truncated PGM body"));
    }
    let data = (0..n)
        .map(|k| {
            let raw = if bpp == 2 {
                u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) as f64
            } else {
                body[k] as f64
            };
            raw / maxval as f64
        })
        .collect();
    Image::new(height, width, data)
}

pub fn write_pgm16(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_pgm16(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm16(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm16(&bytes, path)
}

/// JSON sidecar written next to each exported slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSidecar {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub half_extent: f64,
    pub pose: PlanePose,
    pub aug_record: AugRecord,
}

/// Writes `<stem>.pgm` and `<stem>.json` into `dir`.
pub fn write_slice(dir: &Path, stem: &str, s: &SliceImage, half_extent: f64) -> Result<()> {
    let image = format!("{stem}.pgm");
    write_pgm16(&dir.join(&image), &s.image)?;
    let sidecar = SliceSidecar {
        image,
        height: s.image.height,
        width: s.image.width,
        half_extent,
        pose: s.pose,
        aug_record: s.aug,
    };
    let path = dir.join(format!("{stem}.json"));
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))
}
