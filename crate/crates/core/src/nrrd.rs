//! NRRD (NRRD0004/NRRD0005) reading and writing for 3D scalar volumes.
//!
//! Only attached data is supported, with `raw` or `gzip` encoding. Samples
//! are converted to `f32` on load; volumes are written as little-endian
//! `float`, masks as `uint8`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMask, Mat3, Vec3, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s.trim() {
            "signed char" | "int8" | "int8_t" => ScalarType::I8,
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => ScalarType::U8,
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => {
                ScalarType::I16
            }
            "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => ScalarType::U16,
            "float" => ScalarType::F32,
            "double" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Raw,
    Gzip,
}

/// A decoded volume together with non-fatal header issues.
#[derive(Debug)]
pub struct NrrdImage {
    pub volume: Volume3D,
    pub warnings: Vec<String>,
}

pub fn load_nrrd(path: impl AsRef<Path>) -> Result<Volume3D> {
    let bytes = fs::read(path.as_ref())?;
    let image = read_nrrd(&bytes)?;
    for w in &image.warnings {
        log::warn!("{}: {w}", path.as_ref().display());
    }
    Ok(image.volume)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    Ok(LabelMask::from_volume(&load_nrrd(path)?))
}

pub fn save_nrrd(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_nrrd(vol, Encoding::Raw)?)?;
    Ok(())
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_mask(mask, Encoding::Raw)?)?;
    Ok(())
}

fn parse_vector(field: &str, s: &str) -> Result<Vec3> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| Error::nrrd(field, format!("expected (x,y,z), got `{s}`")))?;
    let parts: Vec<f64> = inner
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::nrrd(field, format!("bad number in `{s}`: {e}")))?;
    if parts.len() != 3 {
        return Err(Error::nrrd(field, format!("expected 3 components, got {}", parts.len())));
    }
    Ok(Vec3::new(parts[0], parts[1], parts[2]))
}

fn split_vectors(s: &str) -> Vec<&str> {
    // "(a,b,c) (d,e,f) none" -> ["(a,b,c)", "(d,e,f)", "none"]
    let mut out = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        if rest.starts_with('(') {
            let end = rest.find(')').map(|e| e + 1).unwrap_or(rest.len());
            out.push(&rest[..end]);
            rest = rest[end..].trim_start();
        } else {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            out.push(&rest[..end]);
            rest = rest[end..].trim_start();
        }
    }
    out
}

/// Parses an in-memory NRRD file.
pub fn read_nrrd(bytes: &[u8]) -> Result<NrrdImage> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..].iter().position(|&b| b == b'\n').map(|e| *pos + e);
        let (line, next) = match end {
            Some(e) => (&bytes[*pos..e], e + 1),
            None => (&bytes[*pos..], bytes.len()),
        };
        *pos = next;
        Some(String::from_utf8_lossy(line).trim_end_matches('\r').to_string())
    };

    let magic = next_line(&mut pos).ok_or_else(|| Error::nrrd("magic", "empty file"))?;
    if !magic.starts_with("NRRD000") {
        return Err(Error::nrrd("magic", format!("not an NRRD file (`{magic}`)")));
    }

    let mut fields: Vec<(String, String)> = Vec::new();
    loop {
        let line = next_line(&mut pos).ok_or_else(|| Error::nrrd("header", "missing blank line before data"))?;
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') || line.contains(":=") {
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::nrrd("header", format!("malformed line `{line}`")))?;
        fields.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let get = |key: &str| fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let mut warnings = Vec::new();

    let dimension: usize = get("dimension")
        .ok_or_else(|| Error::nrrd("dimension", "missing"))?
        .parse()
        .map_err(|_| Error::nrrd("dimension", "not an integer"))?;
    if dimension != 3 {
        return Err(Error::nrrd("dimension", format!("expected 3, got {dimension}")));
    }

    let sizes: Vec<usize> = get("sizes")
        .ok_or_else(|| Error::nrrd("sizes", "missing"))?
        .split_whitespace()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::nrrd("sizes", "not a list of integers"))?;
    if sizes.len() != 3 || sizes.contains(&0) {
        return Err(Error::nrrd("sizes", format!("expected 3 positive sizes, got {sizes:?}")));
    }
    let dims = [sizes[0], sizes[1], sizes[2]];

    let type_str = get("type").ok_or_else(|| Error::nrrd("type", "missing"))?;
    let scalar = ScalarType::parse(type_str)
        .ok_or_else(|| Error::nrrd("type", format!("unsupported scalar type `{type_str}`")))?;

    let encoding = match get("encoding").ok_or_else(|| Error::nrrd("encoding", "missing"))? {
        "raw" => Encoding::Raw,
        "gzip" | "gz" => Encoding::Gzip,
        other => return Err(Error::nrrd("encoding", format!("unsupported encoding `{other}`"))),
    };

    let big_endian = match get("endian") {
        Some("little") => false,
        Some("big") => true,
        Some(other) => return Err(Error::nrrd("endian", format!("unknown value `{other}`"))),
        None if scalar.size() > 1 => return Err(Error::nrrd("endian", "missing for multi-byte type")),
        None => false,
    };

    if get("data file").is_some() || get("datafile").is_some() {
        return Err(Error::nrrd("data file", "detached data is not supported"));
    }
    for key in ["byte skip", "byteskip", "line skip", "lineskip"] {
        if let Some(v) = get(key) {
            if v != "0" {
                return Err(Error::nrrd(key, "non-zero skips are not supported"));
            }
        }
    }

    let (spacing, direction) = if let Some(sd) = get("space directions") {
        let parts = split_vectors(sd);
        let vecs: Vec<Vec3> = parts
            .iter()
            .filter(|p| **p != "none")
            .map(|p| parse_vector("space directions", p))
            .collect::<Result<_>>()?;
        if vecs.len() != 3 {
            return Err(Error::nrrd("space directions", format!("expected 3 vectors, got {}", vecs.len())));
        }
        let mut spacing = [0.0; 3];
        let mut dir = Mat3::zeros();
        for (a, v) in vecs.iter().enumerate() {
            let n = v.norm();
            if !(n > 0.0) {
                return Err(Error::nrrd("space directions", format!("axis {a} has zero length")));
            }
            spacing[a] = n;
            dir.set_column(a, &(v / n));
        }
        (spacing, dir)
    } else if let Some(sp) = get("spacings") {
        let spacing: Vec<f64> = sp
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::nrrd("spacings", "not a list of numbers"))?;
        if spacing.len() != 3 {
            return Err(Error::nrrd("spacings", "expected 3 values"));
        }
        ([spacing[0], spacing[1], spacing[2]], Mat3::identity())
    } else {
        warnings.push("no `space directions` or `spacings`; assuming 1 mm isotropic spacing".into());
        ([1.0; 3], Mat3::identity())
    };

    let origin = match get("space origin") {
        Some(o) => parse_vector("space origin", o)?,
        None => Vec3::zeros(),
    };

    let geometry = Geometry::new(dims, spacing, origin, direction)
        .map_err(|e| Error::nrrd("space directions", e.to_string()))?;

    let payload = &bytes[pos.min(bytes.len())..];
    let n = geometry.len();
    let need = n * scalar.size();
    let raw: Vec<u8> = match encoding {
        Encoding::Raw => payload.to_vec(),
        Encoding::Gzip => {
            let mut out = Vec::with_capacity(need);
            GzDecoder::new(payload)
                .read_to_end(&mut out)
                .map_err(|e| Error::nrrd("encoding", format!("gzip payload: {e}")))?;
            out
        }
    };
    if raw.len() < need {
        return Err(Error::nrrd(
            "sizes",
            format!("truncated data: need {need} bytes, have {}", raw.len()),
        ));
    }
    let data = decode_samples(&raw[..need], scalar, big_endian);
    Ok(NrrdImage {
        volume: Volume3D::new(geometry, data)?,
        warnings,
    })
}

fn decode_samples(bytes: &[u8], scalar: ScalarType, big: bool) -> Vec<f32> {
    let sz = scalar.size();
    bytes
        .chunks_exact(sz)
        .map(|c| match scalar {
            ScalarType::I8 => c[0] as i8 as f32,
            ScalarType::U8 => c[0] as f32,
            ScalarType::I16 => {
                let b = [c[0], c[1]];
                (if big { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f32
            }
            ScalarType::U16 => {
                let b = [c[0], c[1]];
                (if big { u16::from_be_bytes(b) } else { u16::from_le_bytes(b) }) as f32
            }
            ScalarType::F32 => {
                let b = [c[0], c[1], c[2], c[3]];
                if big {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            }
            ScalarType::F64 => {
                let b: [u8; 8] = c.try_into().unwrap();
                (if big { f64::from_be_bytes(b) } else { f64::from_le_bytes(b) }) as f32
            }
        })
        .collect()
}

fn header(geometry: &Geometry, type_name: &str, encoding: Encoding) -> String {
    let [nx, ny, nz] = geometry.dims;
    let m = geometry.index_to_world_matrix();
    let col = |c: usize| format!("({},{},{})", m[(0, c)], m[(1, c)], m[(2, c)]);
    let o = geometry.origin;
    let mut h = String::new();
    h.push_str("NRRD0004\n");
    h.push_str("# written by mvseg\n");
    h.push_str(&format!("type: {type_name}\n"));
    h.push_str("dimension: 3\n");
    h.push_str("space: left-posterior-superior\n");
    h.push_str(&format!("sizes: {nx} {ny} {nz}\n"));
    h.push_str(&format!("space directions: {} {} {}\n", col(0), col(1), col(2)));
    h.push_str("kinds: domain domain domain\n");
    h.push_str("endian: little\n");
    h.push_str(match encoding {
        Encoding::Raw => "encoding: raw\n",
        Encoding::Gzip => "encoding: gzip\n",
    });
    h.push_str(&format!("space origin: ({},{},{})\n\n", o.x, o.y, o.z));
    h
}

fn finish(mut out: Vec<u8>, payload: Vec<u8>, encoding: Encoding) -> Result<Vec<u8>> {
    match encoding {
        Encoding::Raw => out.extend_from_slice(&payload),
        Encoding::Gzip => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&payload)?;
            out.extend_from_slice(&enc.finish()?);
        }
    }
    Ok(out)
}

/// Serializes a volume as little-endian `float`.
///
/// Space directions are written with full `f64` round-trip precision so a
/// reload reproduces geometry to within floating-point rounding of the
/// spacing/direction factorization.
pub fn write_nrrd(vol: &Volume3D, encoding: Encoding) -> Result<Vec<u8>> {
    let out = header(vol.geometry(), "float", encoding).into_bytes();
    let payload: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    finish(out, payload, encoding)
}

pub fn write_mask(mask: &LabelMask, encoding: Encoding) -> Result<Vec<u8>> {
    let out = header(mask.geometry(), "uint8", encoding).into_bytes();
    let payload: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    finish(out, payload, encoding)
}
