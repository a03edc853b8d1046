//! A strict subset of NRRD: 3-D, little-endian, raw (or gzip with the
//! `gzip` feature), axis-aligned geometry.

use std::fs;
use std::path::Path;

use crate::volume::{Dims, Grid, Mask, Spacing, Volume};
use crate::{Error, Result};

const MAGIC: &str = "NRRD0004";

/// Sample type on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    U8,
    I16,
    F32,
}

impl ElementType {
    fn size(self) -> usize {
        match self {
            ElementType::U8 => 1,
            ElementType::I16 => 2,
            ElementType::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::U8 => "uint8",
            ElementType::I16 => "int16",
            ElementType::F32 => "float",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => Some(ElementType::U8),
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => {
                Some(ElementType::I16)
            }
            "float" => Some(ElementType::F32),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Encoding {
    Raw,
    Gzip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NrrdHeader {
    pub element: ElementType,
    pub sizes: Dims,
    pub spacing: Spacing,
}

/// What a file decoded to.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Image(Volume),
    /// A `uint8` payload holding only 0 and 1.
    Mask(Mask),
}

impl VolumeData {
    pub fn into_volume(self) -> Volume {
        match self {
            VolumeData::Image(v) => v,
            VolumeData::Mask(m) => m.to_volume(),
        }
    }
}

struct Parser<'a> {
    path: &'a Path,
}

impl Parser<'_> {
    fn err(&self, context: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            context: context.into(),
            message: message.into(),
        }
    }

    fn numbers<const N: usize>(&self, ctx: &str, value: &str) -> Result<[f64; N]> {
        let parts: Vec<&str> = value.split_whitespace().collect();
        if parts.len() != N {
            return Err(self.err(ctx, format!("expected {N} values, got `{value}`")));
        }
        let mut out = [0.0; N];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.parse().map_err(|_| self.err(ctx, format!("`{p}` is not a number")))?;
        }
        Ok(out)
    }

    /// `(a,b,c) (d,e,f) (g,h,i)` with zero off-diagonal entries.
    fn directions(&self, ctx: &str, value: &str) -> Result<Spacing> {
        let vectors: Vec<&str> = value
            .split(')')
            .map(|s| s.trim().trim_start_matches('('))
            .filter(|s| !s.is_empty())
            .collect();
        if vectors.len() != 3 {
            return Err(self.err(ctx, format!("expected three vectors, got `{value}`")));
        }
        let mut spacing = [0.0; 3];
        for (axis, v) in vectors.iter().enumerate() {
            let comps: Vec<f64> = v
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| self.err(ctx, format!("bad vector `({v})`")))?;
            if comps.len() != 3 {
                return Err(self.err(ctx, format!("vector `({v})` needs three components")));
            }
            for (k, &c) in comps.iter().enumerate() {
                if k != axis && c != 0.0 {
                    return Err(self.err(ctx, "only axis-aligned (diagonal) directions are supported"));
                }
            }
            spacing[axis] = comps[axis].abs();
        }
        Ok(spacing)
    }
}

/// Header fields that carry no information this reader needs.
const IGNORED_FIELDS: &[&str] = &[
    "content",
    "space",
    "space origin",
    "space units",
    "kinds",
    "labels",
    "units",
    "centers",
    "centerings",
    "measurement frame",
    "min",
    "max",
    "old min",
    "old max",
    "thicknesses",
];

fn split_header(bytes: &[u8]) -> Option<(&str, &[u8])> {
    let end = bytes.windows(2).position(|w| w == b"\n\n")?;
    let header = std::str::from_utf8(&bytes[..end]).ok()?;
    Some((header, &bytes[end + 2..]))
}

/// Parse a complete file image.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<(NrrdHeader, VolumeData)> {
    let p = Parser { path };
    let (header, payload) = split_header(bytes).ok_or_else(|| p.err("header", "no blank line ends the header"))?;
    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == MAGIC => {}
        Some((_, l)) if l.starts_with("NRRD000") => {
            return Err(p.err("line 1", format!("unsupported version `{}`", l.trim_end())))
        }
        _ => return Err(p.err("line 1", format!("missing `{MAGIC}` magic"))),
    }
    let mut element = None;
    let mut dimension = None;
    let mut sizes = None;
    let mut spacing = None;
    let mut encoding = None;
    let mut endian = None;
    for (i, line) in lines {
        let line = line.trim_end();
        let ctx = format!("line {}", i + 1);
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if line.contains(":=") {
            // key/value comment pairs
            continue;
        }
        let Some((key, value)) = line.split_once(": ") else {
            return Err(p.err(ctx, format!("malformed field `{line}`")));
        };
        let value = value.trim();
        let ctx = format!("{ctx} ({key})");
        match key {
            "type" => {
                element = Some(ElementType::parse(value).ok_or_else(|| p.err(&ctx, format!("unsupported type `{value}`")))?)
            }
            "dimension" => {
                if value != "3" {
                    return Err(p.err(&ctx, format!("only 3-D volumes are supported, got {value}")));
                }
                dimension = Some(3);
            }
            "sizes" => {
                let v = p.numbers::<3>(&ctx, value)?;
                if v.iter().any(|&s| s < 1.0 || s.fract() != 0.0) {
                    return Err(p.err(&ctx, format!("sizes must be positive integers, got `{value}`")));
                }
                sizes = Some(v.map(|s| s as usize));
            }
            "spacings" => {
                let v = p.numbers::<3>(&ctx, value)?;
                spacing = Some(v);
            }
            "space directions" => spacing = Some(p.directions(&ctx, value)?),
            "endian" => endian = Some(value.to_owned()),
            "encoding" => {
                encoding = Some(match value {
                    "raw" => Encoding::Raw,
                    "gzip" | "gz" if cfg!(feature = "gzip") => Encoding::Gzip,
                    "gzip" | "gz" => {
                        return Err(p.err(&ctx, "gzip encoding needs the `gzip` feature"));
                    }
                    other => return Err(p.err(&ctx, format!("unsupported encoding `{other}`"))),
                })
            }
            "space dimension" if value == "3" => {}
            k if IGNORED_FIELDS.contains(&k) => {}
            other => return Err(p.err(&ctx, format!("unsupported field `{other}`"))),
        }
    }
    let element = element.ok_or_else(|| p.err("header", "missing `type`"))?;
    dimension.ok_or_else(|| p.err("header", "missing `dimension`"))?;
    let sizes = sizes.ok_or_else(|| p.err("header", "missing `sizes`"))?;
    let spacing = spacing.unwrap_or([1.0; 3]);
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(p.err("spacings", format!("spacing must be positive, got {spacing:?}")));
    }
    let encoding = encoding.ok_or_else(|| p.err("header", "missing `encoding`"))?;
    match endian.as_deref() {
        Some("little") => {}
        None if element == ElementType::U8 => {}
        Some(e) if element == ElementType::U8 && e == "big" => {}
        Some(e) => return Err(p.err("endian", format!("unsupported endianness `{e}`"))),
        None => return Err(p.err("header", "missing `endian`")),
    }

    let count = sizes
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| p.err("sizes", "voxel count overflows"))?;
    let expected = count
        .checked_mul(element.size())
        .ok_or_else(|| p.err("sizes", "payload size overflows"))?;
    let payload = match encoding {
        Encoding::Raw => std::borrow::Cow::Borrowed(payload),
        Encoding::Gzip => std::borrow::Cow::Owned(gunzip(&p, payload, expected)?),
    };
    if payload.len() != expected {
        return Err(p.err(
            "payload",
            format!(
                "sizes {sizes:?} of {} need {expected} bytes, found {}",
                element.name(),
                payload.len()
            ),
        ));
    }
    let header = NrrdHeader {
        element,
        sizes,
        spacing,
    };
    let data = match element {
        ElementType::U8 if payload.iter().all(|&b| b <= 1) => {
            VolumeData::Mask(Grid::from_vec(sizes, spacing, payload.iter().map(|&b| b == 1).collect())?)
        }
        ElementType::U8 => VolumeData::Image(Grid::from_vec(sizes, spacing, payload.iter().map(|&b| b as f32).collect())?),
        ElementType::I16 => VolumeData::Image(Grid::from_vec(
            sizes,
            spacing,
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect(),
        )?),
        ElementType::F32 => VolumeData::Image(Grid::from_vec(
            sizes,
            spacing,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )?),
    };
    Ok((header, data))
}

#[cfg(feature = "gzip")]
fn gunzip(p: &Parser<'_>, payload: &[u8], expected: usize) -> Result<Vec<u8>> {
    use std::io::Read;
    let mut out = Vec::with_capacity(expected.min(1 << 30));
    // Read at most one byte past the expected size so oversized streams are
    // detected without inflating them fully.
    flate2::read::GzDecoder::new(payload)
        .take(expected as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| p.err("payload", format!("gzip: {e}")))?;
    Ok(out)
}

#[cfg(not(feature = "gzip"))]
fn gunzip(p: &Parser<'_>, _payload: &[u8], _expected: usize) -> Result<Vec<u8>> {
    Err(p.err("encoding", "gzip encoding needs the `gzip` feature"))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(path, &bytes)?.1)
}

/// Read any supported file as scalars (a mask reads as 0/1).
pub fn read_image(path: impl AsRef<Path>) -> Result<Volume> {
    Ok(read_volume(path)?.into_volume())
}

/// Read a file that must hold a binary mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    match read_volume(path)? {
        VolumeData::Mask(m) => Ok(m),
        VolumeData::Image(_) => Err(Error::Parse {
            path: path.to_path_buf(),
            context: "payload".into(),
            message: "expected a uint8 mask with values 0 and 1".into(),
        }),
    }
}

fn header_text(element: ElementType, dims: Dims, spacing: Spacing) -> String {
    format!(
        "{MAGIC}\ntype: {}\ndimension: 3\nsizes: {} {} {}\nspacings: {} {} {}\nendian: little\nencoding: raw\n\n",
        element.name(),
        dims[0],
        dims[1],
        dims[2],
        spacing[0],
        spacing[1],
        spacing[2]
    )
}

/// Encode scalars as `element` (values are rounded and range-checked for
/// integer types).
pub fn encode_volume(v: &Volume, element: ElementType) -> Result<Vec<u8>> {
    let mut out = header_text(element, v.dims(), v.spacing()).into_bytes();
    out.reserve(v.len() * element.size());
    for &x in v.data() {
        match element {
            ElementType::F32 => out.extend_from_slice(&x.to_le_bytes()),
            ElementType::I16 => {
                let r = x.round();
                if !(i16::MIN as f32..=i16::MAX as f32).contains(&r) {
                    return Err(Error::Range(format!("{x} does not fit int16")));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            ElementType::U8 => {
                let r = x.round();
                if !(0.0..=255.0).contains(&r) {
                    return Err(Error::Range(format!("{x} does not fit uint8")));
                }
                out.push(r as u8);
            }
        }
    }
    Ok(out)
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let mut out = header_text(ElementType::U8, m.dims(), m.spacing()).into_bytes();
    out.extend(m.data().iter().map(|&b| b as u8));
    out
}

pub fn write_volume(v: &Volume, element: ElementType, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v, element)?).map_err(|e| Error::io(path, e))
}

pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}
