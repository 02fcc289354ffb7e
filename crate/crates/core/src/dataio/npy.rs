//! Minimal NPY reader/writer for C-order `uint8` and `int64` arrays
//! (format versions 1.0 and 2.0).

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NpyData {
    U8(Vec<u8>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::format("missing NPY magic"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 => {
            if bytes.len() < 12 {
                return Err(Error::format("truncated NPY v2 preamble"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => {
            return Err(Error::format(format!(
                "unsupported NPY version {major}.{minor}"
            )))
        }
    };
    let body_start = header_start + header_len;
    if bytes.len() < body_start {
        return Err(Error::format("truncated NPY header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..body_start])
        .map_err(|_| Error::format("NPY header is not valid text"))?;

    let descr = dict_value(header, "descr")?;
    let descr = descr.trim().trim_matches(|c| c == '\'' || c == '"');
    let fortran = dict_value(header, "fortran_order")?.trim().to_owned();
    if fortran != "False" {
        return Err(Error::format("Fortran-order arrays are not supported"));
    }
    let shape = parse_shape(dict_value(header, "shape")?)?;
    let count: usize = shape.iter().product();
    let body = &bytes[body_start..];

    let data = match descr {
        "|u1" | "<u1" | "u1" => {
            if body.len() < count {
                return Err(Error::format("NPY payload shorter than its shape"));
            }
            NpyData::U8(body[..count].to_vec())
        }
        "<i8" => {
            if body.len() < count * 8 {
                return Err(Error::format("NPY payload shorter than its shape"));
            }
            NpyData::I64(
                body.chunks_exact(8)
                    .take(count)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return Err(Error::format(format!("unsupported dtype `{other}`"))),
    };
    Ok(NpyArray { shape, data })
}

/// Returns the raw text of `key`'s value in the header dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let needle_a = format!("'{key}'");
    let needle_b = format!("\"{key}\"");
    let pos = header
        .find(&needle_a)
        .or_else(|| header.find(&needle_b))
        .ok_or_else(|| Error::format(format!("NPY header missing `{key}`")))?;
    let rest = &header[pos + needle_a.len()..];
    let rest = rest
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(|| Error::format(format!("malformed NPY header near `{key}`")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| Error::format(format!("malformed NPY header value for `{key}`")))?;
    Ok(&rest[..end])
}

fn parse_shape(text: &str) -> Result<Vec<usize>> {
    let inner = text
        .trim()
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| Error::format(format!("bad shape literal `{text}`")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::format(format!("bad shape entry `{s}`")))
        })
        .collect()
}

/// Serializes as NPY 1.0 with a 64-byte aligned header.
pub fn write(array: &NpyArray) -> Vec<u8> {
    let descr = match array.data {
        NpyData::U8(_) => "|u1",
        NpyData::I64(_) => "<i8",
    };
    let shape = match array.shape.len() {
        1 => format!("({},)", array.shape[0]),
        _ => format!(
            "({})",
            array
                .shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + array.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match &array.data {
        NpyData::U8(v) => out.extend_from_slice(v),
        NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}
