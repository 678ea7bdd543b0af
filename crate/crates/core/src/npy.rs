//! NPY array files and NPZ (ZIP) archives of them.
//!
//! Only C-order arrays with simple dtypes are supported: booleans, integers,
//! floats and fixed-width little-endian unicode strings.

use std::collections::BTreeMap;
use std::io::{Read, Seek, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Bool,
    Int,
    UInt,
    Float,
    /// UCS-4 code points.
    Unicode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dtype {
    pub kind: Kind,
    /// Bytes per element.
    pub size: usize,
    pub big_endian: bool,
}

impl Dtype {
    pub const U8: Dtype = Dtype {
        kind: Kind::UInt,
        size: 1,
        big_endian: false,
    };
    pub const U16: Dtype = Dtype {
        kind: Kind::UInt,
        size: 2,
        big_endian: false,
    };

    pub fn unicode(chars: usize) -> Dtype {
        Dtype {
            kind: Kind::Unicode,
            size: 4 * chars.max(1),
            big_endian: false,
        }
    }

    pub fn parse(descr: &str) -> Result<Dtype> {
        let bad = || Error::Format(format!("unknown dtype `{descr}`"));
        let mut chars = descr.chars();
        let order = chars.next().ok_or_else(bad)?;
        let big_endian = match order {
            '<' | '|' | '=' => false,
            '>' => true,
            _ => return Err(bad()),
        };
        let kind_char = chars.next().ok_or_else(bad)?;
        let n: usize = chars.as_str().parse().map_err(|_| bad())?;
        let (kind, size) = match kind_char {
            'b' if n == 1 => (Kind::Bool, 1),
            'i' if matches!(n, 1 | 2 | 4 | 8) => (Kind::Int, n),
            'u' if matches!(n, 1 | 2 | 4 | 8) => (Kind::UInt, n),
            'f' if matches!(n, 4 | 8) => (Kind::Float, n),
            'U' if n >= 1 => (Kind::Unicode, 4 * n),
            _ => return Err(bad()),
        };
        Ok(Dtype {
            kind,
            size,
            big_endian: big_endian && size > 1,
        })
    }

    pub fn descr(&self) -> String {
        let order = if self.size == 1 && self.kind != Kind::Unicode {
            '|'
        } else if self.big_endian {
            '>'
        } else {
            '<'
        };
        match self.kind {
            Kind::Bool => "|b1".into(),
            Kind::Int => format!("{order}i{}", self.size),
            Kind::UInt => format!("{order}u{}", self.size),
            Kind::Float => format!("{order}f{}", self.size),
            Kind::Unicode => format!("{order}U{}", self.size / 4),
        }
    }

    pub fn is_integer(&self) -> bool {
        matches!(self.kind, Kind::Int | Kind::UInt | Kind::Bool)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Raw element bytes in C order, in the file's byte order.
    pub bytes: Vec<u8>,
}

impl NpyArray {
    pub fn new(dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel * dtype.size != bytes.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} of {} needs {} bytes, got {}",
                dtype.descr(),
                numel * dtype.size,
                bytes.len()
            )));
        }
        Ok(NpyArray { dtype, shape, bytes })
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(Dtype::U8, shape, data)
    }

    pub fn from_u16(shape: Vec<usize>, data: &[u16]) -> Result<Self> {
        Self::new(Dtype::U16, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn from_strings(items: &[String]) -> Result<Self> {
        let width = items.iter().map(|s| s.chars().count()).max().unwrap_or(1).max(1);
        let mut bytes = Vec::with_capacity(items.len() * width * 4);
        for s in items {
            let mut n = 0;
            for c in s.chars() {
                bytes.extend_from_slice(&(c as u32).to_le_bytes());
                n += 1;
            }
            bytes.resize(bytes.len() + 4 * (width - n), 0);
        }
        Self::new(Dtype::unicode(width), vec![items.len()], bytes)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn element(&self, i: usize) -> &[u8] {
        &self.bytes[i * self.dtype.size..(i + 1) * self.dtype.size]
    }

    /// Elements as signed 128-bit integers; errors for non-integer dtypes.
    pub fn to_i128(&self) -> Result<Vec<i128>> {
        if !self.dtype.is_integer() {
            return Err(Error::Validation(format!("expected an integer array, got {}", self.dtype.descr())));
        }
        Ok((0..self.numel())
            .map(|i| {
                let mut b = self.element(i).to_vec();
                if self.dtype.big_endian {
                    b.reverse();
                }
                let negative = self.dtype.kind == Kind::Int && b.last().is_some_and(|&x| x & 0x80 != 0);
                let mut buf = [if negative { 0xff } else { 0 }; 16];
                buf[..b.len()].copy_from_slice(&b);
                i128::from_le_bytes(buf)
            })
            .collect())
    }

    pub fn to_strings(&self) -> Result<Vec<String>> {
        if self.dtype.kind != Kind::Unicode {
            return Err(Error::Validation(format!("expected a unicode array, got {}", self.dtype.descr())));
        }
        (0..self.numel())
            .map(|i| {
                let mut out = String::new();
                for c in self.element(i).chunks_exact(4) {
                    let arr = [c[0], c[1], c[2], c[3]];
                    let cp = if self.dtype.big_endian { u32::from_be_bytes(arr) } else { u32::from_le_bytes(arr) };
                    if cp == 0 {
                        break;
                    }
                    out.push(char::from_u32(cp).ok_or_else(|| Error::Format(format!("invalid code point {cp:#x}")))?);
                }
                Ok(out)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!("({})", self.shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")),
        };
        let mut header = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}", self.dtype.descr());
        // Pad so the data starts on a 64-byte boundary; the header ends in a newline.
        let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
        header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
        header.push('\n');
        let mut out = Vec::with_capacity(10 + header.len() + self.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != MAGIC {
            return Err(Error::Format("bad magic: not an NPY file".into()));
        }
        let (major, minor) = (bytes[6], bytes[7]);
        let (header_len, start) = match major {
            1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
            2 | 3 => {
                if bytes.len() < 12 {
                    return Err(Error::Format("truncated NPY header".into()));
                }
                (u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize, 12)
            }
            _ => return Err(Error::Format(format!("unsupported NPY version {major}.{minor}"))),
        };
        let end = start + header_len;
        let header = bytes
            .get(start..end)
            .ok_or_else(|| Error::Format("truncated NPY header".into()))?;
        let header = std::str::from_utf8(header).map_err(|_| Error::Format("NPY header is not UTF-8".into()))?;
        let dict = parse_header(header)?;
        let descr = match dict.get("descr") {
            Some(Literal::Str(s)) => s.clone(),
            Some(_) => return Err(Error::Format("structured dtypes are not supported".into())),
            None => return Err(Error::Format("NPY header lacks `descr`".into())),
        };
        match dict.get("fortran_order") {
            Some(Literal::Bool(false)) => {}
            Some(Literal::Bool(true)) => {
                return Err(Error::UnsupportedLayout("fortran_order=True arrays are not supported".into()))
            }
            _ => return Err(Error::Format("NPY header lacks a boolean `fortran_order`".into())),
        }
        let shape = match dict.get("shape") {
            Some(Literal::Tuple(t)) => t.clone(),
            _ => return Err(Error::Format("NPY header lacks a `shape` tuple".into())),
        };
        let dtype = Dtype::parse(&descr)?;
        let numel: usize = shape.iter().product();
        let need = numel * dtype.size;
        let data = &bytes[end..];
        if data.len() < need {
            return Err(Error::Format(format!("NPY data truncated: need {need} bytes, have {}", data.len())));
        }
        Self::new(dtype, shape, data[..need].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
    Other,
}

/// Parses the Python dict literal of an NPY header.
fn parse_header(s: &str) -> Result<BTreeMap<String, Literal>> {
    let err = |m: &str| Error::Format(format!("malformed NPY header ({m}): {}", s.trim()));
    let mut p = s.trim().chars().peekable();
    let skip_ws = |p: &mut std::iter::Peekable<std::str::Chars<'_>>| {
        while p.peek().is_some_and(|c| c.is_whitespace()) {
            p.next();
        }
    };
    let read_str = |p: &mut std::iter::Peekable<std::str::Chars<'_>>| -> Option<String> {
        let q = p.next()?;
        if q != '\'' && q != '"' {
            return None;
        }
        let mut out = String::new();
        loop {
            let c = p.next()?;
            if c == q {
                return Some(out);
            }
            out.push(c);
        }
    };
    if p.next() != Some('{') {
        return Err(err("expected `{`"));
    }
    let mut map = BTreeMap::new();
    loop {
        skip_ws(&mut p);
        if p.peek() == Some(&'}') {
            break;
        }
        let key = read_str(&mut p).ok_or_else(|| err("expected a quoted key"))?;
        skip_ws(&mut p);
        if p.next() != Some(':') {
            return Err(err("expected `:`"));
        }
        skip_ws(&mut p);
        let value = match p.peek() {
            Some('\'') | Some('"') => Literal::Str(read_str(&mut p).ok_or_else(|| err("unterminated string"))?),
            Some('(') => {
                p.next();
                let mut body = String::new();
                loop {
                    match p.next() {
                        Some(')') => break,
                        Some(c) => body.push(c),
                        None => return Err(err("unterminated tuple")),
                    }
                }
                let dims = body
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| t.trim_end_matches('L').parse::<usize>().map_err(|_| err("bad shape entry")))
                    .collect::<Result<Vec<_>>>()?;
                Literal::Tuple(dims)
            }
            _ => {
                let mut word = String::new();
                let mut depth = 0i32;
                while let Some(&c) = p.peek() {
                    if depth == 0 && (c == ',' || c == '}') {
                        break;
                    }
                    depth += match c {
                        '[' | '(' => 1,
                        ']' | ')' => -1,
                        _ => 0,
                    };
                    word.push(c);
                    p.next();
                }
                match word.trim() {
                    "True" => Literal::Bool(true),
                    "False" => Literal::Bool(false),
                    _ => Literal::Other,
                }
            }
        };
        map.insert(key, value);
        skip_ws(&mut p);
        match p.next() {
            Some(',') => continue,
            Some('}') => break,
            _ => return Err(err("expected `,` or `}`")),
        }
    }
    Ok(map)
}

/// Reads every `*.npy` member of an NPZ archive, keyed by name without the
/// extension.
pub fn read_npz<R: Read + Seek>(reader: R) -> Result<BTreeMap<String, NpyArray>> {
    let mut zip = zip::ZipArchive::new(reader)?;
    let mut out = BTreeMap::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i)?;
        let name = entry.name().to_string();
        let Some(key) = name.strip_suffix(".npy") else {
            continue;
        };
        let mut bytes = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut bytes)?;
        let arr = NpyArray::parse(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{name}: {m}")),
            Error::UnsupportedLayout(m) => Error::UnsupportedLayout(format!("{name}: {m}")),
            other => other,
        })?;
        out.insert(key.to_string(), arr);
    }
    Ok(out)
}

/// Writes arrays as deflate-compressed `<key>.npy` members.
pub fn write_npz<W: Write + Seek>(writer: W, arrays: &[(String, NpyArray)]) -> Result<()> {
    let mut zip = zip::ZipWriter::new(writer);
    let options = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Deflated);
    for (key, arr) in arrays {
        zip.start_file(format!("{key}.npy"), options)?;
        zip.write_all(&arr.to_bytes())?;
    }
    zip.finish()?;
    Ok(())
}
