//! Point clouds from ASCII or binary little-endian PLY files.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Per-point RGB in `[0, 1]` when the file has color properties.
    pub colors: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }

    /// Scale that maps the type's color range onto `[0, 1]`.
    fn color_scale(self) -> f64 {
        match self {
            Scalar::U8 => 1.0 / 255.0,
            Scalar::U16 => 1.0 / 65535.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    has_list: bool,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut first = true;
    loop {
        let Some(len) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse_error(offset, "header is missing end_header"));
        };
        let line = std::str::from_utf8(&bytes[offset..offset + len])
            .map_err(|_| parse_error(offset, "header is not valid UTF-8"))?
            .trim_end_matches('\r');
        let line_start = offset;
        offset += len + 1;
        let mut tok = line.split_whitespace();
        let Some(kw) = tok.next() else {
            continue;
        };
        if first {
            if kw != "ply" {
                return Err(parse_error(line_start, "missing 'ply' magic"));
            }
            first = false;
            continue;
        }
        match kw {
            "format" => {
                format = Some(match tok.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some(f) => return Err(parse_error(line_start, format!("unsupported format '{f}'"))),
                    None => return Err(parse_error(line_start, "format line without a format")),
                });
            }
            "comment" | "obj_info" => {}
            "element" => {
                let name = tok.next().ok_or_else(|| parse_error(line_start, "element without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_error(line_start, "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_error(line_start, "property before any element"))?;
                let ty = tok.next().ok_or_else(|| parse_error(line_start, "property without a type"))?;
                if ty == "list" {
                    el.has_list = true;
                    continue;
                }
                let scalar =
                    Scalar::parse(ty).ok_or_else(|| parse_error(line_start, format!("unknown property type '{ty}'")))?;
                let name = tok.next().ok_or_else(|| parse_error(line_start, "property without a name"))?;
                el.props.push((name.to_string(), scalar));
            }
            "end_header" => break,
            other => return Err(parse_error(line_start, format!("unexpected header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| parse_error(0, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
    })
}

/// Parses PLY bytes. Rows with non-finite coordinates are dropped with a
/// warning.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_error(header.body_offset, "no vertex element"))?;
    let vertex = &header.elements[vi];
    if vertex.has_list {
        return Err(parse_error(header.body_offset, "list properties on vertices are not supported"));
    }
    let find = |n: &str| vertex.props.iter().position(|(p, _)| p == n);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(parse_error(header.body_offset, "vertex element lacks x/y/z properties"));
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };

    let rows: Vec<Vec<f64>> = match header.format {
        Format::Ascii => {
            let text = std::str::from_utf8(&bytes[header.body_offset..])
                .map_err(|e| parse_error(header.body_offset + e.valid_up_to(), "body is not valid UTF-8"))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for el in &header.elements[..vi] {
                for _ in 0..el.count {
                    lines.next();
                }
            }
            let mut rows = Vec::with_capacity(vertex.count);
            for line in lines.take(vertex.count) {
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        let off = line.as_ptr() as usize - text.as_ptr() as usize + header.body_offset;
                        parse_error(off, format!("malformed vertex row '{line}'"))
                    })?;
                if vals.len() < vertex.props.len() {
                    let off = line.as_ptr() as usize - text.as_ptr() as usize + header.body_offset;
                    return Err(parse_error(off, format!("vertex row has {} values, expected {}", vals.len(), vertex.props.len())));
                }
                rows.push(vals);
            }
            rows
        }
        Format::BinaryLe => {
            let mut offset = header.body_offset;
            for el in &header.elements[..vi] {
                if el.has_list {
                    return Err(parse_error(offset, format!("cannot skip list element '{}' before vertices", el.name)));
                }
                offset += el.count * el.props.iter().map(|(_, s)| s.size()).sum::<usize>();
            }
            let stride: usize = vertex.props.iter().map(|(_, s)| s.size()).sum();
            let available = bytes.len().saturating_sub(offset) / stride.max(1);
            let n = available.min(vertex.count);
            let mut rows = Vec::with_capacity(n);
            for r in 0..n {
                let mut at = offset + r * stride;
                let mut vals = Vec::with_capacity(vertex.props.len());
                for (_, s) in &vertex.props {
                    vals.push(s.read_le(&bytes[at..at + s.size()]));
                    at += s.size();
                }
                rows.push(vals);
            }
            rows
        }
    };
    if rows.len() < vertex.count {
        return Err(Error::Truncated {
            what: "vertex element".into(),
            expected: vertex.count as u64,
            actual: rows.len() as u64,
        });
    }

    let mut points = Vec::with_capacity(rows.len());
    let mut colors = rgb.map(|_| Vec::with_capacity(rows.len()));
    let mut dropped = 0usize;
    for row in &rows {
        let p = [row[ix], row[iy], row[iz]];
        if p.iter().any(|v| !v.is_finite()) {
            dropped += 1;
            continue;
        }
        points.push(p);
        if let (Some(c), Some(idx)) = (colors.as_mut(), rgb) {
            c.push(idx.map(|i| row[i] * vertex.props[i].1.color_scale()));
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} point(s) with non-finite coordinates");
    }
    Ok(PointCloud { points, colors })
}

pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Writes `float x/y/z` and, when present, `uchar red/green/blue`.
pub fn write_ply<W: Write>(mut w: W, cloud: &PointCloud, binary: bool) -> std::io::Result<()> {
    let format = if binary { "binary_little_endian" } else { "ascii" };
    writeln!(w, "ply\nformat {format} 1.0\nelement vertex {}", cloud.points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if cloud.colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    let to_u8 = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in cloud.points.iter().enumerate() {
        let c = cloud.colors.as_ref().map(|c| c[i].map(to_u8));
        if binary {
            for v in p {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            if let Some(c) = c {
                w.write_all(&c)?;
            }
        } else {
            write!(w, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
            if let Some(c) = c {
                write!(w, " {} {} {}", c[0], c[1], c[2])?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn save_pointcloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_ply(&mut buf, cloud, true).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
