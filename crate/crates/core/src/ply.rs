//! PLY reader/writer for colored point clouds.
//!
//! Reads ASCII and binary little-endian files. Only the `vertex` element is
//! interpreted; other elements are skipped. Writes `x/y/z` as `float` and
//! `red/green/blue` as `uchar`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cloud::{Point3, PointCloud, Rgb};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
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

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
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
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Line number of the first body line (ASCII only).
    body_line: usize,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::PlyParse {
        line,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line_no += 1;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| perr(line_no, "unexpected end of file inside header"))?;
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| perr(line_no, "header is not valid UTF-8"))?
            .trim_end_matches('\r');
        let toks: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line.trim() != "ply" {
                return Err(perr(1, "missing `ply` magic"));
            }
            continue;
        }
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(perr(line_no, format!("unsupported format `{other}`"))),
                    None => return Err(perr(line_no, "format line without format name")),
                });
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(perr(line_no, "expected `element <name> <count>`"));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad element count `{}`", toks[2])))?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(line_no, "property before any element"))?;
                let ty = |s: &str| Scalar::parse(s).ok_or_else(|| perr(line_no, format!("unknown type `{s}`")));
                let prop = match toks.as_slice() {
                    ["property", "list", c, i, _name] => Property::List {
                        count: ty(c)?,
                        item: ty(i)?,
                    },
                    ["property", t, name] => Property::Scalar {
                        name: name.to_string(),
                        ty: ty(t)?,
                    },
                    _ => return Err(perr(line_no, "malformed property line")),
                };
                el.props.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(perr(line_no, format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| perr(line_no, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body: pos,
        body_line: line_no + 1,
    })
}

/// Column positions of the vertex properties the codec needs.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |n: &str| {
        el.props.iter().position(|p| matches!(p, Property::Scalar { name, .. } if name == n))
    };
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(Error::InvalidCloud("vertex element lacks x/y/z".into())),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => [r, g, b],
        _ => return Ok(VertexLayout { xyz, rgb: None }),
    };
    for &c in &rgb {
        if let Property::Scalar { ty, .. } = el.props[c] {
            if !ty.is_integer() {
                return Err(Error::InvalidCloud("color properties must be integer typed".into()));
            }
        }
    }
    Ok(VertexLayout { xyz, rgb: Some(rgb) })
}

fn to_color(v: f64, line: usize) -> Result<u8> {
    if (0.0..=255.0).contains(&v) {
        Ok(v as u8)
    } else {
        Err(perr(line, format!("color channel {v} outside [0, 255]")))
    }
}

/// Positions, and colors when the vertex element has them.
fn read_vertices(bytes: &[u8]) -> Result<(Vec<Point3>, Option<Vec<Rgb>>)> {
    let header = parse_header(bytes)?;
    let vidx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr(header.body_line - 1, "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vidx])?;
    let body = &bytes[header.body..];
    let mut positions: Vec<Point3> = Vec::new();
    let mut colors: Vec<Rgb> = Vec::new();

    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| perr(header.body_line, "body is not valid UTF-8"))?;
            let mut lines = text
                .lines()
                .enumerate()
                .map(|(i, l)| (header.body_line + i, l))
                .filter(|(_, l)| !l.trim().is_empty());
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    let (ln, line) = lines
                        .next()
                        .ok_or_else(|| perr(header.body_line, format!("truncated `{}` element data", el.name)))?;
                    if ei != vidx {
                        continue;
                    }
                    let vals = parse_ascii_row(el, line, ln)?;
                    positions.push(layout.xyz.map(|c| vals[c]));
                    if let Some(rgb) = layout.rgb {
                        colors.push([to_color(vals[rgb[0]], ln)?, to_color(vals[rgb[1]], ln)?, to_color(vals[rgb[2]], ln)?]);
                    }
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut off = 0usize;
            let eof = || perr(header.body_line, "unexpected end of binary body");
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    let mut vals = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        match *p {
                            Property::Scalar { ty, .. } => {
                                let b = body.get(off..off + ty.size()).ok_or_else(eof)?;
                                vals.push(ty.read_le(b));
                                off += ty.size();
                            }
                            Property::List { count, item } => {
                                let b = body.get(off..off + count.size()).ok_or_else(eof)?;
                                let len = count.read_le(b) as usize;
                                off += count.size() + len * item.size();
                                if off > body.len() {
                                    return Err(eof());
                                }
                                vals.push(f64::NAN);
                            }
                        }
                    }
                    if ei == vidx {
                        positions.push(layout.xyz.map(|c| vals[c]));
                        if let Some(rgb) = layout.rgb {
                            let ln = header.body_line;
                            colors.push([to_color(vals[rgb[0]], ln)?, to_color(vals[rgb[1]], ln)?, to_color(vals[rgb[2]], ln)?]);
                        }
                    }
                }
            }
        }
    }
    Ok((positions, layout.rgb.map(|_| colors)))
}

pub fn read_ply_bytes(bytes: &[u8]) -> Result<PointCloud> {
    match read_vertices(bytes)? {
        (positions, Some(colors)) => PointCloud::new(positions, colors),
        (_, None) => Err(Error::NoAttributes),
    }
}

/// Vertex positions only; color properties are ignored if present.
pub fn read_ply_geometry(bytes: &[u8]) -> Result<Vec<Point3>> {
    let (positions, _) = read_vertices(bytes)?;
    let n = positions.len();
    Ok(PointCloud::new(positions, vec![[0; 3]; n])?.into_parts().0)
}

fn parse_ascii_row(el: &Element, line: &str, ln: usize) -> Result<Vec<f64>> {
    let mut toks = line.split_whitespace();
    let mut next = |what: &str| -> Result<f64> {
        let t = toks
            .next()
            .ok_or_else(|| perr(ln, format!("missing value for `{what}`")))?;
        t.parse::<f64>()
            .map_err(|_| perr(ln, format!("cannot parse `{t}` as a number")))
    };
    let mut vals = Vec::with_capacity(el.props.len());
    for p in &el.props {
        match p {
            // a declared `float` holds exactly what the binary path would read
            Property::Scalar { name, ty: Scalar::F32 } => vals.push(next(name)? as f32 as f64),
            Property::Scalar { name, .. } => vals.push(next(name)?),
            Property::List { .. } => {
                let len = next("list length")? as usize;
                for _ in 0..len {
                    next("list item")?;
                }
                vals.push(f64::NAN);
            }
        }
    }
    Ok(vals)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_ply_bytes(&bytes)
}

pub fn write_ply_bytes(pc: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        pc.len()
    )
    .into_bytes();
    for (p, c) in pc.positions().iter().zip(pc.colors()) {
        match format {
            PlyFormat::Ascii => {
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]
                )
                .unwrap();
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                out.extend_from_slice(c);
            }
        }
    }
    out
}

/// Coordinates are stored at 32-bit float precision.
pub fn save_ply(pc: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_ply_bytes(pc, format)).map_err(|e| Error::io(path, e))
}
