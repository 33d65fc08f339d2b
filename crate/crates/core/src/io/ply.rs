//! A small PLY reader and writer for point tables: `ascii` and
//! `binary_little_endian` bodies, scalar vertex properties, and list
//! properties on other elements (skipped on read).

use std::io::BufRead;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
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
    fn parse(s: &str) -> Option<Scalar> {
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

    fn name(self) -> &'static str {
        match self {
            Scalar::I8 => "char",
            Scalar::U8 => "uchar",
            Scalar::I16 => "short",
            Scalar::U16 => "ushort",
            Scalar::I32 => "int",
            Scalar::U32 => "uint",
            Scalar::F32 => "float",
            Scalar::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
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

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Scalar::I8 => out.push(v as i8 as u8),
            Scalar::U8 => out.push(v as u8),
            Scalar::I16 => out.extend((v as i16).to_le_bytes()),
            Scalar::U16 => out.extend((v as u16).to_le_bytes()),
            Scalar::I32 => out.extend((v as i32).to_le_bytes()),
            Scalar::U32 => out.extend((v as u32).to_le_bytes()),
            Scalar::F32 => out.extend((v as f32).to_le_bytes()),
            Scalar::F64 => out.extend(v.to_le_bytes()),
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, PartialEq)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone, PartialEq)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// The vertex table of a PLY file.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexTable {
    pub encoding: Encoding,
    pub comments: Vec<String>,
    pub columns: Vec<(String, Vec<f64>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        path: Default::default(),
        msg: msg.into(),
    }
}

pub fn read(mut r: impl BufRead) -> Result<VertexTable> {
    let mut line = String::new();
    let next_line = |r: &mut dyn BufRead, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(bad("unexpected end of PLY header"));
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing `ply` magic"));
    }
    let mut encoding = None;
    let mut comments = Vec::new();
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next_line(&mut r, &mut line)?;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(Encoding::BinaryLe),
            ["format", other, _] => return Err(bad(format!("unsupported PLY encoding `{other}`"))),
            ["comment", ..] | ["obj_info", ..] => {
                comments.push(line.trim_end().splitn(2, ' ').nth(1).unwrap_or("").to_string())
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, _] => {
                let (Some(c), Some(i)) = (Scalar::parse(c), Scalar::parse(i)) else {
                    return Err(bad(format!("bad list property `{}`", line.trim_end())));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before any element"))?
                    .props
                    .push(Property::List(c, i));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown property type `{ty}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before any element"))?
                    .props
                    .push(Property::Scalar(name.to_string(), ty));
            }
            [] => {}
            _ => return Err(bad(format!("unrecognised header line `{}`", line.trim_end()))),
        }
    }
    let encoding = encoding.ok_or_else(|| bad("missing format line"))?;
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| bad("no vertex element"))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut cursor = Body::new(&body, encoding);
    for e in &elements[..vertex_pos] {
        for _ in 0..e.count {
            for p in &e.props {
                cursor.skip(p)?;
            }
        }
    }
    let v = &elements[vertex_pos];
    if v.props.iter().any(|p| matches!(p, Property::List(..))) {
        return Err(bad("list properties on the vertex element are not supported"));
    }
    let mut columns: Vec<(String, Vec<f64>)> = v
        .props
        .iter()
        .map(|p| match p {
            Property::Scalar(n, _) => (n.clone(), Vec::with_capacity(v.count)),
            Property::List(..) => unreachable!(),
        })
        .collect();
    for _ in 0..v.count {
        for (c, p) in columns.iter_mut().zip(&v.props) {
            let Property::Scalar(_, ty) = p else { unreachable!() };
            c.1.push(cursor.scalar(*ty)?);
        }
    }
    Ok(VertexTable {
        encoding,
        comments,
        columns,
    })
}

struct Body<'a> {
    bytes: &'a [u8],
    pos: usize,
    encoding: Encoding,
}

impl<'a> Body<'a> {
    fn new(bytes: &'a [u8], encoding: Encoding) -> Self {
        Body { bytes, pos: 0, encoding }
    }

    fn token(&mut self) -> Result<&'a str> {
        let b = self.bytes;
        while self.pos < b.len() && b[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < b.len() && !b[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad("PLY body ends early"));
        }
        std::str::from_utf8(&b[start..self.pos]).map_err(|_| bad("non-UTF-8 token in ASCII PLY body"))
    }

    fn scalar(&mut self, ty: Scalar) -> Result<f64> {
        match self.encoding {
            Encoding::Ascii => {
                let t = self.token()?;
                let v: f64 = t.parse().map_err(|_| bad(format!("bad number `{t}`")))?;
                if !ty.is_float() && v.fract() != 0.0 {
                    return Err(bad(format!("`{t}` is not an integer")));
                }
                Ok(v)
            }
            Encoding::BinaryLe => {
                let n = ty.size();
                let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| bad("PLY body ends early"))?;
                self.pos += n;
                Ok(ty.decode(s))
            }
        }
    }

    fn skip(&mut self, p: &Property) -> Result<()> {
        match p {
            Property::Scalar(_, ty) => {
                self.scalar(*ty)?;
            }
            Property::List(c, i) => {
                let n = self.scalar(*c)? as usize;
                for _ in 0..n {
                    self.scalar(*i)?;
                }
            }
        }
        Ok(())
    }
}

/// A column to write: name, storage type and values.
pub struct Column<'a> {
    pub name: &'a str,
    pub ty: Scalar,
    pub values: Vec<f64>,
}

pub fn write(encoding: Encoding, comments: &[String], columns: &[Column]) -> Vec<u8> {
    let n = columns.first().map_or(0, |c| c.values.len());
    let mut out = Vec::new();
    let fmt = match encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLe => "binary_little_endian",
    };
    out.extend(format!("ply\nformat {fmt} 1.0\n").bytes());
    for c in comments {
        out.extend(format!("comment {c}\n").bytes());
    }
    out.extend(format!("element vertex {n}\n").bytes());
    for c in columns {
        out.extend(format!("property {} {}\n", c.ty.name(), c.name).bytes());
    }
    out.extend(b"end_header\n");
    for i in 0..n {
        match encoding {
            Encoding::Ascii => {
                let row: Vec<String> = columns
                    .iter()
                    .map(|c| {
                        if c.ty.is_float() {
                            // Shortest representation that parses back exactly.
                            if c.ty == Scalar::F32 {
                                format!("{}", c.values[i] as f32)
                            } else {
                                format!("{}", c.values[i])
                            }
                        } else {
                            format!("{}", c.values[i] as i64)
                        }
                    })
                    .collect();
                out.extend(row.join(" ").bytes());
                out.push(b'\n');
            }
            Encoding::BinaryLe => {
                for c in columns {
                    c.ty.encode(c.values[i], &mut out);
                }
            }
        }
    }
    out
}
