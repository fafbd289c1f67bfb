//! PLY point clouds: ASCII and binary little-endian, vertex element only
//! is interpreted; other elements are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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

    fn decode(self, b: &[u8]) -> f64 {
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

#[derive(Clone, Debug)]
enum Property {
    Scalar(Scalar, String),
    List(Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Clone, Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    sensor_origin: Option<Vec3>,
}

/// Everything read from a PLY file.
#[derive(Clone, Debug)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub colors: Option<Vec<[u8; 3]>>,
    /// From a `comment sensor_origin x y z` header line.
    pub sensor_origin: Option<Vec3>,
}

fn read_header<R: BufRead>(r: &mut R, path: &Path) -> Result<Header> {
    let err = |m: String| Error::format(path, m);
    let mut line = String::new();
    let next = |r: &mut R, line: &mut String| -> Result<bool> {
        line.clear();
        Ok(r.read_line(line)? > 0)
    };
    if !next(r, &mut line)? || line.trim_end() != "ply" {
        return Err(err("missing 'ply' magic line".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut sensor_origin = None;
    loop {
        if !next(r, &mut line)? {
            return Err(err("header ends before end_header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(err(format!("unsupported format {other}"))),
                })
            }
            ["comment", "sensor_origin", x, y, z] => {
                let v: Vec<f64> = [x, y, z]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(format!("bad sensor_origin comment: {}", line.trim_end())))?;
                sensor_origin = Some(Vec3::new(v[0], v[1], v[2]));
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| err(format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before any element".into()))?;
                let ct = Scalar::parse(ct).ok_or_else(|| err(format!("unsupported property type {ct}")))?;
                let it = Scalar::parse(it).ok_or_else(|| err(format!("unsupported property type {it}")))?;
                el.props.push(Property::List(ct, it));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before any element".into()))?;
                let ty = Scalar::parse(ty).ok_or_else(|| err(format!("unsupported property type {ty}")))?;
                el.props.push(Property::Scalar(ty, name.to_string()));
            }
            _ => return Err(err(format!("malformed header line: {}", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| err("header has no format line".into()))?;
    Ok(Header {
        format,
        elements,
        sensor_origin,
    })
}

/// Pulls whitespace-separated tokens from an ASCII body.
struct Tokens<R> {
    reader: R,
    line: String,
    pos: usize,
    line_no: usize,
}

impl<R: BufRead> Tokens<R> {
    fn next(&mut self) -> Result<Option<&str>> {
        loop {
            let rest = &self.line[self.pos..];
            let trimmed = rest.trim_start();
            if !trimmed.is_empty() {
                let start = self.pos + (rest.len() - trimmed.len());
                let end = trimmed.find(char::is_whitespace).map_or(self.line.len(), |e| start + e);
                self.pos = end;
                return Ok(Some(&self.line[start..end]));
            }
            self.line.clear();
            self.pos = 0;
            if self.reader.read_line(&mut self.line)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
        }
    }
}

fn read_body<R: BufRead>(mut r: R, header: &Header, path: &Path) -> Result<Vec<Vec<f64>>> {
    let truncated = |el: &str, i: usize, n: usize| Error::format(path, format!("truncated body: element {el} has {i} of {n} entries"));
    let mut vertex = Vec::new();
    match header.format {
        PlyFormat::Ascii => {
            let mut toks = Tokens {
                reader: r,
                line: String::new(),
                pos: 0,
                line_no: 0,
            };
            let num = |toks: &mut Tokens<R>, el: &Element, i: usize| -> Result<f64> {
                let t = toks.next()?.ok_or_else(|| truncated(&el.name, i, el.count))?;
                t.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("bad number {t:?} in element {}", el.name)))
            };
            for el in &header.elements {
                for i in 0..el.count {
                    let mut row = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        match p {
                            Property::Scalar(..) => row.push(num(&mut toks, el, i)?),
                            Property::List(..) => {
                                let n = num(&mut toks, el, i)?;
                                for _ in 0..n as usize {
                                    num(&mut toks, el, i)?;
                                }
                                row.push(f64::NAN);
                            }
                        }
                    }
                    if el.name == "vertex" {
                        vertex.push(row);
                    }
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 8];
            for el in &header.elements {
                for i in 0..el.count {
                    let mut row = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        let mut scalar = |s: Scalar, r: &mut R| -> Result<f64> {
                            r.read_exact(&mut buf[..s.size()]).map_err(|e| match e.kind() {
                                std::io::ErrorKind::UnexpectedEof => truncated(&el.name, i, el.count),
                                _ => e.into(),
                            })?;
                            Ok(s.decode(&buf))
                        };
                        match *p {
                            Property::Scalar(s, _) => row.push(scalar(s, &mut r)?),
                            Property::List(ct, it) => {
                                let n = scalar(ct, &mut r)?;
                                for _ in 0..n as usize {
                                    scalar(it, &mut r)?;
                                }
                                row.push(f64::NAN);
                            }
                        }
                    }
                    if el.name == "vertex" {
                        vertex.push(row);
                    }
                }
            }
        }
    }
    Ok(vertex)
}

pub fn read_ply_from<R: BufRead>(mut reader: R, path: &Path) -> Result<PlyData> {
    let header = read_header(&mut reader, path)?;
    let vertex = header
        .elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::format(path, "no vertex element"))?
        .clone();
    let col = |name: &str| {
        vertex
            .props
            .iter()
            .position(|p| matches!(p, Property::Scalar(_, n) if n == name))
    };
    let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
        return Err(Error::format(path, "vertex element lacks x, y, z"));
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let color_cols = match (col("red"), col("green"), col("blue")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let rows = read_body(reader, &header, path)?;
    let points: Vec<Vec3> = rows.iter().map(|r| Vec3::new(r[ix], r[iy], r[iz])).collect();
    let mut cloud = PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some([a, b, c]) = normal_cols {
        let mut normals = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let n = Vec3::new(r[a], r[b], r[c]);
            let len = n.norm();
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::format(path, format!("vertex {i} has a zero or non-finite normal")));
            }
            normals.push(n / len);
        }
        cloud = cloud.with_normals(normals)?;
    }
    let colors = color_cols.map(|[a, b, c]| {
        rows.iter()
            .map(|r| [r[a].clamp(0.0, 255.0) as u8, r[b].clamp(0.0, 255.0) as u8, r[c].clamp(0.0, 255.0) as u8])
            .collect()
    });
    Ok(PlyData {
        cloud,
        colors,
        sensor_origin: header.sensor_origin,
    })
}

pub fn read_ply_data(path: &Path) -> Result<PlyData> {
    let file = File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    read_ply_from(BufReader::new(file), path)
}

/// Positions, and unit normals when the file has them.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    read_ply_data(path).map(|d| d.cloud)
}

/// Colour channel quantization: `round(255 c)` after clamping to [0, 1].
pub fn quantize_color(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PlyWriteOptions<'a> {
    pub colors: Option<&'a [[f64; 3]]>,
    pub sensor_origin: Option<Vec3>,
}

pub fn write_ply_to<W: Write>(mut out: W, cloud: &PointCloud, format: PlyFormat, opts: PlyWriteOptions<'_>) -> Result<()> {
    if let Some(c) = opts.colors {
        if c.len() != cloud.len() {
            return Err(Error::shape(format!("{} colours for {} points", c.len(), cloud.len())));
        }
    }
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {fmt} 1.0")?;
    if let Some(s) = opts.sensor_origin {
        writeln!(out, "comment sensor_origin {} {} {}", s.x, s.y, s.z)?;
    }
    writeln!(out, "element vertex {}", cloud.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    let normals = cloud.normals();
    if normals.is_some() {
        writeln!(out, "property float nx\nproperty float ny\nproperty float nz")?;
    }
    if opts.colors.is_some() {
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(out, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let mut floats = vec![p.x as f32, p.y as f32, p.z as f32];
        if let Some(n) = normals {
            floats.extend([n[i].x as f32, n[i].y as f32, n[i].z as f32]);
        }
        let rgb = opts.colors.map(|c| quantize_color(c[i]));
        match format {
            PlyFormat::Ascii => {
                let mut fields: Vec<String> = floats.iter().map(|v| v.to_string()).collect();
                if let Some(rgb) = rgb {
                    fields.extend(rgb.iter().map(|v| v.to_string()));
                }
                writeln!(out, "{}", fields.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in floats {
                    out.write_all(&v.to_le_bytes())?;
                }
                if let Some(rgb) = rgb {
                    out.write_all(&rgb)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat, opts: PlyWriteOptions<'_>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::format(path, e.to_string()))?;
    write_ply_to(BufWriter::new(file), cloud, format, opts)
}
