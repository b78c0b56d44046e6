//! Binary little-endian PLY in the reference 3DGS vertex layout.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{sh, GaussianCloud};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("unsupported encoding `{0}`: only binary_little_endian is supported")]
    UnsupportedEncoding(String),
    #[error("unsupported property type `{ty}` for `{name}`")]
    PropertyType { name: String, ty: String },
    #[error("{0} f_rest fields do not correspond to an SH degree in 0..=3")]
    RestCount(usize),
    #[error("rotation of gaussian {0} has zero norm")]
    DegenerateRotation(usize),
    #[error("cloud is invalid: {0}")]
    Invalid(#[from] super::CloudError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }

    fn offset_of(&self, name: &str) -> Option<(usize, ScalarType)> {
        let mut off = 0;
        for (n, t) in &self.properties {
            if n == name {
                return Some((off, *t));
            }
            off += t.size();
        }
        None
    }
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Vec<Element>, PlyError> {
    let mut line = String::new();
    let mut next_line = |reader: &mut R| -> Result<String, PlyError> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(PlyError::Header("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };

    if next_line(reader)? != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let l = next_line(reader)?;
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                let enc = tok.next().unwrap_or_default();
                if enc != "binary_little_endian" {
                    return Err(PlyError::UnsupportedEncoding(enc.to_string()));
                }
                saw_format = true;
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| PlyError::Header(l.clone()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| PlyError::Header(l.clone()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let ty = tok.next().unwrap_or_default();
                let name = tok.next().unwrap_or_default().to_string();
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header("property before element".into()))?;
                let st = ScalarType::parse(ty).ok_or_else(|| PlyError::PropertyType {
                    name: name.clone(),
                    ty: ty.to_string(),
                })?;
                el.properties.push((name, st));
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("end_header") => break,
            Some(other) => return Err(PlyError::Header(format!("unknown keyword `{other}`"))),
        }
    }
    if !saw_format {
        return Err(PlyError::Header("missing format line".into()));
    }
    Ok(elements)
}

/// Parses a cloud from a PLY stream. Unknown vertex properties are skipped.
pub fn read_ply<R: BufRead>(mut reader: R) -> Result<GaussianCloud, PlyError> {
    let elements = read_header(&mut reader)?;
    let mut skip = 0usize;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        skip += el.count * el.stride();
    }
    let vertex = vertex.ok_or_else(|| PlyError::MissingField("element vertex".into()))?;
    io::copy(&mut (&mut reader).take(skip as u64), &mut io::sink())?;

    let field = |name: &str| {
        vertex
            .offset_of(name)
            .ok_or_else(|| PlyError::MissingField(name.to_string()))
    };
    let xyz = ["x", "y", "z"].map(field);
    let dc = ["f_dc_0", "f_dc_1", "f_dc_2"].map(field);
    let scale = ["scale_0", "scale_1", "scale_2"].map(field);
    let rot = ["rot_0", "rot_1", "rot_2", "rot_3"].map(field);
    let opacity = field("opacity")?;
    let [xyz, dc, scale] = [xyz, dc, scale].map(|a| a.into_iter().collect::<Result<Vec<_>, _>>());
    let (xyz, dc, scale) = (xyz?, dc?, scale?);
    let rot = rot.into_iter().collect::<Result<Vec<_>, _>>()?;

    let rest_total = (0..)
        .take_while(|i| vertex.offset_of(&format!("f_rest_{i}")).is_some())
        .count();
    if rest_total % 3 != 0 {
        return Err(PlyError::RestCount(rest_total));
    }
    let sh_degree = sh::degree_from_rest(rest_total / 3).ok_or(PlyError::RestCount(rest_total))?;
    let rest: Vec<_> = (0..rest_total)
        .map(|i| vertex.offset_of(&format!("f_rest_{i}")).unwrap())
        .collect();

    let n = vertex.count;
    let stride = vertex.stride();
    let mut cloud = GaussianCloud::empty(sh_degree);
    cloud.positions.reserve(n);
    cloud.sh_rest.reserve(n * rest_total);
    let mut row = vec![0u8; stride];
    let get = |row: &[u8], (off, ty): (usize, ScalarType)| ty.read(&row[off..]);
    for i in 0..n {
        reader.read_exact(&mut row)?;
        cloud.positions.push([0, 1, 2].map(|k| get(&row, xyz[k])));
        cloud.sh_dc.push([0, 1, 2].map(|k| get(&row, dc[k])));
        cloud.log_scales.push([0, 1, 2].map(|k| get(&row, scale[k])));
        cloud.opacity_logits.push(get(&row, opacity));
        let q = [0, 1, 2, 3].map(|k| get(&row, rot[k]));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(PlyError::DegenerateRotation(i));
        }
        cloud.rotations.push(q.map(|v| v / norm));
        cloud.sh_rest.extend(rest.iter().map(|&f| get(&row, f)));
    }
    cloud.validate()?;
    Ok(cloud)
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud, PlyError> {
    read_ply(BufReader::new(File::open(path)?))
}

fn field_names(sh_degree: u8) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * sh::rest_per_channel(sh_degree)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend(["scale_0", "scale_1", "scale_2"].map(String::from));
    names.extend(["rot_0", "rot_1", "rot_2", "rot_3"].map(String::from));
    names
}

/// Writes the canonical layout. Values go out verbatim as `f32`.
pub fn write_ply<W: Write>(cloud: &GaussianCloud, mut w: W) -> Result<(), PlyError> {
    cloud.validate()?;
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in field_names(cloud.sh_degree) {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    let mut put = |v: f64| w.write_all(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        cloud.positions[i].iter().try_for_each(|&v| put(v))?;
        cloud.sh_dc[i].iter().try_for_each(|&v| put(v))?;
        cloud.rest_row(i).iter().try_for_each(|&v| put(v))?;
        put(cloud.opacity_logits[i])?;
        cloud.log_scales[i].iter().try_for_each(|&v| put(v))?;
        cloud.rotations[i].iter().try_for_each(|&v| put(v))?;
    }
    Ok(())
}

pub fn save_ply(cloud: &GaussianCloud, path: &Path) -> Result<(), PlyError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(cloud, &mut w)?;
    w.flush()?;
    Ok(())
}
