//! PLY point clouds and Gaussian checkpoints.
//!
//! Only scalar vertex properties are supported. Files are written as
//! binary little-endian; ASCII and binary little-endian are read.

use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::Path;

use crate::scene::{Gaussian3D, GaussianCloud, Granularity, Vec3};

use super::IoError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// Vertex table: named columns of equal length plus header comments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyTable {
    pub comments: Vec<String>,
    pub properties: Vec<(String, ScalarType)>,
    pub rows: usize,
    columns: BTreeMap<String, Vec<f64>>,
}

impl PlyTable {
    pub fn new(rows: usize) -> Self {
        Self { rows, ..Default::default() }
    }

    pub fn push_column(&mut self, name: &str, ty: ScalarType, values: Vec<f64>) {
        assert_eq!(values.len(), self.rows, "column {name} has the wrong length");
        self.properties.push((name.to_string(), ty));
        self.columns.insert(name.to_string(), values);
    }

    pub fn column(&self, name: &str) -> Result<&[f64], IoError> {
        self.columns
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| IoError::Format(format!("missing vertex property `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
        for c in &self.comments {
            out.push_str(&format!("comment {c}\n"));
        }
        out.push_str(&format!("element vertex {}\n", self.rows));
        for (name, ty) in &self.properties {
            out.push_str(&format!("property {} {name}\n", ty.name()));
        }
        out.push_str("end_header\n");
        let mut bytes = out.into_bytes();
        let cols: Vec<(&Vec<f64>, ScalarType)> =
            self.properties.iter().map(|(n, t)| (&self.columns[n], *t)).collect();
        for r in 0..self.rows {
            for (col, ty) in &cols {
                ty.encode(col[r], &mut bytes);
            }
        }
        bytes
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, IoError> {
        let mut r = std::io::BufReader::new(reader);
        let mut line = String::new();
        let mut next_line = |r: &mut std::io::BufReader<_>| -> Result<String, IoError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(IoError::Format("unexpected end of PLY header".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != "ply" {
            return Err(IoError::Format("missing `ply` magic".into()));
        }
        let mut table = PlyTable::default();
        let mut ascii = false;
        let mut in_vertex = false;
        let mut seen_vertex = false;
        loop {
            let l = next_line(&mut r)?;
            let words: Vec<&str> = l.split_whitespace().collect();
            match words.as_slice() {
                ["end_header"] => break,
                ["format", "ascii", _] => ascii = true,
                ["format", "binary_little_endian", _] => ascii = false,
                ["format", other, _] => return Err(IoError::Format(format!("unsupported PLY format {other}"))),
                ["comment", ..] => table.comments.push(l["comment".len()..].trim().to_string()),
                ["obj_info", ..] => {}
                ["element", "vertex", n] => {
                    if seen_vertex {
                        return Err(IoError::Format("duplicate vertex element".into()));
                    }
                    table.rows = n.parse().map_err(|_| IoError::Format(format!("bad vertex count {n}")))?;
                    in_vertex = true;
                    seen_vertex = true;
                }
                ["element", name, _] => {
                    if !seen_vertex {
                        return Err(IoError::Format(format!("element `{name}` before vertices is not supported")));
                    }
                    in_vertex = false;
                }
                ["property", "list", ..] if in_vertex => {
                    return Err(IoError::Format("list vertex properties are not supported".into()))
                }
                ["property", ty, name] if in_vertex => {
                    let ty = ScalarType::parse(ty).ok_or_else(|| IoError::Format(format!("unknown PLY type {ty}")))?;
                    table.properties.push((name.to_string(), ty));
                }
                ["property", ..] => {}
                _ => return Err(IoError::Format(format!("unrecognized PLY header line `{l}`"))),
            }
        }
        if !seen_vertex {
            return Err(IoError::Format("PLY has no vertex element".into()));
        }
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(table.rows); table.properties.len()];
        if ascii {
            let mut rest = String::new();
            r.read_to_string(&mut rest)?;
            let mut tokens = rest.split_whitespace();
            for _ in 0..table.rows {
                for col in cols.iter_mut() {
                    let tok = tokens.next().ok_or_else(|| IoError::Format("PLY body is truncated".into()))?;
                    col.push(tok.parse().map_err(|_| IoError::Format(format!("bad PLY value `{tok}`")))?);
                }
            }
        } else {
            let stride: usize = table.properties.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; stride * table.rows];
            r.read_exact(&mut buf).map_err(|_| IoError::Format("PLY body is truncated".into()))?;
            for row in buf.chunks_exact(stride.max(1)).take(table.rows) {
                let mut off = 0;
                for (col, (_, ty)) in cols.iter_mut().zip(&table.properties) {
                    col.push(ty.decode(&row[off..]));
                    off += ty.size();
                }
            }
        }
        table.columns = table.properties.iter().map(|(n, _)| n.clone()).zip(cols).collect();
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let f = std::fs::File::open(path).map_err(|e| IoError::at(path, e.into()))?;
        Self::from_reader(f).map_err(|e| IoError::at(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        super::write_atomic(path, &self.to_bytes()).map_err(|e| IoError::at(path, e.into()))
    }
}

/// Colored point, as produced by a stereo initializer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredPoint {
    pub position: Vec3,
    pub color: [u8; 3],
}

pub fn save_points(path: &Path, points: &[ColoredPoint]) -> Result<(), IoError> {
    let mut t = PlyTable::new(points.len());
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        t.push_column(name, ScalarType::F32, points.iter().map(|p| p.position[k]).collect());
    }
    for (k, name) in ["red", "green", "blue"].iter().enumerate() {
        t.push_column(name, ScalarType::U8, points.iter().map(|p| p.color[k] as f64).collect());
    }
    t.save(path)
}

pub fn load_points(path: &Path) -> Result<Vec<ColoredPoint>, IoError> {
    let t = PlyTable::load(path)?;
    let (x, y, z) = (t.column("x")?, t.column("y")?, t.column("z")?);
    let rgb = if t.has("red") {
        Some((t.column("red")?, t.column("green")?, t.column("blue")?))
    } else {
        None
    };
    Ok((0..t.rows)
        .map(|i| ColoredPoint {
            position: Vec3::new(x[i], y[i], z[i]),
            color: rgb
                .map(|(r, g, b)| [r[i], g[i], b[i]].map(|v| v.clamp(0.0, 255.0) as u8))
                .unwrap_or([128; 3]),
        })
        .collect())
}

fn sem_column(gran: Granularity, k: usize) -> String {
    format!("sem_{}_{k}", gran.name())
}

/// Serializes every Gaussian parameter as doubles so a checkpoint reloads
/// bit-exactly.
pub fn cloud_to_table(cloud: &GaussianCloud) -> PlyTable {
    let n = cloud.len();
    let mut t = PlyTable::new(n);
    t.comments.push(format!("semantic_dim {}", cloud.semantic_dim));
    let gs = &cloud.gaussians;
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        t.push_column(name, ScalarType::F64, gs.iter().map(|g| g.mean[k]).collect());
    }
    for k in 0..3 {
        t.push_column(&format!("scale_{k}"), ScalarType::F64, gs.iter().map(|g| g.log_scale[k]).collect());
    }
    for k in 0..4 {
        t.push_column(&format!("rot_{k}"), ScalarType::F64, gs.iter().map(|g| g.rotation[k]).collect());
    }
    t.push_column("opacity", ScalarType::F64, gs.iter().map(|g| g.opacity_logit).collect());
    for (k, name) in ["red", "green", "blue"].iter().enumerate() {
        t.push_column(name, ScalarType::F64, gs.iter().map(|g| g.color[k]).collect());
    }
    for gran in cloud.granularities() {
        for k in 0..cloud.semantic_dim {
            t.push_column(
                &sem_column(gran, k),
                ScalarType::F64,
                gs.iter().map(|g| g.sem_code.get(&gran).map(|c| c[k]).unwrap_or(0.0)).collect(),
            );
        }
    }
    t
}

pub fn cloud_from_table(t: &PlyTable) -> Result<GaussianCloud, IoError> {
    let dim = t
        .comments
        .iter()
        .find_map(|c| c.strip_prefix("semantic_dim ").and_then(|v| v.trim().parse().ok()))
        .ok_or_else(|| IoError::Format("checkpoint lacks a `semantic_dim` comment".into()))?;
    let col = |n: &str| t.column(n);
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let scales = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rots = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let opacity = col("opacity")?;
    let rgb = [col("red")?, col("green")?, col("blue")?];
    let grans: Vec<Granularity> =
        Granularity::ALL.into_iter().filter(|g| t.has(&sem_column(*g, 0))).collect();
    let mut sem: Vec<(Granularity, Vec<&[f64]>)> = Vec::new();
    for g in grans {
        sem.push((g, (0..dim).map(|k| col(&sem_column(g, k))).collect::<Result<_, _>>()?));
    }
    let mut cloud = GaussianCloud::new(dim);
    for i in 0..t.rows {
        cloud.gaussians.push(Gaussian3D {
            mean: Vec3::new(x[i], y[i], z[i]),
            log_scale: Vec3::new(scales[0][i], scales[1][i], scales[2][i]),
            rotation: [rots[0][i], rots[1][i], rots[2][i], rots[3][i]],
            opacity_logit: opacity[i],
            color: Vec3::new(rgb[0][i], rgb[1][i], rgb[2][i]),
            sem_code: sem.iter().map(|(g, cols)| (*g, cols.iter().map(|c| c[i]).collect())).collect(),
        });
    }
    Ok(cloud)
}

pub fn save_cloud(path: &Path, cloud: &GaussianCloud) -> Result<(), IoError> {
    cloud_to_table(cloud).save(path)
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud, IoError> {
    cloud_from_table(&PlyTable::load(path)?).map_err(|e| IoError::at(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_is_readable() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty uchar red\n\
                    element face 0\nproperty list uchar int vertex_indices\nend_header\n1.5 3\n-2 255\n";
        let t = PlyTable::from_reader(text.as_bytes()).unwrap();
        assert_eq!(t.rows, 2);
        assert_eq!(t.column("x").unwrap(), &[1.5, -2.0]);
        assert_eq!(t.column("red").unwrap(), &[3.0, 255.0]);
        assert_eq!(t.comments, vec!["hi".to_string()]);
    }

    #[test]
    fn binary_round_trip() {
        let pts = vec![
            ColoredPoint { position: Vec3::new(0.5, -1.25, 3.0), color: [1, 2, 3] },
            ColoredPoint { position: Vec3::new(7.0, 0.0, -0.125), color: [255, 0, 128] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.ply");
        save_points(&p, &pts).unwrap();
        assert_eq!(load_points(&p).unwrap(), pts);
    }

    #[test]
    fn rejects_garbage() {
        assert!(PlyTable::from_reader(&b"plx\n"[..]).is_err());
        assert!(PlyTable::from_reader(&b"ply\nformat binary_big_endian 1.0\nend_header\n"[..]).is_err());
        let short = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nend_header\n\0\0\0\0";
        assert!(PlyTable::from_reader(&short[..]).is_err());
    }
}
