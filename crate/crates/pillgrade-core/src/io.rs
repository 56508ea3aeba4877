//! Cloud readers and writers: ASCII XYZ (one "x y z" triple per line) and
//! PLY with float32 vertex coordinates, both ASCII and binary little
//! endian. Binary PLY round-trips bit-exactly through read-then-write.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Reads a cloud from disk, dispatching on the file extension; anything
/// that is not `.ply` is treated as ASCII XYZ.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        _ => read_xyz(path),
    }
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let reader = BufReader::new(file);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in coord.iter_mut() {
            let tok = it.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "expected three coordinates".into(),
            })?;
            *c = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("bad coordinate {tok:?}"),
            })?;
        }
        points.push(coord);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "file contains no points".into(),
        });
    }
    Ok(PointCloud::new(points).with_id(file_id(path)))
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropKind {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl PropKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => PropKind::F32,
            "double" | "float64" => PropKind::F64,
            "char" | "int8" => PropKind::I8,
            "uchar" | "uint8" => PropKind::U8,
            "short" | "int16" => PropKind::I16,
            "ushort" | "uint16" => PropKind::U16,
            "int" | "int32" => PropKind::I32,
            "uint" | "uint32" => PropKind::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PropKind::I8 | PropKind::U8 => 1,
            PropKind::I16 | PropKind::U16 => 2,
            PropKind::F32 | PropKind::I32 | PropKind::U32 => 4,
            PropKind::F64 => 8,
        }
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut reader = BufReader::new(file);

    let mut format = None;
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<(String, PropKind)> = Vec::new();
    let mut in_vertex_element = false;
    let mut lineno = 0usize;

    let header_err = |lineno: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message,
    };

    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(header_err(lineno, "unexpected end of header".into()));
        }
        lineno += 1;
        let line = line.trim_end();
        if lineno == 1 {
            if line.trim() != "ply" {
                return Err(header_err(lineno, "missing ply magic".into()));
            }
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("comment") | None => {}
            Some("format") => {
                format = match it.next() {
                    Some("ascii") => Some(PlyFormat::Ascii),
                    Some("binary_little_endian") => Some(PlyFormat::BinaryLittleEndian),
                    other => {
                        return Err(header_err(
                            lineno,
                            format!("unsupported format {other:?}"),
                        ))
                    }
                };
            }
            Some("element") => {
                let name = it.next().unwrap_or("");
                if name == "vertex" {
                    let count = it
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| header_err(lineno, "bad vertex count".into()))?;
                    vertex_count = Some(count);
                    in_vertex_element = true;
                } else {
                    if vertex_count.is_none() {
                        return Err(header_err(
                            lineno,
                            "vertex must be the first element".into(),
                        ));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let kind_tok = it.next().unwrap_or("");
                    if kind_tok == "list" {
                        return Err(header_err(
                            lineno,
                            "list properties unsupported in vertex element".into(),
                        ));
                    }
                    let kind = PropKind::parse(kind_tok)
                        .ok_or_else(|| header_err(lineno, format!("bad type {kind_tok:?}")))?;
                    let name = it.next().unwrap_or("").to_string();
                    props.push((name, kind));
                }
            }
            Some("end_header") => break,
            Some(_) => {}
        }
    }

    let format = format.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message: "missing format line".into(),
    })?;
    let vertex_count = vertex_count.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message: "missing vertex element".into(),
    })?;
    let axis = |name: &str| props.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (axis("x"), axis("y"), axis("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: "vertex element lacks x/y/z properties".into(),
            })
        }
    };

    let mut points = Vec::with_capacity(vertex_count);
    match format {
        PlyFormat::Ascii => {
            let mut read = 0;
            while read < vertex_count {
                let mut line = String::new();
                if reader.read_line(&mut line)? == 0 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + read + 1,
                        message: "truncated vertex data".into(),
                    });
                }
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let toks: Vec<&str> = trimmed.split_whitespace().collect();
                if toks.len() < props.len() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + read + 1,
                        message: "short vertex row".into(),
                    });
                }
                // parse at the declared property precision so float32
                // files round-trip exactly
                let get = |i: usize| -> Result<f64> {
                    let err = || Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + read + 1,
                        message: format!("bad value {:?}", toks[i]),
                    };
                    match props[i].1 {
                        PropKind::F64 => toks[i].parse::<f64>().map_err(|_| err()),
                        _ => toks[i].parse::<f32>().map(f64::from).map_err(|_| err()),
                    }
                };
                points.push([get(xi)?, get(yi)?, get(zi)?]);
                read += 1;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let row_size: usize = props.iter().map(|(_, k)| k.size()).sum();
            let mut row = vec![0u8; row_size];
            for _ in 0..vertex_count {
                reader.read_exact(&mut row).map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: "truncated binary vertex data".into(),
                })?;
                let mut offset = 0usize;
                let mut coord = [0.0f64; 3];
                for (pi, (_, kind)) in props.iter().enumerate() {
                    let val = match kind {
                        PropKind::F32 => f32::from_le_bytes(
                            row[offset..offset + 4].try_into().unwrap(),
                        ) as f64,
                        PropKind::F64 => {
                            f64::from_le_bytes(row[offset..offset + 8].try_into().unwrap())
                        }
                        PropKind::I8 => row[offset] as i8 as f64,
                        PropKind::U8 => row[offset] as f64,
                        PropKind::I16 => i16::from_le_bytes(
                            row[offset..offset + 2].try_into().unwrap(),
                        ) as f64,
                        PropKind::U16 => u16::from_le_bytes(
                            row[offset..offset + 2].try_into().unwrap(),
                        ) as f64,
                        PropKind::I32 => i32::from_le_bytes(
                            row[offset..offset + 4].try_into().unwrap(),
                        ) as f64,
                        PropKind::U32 => u32::from_le_bytes(
                            row[offset..offset + 4].try_into().unwrap(),
                        ) as f64,
                    };
                    if pi == xi {
                        coord[0] = val;
                    } else if pi == yi {
                        coord[1] = val;
                    } else if pi == zi {
                        coord[2] = val;
                    }
                    offset += kind.size();
                }
                points.push(coord);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: "ply file contains no vertices".into(),
        });
    }
    Ok(PointCloud::new(points).with_id(file_id(path)))
}

/// Writes x/y/z as float32 properties, ASCII or binary little endian.
pub fn write_ply(cloud: &PointCloud, path: &Path, binary: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    if binary {
        writeln!(w, "format binary_little_endian 1.0")?;
    } else {
        writeln!(w, "format ascii 1.0")?;
    }
    writeln!(w, "element vertex {}", cloud.points.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for p in &cloud.points {
        let xyz = [p[0] as f32, p[1] as f32, p[2] as f32];
        if binary {
            for c in xyz {
                w.write_all(&c.to_le_bytes())?;
            }
        } else {
            writeln!(w, "{} {} {}", xyz[0], xyz[1], xyz[2])?;
        }
    }
    Ok(())
}
