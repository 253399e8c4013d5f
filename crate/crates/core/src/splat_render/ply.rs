//! Binary little-endian PLY in the layout used by common 3DGS tools:
//! `x y z nx ny nz f_dc_0..2 opacity scale_0..2 rot_0..3`.
//!
//! Readers accept any property order and skip unknown scalar properties
//! (for example `f_rest_*`), so files from other tools load as long as the
//! required fields are present.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::cloud::GaussianCloud;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed ply header: {0}")]
    Header(String),
    #[error("unsupported ply feature: {0}")]
    Unsupported(String),
    #[error("missing ply property `{0}`")]
    MissingProperty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const WRITTEN: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

pub fn write_ply<W: Write>(cloud: &GaussianCloud<f32>, mut out: W) -> Result<(), PlyError> {
    cloud.validate().map_err(|e| PlyError::Header(e.to_string()))?;
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for name in WRITTEN {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(cloud.len() * WRITTEN.len() * 4);
    for i in 0..cloud.len() {
        let row = cloud.positions[i]
            .iter()
            .chain(&[0.0f32; 3])
            .chain(&cloud.color_dc[i])
            .chain(std::iter::once(&cloud.opacity_logits[i]))
            .chain(&cloud.log_scales[i])
            .chain(&cloud.rotations[i]);
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

#[derive(Clone, Copy)]
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
    fn parse(name: &str) -> Option<Scalar> {
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

    fn read(self, b: &[u8]) -> f32 {
        match self {
            Scalar::I8 => b[0] as i8 as f32,
            Scalar::U8 => b[0] as f32,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f32,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f32,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            Scalar::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]) as f32,
        }
    }
}

pub fn read_ply<R: Read>(input: R) -> Result<GaussianCloud<f32>, PlyError> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<R>| -> Result<String, PlyError> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(PlyError::Header("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };

    if next_line(&mut reader)? != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut reader)?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(PlyError::Unsupported(format!("format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| PlyError::Header(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", name, _] => return Err(PlyError::Unsupported(format!("element {name}"))),
            ["property", "list", ..] => return Err(PlyError::Unsupported("list properties".into())),
            ["property", ty, name] if in_vertex => {
                let scalar = Scalar::parse(ty).ok_or_else(|| PlyError::Unsupported(format!("property type {ty}")))?;
                props.push((name.to_string(), scalar));
            }
            _ => return Err(PlyError::Header(format!("unexpected line `{l}`"))),
        }
    }
    let count = count.ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    let find = |name: &'static str| -> Result<usize, PlyError> {
        props.iter().position(|(n, _)| n == name).ok_or(PlyError::MissingProperty(name))
    };
    let required: [&'static str; 14] = [
        "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1",
        "f_dc_2", "opacity",
    ];
    let slots = required.map(find);
    let mut idx = [0usize; 14];
    for (k, slot) in slots.into_iter().enumerate() {
        idx[k] = slot?;
    }

    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, s)| {
            let o = *acc;
            *acc += s.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let mut body = vec![0u8; stride * count];
    reader.read_exact(&mut body)?;

    let mut cloud = GaussianCloud::<f32>::new();
    for row in body.chunks_exact(stride) {
        let v = |k: usize| {
            let p = idx[k];
            props[p].1.read(&row[offsets[p]..])
        };
        cloud.positions.push([v(0), v(1), v(2)]);
        cloud.log_scales.push([v(3), v(4), v(5)]);
        cloud.rotations.push([v(6), v(7), v(8), v(9)]);
        cloud.color_dc.push([v(10), v(11), v(12)]);
        cloud.opacity_logits.push(v(13));
    }
    Ok(cloud)
}

pub fn save_ply(cloud: &GaussianCloud<f32>, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let mut bytes = Vec::new();
    write_ply(cloud, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud<f32>, PlyError> {
    read_ply(fs::File::open(path)?)
}
