//! Binary little-endian PLY scenes.
//!
//! One `vertex` element per Gaussian with float32 properties
//! `x y z opacity scale_0..2 rot_0..3 f_dc_0..2`. Opacity is stored as a
//! logit, scales as logs, rotation as `w x y z`, and `f_dc_*` hold the RGB
//! color directly. The background color rides along in a
//! `comment background r g b` header line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{Gaussian, Scene, Vec3};

pub const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

pub fn encode(scene: &Scene) -> Vec<u8> {
    let mut header = String::new();
    let bg = scene.background;
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "comment background {} {} {}", bg.x, bg.y, bg.z);
    let _ = writeln!(header, "element vertex {}", scene.gaussians.len());
    for p in PROPERTIES {
        let _ = writeln!(header, "property float {p}");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    out.reserve(scene.gaussians.len() * PROPERTIES.len() * 4);
    for g in &scene.gaussians {
        let values = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.opacity_logit,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

    fn read(self, b: &[u8]) -> f64 {
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

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: "ply".into(),
        offset,
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Scene> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| parse_err(start, "unterminated header line"))?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| parse_err(start, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(parse_err(off, "missing 'ply' magic"));
    }

    let mut background = Vec3::zeros();
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut format_ok = false;
    loop {
        let (off, line) = next_line(&mut pos)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                let fmt = words.next().unwrap_or("");
                if fmt != "binary_little_endian" {
                    return Err(parse_err(off, format!("unsupported format '{fmt}'")));
                }
                format_ok = true;
            }
            Some("comment") => {
                if words.next() == Some("background") {
                    let vals: Vec<f64> = words.filter_map(|w| w.parse().ok()).collect();
                    if vals.len() != 3 {
                        return Err(parse_err(off, "background comment needs 3 numbers"));
                    }
                    background = Vec3::new(vals[0], vals[1], vals[2]);
                }
            }
            Some("obj_info") | None => {}
            Some("element") => {
                let name = words.next().unwrap_or("");
                let count: usize = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(off, "element count is not an integer"))?;
                if name == "vertex" {
                    if seen_vertex {
                        return Err(parse_err(off, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                    seen_vertex = true;
                } else {
                    if !seen_vertex {
                        return Err(parse_err(off, format!("element '{name}' precedes vertex")));
                    }
                    in_vertex = false;
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty = words.next().unwrap_or("");
                if ty == "list" {
                    return Err(parse_err(off, "list properties unsupported in vertex element"));
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| parse_err(off, format!("unknown property type '{ty}'")))?;
                let name = words
                    .next()
                    .ok_or_else(|| parse_err(off, "property without a name"))?;
                props.push((name.to_string(), scalar));
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(off, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !format_ok {
        return Err(parse_err(0, "missing format line"));
    }
    let count = vertex_count.ok_or_else(|| parse_err(pos, "no vertex element"))?;

    let mut columns = [0usize; PROPERTIES.len()];
    let mut kinds = [Scalar::F32; PROPERTIES.len()];
    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0usize;
    for (_, ty) in &props {
        offsets.push(stride);
        stride += ty.size();
    }
    for (k, want) in PROPERTIES.iter().enumerate() {
        let idx = props
            .iter()
            .position(|(n, _)| n == want)
            .ok_or_else(|| parse_err(pos, format!("missing vertex property '{want}'")))?;
        columns[k] = offsets[idx];
        kinds[k] = props[idx].1;
    }

    let body = &bytes[pos..];
    let need = count
        .checked_mul(stride)
        .ok_or_else(|| parse_err(pos, "vertex count overflows"))?;
    if body.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated vertex data: need {need} bytes, found {}", body.len()),
        ));
    }

    let mut gaussians = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &body[i * stride..(i + 1) * stride];
        let v: Vec<f64> = (0..PROPERTIES.len())
            .map(|k| kinds[k].read(&rec[columns[k]..]))
            .collect();
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(parse_err(
                pos + i * stride + columns[k],
                format!("non-finite '{}' in vertex {i}", PROPERTIES[k]),
            ));
        }
        gaussians.push(Gaussian {
            position: Vec3::new(v[0], v[1], v[2]),
            opacity_logit: v[3],
            log_scale: Vec3::new(v[4], v[5], v[6]),
            rotation: [v[7], v[8], v[9], v[10]],
            color: Vec3::new(v[11], v[12], v[13]),
        });
    }
    Ok(Scene::new(gaussians, background))
}

pub fn write(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, encode(scene)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Scene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::IDENTITY_QUAT;

    fn sample() -> Scene {
        Scene::new(
            vec![
                Gaussian::new(Vec3::new(0.5, -1.0, 2.0), Vec3::new(0.1, 0.2, 0.3), IDENTITY_QUAT, 0.25, Vec3::new(0.1, 0.5, 0.9)),
                Gaussian::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 1.0, 1.0), [0.5, 0.5, 0.5, 0.5], 0.75, Vec3::new(1.0, 0.0, 0.0)),
            ],
            Vec3::new(0.25, 0.5, 1.0),
        )
    }

    #[test]
    fn round_trip_is_exact_after_f32_storage() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.background, Vec3::new(0.25, 0.5, 1.0));
        assert!((back.gaussians[0].opacity() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        let text = String::from_utf8_lossy(&bytes[..400]);
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\n"));
        assert!(text.contains("element vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float opacity\nproperty float scale_0"));
        let body = bytes.len() - (text.find("end_header\n").unwrap() + "end_header\n".len());
        assert_eq!(body, 2 * 14 * 4);
    }

    #[test]
    fn truncated_body_reports_offset() {
        let bytes = encode(&sample());
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Parse { offset, msg, .. } => {
                assert_eq!(offset, bytes.len() - 3);
                assert!(msg.contains("truncated"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_property_and_ascii_rejected() {
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(decode(ascii), Err(Error::Parse { offset: 4, .. })));
        let partial = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(decode(partial).is_err());
    }

    #[test]
    fn extra_properties_are_skipped() {
        let mut text = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty double nx\n");
        for p in PROPERTIES {
            text.push_str(&format!("property float {p}\n"));
        }
        text.push_str("end_header\n");
        let mut bytes = text.into_bytes();
        bytes.extend_from_slice(&7.0f64.to_le_bytes());
        for k in 0..PROPERTIES.len() {
            bytes.extend_from_slice(&(k as f32 * 0.1).to_le_bytes());
        }
        let scene = decode(&bytes).unwrap();
        assert!((scene.gaussians[0].position.y - 0.1).abs() < 1e-7);
        assert!((scene.gaussians[0].color.z - 1.3).abs() < 1e-6);
    }
}
