//! Binary little-endian PLY in the standard 3DGS vertex layout.
//!
//! Written files carry exactly `x y z f_dc_0 f_dc_1 f_dc_2 opacity scale_0 scale_1
//! scale_2 rot_0 rot_1 rot_2 rot_3` as float32. The reader accepts any property
//! order and types and skips properties it does not use.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use super::{normalize_quat, GaussianSplat, Scene, Tag};
use crate::error::{Error, Result};

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy, PartialEq)]
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

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::I8 => r.read_i8()? as f64,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I16 => r.read_i16::<LittleEndian>()? as f64,
            Scalar::U16 => r.read_u16::<LittleEndian>()? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
            Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

struct Header {
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_header(r: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| fmt_err(format!("reading header: {e}")))?;
        if n == 0 {
            return Err(fmt_err("unexpected end of file in header"));
        }
        Ok(line.trim_end().to_string())
    };

    if next_line(r)? != "ply" {
        return Err(fmt_err("missing 'ply' magic"));
    }
    let mut format_ok = false;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut element = String::new();
    let mut seen_vertex = false;
    loop {
        let l = next_line(r)?;
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                let f = tok.next().unwrap_or_default();
                if f != "binary_little_endian" {
                    return Err(fmt_err(format!("unsupported format '{f}', expected binary_little_endian")));
                }
                format_ok = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                element = tok.next().unwrap_or_default().to_string();
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| fmt_err(format!("bad element line '{l}'")))?;
                if element == "vertex" {
                    if seen_vertex {
                        return Err(fmt_err("duplicate vertex element"));
                    }
                    seen_vertex = true;
                    vertex_count = Some(count);
                } else if !seen_vertex {
                    return Err(fmt_err(format!("element '{element}' precedes vertex data")));
                }
            }
            Some("property") => {
                let ty = tok.next().unwrap_or_default();
                if element != "vertex" {
                    continue;
                }
                if ty == "list" {
                    return Err(fmt_err("list properties on vertex are not supported"));
                }
                let scalar = Scalar::parse(ty).ok_or_else(|| fmt_err(format!("unknown property type '{ty}'")))?;
                let name = tok.next().ok_or_else(|| fmt_err(format!("bad property line '{l}'")))?;
                properties.push((name.to_string(), scalar));
            }
            Some("end_header") => break,
            Some(other) => return Err(fmt_err(format!("unexpected header keyword '{other}'"))),
        }
    }
    if !format_ok {
        return Err(fmt_err("missing format line"));
    }
    let vertex_count = vertex_count.ok_or_else(|| fmt_err("missing vertex element"))?;
    Ok(Header {
        vertex_count,
        properties,
    })
}

/// Reads a scene from any PLY byte stream. All splats are tagged background.
pub fn read_scene(r: impl Read) -> Result<Scene> {
    let mut r = BufReader::new(r);
    let header = read_header(&mut r)?;

    let mut slots = [usize::MAX; PROPERTIES.len()];
    for (slot, name) in slots.iter_mut().zip(PROPERTIES) {
        *slot = header
            .properties
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| fmt_err(format!("missing vertex property '{name}'")))?;
    }
    if header.properties.iter().any(|(n, _)| n.starts_with("f_rest_")) {
        log::warn!("higher-order SH coefficients (f_rest_*) are ignored; only the DC color is kept");
    }

    let mut values = vec![0.0; header.properties.len()];
    let mut splats = Vec::with_capacity(header.vertex_count);
    for index in 0..header.vertex_count {
        for (v, (_, ty)) in values.iter_mut().zip(&header.properties) {
            *v = ty
                .read(&mut r)
                .map_err(|e| fmt_err(format!("truncated vertex data at vertex {index}: {e}")))?;
        }
        let f = |k: usize| values[slots[k]];
        for (k, name) in PROPERTIES.iter().enumerate() {
            if !f(k).is_finite() {
                return Err(Error::Validation {
                    index,
                    message: format!("property '{name}' is not finite"),
                });
            }
        }
        let rotation = normalize_quat([f(10), f(11), f(12), f(13)]).map_err(|_| Error::Validation {
            index,
            message: "zero-length rotation quaternion".into(),
        })?;
        splats.push(GaussianSplat {
            position: Vector3::new(f(0), f(1), f(2)),
            sh_dc: Vector3::new(f(3), f(4), f(5)),
            opacity_logit: f(6),
            log_scale: Vector3::new(f(7), f(8), f(9)),
            rotation,
        });
    }
    Ok(Scene::from_splats(splats, Tag::Background))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scene(file)
}

/// Serializes splats in the fixed 14-property float32 layout.
pub fn write_scene(scene: &Scene, w: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", scene.len())?;
    for p in PROPERTIES {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    for s in scene.splats() {
        let fields = [
            s.position.x,
            s.position.y,
            s.position.z,
            s.sh_dc.x,
            s.sh_dc.y,
            s.sh_dc.z,
            s.opacity_logit,
            s.log_scale.x,
            s.log_scale.y,
            s.log_scale.z,
            s.rotation[0],
            s.rotation[1],
            s.rotation[2],
            s.rotation[3],
        ];
        for v in fields {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_scene(scene, file).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn header(props: &[&str], n: usize) -> Vec<u8> {
        let mut s = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
        for p in props {
            s.push_str(&format!("property float {p}\n"));
        }
        s.push_str("end_header\n");
        s.into_bytes()
    }

    fn push_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    #[test]
    fn single_vertex_zero_logit_has_half_opacity() {
        let mut buf = header(&PROPERTIES, 1);
        push_f32s(&mut buf, &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, -1.0, -1.0, -1.0, 2.0, 0.0, 0.0, 0.0]);
        let scene = read_scene(buf.as_slice()).unwrap();
        assert_eq!(scene.len(), 1);
        assert_eq!(scene.splats()[0].opacity(), 0.5);
        assert_eq!(scene.splats()[0].rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(scene.tags(), &[Tag::Background]);
    }

    #[test]
    fn empty_vertex_list() {
        let scene = read_scene(header(&PROPERTIES, 0).as_slice()).unwrap();
        assert!(scene.is_empty());
    }

    #[test]
    fn missing_property_is_named() {
        let props: Vec<&str> = PROPERTIES.iter().copied().filter(|p| *p != "scale_1").collect();
        let err = read_scene(header(&props, 0).as_slice()).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("scale_1"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn nan_field_reports_vertex_index() {
        let mut buf = header(&PROPERTIES, 2);
        let good = [0.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        push_f32s(&mut buf, &good);
        let mut bad = good;
        bad[6] = f32::NAN;
        push_f32s(&mut buf, &bad);
        match read_scene(buf.as_slice()).unwrap_err() {
            Error::Validation { index, message } => {
                assert_eq!(index, 1);
                assert!(message.contains("opacity"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn extra_properties_and_types_are_skipped() {
        // Reference 3DGS layout: normals and f_rest interleaved, with a double and a uchar thrown in.
        let mut s = String::from("ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 1\n");
        s += "property float x\nproperty float y\nproperty float z\nproperty float nx\nproperty double ny\nproperty uchar nz\n";
        s += "property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\nproperty float f_rest_0\n";
        s += "property float opacity\nproperty float scale_0\nproperty float scale_1\nproperty float scale_2\n";
        s += "property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n";
        s += "element face 0\nproperty list uchar int vertex_indices\nend_header\n";
        let mut buf = s.into_bytes();
        push_f32s(&mut buf, &[1.0, 2.0, 3.0, 9.0]);
        buf.extend_from_slice(&7.0f64.to_le_bytes());
        buf.push(5);
        push_f32s(&mut buf, &[0.1, 0.2, 0.3, 0.4, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let scene = read_scene(buf.as_slice()).unwrap();
        let sp = &scene.splats()[0];
        assert_eq!(sp.position, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(sp.sh_dc, Vector3::new(0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64));
        assert_eq!(sp.opacity_logit, 1.5);
        assert_eq!(sp.rotation, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_ascii_format() {
        let s = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_scene(&s[..]), Err(Error::Format(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let scene = Scene::new();
        let err = save_scene(&scene, Path::new("/nonexistent-dir/x/y.ply")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn random_stored_splat(rng: &mut impl Rng) -> GaussianSplat {
        let mut f = |lo: f32, hi: f32| rng.random_range(lo..hi) as f64;
        let q = [f(-1.0, 1.0), f(-1.0, 1.0), f(-1.0, 1.0), f(-1.0, 1.0)];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        // Stored quaternions are f32 values already within the normalization tolerance.
        let q = q.map(|v| (v / n) as f32 as f64);
        GaussianSplat {
            position: Vector3::new(f(-50.0, 50.0), f(-50.0, 50.0), f(-50.0, 50.0)),
            rotation: q,
            log_scale: Vector3::new(f(-8.0, 2.0), f(-8.0, 2.0), f(-8.0, 2.0)),
            opacity_logit: f(-10.0, 10.0),
            sh_dc: Vector3::new(f(-2.0, 2.0), f(-2.0, 2.0), f(-2.0, 2.0)),
        }
    }

    #[test]
    fn round_trip_is_lossless_for_1000_random_splats() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let splats: Vec<_> = (0..1000).map(|_| random_stored_splat(&mut rng)).collect();
        let scene = Scene::from_splats(splats, Tag::Background);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        save_scene(&scene, &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, scene);
    }

    proptest! {
        #[test]
        fn save_load_reaches_fixed_point(seed in any::<u64>(), n in 0usize..30) {
            // Arbitrary f64 scenes quantize to float32 once, then round-trip exactly.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let splats: Vec<_> = (0..n).map(|_| {
                let mut s = random_stored_splat(&mut rng);
                s.position.x += rng.random_range(0.0..1e-3);
                s
            }).collect();
            let scene = Scene::from_splats(splats, Tag::Background);
            let mut a = Vec::new();
            write_scene(&scene, &mut a).unwrap();
            let once = read_scene(a.as_slice()).unwrap();
            let mut b = Vec::new();
            write_scene(&once, &mut b).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(read_scene(b.as_slice()).unwrap(), once);
        }
    }
}
