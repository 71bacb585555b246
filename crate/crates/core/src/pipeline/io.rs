//! On-disk formats: PLY maps, TUM trajectories, raw depth and PNG images.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage, Image, Mask};
use crate::model::{FrequencyClass, Gaussian, GaussianMap, MapKind, Pose};

use super::metrics::Stamped;

const PLY_FLOAT_PROPS: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green",
    "blue",
];

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::DatasetFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes a binary little-endian PLY. Rotations are stored w, x, y, z.
pub fn write_ply(map: &GaussianMap, mut out: impl Write) -> Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", map.len()));
    for p in PLY_FLOAT_PROPS {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("property uchar freq_class\nend_header\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(map.len() * (PLY_FLOAT_PROPS.len() * 4 + 1));
    for g in map.iter() {
        let q = g.rotation.quaternion();
        let vals = [
            g.mu.x, g.mu.y, g.mu.z, g.scale.x, g.scale.y, g.scale.z, q.w, q.i, q.j, q.k, g.opacity, g.color.x,
            g.color.y, g.color.z,
        ];
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.push(match g.frequency_class {
            FrequencyClass::High => 0,
            FrequencyClass::Low => 1,
        });
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_ply(map: &GaussianMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_ply(map, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a PLY written by [`write_ply`].
pub fn load_ply(path: &Path, kind: MapKind) -> Result<GaussianMap> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(format_err(path, "missing end_header"));
        }
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", f, ..] if *f != "binary_little_endian" => {
                return Err(format_err(path, format!("unsupported format {f}")))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| format_err(path, "bad vertex count"))?)
            }
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let expected: Vec<(String, String)> = PLY_FLOAT_PROPS
        .iter()
        .map(|p| ("float".to_string(), p.to_string()))
        .chain(std::iter::once(("uchar".to_string(), "freq_class".to_string())))
        .collect();
    if props != expected {
        return Err(format_err(path, "unexpected vertex properties"));
    }
    let n = count.ok_or_else(|| format_err(path, "no vertex element"))?;
    let stride = PLY_FLOAT_PROPS.len() * 4 + 1;
    let mut body = vec![0u8; n * stride];
    r.read_exact(&mut body)
        .map_err(|_| format_err(path, "truncated vertex data"))?;
    let mut map = GaussianMap::new(kind);
    for rec in body.chunks_exact(stride) {
        let f: Vec<f64> = rec[..stride - 1]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        map.push(Gaussian {
            mu: Vector3::new(f[0], f[1], f[2]),
            scale: Vector3::new(f[3], f[4], f[5]),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(f[6], f[7], f[8], f[9])),
            opacity: f[10],
            color: Vector3::new(f[11], f[12], f[13]),
            frequency_class: if rec[stride - 1] == 0 {
                FrequencyClass::High
            } else {
                FrequencyClass::Low
            },
        });
    }
    Ok(map)
}

/// One TUM trajectory line: `timestamp tx ty tz qx qy qz qw`.
pub fn tum_line(s: &Stamped) -> String {
    let t = &s.pose.translation;
    let q = s.pose.rotation.quaternion();
    format!(
        "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        s.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

/// Parses one TUM pose line; `None` for blanks and comments.
pub fn parse_tum_line(line: &str) -> Option<std::result::Result<Stamped, String>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    let v: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    Some(match v {
        Ok(v) if v.len() == 8 => Ok(Stamped {
            timestamp: v[0],
            pose: Pose::new(
                UnitQuaternion::from_quaternion(Quaternion::new(v[7], v[4], v[5], v[6])),
                Vector3::new(v[1], v[2], v[3]),
            ),
        }),
        Ok(v) => Err(format!("expected 8 fields, found {}", v.len())),
        Err(e) => Err(e.to_string()),
    })
}

pub fn write_trajectory(poses: &[Stamped], mut out: impl Write) -> Result<()> {
    writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
    for s in poses {
        writeln!(out, "{}", tum_line(s))?;
    }
    Ok(())
}

pub fn save_trajectory(poses: &[Stamped], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_trajectory(poses, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Vec<Stamped>> {
    let text = fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if let Some(parsed) = parse_tum_line(line) {
            out.push(parsed.map_err(|e| format_err(path, format!("line {}: {e}", no + 1)))?);
        }
    }
    Ok(out)
}

const DEPTH_MAGIC: &[u8; 4] = b"FGSD";

/// Raw depth: magic, u32 height, u32 width, u32 reserved, then row-major f32 meters.
pub fn write_depth(depth: &GrayImage, mut out: impl Write) -> Result<()> {
    out.write_all(DEPTH_MAGIC)?;
    out.write_all(&(depth.height() as u32).to_le_bytes())?;
    out.write_all(&(depth.width() as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(depth.len() * 4);
    for &d in depth.as_slice() {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_depth(depth: &GrayImage, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_depth(depth, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_depth(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    if bytes.len() < 16 || &bytes[..4] != DEPTH_MAGIC {
        return Err(format_err(path, "not an FGSD depth file"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != 16 + 4 * w * h {
        return Err(format_err(path, "depth payload size does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Image::from_vec(w, h, data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (px, c) in buf.pixels_mut().zip(img.as_slice()) {
        *px = image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    buf.save(path)?;
    Ok(())
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.as_slice().iter().map(|&m| if m { 255 } else { 0 }).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Loads an 8-bit or 16-bit colour PNG scaled to [0,1].
pub fn load_color_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?.into_rgb32f();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    Image::from_vec(w as usize, h as usize, data)
}

/// Loads a 16-bit depth PNG as meters given `counts_per_meter`.
pub fn load_depth_png(path: &Path, counts_per_meter: f64) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => other.into_luma16(),
    };
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p[0] as f64 / counts_per_meter).collect();
    Image::from_vec(w as usize, h as usize, data)
}

pub fn save_depth_png(depth: &GrayImage, path: &Path, counts_per_meter: f64) -> Result<()> {
    let raw: Vec<u16> = depth
        .as_slice()
        .iter()
        .map(|&d| (d * counts_per_meter).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}
