//! File formats: PNG images, PFM depth maps, PLY clouds and meshes, and the
//! dataset's `cameras.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{Mat3, Vec3};
use crate::mesh::TriangleMesh;
use crate::scalar::Real;
use crate::splat::Camera;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Writes an RGB image, clamping to [0,1] and rounding to 8 bits.
pub fn write_png<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    if img.channels != 3 {
        return format_err(format!("PNG export needs 3 channels, got {}", img.channels));
    }
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn read_png<T: Real>(path: &Path) -> Result<Image<T>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| T::of(b as f64 / 255.0)).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn write_pfm<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    if img.channels != 1 {
        return format_err("PFM export needs a single channel");
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            w.write_all(&img.get(x, y, 0).f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm<T: Real>(path: &Path) -> Result<Image<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut header = Vec::new();
    while header.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return format_err("truncated PFM header");
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return format_err(format!("bad PFM magic {m:?}")),
    };
    let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad PFM header field {s:?}")));
    let (width, height, scale) = (parse(&header[1])? as usize, parse(&header[2])? as usize, parse(&header[3])?);
    let mut buf = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut buf)?;
    let mut img = Image::new(width, height, channels);
    for (k, chunk) in buf.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (c, p) = (k % channels, k / channels);
        let (x, y) = (p % width, height - 1 - p / width);
        img.set(x, y, c, T::of(v as f64));
    }
    Ok(img)
}

/// A point set with optional per-point colors in [0,1] and normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3<f64>>,
    pub colors: Option<Vec<Vec3<f64>>>,
    pub normals: Option<Vec<Vec3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3<f64>>) -> Self {
        Self {
            points,
            colors: None,
            normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Binary little-endian PLY: float32 positions, optional float32 normals and
/// uchar colors.
pub fn write_ply_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len())?;
    w.write_all(b"property float x\nproperty float y\nproperty float z\n")?;
    if cloud.normals.is_some() {
        w.write_all(b"property float nx\nproperty float ny\nproperty float nz\n")?;
    }
    if cloud.colors.is_some() {
        w.write_all(b"property uchar red\nproperty uchar green\nproperty uchar blue\n")?;
    }
    w.write_all(b"end_header\n")?;
    for i in 0..cloud.len() {
        for v in cloud.points[i].to_array() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        if let Some(n) = &cloud.normals {
            for v in n[i].to_array() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        if let Some(c) = &cloud.colors {
            for v in c[i].to_array() {
                w.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Binary PLY mesh: float32 positions and normals, `uchar`-counted `uint`
/// vertex index lists.
pub fn write_ply_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", mesh.vertices.len())?;
    w.write_all(b"property float x\nproperty float y\nproperty float z\n")?;
    w.write_all(b"property float nx\nproperty float ny\nproperty float nz\n")?;
    write!(w, "element face {}\nproperty list uchar uint vertex_indices\nend_header\n", mesh.triangles.len())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        let n = mesh.normals.get(i).copied().unwrap_or_else(Vec3::zero);
        for c in v.to_array().into_iter().chain(n.to_array()) {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for i in t {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return format_err(format!("unknown PLY type {s:?}")),
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

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug)]
struct PlyProperty {
    name: String,
    ty: PlyType,
    list_count: Option<PlyType>,
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
    scalars: Vec<Vec<f64>>,
    lists: Vec<Vec<Vec<f64>>>,
}

impl PlyElement {
    fn column(&self, name: &str) -> Option<&Vec<f64>> {
        let scalar_names = self.props.iter().filter(|p| p.list_count.is_none());
        scalar_names.zip(&self.scalars).find(|(p, _)| p.name == name).map(|(_, c)| c)
    }
}

fn read_ply(path: &Path) -> Result<Vec<PlyElement>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "ply" {
        return format_err(format!("{} is not a PLY file", path.display()));
    }
    let mut ascii = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return format_err("PLY header has no end_header");
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => ascii = true,
            ["format", "binary_little_endian", _] => ascii = false,
            ["format", f, _] => return format_err(format!("unsupported PLY format {f}")),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::Format(format!("bad element count {count:?}")))?,
                props: Vec::new(),
                scalars: Vec::new(),
                lists: Vec::new(),
            }),
            ["property", "list", ct, ty, name] => {
                let e = elements.last_mut().ok_or_else(|| Error::Format("property before element".into()))?;
                e.props.push(PlyProperty {
                    name: name.to_string(),
                    ty: PlyType::parse(ty)?,
                    list_count: Some(PlyType::parse(ct)?),
                });
            }
            ["property", ty, name] => {
                let e = elements.last_mut().ok_or_else(|| Error::Format("property before element".into()))?;
                e.props.push(PlyProperty {
                    name: name.to_string(),
                    ty: PlyType::parse(ty)?,
                    list_count: None,
                });
            }
            _ => {}
        }
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut pos = 0usize;
    let text = if ascii { String::from_utf8_lossy(&body).into_owned() } else { String::new() };
    let mut words = text.split_ascii_whitespace();
    for e in &mut elements {
        let n_scalar = e.props.iter().filter(|p| p.list_count.is_none()).count();
        let n_list = e.props.len() - n_scalar;
        e.scalars = vec![Vec::with_capacity(e.count); n_scalar];
        e.lists = vec![Vec::with_capacity(e.count); n_list];
        for _ in 0..e.count {
            let (mut si, mut li) = (0, 0);
            for p in &e.props {
                let mut next = |ty: PlyType| -> Result<f64> {
                    if ascii {
                        let w = words.next().ok_or_else(|| Error::Format("truncated ASCII PLY body".into()))?;
                        w.parse().map_err(|_| Error::Format(format!("bad PLY value {w:?}")))
                    } else {
                        let s = ty.size();
                        if pos + s > body.len() {
                            return format_err(format!("truncated PLY body at byte {pos}"));
                        }
                        let v = ty.decode(&body[pos..pos + s]);
                        pos += s;
                        Ok(v)
                    }
                };
                match p.list_count {
                    None => {
                        e.scalars[si].push(next(p.ty)?);
                        si += 1;
                    }
                    Some(ct) => {
                        let k = next(ct)? as usize;
                        let mut items = Vec::with_capacity(k);
                        for _ in 0..k {
                            items.push(next(p.ty)?);
                        }
                        e.lists[li].push(items);
                        li += 1;
                    }
                }
            }
        }
    }
    Ok(elements)
}

fn vertex_columns(el: &PlyElement, names: [&str; 3]) -> Option<Vec<Vec3<f64>>> {
    let (a, b, c) = (el.column(names[0])?, el.column(names[1])?, el.column(names[2])?);
    Some((0..el.count).map(|i| Vec3::new(a[i], b[i], c[i])).collect())
}

pub fn read_ply_points(path: &Path) -> Result<PointCloud> {
    let elements = read_ply(path)?;
    let v = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format(format!("{} has no vertex element", path.display())))?;
    let points = vertex_columns(v, ["x", "y", "z"]).ok_or_else(|| Error::Format("vertex element lacks x/y/z".into()))?;
    let normals = vertex_columns(v, ["nx", "ny", "nz"]);
    let colors = vertex_columns(v, ["red", "green", "blue"]).map(|c| {
        let uchar = v.props.iter().any(|p| p.name == "red" && p.ty == PlyType::U8);
        c.into_iter().map(|c| if uchar { c * (1.0 / 255.0) } else { c }).collect()
    });
    Ok(PointCloud { points, colors, normals })
}

pub fn read_ply_mesh(path: &Path) -> Result<TriangleMesh> {
    let elements = read_ply(path)?;
    let v = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format(format!("{} has no vertex element", path.display())))?;
    let vertices = vertex_columns(v, ["x", "y", "z"]).ok_or_else(|| Error::Format("vertex element lacks x/y/z".into()))?;
    let normals = vertex_columns(v, ["nx", "ny", "nz"]).unwrap_or_default();
    let mut triangles = Vec::new();
    if let Some(f) = elements.iter().find(|e| e.name == "face") {
        let list = f.lists.first().ok_or_else(|| Error::Format("face element has no index list".into()))?;
        for poly in list {
            // Fan-triangulate polygons.
            for k in 1..poly.len().saturating_sub(1) {
                let t = [poly[0] as u32, poly[k] as u32, poly[k + 1] as u32];
                if t.iter().any(|&i| i as usize >= vertices.len()) {
                    return format_err(format!("face index out of range in {}", path.display()));
                }
                triangles.push(t);
            }
        }
    }
    Ok(TriangleMesh {
        vertices,
        normals,
        triangles,
    })
}

/// One camera entry of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Image path relative to the dataset root.
    pub image: String,
    /// `"train"` or `"test"`.
    pub split: String,
}

impl CameraRecord {
    pub fn from_camera<T: Real>(cam: &Camera<T>, image: String, split: &str) -> Self {
        let c = cam.cast::<f64>();
        Self {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: c.rotation.m,
            translation: c.translation.to_array(),
            image,
            split: split.to_owned(),
        }
    }

    pub fn camera<T: Real>(&self) -> Result<Camera<T>> {
        let cam = Camera::new(
            self.id,
            [self.fx, self.fy, self.cx, self.cy],
            Mat3 { m: self.rotation },
            Vec3::from_array(self.translation),
            self.width,
            self.height,
        )?;
        Ok(cam.cast())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub cameras: Vec<CameraRecord>,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
