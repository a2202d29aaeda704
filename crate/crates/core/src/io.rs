//! File codecs: binary PLY point clouds and Gaussian checkpoints, PFM float
//! maps, binary PPM images and camera JSON. Every writer goes through a
//! temporary file in the destination directory and an atomic rename.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh;
use crate::types::{
    norm4, rotation_error, Camera, ConfidenceMap, DepthMap, DepthSemantics, Gaussian,
    GaussianCloud, ImageBuffer, NormalMap, PixelMask,
};

/// Rotations further than this from orthonormal are rejected on load.
pub const ROTATION_REPAIR_TOL: f64 = 1e-6;

/// Writes `bytes` to `path` via a temporary sibling file and a rename, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------- PLY

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
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
struct PlyProperty {
    name: String,
    ty: ScalarType,
    offset: usize,
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
    stride: usize,
    has_list: bool,
}

/// Parsed vertex table of a binary little-endian PLY file.
struct VertexTable<'a> {
    count: usize,
    stride: usize,
    properties: Vec<PlyProperty>,
    body: &'a [u8],
}

impl<'a> VertexTable<'a> {
    fn parse(bytes: &'a [u8]) -> Result<VertexTable<'a>> {
        const END: &[u8] = b"end_header";
        let end = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| Error::MalformedHeader("missing end_header".into()))?;
        let mut body_start = end + END.len();
        match bytes.get(body_start..body_start + 2) {
            Some(b"\r\n") => body_start += 2,
            _ if bytes.get(body_start) == Some(&b'\n') => body_start += 1,
            _ => {
                return Err(Error::MalformedHeader(
                    "end_header not followed by newline".into(),
                ))
            }
        }
        let header = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
        let mut lines = header.lines().map(str::trim);
        if lines.next() != Some("ply") {
            return Err(Error::MalformedHeader("missing ply magic".into()));
        }
        let mut format = None;
        let mut elements: Vec<PlyElement> = Vec::new();
        for line in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.first().copied() {
                None | Some("comment") | Some("obj_info") => {}
                Some("format") => {
                    if tok.len() != 3 {
                        return Err(Error::MalformedHeader(format!("bad format line {line:?}")));
                    }
                    format = Some(tok[1].to_string());
                }
                Some("element") => {
                    if tok.len() != 3 {
                        return Err(Error::MalformedHeader(format!("bad element line {line:?}")));
                    }
                    let count = tok[2].parse().map_err(|_| {
                        Error::MalformedHeader(format!("bad element count {:?}", tok[2]))
                    })?;
                    elements.push(PlyElement {
                        name: tok[1].to_string(),
                        count,
                        properties: Vec::new(),
                        stride: 0,
                        has_list: false,
                    });
                }
                Some("property") => {
                    let el = elements
                        .last_mut()
                        .ok_or_else(|| Error::MalformedHeader("property before element".into()))?;
                    if tok.get(1) == Some(&"list") {
                        if tok.len() != 5 {
                            return Err(Error::MalformedHeader(format!(
                                "bad list property {line:?}"
                            )));
                        }
                        el.has_list = true;
                        continue;
                    }
                    if tok.len() != 3 {
                        return Err(Error::MalformedHeader(format!(
                            "bad property line {line:?}"
                        )));
                    }
                    let ty = ScalarType::parse(tok[1]).ok_or_else(|| {
                        Error::MalformedHeader(format!("unknown property type {:?}", tok[1]))
                    })?;
                    el.properties.push(PlyProperty {
                        name: tok[2].to_string(),
                        ty,
                        offset: el.stride,
                    });
                    el.stride += ty.size();
                }
                Some(other) => {
                    return Err(Error::MalformedHeader(format!(
                        "unexpected header keyword {other:?}"
                    )))
                }
            }
        }
        match format.as_deref() {
            Some("binary_little_endian") => {}
            Some(f) => return Err(Error::UnsupportedFormat(format!("PLY format {f}"))),
            None => return Err(Error::MalformedHeader("missing format line".into())),
        }
        let mut offset = body_start;
        for el in elements {
            if el.name == "vertex" {
                if el.has_list {
                    return Err(Error::UnsupportedFormat(
                        "list property in vertex element".into(),
                    ));
                }
                let size = el
                    .count
                    .checked_mul(el.stride)
                    .ok_or_else(|| Error::MalformedHeader("vertex table too large".into()))?;
                let body = bytes
                    .get(offset..)
                    .filter(|b| b.len() >= size)
                    .ok_or_else(|| {
                        Error::MalformedHeader(format!(
                            "body truncated: need {size} bytes of vertex data"
                        ))
                    })?;
                return Ok(VertexTable {
                    count: el.count,
                    stride: el.stride,
                    properties: el.properties,
                    body: &body[..size],
                });
            }
            if el.has_list {
                return Err(Error::UnsupportedFormat(format!(
                    "list property in element {:?} before vertex",
                    el.name
                )));
            }
            offset += el.count * el.stride;
        }
        Err(Error::MissingProperty("vertex element".into()))
    }

    fn property(&self, name: &str) -> Option<&PlyProperty> {
        self.properties.iter().find(|p| p.name == name)
    }

    fn require(&self, name: &str) -> Result<PlyProperty> {
        self.property(name)
            .cloned()
            .ok_or_else(|| Error::MissingProperty(name.to_string()))
    }

    fn get(&self, row: usize, p: &PlyProperty) -> f64 {
        let at = row * self.stride + p.offset;
        p.ty.read(&self.body[at..at + p.ty.size()])
    }

    fn get_f32(&self, row: usize, p: &PlyProperty) -> f32 {
        let at = row * self.stride + p.offset;
        match p.ty {
            ScalarType::F32 => f32::from_le_bytes(self.body[at..at + 4].try_into().unwrap()),
            _ => self.get(row, p) as f32,
        }
    }
}

fn ply_header(count: usize, properties: &[(&str, &str)]) -> Vec<u8> {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for (ty, name) in properties {
        h.push_str(&format!("property {ty} {name}\n"));
    }
    h.push_str("end_header\n");
    h.into_bytes()
}

/// Colored points with optional per-point confidence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    /// Absent means every point has confidence 1.
    pub confidences: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn confidence(&self, i: usize) -> f32 {
        self.confidences.as_ref().map_or(1.0, |c| c[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != self.positions.len() {
            return Err(Error::LengthMismatch {
                left: self.positions.len(),
                right: self.colors.len(),
            });
        }
        if let Some(c) = &self.confidences {
            if c.len() != self.positions.len() {
                return Err(Error::LengthMismatch {
                    left: self.positions.len(),
                    right: c.len(),
                });
            }
        }
        Ok(())
    }

    /// Points whose confidence is at least `threshold`, as `(position, rgb in [0, 1])`.
    pub fn filtered(&self, threshold: f64) -> Result<Vec<(Vector3<f64>, [f64; 3])>> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::ValueRange(format!(
                "confidence threshold {threshold} outside [0, 1]"
            )));
        }
        self.validate()?;
        let items: Vec<(Vector3<f64>, [f64; 3])> = self
            .positions
            .iter()
            .zip(&self.colors)
            .map(|(p, c)| {
                (
                    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64),
                    c.map(|v| v as f64 / 255.0),
                )
            })
            .collect();
        let conf: Vec<f64> = (0..self.len()).map(|i| self.confidence(i) as f64).collect();
        crate::geometry::filter_points(&items, &conf, threshold)
    }
}

pub fn encode_points(points: &PointCloud) -> Result<Vec<u8>> {
    points.validate()?;
    let mut props = vec![
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
    ];
    if points.confidences.is_some() {
        props.push(("float", "confidence"));
    }
    let mut out = ply_header(points.len(), &props);
    for i in 0..points.len() {
        for v in points.positions[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&points.colors[i]);
        if let Some(c) = &points.confidences {
            out.extend_from_slice(&c[i].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_points(bytes: &[u8]) -> Result<PointCloud> {
    let table = VertexTable::parse(bytes)?;
    let xyz = [
        table.require("x")?,
        table.require("y")?,
        table.require("z")?,
    ];
    let rgb = [
        table.require("red")?,
        table.require("green")?,
        table.require("blue")?,
    ];
    let conf = table.property("confidence").cloned();
    let mut out = PointCloud {
        positions: Vec::with_capacity(table.count),
        colors: Vec::with_capacity(table.count),
        confidences: conf.as_ref().map(|_| Vec::with_capacity(table.count)),
    };
    for row in 0..table.count {
        out.positions
            .push(xyz.each_ref().map(|p| table.get_f32(row, p)));
        out.colors.push(
            rgb.each_ref()
                .map(|p| table.get(row, p).clamp(0.0, 255.0) as u8),
        );
        if let (Some(p), Some(c)) = (&conf, out.confidences.as_mut()) {
            c.push(table.get_f32(row, p));
        }
    }
    Ok(out)
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    decode_points(&std::fs::read(path)?)
}

pub fn write_points(path: &Path, points: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_points(points)?)
}

/// Gaussian cloud as a binary PLY with the usual splatting property names
/// (`f_dc_*`, channel-major `f_rest_*`, `opacity`, `scale_*`, `rot_*`). Values
/// are written as doubles; float files are read as well.
pub fn encode_cloud(cloud: &GaussianCloud) -> Vec<u8> {
    let rest = 3 * (cloud.sh_coeffs() - 1);
    let mut names: Vec<String> = [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((0..rest).map(|k| format!("f_rest_{k}")));
    names.push("opacity".into());
    names.extend((0..3).map(|k| format!("scale_{k}")));
    names.extend((0..4).map(|k| format!("rot_{k}")));
    let props: Vec<(&str, &str)> = names.iter().map(|n| ("double", n.as_str())).collect();
    let mut out = ply_header(cloud.len(), &props);
    let coeffs = cloud.sh_coeffs();
    for i in 0..cloud.len() {
        let mut row: Vec<f64> = Vec::with_capacity(names.len());
        row.extend_from_slice(&cloud.means[i]);
        row.extend_from_slice(&[0.0; 3]);
        let sh = cloud.sh_of(i);
        row.extend_from_slice(&sh[..3]);
        for ch in 0..3 {
            for k in 1..coeffs {
                row.push(sh[k * 3 + ch]);
            }
        }
        row.push(cloud.opacity_logits[i]);
        row.extend_from_slice(&cloud.log_scales[i]);
        row.extend_from_slice(&cloud.rotations[i]);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<GaussianCloud> {
    let table = VertexTable::parse(bytes)?;
    let rest = table
        .properties
        .iter()
        .filter(|p| p.name.starts_with("f_rest_"))
        .count();
    if rest % 3 != 0 {
        return Err(Error::MalformedHeader(format!(
            "{rest} f_rest properties is not a multiple of 3"
        )));
    }
    let coeffs = rest / 3 + 1;
    let degree = (0..=sh::MAX_DEGREE)
        .find(|d| sh::coeff_count(*d) == coeffs)
        .ok_or_else(|| Error::MalformedHeader(format!("{coeffs} SH coefficients per channel")))?;
    let req = |names: &[String]| -> Result<Vec<PlyProperty>> {
        names.iter().map(|n| table.require(n)).collect()
    };
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mean = req(&strs(&["x", "y", "z"]))?;
    let dc = req(&strs(&["f_dc_0", "f_dc_1", "f_dc_2"]))?;
    let rest_p = req(&(0..rest).map(|k| format!("f_rest_{k}")).collect::<Vec<_>>())?;
    let opacity = table.require("opacity")?;
    let scale = req(&strs(&["scale_0", "scale_1", "scale_2"]))?;
    let rot = req(&strs(&["rot_0", "rot_1", "rot_2", "rot_3"]))?;
    let mut cloud = GaussianCloud::new(degree)?;
    for row in 0..table.count {
        let mut sh = vec![0.0; coeffs * 3];
        for ch in 0..3 {
            sh[ch] = table.get(row, &dc[ch]);
            for k in 1..coeffs {
                sh[k * 3 + ch] = table.get(row, &rest_p[ch * (coeffs - 1) + k - 1]);
            }
        }
        let g = Gaussian {
            mean: [0, 1, 2].map(|k| table.get(row, &mean[k])),
            rotation: [0, 1, 2, 3].map(|k| table.get(row, &rot[k])),
            log_scale: [0, 1, 2].map(|k| table.get(row, &scale[k])),
            opacity_logit: table.get(row, &opacity),
            sh,
        };
        let finite = g
            .mean
            .iter()
            .chain(&g.rotation)
            .chain(&g.log_scale)
            .chain(&g.sh)
            .all(|v| v.is_finite())
            && g.opacity_logit.is_finite();
        if !finite {
            return Err(Error::ValueRange(format!(
                "non-finite parameter in Gaussian {row}"
            )));
        }
        if norm4(&g.rotation) == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "zero quaternion in Gaussian {row}"
            )));
        }
        let raw = g.rotation;
        let unit = (norm4(&raw) - 1.0).abs() <= 1e-12;
        cloud.push(g)?;
        if unit {
            *cloud.rotations.last_mut().unwrap() = raw;
        }
    }
    cloud.validate()?;
    Ok(cloud)
}

/// Path of the JSON sidecar next to a checkpoint: `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_cloud(path: &Path) -> Result<GaussianCloud> {
    decode_cloud(&std::fs::read(path)?)
}

pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_atomic(path, &encode_cloud(cloud))
}

/// Cloud plus a JSON sidecar describing how it was produced.
pub fn write_checkpoint<M: Serialize>(path: &Path, cloud: &GaussianCloud, meta: &M) -> Result<()> {
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::SchemaError(e.to_string()))?;
    write_cloud(path, cloud)?;
    write_atomic(&sidecar_path(path), json.as_bytes())
}

// ---------------------------------------------------------------- PFM

/// Single- or three-channel float raster, rows top to bottom, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_identical(&self, other: &FloatMap) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn expect_channels(&self, n: usize) -> Result<()> {
        if self.channels != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} channel(s)"),
                actual: format!("{} channel(s)", self.channels),
            });
        }
        Ok(())
    }
}

/// Splits off the next whitespace-delimited ASCII token, skipping `#` comments
/// when `comments` is set. Returns the token and the index just past it.
fn next_token(bytes: &[u8], mut at: usize, comments: bool) -> Result<(&str, usize)> {
    loop {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if comments && bytes.get(at) == Some(&b'#') {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        break;
    }
    let start = at;
    while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
        at += 1;
    }
    if start == at {
        return Err(Error::MalformedHeader("unexpected end of header".into()));
    }
    let tok = std::str::from_utf8(&bytes[start..at])
        .map_err(|_| Error::MalformedHeader("non-ASCII header".into()))?;
    Ok((tok, at))
}

fn parse_dim(tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::MalformedHeader(format!("bad dimension {tok:?}"))),
    }
}

/// Skips the single whitespace byte that ends a binary header.
fn header_end(bytes: &[u8], at: usize) -> Result<usize> {
    match bytes.get(at) {
        Some(b) if b.is_ascii_whitespace() => Ok(at + 1),
        _ => Err(Error::MalformedHeader(
            "header not terminated by whitespace".into(),
        )),
    }
}

pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let magic = if map.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    let row = map.width * map.channels;
    for y in (0..map.height).rev() {
        for v in &map.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatMap> {
    let (magic, at) = next_token(bytes, 0, false)?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(Error::MalformedHeader(format!("bad PFM magic {magic:?}"))),
    };
    let (w, at) = next_token(bytes, at, false)?;
    let (h, at) = next_token(bytes, at, false)?;
    let (scale, at) = next_token(bytes, at, false)?;
    let (width, height) = (parse_dim(w)?, parse_dim(h)?);
    let scale: f64 = scale
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad PFM scale {scale:?}")))?;
    if !scale.is_finite() || scale == 0.0 {
        return Err(Error::NonFiniteScale);
    }
    let little = scale < 0.0;
    let start = header_end(bytes, at)?;
    let row = width * channels;
    let need = row * height * 4;
    let body = bytes
        .get(start..)
        .filter(|b| b.len() >= need)
        .ok_or_else(|| Error::MalformedHeader(format!("body truncated: need {need} bytes")))?;
    let mut data = vec![0.0f32; row * height];
    for (k, chunk) in body[..need].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (k / row, k % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(FloatMap {
        width,
        height,
        channels,
        data,
    })
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    decode_pfm(&std::fs::read(path)?)
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    write_atomic(path, &encode_pfm(map))
}

pub fn scalar_map(width: usize, height: usize, values: &[f64]) -> FloatMap {
    FloatMap {
        width,
        height,
        channels: 1,
        data: values.iter().map(|v| *v as f32).collect(),
    }
}

pub fn depth_to_map(d: &DepthMap) -> FloatMap {
    scalar_map(d.width, d.height, &d.values)
}

pub fn map_to_depth(m: &FloatMap, semantics: DepthSemantics) -> Result<DepthMap> {
    m.expect_channels(1)?;
    DepthMap::new(
        m.width,
        m.height,
        m.data.iter().map(|v| *v as f64).collect(),
        semantics,
    )
}

pub fn confidence_to_map(c: &ConfidenceMap) -> FloatMap {
    scalar_map(c.width, c.height, &c.values)
}

pub fn map_to_confidence(m: &FloatMap) -> Result<ConfidenceMap> {
    m.expect_channels(1)?;
    ConfidenceMap::new(
        m.width,
        m.height,
        m.data.iter().map(|v| *v as f64).collect(),
    )
}

pub fn normals_to_map(n: &NormalMap) -> FloatMap {
    FloatMap {
        width: n.width,
        height: n.height,
        channels: 3,
        data: n.values.iter().flatten().map(|v| *v as f32).collect(),
    }
}

pub fn map_to_normals(m: &FloatMap) -> Result<NormalMap> {
    m.expect_channels(3)?;
    NormalMap::new(
        m.width,
        m.height,
        m.data
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect(),
    )
}

pub fn mask_to_map(m: &PixelMask) -> FloatMap {
    FloatMap {
        width: m.width,
        height: m.height,
        channels: 1,
        data: m
            .values
            .iter()
            .map(|b| if *b { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Pixels above 0.5 are `true`.
pub fn map_to_mask(m: &FloatMap) -> Result<PixelMask> {
    m.expect_channels(1)?;
    PixelMask::new(m.width, m.height, m.data.iter().map(|v| *v > 0.5).collect())
}

// ---------------------------------------------------------------- PPM

fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.values.len() * 3);
    for v in &img.values {
        out.extend(v.iter().map(|c| quantize(*c)));
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let (magic, at) = next_token(bytes, 0, true)?;
    if magic != "P6" {
        return Err(Error::UnsupportedFormat(format!(
            "PNM type {magic:?}, only binary P6 is supported"
        )));
    }
    let (w, at) = next_token(bytes, at, true)?;
    let (h, at) = next_token(bytes, at, true)?;
    let (maxval, at) = next_token(bytes, at, true)?;
    let (width, height) = (parse_dim(w)?, parse_dim(h)?);
    let maxval: u32 = maxval
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad maxval {maxval:?}")))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval}, only 8-bit samples are supported"
        )));
    }
    let start = header_end(bytes, at)?;
    let need = width * height * 3;
    let body = bytes
        .get(start..)
        .filter(|b| b.len() >= need)
        .ok_or_else(|| Error::MalformedHeader(format!("body truncated: need {need} bytes")))?;
    let m = maxval as f64;
    let values = body[..need]
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / m, c[1] as f64 / m, c[2] as f64 / m])
        .collect();
    ImageBuffer::new(width, height, values)
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

// ---------------------------------------------------------------- cameras

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Camera-to-world rotation, row-major.
    #[serde(rename = "R")]
    r: [f64; 9],
    /// Camera center in world coordinates.
    t: [f64; 3],
    near: f64,
    far: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CameraFile {
    One(CameraRecord),
    Many(Vec<CameraRecord>),
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        CameraRecord {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            r: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [c.center.x, c.center.y, c.center.z],
            near: c.near,
            far: c.far,
        }
    }
}

/// Nearest proper rotation, or the orthonormality error if it is too far off.
fn repair_rotation(r: Matrix3<f64>) -> Result<Matrix3<f64>> {
    let err = rotation_error(&r);
    if err.is_nan() || err > ROTATION_REPAIR_TOL {
        return Err(Error::NonOrthonormalRotation(err));
    }
    if err <= crate::types::ROTATION_TOL {
        return Ok(r);
    }
    let svd = r.svd(true, true);
    let fixed = svd.u.unwrap() * svd.v_t.unwrap();
    if fixed.determinant() < 0.0 {
        return Err(Error::NonOrthonormalRotation(err));
    }
    Ok(fixed)
}

impl CameraRecord {
    fn into_camera(self) -> Result<Camera> {
        let rotation = repair_rotation(Matrix3::from_row_slice(&self.r))?;
        Camera::new(
            self.width,
            self.height,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            rotation,
            Vector3::from(self.t),
            self.near,
            self.far,
        )
        .map_err(|e| match e {
            Error::InvalidCamera(msg) => Error::ValueRange(msg),
            other => other,
        })
    }
}

pub fn camera_to_json(cam: &Camera) -> String {
    serde_json::to_string_pretty(&CameraRecord::from(cam)).expect("camera serializes")
}

pub fn cameras_to_json(cams: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cams.iter().map(CameraRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("cameras serialize")
}

/// Accepts a single camera object or an array of them.
pub fn cameras_from_json(s: &str) -> Result<Vec<Camera>> {
    let file: CameraFile =
        serde_json::from_str(s).map_err(|e| Error::SchemaError(e.to_string()))?;
    let records = match file {
        CameraFile::One(r) => vec![r],
        CameraFile::Many(v) => v,
    };
    records.into_iter().map(CameraRecord::into_camera).collect()
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    cameras_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    write_atomic(path, cameras_to_json(cams).as_bytes())
}
