//! On-disk formats: raw float maps, 8-bit PPM images, camera text files and
//! the little-endian binary cursor shared by the scene and checkpoint codecs.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Quaternion, RelativePose};
use crate::image::ImageBuf;
use crate::metrics::LabelMap;

pub const MAP_MAGIC: [u8; 4] = *b"SSMP";
const MAP_HEADER: usize = 16;

/// Little-endian reader that reports the byte offset of every failure.
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.data.len() as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.data.len()
                ),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8], what: &str) -> Result<()> {
        let at = self.offset();
        let got = self.bytes(magic.len(), what)?;
        if got != magic {
            return Err(Error::format(at, format!("bad magic for {what}: {got:?}")));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes after {what}", self.remaining()),
            ));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| Error::Dimension(format!("{what} {v} does not fit the file header")))
}

// ------------------------------------------------------------ float maps

/// Encode a map as `magic, h, w, channels` (u32 LE) followed by f32 LE values.
pub fn encode_map(img: &ImageBuf) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(&MAP_MAGIC);
    w.u32(dim_u32(img.height, "height")?);
    w.u32(dim_u32(img.width, "width")?);
    w.u32(dim_u32(img.channels, "channels")?);
    for &v in &img.data {
        w.f32(v as f32);
    }
    Ok(w.buf)
}

pub fn decode_map(data: &[u8]) -> Result<ImageBuf> {
    let mut r = ByteReader::new(data);
    r.expect_magic(&MAP_MAGIC, "map header")?;
    let h = r.u32("map height")? as usize;
    let w = r.u32("map width")? as usize;
    let c = r.u32("map channels")? as usize;
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(4, "map dimensions overflow"))?;
    let expected = count.checked_mul(4).and_then(|v| v.checked_add(MAP_HEADER));
    if expected != Some(data.len()) {
        return Err(Error::format(
            data.len() as u64,
            format!(
                "header says {h}x{w}x{c} ({} payload bytes) but file has {} payload bytes",
                count.saturating_mul(4),
                data.len() - MAP_HEADER
            ),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f32("map value")? as f64);
    }
    ImageBuf::from_vec(w, h, c, values)
}

pub fn write_map(path: &Path, img: &ImageBuf) -> Result<()> {
    fs::write(path, encode_map(img)?)?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<ImageBuf> {
    decode_map(&fs::read(path)?)
}

pub fn labels_to_map(labels: &LabelMap) -> ImageBuf {
    let data = labels.data.iter().map(|&l| l as f64).collect();
    ImageBuf::from_vec(labels.width, labels.height, 1, data).expect("label map shape")
}

pub fn map_to_labels(map: &ImageBuf) -> Result<LabelMap> {
    if map.channels != 1 {
        return Err(Error::format(
            12,
            format!("label map must have 1 channel, got {}", map.channels),
        ));
    }
    let mut data = Vec::with_capacity(map.data.len());
    for (i, &v) in map.data.iter().enumerate() {
        if v.fract() != 0.0 || !(-1.0..=i32::MAX as f64).contains(&v) {
            return Err(Error::format(
                (MAP_HEADER + 4 * i) as u64,
                format!("invalid label value {v}"),
            ));
        }
        data.push(v as i32);
    }
    Ok(LabelMap {
        width: map.width,
        height: map.height,
        data,
    })
}

// -------------------------------------------------------------------- PPM

/// Quantize a value in [0, 1] to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round every value to the nearest 8-bit level, as a PPM round trip would.
pub fn quantize_8bit(img: &ImageBuf) -> ImageBuf {
    let data = img.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
    ImageBuf::from_vec(img.width, img.height, img.channels, data).unwrap()
}

pub fn encode_ppm(img: &ImageBuf) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Dimension(format!(
            "PPM needs 3 channels, got {}",
            img.channels
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_u8(v)));
    Ok(out)
}

pub fn decode_ppm(data: &[u8]) -> Result<ImageBuf> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < data.len() && (data[pos].is_ascii_whitespace() || data[pos] == b'#') {
            if data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PPM header"));
        }
        fields.push((start, std::str::from_utf8(&data[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P6" {
        return Err(Error::format(0, "not a binary PPM (expected P6)"));
    }
    let mut dims = [0usize; 3];
    for (k, (off, s)) in fields[1..].iter().enumerate() {
        dims[k] = s
            .parse()
            .map_err(|_| Error::format(*off as u64, format!("bad PPM header field {s:?}")))?;
    }
    let [w, h, maxval] = dims;
    if maxval != 255 {
        return Err(Error::format(
            fields[3].0 as u64,
            format!("unsupported PPM max value {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    pos += 1;
    let need = w * h * 3;
    if data.len() < pos || data.len() - pos != need {
        return Err(Error::format(
            data.len() as u64,
            format!(
                "PPM header says {w}x{h} ({need} bytes) but {} pixel bytes follow",
                data.len().saturating_sub(pos)
            ),
        ));
    }
    let values = data[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    ImageBuf::from_vec(w, h, 3, values)
}

pub fn write_ppm(path: &Path, img: &ImageBuf) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageBuf> {
    decode_ppm(&fs::read(path)?)
}

// ---------------------------------------------------------------- cameras

/// Plain-text camera: the 4×4 camera-to-world matrix, the exact rotation
/// quaternion, intrinsics and image size. Floats use shortest round-trip
/// formatting, so reading back is bit-exact.
pub fn encode_camera(cam: &CameraView) -> String {
    let m = cam.pose.to_matrix();
    let mut s = String::from("pose\n");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:?}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let q = cam.pose.rotation;
    s.push_str(&format!(
        "quaternion {:?} {:?} {:?} {:?}\n",
        q.w, q.x, q.y, q.z
    ));
    s.push_str(&format!(
        "intrinsics {:?} {:?} {:?} {:?}\n",
        cam.fx, cam.fy, cam.cx, cam.cy
    ));
    s.push_str(&format!("size {} {}\n", cam.width, cam.height));
    s
}

pub fn decode_camera(text: &str) -> Result<CameraView> {
    let mut lines = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            lines.push((offset, trimmed));
        }
        offset += line.len() as u64;
    }
    let end = text.len() as u64;
    let line = |i: usize| {
        lines
            .get(i)
            .copied()
            .ok_or_else(|| Error::format(end, "truncated camera file"))
    };
    let floats = |(off, l): (u64, &str), key: &str, n: usize| -> Result<Vec<f64>> {
        let mut parts = l.split_whitespace();
        if !key.is_empty() && parts.next() != Some(key) {
            return Err(Error::format(off, format!("expected `{key}` line")));
        }
        let v: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(off, "unparsable number"))?;
        if v.len() != n {
            return Err(Error::format(
                off,
                format!("expected {n} values, got {}", v.len()),
            ));
        }
        Ok(v)
    };
    let (off0, head) = line(0)?;
    if head != "pose" {
        return Err(Error::format(off0, "camera file must start with `pose`"));
    }
    let mut m = Matrix4::zeros();
    for r in 0..4 {
        let row = floats(line(1 + r)?, "", 4)?;
        for c in 0..4 {
            m[(r, c)] = row[c];
        }
    }
    let q_line = line(5)?;
    let q = floats(q_line, "quaternion", 4)?;
    let rotation = Quaternion::new(q[0], q[1], q[2], q[3]);
    if !rotation.is_unit() || rotation.w < 0.0 {
        return Err(Error::format(
            q_line.0,
            "camera quaternion is not canonical",
        ));
    }
    let from_matrix =
        RelativePose::from_matrix(&m).map_err(|e| Error::format(lines[1].0, e.to_string()))?;
    let r_diff = (from_matrix.rotation_matrix() - rotation.to_rotation()?)
        .abs()
        .max();
    if r_diff > 1e-6 {
        return Err(Error::format(
            q_line.0,
            "quaternion disagrees with the pose matrix",
        ));
    }
    let k = floats(line(6)?, "intrinsics", 4)?;
    let size_line = line(7)?;
    let size = floats(size_line, "size", 2)?;
    if size.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(Error::format(
            size_line.0,
            "image size must be positive integers",
        ));
    }
    if let Some(extra) = lines.get(8) {
        return Err(Error::format(extra.0, "unexpected trailing content"));
    }
    let cam = CameraView {
        fx: k[0],
        fy: k[1],
        cx: k[2],
        cy: k[3],
        pose: RelativePose {
            rotation,
            translation: Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
        },
        width: size[0] as usize,
        height: size[1] as usize,
    };
    cam.validate()
        .map_err(|e| Error::format(lines[6].0, e.to_string()))?;
    Ok(cam)
}

pub fn write_camera(path: &Path, cam: &CameraView) -> Result<()> {
    fs::write(path, encode_camera(cam))?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<CameraView> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::format(e.valid_up_to() as u64, "camera file is not UTF-8"))?;
    decode_camera(text)
}

// --------------------------------------------------------------- key=value

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::format(offset, format!("expected key=value, got {t:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        offset += line.len() as u64;
    }
    Ok(out)
}
