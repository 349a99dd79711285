//! Volume files: a single-file NIfTI-1 subset (`.nii`) and a raw container
//! (`.vol`: one JSON header line, a newline, then a little-endian payload).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassTable, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::paths::Dims;

pub const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Uint8,
    Int16,
    Float32,
}

impl Dtype {
    pub fn nifti_code(self) -> i16 {
        match self {
            Dtype::Uint8 => 2,
            Dtype::Int16 => 4,
            Dtype::Float32 => 16,
        }
    }

    pub fn from_nifti_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Dtype::Uint8),
            4 => Ok(Dtype::Int16),
            16 => Ok(Dtype::Float32),
            c => Err(Error::UnsupportedDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::Uint8 => 1,
            Dtype::Int16 => 2,
            Dtype::Float32 => 4,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Dtype::Uint8 => bytes.iter().map(|&b| b as f32).collect(),
            Dtype::Int16 => bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
            Dtype::Float32 => {
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Nifti,
    Raw,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => Ok(FileFormat::Nifti),
            Some("vol") => Ok(FileFormat::Raw),
            _ => Err(Error::Format(format!(
                "{}: expected a .nii or .vol file",
                path.display()
            ))),
        }
    }
}

/// Decoded image samples before interpretation as intensities or labels.
#[derive(Debug, Clone)]
pub struct Image {
    pub dims: Dims,
    pub dtype: Dtype,
    pub data: Vec<f32>,
    pub orientation: String,
    pub nifti_header: Option<Vec<u8>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    dims: Dims,
    dtype: Dtype,
    order: String,
    #[serde(default)]
    orientation: String,
}

fn rd_i16(h: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([h[at], h[at + 1]])
}

fn rd_f32(h: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(h[at..at + 4].try_into().expect("4 bytes"))
}

fn wr_i16(h: &mut [u8], at: usize, v: i16) {
    h[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn wr_f32(h: &mut [u8], at: usize, v: f32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

const DESCRIP: usize = 148;
const ORIENT_KEY: &str = "orientation=";

pub fn decode_nifti(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::Format(format!("NIfTI file truncated: {} bytes", bytes.len())));
    }
    let h = &bytes[..NIFTI_HEADER_LEN];
    let sizeof_hdr = i32::from_le_bytes(h[..4].try_into().expect("4 bytes"));
    if sizeof_hdr != NIFTI_HEADER_LEN as i32 {
        return Err(if sizeof_hdr.swap_bytes() == NIFTI_HEADER_LEN as i32 {
            Error::Format("big-endian NIfTI is not supported".into())
        } else {
            Error::Format(format!("bad NIfTI header size {sizeof_hdr}"))
        });
    }
    if &h[344..347] != b"n+1" {
        return Err(Error::Format("only single-file NIfTI-1 (magic n+1) is supported".into()));
    }
    let ndim = rd_i16(h, 40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::Format(format!("NIfTI dim[0] = {ndim}, need a 3D image")));
    }
    for i in 4..=ndim as usize {
        if rd_i16(h, 40 + 2 * i) > 1 {
            return Err(Error::Format("multi-volume NIfTI is not supported".into()));
        }
    }
    let [nx, ny, nz] = [1, 2, 3].map(|i| rd_i16(h, 40 + 2 * i));
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(Error::Format(format!("non-positive NIfTI extents {nx}x{ny}x{nz}")));
    }
    let dtype = Dtype::from_nifti_code(rd_i16(h, 70))?;
    let dims = [nz as usize, ny as usize, nx as usize];
    let n = dims.iter().product::<usize>();
    let off = rd_f32(h, 108);
    if !(off >= NIFTI_HEADER_LEN as f32) {
        return Err(Error::Format(format!("bad NIfTI vox_offset {off}")));
    }
    let off = off as usize;
    let payload = bytes
        .get(off..off + n * dtype.size())
        .ok_or_else(|| Error::Format("NIfTI payload truncated".into()))?;
    let mut data = dtype.decode(payload);
    let (slope, inter) = (rd_f32(h, 112), rd_f32(h, 116));
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let descrip = String::from_utf8_lossy(&h[DESCRIP..DESCRIP + 80]);
    let orientation = descrip
        .trim_end_matches('\0')
        .strip_prefix(ORIENT_KEY)
        .unwrap_or("")
        .to_string();
    Ok(Image { dims, dtype, data, orientation, nifti_header: Some(h.to_vec()) })
}

fn fresh_nifti_header(orientation: &str) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_HEADER_LEN];
    h[..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    for i in 0..4 {
        wr_f32(&mut h, 76 + 4 * i, 1.0);
    }
    h[123] = 2; // millimetres
    let tag = format!("{ORIENT_KEY}{orientation}");
    let n = tag.len().min(79);
    h[DESCRIP..DESCRIP + n].copy_from_slice(&tag.as_bytes()[..n]);
    h
}

/// Encodes samples; `template` (a 348-byte header) is copied and patched
/// when given, so unrelated fields survive a read/write cycle.
pub fn encode_nifti(dims: Dims, dtype: Dtype, data: &[f32], orientation: &str, template: Option<&[u8]>) -> Result<Vec<u8>> {
    let mut h = match template {
        Some(t) if t.len() == NIFTI_HEADER_LEN => t.to_vec(),
        _ => fresh_nifti_header(orientation),
    };
    let extent = |d: usize| i16::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large for NIfTI")));
    wr_i16(&mut h, 40, 3);
    wr_i16(&mut h, 42, extent(dims[2])?);
    wr_i16(&mut h, 44, extent(dims[1])?);
    wr_i16(&mut h, 46, extent(dims[0])?);
    for i in 4..8 {
        wr_i16(&mut h, 40 + 2 * i, 1);
    }
    wr_i16(&mut h, 70, dtype.nifti_code());
    wr_i16(&mut h, 72, 8 * dtype.size() as i16);
    wr_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    wr_f32(&mut h, 112, 1.0);
    wr_f32(&mut h, 116, 0.0);
    h[344..348].copy_from_slice(b"n+1\0");
    let mut out = h;
    out.extend_from_slice(&[0; NIFTI_VOX_OFFSET - NIFTI_HEADER_LEN]);
    encode_samples(dtype, data, &mut out)?;
    Ok(out)
}

fn encode_samples(dtype: Dtype, data: &[f32], out: &mut Vec<u8>) -> Result<()> {
    out.reserve(data.len() * dtype.size());
    for &v in data {
        match dtype {
            Dtype::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::Int16 => {
                if v.fract() != 0.0 || v < i16::MIN as f32 || v > i16::MAX as f32 {
                    return Err(Error::Format(format!("value {v} not representable as int16")));
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
            Dtype::Uint8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(Error::Format(format!("value {v} not representable as uint8")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(())
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("raw volume lacks a header line".into()))?;
    let header: RawHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.order != "C" {
        return Err(Error::Format(format!("unsupported sample order {:?}", header.order)));
    }
    if header.dims.contains(&0) {
        return Err(Error::Format(format!("zero extent in {:?}", header.dims)));
    }
    let n = header.dims.iter().product::<usize>() * header.dtype.size();
    let payload = &bytes[nl + 1..];
    if payload.len() != n {
        return Err(Error::Format(format!("raw payload has {} bytes, expected {n}", payload.len())));
    }
    Ok(Image {
        dims: header.dims,
        dtype: header.dtype,
        data: header.dtype.decode(payload),
        orientation: header.orientation,
        nifti_header: None,
    })
}

pub fn encode_raw(dims: Dims, dtype: Dtype, data: &[f32], orientation: &str) -> Result<Vec<u8>> {
    let header = RawHeader { dims, dtype, order: "C".into(), orientation: orientation.into() };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    encode_samples(dtype, data, &mut out)?;
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let format = FileFormat::from_path(path)?;
    let bytes = fs::read(path)?;
    match format {
        FileFormat::Nifti => decode_nifti(&bytes),
        FileFormat::Raw => decode_raw(&bytes),
    }
}

fn write_image(path: &Path, dims: Dims, dtype: Dtype, data: &[f32], orientation: &str, template: Option<&[u8]>) -> Result<()> {
    let bytes = match FileFormat::from_path(path)? {
        FileFormat::Nifti => encode_nifti(dims, dtype, data, orientation, template)?,
        FileFormat::Raw => encode_raw(dims, dtype, data, orientation)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let img = read_image(path)?;
    let mut v = Volume::new(img.dims, img.data)?;
    v.orientation = img.orientation;
    v.nifti_header = img.nifti_header;
    Ok(v)
}

/// Writes intensities as float32.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_image(path.as_ref(), v.dims, Dtype::Float32, &v.data, &v.orientation, v.nifti_header.as_deref())
}

/// Reads external label IDs and maps them through `classes`.
pub fn read_labels(path: impl AsRef<Path>, classes: &ClassTable) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = read_image(path)?;
    let mut idx = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        let id = v as i32;
        if id as f32 != v {
            return Err(Error::Format(format!("{}: non-integer label {v}", path.display())));
        }
        let i = classes
            .index_of(id)
            .ok_or_else(|| Error::Format(format!("{}: label id {id} not in class table", path.display())))?;
        idx.push(i as u16);
    }
    let mut m = LabelMap::new(img.dims, idx, classes.clone())?;
    m.orientation = img.orientation;
    m.nifti_header = img.nifti_header;
    Ok(m)
}

/// Writes external label IDs as int16.
pub fn write_labels(path: impl AsRef<Path>, m: &LabelMap) -> Result<()> {
    let ids: Vec<f32> = m
        .data
        .iter()
        .map(|&i| m.classes.label_id(i as usize).expect("index validated") as f32)
        .collect();
    write_image(path.as_ref(), m.dims, Dtype::Int16, &ids, &m.orientation, m.nifti_header.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..24).map(|i| (i as f32).sin() * 1e3).collect();
        let mut v = Volume::new([2, 3, 4], data.clone()).unwrap();
        v.orientation = "LIA".into();
        for name in ["a.nii", "a.vol"] {
            let p = dir.path().join(name);
            write_volume(&p, &v).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back.dims, [2, 3, 4]);
            assert_eq!(back.data, data);
            assert_eq!(back.orientation, "LIA");
        }
        assert_eq!(fs::metadata(dir.path().join("a.nii")).unwrap().len(), 352 + 24 * 4);
    }

    #[test]
    fn int16_promoted_exactly_and_header_preserved() {
        let mut h = fresh_nifti_header("RAS");
        h[280..284].copy_from_slice(&7.5f32.to_le_bytes()); // srow_x[0]
        let vals = [-300.0, 0.0, 12.0, 32767.0, -32768.0, 5.0, 6.0, 7.0];
        let bytes = encode_nifti([2, 2, 2], Dtype::Int16, &vals, "", Some(&h)).unwrap();
        let img = decode_nifti(&bytes).unwrap();
        assert_eq!(img.dtype, Dtype::Int16);
        assert_eq!(img.data, vals);
        let hdr = img.nifti_header.unwrap();
        assert_eq!(rd_f32(&hdr, 280), 7.5);
        assert_eq!(img.orientation, "RAS");
    }

    #[test]
    fn dims_map_fastest_axis_last() {
        let bytes = encode_nifti([2, 3, 4], Dtype::Uint8, &[0.0; 24], "", None).unwrap();
        assert_eq!([rd_i16(&bytes, 42), rd_i16(&bytes, 44), rd_i16(&bytes, 46)], [4, 3, 2]);
        assert_eq!(decode_nifti(&bytes).unwrap().dims, [2, 3, 4]);
    }

    #[test]
    fn unsupported_and_truncated_rejected() {
        let mut bytes = encode_nifti([1, 1, 2], Dtype::Float32, &[1.0, 2.0], "", None).unwrap();
        assert!(decode_nifti(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_nifti(&bytes[..100]).is_err());
        wr_i16(&mut bytes, 70, 64);
        assert!(matches!(decode_nifti(&bytes), Err(Error::UnsupportedDtype(64))));
        bytes[344] = b'x';
        assert!(decode_nifti(&bytes).is_err());
        let raw = encode_raw([1, 1, 2], Dtype::Float32, &[1.0, 2.0], "").unwrap();
        assert!(decode_raw(&raw[..raw.len() - 2]).is_err());
        assert!(encode_raw([1, 1, 1], Dtype::Int16, &[0.5], "").is_err());
    }

    #[test]
    fn labels_round_trip_through_ids() {
        let dir = tempfile::tempdir().unwrap();
        let table = ClassTable::new(vec![
            super::super::ClassEntry { index: 0, label_id: 0, name: "bg".into(), role: super::super::ClassRole::Background },
            super::super::ClassEntry { index: 1, label_id: 17, name: "a".into(), role: super::super::ClassRole::HippocampusLeft },
            super::super::ClassEntry { index: 2, label_id: 53, name: "b".into(), role: super::super::ClassRole::HippocampusRight },
        ])
        .unwrap();
        let m = LabelMap::new([1, 2, 2], vec![0, 1, 2, 1], table.clone()).unwrap();
        for name in ["l.nii", "l.vol"] {
            let p = dir.path().join(name);
            write_labels(&p, &m).unwrap();
            let img = read_image(&p).unwrap();
            assert_eq!(img.data, vec![0.0, 17.0, 53.0, 17.0]);
            assert_eq!(read_labels(&p, &table).unwrap().data, m.data);
            assert!(read_labels(&p, &ClassTable::identity(3)).is_err());
        }
    }
}
