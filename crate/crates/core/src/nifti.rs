//! Minimal NIfTI-1 reader/writer for 3-d volumes (.nii and .nii.gz).
//!
//! Reads both byte orders and the common scalar dtypes; writes little-endian
//! float32 for images and uint8 for label maps. Orientation metadata is not
//! interpreted: voxels are used in stored order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    big_endian: bool,
}

fn rd_i16(b: &[u8], off: usize, be: bool) -> i16 {
    let raw = [b[off], b[off + 1]];
    if be {
        i16::from_be_bytes(raw)
    } else {
        i16::from_le_bytes(raw)
    }
}

fn rd_i32(b: &[u8], off: usize, be: bool) -> i32 {
    let raw = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if be {
        i32::from_be_bytes(raw)
    } else {
        i32::from_le_bytes(raw)
    }
}

fn rd_f32(b: &[u8], off: usize, be: bool) -> f32 {
    f32::from_bits(rd_i32(b, off, be) as u32)
}

fn rd_f64(b: &[u8], off: usize, be: bool) -> f64 {
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&b[off..off + 8]);
    if be {
        f64::from_be_bytes(raw)
    } else {
        f64::from_le_bytes(raw)
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let big_endian = match rd_i32(bytes, 0, false) {
        348 => false,
        _ if rd_i32(bytes, 0, true) == 348 => true,
        other => {
            return Err(Error::Format(format!(
                "bad sizeof_hdr {other}; not a NIfTI-1 file"
            )))
        }
    };
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" && &magic[..3] != b"ni1" {
        return Err(Error::Format("missing NIfTI-1 magic".into()));
    }
    let ndim = rd_i16(bytes, 40, big_endian);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("invalid dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = rd_i16(bytes, 42 + 2 * i, big_endian);
        if v < 1 {
            return Err(Error::Format(format!("non-positive dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if ndim > 3 && dim[3..].iter().any(|&d| d != 1) {
        return Err(Error::Format(format!(
            "expected a 3D volume, got {}D shape {:?}",
            ndim,
            &dim[..ndim as usize]
        )));
    }
    let datatype = rd_i16(bytes, 70, big_endian);
    let pixdim = [
        rd_f32(bytes, 80, big_endian),
        rd_f32(bytes, 84, big_endian),
        rd_f32(bytes, 88, big_endian),
    ];
    let vox_offset = rd_f32(bytes, 108, big_endian) as usize;
    let scl_slope = rd_f32(bytes, 112, big_endian);
    let scl_inter = rd_f32(bytes, 116, big_endian);
    Ok(Header {
        dims: [dim[0], dim[1], dim[2]],
        datatype,
        pixdim,
        vox_offset: vox_offset.max(VOX_OFFSET),
        scl_slope,
        scl_inter,
        big_endian,
    })
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if path.extension().map(|e| e == "gz").unwrap_or(false) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn decode_voxels(h: &Header, body: &[u8]) -> Result<Vec<f64>> {
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let bpv = match h.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Format(format!("unsupported NIfTI datatype {other}"))),
    };
    if body.len() < n * bpv {
        return Err(Error::Format(format!(
            "truncated voxel data: need {} bytes, have {}",
            n * bpv,
            body.len()
        )));
    }
    let be = h.big_endian;
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        let off = i * bpv;
        let v = match h.datatype {
            DT_UINT8 => body[off] as f64,
            DT_INT8 => body[off] as i8 as f64,
            DT_INT16 => rd_i16(body, off, be) as f64,
            DT_UINT16 => rd_i16(body, off, be) as u16 as f64,
            DT_INT32 => rd_i32(body, off, be) as f64,
            DT_FLOAT32 => rd_f32(body, off, be) as f64,
            DT_FLOAT64 => rd_f64(body, off, be),
            _ => unreachable!(),
        };
        vals.push(v);
    }
    let slope = if h.scl_slope == 0.0 { 1.0 } else { h.scl_slope as f64 };
    let inter = h.scl_inter as f64;
    if slope != 1.0 || inter != 0.0 {
        for v in &mut vals {
            *v = *v * slope + inter;
        }
    }
    Ok(vals)
}

/// Loads a NIfTI-1 file. Integer-typed files whose values fit in `u8` also
/// yield a [`LabelMap`] with `num_classes = max value + 1`.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<(Volume, Option<LabelMap>)> {
    let path = path.as_ref();
    let bytes = read_file_bytes(path)?;
    let header = parse_header(&bytes)?;
    if bytes.len() < header.vox_offset {
        return Err(Error::Format("voxel data offset beyond end of file".into()));
    }
    let vals = decode_voxels(&header, &bytes[header.vox_offset..])?;
    let [d0, d1, d2] = header.dims;
    // NIfTI stores x fastest (column-major); convert to row-major.
    let mut data = Array3::<f32>::zeros((d0, d1, d2));
    let mut it = vals.iter();
    for k in 0..d2 {
        for j in 0..d1 {
            for i in 0..d0 {
                data[[i, j, k]] = *it.next().unwrap() as f32;
            }
        }
    }
    let spacing = [
        if header.pixdim[0] > 0.0 { header.pixdim[0] } else { 1.0 },
        if header.pixdim[1] > 0.0 { header.pixdim[1] } else { 1.0 },
        if header.pixdim[2] > 0.0 { header.pixdim[2] } else { 1.0 },
    ];
    let ident = path
        .file_name()
        .map(|s| s.to_string_lossy().trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_else(|| "volume".into());
    let volume = Volume::new(data, spacing, ident)?;

    let integer_typed = matches!(
        header.datatype,
        DT_UINT8 | DT_INT8 | DT_INT16 | DT_UINT16 | DT_INT32
    ) && header.scl_inter == 0.0
        && (header.scl_slope == 0.0 || header.scl_slope == 1.0);
    let label = if integer_typed && vals.iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0)
    {
        let lab = Array3::from_shape_fn((d0, d1, d2), |(i, j, k)| volume.data[[i, j, k]] as u8);
        let max = lab.iter().copied().max().unwrap_or(0);
        Some(LabelMap::new(lab, (max as usize + 1).max(2))?)
    } else {
        None
    };
    Ok((volume, label))
}

fn write_header(buf: &mut Vec<u8>, dims: [usize; 3], datatype: i16, bitpix: i16, spacing: [f32; 3]) {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    for i in 3..7 {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] (qfac) then spacing
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for (i, &s) in spacing.iter().enumerate() {
        h[80 + 4 * i..84 + 4 * i].copy_from_slice(&s.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    h[123] = 2; // xyzt_units: millimetres
    h[344..348].copy_from_slice(b"n+1\0");
    buf.extend_from_slice(&h);
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = File::create(path)?;
    if path.extension().map(|e| e == "gz").unwrap_or(false) {
        let mut enc = GzEncoder::new(&mut f, Compression::fast());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        f.write_all(bytes)?;
    }
    Ok(())
}

/// Writes a volume as little-endian float32 NIfTI-1.
pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let dims = v.shape();
    let mut buf = Vec::with_capacity(VOX_OFFSET + v.data.len() * 4);
    write_header(&mut buf, dims, DT_FLOAT32, 32, v.spacing);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                buf.extend_from_slice(&v.data[[i, j, k]].to_le_bytes());
            }
        }
    }
    write_bytes(path.as_ref(), &buf)
}

/// Writes a label map as uint8 NIfTI-1.
pub fn save_label(path: impl AsRef<Path>, y: &LabelMap, spacing: [f32; 3]) -> Result<()> {
    let dims = y.shape();
    let mut buf = Vec::with_capacity(VOX_OFFSET + y.data.len());
    write_header(&mut buf, dims, DT_UINT8, 8, spacing);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                buf.push(y.data[[i, j, k]]);
            }
        }
    }
    write_bytes(path.as_ref(), &buf)
}
