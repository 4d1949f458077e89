//! Minimal NIfTI-1 single-file reader/writer (`.nii` and `.nii.gz`).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Geometry, LabelVolume, Volume};
use crate::error::{Error, Result};

/// `descrip` field written into every file this crate produces.
pub const DESCRIP: &str = "cobra-engine";

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone)]
struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    origin: [f64; 3],
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
            b.len()
        )));
    }
    if &b[344..348] != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "magic {:?} is not \"n+1\\0\"",
            String::from_utf8_lossy(&b[344..348])
        )));
    }
    let sizeof_hdr = i32_at(b, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::MalformedHeader(format!(
            "sizeof_hdr is {sizeof_hdr} (big-endian files are not supported)"
        )));
    }
    let ndim = i16_at(b, 40);
    if ndim != 3 {
        return Err(Error::Dimensionality(ndim));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = i16_at(b, 42 + 2 * a);
        if v < 1 {
            return Err(Error::MalformedHeader(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    let datatype = i16_at(b, 70);
    if !matches!(datatype, DT_UINT8 | DT_INT16 | DT_FLOAT32) {
        return Err(Error::UnsupportedDatatype(datatype));
    }
    let pixdim = [f32_at(b, 80), f32_at(b, 84), f32_at(b, 88)];
    let vox_offset = f32_at(b, 108);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let qform_code = i16_at(b, 252);
    let sform_code = i16_at(b, 254);
    let (ox, oy, oz) = if qform_code > 0 {
        (f32_at(b, 268), f32_at(b, 272), f32_at(b, 276))
    } else if sform_code > 0 {
        (f32_at(b, 292), f32_at(b, 308), f32_at(b, 324))
    } else {
        (0.0, 0.0, 0.0)
    };
    Ok(Header {
        dims,
        datatype,
        pixdim,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(b, 112),
        scl_inter: f32_at(b, 116),
        origin: [oz as f64, oy as f64, ox as f64],
    })
}

impl Header {
    fn geometry(&self) -> Result<Geometry> {
        let [nx, ny, nz] = self.dims;
        let [px, py, pz] = self.pixdim;
        Geometry::new(
            [nz, ny, nx],
            [pz.abs() as f64, py.abs() as f64, px.abs() as f64],
            self.origin,
        )
        .map_err(|e| Error::MalformedHeader(e.to_string()))
    }

    fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    fn bytes_per_voxel(&self) -> usize {
        match self.datatype {
            DT_UINT8 => 1,
            DT_INT16 => 2,
            _ => 4,
        }
    }

    fn payload<'a>(&self, bytes: &'a [u8]) -> Result<&'a [u8]> {
        let expected = self.voxel_count() * self.bytes_per_voxel();
        let available = bytes.len().saturating_sub(self.vox_offset);
        if available < expected {
            return Err(Error::Truncated {
                expected,
                found: available,
            });
        }
        Ok(&bytes[self.vox_offset..self.vox_offset + expected])
    }
}

/// Reads the whole file, transparently inflating gzip containers.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let hdr = parse_header(&bytes)?;
    let payload = hdr.payload(&bytes)?;
    let mut data: Vec<f32> = match hdr.datatype {
        DT_UINT8 => payload.iter().map(|&v| v as f32).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    // slope 0 means "no scaling" in NIfTI-1
    if hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite() && hdr.scl_inter.is_finite() {
        if hdr.scl_slope != 1.0 || hdr.scl_inter != 0.0 {
            for v in &mut data {
                *v = *v * hdr.scl_slope + hdr.scl_inter;
            }
        }
    }
    Volume::new(hdr.geometry()?, data)
}

/// Reads an integer-typed label map and checks every value is `< classes`.
pub fn read_labels(path: impl AsRef<Path>, classes: usize) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let hdr = parse_header(&bytes)?;
    let payload = hdr.payload(&bytes)?;
    let data: Vec<u8> = match hdr.datatype {
        DT_UINT8 => payload.to_vec(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let v = i16::from_le_bytes([c[0], c[1]]);
                u8::try_from(v)
                    .map_err(|_| Error::invalid(format!("label value {v} does not fit in 0..=255")))
            })
            .collect::<Result<_>>()?,
        dt => {
            return Err(Error::Type(format!(
                "label maps must be integer typed, found datatype {dt}"
            )))
        }
    };
    LabelVolume::new(hdr.geometry()?, data, classes)
}

fn build_header(geometry: &Geometry, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let [nz, ny, nx] = geometry.shape;
    put_i16(&mut h, 40, 3);
    put_i16(&mut h, 42, nx as i16);
    put_i16(&mut h, 44, ny as i16);
    put_i16(&mut h, 46, nz as i16);
    for a in 4..8 {
        put_i16(&mut h, 40 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let [sz, sy, sx] = geometry.spacing;
    put_f32(&mut h, 76, 1.0);
    put_f32(&mut h, 80, sx as f32);
    put_f32(&mut h, 84, sy as f32);
    put_f32(&mut h, 88, sz as f32);
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // mm
    h[148..148 + DESCRIP.len()].copy_from_slice(DESCRIP.as_bytes());
    // identity-rotation qform carrying the origin
    put_i16(&mut h, 252, 1);
    let [oz, oy, ox] = geometry.origin;
    put_f32(&mut h, 268, ox as f32);
    put_f32(&mut h, 272, oy as f32);
    put_f32(&mut h, 276, oz as f32);
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn check_extent(geometry: &Geometry) -> Result<()> {
    if geometry.shape.iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::invalid(format!(
            "extent {:?} exceeds the NIfTI-1 limit of {}",
            geometry.shape,
            i16::MAX
        )));
    }
    Ok(())
}

/// Writes header and payload, gzip-compressing when the path ends in `.gz`.
fn write_bytes(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(header)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(header)
            .and_then(|_| w.write_all(payload))
            .and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Writes a float32 NIfTI-1 file.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    check_extent(v.geometry())?;
    let header = build_header(v.geometry(), DT_FLOAT32, 32);
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path.as_ref(), &header, &payload)
}

/// Writes a uint8 NIfTI-1 label file.
pub fn write_labels(lv: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    check_extent(lv.geometry())?;
    let header = build_header(lv.geometry(), DT_UINT8, 8);
    write_bytes(path.as_ref(), &header, lv.data())
}
