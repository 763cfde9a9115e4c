//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only the header fields needed to reconstruct the voxel grid are
//! interpreted: `dim`, `datatype`, `pixdim`, `vox_offset` and the intensity
//! scaling pair. Orientation (qform/sform) is parsed but never applied.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{IntensityKind, LabelMask, Volume3D, MAX_LABEL};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag that precedes the payload.
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
const UNITS_MM: u8 = 2;

/// Voxel datatypes understood by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            256 => Self::I8,
            512 => Self::U16,
            768 => Self::U32,
            1024 => Self::I64,
            1280 => Self::U64,
            _ => return None,
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
            Self::I8 => 256,
            Self::U16 => 512,
            Self::U32 => 768,
            Self::I64 => 1024,
            Self::U64 => 1280,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::I64 | Self::U64 | Self::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b.try_into().unwrap();
                (if big_endian { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            Self::U8 => b[0] as f64,
            Self::I8 => b[0] as i8 as f64,
            Self::I16 => num!(i16, 2),
            Self::U16 => num!(u16, 2),
            Self::I32 => num!(i32, 4),
            Self::U32 => num!(u32, 4),
            Self::I64 => num!(i64, 8),
            Self::U64 => num!(u64, 8),
            Self::F32 => num!(f32, 4),
            Self::F64 => num!(f64, 8),
        }
    }
}

/// The interpreted subset of a NIfTI-1 header.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub big_endian: bool,
}

impl NiftiHeader {
    /// Header for a fresh file with the given grid and datatype, little-endian.
    pub fn new(dims: [usize; 3], channels: usize, spacing: [f64; 3], datatype: Datatype) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = if channels > 1 { 4 } else { 3 };
        for a in 0..3 {
            dim[a + 1] = dims[a] as i16;
        }
        dim[4] = channels as i16;
        let mut pixdim = [1f32; 8];
        for a in 0..3 {
            pixdim[a + 1] = spacing[a] as f32;
        }
        let mut srow = [[0f32; 4]; 3];
        for (a, row) in srow.iter_mut().enumerate() {
            row[a] = spacing[a] as f32;
        }
        Self {
            dim,
            datatype,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: UNITS_MM,
            descrip: String::new(),
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow,
            big_endian: false,
        }
    }

    /// Spatial dims `dim[1..=3]`.
    pub fn dims(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    /// Product of every dimension beyond the third.
    pub fn channels(&self) -> usize {
        let nd = self.dim[0] as usize;
        (4..=nd).map(|i| self.dim[i] as usize).product::<usize>()
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64]
    }

    fn payload_len(&self) -> usize {
        self.dims().iter().product::<usize>() * self.channels() * self.datatype.size()
    }

    fn has_scaling(&self) -> bool {
        self.scl_slope.is_finite()
            && self.scl_slope != 0.0
            && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }

    /// Serializes the header plus the empty extension flag (352 bytes).
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter { buf: vec![0u8; DATA_OFFSET], be: self.big_endian };
        w.i32(0, HEADER_SIZE as i32);
        w.buf[38] = b'r';
        for (i, d) in self.dim.iter().enumerate() {
            w.i16(40 + 2 * i, *d);
        }
        w.i16(70, self.datatype.code());
        w.i16(72, (self.datatype.size() * 8) as i16);
        for (i, p) in self.pixdim.iter().enumerate() {
            w.f32(76 + 4 * i, *p);
        }
        w.f32(108, self.vox_offset);
        w.f32(112, self.scl_slope);
        w.f32(116, self.scl_inter);
        w.buf[123] = self.xyzt_units;
        let d = self.descrip.as_bytes();
        let n = d.len().min(79);
        w.buf[148..148 + n].copy_from_slice(&d[..n]);
        w.i16(252, self.qform_code);
        w.i16(254, self.sform_code);
        for i in 0..3 {
            w.f32(256 + 4 * i, self.quatern[i]);
            w.f32(268 + 4 * i, self.qoffset[i]);
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                w.f32(280 + 16 * r + 4 * c, *v);
            }
        }
        w.buf[344..348].copy_from_slice(MAGIC_SINGLE);
        w.buf
    }

    /// Parses and validates a header from the start of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("NIfTI header truncated: {} of {HEADER_SIZE} bytes", bytes.len()),
            )));
        }
        let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let big_endian = if le == HEADER_SIZE as i32 {
            false
        } else if be == HEADER_SIZE as i32 {
            true
        } else {
            return Err(Error::Format(format!("sizeof_hdr is {le}, expected {HEADER_SIZE}")));
        };
        let magic = &bytes[344..348];
        if magic == MAGIC_PAIR {
            return Err(Error::Unsupported("two-file (.hdr/.img) NIfTI layout".into()));
        }
        if magic != MAGIC_SINGLE {
            return Err(Error::Format(format!("bad NIfTI magic {magic:?}")));
        }
        let r = FieldReader { buf: bytes, be: big_endian };
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * i);
        }
        let code = r.i16(70);
        let datatype = Datatype::from_code(code)
            .ok_or_else(|| Error::Unsupported(format!("NIfTI datatype code {code}")))?;
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * i);
        }
        let descrip_raw = &bytes[148..228];
        let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(80);
        let mut srow = [[0f32; 4]; 3];
        for (ri, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * ri + 4 * c);
            }
        }
        let header = Self {
            dim,
            datatype,
            pixdim,
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            xyzt_units: bytes[123],
            descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: [r.f32(256), r.f32(260), r.f32(264)],
            qoffset: [r.f32(268), r.f32(272), r.f32(276)],
            srow,
            big_endian,
        };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<()> {
        let nd = self.dim[0];
        if !(1..=7).contains(&nd) {
            return Err(Error::Format(format!("dim[0] = {nd} outside 1..=7")));
        }
        for i in 1..=nd as usize {
            if self.dim[i] < 1 {
                return Err(Error::Format(format!("dim[{i}] = {} is not positive", self.dim[i])));
            }
        }
        let spacing = self.spacing();
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Format(format!("pixdim[1..=3] = {spacing:?} is not a valid spacing")));
        }
        if !self.vox_offset.is_finite() || (self.vox_offset as usize) < DATA_OFFSET {
            return Err(Error::Format(format!("vox_offset {} precedes the data area", self.vox_offset)));
        }
        Ok(())
    }
}

// Missing dims beyond dim[0] count as 1 for grid purposes.
fn effective_dims(h: &NiftiHeader) -> [usize; 3] {
    let nd = h.dim[0] as usize;
    let mut d = [1usize; 3];
    for (a, v) in d.iter_mut().enumerate() {
        if a < nd {
            *v = h.dim[a + 1] as usize;
        }
    }
    d
}

struct FieldWriter {
    buf: Vec<u8>,
    be: bool,
}

impl FieldWriter {
    fn put(&mut self, off: usize, le: &[u8], be: &[u8]) {
        let src = if self.be { be } else { le };
        self.buf[off..off + src.len()].copy_from_slice(src);
    }
    fn i16(&mut self, off: usize, v: i16) {
        self.put(off, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn i32(&mut self, off: usize, v: i32) {
        self.put(off, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn f32(&mut self, off: usize, v: f32) {
        self.put(off, &v.to_le_bytes(), &v.to_be_bytes());
    }
}

struct FieldReader<'a> {
    buf: &'a [u8],
    be: bool,
}

impl FieldReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.buf[off..off + 2].try_into().unwrap();
        if self.be { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }
    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.be { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Header plus voxel values (scaling applied) in file order.
fn read_raw(path: &Path) -> Result<(NiftiHeader, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let header = NiftiHeader::decode(&bytes)?;
    let start = header.vox_offset as usize;
    let len = header.payload_len();
    let available = bytes.len().saturating_sub(start);
    if available < len {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("NIfTI payload truncated: {available} of {len} bytes present"),
        )));
    }
    let payload = &bytes[start..start + len];
    let dt = header.datatype;
    let scale = header.has_scaling();
    let values = payload
        .chunks_exact(dt.size())
        .map(|b| {
            let v = dt.decode(b, header.big_endian);
            if scale {
                v * header.scl_slope as f64 + header.scl_inter as f64
            } else {
                v
            }
        })
        .collect();
    Ok((header, values))
}

/// Reads a NIfTI-1 file as a continuous volume.
///
/// Dimensions beyond the third are folded into channels.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (header, values) = read_raw(path.as_ref())?;
    let data = values.into_iter().map(|v| v as f32).collect();
    Volume3D::new(
        effective_dims(&header),
        header.channels(),
        header.spacing(),
        data,
        IntensityKind::Continuous,
    )
}

/// Reads an integer-typed NIfTI-1 file as a label mask with labels in {0, 1, 2}.
pub fn read_nifti_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let (header, values) = read_raw(path.as_ref())?;
    if !header.datatype.is_integer() {
        return Err(Error::Format(format!(
            "label masks must be integer-typed, found {:?}",
            header.datatype
        )));
    }
    if header.channels() != 1 {
        return Err(Error::Format(format!("label mask has {} channels", header.channels())));
    }
    let labels = values
        .into_iter()
        .map(|v| {
            if v.fract() == 0.0 && (0.0..=MAX_LABEL as f64).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("value {v} is not a label in {{0, 1, 2}}")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(effective_dims(&header), header.spacing(), labels)
}

fn write_file(path: &Path, header: &NiftiHeader, payload: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let file = BufWriter::new(File::create(path)?);
    let header_bytes = header.encode();
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&header_bytes)?;
        enc.write_all(payload)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&header_bytes)?;
        file.write_all(payload)?;
        file.flush()?;
    }
    Ok(())
}

/// Writes a volume as 32-bit float NIfTI-1; gzip-compressed when the path ends in `.gz`.
pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let header = NiftiHeader::new(vol.dims(), vol.channels(), vol.spacing(), Datatype::F32);
    let payload: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path.as_ref(), &header, &payload)
}

/// Writes a label mask as unsigned 8-bit NIfTI-1.
pub fn write_nifti_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let header = NiftiHeader::new(mask.dims(), 1, mask.spacing(), Datatype::U8);
    write_file(path.as_ref(), &header, mask.labels())
}
