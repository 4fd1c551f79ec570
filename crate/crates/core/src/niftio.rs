//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only what BraTS-style volumes need: rank-3 images stored as int16 or
//! float32, little-endian. Orientation (qform/sform) is ignored; `pixdim`
//! is carried along for provenance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};
use thiserror::Error;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const MIN_VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a single-file NIfTI-1 image (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("header size field is {0}, expected 348 (big-endian or not NIfTI-1)")]
    BadHeaderSize(i32),
    #[error("unsupported datatype code {0} (only 4=int16 and 16=float32)")]
    UnsupportedDatatype(i16),
    #[error("unsupported rank dim[0]={0}, expected 3")]
    UnsupportedRank(i16),
    #[error("invalid extent {0:?}")]
    BadDims([i16; 8]),
    #[error("vox_offset {0} is below 352")]
    BadVoxOffset(f32),
    #[error("intensity scaling slope={slope} inter={inter} is not supported")]
    UnsupportedScaling { slope: f32, inter: f32 },
    #[error("truncated: expected {expected} bytes of {what}, got {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("voxel {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Header for a float32 volume of the given extents.
    pub fn for_extents(extents: [usize; 3], spacing: [f32; 3]) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for (d, e) in dim[1..4].iter_mut().zip(extents) {
            *d = i16::try_from(e).expect("extent exceeds NIfTI-1 i16 range");
        }
        let mut pixdim = [1.0f32; 8];
        pixdim[1..4].copy_from_slice(&spacing);
        Self {
            dim,
            datatype: Datatype::Float32,
            pixdim,
            vox_offset: MIN_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            magic: MAGIC,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f32; 3] {
        [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }

    fn parse(buf: &[u8; HEADER_SIZE]) -> Result<Self> {
        let i16_at = |o: usize| i16::from_le_bytes([buf[o], buf[o + 1]]);
        let i32_at = |o: usize| i32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());

        let mut magic = [0u8; 4];
        magic.copy_from_slice(&buf[344..348]);
        if magic != MAGIC {
            return Err(NiftiError::BadMagic(magic));
        }
        let sizeof_hdr = i32_at(0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(NiftiError::BadHeaderSize(sizeof_hdr));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = i16_at(40 + 2 * i);
        }
        if dim[0] != 3 {
            return Err(NiftiError::UnsupportedRank(dim[0]));
        }
        if dim[1..4].iter().any(|&d| d <= 0) {
            return Err(NiftiError::BadDims(dim));
        }
        let datatype = Datatype::from_code(i16_at(70))?;
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = f32_at(76 + 4 * i);
        }
        let vox_offset = f32_at(108);
        if !(vox_offset >= MIN_VOX_OFFSET as f32) {
            return Err(NiftiError::BadVoxOffset(vox_offset));
        }
        let scl_slope = f32_at(112);
        let scl_inter = f32_at(116);
        let identity_scaling = (scl_slope == 0.0 || scl_slope == 1.0) && scl_inter == 0.0;
        if !identity_scaling {
            return Err(NiftiError::UnsupportedScaling {
                slope: scl_slope,
                inter: scl_inter,
            });
        }
        Ok(Self {
            dim,
            datatype,
            pixdim,
            vox_offset,
            scl_slope,
            scl_inter,
            magic,
        })
    }

    fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut buf = [0u8; HEADER_SIZE];
        let mut put = |o: usize, bytes: &[u8]| buf[o..o + bytes.len()].copy_from_slice(bytes);
        put(0, &(HEADER_SIZE as i32).to_le_bytes());
        for (i, d) in self.dim.iter().enumerate() {
            put(40 + 2 * i, &d.to_le_bytes());
        }
        put(70, &self.datatype.code().to_le_bytes());
        put(72, &((self.datatype.bytes() * 8) as i16).to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(76 + 4 * i, &p.to_le_bytes());
        }
        put(108, &self.vox_offset.to_le_bytes());
        put(112, &self.scl_slope.to_le_bytes());
        put(116, &self.scl_inter.to_le_bytes());
        // xyzt_units: millimetres
        put(123, &[2u8]);
        put(344, &MAGIC);
        buf
    }
}

/// A rank-3 image; `voxels[[x, y, z]]` with x varying fastest on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: NiftiHeader,
    pub voxels: Array3<f32>,
}

impl Volume {
    /// Wraps a voxel grid in a float32 header; rejects non-finite values.
    pub fn new(voxels: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(NiftiError::NonFinite { index });
        }
        let (x, y, z) = voxels.dim();
        Ok(Self {
            header: NiftiHeader::for_extents([x, y, z], spacing),
            voxels,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        let (x, y, z) = self.voxels.dim();
        [x, y, z]
    }
}

/// Decodes a NIfTI-1 stream, optionally gzip-wrapped.
pub fn read_nifti<R: Read>(stream: R, gzipped: bool) -> Result<Volume> {
    if gzipped {
        read_plain(GzDecoder::new(stream))
    } else {
        read_plain(stream)
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(NiftiError::Truncated {
                    what,
                    expected: buf.len(),
                    actual: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn read_plain<R: Read>(mut r: R) -> Result<Volume> {
    let mut hdr = [0u8; HEADER_SIZE];
    read_full(&mut r, &mut hdr, "header")?;
    let header = NiftiHeader::parse(&hdr)?;

    let skip = header.vox_offset as usize - HEADER_SIZE;
    let mut gap = vec![0u8; skip];
    read_full(&mut r, &mut gap, "header extension")?;

    let n = header.voxel_count();
    let mut payload = vec![0u8; n * header.datatype.bytes()];
    read_full(&mut r, &mut payload, "voxel data")?;

    let values: Vec<f32> = match header.datatype {
        Datatype::Int16 => payload
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
        Datatype::Float32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    };
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(NiftiError::NonFinite { index });
    }
    let [x, y, z] = header.extents();
    let voxels = Array3::from_shape_vec((x, y, z).f(), values).expect("extent product checked");
    Ok(Volume { header, voxels })
}

/// Encodes as float32 with `vox_offset = 352`.
pub fn write_nifti<W: Write>(volume: &Volume, stream: W, gzipped: bool) -> Result<()> {
    if gzipped {
        let mut enc = GzEncoder::new(stream, Compression::default());
        write_plain(volume, &mut enc)?;
        enc.finish()?.flush()?;
        Ok(())
    } else {
        let mut stream = stream;
        write_plain(volume, &mut stream)?;
        stream.flush()?;
        Ok(())
    }
}

fn write_plain<W: Write>(volume: &Volume, w: &mut W) -> Result<()> {
    let mut header = NiftiHeader::for_extents(volume.extents(), volume.header.spacing());
    header.pixdim[0] = volume.header.pixdim[0];
    w.write_all(&header.encode())?;
    w.write_all(&[0u8; MIN_VOX_OFFSET - HEADER_SIZE])?;
    let mut payload = Vec::with_capacity(volume.voxels.len() * 4);
    // Fortran order: x fastest.
    for v in volume.voxels.t().iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads a `.nii` or `.nii.gz` file, choosing decompression by extension.
pub fn load(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    read_nifti(BufReader::new(File::open(path)?), is_gz(path))
}

pub fn save(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_nifti(volume, BufWriter::new(File::create(path)?), is_gz(path))
}
