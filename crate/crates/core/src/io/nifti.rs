//! Single-file NIfTI-1 (`.nii` / `.nii.gz`) reading and writing.
//!
//! Only axis-aligned orientations are accepted. Flips and axis permutations
//! found in the sform (or qform) are folded into the internal axis order at
//! load time so that every [`Volume3`] has positive spacing along world
//! x, y and z.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{GridMeta, Volume3};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Off-axis matrix entries below this fraction of the column's dominant entry are ignored.
const AXIS_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a single-file NIfTI-1 image (magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("orientation is not axis-aligned")]
    UnsupportedOrientation,

    #[error("file is truncated: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("non-finite voxel value at index {0}")]
    NonFinite(usize),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io { path: path.to_path_buf(), source }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl HeaderReader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.raw(at))
    }

    fn f32(&self, at: usize) -> f64 {
        f64::from(f32::from_le_bytes(self.raw(at)))
    }
}

/// A 3×4 voxel-to-world matrix.
type Affine = [[f64; 4]; 3];

fn quaternion_affine(h: &HeaderReader<'_>, pixdim: [f64; 8]) -> Affine {
    let (b, c, d) = (h.f32(256), h.f32(260), h.f32(264));
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [pixdim[1], pixdim[2], qfac * pixdim[3]];
    let offset = [h.f32(268), h.f32(272), h.f32(276)];
    std::array::from_fn(|row| [r[row][0] * scale[0], r[row][1] * scale[1], r[row][2] * scale[2], offset[row]])
}

/// For each file axis: the world axis it maps to and whether it runs backwards.
fn axis_mapping(m: &Affine) -> Result<[(usize, bool); 3], NiftiError> {
    let mut map = [(0usize, false); 3];
    let mut used = [false; 3];
    for (col, slot) in map.iter_mut().enumerate() {
        let column = [m[0][col], m[1][col], m[2][col]];
        let (row, peak) =
            column.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(r, &v)| (r, v)).unwrap();
        if !(peak.is_finite() && peak != 0.0) {
            return Err(NiftiError::UnsupportedOrientation);
        }
        let off_axis = column.iter().enumerate().any(|(r, v)| r != row && v.abs() > AXIS_TOLERANCE * peak.abs());
        if off_axis || used[row] {
            return Err(NiftiError::UnsupportedOrientation);
        }
        used[row] = true;
        *slot = (row, peak < 0.0);
    }
    Ok(map)
}

fn decode_payload(h: &HeaderReader<'_>, datatype: i16, count: usize, offset: usize) -> Result<Vec<f64>, NiftiError> {
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let needed = offset + count * width;
    if h.bytes.len() < needed {
        return Err(NiftiError::TruncatedFile { needed, have: h.bytes.len() });
    }
    let payload = HeaderReader { bytes: &h.bytes[offset..needed], big_endian: h.big_endian };
    let values = (0..count).map(|n| {
        let at = n * width;
        match datatype {
            DT_UINT8 => f64::from(payload.bytes[at]),
            DT_INT16 => f64::from(payload.i16(at)),
            DT_INT32 => f64::from(payload.i32(at)),
            DT_FLOAT32 => payload.f32(at),
            _ => f64::from_le_bytes(payload.raw(at)),
        }
    });
    Ok(values.collect())
}

/// Decodes a NIfTI-1 image from memory. Gzip streams are detected by their magic bytes.
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume3, NiftiError> {
    let inflated;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut buf = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut buf)
            .map_err(|source| NiftiError::Io { path: PathBuf::from("<gzip stream>"), source })?;
        inflated = buf;
        &inflated[..]
    } else {
        bytes
    };
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TruncatedFile { needed: HEADER_SIZE, have: bytes.len() });
    }

    let big_endian = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        other => return Err(NiftiError::BadHeader(format!("sizeof_hdr is {other}, expected 348"))),
    };
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(magic));
    }
    let h = HeaderReader { bytes, big_endian };

    let dim: [i16; 8] = std::array::from_fn(|n| h.i16(40 + 2 * n));
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::BadHeader(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let extent = |axis: usize| if axis <= ndim { dim[axis] } else { 1 };
    if (4..=ndim).any(|a| dim[a] != 1) {
        return Err(NiftiError::BadHeader(format!("only 3D images are supported, dim = {dim:?}")));
    }
    let file_shape: [usize; 3] = std::array::from_fn(|a| extent(a + 1).max(0) as usize);
    if file_shape.contains(&0) {
        return Err(NiftiError::BadHeader(format!("empty axis in dim = {dim:?}")));
    }

    let datatype = h.i16(70);
    let pixdim: [f64; 8] = std::array::from_fn(|n| h.f32(76 + 4 * n));
    let vox_offset = h.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= VOX_OFFSET as f64) {
        return Err(NiftiError::BadHeader(format!("vox_offset {vox_offset} is below {VOX_OFFSET}")));
    }
    let spacing: [f64; 3] = std::array::from_fn(|a| pixdim[a + 1].abs());
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(NiftiError::BadHeader(format!("pixdim {pixdim:?} has nonpositive spacing")));
    }

    let (qform_code, sform_code) = (h.i16(252), h.i16(254));
    let affine: Affine = if sform_code > 0 {
        std::array::from_fn(|row| std::array::from_fn(|c| h.f32(280 + 16 * row + 4 * c)))
    } else if qform_code > 0 {
        quaternion_affine(&h, pixdim)
    } else {
        [[spacing[0], 0.0, 0.0, 0.0], [0.0, spacing[1], 0.0, 0.0], [0.0, 0.0, spacing[2], 0.0]]
    };
    let mapping = axis_mapping(&affine)?;

    let count = file_shape.iter().product();
    let mut raw = decode_payload(&h, datatype, count, vox_offset as usize)?;
    let (slope, inter) = (h.f32(112), h.f32(116));
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        raw.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    if let Some(bad) = raw.iter().position(|v| !v.is_finite()) {
        return Err(NiftiError::NonFinite(bad));
    }

    let mut shape = [0usize; 3];
    let mut out_spacing = [0.0; 3];
    let mut origin = [affine[0][3], affine[1][3], affine[2][3]];
    for (axis, &(world, flipped)) in mapping.iter().enumerate() {
        shape[world] = file_shape[axis];
        out_spacing[world] = spacing[axis];
        if flipped {
            for (row, o) in origin.iter_mut().enumerate() {
                *o += affine[row][axis] * (file_shape[axis] - 1) as f64;
            }
        }
    }
    let meta = GridMeta::new(shape, out_spacing, origin).map_err(|e| NiftiError::BadHeader(e.to_string()))?;

    let identity = mapping.iter().enumerate().all(|(a, &(w, f))| a == w && !f);
    let data = if identity {
        raw
    } else {
        let mut data = vec![0.0; count];
        let [fx, fy, _] = file_shape;
        for (n, &value) in raw.iter().enumerate() {
            let file_ijk = [n % fx, (n / fx) % fy, n / (fx * fy)];
            let mut ijk = [0usize; 3];
            for (axis, &(world, flipped)) in mapping.iter().enumerate() {
                ijk[world] = if flipped { file_shape[axis] - 1 - file_ijk[axis] } else { file_ijk[axis] };
            }
            data[meta.index(ijk[0], ijk[1], ijk[2])] = value;
        }
        data
    };
    Volume3::new(meta, data).map_err(|e| NiftiError::BadHeader(e.to_string()))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3, NiftiError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    read_nifti_bytes(&bytes)
}

/// Encodes a volume as uncompressed NIfTI-1: float32 voxels, axis-aligned
/// sform (and matching qform), unit scaling.
pub fn write_nifti_bytes(v: &Volume3) -> Vec<u8> {
    let meta = v.meta();
    let mut h = vec![0u8; VOX_OFFSET];
    let mut put = |at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);

    put(0, &348i32.to_le_bytes());
    put(38, b"r");
    let shape = meta.shape();
    let dim: [i16; 8] = [3, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (n, d) in dim.iter().enumerate() {
        put(40 + 2 * n, &d.to_le_bytes());
    }
    put(70, &DT_FLOAT32.to_le_bytes());
    put(72, &32i16.to_le_bytes());
    let spacing = meta.spacing().map(|s| s as f32);
    let pixdim = [1.0f32, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (n, p) in pixdim.iter().enumerate() {
        put(76 + 4 * n, &p.to_le_bytes());
    }
    put(108, &(VOX_OFFSET as f32).to_le_bytes());
    put(112, &1.0f32.to_le_bytes());
    put(116, &0.0f32.to_le_bytes());
    // mm units
    put(123, &[2u8]);

    put(252, &1i16.to_le_bytes());
    put(254, &1i16.to_le_bytes());
    let origin = meta.origin().map(|o| o as f32);
    for (n, o) in origin.iter().enumerate() {
        put(268 + 4 * n, &o.to_le_bytes());
    }
    for row in 0..3 {
        let mut srow = [0.0f32; 4];
        srow[row] = spacing[row];
        srow[3] = origin[row];
        for (c, x) in srow.iter().enumerate() {
            put(280 + 16 * row + 4 * c, &x.to_le_bytes());
        }
    }
    put(344, MAGIC_SINGLE);

    h.reserve(v.data().len() * 4);
    for &x in v.data() {
        h.extend_from_slice(&(x as f32).to_le_bytes());
    }
    h
}

/// Writes `v` to `path`; a `.gz` suffix selects gzip compression.
///
/// The file is written next to its destination and renamed into place.
pub fn write_nifti(v: &Volume3, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let bytes = write_nifti_bytes(v);
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".partial-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);

    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(&tmp)?);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut gz = GzEncoder::new(out, Compression::default());
            gz.write_all(&bytes)?;
            gz.finish()?.flush()?;
        } else {
            out.write_all(&bytes)?;
            out.flush()?;
        }
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(path)(e)
    })
}
