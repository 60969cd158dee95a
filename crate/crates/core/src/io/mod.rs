//! File formats: NIfTI-1 volumes and the per-case bounding-box table.

mod bbox;
mod nifti;

pub use bbox::{parse_bbox_csv, read_bbox_csv, BBoxError, BBoxMM, BBOX_HEADER};
pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes, NiftiError};
