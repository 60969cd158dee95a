use std::path::{Path, PathBuf};

use thiserror::Error;

/// Column header of the bounding-box table.
pub const BBOX_HEADER: [&str; 7] = ["PatientID", "x1", "y1", "z1", "x2", "y2", "z2"];

/// A world-space (mm) box `[lo, hi)` for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct BBoxMM {
    pub patient_id: String,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl BBoxMM {
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }
}

#[derive(Debug, Error)]
pub enum BBoxError {
    #[error("bounding-box header must be `PatientID,x1,y1,z1,x2,y2,z2`, found `{0}`")]
    BadHeader(String),

    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("line {line}: box for {patient_id} has lo >= hi")]
    InvertedBox { line: u64, patient_id: String },

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Parses `PatientID,x1,y1,z1,x2,y2,z2` rows (mm), preserving file order.
pub fn parse_bbox_csv(text: &str) -> Result<Vec<BBoxMM>, BBoxError> {
    read_from(
        csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes()),
        None,
    )
}

pub fn read_bbox_csv(path: impl AsRef<Path>) -> Result<Vec<BBoxMM>, BBoxError> {
    let path = path.as_ref();
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| BBoxError::Io { path: path.to_path_buf(), source })?;
    read_from(reader, Some(path))
}

fn read_from<R: std::io::Read>(mut reader: csv::Reader<R>, path: Option<&Path>) -> Result<Vec<BBoxMM>, BBoxError> {
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(BBoxError::BadHeader(String::new())),
        Some(r) => r.map_err(|e| csv_error(e, path))?,
    };
    if header.iter().ne(BBOX_HEADER.iter().copied()) {
        return Err(BBoxError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut boxes = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(e, path))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != BBOX_HEADER.len() {
            return Err(BBoxError::MalformedRow {
                line,
                reason: format!("expected {} columns, found {}", BBOX_HEADER.len(), record.len()),
            });
        }
        let mut coords = [0.0f64; 6];
        for (c, field) in coords.iter_mut().zip(record.iter().skip(1)) {
            *c = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| BBoxError::MalformedRow { line, reason: format!("`{field}` is not a number") })?;
        }
        let patient_id = record[0].to_string();
        let lo = [coords[0], coords[1], coords[2]];
        let hi = [coords[3], coords[4], coords[5]];
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(BBoxError::InvertedBox { line, patient_id });
        }
        boxes.push(BBoxMM { patient_id, lo, hi });
    }
    Ok(boxes)
}

fn csv_error(source: csv::Error, path: Option<&Path>) -> BBoxError {
    BBoxError::Io { path: path.map_or_else(|| PathBuf::from("<memory>"), Path::to_path_buf), source }
}
