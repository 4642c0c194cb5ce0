//! Core domain types, time/index conversion, and the on-disk dataset layout:
//! a JSON manifest, one JSON Lines annotation file, and one binary feature
//! file per example (`IVGF` header + little-endian f32 matrix, row-major).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::vocab::TokenVocab;

pub const FEATURE_MAGIC: &[u8; 4] = b"IVGF";

/// A moment in seconds within a video of total length `duration_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64, duration_s: f64) -> Result<Self> {
        let iv = TimeInterval { start_s, end_s, duration_s };
        iv.validate()?;
        Ok(iv)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_s.is_finite() && self.end_s.is_finite() && self.duration_s.is_finite()) {
            return Err(Error::InvalidInterval("non-finite boundary".into()));
        }
        if self.start_s < 0.0 || self.start_s > self.end_s || self.end_s > self.duration_s {
            return Err(Error::InvalidInterval(format!(
                "need 0 <= start <= end <= duration, got [{}, {}] in {}",
                self.start_s, self.end_s, self.duration_s
            )));
        }
        Ok(())
    }
}

/// A moment as inclusive feature indices in `[0, t-1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryIndices {
    pub i_start: usize,
    pub i_end: usize,
    pub t: usize,
}

impl BoundaryIndices {
    pub fn new(i_start: usize, i_end: usize, t: usize) -> Result<Self> {
        if t < 2 || i_start > i_end || i_end >= t {
            return Err(Error::InvalidInterval(format!(
                "need 0 <= i_start <= i_end <= t-1 with t >= 2, got ({i_start}, {i_end}, {t})"
            )));
        }
        Ok(BoundaryIndices { i_start, i_end, t })
    }

    /// Inclusive index span length.
    pub fn len(&self) -> usize {
        self.i_end - self.i_start + 1
    }
}

/// Map moment boundaries in seconds onto feature indices: `i = t * time / duration`,
/// rounded to nearest (ties to even) and clamped to `[0, t-1]`.
pub fn convert_time_to_index(iv: &TimeInterval, t: usize) -> Result<BoundaryIndices> {
    iv.validate()?;
    if t < 2 {
        return Err(Error::Config(format!("need t >= 2 feature positions, got {t}")));
    }
    if iv.duration_s == 0.0 {
        return Err(Error::InvalidInterval("duration is zero".into()));
    }
    let to_idx = |time_s: f64| -> usize {
        let raw = (t as f64 * time_s / iv.duration_s).round_ties_even();
        (raw.max(0.0) as usize).min(t - 1)
    };
    BoundaryIndices::new(to_idx(iv.start_s), to_idx(iv.end_s), t)
}

/// Inverse map for reporting: index `i` becomes second `duration * i / t`.
pub fn convert_index_to_time(b: &BoundaryIndices, duration_s: f64) -> Result<TimeInterval> {
    TimeInterval::new(
        duration_s * b.i_start as f64 / b.t as f64,
        duration_s * b.i_end as f64 / b.t as f64,
        duration_s,
    )
}

/// Extracted video features, `t x d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureSequence {
    pub features: Mat,
}

impl VideoFeatureSequence {
    pub fn new(features: Mat) -> Result<Self> {
        if features.nrows() < 2 {
            return Err(Error::Config(format!(
                "feature sequence needs t >= 2 rows, got {}",
                features.nrows()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "video features".into(), position: pos });
        }
        Ok(VideoFeatureSequence { features })
    }

    pub fn t(&self) -> usize {
        self.features.nrows()
    }

    pub fn d_v(&self) -> usize {
        self.features.ncols()
    }
}

/// Tokenized query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTokens {
    pub tokens: Vec<usize>,
    pub raw_text: String,
}

/// One prepared (video, query, gold moment) unit.
#[derive(Debug, Clone)]
pub struct GroundingExample {
    pub id: String,
    pub video: VideoFeatureSequence,
    pub query: QueryTokens,
    pub gold_time: TimeInterval,
    pub gold_idx: BoundaryIndices,
}

/// One stored example: annotation plus its feature matrix.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub time: TimeInterval,
    pub query: String,
    pub features: VideoFeatureSequence,
}

/// A split: all records share the feature count `t` and dimension `d_v`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: String,
    pub t: usize,
    pub d_v: usize,
    pub records: Vec<DatasetRecord>,
    /// Provenance hash of whatever configuration produced this split.
    pub config_hash: Option<String>,
}

impl DatasetManifest {
    pub fn new(
        split: impl Into<String>,
        t: usize,
        d_v: usize,
        records: Vec<DatasetRecord>,
    ) -> Result<Self> {
        let split = split.into();
        for r in &records {
            if r.features.t() != t || r.features.d_v() != d_v {
                return Err(Error::DimensionMismatch {
                    id: r.id.clone(),
                    expected: format!("{t}x{d_v}"),
                    got: format!("{}x{}", r.features.t(), r.features.d_v()),
                });
            }
            r.time.validate()?;
        }
        Ok(DatasetManifest { split, t, d_v, records, config_hash: None })
    }

    pub fn queries(&self) -> Vec<String> {
        self.records.iter().map(|r| r.query.clone()).collect()
    }

    /// Tokenize queries and derive gold indices for every record.
    pub fn prepare(&self, tokens: &TokenVocab) -> Result<Vec<GroundingExample>> {
        self.records
            .iter()
            .map(|r| {
                let ids = tokens.encode(&r.query);
                let ids = if ids.is_empty() { vec![0] } else { ids };
                Ok(GroundingExample {
                    id: r.id.clone(),
                    video: r.features.clone(),
                    query: QueryTokens { tokens: ids, raw_text: r.query.clone() },
                    gold_time: r.time,
                    gold_idx: convert_time_to_index(&r.time, self.t)?,
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    split: String,
    t: usize,
    d_v: usize,
    annotations: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRow {
    id: String,
    t_start: f64,
    t_end: f64,
    duration: f64,
    query: String,
    feature_file: String,
    feature_rows: usize,
    feature_dim: usize,
}

fn write_feature_file(path: &Path, id: &str, features: &Mat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |r: std::io::Result<()>| r.map_err(|e| Error::io(path, e));
    io(w.write_all(FEATURE_MAGIC))?;
    io(w.write_all(&(features.nrows() as u32).to_le_bytes()))?;
    io(w.write_all(&(features.ncols() as u32).to_le_bytes()))?;
    io(w.write_all(&[0u8; 4]))?; // reserved, pads the header to 16 bytes
    for &v in features.iter() {
        io(w.write_all(&(v as f32).to_le_bytes()))?;
    }
    io(w.flush())?;
    let _ = id;
    Ok(())
}

fn read_feature_file(path: &Path, id: &str) -> Result<Mat> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| Error::BadFeatureHeader {
        id: id.to_string(),
        detail: "file shorter than 16-byte header".into(),
    })?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(Error::BadFeatureHeader {
            id: id.to_string(),
            detail: format!("bad magic {:?}", &header[0..4]),
        });
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let expected = rows * cols * 4;
    let mut bytes = Vec::with_capacity(expected);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedFeatures {
            id: id.to_string(),
            expected,
            got: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Mat::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::BadFeatureHeader { id: id.to_string(), detail: e.to_string() })
}

/// Write a split under `dir` as `<split>.manifest.json`,
/// `<split>.annotations.jsonl`, and `features/<id>.ivgf`.
/// Returns the manifest path.
pub fn save_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let ann_name = format!("{}.annotations.jsonl", manifest.split);
    let ann_path = dir.join(&ann_name);
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &manifest.records {
        let feature_file = format!("features/{}.ivgf", rec.id);
        write_feature_file(&dir.join(&feature_file), &rec.id, &rec.features.features)?;
        let row = AnnotationRow {
            id: rec.id.clone(),
            t_start: rec.time.start_s,
            t_end: rec.time.end_s,
            duration: rec.time.duration_s,
            query: rec.query.clone(),
            feature_file,
            feature_rows: rec.features.t(),
            feature_dim: rec.features.d_v(),
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::json(&rec.id, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&ann_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&ann_path, e))?;

    let mf = ManifestFile {
        split: manifest.split.clone(),
        t: manifest.t,
        d_v: manifest.d_v,
        annotations: ann_name,
        config_hash: manifest.config_hash.clone(),
    };
    let manifest_path = dir.join(format!("{}.manifest.json", manifest.split));
    let json = serde_json::to_string_pretty(&mf).map_err(|e| Error::json("manifest", e))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Load a split from its manifest path; feature matrices are read eagerly
/// and validated against the annotation and manifest dimensions.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mf: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let ann_path = dir.join(&mf.annotations);
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;

    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: AnnotationRow = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", ann_path.display(), lineno + 1), e))?;
        if row.feature_rows != mf.t || row.feature_dim != mf.d_v {
            return Err(Error::DimensionMismatch {
                id: row.id,
                expected: format!("{}x{}", mf.t, mf.d_v),
                got: format!("{}x{}", row.feature_rows, row.feature_dim),
            });
        }
        let features = read_feature_file(&dir.join(&row.feature_file), &row.id)?;
        if features.nrows() != row.feature_rows || features.ncols() != row.feature_dim {
            return Err(Error::DimensionMismatch {
                id: row.id,
                expected: format!("{}x{}", row.feature_rows, row.feature_dim),
                got: format!("{}x{}", features.nrows(), features.ncols()),
            });
        }
        records.push(DatasetRecord {
            id: row.id,
            time: TimeInterval::new(row.t_start, row.t_end, row.duration)?,
            query: row.query,
            features: VideoFeatureSequence::new(features)?,
        });
    }
    let mut manifest = DatasetManifest::new(mf.split, mf.t, mf.d_v, records)?;
    manifest.config_hash = mf.config_hash;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(start: f64, end: f64, dur: f64) -> TimeInterval {
        TimeInterval::new(start, end, dur).unwrap()
    }

    #[test]
    fn full_span_maps_to_full_index_range() {
        for t in [2usize, 7, 128] {
            let b = convert_time_to_index(&iv(0.0, 120.0, 120.0), t).unwrap();
            assert_eq!((b.i_start, b.i_end), (0, t - 1));
        }
    }

    #[test]
    fn conversion_matches_direct_arithmetic() {
        // 128 * 61.4 / 120 = 65.493..., 128 * 64.5 / 120 = 68.8
        let b = convert_time_to_index(&iv(61.4, 64.5, 120.0), 128).unwrap();
        assert_eq!((b.i_start, b.i_end), (65, 69));

        // 4 * 5 / 10 = 2.0 exactly
        let b = convert_time_to_index(&iv(5.0, 5.0, 10.0), 4).unwrap();
        assert_eq!((b.i_start, b.i_end), (2, 2));
    }

    #[test]
    fn index_to_time_and_roundtrip() {
        let b = BoundaryIndices::new(2, 2, 4).unwrap();
        let t = convert_index_to_time(&b, 10.0).unwrap();
        assert_eq!((t.start_s, t.end_s), (5.0, 5.0));

        let b = BoundaryIndices::new(0, 6, 7).unwrap();
        let t = convert_index_to_time(&b, 10.0).unwrap();
        assert_eq!(t.start_s, 0.0);
        assert!((t.end_s - 10.0 * 6.0 / 7.0).abs() < 1e-12);

        let b = BoundaryIndices::new(65, 69, 128).unwrap();
        let t = convert_index_to_time(&b, 120.0).unwrap();
        let back = convert_time_to_index(&t, 128).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn zero_duration_is_rejected() {
        let iv = TimeInterval { start_s: 0.0, end_s: 0.0, duration_s: 0.0 };
        assert!(matches!(convert_time_to_index(&iv, 8), Err(Error::InvalidInterval(_))));
    }

    proptest! {
        #[test]
        fn indices_always_in_range(
            t in 2usize..512,
            dur in 0.1f64..1e4,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let interval = iv(lo * dur, hi * dur, dur);
            let idx = convert_time_to_index(&interval, t).unwrap();
            prop_assert!(idx.i_start <= idx.i_end);
            prop_assert!(idx.i_end <= t - 1);
        }

        #[test]
        fn start_index_is_monotone_in_start_time(
            t in 2usize..512,
            dur in 0.1f64..1e4,
            a in 0.0f64..1.0,
            bump in 0.0f64..0.5,
        ) {
            let s1 = a * dur * 0.5;
            let s2 = s1 + bump * dur * 0.5;
            let i1 = convert_time_to_index(&iv(s1, dur, dur), t).unwrap();
            let i2 = convert_time_to_index(&iv(s2, dur, dur), t).unwrap();
            prop_assert!(i1.i_start <= i2.i_start);
        }
    }

    fn small_manifest() -> DatasetManifest {
        let mk = |id: &str, seed: f64| DatasetRecord {
            id: id.to_string(),
            time: iv(1.0, 3.0, 8.0),
            query: format!("person holds a vacuum {id}"),
            features: VideoFeatureSequence::new(Mat::from_shape_fn((4, 3), |(r, c)| {
                // values exactly representable in f32
                ((r * 3 + c) as f32 * 0.25 + seed as f32) as f64
            }))
            .unwrap(),
        };
        DatasetManifest::new("train", 4, 3, vec![mk("ex0", 0.0), mk("ex1", 1.0), mk("ex2", 2.0)])
            .unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_manifest();
        let path = save_dataset(&manifest, dir.path()).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.split, manifest.split);
        assert_eq!(loaded.t, manifest.t);
        assert_eq!(loaded.d_v, manifest.d_v);
        assert_eq!(loaded.records.len(), manifest.records.len());
        for (a, b) in loaded.records.iter().zip(&manifest.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.query, b.query);
            assert_eq!(a.time, b.time);
            assert_eq!(a.features.features, b.features.features);
        }
    }

    #[test]
    fn empty_manifest_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest::new("empty", 4, 3, vec![]).unwrap();
        let path = save_dataset(&manifest, dir.path()).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.records.is_empty());
    }

    #[test]
    fn dimension_mismatch_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_manifest();
        let path = save_dataset(&manifest, dir.path()).unwrap();

        // rewrite ex1's feature file with one column fewer than the manifest says
        let bad = Mat::zeros((4, 2));
        write_feature_file(&dir.path().join("features/ex1.ivgf"), "ex1", &bad).unwrap();
        match load_dataset(&path) {
            Err(Error::DimensionMismatch { id, .. }) => assert_eq!(id, "ex1"),
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_features_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_manifest();
        let path = save_dataset(&manifest, dir.path()).unwrap();

        let feat = dir.path().join("features/ex2.ivgf");
        let bytes = fs::read(&feat).unwrap();
        fs::write(&feat, &bytes[..bytes.len() - 4]).unwrap();
        match load_dataset(&path) {
            Err(Error::TruncatedFeatures { id, .. }) => assert_eq!(id, "ex2"),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_manifest();
        let path = save_dataset(&manifest, dir.path()).unwrap();

        let feat = dir.path().join("features/ex0.ivgf");
        let mut bytes = fs::read(&feat).unwrap();
        bytes[0] = b'X';
        fs::write(&feat, &bytes).unwrap();
        match load_dataset(&path) {
            Err(Error::BadFeatureHeader { id, .. }) => assert_eq!(id, "ex0"),
            other => panic!("expected header error, got {other:?}"),
        }
    }

    #[test]
    fn prepare_builds_gold_indices() {
        let manifest = small_manifest();
        let tv = TokenVocab::build(&manifest.queries());
        let examples = manifest.prepare(&tv).unwrap();
        for ex in &examples {
            assert_eq!(ex.gold_idx, convert_time_to_index(&ex.gold_time, 4).unwrap());
            assert!(ex.query.tokens.iter().all(|&t| t < tv.len()));
        }
    }
}
