//! PM2F feature files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PM2F"
//! 4       4     version (1)
//! 8       4     record_count
//! 12      4     n_tokens (0 for a text-feature file)
//! 16      4     d_cls
//! 20      4     d_tok
//! 24      4     class_count
//! 28      ...   records: label u32, d_cls f32, n_tokens * d_tok f32 (row-major)
//! ```
//!
//! Every integer and float is little-endian.

use std::path::Path;

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, ParseErrorKind, Result};
use crate::linalg::Mat;
use crate::prompts::TextFeature;
use crate::sopool::TokenMatrix;

pub const PM2F_MAGIC: [u8; 4] = *b"PM2F";
pub const PM2F_VERSION: u32 = 1;
pub const PM2F_HEADER_LEN: u64 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pm2fHeader {
    pub version: u32,
    pub record_count: u32,
    pub n_tokens: u32,
    pub d_cls: u32,
    pub d_tok: u32,
    pub class_count: u32,
}

impl Pm2fHeader {
    pub fn new(record_count: u32, n_tokens: u32, d_cls: u32, d_tok: u32, class_count: u32) -> Self {
        Self {
            version: PM2F_VERSION,
            record_count,
            n_tokens,
            d_cls,
            d_tok,
            class_count,
        }
    }

    pub fn is_text(&self) -> bool {
        self.n_tokens == 0
    }

    pub fn token_values(&self) -> u64 {
        self.n_tokens as u64 * self.d_tok as u64
    }

    pub fn record_len(&self) -> u64 {
        4 + 4 * self.d_cls as u64 + 4 * self.token_values()
    }

    pub fn file_len(&self) -> u64 {
        PM2F_HEADER_LEN + self.record_count as u64 * self.record_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub label: u32,
    pub cls: Vec<f32>,
    /// `n_tokens x d_tok`, row-major; empty in text files.
    pub tokens: Vec<f32>,
}

fn check_records(header: &Pm2fHeader, records: &[FeatureRecord]) -> Result<()> {
    if header.version != PM2F_VERSION {
        return Err(Error::Validation(format!("cannot write PM2F version {}", header.version)));
    }
    if header.record_count as usize != records.len() {
        return Err(Error::Validation(format!(
            "header declares {} records, {} given",
            header.record_count,
            records.len()
        )));
    }
    for (i, r) in records.iter().enumerate() {
        if r.label >= header.class_count {
            return Err(Error::Validation(format!(
                "record {i}: label {} >= class_count {}",
                r.label, header.class_count
            )));
        }
        if r.cls.len() as u64 != header.d_cls as u64 || r.tokens.len() as u64 != header.token_values() {
            return Err(Error::Validation(format!(
                "record {i}: {} class-token and {} token values, header wants {} and {}",
                r.cls.len(),
                r.tokens.len(),
                header.d_cls,
                header.token_values()
            )));
        }
        if r.cls.iter().chain(&r.tokens).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("record {i} has a non-finite value")));
        }
    }
    Ok(())
}

/// Serialises a file image. Validation happens before any byte is produced.
pub fn encode_pm2f(header: &Pm2fHeader, records: &[FeatureRecord]) -> Result<Vec<u8>> {
    check_records(header, records)?;
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(&PM2F_MAGIC);
    for v in [
        header.version,
        header.record_count,
        header.n_tokens,
        header.d_cls,
        header.d_tok,
        header.class_count,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in records {
        out.extend_from_slice(&r.label.to_le_bytes());
        for v in r.cls.iter().chain(&r.tokens) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn parse_err(kind: ParseErrorKind, offset: u64) -> Error {
    Error::Parse { kind, offset }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_pm2f(bytes: &[u8]) -> Result<(Pm2fHeader, Vec<FeatureRecord>)> {
    let available = bytes.len() as u64;
    if bytes.len() >= 4 && bytes[..4] != PM2F_MAGIC {
        return Err(parse_err(
            ParseErrorKind::BadMagic(bytes[..4].try_into().expect("4 bytes")),
            0,
        ));
    }
    if available < PM2F_HEADER_LEN {
        return Err(parse_err(
            ParseErrorKind::Truncated {
                needed: PM2F_HEADER_LEN,
                available,
            },
            available,
        ));
    }
    let version = u32_at(bytes, 4);
    if version != PM2F_VERSION {
        return Err(parse_err(ParseErrorKind::UnsupportedVersion(version), 4));
    }
    let header = Pm2fHeader {
        version,
        record_count: u32_at(bytes, 8),
        n_tokens: u32_at(bytes, 12),
        d_cls: u32_at(bytes, 16),
        d_tok: u32_at(bytes, 20),
        class_count: u32_at(bytes, 24),
    };
    let rec_len = header.record_len();
    let needed = header.file_len();
    if available < needed {
        // offset of the first record that does not fit
        let complete = (available - PM2F_HEADER_LEN) / rec_len;
        return Err(parse_err(
            ParseErrorKind::Truncated { needed, available },
            PM2F_HEADER_LEN + complete * rec_len,
        ));
    }
    if available > needed {
        return Err(parse_err(ParseErrorKind::TrailingBytes(available - needed), needed));
    }
    let n_cls = header.d_cls as usize;
    let n_tok = header.token_values() as usize;
    let mut records = Vec::with_capacity(header.record_count as usize);
    let mut at = PM2F_HEADER_LEN as usize;
    let read_floats = |at: &mut usize, n: usize| -> Result<Vec<f32>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let x = f32::from_le_bytes(bytes[*at..*at + 4].try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(parse_err(ParseErrorKind::NonFinite, *at as u64));
            }
            v.push(x);
            *at += 4;
        }
        Ok(v)
    };
    for _ in 0..header.record_count {
        let start = at;
        let label = u32_at(bytes, at);
        if label >= header.class_count {
            return Err(parse_err(
                ParseErrorKind::LabelOutOfRange {
                    label,
                    class_count: header.class_count,
                },
                start as u64,
            ));
        }
        at += 4;
        let cls = read_floats(&mut at, n_cls)?;
        let tokens = read_floats(&mut at, n_tok)?;
        records.push(FeatureRecord { label, cls, tokens });
    }
    Ok((header, records))
}

pub fn write_pm2f(path: &Path, header: &Pm2fHeader, records: &[FeatureRecord]) -> Result<()> {
    let bytes = encode_pm2f(header, records)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pm2f(path: &Path) -> Result<(Pm2fHeader, Vec<FeatureRecord>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pm2f(&bytes)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} does not fit in u32")))
}

/// Image records (f64 values are rounded to f32).
pub fn dataset_to_pm2f(data: &Dataset) -> Result<(Pm2fHeader, Vec<FeatureRecord>)> {
    let header = Pm2fHeader::new(
        to_u32(data.len(), "record count")?,
        to_u32(data.n_tokens(), "n_tokens")?,
        to_u32(data.d_cls(), "d_cls")?,
        to_u32(data.d_tok(), "d_tok")?,
        to_u32(data.classes(), "class count")?,
    );
    let records = data
        .samples()
        .iter()
        .map(|s| FeatureRecord {
            label: s.label as u32,
            cls: s.cls.iter().map(|&v| v as f32).collect(),
            tokens: s.tokens.as_mat().data().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    Ok((header, records))
}

pub fn pm2f_to_dataset(header: &Pm2fHeader, records: &[FeatureRecord]) -> Result<Dataset> {
    if header.is_text() {
        return Err(Error::Validation("expected an image feature file, got a text file (n_tokens = 0)".into()));
    }
    let (n, d) = (header.n_tokens as usize, header.d_tok as usize);
    let samples = records
        .iter()
        .map(|r| {
            let tokens = Mat::new(n, d, r.tokens.iter().map(|&v| f64::from(v)).collect())?;
            Ok(Sample {
                label: r.label as usize,
                cls: r.cls.iter().map(|&v| f64::from(v)).collect(),
                tokens: TokenMatrix::new(tokens)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(header.class_count as usize, samples)
}

pub fn text_features_to_pm2f(features: &[TextFeature], classes: usize) -> Result<(Pm2fHeader, Vec<FeatureRecord>)> {
    let d = features.first().map_or(0, |f| f.feature.len());
    let header = Pm2fHeader::new(to_u32(features.len(), "record count")?, 0, to_u32(d, "d_cls")?, 0, to_u32(classes, "class count")?);
    let records = features
        .iter()
        .map(|f| FeatureRecord {
            label: f.label as u32,
            cls: f.feature.iter().map(|&v| v as f32).collect(),
            tokens: Vec::new(),
        })
        .collect();
    Ok((header, records))
}

pub fn pm2f_to_text_features(header: &Pm2fHeader, records: &[FeatureRecord]) -> Result<Vec<TextFeature>> {
    if !header.is_text() {
        return Err(Error::Validation(format!(
            "expected a text feature file (n_tokens = 0), got n_tokens = {}",
            header.n_tokens
        )));
    }
    Ok(records
        .iter()
        .map(|r| TextFeature {
            label: r.label as usize,
            feature: r.cls.iter().map(|&v| f64::from(v)).collect(),
        })
        .collect())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (h, r) = read_pm2f(path)?;
    pm2f_to_dataset(&h, &r)
}

pub fn read_text_features(path: &Path) -> Result<(usize, Vec<TextFeature>)> {
    let (h, r) = read_pm2f(path)?;
    Ok((h.class_count as usize, pm2f_to_text_features(&h, &r)?))
}
