//! Dataset persistence: a textual manifest followed by a little-endian
//! 32-bit-float pixel blob in the same file. Round trips are bit-exact.
//!
//! Layout:
//! ```text
//! imputelab-dataset v1
//! split = train
//! records = N
//! stats.mean = a,b,...       # shortest round-trip float text
//! stats.min = ...
//! stats.max = ...
//! record = <id> <label> <tp0> <tp1> <mask bits> <blob offset> <values csv>
//! ...                        # one line per record
//! blob = <float count>
//! <raw little-endian f32 payload>
//! ```
//!
//! Each record owns 2048 floats in the blob (tp0 then tp1, row major);
//! pixels of absent timepoints are stored too so reloading reproduces the
//! in-memory value exactly.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;

use super::{
    DataError, Dataset, FactorVector, ImagePatch, LongitudinalImage, MultiModalRecord,
    NormalizationStats, Split, FACTOR_COUNT, IMG_CHANNELS, IMG_SIZE,
};

const MAGIC: &str = "imputelab-dataset v1";
const FLOATS_PER_PATCH: usize = IMG_CHANNELS * IMG_SIZE * IMG_SIZE;
const FLOATS_PER_RECORD: usize = 2 * FLOATS_PER_PATCH;

fn fmt_floats(values: &[f32]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").unwrap();
    }
    s
}

fn parse_floats(s: &str, want: usize, pos: &str) -> Result<Vec<f32>, DataError> {
    let parts: Vec<&str> = if s.is_empty() { vec![] } else { s.split(',').collect() };
    if parts.len() != want {
        return Err(DataError::Corrupt {
            pos: pos.into(),
            msg: format!("expected {want} floats, got {}", parts.len()),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f32>().map_err(|e| DataError::Corrupt {
                pos: pos.into(),
                msg: format!("bad float {p:?}: {e}"),
            })
        })
        .collect()
}

/// Serialize a dataset to bytes (manifest text + pixel blob).
pub fn dataset_to_bytes(d: &Dataset) -> Vec<u8> {
    let mut manifest = String::new();
    writeln!(manifest, "{MAGIC}").unwrap();
    writeln!(manifest, "split = {}", d.split.as_str()).unwrap();
    writeln!(manifest, "records = {}", d.records.len()).unwrap();
    writeln!(manifest, "stats.mean = {}", fmt_floats(&d.stats.mean)).unwrap();
    writeln!(manifest, "stats.min = {}", fmt_floats(&d.stats.min)).unwrap();
    writeln!(manifest, "stats.max = {}", fmt_floats(&d.stats.max)).unwrap();
    for (i, rec) in d.records.iter().enumerate() {
        let mask: String = rec.factors.mask.iter().map(|&m| if m == 1 { '1' } else { '0' }).collect();
        writeln!(
            manifest,
            "record = {} {} {} {} {} {} {}",
            rec.id,
            rec.label,
            u8::from(rec.images.tp0_present),
            u8::from(rec.images.tp1_present),
            mask,
            i * FLOATS_PER_RECORD,
            fmt_floats(&rec.factors.values),
        )
        .unwrap();
    }
    writeln!(manifest, "blob = {}", d.records.len() * FLOATS_PER_RECORD).unwrap();

    let mut bytes = manifest.into_bytes();
    bytes.reserve(d.records.len() * FLOATS_PER_RECORD * 4);
    for rec in &d.records {
        for patch in [&rec.images.tp0, &rec.images.tp1] {
            for &px in patch.pixels.iter() {
                bytes.extend_from_slice(&px.to_le_bytes());
            }
        }
    }
    bytes
}

/// Parse a dataset from bytes produced by [`dataset_to_bytes`].
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, DataError> {
    // The manifest is the prefix up to and including the "blob = N" line.
    let mut line_start = 0usize;
    let mut line_no = 0usize;
    let mut split: Option<Split> = None;
    let mut declared_records: Option<usize> = None;
    let mut stats_mean: Option<Vec<f32>> = None;
    let mut stats_min: Option<Vec<f32>> = None;
    let mut stats_max: Option<Vec<f32>> = None;
    struct RecHeader {
        id: u32,
        label: u8,
        tp0: bool,
        tp1: bool,
        mask: Vec<u8>,
        offset: usize,
        values: Vec<f32>,
    }
    let mut headers: Vec<RecHeader> = Vec::new();
    let mut blob_floats: Option<usize> = None;
    let mut payload_start = 0usize;

    while line_start < bytes.len() {
        let rel_end = bytes[line_start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DataError::Corrupt {
                pos: format!("byte {line_start}"),
                msg: "manifest truncated before blob marker".into(),
            })?;
        let line_bytes = &bytes[line_start..line_start + rel_end];
        line_no += 1;
        let pos = format!("line {line_no}");
        let line = std::str::from_utf8(line_bytes).map_err(|_| DataError::Corrupt {
            pos: pos.clone(),
            msg: "manifest is not utf-8".into(),
        })?;
        line_start += rel_end + 1;

        if line_no == 1 {
            if line != MAGIC {
                return Err(DataError::Corrupt {
                    pos,
                    msg: format!("bad magic {line:?}"),
                });
            }
            continue;
        }
        let (key, value) = line.split_once(" = ").ok_or_else(|| DataError::Corrupt {
            pos: pos.clone(),
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        match key {
            "split" => split = Some(Split::parse(value)?),
            "records" => {
                declared_records = Some(value.parse().map_err(|_| DataError::Corrupt {
                    pos: pos.clone(),
                    msg: format!("bad record count {value:?}"),
                })?)
            }
            "stats.mean" => stats_mean = Some(parse_floats(value, FACTOR_COUNT, &pos)?),
            "stats.min" => stats_min = Some(parse_floats(value, FACTOR_COUNT, &pos)?),
            "stats.max" => stats_max = Some(parse_floats(value, FACTOR_COUNT, &pos)?),
            "record" => {
                let fields: Vec<&str> = value.split(' ').collect();
                if fields.len() != 7 {
                    return Err(DataError::Corrupt {
                        pos,
                        msg: format!("record line needs 7 fields, got {}", fields.len()),
                    });
                }
                let parse_int = |s: &str, what: &str| -> Result<u64, DataError> {
                    s.parse().map_err(|_| DataError::Corrupt {
                        pos: format!("line {line_no}"),
                        msg: format!("bad {what} {s:?}"),
                    })
                };
                let mask_str = fields[4];
                if mask_str.len() != FACTOR_COUNT
                    || mask_str.bytes().any(|b| b != b'0' && b != b'1')
                {
                    return Err(DataError::Corrupt {
                        pos,
                        msg: format!("bad mask bits {mask_str:?}"),
                    });
                }
                headers.push(RecHeader {
                    id: parse_int(fields[0], "id")? as u32,
                    label: parse_int(fields[1], "label")? as u8,
                    tp0: parse_int(fields[2], "tp0 flag")? == 1,
                    tp1: parse_int(fields[3], "tp1 flag")? == 1,
                    mask: mask_str.bytes().map(|b| b - b'0').collect(),
                    offset: parse_int(fields[5], "offset")? as usize,
                    values: parse_floats(fields[6], FACTOR_COUNT, &pos)?,
                });
            }
            "blob" => {
                blob_floats = Some(value.parse().map_err(|_| DataError::Corrupt {
                    pos: pos.clone(),
                    msg: format!("bad blob size {value:?}"),
                })?);
                payload_start = line_start;
                break;
            }
            other => {
                return Err(DataError::Corrupt {
                    pos,
                    msg: format!("unknown manifest key {other:?}"),
                })
            }
        }
    }

    let blob_floats = blob_floats.ok_or_else(|| DataError::Corrupt {
        pos: "end of manifest".into(),
        msg: "missing blob marker".into(),
    })?;
    let declared = declared_records.ok_or_else(|| DataError::Corrupt {
        pos: "manifest".into(),
        msg: "missing record count".into(),
    })?;
    if headers.len() != declared {
        return Err(DataError::Corrupt {
            pos: "manifest".into(),
            msg: format!("declared {declared} records, found {}", headers.len()),
        });
    }
    if blob_floats != headers.len() * FLOATS_PER_RECORD {
        return Err(DataError::Corrupt {
            pos: "blob marker".into(),
            msg: format!(
                "blob size {blob_floats} does not match {} records",
                headers.len()
            ),
        });
    }
    let payload = &bytes[payload_start..];
    if payload.len() != blob_floats * 4 {
        return Err(DataError::Corrupt {
            pos: format!("byte {payload_start}"),
            msg: format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                blob_floats * 4
            ),
        });
    }

    let stats = NormalizationStats {
        mean: stats_mean.ok_or_else(|| DataError::Corrupt {
            pos: "manifest".into(),
            msg: "missing stats.mean".into(),
        })?,
        min: stats_min.ok_or_else(|| DataError::Corrupt {
            pos: "manifest".into(),
            msg: "missing stats.min".into(),
        })?,
        max: stats_max.ok_or_else(|| DataError::Corrupt {
            pos: "manifest".into(),
            msg: "missing stats.max".into(),
        })?,
    };

    let read_patch = |float_offset: usize| -> Result<ImagePatch, DataError> {
        let start = float_offset * 4;
        let mut data = Vec::with_capacity(FLOATS_PER_PATCH);
        for i in 0..FLOATS_PER_PATCH {
            let at = start + i * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(raw));
        }
        Ok(ImagePatch {
            pixels: Array3::from_shape_vec((IMG_CHANNELS, IMG_SIZE, IMG_SIZE), data).unwrap(),
        })
    };

    let mut records = Vec::with_capacity(headers.len());
    for (i, h) in headers.iter().enumerate() {
        if h.offset != i * FLOATS_PER_RECORD {
            return Err(DataError::Corrupt {
                pos: format!("record {i}"),
                msg: format!("offset {} out of order", h.offset),
            });
        }
        records.push(MultiModalRecord {
            id: h.id,
            label: h.label,
            factors: FactorVector {
                values: h.values.clone(),
                mask: h.mask.clone(),
            },
            images: LongitudinalImage {
                tp0: read_patch(h.offset)?,
                tp1: read_patch(h.offset + FLOATS_PER_PATCH)?,
                tp0_present: h.tp0,
                tp1_present: h.tp1,
            },
        });
    }

    let mut seen = std::collections::HashSet::new();
    for rec in &records {
        if !seen.insert(rec.id) {
            return Err(DataError::Corrupt {
                pos: "manifest".into(),
                msg: format!("duplicate record id {}", rec.id),
            });
        }
    }

    Ok(Dataset {
        records,
        split: split.ok_or_else(|| DataError::Corrupt {
            pos: "manifest".into(),
            msg: "missing split".into(),
        })?,
        stats,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, dataset_to_bytes(d)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    dataset_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats() -> NormalizationStats {
        NormalizationStats {
            mean: vec![0.5; FACTOR_COUNT],
            min: vec![0.0; FACTOR_COUNT],
            max: vec![1.0; FACTOR_COUNT],
        }
    }

    fn record(id: u32, fill: f32) -> MultiModalRecord {
        let mut tp0 = ImagePatch::zeros();
        tp0.pixels.fill(fill);
        let mut tp1 = ImagePatch::zeros();
        tp1.pixels.fill(fill * 0.5);
        MultiModalRecord {
            id,
            label: (id % 2) as u8,
            factors: FactorVector {
                values: (0..FACTOR_COUNT).map(|i| fill + i as f32 * 0.01).collect(),
                mask: (0..FACTOR_COUNT).map(|i| (i % 2) as u8).collect(),
            },
            images: LongitudinalImage {
                tp0,
                tp1,
                tp0_present: true,
                tp1_present: id % 3 != 0,
            },
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let d = Dataset {
            records: vec![],
            split: Split::Test,
            stats: stats(),
        };
        let got = dataset_from_bytes(&dataset_to_bytes(&d)).unwrap();
        assert_eq!(d, got);
    }

    #[test]
    fn one_record_round_trips_exactly() {
        let d = Dataset {
            records: vec![record(7, 0.123_456_79)],
            split: Split::Train,
            stats: stats(),
        };
        let got = dataset_from_bytes(&dataset_to_bytes(&d)).unwrap();
        assert_eq!(d, got);
    }

    #[test]
    fn reserialization_is_byte_identical() {
        let d = Dataset {
            records: (0..50).map(|i| record(i, i as f32 * 0.017)).collect(),
            split: Split::Validation,
            stats: stats(),
        };
        let a = dataset_to_bytes(&d);
        let b = dataset_to_bytes(&dataset_from_bytes(&a).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_reports_position() {
        let d = Dataset {
            records: vec![record(1, 0.5)],
            split: Split::Train,
            stats: stats(),
        };
        let mut bytes = dataset_to_bytes(&d);
        bytes.truncate(bytes.len() - 10);
        let err = dataset_from_bytes(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte"), "{msg}");
    }

    #[test]
    fn corrupt_header_rejected() {
        let d = Dataset {
            records: vec![],
            split: Split::Train,
            stats: stats(),
        };
        let mut bytes = dataset_to_bytes(&d);
        bytes[0] = b'x';
        let err = dataset_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_identity(ids in proptest::collection::vec(0u32..10_000, 0..12)) {
            let mut uniq: Vec<u32> = ids;
            uniq.sort_unstable();
            uniq.dedup();
            let d = Dataset {
                records: uniq.iter().map(|&i| record(i, (i as f32).sin().abs())).collect(),
                split: Split::Train,
                stats: stats(),
            };
            let got = dataset_from_bytes(&dataset_to_bytes(&d)).unwrap();
            prop_assert_eq!(d, got);
        }
    }
}
