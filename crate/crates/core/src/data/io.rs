//! `EDS1` dataset files and CSV import/export.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! offset  field
//! 0       magic "EDS1"
//! 4       u32 M (samples)
//! 8       u32 N (channels)
//! 12      u32 T (time points)
//! 16      f64 fs
//! 24      u8  label kind (0 = class, 1 = envelope)
//! 25      u32 class count (0 for envelope)
//! 29      f32 samples[M·N·T]            ([M][N][T])
//! ..      u32 labels[M]  | f32 envelope[M·T]
//! ..      u8  split tags[M]             (0 train, 1 val, 2 test)
//! ..      u32 truth count, u32 truth channels[count]
//! ```
//!
//! CSV rows are `label,v_0,…,v_{N·T-1}` with values in channel-major order
//! and no header. Imported samples are all tagged `Train`.

use std::io::Write;
use std::path::Path;

use super::{EpochDataset, Labels, Split};
use crate::error::{Error, Result};
use crate::models::checkpoint::Cursor;

const MAGIC: &[u8; 4] = b"EDS1";

pub fn encode(ds: &EpochDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut out = Vec::with_capacity(64 + ds.samples.len() * 4);
    out.extend_from_slice(MAGIC);
    for d in [ds.n_samples, ds.n_channels, ds.n_times] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&ds.fs.to_le_bytes());
    match &ds.labels {
        Labels::Class { classes, .. } => {
            out.push(0);
            out.extend_from_slice(&(*classes as u32).to_le_bytes());
        }
        Labels::Envelope(_) => {
            out.push(1);
            out.extend_from_slice(&0u32.to_le_bytes());
        }
    }
    for &v in &ds.samples {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match &ds.labels {
        Labels::Class { labels, .. } => {
            for &l in labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        Labels::Envelope(y) => {
            for &v in y {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out.extend(ds.splits.iter().map(|s| s.code()));
    out.extend_from_slice(&(ds.truth_channels.len() as u32).to_le_bytes());
    for &c in &ds.truth_channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    Ok(out)
}

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn decode(buf: &[u8]) -> Result<EpochDataset> {
    let mut c = Cursor::new(buf);
    if c.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic (expected EDS1)"));
    }
    let m = c.u32("sample count")? as usize;
    let n = c.u32("channel count")? as usize;
    let t = c.u32("time count")? as usize;
    let fs = c.f64("sampling rate")?;
    let kind_at = c.offset();
    let kind = c.u8("label kind")?;
    let classes = c.u32("class count")? as usize;
    if m == 0 || n == 0 || t == 0 {
        return Err(format_err(4, format!("empty dimensions {m}×{n}×{t}")));
    }
    let total = m
        .checked_mul(n)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| format_err(4, "dimensions overflow"))?;
    if total > (buf.len() / 4) {
        return Err(format_err(
            c.offset(),
            format!("header declares {total} values but file has {} bytes", buf.len()),
        ));
    }
    let samples = (0..total)
        .map(|_| c.f32("samples").map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    let labels = match kind {
        0 => {
            let labels = (0..m)
                .map(|_| c.u32("labels").map(|l| l as usize))
                .collect::<Result<Vec<_>>>()?;
            Labels::Class { labels, classes }
        }
        1 => Labels::Envelope(
            (0..m * t)
                .map(|_| c.f32("envelope").map(f64::from))
                .collect::<Result<Vec<_>>>()?,
        ),
        other => return Err(format_err(kind_at, format!("unknown label kind {other}"))),
    };
    let mut splits = Vec::with_capacity(m);
    for _ in 0..m {
        let at = c.offset();
        let code = c.u8("split tags")?;
        splits.push(Split::from_code(code).ok_or_else(|| format_err(at, format!("bad split tag {code}")))?);
    }
    let nt = c.u32("truth count")? as usize;
    let truth_at = c.offset();
    let truth_channels = (0..nt)
        .map(|_| c.u32("truth channels").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    c.finish()?;
    let ds = EpochDataset {
        n_samples: m,
        n_channels: n,
        n_times: t,
        fs,
        samples,
        labels,
        splits,
        truth_channels,
    };
    ds.validate().map_err(|e| format_err(truth_at, e.to_string()))?;
    Ok(ds)
}

pub fn save(path: &Path, ds: &EpochDataset) -> Result<()> {
    let bytes = encode(ds)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EpochDataset> {
    decode(&std::fs::read(path)?)
}

/// Write `label,values…` rows (class labels only).
pub fn export_csv(ds: &EpochDataset, path: &Path) -> Result<()> {
    let labels = ds
        .class_labels()
        .ok_or_else(|| Error::InvalidInput("CSV export needs class labels".into()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for (i, &l) in labels.iter().enumerate() {
        let mut row = Vec::with_capacity(1 + ds.n_channels * ds.n_times);
        row.push(l.to_string());
        row.extend(ds.sample(i).iter().map(|v| (*v as f32).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a samples×(1+N·T) CSV matrix whose first column is the class label.
pub fn import_csv(path: &Path, n_channels: usize, n_times: usize, fs: f64) -> Result<EpochDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let width = 1 + n_channels * n_times;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        if rec.len() != width {
            return Err(format_err(
                offset,
                format!("row {row_idx} has {} fields, expected {width}", rec.len()),
            ));
        }
        labels.push(
            rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| format_err(offset, format!("row {row_idx} label: {e}")))?,
        );
        for f in rec.iter().skip(1) {
            let v: f32 = f
                .trim()
                .parse()
                .map_err(|e| format_err(offset, format!("row {row_idx}: {e}")))?;
            samples.push(f64::from(v));
        }
    }
    let m = labels.len();
    let classes = labels.iter().max().map_or(0, |&l| l + 1);
    let ds = EpochDataset {
        n_samples: m,
        n_channels,
        n_times,
        fs,
        samples,
        labels: Labels::Class { labels, classes },
        splits: vec![Split::Train; m],
        truth_channels: Vec::new(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_envelope, synth_motor, SynthConfig};
    use crate::rng;

    #[test]
    fn round_trip_motor_and_envelope() {
        let cfg = SynthConfig {
            samples: 12,
            ..SynthConfig::motor_preset()
        };
        let mut ds = synth_motor(&cfg, &mut rng::seeded(1)).unwrap();
        ds.splits[3] = Split::Test;
        ds.splits[4] = Split::Val;
        assert_eq!(decode(&encode(&ds).unwrap()).unwrap(), ds);
        let env = synth_envelope(
            &SynthConfig {
                samples: 5,
                ..SynthConfig::envelope_preset()
            },
            &mut rng::seeded(1),
        )
        .unwrap();
        assert_eq!(decode(&encode(&env).unwrap()).unwrap(), env);
    }

    #[test]
    fn truncation_and_corruption_report_offsets() {
        let cfg = SynthConfig {
            samples: 4,
            channels: 2,
            informative: 1,
            ..SynthConfig::motor_preset()
        };
        let ds = synth_motor(&cfg, &mut rng::seeded(1)).unwrap();
        let bytes = encode(&ds).unwrap();
        match decode(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 29),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad_kind = bytes.clone();
        bad_kind[24] = 7;
        assert!(matches!(decode(&bad_kind), Err(Error::Format { offset: 24, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
    }
}
