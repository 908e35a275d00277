//! File formats: feature tables (CSV and binary "DFEF"), token tables,
//! group maps, Bag-of-Words histograms and training loss logs.
//!
//! CSV is the canonical interop format: header `f_0..f_{dim-1}` with an
//! optional leading `id` column. Floats are written with Rust's shortest
//! round-trip formatting, so identical data produces identical bytes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::LossRow;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const FEATURES_MAGIC: [u8; 4] = *b"DFEF";
pub const FEATURES_VERSION: u32 = 1;

// ── feature tables ───────────────────────────────────────────────────

/// Sniffs CSV vs binary by magic and reads the whole table.
pub fn read_features(path: impl AsRef<Path>) -> Result<(Vec<String>, Tensor)> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    {
        let mut f = std::fs::File::open(path)?;
        let n = f.read(&mut head)?;
        if n < 4 {
            // tiny files can only be (possibly empty) CSV
            return read_features_csv(path);
        }
    }
    if head == FEATURES_MAGIC {
        read_features_binary(path)
    } else {
        read_features_csv(path)
    }
}

pub fn read_features_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Tensor)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Parse(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let mut fields: Vec<&str> = headers.iter().collect();
    let has_id = fields.first() == Some(&"id");
    if has_id {
        fields.remove(0);
    }
    let dim = fields.len();
    for (i, f) in fields.iter().enumerate() {
        let expect = format!("f_{i}");
        if *f != expect {
            return Err(Error::Parse(format!(
                "feature header column {i} is `{f}`, expected `{expect}`"
            )));
        }
    }
    if dim == 0 {
        return Err(Error::Parse("no feature columns in header".into()));
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let mut it = record.iter();
        let id = if has_id {
            it.next()
                .ok_or_else(|| Error::Parse(format!("row {row_idx}: missing id")))?
                .to_string()
        } else {
            row_idx.to_string()
        };
        let mut count = 0;
        for v in it {
            let parsed: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {row_idx}: bad number `{v}`")))?;
            data.push(parsed);
            count += 1;
        }
        if count != dim {
            return Err(Error::Parse(format!(
                "row {row_idx}: {count} values, expected {dim}"
            )));
        }
        ids.push(id);
    }
    let n = ids.len();
    Ok((ids, Tensor::new(vec![n, dim], data)))
}

pub fn write_features_csv(
    path: impl AsRef<Path>,
    ids: Option<&[String]>,
    rows: &Tensor,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let (n, dim) = (rows.shape[0], rows.shape[1]);
    let mut header = String::new();
    if ids.is_some() {
        header.push_str("id");
    }
    for j in 0..dim {
        if !header.is_empty() {
            header.push(',');
        }
        header.push_str(&format!("f_{j}"));
    }
    writeln!(w, "{header}")?;
    for r in 0..n {
        let mut line = String::new();
        if let Some(ids) = ids {
            line.push_str(&ids[r]);
        }
        for &v in rows.row(r) {
            if !line.is_empty() {
                line.push(',');
            }
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_binary(path: impl AsRef<Path>) -> Result<(Vec<String>, Tensor)> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != FEATURES_MAGIC {
        return Err(Error::BadMagic { expected: FEATURES_MAGIC, got: magic });
    }
    let version = read_u32(&mut r)?;
    if version != FEATURES_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: FEATURES_VERSION });
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 || count.saturating_mul(dim) > (1 << 30) {
        return Err(Error::Corrupt(format!("implausible feature header: {count} x {dim}")));
    }
    let mut data = vec![0f32; count * dim];
    let mut raw = vec![0u8; count * dim * 4];
    read_exact(&mut r, &mut raw)?;
    for (o, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
        *o = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    let ids = (0..count).map(|i| i.to_string()).collect();
    Ok((ids, Tensor::from_f32(vec![count, dim], &data)))
}

pub fn write_features_binary(path: impl AsRef<Path>, rows: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&FEATURES_MAGIC)?;
    w.write_all(&FEATURES_VERSION.to_le_bytes())?;
    w.write_all(&(rows.shape[0] as u32).to_le_bytes())?;
    w.write_all(&(rows.shape[1] as u32).to_le_bytes())?;
    for &v in &rows.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

// ── token tables ─────────────────────────────────────────────────────

/// `id,k_1,..,k_L` with a header.
pub fn write_tokens_csv(path: impl AsRef<Path>, rows: &[(String, Vec<usize>)]) -> Result<()> {
    let stages = rows.first().map(|(_, t)| t.len()).unwrap_or(0);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("id");
    for i in 1..=stages.max(1) {
        header.push_str(&format!(",k_{i}"));
    }
    writeln!(w, "{header}")?;
    for (id, tokens) in rows {
        let mut line = id.clone();
        for t in tokens {
            line.push_str(&format!(",{t}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tokens_csv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<usize>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Parse(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().next() != Some("id") {
        return Err(Error::Parse("token table must start with an `id` column".into()));
    }
    let mut out = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let mut it = record.iter();
        let id = it
            .next()
            .ok_or_else(|| Error::Parse(format!("row {row_idx}: missing id")))?
            .to_string();
        let tokens: Vec<usize> = it
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {row_idx}: bad token `{v}`")))
            })
            .collect::<Result<_>>()?;
        out.push((id, tokens));
    }
    Ok(out)
}

// ── group maps and labels ────────────────────────────────────────────

/// `id,group[,label]` with a header.
pub fn read_groups_csv(
    path: impl AsRef<Path>,
) -> Result<(HashMap<String, String>, HashMap<String, String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Parse(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "group" {
        return Err(Error::Parse("group map needs `id,group[,label]` columns".into()));
    }
    let has_label = cols.len() > 2 && cols[2] == "label";
    let mut groups = HashMap::new();
    let mut labels = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let id = record.get(0).unwrap_or_default().to_string();
        let group = record.get(1).unwrap_or_default().to_string();
        if has_label {
            if let Some(l) = record.get(2) {
                labels.insert(group.clone(), l.to_string());
            }
        }
        groups.insert(id, group);
    }
    Ok((groups, labels))
}

pub fn write_groups_csv(
    path: impl AsRef<Path>,
    rows: &[(String, String, Option<String>)],
) -> Result<()> {
    let has_label = rows.iter().any(|(_, _, l)| l.is_some());
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "id,group{}", if has_label { ",label" } else { "" })?;
    for (id, group, label) in rows {
        if has_label {
            writeln!(w, "{id},{group},{}", label.as_deref().unwrap_or(""))?;
        } else {
            writeln!(w, "{id},{group}")?;
        }
    }
    w.flush()?;
    Ok(())
}

// ── histograms and logs ──────────────────────────────────────────────

/// `group,p_0,..,p_{K-1}`.
pub fn write_bow_csv(path: impl AsRef<Path>, hist: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let k = hist.values().next().map(|v| v.len()).unwrap_or(0);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("group");
    for i in 0..k {
        header.push_str(&format!(",p_{i}"));
    }
    writeln!(w, "{header}")?;
    for (group, p) in hist {
        let mut line = group.clone();
        for v in p {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bow_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let mut it = record.iter();
        let group = it
            .next()
            .ok_or_else(|| Error::Parse("empty histogram row".into()))?
            .to_string();
        let p: Vec<f64> = it
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad histogram value `{v}`")))
            })
            .collect::<Result<_>>()?;
        out.insert(group, p);
    }
    Ok(out)
}

/// `epoch,recon,commit,orth,l1,total`.
pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRow]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,recon,commit,orth,l1,total")?;
    for row in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.epoch, row.recon, row.commit, row.orth, row.l1, row.total
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `threshold,fraction` percentile curves.
pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "threshold,fraction")?;
    for (t, f) in curve {
        writeln!(w, "{t},{f}")?;
    }
    w.flush()?;
    Ok(())
}

/// `vertex,d` per-vertex heatmap distances.
pub fn write_distances_csv(path: impl AsRef<Path>, distances: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "vertex,d")?;
    for (v, d) in distances.iter().enumerate() {
        writeln!(w, "{v},{d}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corrupt("unexpected end of file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_csv_roundtrip_with_and_without_ids() {
        let dir = tempfile::tempdir().unwrap();
        let rows = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.1, 0.2, -0.3]);
        let ids = vec!["a".to_string(), "b".to_string()];

        let p1 = dir.path().join("with_id.csv");
        write_features_csv(&p1, Some(&ids), &rows).unwrap();
        let (rids, rrows) = read_features(&p1).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(rrows, rows);

        let p2 = dir.path().join("no_id.csv");
        write_features_csv(&p2, None, &rows).unwrap();
        let (rids, rrows) = read_features(&p2).unwrap();
        assert_eq!(rids, vec!["0".to_string(), "1".to_string()]);
        assert_eq!(rrows, rows);
    }

    #[test]
    fn feature_binary_roundtrip_and_sniffing() {
        let dir = tempfile::tempdir().unwrap();
        let rows = Tensor::new(vec![2, 2], vec![1.5, -0.25, 0.125, 2.0]);
        let p = dir.path().join("feats.dfef");
        write_features_binary(&p, &rows).unwrap();
        let (_, back) = read_features(&p).unwrap();
        assert_eq!(back, rows); // dyadic values survive f32 exactly

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[3] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        // not the magic -> parsed as CSV -> parse error, not a crash
        assert!(read_features(&p).is_err());
    }

    #[test]
    fn bad_header_and_ragged_rows_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "f_0,f_9\n1,2\n").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Parse(_))));
        std::fs::write(&p, "f_0,f_1\n1\n").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Parse(_))));
        std::fs::write(&p, "f_0,f_1\n1,abc\n").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Parse(_))));
    }

    #[test]
    fn empty_feature_csv_is_an_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        std::fs::write(&p, "id,f_0,f_1\n").unwrap();
        let (ids, rows) = read_features(&p).unwrap();
        assert!(ids.is_empty());
        assert_eq!(rows.shape, vec![0, 2]);
    }

    #[test]
    fn token_table_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tokens.csv");
        let rows = vec![
            ("0".to_string(), vec![3, 1, 4]),
            ("1".to_string(), vec![1, 5, 9]),
        ];
        write_tokens_csv(&p, &rows).unwrap();
        assert_eq!(read_tokens_csv(&p).unwrap(), rows);
    }

    #[test]
    fn group_map_roundtrip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("groups.csv");
        let rows = vec![
            ("0".to_string(), "v0".to_string(), Some("smile".to_string())),
            ("1".to_string(), "v0".to_string(), Some("smile".to_string())),
            ("2".to_string(), "v1".to_string(), Some("frown".to_string())),
        ];
        write_groups_csv(&p, &rows).unwrap();
        let (groups, labels) = read_groups_csv(&p).unwrap();
        assert_eq!(groups["2"], "v1");
        assert_eq!(labels["v1"], "frown");
    }

    #[test]
    fn loss_log_format_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let log = vec![LossRow {
            epoch: 0,
            recon: 1.5,
            commit: 0.25,
            orth: 0.0,
            l1: 2.0,
            total: 1.7625,
        }];
        write_loss_log(&p, &log).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch,recon,commit,orth,l1,total\n0,1.5,0.25,0,2,1.7625\n");
    }
}
