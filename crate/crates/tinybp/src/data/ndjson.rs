//! Newline-delimited JSON record IO. One record per line; blank lines are
//! skipped. `parse_record` is the untrusted entry point: it never allocates
//! more than a small multiple of the input length and validates every field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Record;
use crate::error::{Error, Result};

pub fn parse_record(line: &[u8]) -> Result<Record> {
    let rec: Record = serde_json::from_slice(line)?;
    rec.validate()?;
    Ok(rec)
}

pub fn read_records(reader: impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(line.as_bytes())
            .map_err(|e| Error::Parse(format!("line {}: {e}", idx + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Parse("no records in input".into()));
    }
    Ok(out)
}

pub fn read_records_path(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let f = File::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    read_records(BufReader::new(f))
}

pub fn write_records(mut w: impl Write, records: &[Record]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_records_path(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Record {
        Record {
            subject_id: "s1".into(),
            fs_hz: 125.0,
            ppg: vec![0.1, 0.2, 0.3],
            abp: Some(vec![80.0, 120.0, 90.0]),
            sbp: Some(120.0),
            dbp: Some(80.0),
        }
    }

    #[test]
    fn roundtrip_through_text() {
        let recs = vec![
            sample(),
            Record {
                subject_id: "s2".into(),
                abp: None,
                ..sample()
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn missing_optional_fields_parse() {
        let rec =
            parse_record(br#"{"subject_id":"a","fs_hz":125.0,"ppg":[1.0,2.0]}"#).unwrap();
        assert!(rec.abp.is_none() && rec.sbp.is_none());
        assert!(!rec.has_labels());
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in [
            &b"not json"[..],
            br#"{"subject_id":"","fs_hz":125.0,"ppg":[1.0]}"#,
            br#"{"subject_id":"a","fs_hz":0.0,"ppg":[1.0]}"#,
            br#"{"subject_id":"a","fs_hz":125.0,"ppg":[]}"#,
            br#"{"subject_id":"a","fs_hz":125.0,"ppg":[1e999]}"#,
            br#"{"subject_id":"a","fs_hz":125.0,"ppg":[1.0],"abp":[1.0,2.0]}"#,
            br#"{"subject_id":"a","fs_hz":125.0,"ppg":[1.0],"sbp":80.0,"dbp":120.0}"#,
        ] {
            assert!(parse_record(bad).is_err(), "{}", String::from_utf8_lossy(bad));
        }
    }

    #[test]
    fn line_errors_carry_line_numbers() {
        let text = "{\"subject_id\":\"a\",\"fs_hz\":125.0,\"ppg\":[1.0]}\n\nnope\n";
        let err = read_records(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
