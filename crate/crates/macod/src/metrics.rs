//! Append-only JSON-lines metrics streams.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Line-buffered JSONL writer; one record per line, flushed per write so a
/// crash loses at most the current record.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Reads a whole JSONL file; every line must parse.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Rec {
        episode: u64,
        value: f64,
    }

    #[test]
    fn write_read_append_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        {
            let mut w = JsonlWriter::create(&path).unwrap();
            w.write(&Rec {
                episode: 1,
                value: 0.5,
            })
            .unwrap();
        }
        {
            let mut w = JsonlWriter::append(&path).unwrap();
            w.write(&Rec {
                episode: 2,
                value: -1.0,
            })
            .unwrap();
        }
        let recs: Vec<Rec> = read_jsonl(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].episode, 2);
    }

    #[test]
    fn malformed_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"episode\":1,\"value\":2.0}\nnot json\n").unwrap();
        assert!(read_jsonl::<Rec>(&path).is_err());
    }
}
