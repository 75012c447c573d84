//! JSON-Lines trace files.
//!
//! Line 1 is the header `{"L":..,"N":..,"K":..,"P":..,"prompt_tokens":..,"seed":..,"generator":..}`,
//! then one line per token `{"t":..,"layers":[{"act":[..],"sc":[..],"pred":[..]}, ..]}`.
//! Prompt tokens come first. Floats are written in shortest round-trip form, so
//! reading a written trace gives back the same values bit for bit.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use splitcache_core::trace::validate_record;
use splitcache_core::{ActivationTrace, TokenRecord, TraceError, TraceHeader};

#[derive(Debug, thiserror::Error)]
pub enum TraceFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: empty trace file, expected a header line")]
    Empty { path: String },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error("{path}:1: bad header: {reason}")]
    Header { path: String, reason: String },
    #[error("{path}:{line}: {source}")]
    Record { path: String, line: usize, source: TraceError },
    #[error("{path}:{line}: expected token index {expected}, found {found}")]
    TokenIndex { path: String, line: usize, expected: u64, found: u64 },
}

fn check_header(h: &TraceHeader) -> Result<(), String> {
    if h.layers == 0 {
        return Err("L must be >= 1".into());
    }
    if h.activated == 0 || h.activated >= h.experts {
        return Err(format!("need 1 <= K < N, got K={} N={}", h.activated, h.experts));
    }
    if h.prediction_len == 0 || h.prediction_len > h.experts {
        return Err(format!("need 1 <= P <= N, got P={} N={}", h.prediction_len, h.experts));
    }
    Ok(())
}

/// Streaming reader: parses the header eagerly, then yields validated records.
pub struct TraceReader<R> {
    lines: io::Lines<R>,
    header: TraceHeader,
    path: String,
    line: usize,
    next_index: u64,
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, TraceFileError> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|source| TraceFileError::Io { path: name.clone(), source })?;
        Self::new(BufReader::new(file), name)
    }
}

impl<R: BufRead> TraceReader<R> {
    /// `path` only labels error messages.
    pub fn new(reader: R, path: impl Into<String>) -> Result<Self, TraceFileError> {
        let path = path.into();
        let mut lines = reader.lines();
        let first = match lines.next() {
            None => return Err(TraceFileError::Empty { path }),
            Some(line) => line.map_err(|source| TraceFileError::Io { path: path.clone(), source })?,
        };
        let header: TraceHeader = serde_json::from_str(&first)
            .map_err(|source| TraceFileError::Json { path: path.clone(), line: 1, source })?;
        check_header(&header).map_err(|reason| TraceFileError::Header { path: path.clone(), reason })?;
        Ok(Self { lines, header, path, line: 1, next_index: 0 })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn parse(&mut self, text: &str) -> Result<TokenRecord, TraceFileError> {
        let (path, line) = (&self.path, self.line);
        let record: TokenRecord =
            serde_json::from_str(text).map_err(|source| TraceFileError::Json { path: path.clone(), line, source })?;
        if record.token_index != self.next_index {
            return Err(TraceFileError::TokenIndex {
                path: path.clone(),
                line,
                expected: self.next_index,
                found: record.token_index,
            });
        }
        validate_record(&self.header, &record).map_err(|source| TraceFileError::Record { path: path.clone(), line, source })?;
        self.next_index += 1;
        Ok(record)
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TokenRecord, TraceFileError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(text) => text,
                Err(source) => return Some(Err(TraceFileError::Io { path: self.path.clone(), source })),
            };
            self.line += 1;
            // A trailing blank line is tolerated; blank lines between records are not.
            if text.is_empty() {
                continue;
            }
            return Some(self.parse(&text));
        }
    }
}

pub fn read_trace_from<R: BufRead>(reader: R, path: &str) -> Result<ActivationTrace, TraceFileError> {
    let mut reader = TraceReader::new(reader, path)?;
    let tokens = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(ActivationTrace { header: reader.header, tokens })
}

pub fn read_trace(path: &Path) -> Result<ActivationTrace, TraceFileError> {
    let reader = TraceReader::open(path)?;
    let header = reader.header.clone();
    let tokens = reader.collect::<Result<Vec<_>, _>>()?;
    Ok(ActivationTrace { header, tokens })
}

pub fn write_trace_to<W: Write>(mut w: W, trace: &ActivationTrace) -> io::Result<()> {
    serde_json::to_writer(&mut w, &trace.header)?;
    w.write_all(b"\n")?;
    for record in &trace.tokens {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_trace(path: &Path, trace: &ActivationTrace) -> Result<(), TraceFileError> {
    let io_err = |source| TraceFileError::Io { path: path.display().to_string(), source };
    let file = File::create(path).map_err(io_err)?;
    write_trace_to(BufWriter::new(file), trace).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"L":2,"N":4,"K":1,"P":2,"prompt_tokens":0,"seed":null,"generator":null}"#;
    const GOOD: &str = r#"{"t":0,"layers":[{"act":[1],"sc":[0.5],"pred":[1,2]},{"act":[3],"sc":[0.25],"pred":[0,3]}]}"#;

    fn read(text: &str) -> Result<ActivationTrace, TraceFileError> {
        read_trace_from(text.as_bytes(), "mem")
    }

    #[test]
    fn reads_minimal_trace() {
        let trace = read(&format!("{HEADER}\n{GOOD}\n")).unwrap();
        assert_eq!(trace.tokens.len(), 1);
        assert_eq!(trace.tokens[0].per_layer[1].scores, vec![0.25]);
    }

    #[test]
    fn rejects_broken_header() {
        assert!(matches!(read(""), Err(TraceFileError::Empty { .. })));
        assert!(matches!(read("{\"L\":2}\n"), Err(TraceFileError::Json { line: 1, .. })));
        let bad = HEADER.replace("\"K\":1", "\"K\":4");
        assert!(matches!(read(&bad), Err(TraceFileError::Header { .. })));
    }

    #[test]
    fn out_of_order_token_index() {
        let second = GOOD.replace("\"t\":0", "\"t\":5");
        let err = read(&format!("{HEADER}\n{GOOD}\n{second}\n")).unwrap_err();
        assert!(matches!(err, TraceFileError::TokenIndex { line: 3, expected: 1, found: 5, .. }), "{err}");
    }
}
