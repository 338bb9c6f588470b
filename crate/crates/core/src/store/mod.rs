//! The `WHB1` hidden-state interchange format.
//!
//! A file is a fixed 25-byte header followed by `num_sentences` records.
//! Everything is little-endian.
//!
//! ```text
//! header:  magic "WHB1" | version u32 | num_layers u32 | hidden_dim u32
//!          | record_kind u8 | num_sentences u64
//! record:  sentence_id u64 | token_count u32 | payload f32 * len
//! ```
//!
//! For `TOKENS` records the payload is `num_layers * token_count * hidden_dim`
//! floats, layer-major, then token, then dimension. For `POOLED` records it is
//! `num_layers * 2 * hidden_dim` floats: per layer the first-token vector
//! followed by the mean over all tokens.

pub mod sidecar;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"WHB1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 25;
const RECORD_PREFIX_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"WHB1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown record kind {0}")]
    UnknownKind(u8),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("sentence {sentence_id}: non-finite value at payload offset {offset}")]
    NonFinite { sentence_id: u64, offset: usize },
    #[error("sentence {sentence_id}: {reason}")]
    DimensionMismatch { sentence_id: u64, reason: String },
    #[error("expected {expected} records, got {actual}")]
    CountMismatch { expected: u64, actual: u64 },
    #[error("unexpected trailing data after the last record")]
    TrailingData,
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RecordKind {
    Tokens,
    Pooled,
}

impl RecordKind {
    pub fn code(self) -> u8 {
        match self {
            RecordKind::Tokens => 0,
            RecordKind::Pooled => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(RecordKind::Tokens),
            1 => Ok(RecordKind::Pooled),
            other => Err(StoreError::UnknownKind(other)),
        }
    }
}

impl std::fmt::Display for RecordKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RecordKind::Tokens => "TOKENS",
            RecordKind::Pooled => "POOLED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenStateFileHeader {
    pub version: u32,
    /// Number of hidden-state layers including the embedding layer 0.
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub kind: RecordKind,
    pub num_sentences: u64,
}

impl HiddenStateFileHeader {
    pub fn new(num_layers: u32, hidden_dim: u32, kind: RecordKind, num_sentences: u64) -> Result<Self> {
        let header = Self {
            version: FORMAT_VERSION,
            num_layers,
            hidden_dim,
            kind,
            num_sentences,
        };
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(self.version));
        }
        if self.num_layers < 2 {
            return Err(StoreError::InvalidHeader(format!(
                "num_layers must be at least 2, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim == 0 {
            return Err(StoreError::InvalidHeader("hidden_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Payload length in floats for a record with `token_count` tokens.
    pub fn payload_len(&self, token_count: u32) -> usize {
        payload_len(self.kind, self.num_layers, self.hidden_dim, token_count)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.num_layers.to_le_bytes());
        out[12..16].copy_from_slice(&self.hidden_dim.to_le_bytes());
        out[16] = self.kind.code();
        out[17..25].copy_from_slice(&self.num_sentences.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_LEN]) -> Result<Self> {
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let header = Self {
            version: u32_at(4),
            num_layers: u32_at(8),
            hidden_dim: u32_at(12),
            kind: RecordKind::from_code(bytes[16])?,
            num_sentences: u64::from_le_bytes(bytes[17..25].try_into().unwrap()),
        };
        header.validate()?;
        Ok(header)
    }
}

fn payload_len(kind: RecordKind, num_layers: u32, hidden_dim: u32, token_count: u32) -> usize {
    let per_layer = match kind {
        RecordKind::Tokens => token_count as usize,
        RecordKind::Pooled => 2,
    };
    num_layers as usize * per_layer * hidden_dim as usize
}

/// One sentence's hidden states across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateRecord {
    sentence_id: u64,
    token_count: u32,
    kind: RecordKind,
    num_layers: u32,
    hidden_dim: u32,
    payload: Vec<f32>,
}

impl HiddenStateRecord {
    /// Builds a record from a flat payload laid out as described in the module docs.
    pub fn new(
        sentence_id: u64,
        kind: RecordKind,
        num_layers: u32,
        hidden_dim: u32,
        token_count: u32,
        payload: Vec<f32>,
    ) -> Result<Self> {
        let record = Self {
            sentence_id,
            token_count,
            kind,
            num_layers,
            hidden_dim,
            payload,
        };
        record.validate()?;
        Ok(record)
    }

    /// Builds a `TOKENS` record from `layers[layer][token][dim]`.
    pub fn from_tokens(sentence_id: u64, layers: &[Vec<Vec<f32>>]) -> Result<Self> {
        let mismatch = |reason: String| StoreError::DimensionMismatch { sentence_id, reason };
        let num_layers = layers.len();
        let token_count = layers.first().map_or(0, Vec::len);
        let hidden_dim = layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len);
        let mut payload = Vec::with_capacity(num_layers * token_count * hidden_dim);
        for (l, tokens) in layers.iter().enumerate() {
            if tokens.len() != token_count {
                return Err(mismatch(format!(
                    "layer {l} has {} tokens, expected {token_count}",
                    tokens.len()
                )));
            }
            for token in tokens {
                if token.len() != hidden_dim {
                    return Err(mismatch(format!(
                        "layer {l} has a {}-dim token, expected {hidden_dim}",
                        token.len()
                    )));
                }
                payload.extend_from_slice(token);
            }
        }
        Self::new(
            sentence_id,
            RecordKind::Tokens,
            num_layers as u32,
            hidden_dim as u32,
            token_count as u32,
            payload,
        )
    }

    /// Builds a `POOLED` record from per-layer `(first_token, mean)` vectors.
    pub fn from_pooled(sentence_id: u64, token_count: u32, layers: &[(Vec<f32>, Vec<f32>)]) -> Result<Self> {
        let hidden_dim = layers.first().map_or(0, |(cls, _)| cls.len());
        let mut payload = Vec::with_capacity(layers.len() * 2 * hidden_dim);
        for (l, (first, mean)) in layers.iter().enumerate() {
            if first.len() != hidden_dim || mean.len() != hidden_dim {
                return Err(StoreError::DimensionMismatch {
                    sentence_id,
                    reason: format!("layer {l} vectors do not have dimension {hidden_dim}"),
                });
            }
            payload.extend_from_slice(first);
            payload.extend_from_slice(mean);
        }
        Self::new(
            sentence_id,
            RecordKind::Pooled,
            layers.len() as u32,
            hidden_dim as u32,
            token_count,
            payload,
        )
    }

    fn validate(&self) -> Result<()> {
        let mismatch = |reason: String| StoreError::DimensionMismatch {
            sentence_id: self.sentence_id,
            reason,
        };
        if self.token_count == 0 {
            return Err(mismatch("token_count must be at least 1".into()));
        }
        if self.num_layers < 2 {
            return Err(mismatch(format!("num_layers must be at least 2, got {}", self.num_layers)));
        }
        if self.hidden_dim == 0 {
            return Err(mismatch("hidden_dim must be at least 1".into()));
        }
        let expected = payload_len(self.kind, self.num_layers, self.hidden_dim, self.token_count);
        if self.payload.len() != expected {
            return Err(mismatch(format!(
                "payload has {} floats, expected {expected}",
                self.payload.len()
            )));
        }
        if let Some(offset) = self.payload.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                sentence_id: self.sentence_id,
                offset,
            });
        }
        Ok(())
    }

    pub fn sentence_id(&self) -> u64 {
        self.sentence_id
    }

    pub fn token_count(&self) -> u32 {
        self.token_count
    }

    pub fn kind(&self) -> RecordKind {
        self.kind
    }

    pub fn num_layers(&self) -> u32 {
        self.num_layers
    }

    pub fn hidden_dim(&self) -> u32 {
        self.hidden_dim
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    fn layer_block(&self, layer: usize) -> &[f32] {
        let d = self.hidden_dim as usize;
        let width = match self.kind {
            RecordKind::Tokens => self.token_count as usize * d,
            RecordKind::Pooled => 2 * d,
        };
        &self.payload[layer * width..(layer + 1) * width]
    }

    /// The first token's vector (the `[CLS]` position) at `layer`.
    ///
    /// Panics if `layer >= num_layers`.
    pub fn first_token(&self, layer: usize) -> &[f32] {
        &self.layer_block(layer)[..self.hidden_dim as usize]
    }

    /// Token vectors at `layer`, one slice per token. `None` for `POOLED` records.
    pub fn tokens(&self, layer: usize) -> Option<std::slice::ChunksExact<'_, f32>> {
        match self.kind {
            RecordKind::Tokens => Some(self.layer_block(layer).chunks_exact(self.hidden_dim as usize)),
            RecordKind::Pooled => None,
        }
    }

    /// The stored mean-over-tokens vector at `layer`. `None` for `TOKENS` records.
    pub fn stored_mean(&self, layer: usize) -> Option<&[f32]> {
        match self.kind {
            RecordKind::Pooled => Some(&self.layer_block(layer)[self.hidden_dim as usize..]),
            RecordKind::Tokens => None,
        }
    }

    fn check_against(&self, header: &HiddenStateFileHeader) -> Result<()> {
        if self.kind != header.kind || self.num_layers != header.num_layers || self.hidden_dim != header.hidden_dim {
            return Err(StoreError::DimensionMismatch {
                sentence_id: self.sentence_id,
                reason: format!(
                    "record is {} with {} layers x {} dims, header says {} with {} layers x {} dims",
                    self.kind, self.num_layers, self.hidden_dim, header.kind, header.num_layers, header.hidden_dim
                ),
            });
        }
        Ok(())
    }
}

/// Streaming writer. Emits the header on construction and one record per call.
pub struct HiddenStateWriter<W: Write> {
    sink: W,
    header: HiddenStateFileHeader,
    written: u64,
    bytes: u64,
}

impl<W: Write> HiddenStateWriter<W> {
    pub fn new(mut sink: W, header: HiddenStateFileHeader) -> Result<Self> {
        header.validate()?;
        sink.write_all(&header.to_bytes())?;
        Ok(Self {
            sink,
            header,
            written: 0,
            bytes: HEADER_LEN as u64,
        })
    }

    pub fn write_record(&mut self, record: &HiddenStateRecord) -> Result<()> {
        record.check_against(&self.header)?;
        if self.written >= self.header.num_sentences {
            return Err(StoreError::CountMismatch {
                expected: self.header.num_sentences,
                actual: self.written + 1,
            });
        }
        let mut buf = Vec::with_capacity(RECORD_PREFIX_LEN + record.payload.len() * 4);
        buf.extend_from_slice(&record.sentence_id.to_le_bytes());
        buf.extend_from_slice(&record.token_count.to_le_bytes());
        for v in &record.payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.sink.write_all(&buf)?;
        self.written += 1;
        self.bytes += buf.len() as u64;
        Ok(())
    }

    /// Checks the record count against the header, flushes, and returns the sink
    /// together with the total number of bytes written.
    pub fn finish(mut self) -> Result<(W, u64)> {
        if self.written != self.header.num_sentences {
            return Err(StoreError::CountMismatch {
                expected: self.header.num_sentences,
                actual: self.written,
            });
        }
        self.sink.flush()?;
        Ok((self.sink, self.bytes))
    }
}

/// Writes `header` followed by `records` and returns the byte count.
pub fn write_hidden_states<'a, W, I>(records: I, header: &HiddenStateFileHeader, sink: W) -> Result<u64>
where
    W: Write,
    I: IntoIterator<Item = &'a HiddenStateRecord>,
{
    let mut writer = HiddenStateWriter::new(sink, *header)?;
    for record in records {
        writer.write_record(record)?;
    }
    Ok(writer.finish()?.1)
}

pub fn write_hidden_states_file<'a, I>(path: impl AsRef<Path>, header: &HiddenStateFileHeader, records: I) -> Result<u64>
where
    I: IntoIterator<Item = &'a HiddenStateRecord>,
{
    let file = File::create(path)?;
    write_hidden_states(records, header, BufWriter::new(file))
}

/// Streaming reader over a `WHB1` byte stream.
///
/// Holds at most one record's payload in memory at a time.
pub struct HiddenStateReader<R: Read> {
    source: R,
    header: HiddenStateFileHeader,
    remaining: u64,
    failed: bool,
}

impl HiddenStateReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> HiddenStateReader<R> {
    pub fn new(mut source: R) -> Result<Self> {
        let mut buf = [0u8; HEADER_LEN];
        read_exact_or_truncated(&mut source, &mut buf, "header")?;
        let header = HiddenStateFileHeader::from_bytes(&buf)?;
        Ok(Self {
            source,
            header,
            remaining: header.num_sentences,
            failed: false,
        })
    }

    pub fn header(&self) -> &HiddenStateFileHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<HiddenStateRecord> {
        let index = self.header.num_sentences - self.remaining;
        let mut prefix = [0u8; RECORD_PREFIX_LEN];
        read_exact_or_truncated(&mut self.source, &mut prefix, &format!("record {index} prefix"))?;
        let sentence_id = u64::from_le_bytes(prefix[0..8].try_into().unwrap());
        let token_count = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
        if token_count == 0 {
            return Err(StoreError::DimensionMismatch {
                sentence_id,
                reason: "token_count must be at least 1".into(),
            });
        }
        let floats = self.header.payload_len(token_count);
        let byte_len = floats as u64 * 4;
        // grown incrementally so a corrupt token_count surfaces as truncation, not a huge allocation
        let mut raw = Vec::new();
        (&mut self.source).take(byte_len).read_to_end(&mut raw)?;
        if (raw.len() as u64) < byte_len {
            return Err(StoreError::Truncated(format!(
                "sentence {sentence_id}: payload has {} of {byte_len} bytes",
                raw.len()
            )));
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        HiddenStateRecord::new(
            sentence_id,
            self.header.kind,
            self.header.num_layers,
            self.header.hidden_dim,
            token_count,
            payload,
        )
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        loop {
            match self.source.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(StoreError::TrailingData),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl<R: Read> Iterator for HiddenStateReader<R> {
    type Item = Result<HiddenStateRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.remaining == 0 {
            // checked once, then the iterator is exhausted
            self.failed = true;
            return self.check_trailing().err().map(Err);
        }
        let result = self.read_record();
        match result {
            Ok(_) => self.remaining -= 1,
            Err(_) => self.failed = true,
        }
        Some(result)
    }
}

/// Reads a whole stream and returns the header plus the lazy record sequence.
pub fn read_hidden_states<R: Read>(source: R) -> Result<(HiddenStateFileHeader, HiddenStateReader<R>)> {
    let reader = HiddenStateReader::new(source)?;
    Ok((*reader.header(), reader))
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::Truncated(format!("unexpected end of file in {what}")),
        _ => StoreError::Io(e),
    })
}
