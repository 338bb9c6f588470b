//! JSON sidecar mapping sentence ids to their raw text.
//!
//! Only for human inspection; nothing in the numeric path reads it. Exporters
//! may attach extra top-level keys (tokenizer notes, truncation flags), which
//! are preserved on a read/write cycle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SentenceSidecar {
    pub sentences: BTreeMap<u64, String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl SentenceSidecar {
    /// Sidecar for a sentence table whose index is the sentence id.
    pub fn from_table(sentences: &[String]) -> Self {
        Self {
            sentences: sentences
                .iter()
                .enumerate()
                .map(|(id, s)| (id as u64, s.clone()))
                .collect(),
            extra: Default::default(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()
    }

    pub fn read(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}
