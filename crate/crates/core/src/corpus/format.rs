//! `RHOT` token stream files.
//!
//! ```text
//! "RHOT" | version u32 | vocab_size u32 | token_count u64 | tokens u32[]
//! [ "LBLS" | count u64 | labels u8[] ]
//! ```
//! All integers little-endian.

use std::path::Path;

use super::TokenStream;
use crate::binio::{put_u32, put_u64, write_atomic, Reader};
use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"RHOT";
pub const STREAM_VERSION: u32 = 1;
const LABEL_MAGIC: &[u8; 4] = b"LBLS";

pub fn stream_to_bytes(stream: &TokenStream) -> Vec<u8> {
    let labels = stream.labels();
    let mut out = Vec::with_capacity(20 + stream.len() * 4 + labels.map_or(0, |l| 12 + l.len()));
    out.extend_from_slice(STREAM_MAGIC);
    put_u32(&mut out, STREAM_VERSION);
    put_u32(&mut out, stream.vocab_size());
    put_u64(&mut out, stream.len() as u64);
    for &t in stream.tokens() {
        put_u32(&mut out, t);
    }
    if let Some(l) = labels {
        out.extend_from_slice(LABEL_MAGIC);
        put_u64(&mut out, l.len() as u64);
        out.extend_from_slice(l);
    }
    out
}

pub fn stream_from_bytes(bytes: &[u8]) -> Result<TokenStream> {
    let mut r = Reader::new(bytes, "token stream");
    r.magic(STREAM_MAGIC)?;
    r.version(STREAM_VERSION)?;
    let vocab_size = r.u32()?;
    let n = r.count(4)?;
    let tokens = r.u32_vec(n)?;
    let labels = if r.at_end() {
        None
    } else {
        r.magic(LABEL_MAGIC)?;
        let m = r.count(1)?;
        if m != n {
            return Err(Error::Malformed(format!(
                "label block has {m} entries for {n} tokens"
            )));
        }
        Some(r.take(m)?.to_vec())
    };
    r.expect_end()?;
    TokenStream::with_labels(vocab_size, tokens, labels)
}

pub fn write_stream(path: impl AsRef<Path>, stream: &TokenStream) -> Result<()> {
    write_atomic(path.as_ref(), &stream_to_bytes(stream))
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<TokenStream> {
    stream_from_bytes(&std::fs::read(path)?)
}
