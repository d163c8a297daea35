//! Byte-level token streams: tokenization, packing into training windows,
//! weighted corpus mixing, the synthetic clean/noise corpus, and the `RHOT`
//! stream file format.

mod format;
mod mix;
mod pack;
mod synth;

pub use format::{read_stream, stream_from_bytes, stream_to_bytes, write_stream, STREAM_MAGIC, STREAM_VERSION};
pub use mix::{mix, mix_streams, MixComponent, MixSpec};
pub use pack::{pack, PackPlan, PackedBatch};
pub use synth::{synth_corpus, MarkovSource, ALPHABET};

use crate::binio::Digest32;
use crate::error::{Error, Result};

/// Byte-level vocabulary: ids 0..=255 are raw bytes, followed by three
/// special ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const PAD: u32 = 258;
    pub const BYTE_LEVEL_SIZE: u32 = 259;

    pub fn byte_level() -> Self {
        Vocabulary {
            size: Self::BYTE_LEVEL_SIZE,
        }
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn is_special(id: u32) -> bool {
        (Self::BOS..=Self::PAD).contains(&id)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::byte_level()
    }
}

/// Per-token provenance tag as stored in the label block of a stream file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpanLabel {
    Clean,
    Noise,
    /// Index of the mix component the token came from.
    Source(u8),
}

impl SpanLabel {
    pub fn to_byte(self) -> u8 {
        match self {
            SpanLabel::Clean => 0,
            SpanLabel::Noise => 1,
            SpanLabel::Source(i) => 2u8.saturating_add(i),
        }
    }

    pub fn from_byte(b: u8) -> Self {
        match b {
            0 => SpanLabel::Clean,
            1 => SpanLabel::Noise,
            n => SpanLabel::Source(n - 2),
        }
    }
}

/// Flat token sequence plus optional per-token labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    vocab_size: u32,
    tokens: Vec<u32>,
    labels: Option<Vec<u8>>,
}

impl TokenStream {
    pub fn new(vocab_size: u32, tokens: Vec<u32>) -> Result<Self> {
        Self::with_labels(vocab_size, tokens, None)
    }

    pub fn with_labels(vocab_size: u32, tokens: Vec<u32>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                position,
                vocab_size,
            });
        }
        if let Some(l) = &labels {
            if l.len() != tokens.len() {
                return Err(Error::Shape(format!(
                    "label block has {} entries for {} tokens",
                    l.len(),
                    tokens.len()
                )));
            }
        }
        Ok(TokenStream {
            vocab_size,
            tokens,
            labels,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn label_at(&self, i: usize) -> Option<SpanLabel> {
        self.labels.as_ref().map(|l| SpanLabel::from_byte(l[i]))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keep only the first `n` tokens (and labels).
    pub fn truncated(&self, n: usize) -> TokenStream {
        let n = n.min(self.len());
        TokenStream {
            vocab_size: self.vocab_size,
            tokens: self.tokens[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// Digest over vocabulary size and token ids. Labels are excluded: they
    /// never influence scoring or training.
    pub fn content_hash(&self) -> Digest32 {
        let mut buf = Vec::with_capacity(12 + self.tokens.len() * 4);
        buf.extend_from_slice(&self.vocab_size.to_le_bytes());
        buf.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        Digest32::of(&buf)
    }

    /// Split into EOS-terminated documents. A trailing run without EOS is
    /// returned as a final document.
    pub fn documents(&self) -> Vec<std::ops::Range<usize>> {
        let mut docs = Vec::new();
        let mut start = 0;
        for (i, &t) in self.tokens.iter().enumerate() {
            if t == Vocabulary::EOS {
                docs.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.tokens.len() {
            docs.push(start..self.tokens.len());
        }
        docs
    }
}

/// `BOS + bytes + EOS`. Total for byte-level vocabularies.
pub fn tokenize(text: &[u8], vocab: Vocabulary) -> TokenStream {
    let mut tokens = Vec::with_capacity(text.len() + 2);
    tokens.push(Vocabulary::BOS);
    tokens.extend(text.iter().map(|&b| b as u32));
    tokens.push(Vocabulary::EOS);
    TokenStream {
        vocab_size: vocab.size(),
        tokens,
        labels: None,
    }
}

/// Concatenate several documents into one stream.
pub fn tokenize_documents<'a>(docs: impl IntoIterator<Item = &'a [u8]>, vocab: Vocabulary) -> TokenStream {
    let mut tokens = Vec::new();
    for d in docs {
        tokens.push(Vocabulary::BOS);
        tokens.extend(d.iter().map(|&b| b as u32));
        tokens.push(Vocabulary::EOS);
    }
    TokenStream {
        vocab_size: vocab.size(),
        tokens,
        labels: None,
    }
}

/// Inverse of [`tokenize`]: byte ids are emitted, special ids are dropped.
pub fn detokenize(stream: &TokenStream) -> Vec<u8> {
    stream
        .tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_bos_eos() {
        let s = tokenize(b"", Vocabulary::byte_level());
        assert_eq!(s.tokens(), &[256, 257]);
    }

    #[test]
    fn bytes_map_to_ids() {
        let s = tokenize(b"ab", Vocabulary::byte_level());
        assert_eq!(s.tokens(), &[256, 97, 98, 257]);
        assert_eq!(s.vocab_size(), 259);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let err = TokenStream::new(10, vec![1, 2, 10]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 10, position: 2, .. }));
    }

    #[test]
    fn label_length_must_match() {
        assert!(TokenStream::with_labels(259, vec![1, 2], Some(vec![0])).is_err());
    }

    #[test]
    fn special_ids_do_not_collide_with_bytes() {
        for id in 0..256 {
            assert!(!Vocabulary::is_special(id));
        }
        assert!(Vocabulary::is_special(Vocabulary::BOS));
        assert!(Vocabulary::is_special(Vocabulary::PAD));
    }

    #[test]
    fn documents_split_on_eos() {
        let s = tokenize_documents([&b"ab"[..], &b"c"[..]], Vocabulary::byte_level());
        assert_eq!(s.documents(), vec![0..4, 4..7]);
        let cut = s.truncated(5);
        assert_eq!(cut.documents(), vec![0..4, 4..5]);
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(text in proptest::collection::vec(any::<u8>(), 0..512)) {
            let s = tokenize(&text, Vocabulary::byte_level());
            prop_assert_eq!(s.len(), text.len() + 2);
            prop_assert_eq!(detokenize(&s), text);
        }
    }
}
