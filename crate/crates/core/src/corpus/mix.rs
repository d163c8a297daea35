//! Weighted document-level interleaving of several token streams.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_stream, SpanLabel, TokenStream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixComponent {
    pub name: String,
    pub path: PathBuf,
    pub weight: f64,
}

/// Mix recipe, read from a TOML file:
///
/// ```toml
/// seed = 1
/// [[component]]
/// name = "math"
/// path = "math.rhot"
/// weight = 6
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub seed: u64,
    #[serde(rename = "component")]
    pub components: Vec<MixComponent>,
}

impl MixSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("mix spec: {e}")))
    }

    /// Load a spec file; relative component paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            for c in &mut spec.components {
                if c.path.is_relative() {
                    c.path = dir.join(&c.path);
                }
            }
        }
        Ok(spec)
    }
}

/// Read every component stream and interleave them.
pub fn mix(spec: &MixSpec) -> Result<TokenStream> {
    let streams = spec
        .components
        .iter()
        .map(|c| read_stream(&c.path))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
    mix_streams(&streams, &weights, spec.seed)
}

/// Interleave EOS-delimited documents: each draw picks a component with
/// probability proportional to its weight and takes that component's next
/// document. Stops as soon as any component runs out. Output labels record
/// the source index of every token.
pub fn mix_streams(streams: &[TokenStream], weights: &[f64], seed: u64) -> Result<TokenStream> {
    if streams.is_empty() || streams.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} streams with {} weights",
            streams.len(),
            weights.len()
        )));
    }
    if streams.len() > 250 {
        return Err(Error::InvalidArgument("at most 250 mix components".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("mix weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("mix weights must sum to a positive value".into()));
    }
    let vocab = streams[0].vocab_size();
    for s in &streams[1..] {
        if s.vocab_size() != vocab {
            return Err(Error::VocabMismatch {
                left: vocab,
                right: s.vocab_size(),
            });
        }
    }

    let docs: Vec<_> = streams.iter().map(|s| s.documents()).collect();
    let mut cursor = vec![0usize; streams.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    let mut labels = Vec::new();

    loop {
        if cursor.iter().zip(&docs).any(|(&c, d)| c >= d.len()) {
            break;
        }
        let mut x = rng.gen::<f64>() * total;
        let mut pick = streams.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 && x < *w {
                pick = i;
                break;
            }
            x -= w;
        }
        // Guard against the rounding tail landing on a zero-weight component.
        while weights[pick] == 0.0 {
            pick -= 1;
        }
        let range = docs[pick][cursor[pick]].clone();
        cursor[pick] += 1;
        tokens.extend_from_slice(&streams[pick].tokens()[range.clone()]);
        labels.extend(std::iter::repeat(SpanLabel::Source(pick as u8).to_byte()).take(range.len()));
    }
    TokenStream::with_labels(vocab, tokens, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize_documents, Vocabulary};

    fn docs_stream(n_docs: usize, fill: u8) -> TokenStream {
        let doc = vec![fill; 9];
        tokenize_documents((0..n_docs).map(|_| &doc[..]), Vocabulary::byte_level())
    }

    #[test]
    fn single_component_is_identity() {
        let s = docs_stream(20, 7);
        let out = mix_streams(std::slice::from_ref(&s), &[3.5], 9).unwrap();
        assert_eq!(out.tokens(), s.tokens());
    }

    #[test]
    fn vocab_mismatch_is_an_error() {
        let a = docs_stream(3, 1);
        let b = TokenStream::new(300, vec![256, 1, 257]).unwrap();
        assert!(matches!(mix_streams(&[a, b], &[1.0, 1.0], 0), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn same_seed_same_output() {
        let parts = [docs_stream(50, 1), docs_stream(50, 2)];
        let a = mix_streams(&parts, &[1.0, 2.0], 4).unwrap();
        let b = mix_streams(&parts, &[1.0, 2.0], 4).unwrap();
        assert_eq!(a, b);
        let c = mix_streams(&parts, &[1.0, 2.0], 5).unwrap();
        assert_ne!(a.tokens(), c.tokens());
    }

    #[test]
    fn label_counts_match_consumed_documents() {
        let parts = [docs_stream(40, 1), docs_stream(40, 2), docs_stream(40, 3)];
        let out = mix_streams(&parts, &[6.0, 3.0, 1.0], 11).unwrap();
        let labels = out.labels().unwrap();
        let mut consumed = 0;
        for (i, _) in parts.iter().enumerate() {
            let n = labels.iter().filter(|&&l| l == 2 + i as u8).count();
            assert_eq!(n % 11, 0);
            // every token labelled i really is component i's filler byte or a special id
            for (t, l) in out.tokens().iter().zip(labels) {
                if *l == 2 + i as u8 && *t < 256 {
                    assert_eq!(*t, i as u32 + 1);
                }
            }
            consumed += n;
        }
        assert_eq!(consumed, out.len());
    }

    #[test]
    fn spec_parses_and_rejects_unknown_keys() {
        let spec = MixSpec::from_toml(
            "seed = 3\n[[component]]\nname = \"a\"\npath = \"a.rhot\"\nweight = 6\n",
        )
        .unwrap();
        assert_eq!(spec.components[0].weight, 6.0);
        assert!(MixSpec::from_toml("seed = 3\ncolour = 1\ncomponent = []\n").is_err());
    }
}
