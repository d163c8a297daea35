//! Corpus construction: synthetic-source oracles, mixing proportions, and
//! packing / tokenization invariants.

use proptest::prelude::*;
use slm_core::corpus::{
    detokenize, mix_streams, pack, synth_corpus, tokenize, tokenize_documents, MarkovSource, PackPlan, SpanLabel,
    TokenStream, Vocabulary, ALPHABET,
};

#[test]
fn noise_share_of_the_standard_corpus() {
    let s = synth_corpus(0.7, 2_000_000, 1);
    assert_eq!(s.len(), 2_000_000);
    let noise = s.labels().unwrap().iter().filter(|&&l| l == SpanLabel::Noise.to_byte()).count();
    let share = noise as f64 / s.len() as f64;
    assert!((0.29..=0.31).contains(&share), "noise share {share}");
}

/// Independent entropy-rate oracle: damped power iteration on the
/// 1,600-state context chain, then the stationary-weighted successor
/// entropy, all recomputed here from `prob`.
fn oracle_entropy_rate(src: &MarkovSource) -> f64 {
    let n = src.alphabet_size();
    let mut pi = vec![1.0 / (n * n) as f64; n * n];
    for _ in 0..4000 {
        let mut next = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    next[b * n + c] += pi[a * n + b] * src.prob(a, b, c);
                }
            }
        }
        for (p, q) in pi.iter_mut().zip(&next) {
            *p = 0.5 * (*p + q);
        }
    }
    let mut h = 0.0;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let p = src.prob(a, b, c);
                if p > 0.0 {
                    h -= pi[a * n + b] * p * p.ln();
                }
            }
        }
    }
    h
}

#[test]
fn entropy_rate_matches_an_independent_computation() {
    let src = MarkovSource::standard();
    let oracle = oracle_entropy_rate(src);
    assert!((src.entropy_rate() - oracle).abs() < 1e-9, "{} vs {oracle}", src.entropy_rate());
}

#[test]
fn source_cross_entropy_on_its_own_output_approaches_the_entropy_rate() {
    let src = MarkovSource::standard();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    let symbols = src.sample(&mut rng, 400_000);
    let ce = src.cross_entropy(&symbols);
    let h = src.entropy_rate();
    assert!((ce - h).abs() < 0.01, "cross-entropy {ce} vs entropy rate {h}");
}

#[test]
fn clean_documents_decode_to_the_alphabet() {
    let s = synth_corpus(1.0, 50_000, 4);
    for (&t, &l) in s.tokens().iter().zip(s.labels().unwrap()) {
        assert_eq!(l, SpanLabel::Clean.to_byte());
        assert!(Vocabulary::is_special(t) || ALPHABET.contains(&(t as u8)), "token {t}");
    }
    let docs = s.documents();
    for d in &docs[..docs.len() - 1] {
        let body = d.len() - 2;
        assert!((64..=256).contains(&body), "document body of {body}");
    }
}

#[test]
fn synth_is_deterministic_per_seed() {
    assert_eq!(synth_corpus(0.7, 30_000, 9), synth_corpus(0.7, 30_000, 9));
    assert_ne!(synth_corpus(0.7, 30_000, 9).tokens(), synth_corpus(0.7, 30_000, 10).tokens());
}

fn equal_docs(n_docs: usize, tag: u8) -> TokenStream {
    let body = vec![tag; 100];
    tokenize_documents((0..n_docs).map(|_| &body[..]), Vocabulary::byte_level())
}

#[test]
fn weighted_mix_realizes_the_document_proportions() {
    let comps = [equal_docs(20_000, b'a'), equal_docs(20_000, b'b'), equal_docs(20_000, b'c')];
    let mixed = mix_streams(&comps, &[6.0, 3.0, 1.0], 5).unwrap();
    let mut counts = [0usize; 3];
    for d in mixed.documents() {
        let label = mixed.labels().unwrap()[d.start];
        counts[(label - 2) as usize] += 1;
    }
    let total: usize = counts.iter().sum();
    for (c, want) in counts.iter().zip([0.6, 0.3, 0.1]) {
        let got = *c as f64 / total as f64;
        assert!((got - want).abs() <= 0.02, "share {got} vs {want} ({counts:?})");
    }
    // Length and label multiset are conserved.
    let consumed: usize = counts.iter().map(|c| c * 102).sum();
    assert_eq!(mixed.len(), consumed);
    assert_eq!(mix_streams(&comps, &[6.0, 3.0, 1.0], 5).unwrap(), mixed);
}

#[test]
fn single_component_mix_is_the_identity() {
    let s = synth_corpus(1.0, 5_000, 2);
    let docs = s.documents();
    let whole: usize = docs.iter().map(|d| d.len()).sum();
    let mixed = mix_streams(std::slice::from_ref(&s), &[3.5], 1).unwrap();
    assert_eq!(&mixed.tokens()[..], &s.tokens()[..whole]);
}

proptest! {
    #[test]
    fn tokenize_round_trips_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let s = tokenize(&bytes, Vocabulary::byte_level());
        prop_assert_eq!(s.len(), bytes.len() + 2);
        prop_assert_eq!(detokenize(&s), bytes);
    }

    #[test]
    fn packing_reconstructs_the_consumed_prefix(len in 2usize..3_000, seq_len in 2usize..64, rows in 1usize..6) {
        prop_assume!(len > seq_len);
        let tokens: Vec<u32> = (0..len as u32).map(|i| i % 256).collect();
        let s = TokenStream::new(259, tokens.clone()).unwrap();
        let plan = PackPlan::new(len, seq_len, rows).unwrap();
        prop_assert_eq!(plan.n_rows, (len - 1) / seq_len);
        let batches = pack(&s, seq_len, rows).unwrap();
        let mut rebuilt = vec![];
        for b in &batches {
            for r in 0..b.rows {
                let inp = &b.inputs[r * seq_len..(r + 1) * seq_len];
                let tgt = &b.targets[r * seq_len..(r + 1) * seq_len];
                prop_assert_eq!(&inp[1..], &tgt[..seq_len - 1]);
                if rebuilt.is_empty() {
                    rebuilt.push(inp[0]);
                }
                prop_assert_eq!(*rebuilt.last().unwrap(), inp[0]);
                rebuilt.extend_from_slice(tgt);
            }
            for i in 0..b.len() {
                prop_assert_eq!(tokens[b.target_stream_index(i)], b.targets[i]);
            }
        }
        prop_assert_eq!(rebuilt.len(), plan.consumed());
        prop_assert_eq!(&rebuilt[..], &tokens[..rebuilt.len()]);
    }
}
