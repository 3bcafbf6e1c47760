//! Masked-LM corruption of encoded molecules.

use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::codec::{EncodedSequence, Vocab, MASK_ID};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub select_prob: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            select_prob: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// What happened to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedLabel {
    pub position: usize,
    /// Original token id at `position`.
    pub token: usize,
    pub corruption: Corruption,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    /// Corrupted ids with the original padding mask.
    pub input: EncodedSequence,
    pub labels: Vec<MaskedLabel>,
}

impl MaskedExample {
    /// `(position, token)` targets for the cross-entropy.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.labels.iter().map(|l| (l.position, l.token)).collect()
    }
}

/// Uniform draw in `[0, 1)` from the top 53 bits of one `u64`.
fn unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Positions holding ordinary (non-special, non-padding) tokens.
pub fn payload_positions(seq: &EncodedSequence, vocab: &Vocab) -> Vec<usize> {
    seq.ids
        .iter()
        .zip(&seq.mask)
        .enumerate()
        .filter(|(_, (&id, &real))| real && !vocab.is_special(id))
        .map(|(i, _)| i)
        .collect()
}

/// Draw order: one selection draw per payload position, then for each
/// selected position a branch draw followed, on the random branch, by a
/// replacement draw. When nothing is selected one payload position is chosen
/// uniformly and goes through the same branch logic.
pub fn make_masked_example<R: Rng + ?Sized>(
    seq: &EncodedSequence,
    vocab: &Vocab,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedExample> {
    let positions = payload_positions(seq, vocab);
    if positions.is_empty() {
        return Err(Error::invalid("molecule has no payload tokens to mask"));
    }
    let mut selected: Vec<usize> = positions.iter().copied().filter(|_| unit(rng) < cfg.select_prob).collect();
    if selected.is_empty() {
        selected.push(positions[rng.random_range(0..positions.len())]);
    }
    let mut input = seq.clone();
    let mut labels = Vec::with_capacity(selected.len());
    for position in selected {
        let branch = unit(rng);
        let corruption = if branch < cfg.mask_prob {
            input.ids[position] = MASK_ID;
            Corruption::Mask
        } else if branch < cfg.mask_prob + cfg.random_prob {
            input.ids[position] = rng.random_range(vocab.payload_ids());
            Corruption::Random
        } else {
            Corruption::Keep
        };
        labels.push(MaskedLabel {
            position,
            token: seq.ids[position],
            corruption,
        });
    }
    Ok(MaskedExample { input, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_molecule, token_stream, CodecConfig, VocabKind};
    use alloc::collections::VecDeque;
    use alloc::string::String;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Replays a fixed list of `u64` outputs, then repeats the last one.
    struct Scripted(VecDeque<u64>, u64);

    impl RngCore for Scripted {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0.pop_front().unwrap_or(self.1)
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for b in dest {
                *b = self.next_u64() as u8;
            }
        }
    }

    const HIT: u64 = 0;
    const MISS: u64 = u64::MAX;

    fn example() -> (EncodedSequence, Vocab) {
        let vocab = Vocab::build(["CN=C=O"], VocabKind::Molecule).unwrap();
        let seq = encode_molecule("CN=C=O", &vocab, &CodecConfig::default()).unwrap();
        (seq, vocab)
    }

    #[test]
    fn forced_selection_reproduces_the_worked_example() {
        let (seq, vocab) = example();
        // payload positions 2..=7; select only position 5, then take the [MASK] branch
        let script = vec![MISS, MISS, MISS, HIT, MISS, MISS, HIT];
        let mut rng = Scripted(script.into(), MISS);
        let ex = make_masked_example(&seq, &vocab, &MaskingConfig::default(), &mut rng).unwrap();
        let shown: Vec<String> = token_stream(&ex.input, &vocab).unwrap();
        assert_eq!(shown.join(" "), "[REP] [BEGIN] C N = [MASK] = O [END]");
        assert_eq!(ex.targets(), vec![(5, vocab.id("C").unwrap())]);
        assert_eq!(ex.labels[0].corruption, Corruption::Mask);
    }

    #[test]
    fn empty_selection_falls_back_to_one_label() {
        let (seq, vocab) = example();
        let mut rng = Scripted(VecDeque::new(), MISS);
        let ex = make_masked_example(&seq, &vocab, &MaskingConfig::default(), &mut rng).unwrap();
        assert_eq!(ex.labels.len(), 1);
        assert!((2..=7).contains(&ex.labels[0].position));
    }

    #[test]
    fn special_tokens_are_never_touched() {
        let (seq, vocab) = example();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MaskingConfig {
            select_prob: 0.9,
            ..MaskingConfig::default()
        };
        for _ in 0..2000 {
            let ex = make_masked_example(&seq, &vocab, &cfg, &mut rng).unwrap();
            for (i, (&orig, &now)) in seq.ids.iter().zip(&ex.input.ids).enumerate() {
                if vocab.is_special(orig) {
                    assert_eq!(orig, now, "position {i}");
                }
            }
            for l in &ex.labels {
                assert!(!vocab.is_special(l.token));
                if l.corruption == Corruption::Random {
                    assert!(!vocab.is_special(ex.input.ids[l.position]));
                }
            }
            assert_eq!(ex.input.mask, seq.mask);
        }
    }

    #[test]
    fn no_payload_is_an_error() {
        let vocab = Vocab::build(["C"], VocabKind::Molecule).unwrap();
        let seq = encode_molecule("", &vocab, &CodecConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_masked_example(&seq, &vocab, &MaskingConfig::default(), &mut rng).is_err());
    }
}
