//! Character-level vocabularies and fixed-length encodings for SMILES and FASTA.
//!
//! Every character is one token. Molecules are decorated as
//! `[REP] [BEGIN] c1 .. cn [END]` and padded with `[PAD]`; proteins are the
//! bare characters followed by `[PAD]`. The vocabulary is closed once built,
//! so an unseen character is an error rather than an unknown token.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const REP: &str = "[REP]";
pub const BEGIN: &str = "[BEGIN]";
pub const END: &str = "[END]";
pub const MASK: &str = "[MASK]";

/// Special molecule tokens in id order.
pub const MOLECULE_SPECIALS: [&str; 5] = [PAD, REP, BEGIN, END, MASK];

pub const PAD_ID: usize = 0;
pub const REP_ID: usize = 1;
pub const BEGIN_ID: usize = 2;
pub const END_ID: usize = 3;
pub const MASK_ID: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabKind {
    Molecule,
    Protein,
}

impl VocabKind {
    fn specials(self) -> &'static [&'static str] {
        match self {
            VocabKind::Molecule => &MOLECULE_SPECIALS,
            VocabKind::Protein => &MOLECULE_SPECIALS[..1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    kind: VocabKind,
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Special tokens first, then every distinct character of the corpus in
    /// lexicographic order.
    pub fn build<I, S>(corpus: I, kind: VocabKind) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen_any = false;
        let mut chars = BTreeSet::new();
        for line in corpus {
            seen_any = true;
            chars.extend(line.as_ref().chars());
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let tokens = kind
            .specials()
            .iter()
            .map(|s| s.to_string())
            .chain(chars.into_iter().map(String::from))
            .collect();
        Self::from_tokens(tokens, kind)
    }

    /// Rebuilds a vocabulary from its token list, checking the special-token layout.
    pub fn from_tokens(tokens: Vec<String>, kind: VocabKind) -> Result<Self> {
        let specials = kind.specials();
        if tokens.len() < specials.len() || tokens[..specials.len()].iter().zip(specials).any(|(a, b)| a != b) {
            return Err(Error::Format(format!(
                "vocabulary must start with {specials:?}"
            )));
        }
        let mut index = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            let is_special_slot = id < specials.len();
            if !is_special_slot && tok.chars().count() != 1 {
                return Err(Error::Format(format!("token {tok:?} at line {id} is not a single character")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
        }
        if kind == VocabKind::Protein {
            for s in &MOLECULE_SPECIALS[1..] {
                if index.contains_key(*s) {
                    return Err(Error::Format(format!("protein vocabulary contains {s}")));
                }
            }
        }
        Ok(Vocab { kind, tokens, index })
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, kind: VocabKind) -> Result<Self> {
        let tokens = text.lines().map(String::from).collect();
        Self::from_tokens(tokens, kind)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.kind.specials().len()
    }

    /// Ids of ordinary (non-special) tokens.
    pub fn payload_ids(&self) -> core::ops::Range<usize> {
        self.kind.specials().len()..self.tokens.len()
    }

    fn char_id(&self, ch: char, position: usize) -> Result<usize> {
        let mut buf = [0u8; 4];
        self.index
            .get(ch.encode_utf8(&mut buf) as &str)
            .copied()
            .filter(|&id| !self.is_special(id))
            .ok_or(Error::UnknownToken { token: ch, position })
    }

    fn char_ids(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().enumerate().map(|(i, c)| self.char_id(c, i)).collect()
    }
}

/// How molecules longer than the window are cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MoleculeTruncation {
    /// Keep the middle `mol_max_len` characters and no special tokens.
    #[default]
    MiddleWindow,
    /// Keep `[REP]` at position 0 followed by the middle `mol_max_len - 1`
    /// characters, so a pooled representation always exists.
    KeepRep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecConfig {
    pub mol_max_len: usize,
    pub prot_max_len: usize,
    pub truncation: MoleculeTruncation,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mol_max_len: 100,
            prot_max_len: 1000,
            truncation: MoleculeTruncation::MiddleWindow,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mol_max_len == 0 || self.prot_max_len == 0 {
            return Err(Error::invalid("sequence lengths must be positive"));
        }
        if self.truncation == MoleculeTruncation::KeepRep && self.mol_max_len < 2 {
            return Err(Error::invalid("keep-rep truncation needs mol_max_len >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub truncated: bool,
}

impl EncodedSequence {
    fn padded(mut ids: Vec<usize>, max_len: usize, truncated: bool) -> Self {
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mut mask = vec![true; real];
        mask.resize(max_len, false);
        EncodedSequence { ids, mask, truncated }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

fn middle_window(n: usize, keep: usize) -> core::ops::Range<usize> {
    let start = (n - keep) / 2;
    start..start + keep
}

pub fn encode_molecule(smiles: &str, vocab: &Vocab, cfg: &CodecConfig) -> Result<EncodedSequence> {
    cfg.validate()?;
    let payload = vocab.char_ids(smiles)?;
    let limit = cfg.mol_max_len;
    if payload.len() + 3 <= limit {
        let mut ids = Vec::with_capacity(limit);
        ids.extend([REP_ID, BEGIN_ID]);
        ids.extend(&payload);
        ids.push(END_ID);
        return Ok(EncodedSequence::padded(ids, limit, false));
    }
    let ids = match cfg.truncation {
        MoleculeTruncation::MiddleWindow => {
            let keep = payload.len().min(limit);
            payload[middle_window(payload.len(), keep)].to_vec()
        }
        MoleculeTruncation::KeepRep => {
            let keep = payload.len().min(limit - 1);
            let mut ids = vec![REP_ID];
            ids.extend(&payload[middle_window(payload.len(), keep)]);
            ids
        }
    };
    Ok(EncodedSequence::padded(ids, limit, true))
}

/// Characters then padding; longer proteins keep their first `prot_max_len` characters.
pub fn encode_protein(fasta: &str, vocab: &Vocab, cfg: &CodecConfig) -> Result<EncodedSequence> {
    cfg.validate()?;
    let mut ids = vocab.char_ids(fasta)?;
    let truncated = ids.len() > cfg.prot_max_len;
    ids.truncate(cfg.prot_max_len);
    Ok(EncodedSequence::padded(ids, cfg.prot_max_len, truncated))
}

/// Inverse of encoding with special tokens and padding dropped.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::InvalidTokenId {
            id,
            vocab_size: vocab.len(),
        })?;
        if !vocab.is_special(id) {
            out.push_str(tok);
        }
    }
    Ok(out)
}

/// The visible token stream of an encoding, padding excluded.
pub fn token_stream(seq: &EncodedSequence, vocab: &Vocab) -> Result<Vec<String>> {
    seq.ids
        .iter()
        .zip(&seq.mask)
        .filter(|(_, m)| **m)
        .map(|(&id, _)| {
            vocab.token(id).map(String::from).ok_or(Error::InvalidTokenId {
                id,
                vocab_size: vocab.len(),
            })
        })
        .collect()
}
