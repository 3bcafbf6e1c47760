//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian `u64`):
//!
//! ```text
//! magic "MTDTICKP" | version
//! len | config record (key=value lines, UTF-8)
//! len | molecule vocabulary (one token per line, empty if absent)
//! len | protein vocabulary  (one token per line, empty if absent)
//! count | { name len | name | tensor }*
//! ```
//!
//! Tensors use the [`Tensor::write_bytes`] encoding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::codec::{Vocab, VocabKind};
use crate::params::ParamStore;
use crate::record::Record;
use crate::tensor::read_u64;
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 8] = b"MTDTICKP";
const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Record,
    pub molecule_vocab: Option<Vocab>,
    pub protein_vocab: Option<Vocab>,
    pub params: ParamStore,
}

fn write_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_section<'a>(input: &mut &'a [u8]) -> Result<&'a [u8]> {
    let len = read_u64(input)? as usize;
    if input.len() < len {
        return Err(Error::Format(format!("section of {len} bytes exceeds remaining {}", input.len())));
    }
    let (head, rest) = input.split_at(len);
    *input = rest;
    Ok(head)
}

fn read_text(input: &mut &[u8]) -> Result<String> {
    let bytes = read_section(input)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("section is not UTF-8".into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_section(&mut out, self.config.to_text().as_bytes());
        for vocab in [&self.molecule_vocab, &self.protein_vocab] {
            let text = vocab.as_ref().map(Vocab::to_text).unwrap_or_default();
            write_section(&mut out, text.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            write_section(&mut out, name.as_bytes());
            tensor.write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        if input.len() < 8 || &input[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        input = &input[8..];
        let version = read_u64(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = Record::from_text(&read_text(&mut input)?)?;
        let mut vocab = |kind| -> Result<Option<Vocab>> {
            let text = read_text(&mut input)?;
            if text.is_empty() {
                Ok(None)
            } else {
                Vocab::from_text(&text, kind).map(Some)
            }
        };
        let molecule_vocab = vocab(VocabKind::Molecule)?;
        let protein_vocab = vocab(VocabKind::Protein)?;
        let count = read_u64(&mut input)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(read_section(&mut input)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let tensor = Tensor::read_bytes(&mut input)?;
            params.insert(name, tensor)?;
        }
        if !input.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", input.len())));
        }
        Ok(Checkpoint {
            config,
            molecule_vocab,
            protein_vocab,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::matrix(&[&[1.0, -2.5], &[0.125, 3.0]]).unwrap()).unwrap();
        params.insert("a.bias", Tensor::vector(alloc::vec![f64::MIN_POSITIVE]).unwrap()).unwrap();
        let mut config = Record::new();
        config.set("model.layers", 2);
        Checkpoint {
            config,
            molecule_vocab: Some(Vocab::build(["CN=C=O"], VocabKind::Molecule).unwrap()),
            protein_vocab: None,
            params,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
