//! Scoring candidate compounds against one target and ranking them.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::thread;

use mtdti_core::codec::{encode_molecule, encode_protein};
use mtdti_core::{model, Checkpoint, EncodedSequence, ModelConfig, ParamStore, Vocab};

use crate::dataset::Candidate;
use crate::error::{CliError, CliResult};

/// A trained model with its vocabularies, ready for inference.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: ModelConfig,
    pub molecule_vocab: Vocab,
    pub protein_vocab: Vocab,
    pub params: ParamStore,
}

impl Predictor {
    /// Needs a fine-tuned checkpoint: both vocabularies and all three towers.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> CliResult<Self> {
        let (mv, pv) = match (&ckpt.molecule_vocab, &ckpt.protein_vocab) {
            (Some(m), Some(p)) => (m.clone(), p.clone()),
            _ => return Err(CliError::Data("checkpoint lacks vocabularies; a fine-tuned checkpoint is required".into())),
        };
        let config = ModelConfig::from_record(&ckpt.config, &ModelConfig::kiba(mv.len(), pv.len()))?;
        Ok(Predictor {
            config,
            molecule_vocab: mv,
            protein_vocab: pv,
            params: ckpt.params.clone(),
        })
    }

    pub fn encode_molecule(&self, smiles: &str) -> CliResult<EncodedSequence> {
        Ok(encode_molecule(smiles, &self.molecule_vocab, &self.config.codec())?)
    }

    pub fn encode_protein(&self, fasta: &str) -> CliResult<EncodedSequence> {
        Ok(encode_protein(fasta, &self.protein_vocab, &self.config.codec())?)
    }

    pub fn predict_encoded(&self, molecule: &EncodedSequence, protein: &EncodedSequence) -> CliResult<f64> {
        Ok(model::predict(&self.params, &self.config, molecule, protein)?)
    }

    pub fn predict(&self, smiles: &str, fasta: &str) -> CliResult<f64> {
        self.predict_encoded(&self.encode_molecule(smiles)?, &self.encode_protein(fasta)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub rank: usize,
    pub compound_id: String,
    pub compound_name: Option<String>,
    pub smiles: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateError {
    pub compound_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ranking {
    pub ranked: Vec<RankedCandidate>,
    pub errors: Vec<CandidateError>,
}

pub const TABLE_HEADER: &str = "rank\tcompound_id\tcompound_name\tscore";

impl Ranking {
    pub fn warning_count(&self) -> usize {
        self.errors.len()
    }

    /// Tab-separated table. Scores are printed in shortest round-trip form so
    /// parsing them back gives the exact predicted value.
    pub fn to_table(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for r in &self.ranked {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.rank,
                r.compound_id,
                r.compound_name.as_deref().unwrap_or(""),
                r.score
            );
        }
        out
    }
}

/// Descending score, ties broken by ascending id.
fn order(a: &RankedCandidate, b: &RankedCandidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.compound_id.cmp(&b.compound_id))
}

/// Scores every candidate against `target_fasta` and ranks them. Candidates
/// that fail to encode or predict become error entries. `threads > 1`
/// spreads scoring over worker threads; the result does not depend on it.
pub fn rank_candidates(
    candidates: &[Candidate],
    target_fasta: &str,
    predictor: &Predictor,
    threads: usize,
) -> CliResult<Ranking> {
    let protein = predictor.encode_protein(target_fasta)?;
    let score = |c: &Candidate| {
        predictor
            .encode_molecule(&c.smiles)
            .and_then(|m| predictor.predict_encoded(&m, &protein))
    };
    let threads = threads.clamp(1, candidates.len().max(1));
    let scores: Vec<CliResult<f64>> = if threads == 1 {
        candidates.iter().map(score).collect()
    } else {
        let chunk = candidates.len().div_ceil(threads);
        thread::scope(|scope| {
            let handles: Vec<_> = candidates
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(score).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("scoring thread panicked"))
                .collect()
        })
    };
    let mut ranking = Ranking::default();
    for (c, s) in candidates.iter().zip(scores) {
        match s {
            Ok(score) => ranking.ranked.push(RankedCandidate {
                rank: 0,
                compound_id: c.id.clone(),
                compound_name: (!c.name.is_empty()).then(|| c.name.clone()),
                smiles: c.smiles.clone(),
                score,
            }),
            Err(e) => ranking.errors.push(CandidateError {
                compound_id: c.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    ranking.ranked.sort_by(order);
    for (i, r) in ranking.ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(ranking)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, score: f64) -> RankedCandidate {
        RankedCandidate {
            rank: 0,
            compound_id: id.into(),
            compound_name: None,
            smiles: String::new(),
            score,
        }
    }

    #[test]
    fn ties_fall_back_to_id() {
        let mut v = [entry("b", 1.0), entry("c", 2.0), entry("a", 1.0)];
        v.sort_by(order);
        let ids: Vec<&str> = v.iter().map(|r| r.compound_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn table_layout() {
        let mut r = Ranking::default();
        r.ranked.push(RankedCandidate {
            rank: 1,
            compound_name: Some("Aspirin".into()),
            ..entry("D1", 11.5)
        });
        assert_eq!(r.to_table(), "rank\tcompound_id\tcompound_name\tscore\n1\tD1\tAspirin\t11.5\n");
    }
}
