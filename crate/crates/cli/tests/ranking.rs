mod common;

use mtdti_cli::dataset::Candidate;
use mtdti_cli::rank::{rank_candidates, Predictor};
use mtdti_core::model::init_model;
use mtdti_core::record::Record;
use mtdti_core::{Checkpoint, Vocab, VocabKind};

use common::*;

fn predictor() -> Predictor {
    let mv = Vocab::build(toy_smiles(50, 1), VocabKind::Molecule).unwrap();
    let pv = Vocab::build(["ACDEFGHIKLMNPQRSTVWY"], VocabKind::Protein).unwrap();
    let cfg = tiny_model(mv.len(), pv.len(), 24, 30);
    let mut config = Record::new();
    config.merge(&cfg.to_record());
    let ckpt = Checkpoint {
        config,
        molecule_vocab: Some(mv),
        protein_vocab: Some(pv),
        params: init_model(&cfg, 2).unwrap(),
    };
    Predictor::from_checkpoint(&ckpt).unwrap()
}

fn candidates(smiles: &[String]) -> Vec<Candidate> {
    smiles
        .iter()
        .enumerate()
        .map(|(i, s)| Candidate {
            id: format!("M{i:02}"),
            name: String::new(),
            smiles: s.clone(),
        })
        .collect()
}

#[test]
fn worker_threads_do_not_change_the_ranking() {
    let p = predictor();
    let list = candidates(&toy_smiles(23, 9));
    let serial = rank_candidates(&list, "MKTAYIAKQR", &p, 1).unwrap();
    let parallel = rank_candidates(&list, "MKTAYIAKQR", &p, 4).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.ranked.len(), 23);
    for r in &serial.ranked {
        assert_eq!(r.score.to_bits(), p.predict(&r.smiles, "MKTAYIAKQR").unwrap().to_bits());
    }
}

#[test]
fn single_candidate_is_rank_one() {
    let p = predictor();
    let r = rank_candidates(&candidates(&["CCO".into()]), "MKT", &p, 1).unwrap();
    assert_eq!(r.ranked.len(), 1);
    assert_eq!(r.ranked[0].rank, 1);
}

#[test]
fn duplicate_scores_follow_id_order() {
    let p = predictor();
    let mut list = candidates(&["CCO".into(), "CCO".into(), "CN".into()]);
    list[0].id = "Z".into();
    list[1].id = "A".into();
    let r = rank_candidates(&list, "MKT", &p, 2).unwrap();
    let a = r.ranked.iter().position(|c| c.compound_id == "A").unwrap();
    let z = r.ranked.iter().position(|c| c.compound_id == "Z").unwrap();
    assert_eq!(a + 1, z);
}

#[test]
fn unencodable_candidates_become_warnings() {
    let p = predictor();
    let list = candidates(&["CCO".into(), "C[Xe]".into(), "CN".into()]);
    let r = rank_candidates(&list, "MKT", &p, 1).unwrap();
    assert_eq!(r.ranked.len(), 2);
    assert_eq!(r.warning_count(), 1);
    assert_eq!(r.errors[0].compound_id, "M01");
    assert!(rank_candidates(&list, "MKT*", &p, 1).is_err());
}
