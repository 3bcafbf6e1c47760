#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use mtdti_core::{InteractionConfig, ModelConfig, ProteinCnnConfig, RepPooling, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAGMENTS: [&str; 16] = [
    "C", "C", "C", "CC", "N", "O", "c1ccccc1", "C(=O)", "C(C)", "Cl", "F", "N(C)", "C=C", "S", "C(=O)O", "C#N",
];

const AMINO_ACIDS: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";

/// Deterministic SMILES-like strings assembled from common fragments.
pub fn toy_smiles(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let parts = rng.random_range(2..7);
            (0..parts).map(|_| FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]).collect()
        })
        .collect()
}

/// Fragment strings of at least `min_len` characters.
pub fn long_smiles(count: usize, min_len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut s = String::new();
            while s.len() < min_len {
                s.push_str(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
            }
            s
        })
        .collect()
}

pub fn toy_proteins(count: usize, len: std::ops::Range<usize>, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(len.clone());
            (0..n).map(|_| AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())] as char).collect()
        })
        .collect()
}

/// Affinity table text with `count` rows and affinities in [5, 9).
pub fn toy_table(count: usize, seed: u64) -> String {
    let smiles = toy_smiles(count, seed);
    let proteins = toy_proteins(4, 20..36, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut out = String::from("smiles\tfasta\taffinity\n");
    for (i, s) in smiles.iter().enumerate() {
        let _ = writeln!(out, "{s}\t{}\t{}", proteins[i % proteins.len()], rng.random_range(5.0..9.0));
    }
    out
}

pub fn tiny_model(mol_vocab: usize, prot_vocab: usize, mol_len: usize, prot_len: usize) -> ModelConfig {
    ModelConfig {
        transformer: TransformerConfig {
            num_layers: 1,
            num_heads: 2,
            hidden: 8,
            intermediate: 16,
            dropout: 0.0,
            max_len: mol_len,
            vocab_size: mol_vocab,
        },
        protein: ProteinCnnConfig {
            vocab_size: prot_vocab,
            embed_dim: 4,
            filter_lengths: vec![3, 4, 5],
            filter_counts: vec![4, 4, 4],
            max_len: prot_len,
        },
        interaction: InteractionConfig {
            dense_sizes: vec![8],
            dropout: 0.0,
        },
        rep_pooling: RepPooling::KeepRep,
    }
}

/// `--set` overrides for a tiny model that trains in seconds.
pub const TINY_SETTINGS: [&str; 15] = [
    "model.layers=1",
    "model.heads=2",
    "model.hidden=8",
    "model.intermediate=16",
    "model.dropout=0",
    "model.mol_max_len=24",
    "model.prot_max_len=36",
    "model.prot_embed_dim=4",
    "model.filter_lengths=3,4,5",
    "model.filter_counts=4,4,4",
    "model.dense_sizes=8",
    "model.dense_dropout=0",
    "train.batch_size=4",
    "train.learning_rate=0.001",
    "train.epochs=2",
];

pub fn tiny_args() -> Vec<String> {
    TINY_SETTINGS.iter().flat_map(|s| ["--set".to_string(), s.to_string()]).collect()
}

pub fn mtdti(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtdti"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch mtdti")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
