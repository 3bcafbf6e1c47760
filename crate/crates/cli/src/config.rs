//! Flat dotted-key configuration: a `key=value` file, then `--set`
//! overrides, then dedicated flags such as `--seed`.

use std::path::{Path, PathBuf};

use mtdti_core::metrics::DatasetMode;
use mtdti_core::record::Record;
use mtdti_core::train::finetune::FinetuneConfig;
use mtdti_core::train::pretrain::PretrainConfig;
use mtdti_core::codec::MoleculeTruncation;
use mtdti_core::{CodecConfig, ModelConfig, RepPooling, TransformerConfig};

use crate::dataset::read_text;
use crate::error::{CliError, CliResult};

const SECTIONS: [&str; 3] = ["model.", "train.", "data."];

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("bad config: {e}"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub record: Record,
}

impl Settings {
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<Self> {
        let mut record = match file {
            Some(path) => Record::from_text(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?,
            None => Record::new(),
        };
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
            record.set(k.trim(), v.trim());
        }
        if let Some(seed) = seed {
            record.set("train.seed", seed);
        }
        if let Some((key, _)) = record.iter().find(|(k, _)| !SECTIONS.iter().any(|s| k.starts_with(s))) {
            return Err(usage(format!("unknown key {key:?}; keys start with model., train. or data.")));
        }
        Ok(Settings { record })
    }

    pub fn from_record(record: Record) -> Self {
        Settings { record }
    }

    /// Copies `prefix` keys from `defaults` that are not set here.
    pub fn inherit(&self, defaults: &Record, prefix: &str) -> Settings {
        let mut record = self.record.clone();
        for (k, v) in defaults.iter().filter(|(k, _)| k.starts_with(prefix)) {
            if !record.contains(k) {
                record.set(k, v);
            }
        }
        Settings { record }
    }

    /// `data.mode`, `kiba` unless set.
    pub fn mode(&self) -> CliResult<DatasetMode> {
        match self.record.get("data.mode") {
            Some(v) => DatasetMode::parse(v).map_err(usage),
            None => Ok(DatasetMode::Kiba),
        }
    }

    /// `data.raw_kd`: affinities are Kd in nanomolar and need converting.
    pub fn raw_kd(&self) -> CliResult<bool> {
        self.record.parse_or("data.raw_kd", false).map_err(usage)
    }

    /// The positional argument when given, otherwise the `key` entry.
    pub fn path(&self, arg: Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        arg.or_else(|| self.record.get(key).map(PathBuf::from))
            .ok_or_else(|| CliError::Usage(format!("no input given and {key} is not set")))
    }

    fn with_sizes(&self, mol_vocab: usize, prot_vocab: Option<usize>) -> Record {
        let mut rec = self.record.clone();
        rec.set("model.mol_vocab_size", mol_vocab);
        if let Some(p) = prot_vocab {
            rec.set("model.prot_vocab_size", p);
        }
        rec
    }

    pub fn model(&self, mol_vocab: usize, prot_vocab: usize) -> CliResult<ModelConfig> {
        let base = match self.mode()? {
            DatasetMode::Davis => ModelConfig::davis(mol_vocab, prot_vocab),
            DatasetMode::Kiba => ModelConfig::kiba(mol_vocab, prot_vocab),
        };
        ModelConfig::from_record(&self.with_sizes(mol_vocab, Some(prot_vocab)), &base).map_err(usage)
    }

    pub fn transformer(&self, mol_vocab: usize) -> CliResult<TransformerConfig> {
        let base = TransformerConfig::with_vocab(mol_vocab);
        TransformerConfig::from_record(&self.with_sizes(mol_vocab, None), &base).map_err(usage)
    }

    /// Molecule encoding rules for a transformer trained on its own, matching
    /// what [`ModelConfig::codec`] later uses for the same keys.
    pub fn molecule_codec(&self, transformer: &TransformerConfig) -> CliResult<CodecConfig> {
        let pooling = match self.record.get("model.rep_pooling") {
            Some(v) => RepPooling::parse(v).map_err(usage)?,
            None => RepPooling::default(),
        };
        Ok(CodecConfig {
            mol_max_len: transformer.max_len,
            truncation: match pooling {
                RepPooling::KeepRep => MoleculeTruncation::KeepRep,
                RepPooling::MeanPool => MoleculeTruncation::MiddleWindow,
            },
            ..CodecConfig::default()
        })
    }

    pub fn pretrain(&self) -> CliResult<PretrainConfig> {
        PretrainConfig::from_record(&self.record, &PretrainConfig::default()).map_err(usage)
    }

    /// Learning rate defaults to 1e-3 in davis mode and 1e-4 otherwise.
    pub fn finetune(&self) -> CliResult<FinetuneConfig> {
        let mut base = FinetuneConfig::default();
        if self.mode()? == DatasetMode::Davis {
            base.learning_rate = 1e-3;
        }
        FinetuneConfig::from_record(&self.record, &base).map_err(usage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flags_win_over_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# run\ntrain.seed=4\ntrain.epochs=3\nmodel.layers=2\ndata.mode=davis").unwrap();
        let s = Settings::load(Some(f.path()), &["train.epochs=7".into()], Some(9)).unwrap();
        let ft = s.finetune().unwrap();
        assert_eq!((ft.seed, ft.epochs, ft.learning_rate), (9, 7, 1e-3));
        let m = s.model(30, 21).unwrap();
        assert_eq!(m.transformer.num_layers, 2);
        assert_eq!(m.transformer.vocab_size, 30);
        assert_eq!(m.protein.vocab_size, 21);
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        for sets in [vec!["nonsense".to_string()], vec!["train.steps=lots".into()], vec!["color=blue".into()]] {
            let err = Settings::load(None, &sets, None).and_then(|s| s.pretrain()).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{err}");
        }
    }

    #[test]
    fn path_prefers_argument() {
        let s = Settings::load(None, &["data.dataset=a.tsv".into()], None).unwrap();
        assert_eq!(s.path(None, "data.dataset").unwrap(), PathBuf::from("a.tsv"));
        assert_eq!(s.path(Some("b.tsv".into()), "data.dataset").unwrap(), PathBuf::from("b.tsv"));
        assert!(s.path(None, "data.corpus").is_err());
    }
}
