//! Subcommand definitions and their orchestration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;

use clap::{Parser, Subcommand};
use log::{debug, info, warn};
use mtdti_core::codec::{encode_molecule, encode_protein, token_stream};
use mtdti_core::metrics::{self, EvalPair, MetricsReport};
use mtdti_core::train::finetune::{finetune, EncodedPair};
use mtdti_core::train::pretrain::{MaskedBatches, Pretrainer, StepStats};
use mtdti_core::train::SubSeeds;
use mtdti_core::{model, Checkpoint, EncodedSequence, ModelConfig, Vocab, VocabKind};

use crate::config::Settings;
use crate::dataset::{self, load_affinity_dataset, load_corpus, split_folds, AffinityRecord, NUM_FOLDS};
use crate::error::{CliError, CliResult};
use crate::rank::{rank_candidates, Predictor};

#[derive(Debug, Parser)]
#[command(name = "mtdti", version, about = "Drug-target affinity: pretrain, fine-tune, evaluate and rank")]
pub struct Cli {
    /// Flat key=value config file (model.*, train.*, data.*).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Model to load: warm start for finetune, trained model for evaluate, rank and tokenize.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Output file (pretrain, evaluate, rank) or directory (finetune).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Config override, wins over the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-LM pretraining of the molecule transformer on a SMILES corpus.
    Pretrain {
        /// Newline-delimited SMILES (default: data.corpus).
        corpus: Option<PathBuf>,
    },
    /// Cross-validated fine-tuning on an affinity table.
    Finetune {
        /// Affinity table (default: data.dataset).
        data: Option<PathBuf>,
        /// Run only this cross-validation fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Metrics report from a predictions table or from a checkpoint and data.
    Evaluate {
        /// Table with affinity and prediction columns.
        #[arg(long, conflicts_with = "data")]
        predictions: Option<PathBuf>,
        /// Affinity table scored with --checkpoint (default: data.dataset).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Ranks candidate compounds against one protein target.
    Rank {
        /// Candidates table with id, name and smiles columns (default: data.candidates).
        candidates: Option<PathBuf>,
        /// Target protein sequence.
        #[arg(long, conflicts_with = "target_file")]
        target: Option<String>,
        /// FASTA file holding the target sequence (default: data.target).
        #[arg(long)]
        target_file: Option<PathBuf>,
    },
    /// Prints the token stream of one SMILES string.
    Tokenize { smiles: String },
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let settings = Settings::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let ctx = Context {
        settings,
        checkpoint: cli.checkpoint,
        out: cli.out,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Pretrain { corpus } => ctx.pretrain(corpus, stdout),
        Command::Finetune { data, fold } => ctx.finetune(data, fold, stdout),
        Command::Evaluate { predictions, data } => ctx.evaluate(predictions, data, stdout),
        Command::Rank {
            candidates,
            target,
            target_file,
        } => ctx.rank(candidates, target, target_file, stdout),
        Command::Tokenize { smiles } => ctx.tokenize(&smiles, stdout),
    }
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn emit(out: &Option<PathBuf>, stdout: &mut dyn Write, text: &str) -> CliResult<()> {
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => stdout.write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn encode_pairs(records: &[AffinityRecord], mv: &Vocab, pv: &Vocab, cfg: &ModelConfig) -> CliResult<Vec<EncodedPair>> {
    let codec = cfg.codec();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let wrap = |e: mtdti_core::Error| CliError::Data(format!("record {}: {e}", i + 1));
            Ok(EncodedPair {
                molecule: encode_molecule(&r.smiles, mv, &codec).map_err(wrap)?,
                protein: encode_protein(&r.fasta, pv, &codec).map_err(wrap)?,
                affinity: r.affinity,
            })
        })
        .collect()
}

fn read_target(path: &Path) -> CliResult<String> {
    let seq: String = dataset::read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with('>'))
        .collect();
    if seq.is_empty() {
        return Err(CliError::Data(format!("{}: no sequence found", path.display())));
    }
    Ok(seq)
}

struct Context {
    settings: Settings,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    deterministic: bool,
}

impl Context {
    fn require_out(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
    }

    fn require_checkpoint(&self) -> CliResult<Checkpoint> {
        let path = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("--checkpoint is required for this command".into()))?;
        read_checkpoint(path)
    }

    fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    fn pretrain(&self, corpus: Option<PathBuf>, stdout: &mut dyn Write) -> CliResult<()> {
        let out = self.require_out()?;
        let path = self.settings.path(corpus, "data.corpus")?;
        let smiles = load_corpus(&path)?;
        let vocab = Vocab::build(&smiles, VocabKind::Molecule)?;
        let tcfg = self.settings.transformer(vocab.len())?;
        let pcfg = self.settings.pretrain()?;
        let codec = self.settings.molecule_codec(&tcfg)?;
        let encoded = smiles
            .iter()
            .map(|s| encode_molecule(s, &vocab, &codec))
            .collect::<mtdti_core::Result<Vec<EncodedSequence>>>()?;
        info!(
            "pretrain corpus={} molecules={} vocab={} steps={} batch_size={}",
            path.display(),
            encoded.len(),
            vocab.len(),
            pcfg.steps,
            pcfg.batch_size
        );
        let mut trainer = Pretrainer::new(&tcfg, &pcfg)?;
        let mut batches = MaskedBatches::new(&encoded, &vocab, pcfg.masking, pcfg.schedule, SubSeeds::from_seed(pcfg.seed).batches)?;
        let log_every = (pcfg.steps / 20).max(1);
        let mut last: Option<StepStats> = None;
        let mut step = |trainer: &mut Pretrainer, batch: &[_]| -> CliResult<()> {
            let st = trainer.train_step(batch)?;
            debug!("step={} lr={} loss={} accuracy={}", st.step, st.learning_rate, st.loss, st.accuracy());
            if st.step % log_every == 0 || st.step == pcfg.steps {
                info!("step={} lr={} loss={} accuracy={}", st.step, st.learning_rate, st.loss, st.accuracy());
            }
            if pcfg.checkpoint_interval > 0 && st.step % pcfg.checkpoint_interval == 0 && st.step < pcfg.steps {
                let periodic = PathBuf::from(format!("{}.step{}", out.display(), st.step));
                write_file(&periodic, &trainer.checkpoint(&vocab).to_bytes())?;
                info!("checkpoint={}", periodic.display());
            }
            last = Some(st);
            Ok(())
        };
        if self.deterministic {
            for _ in 0..pcfg.steps {
                let batch = batches.next_batch(pcfg.batch_size)?;
                step(&mut trainer, &batch)?;
            }
        } else {
            // Masking runs ahead of the optimizer on a producer thread; the
            // batch sequence is the same as in single-threaded mode.
            thread::scope(|scope| -> CliResult<()> {
                let (tx, rx) = sync_channel(4);
                let (steps, size) = (pcfg.steps, pcfg.batch_size);
                scope.spawn(move || {
                    for _ in 0..steps {
                        let batch = batches.next_batch(size);
                        let failed = batch.is_err();
                        if tx.send(batch).is_err() || failed {
                            break;
                        }
                    }
                });
                for batch in rx {
                    step(&mut trainer, &batch?)?;
                }
                Ok(())
            })?;
        }
        write_file(out, &trainer.checkpoint(&vocab).to_bytes())?;
        if let Some(st) = last {
            writeln!(
                stdout,
                "steps={} loss={} accuracy={} checkpoint={}",
                st.step,
                st.loss,
                st.accuracy(),
                out.display()
            )
            .map_err(|e| CliError::io("<stdout>", e))?;
        }
        Ok(())
    }

    fn finetune(&self, data: Option<PathBuf>, only_fold: Option<usize>, stdout: &mut dyn Write) -> CliResult<()> {
        let out = self.require_out()?;
        if let Some(k) = only_fold.filter(|k| *k >= NUM_FOLDS) {
            return Err(CliError::Usage(format!("--fold must be below {NUM_FOLDS}, got {k}")));
        }
        let warm = self.checkpoint.as_deref().map(read_checkpoint).transpose()?;
        let settings = match &warm {
            Some(ckpt) => self.settings.inherit(&ckpt.config, "model."),
            None => self.settings.clone(),
        };
        let mode = settings.mode()?;
        let path = settings.path(data, "data.dataset")?;
        let records = load_affinity_dataset(&path, settings.raw_kd()?)?;
        let ftcfg = settings.finetune()?;
        let splits = split_folds(&records, ftcfg.seed)?;
        let mv = match &warm {
            Some(ckpt) => ckpt
                .molecule_vocab
                .clone()
                .ok_or_else(|| CliError::Data("warm-start checkpoint has no molecule vocabulary".into()))?,
            None => Vocab::build(records.iter().map(|r| &r.smiles), VocabKind::Molecule)?,
        };
        let pv = Vocab::build(records.iter().map(|r| &r.fasta), VocabKind::Protein)?;
        let mcfg = settings.model(mv.len(), pv.len())?;
        let pairs = encode_pairs(&records, &mv, &pv, &mcfg)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
        info!(
            "finetune data={} records={} test={} warm_start={} mode={}",
            path.display(),
            records.len(),
            splits.test.len(),
            warm.is_some(),
            mode.as_str()
        );
        let mut reports = Vec::new();
        for k in (0..NUM_FOLDS).filter(|k| only_fold.is_none_or(|f| f == *k)) {
            let (train_idx, dev_idx) = splits.train_dev(k);
            let (train, dev) = (pick(&train_idx), pick(&dev_idx));
            let outcome = finetune(&train, &dev, &mcfg, &ftcfg, warm.as_ref(), |st, _| {
                info!(
                    "fold={k} epoch={} steps={} train_loss={} dev_mse={}",
                    st.epoch,
                    st.steps,
                    st.train_loss,
                    st.dev_mse.map_or("none".to_string(), |m| m.to_string())
                );
                Ok(())
            })?;
            let mut ckpt = outcome.checkpoint(&mcfg, &ftcfg, &mv, &pv);
            ckpt.config.set("data.mode", mode.as_str());
            write_file(&out.join(format!("fold{k}.ckpt")), &ckpt.to_bytes())?;
            let (eval_name, eval_idx) = if splits.test.is_empty() {
                ("dev", &dev_idx)
            } else {
                ("test", &splits.test)
            };
            let eval: Vec<EvalPair> = eval_idx
                .iter()
                .map(|&i| Ok(EvalPair::new(pairs[i].affinity, model::predict(&outcome.best_params, &mcfg, &pairs[i].molecule, &pairs[i].protein)?)))
                .collect::<CliResult<_>>()?;
            let report = metrics::evaluate(&eval, mode);
            let mut rec = report.to_record();
            rec.set("fold", k);
            rec.set("eval_set", eval_name);
            rec.set("best_epoch", outcome.best_epoch);
            write_file(&out.join(format!("fold{k}.metrics")), rec.to_text().as_bytes())?;
            info!("fold={k} {}", rec.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "));
            reports.push(report);
        }
        let summary = metrics::aggregate(&reports).to_text();
        write_file(&out.join("summary.metrics"), summary.as_bytes())?;
        stdout.write_all(summary.as_bytes()).map_err(|e| CliError::io("<stdout>", e))
    }

    fn evaluate(&self, predictions: Option<PathBuf>, data: Option<PathBuf>, stdout: &mut dyn Write) -> CliResult<()> {
        let (pairs, mode) = match predictions {
            Some(path) => (dataset::parse_predictions(&dataset::read_text(&path)?, &path)?, self.settings.mode()?),
            None => {
                let ckpt = self.require_checkpoint()?;
                let settings = self.settings.inherit(&ckpt.config, "data.mode");
                let predictor = Predictor::from_checkpoint(&ckpt)?;
                let path = settings.path(data, "data.dataset")?;
                let records = load_affinity_dataset(&path, settings.raw_kd()?)?;
                let encoded = encode_pairs(&records, &predictor.molecule_vocab, &predictor.protein_vocab, &predictor.config)?;
                let pairs = encoded
                    .iter()
                    .map(|p| Ok(EvalPair::new(p.affinity, predictor.predict_encoded(&p.molecule, &p.protein)?)))
                    .collect::<CliResult<Vec<_>>>()?;
                (pairs, settings.mode()?)
            }
        };
        let report: MetricsReport = metrics::evaluate(&pairs, mode);
        emit(&self.out, stdout, &report.to_record().to_text())
    }

    fn rank(
        &self,
        candidates: Option<PathBuf>,
        target: Option<String>,
        target_file: Option<PathBuf>,
        stdout: &mut dyn Write,
    ) -> CliResult<()> {
        let ckpt = self.require_checkpoint()?;
        let predictor = Predictor::from_checkpoint(&ckpt)?;
        let path = self.settings.path(candidates, "data.candidates")?;
        let list = dataset::parse_candidates(&dataset::read_text(&path)?, &path)?;
        let fasta = match target {
            Some(t) => t,
            None => read_target(&self.settings.path(target_file, "data.target")?)?,
        };
        let ranking = rank_candidates(&list, &fasta, &predictor, self.threads())?;
        for e in &ranking.errors {
            warn!("candidate={} skipped: {}", e.compound_id, e.message);
        }
        if ranking.warning_count() > 0 {
            warn!("warnings={} ranked={}", ranking.warning_count(), ranking.ranked.len());
        }
        emit(&self.out, stdout, &ranking.to_table())
    }

    fn tokenize(&self, smiles: &str, stdout: &mut dyn Write) -> CliResult<()> {
        let vocab = match &self.checkpoint {
            Some(path) => read_checkpoint(path)?
                .molecule_vocab
                .ok_or_else(|| CliError::Data("checkpoint has no molecule vocabulary".into()))?,
            None => Vocab::build([smiles], VocabKind::Molecule)?,
        };
        let tcfg = self.settings.transformer(vocab.len())?;
        let codec = self.settings.molecule_codec(&tcfg)?;
        let seq = encode_molecule(smiles, &vocab, &codec)?;
        let tokens = token_stream(&seq, &vocab)?;
        writeln!(stdout, "{}", tokens.join(" ")).map_err(|e| CliError::io("<stdout>", e))
    }
}

/// Parses `args` and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match run(cli, stdout) {
            Ok(()) => 0,
            Err(e) => {
                let _ = writeln!(stderr, "error: {e}");
                e.exit_code()
            }
        },
        Err(e) if e.use_stderr() => {
            let _ = write!(stderr, "{}", e.render());
            1
        }
        Err(e) => {
            let _ = write!(stdout, "{}", e.render());
            0
        }
    }
}
