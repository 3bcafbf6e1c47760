//! Tab-separated inputs: affinity tables, SMILES corpora, candidate lists and
//! prediction files.

use std::fs;
use std::path::{Path, PathBuf};

use mtdti_core::metrics::EvalPair;
use mtdti_core::train::pkd_transform;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

pub const NUM_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityRecord {
    pub smiles: String,
    pub fasta: String,
    pub affinity: f64,
    pub fold: Option<usize>,
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Header-driven column lookup over a tab-separated table.
struct Table {
    path: PathBuf,
    columns: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn parse(text: &str, path: &Path) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let error = |line: u64, e: csv::Error| CliError::Parse {
            path: path.into(),
            line: line as usize,
            message: e.to_string(),
        };
        let columns: Vec<String> = reader.headers().map_err(|e| error(1, e))?.iter().map(String::from).collect();
        if columns.iter().all(String::is_empty) {
            return Err(CliError::Parse {
                path: path.into(),
                line: 1,
                message: "missing header row".into(),
            });
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| error(e.position().map_or(0, |p| p.line()), e))?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            let line = record.position().map_or(0, |p| p.line()) as usize;
            rows.push((line, record.iter().map(String::from).collect()));
        }
        Ok(Table {
            path: path.into(),
            columns,
            rows,
        })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    fn require(&self, name: &str) -> CliResult<usize> {
        self.column(name).ok_or_else(|| CliError::Parse {
            path: self.path.clone(),
            line: 1,
            message: format!("missing column {name:?}"),
        })
    }

    fn error(&self, line: usize, message: String) -> CliError {
        CliError::Parse {
            path: self.path.clone(),
            line,
            message,
        }
    }

    fn cell<'r>(&self, line: usize, row: &'r [String], col: usize) -> CliResult<&'r str> {
        row.get(col)
            .map(String::as_str)
            .ok_or_else(|| self.error(line, format!("expected {} columns, found {}", self.columns.len(), row.len())))
    }

    fn number(&self, line: usize, row: &[String], col: usize) -> CliResult<f64> {
        let raw = self.cell(line, row, col)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.error(line, format!("{} {raw:?} is not a finite number", self.columns[col]))),
        }
    }
}

/// Columns `smiles`, `fasta`, `affinity` and optionally `fold`. With
/// `raw_kd` the affinity column holds Kd in nanomolar and is converted to pKd.
pub fn parse_affinity_table(text: &str, path: &Path, raw_kd: bool) -> CliResult<Vec<AffinityRecord>> {
    let table = Table::parse(text, path)?;
    let (s, f, a) = (table.require("smiles")?, table.require("fasta")?, table.require("affinity")?);
    let fold_col = table.column("fold");
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let mut affinity = table.number(*line, row, a)?;
        if raw_kd {
            affinity = pkd_transform(affinity).map_err(|e| table.error(*line, e.to_string()))?;
        }
        let fold = match fold_col.map(|c| table.cell(*line, row, c)).transpose()? {
            None | Some("") => None,
            Some(raw) => match raw.parse::<usize>() {
                Ok(k) if k < NUM_FOLDS => Some(k),
                _ => return Err(table.error(*line, format!("unknown fold id {raw:?}"))),
            },
        };
        out.push(AffinityRecord {
            smiles: table.cell(*line, row, s)?.to_string(),
            fasta: table.cell(*line, row, f)?.to_string(),
            affinity,
            fold,
        });
    }
    Ok(out)
}

pub fn load_affinity_dataset(path: &Path, raw_kd: bool) -> CliResult<Vec<AffinityRecord>> {
    parse_affinity_table(&read_text(path)?, path, raw_kd)
}

/// One SMILES per non-blank line.
pub fn load_corpus(path: &Path) -> CliResult<Vec<String>> {
    let corpus: Vec<String> = read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{}: corpus is empty", path.display())));
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub id: String,
    pub name: String,
    pub smiles: String,
}

/// Columns `id`, `name` and `smiles`.
pub fn parse_candidates(text: &str, path: &Path) -> CliResult<Vec<Candidate>> {
    let table = Table::parse(text, path)?;
    let (i, n, s) = (table.require("id")?, table.require("name")?, table.require("smiles")?);
    table
        .rows
        .iter()
        .map(|(line, row)| {
            Ok(Candidate {
                id: table.cell(*line, row, i)?.to_string(),
                name: row.get(n).map_or("", String::as_str).to_string(),
                smiles: table.cell(*line, row, s)?.to_string(),
            })
        })
        .collect()
}

/// Columns `affinity` and `prediction`.
pub fn parse_predictions(text: &str, path: &Path) -> CliResult<Vec<EvalPair>> {
    let table = Table::parse(text, path)?;
    let (y, p) = (table.require("affinity")?, table.require("prediction")?);
    table
        .rows
        .iter()
        .map(|(line, row)| Ok(EvalPair::new(table.number(*line, row, y)?, table.number(*line, row, p)?)))
        .collect()
}

/// Record indices of the held-out test set and the five cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl Splits {
    /// `(train, dev)` for cross-validation round `k`: fold `k` is dev, the
    /// remaining folds are train.
    pub fn train_dev(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        (train, self.folds[k].clone())
    }
}

/// Honors explicit fold ids when any record has one (records without a fold
/// become the test set). Otherwise shuffles with `seed`, holds out
/// `round(n/6)` records as test and cuts the rest into five contiguous folds.
pub fn split_folds(records: &[AffinityRecord], seed: u64) -> CliResult<Splits> {
    let n = records.len();
    if n < 10 {
        return Err(CliError::Data(format!("need at least 10 records to split, got {n}")));
    }
    if records.iter().any(|r| r.fold.is_some()) {
        let mut folds = vec![Vec::new(); NUM_FOLDS];
        let mut test = Vec::new();
        for (i, r) in records.iter().enumerate() {
            match r.fold {
                Some(k) => folds[k].push(i),
                None => test.push(i),
            }
        }
        if let Some(k) = folds.iter().position(Vec::is_empty) {
            return Err(CliError::Data(format!("fold {k} has no records")));
        }
        return Ok(Splits { test, folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_len = (n as f64 / 6.0).round() as usize;
    let (test, rest) = order.split_at(test_len);
    let folds = (0..NUM_FOLDS)
        .map(|k| rest[k * rest.len() / NUM_FOLDS..(k + 1) * rest.len() / NUM_FOLDS].to_vec())
        .collect();
    Ok(Splits {
        test: test.to_vec(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("data.tsv")
    }

    #[test]
    fn well_formed_table() {
        let text = "smiles\tfasta\taffinity\tfold\nCCO\tMKT\t5.5\t0\nCN\tMKV\t7\t\nC\tMK\t6.25\t4\n";
        let recs = parse_affinity_table(text, p(), false).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].fold, None);
        assert_eq!(recs[2].affinity, 6.25);
        assert_eq!(recs[2].fold, Some(4));
    }

    #[test]
    fn bad_affinity_names_its_line() {
        let text = "smiles\tfasta\taffinity\nCCO\tMKT\tabc\n";
        let err = parse_affinity_table(text, p(), false).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("data.tsv:2"));
    }

    #[test]
    fn unknown_fold_is_rejected() {
        let text = "smiles\tfasta\taffinity\tfold\nCCO\tMKT\t1\t5\n";
        assert!(parse_affinity_table(text, p(), false).is_err());
    }

    #[test]
    fn raw_kd_is_converted() {
        let text = "fasta\tsmiles\taffinity\nMKT\tCCO\t10000\n";
        let recs = parse_affinity_table(text, p(), true).unwrap();
        assert_eq!(recs[0].affinity, 5.0);
        assert_eq!(recs[0].smiles, "CCO");
        assert!(parse_affinity_table("smiles\tfasta\taffinity\nC\tM\t0\n", p(), true).is_err());
    }

    fn synthetic(n: usize) -> Vec<AffinityRecord> {
        (0..n)
            .map(|i| AffinityRecord {
                smiles: "C".repeat(i % 7 + 1),
                fasta: "MK".into(),
                affinity: i as f64,
                fold: None,
            })
            .collect()
    }

    #[test]
    fn auto_split_matches_benchmark_proportions() {
        let s = split_folds(&synthetic(30_056), 3).unwrap();
        assert_eq!(s.test.len(), 5009);
        for f in &s.folds {
            assert!((5009..=5010).contains(&f.len()), "{}", f.len());
        }
        let mut all: Vec<usize> = s.test.iter().chain(s.folds.iter().flatten()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30_056).collect::<Vec<_>>());
        assert_eq!(split_folds(&synthetic(30_056), 3).unwrap(), s);
        let (train, dev) = s.train_dev(2);
        assert_eq!(train.len() + dev.len(), 30_056 - 5009);
    }

    #[test]
    fn explicit_folds_are_honored() {
        let mut recs = synthetic(12);
        for (i, r) in recs.iter_mut().enumerate() {
            r.fold = if i < 10 { Some(i % 5) } else { None };
        }
        let s = split_folds(&recs, 0).unwrap();
        assert_eq!(s.test, vec![10, 11]);
        assert_eq!(s.folds[3], vec![3, 8]);
    }

    #[test]
    fn too_few_records() {
        assert!(split_folds(&synthetic(9), 0).is_err());
    }

    #[test]
    fn candidates_and_predictions() {
        let c = parse_candidates("id\tname\tsmiles\nD1\tAspirin\tCC(=O)O\nD2\t\tCCN\n", p()).unwrap();
        assert_eq!(c[1].name, "");
        assert_eq!(c[0].smiles, "CC(=O)O");
        let e = parse_predictions("affinity\tprediction\n1\t1.5\n2\t2\n", p()).unwrap();
        assert_eq!(e[0], EvalPair::new(1.0, 1.5));
    }
}
