//! Byte-level corpora: a file on disk or one of the builtin generators.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

pub const ALPHABET: &[u8; 27] = b"abcdefghijklmnopqrstuvwxyz ";
const SUCCESSORS: usize = 7;
const TABLE_SEED: u64 = 0x6c62_7131;
const MIXED_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CorpusSource {
    /// A short pattern repeated end to end.
    Repeated(String),
    /// Order-1 chain over [`ALPHABET`] with the fixed [`markov_table`].
    Markov,
    /// Markov text with some blocks replaced by a repeated random word.
    Mixed,
    File(PathBuf),
}

impl FromStr for CorpusSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "markov" => Ok(CorpusSource::Markov),
            "mixed" => Ok(CorpusSource::Mixed),
            _ => {
                if let Some(p) = s.strip_prefix("repeated:") {
                    if p.is_empty() {
                        return Err("repeated pattern is empty".into());
                    }
                    Ok(CorpusSource::Repeated(p.to_string()))
                } else if let Some(p) = s.strip_prefix("file:") {
                    Ok(CorpusSource::File(p.into()))
                } else {
                    Err(format!(
                        "unknown corpus {s:?} (markov | mixed | repeated:<text> | file:<path>)"
                    ))
                }
            }
        }
    }
}

impl fmt::Display for CorpusSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusSource::Repeated(p) => write!(f, "repeated:{p}"),
            CorpusSource::Markov => f.write_str("markov"),
            CorpusSource::Mixed => f.write_str("mixed"),
            CorpusSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Transition probabilities `table[a][b] = P(next = b | current = a)` over
/// alphabet indices. Every row has seven successors.
pub fn markov_table() -> Vec<[f64; 27]> {
    let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
    (0..27)
        .map(|_| {
            let mut row = [0.0f64; 27];
            let picks = rand::seq::index::sample(&mut rng, 27, SUCCESSORS);
            for j in picks {
                row[j] = rng.gen_range(0.5..1.5);
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        })
        .collect()
}

fn markov(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rows: Vec<WeightedIndex<f64>> = markov_table()
        .iter()
        .map(|r| WeightedIndex::new(r).expect("rows have positive mass"))
        .collect();
    let mut state = rng.gen_range(0..27);
    (0..len)
        .map(|_| {
            let tok = ALPHABET[state] as usize;
            state = rows[state].sample(rng);
            tok
        })
        .collect()
}

fn mixed(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = markov(len, rng);
    for block in out.chunks_mut(MIXED_BLOCK) {
        if rng.gen_range(0..4) == 0 {
            let word: Vec<usize> = (0..rng.gen_range(3..=8))
                .map(|_| ALPHABET[rng.gen_range(0..26)] as usize)
                .chain([b' ' as usize])
                .collect();
            for (i, t) in block.iter_mut().enumerate() {
                *t = word[i % word.len()];
            }
        }
    }
    out
}

/// Generates `len` tokens, or reads up to `len` bytes from a file.
pub fn ingest_corpus(source: &CorpusSource, len: usize, seed: u64) -> CliResult<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match source {
        CorpusSource::Repeated(p) => p.bytes().cycle().take(len).map(usize::from).collect(),
        CorpusSource::Markov => markov(len, &mut rng),
        CorpusSource::Mixed => mixed(len, &mut rng),
        CorpusSource::File(path) => read_file(path, len)?,
    })
}

fn read_file(path: &Path, len: usize) -> CliResult<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(bytes.into_iter().take(len).map(usize::from).collect())
}

/// Training and validation token streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// One stream of `train_len + valid_len` tokens, split at the end.
pub fn splits(source: &CorpusSource, train_len: usize, valid_len: usize, seed: u64) -> CliResult<Splits> {
    let mut all = ingest_corpus(source, train_len + valid_len, seed)?;
    if all.len() <= valid_len + 1 {
        return Err(CliError::Config(format!(
            "corpus has {} tokens, too few for a {valid_len}-token validation split",
            all.len()
        )));
    }
    let valid = all.split_off(all.len() - valid_len);
    Ok(Splits { train: all, valid })
}

/// `count` windows of `len` tokens at evenly spaced offsets.
pub fn sample_windows(corpus: &[usize], count: usize, len: usize) -> CliResult<Vec<Vec<usize>>> {
    if corpus.len() < len || count == 0 {
        return Err(CliError::Config("corpus too short for the requested windows".into()));
    }
    let span = corpus.len() - len;
    Ok((0..count)
        .map(|i| {
            let start = if count == 1 { 0 } else { i * span / (count - 1) };
            corpus[start..start + len].to_vec()
        })
        .collect())
}
