//! Monolingual embedding matrices: loading, normalization and batch sampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::{Error, Result};

/// Row norms below this are treated as zero vectors.
const ZERO_NORM: f64 = 1e-12;

/// A frequency-ranked vocabulary with one `d`-dimensional vector per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vocab: Vec<String>,
    vectors: DMatrix<f64>,
}

impl EmbeddingMatrix {
    /// Builds a matrix after checking that `vocab` is duplicate-free and has one
    /// entry per row.
    pub fn new(vocab: Vec<String>, vectors: DMatrix<f64>) -> Result<Self> {
        if vocab.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} words but {} vector rows",
                vocab.len(),
                vectors.nrows()
            )));
        }
        let mut seen = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if let Some(j) = seen.insert(w.as_str(), i) {
                return Err(Error::Invalid(format!(
                    "duplicate word {w:?} at rows {j} and {i}"
                )));
            }
        }
        Ok(Self { vocab, vectors })
    }

    /// Rows named `w0, w1, ...`; handy for synthetic data.
    pub fn from_vectors(vectors: DMatrix<f64>) -> Self {
        let vocab = (0..vectors.nrows()).map(|i| format!("w{i}")).collect();
        Self { vocab, vectors }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn into_parts(self) -> (Vec<String>, DMatrix<f64>) {
        (self.vocab, self.vectors)
    }

    /// Number of words.
    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    /// Vector dimension.
    pub fn d(&self) -> usize {
        self.vectors.ncols()
    }

    /// The first `k` words (all of them if `k >= n`).
    pub fn head(&self, k: usize) -> EmbeddingMatrix {
        let k = k.min(self.n());
        EmbeddingMatrix {
            vocab: self.vocab[..k].to_vec(),
            vectors: self.vectors.rows(0, k).into_owned(),
        }
    }

    /// Word → row index.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect()
    }

    /// Writes the fastText text format (`<count> <dim>` header, one word per line).
    pub fn write_vec(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(out, "{} {}", self.n(), self.d()).map_err(io)?;
        for (i, word) in self.vocab.iter().enumerate() {
            write!(out, "{word}").map_err(io)?;
            for v in self.vectors.row(i).iter() {
                write!(out, " {v:e}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Loads at most `max_words` rows of a fastText `.vec` file, in file order.
pub fn load_fasttext_vec(path: impl AsRef<Path>, max_words: usize) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_fasttext_vec(BufReader::new(file), max_words).map_err(|e| e.in_file(path))
}

/// Parses fastText text-format embeddings from any reader.
///
/// Duplicate words keep their first occurrence; later copies are skipped and
/// do not count toward `max_words`. A row with the wrong number of values is
/// a hard error. LF and CRLF line endings are accepted.
pub fn parse_fasttext_vec<R: BufRead>(mut reader: R, max_words: usize) -> Result<EmbeddingMatrix> {
    if max_words == 0 {
        return Err(Error::Invalid("max_words must be positive".into()));
    }

    let mut buf = Vec::new();
    let mut read_line = |buf: &mut Vec<u8>, lineno: usize| -> Result<Option<String>> {
        buf.clear();
        let n = reader
            .read_until(b'\n', buf)
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
        if n == 0 {
            return Ok(None);
        }
        let s = std::str::from_utf8(buf).map_err(|_| Error::parse(lineno, "invalid UTF-8"))?;
        Ok(Some(s.trim_end_matches(['\n', '\r']).to_owned()))
    };

    let header = read_line(&mut buf, 1)?.ok_or_else(|| Error::parse(1, "empty file"))?;
    let (count, dim) = parse_header(&header)?;

    let limit = count.min(max_words);
    let mut vocab = Vec::with_capacity(limit);
    let mut seen = HashMap::with_capacity(limit);
    let mut data = Vec::with_capacity(limit * dim);
    let mut lineno = 1;

    while vocab.len() < limit {
        lineno += 1;
        let Some(line) = read_line(&mut buf, lineno)? else {
            log::warn!(
                "header announces {count} words but file ends after {} rows",
                vocab.len()
            );
            break;
        };
        let mut tokens = line.split_ascii_whitespace();
        let Some(word) = tokens.next() else {
            continue;
        };
        let start = data.len();
        for tok in tokens {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad float {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(lineno, format!("non-finite value {tok:?}")));
            }
            data.push(v);
        }
        let got = data.len() - start;
        if got != dim {
            return Err(Error::parse(
                lineno,
                format!("word {word:?} has {got} values, expected {dim}"),
            ));
        }
        if seen.contains_key(word) {
            log::warn!("line {lineno}: duplicate word {word:?} skipped");
            data.truncate(start);
            continue;
        }
        seen.insert(word.to_owned(), vocab.len());
        vocab.push(word.to_owned());
    }

    let vectors = DMatrix::from_row_slice(vocab.len(), dim, &data);
    Ok(EmbeddingMatrix { vocab, vectors })
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split_ascii_whitespace();
    let (Some(c), Some(d), None) = (it.next(), it.next(), it.next()) else {
        return Err(Error::parse(1, format!("expected \"<count> <dim>\", got {line:?}")));
    };
    let count = c
        .parse::<usize>()
        .map_err(|_| Error::parse(1, format!("bad word count {c:?}")))?;
    let dim = d
        .parse::<usize>()
        .map_err(|_| Error::parse(1, format!("bad dimension {d:?}")))?;
    if dim == 0 {
        return Err(Error::parse(1, "dimension must be positive"));
    }
    Ok((count, dim))
}

/// Scales every row to unit Euclidean norm.
pub fn unit_normalize_rows(e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut vectors = e.vectors.clone();
    for (i, mut row) in vectors.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm < ZERO_NORM {
            return Err(Error::Numerical(format!(
                "row {i} ({:?}) is the zero vector",
                e.vocab[i]
            )));
        }
        row /= norm;
    }
    Ok(EmbeddingMatrix {
        vocab: e.vocab.clone(),
        vectors,
    })
}

/// Subtracts the column mean from every row.
pub fn center(e: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mean = e.vectors.row_mean();
    let mut vectors = e.vectors.clone();
    for mut row in vectors.row_iter_mut() {
        row -= &mean;
    }
    EmbeddingMatrix {
        vocab: e.vocab.clone(),
        vectors,
    }
}

/// Unit-normalize, center, unit-normalize again.
///
/// A row that is zero before either normalization is an error; in particular a
/// single-row matrix always fails since centering zeroes it.
pub fn normalize(e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let unit = unit_normalize_rows(e)?;
    unit_normalize_rows(&center(&unit))
}

/// A sampled set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Gathers the given rows of `e`.
    pub fn from_indices(e: &EmbeddingMatrix, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= e.n()) {
            return Err(Error::Invalid(format!("row {bad} out of range for n={}", e.n())));
        }
        let matrix = e.vectors.select_rows(indices.iter());
        Ok(Self { indices, matrix })
    }
}

/// Draws `b` distinct rows uniformly from the first `min(pool_size, n)` words.
pub fn sample_batch<R: Rng + ?Sized>(
    e: &EmbeddingMatrix,
    pool_size: usize,
    b: usize,
    rng: &mut R,
) -> Result<Batch> {
    let pool = pool_size.min(e.n());
    if b == 0 || b > pool {
        return Err(Error::Invalid(format!(
            "batch size {b} must be in 1..={pool} (pool {pool_size}, n {})",
            e.n()
        )));
    }
    let indices = rand::seq::index::sample(rng, pool, b).into_vec();
    Batch::from_indices(e, indices)
}
