//! CSLS retrieval, bilingual dictionaries and precision@1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::mapping::OrthogonalMap;
use crate::ot::cost::mean_top_k;
use crate::{Error, Result};

/// Rows per similarity block; results do not depend on it.
const BLOCK: usize = 256;

/// Source word → accepted target translations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BilingualDictionary {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl BilingualDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source: impl Into<String>, target: impl Into<String>) {
        self.entries.entry(source.into()).or_default().insert(target.into());
    }

    pub fn get(&self, source: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(source)
    }

    /// Number of distinct source words.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.entries.iter()
    }

    /// First translation of every source word, the form produced by retrieval.
    pub fn top1(&self) -> HashMap<&str, &str> {
        self.entries
            .iter()
            .filter_map(|(s, t)| t.iter().next().map(|t| (s.as_str(), t.as_str())))
            .collect()
    }

    /// MUSE text format: one `source target` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (s, ts) in &self.entries {
            for t in ts {
                out.push_str(s);
                out.push(' ');
                out.push_str(t);
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_text().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Parses MUSE dictionary text. Every nonempty line must hold exactly two
/// whitespace-separated tokens.
pub fn parse_muse_dictionary(text: &str) -> Result<BilingualDictionary> {
    let mut dict = BilingualDictionary::new();
    for (i, line) in text.lines().enumerate() {
        let mut toks = line.split_ascii_whitespace();
        match (toks.next(), toks.next(), toks.next()) {
            (None, ..) => continue,
            (Some(s), Some(t), None) => dict.insert(s, t),
            _ => {
                return Err(Error::parse(
                    i + 1,
                    format!("expected \"source target\", got {line:?}"),
                ))
            }
        }
    }
    Ok(dict)
}

pub fn load_muse_dictionary(path: impl AsRef<Path>) -> Result<BilingualDictionary> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_muse_dictionary(&text).map_err(|e| e.in_file(path))
}

/// Precision@1 summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when no gold source word could be evaluated.
    #[serde(rename = "p_at_1")]
    pub precision_at_1: Option<f64>,
    pub evaluated: usize,
    pub skipped_oov: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Scores top-1 predictions against a gold dictionary.
///
/// A gold source word without a prediction is out of vocabulary: it is left
/// out of the denominator and counted in `skipped_oov`.
pub fn evaluate_p_at_1(predictions: &HashMap<&str, &str>, gold: &BilingualDictionary) -> EvalReport {
    let mut evaluated = 0;
    let mut correct = 0;
    let mut skipped_oov = 0;
    for (src, targets) in gold.iter() {
        match predictions.get(src.as_str()) {
            Some(pred) => {
                evaluated += 1;
                if targets.contains(*pred) {
                    correct += 1;
                }
            }
            None => skipped_oov += 1,
        }
    }
    EvalReport {
        precision_at_1: (evaluated > 0).then(|| correct as f64 / evaluated as f64),
        evaluated,
        skipped_oov,
    }
}

/// Index of the maximum, lowest index on ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean of the `k` largest dot products of each row of `queries` with the
/// rows of `keys`.
pub fn neighbourhood_means(queries: &DMatrix<f64>, keys: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let kt = keys.transpose();
    let mut out = Vec::with_capacity(queries.nrows());
    for start in (0..queries.nrows()).step_by(BLOCK) {
        let len = BLOCK.min(queries.nrows() - start);
        let sim = queries.rows(start, len) * &kt;
        let block: Vec<f64> = (0..len)
            .into_par_iter()
            .map(|r| {
                let mut row: Vec<f64> = sim.row(r).iter().copied().collect();
                mean_top_k(&mut row, k)
            })
            .collect();
        out.extend(block);
    }
    out
}

/// Best target for each of the given query rows under
/// `score(i, j) = 2·sᵢ·tⱼ − penalty_s[i] − penalty_t[j]`.
fn retrieve_rows(
    s: &DMatrix<f64>,
    rows: &[usize],
    t: &DMatrix<f64>,
    penalty_s: &[f64],
    penalty_t: &[f64],
) -> Vec<usize> {
    let tt = t.transpose();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(BLOCK) {
        let sim = s.select_rows(chunk.iter()) * &tt;
        let block: Vec<usize> = chunk
            .par_iter()
            .enumerate()
            .map(|(r, &i)| {
                let ps = penalty_s[i];
                argmax(sim.row(r).iter().zip(penalty_t).map(|(&c, &pt)| 2.0 * c - ps - pt))
            })
            .collect();
        out.extend(block);
    }
    out
}

fn check_retrieval_inputs(s: &DMatrix<f64>, t: &DMatrix<f64>, k: usize) -> Result<()> {
    if s.ncols() != t.ncols() {
        return Err(Error::Shape(format!("source dim {} vs target dim {}", s.ncols(), t.ncols())));
    }
    if k == 0 || k > t.nrows() || k > s.nrows() {
        return Err(Error::Invalid(format!(
            "CSLS k={k} must be in 1..={}",
            s.nrows().min(t.nrows())
        )));
    }
    Ok(())
}

/// CSLS top-1: for each row of `s`, the row of `t` maximizing
/// `2·cos(x,y) − r_T(x) − r_S(y)`, where `r_T(x)` is the mean cosine of `x`
/// to its `k` nearest target rows and `r_S(y)` the mean cosine of `y` to its
/// `k` nearest rows of `s`. Rows must be unit norm.
pub fn csls_retrieve(s: &DMatrix<f64>, t: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..s.nrows()).collect();
    csls_retrieve_rows(s, &rows, t, k)
}

/// [`csls_retrieve`] for a subset of query rows; the hubness terms are still
/// computed over all of `s`.
pub fn csls_retrieve_rows(s: &DMatrix<f64>, rows: &[usize], t: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    check_retrieval_inputs(s, t, k)?;
    if let Some(&bad) = rows.iter().find(|&&i| i >= s.nrows()) {
        return Err(Error::Invalid(format!("query row {bad} out of range")));
    }
    let r_t = neighbourhood_means(s, t, k);
    let r_s = neighbourhood_means(t, s, k);
    Ok(retrieve_rows(s, rows, t, &r_t, &r_s))
}

/// Plain cosine nearest neighbour (rows must be unit norm).
pub fn nn_retrieve(s: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<Vec<usize>> {
    if s.ncols() != t.ncols() {
        return Err(Error::Shape(format!("source dim {} vs target dim {}", s.ncols(), t.ncols())));
    }
    if t.nrows() == 0 {
        return Err(Error::Invalid("empty target set".into()));
    }
    let rows: Vec<usize> = (0..s.nrows()).collect();
    Ok(retrieve_rows(s, &rows, t, &vec![0.0; s.nrows()], &vec![0.0; t.nrows()]))
}

/// Translates the first `source_count` source words by CSLS retrieval over
/// the whole target vocabulary.
pub fn induce_lexicon(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    q: &OrthogonalMap,
    source_count: usize,
    k: usize,
) -> Result<BilingualDictionary> {
    if source_count > x.n() {
        return Err(Error::Invalid(format!(
            "source_count {source_count} exceeds vocabulary size {}",
            x.n()
        )));
    }
    let mut dict = BilingualDictionary::new();
    if source_count == 0 {
        return Ok(dict);
    }
    let mapped = q.apply(&x.vectors().rows(0, source_count).into_owned())?;
    let best = csls_retrieve(&mapped, y.vectors(), k)?;
    for (i, j) in best.into_iter().enumerate() {
        dict.insert(x.vocab()[i].clone(), y.vocab()[j].clone());
    }
    Ok(dict)
}

/// Retrieval criterion used when scoring a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Nn,
    Csls { k: usize },
}

/// Maps every source word that appears in `gold`, retrieves a translation
/// from the whole target vocabulary and scores it.
pub fn evaluate_map(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    q: &OrthogonalMap,
    gold: &BilingualDictionary,
    criterion: Criterion,
) -> Result<EvalReport> {
    let index = x.index();
    let rows: Vec<usize> = gold.iter().filter_map(|(s, _)| index.get(s.as_str()).copied()).collect();
    let mapped = q.apply(x.vectors())?;
    let best = match criterion {
        Criterion::Nn => nn_retrieve(&mapped.select_rows(rows.iter()), y.vectors())?,
        Criterion::Csls { k } => csls_retrieve_rows(&mapped, &rows, y.vectors(), k)?,
    };
    let predictions: HashMap<&str, &str> = rows
        .iter()
        .zip(best)
        .map(|(&i, j)| (x.vocab()[i].as_str(), y.vocab()[j].as_str()))
        .collect();
    Ok(evaluate_p_at_1(&predictions, gold))
}
