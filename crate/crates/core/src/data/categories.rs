//! News-category utilities: sentiment aggregation, pairwise cosine
//! similarity of category embeddings, and selection of semantically
//! independent category pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric category-by-category cosine similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    names: Vec<String>,
    /// Row-major `k x k`.
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let k = names.len();
        if k < 2 {
            return Err(Error::InvalidMatrix(format!(
                "need at least 2 categories, got {k}"
            )));
        }
        if values.len() != k * k {
            return Err(Error::InvalidMatrix(format!(
                "expected {} values for {k} categories, got {}",
                k * k,
                values.len()
            )));
        }
        const TOL: f64 = 1e-9;
        for i in 0..k {
            let d = values[i * k + i];
            if (d - 1.0).abs() > TOL {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal entry for {} is {d}, expected 1",
                    names[i]
                )));
            }
            for j in 0..k {
                let v = values[i * k + j];
                if !v.is_finite() || !(-1.0 - TOL..=1.0 + TOL).contains(&v) {
                    return Err(Error::InvalidMatrix(format!(
                        "entry ({}, {}) = {v} outside [-1, 1]",
                        names[i], names[j]
                    )));
                }
                let vt = values[j * k + i];
                if (v - vt).abs() > TOL {
                    return Err(Error::InvalidMatrix(format!(
                        "asymmetry at ({}, {}): {v} vs {vt}",
                        names[i], names[j]
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { names, values })
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k() + j]
    }

    /// CSV layout: a header row `,name1,name2,...` then one row per
    /// category: `name, v1, v2, ...`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::IoAt {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "empty file".into(),
        })?;
        let names: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let k = names.len();
        let mut values = vec![0.0; k * k];
        let mut row_count = 0;
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let row_name = fields.next().unwrap_or("").trim();
            if i >= k {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("more rows than header categories ({k})"),
                });
            }
            if row_name != names[i] {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("row {i} is {row_name:?}, header order says {:?}", names[i]),
                });
            }
            let row: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("non-numeric entry in row {row_name:?}"),
                })?;
            if row.len() != k {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("row {row_name:?} has {} entries, expected {k}", row.len()),
                });
            }
            values[i * k..(i + 1) * k].copy_from_slice(&row);
            row_count += 1;
        }
        if row_count != k {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("found {row_count} rows, expected {k}"),
            });
        }
        SimilarityMatrix::new(names, values)
    }
}

/// Per-category lists of document compound sentiment scores in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentTable {
    categories: Vec<(String, Vec<f64>)>,
}

impl SentimentTable {
    pub fn new(categories: Vec<(String, Vec<f64>)>) -> Result<Self> {
        for (name, scores) in &categories {
            for &s in scores {
                if !(-1.0..=1.0).contains(&s) {
                    return Err(Error::Validation(format!(
                        "sentiment score {s} for {name} outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(SentimentTable { categories })
    }

    pub fn categories(&self) -> &[(String, Vec<f64>)] {
        &self.categories
    }

    /// CSV layout: header row of category names, then rows of one score per
    /// column; empty cells allowed where categories have fewer documents.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::IoAt {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "empty file".into(),
        })?;
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for line in lines {
            for (c, field) in line.split(',').enumerate() {
                let field = field.trim();
                if field.is_empty() {
                    continue;
                }
                if c >= names.len() {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        message: "row wider than header".into(),
                    });
                }
                let v: f64 = field.parse().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("non-numeric sentiment {field:?}"),
                })?;
                columns[c].push(v);
            }
        }
        SentimentTable::new(names.into_iter().zip(columns).collect())
    }
}

/// Arithmetic mean of each category's scores, in table order.
pub fn aggregate_sentiment(table: &SentimentTable) -> Result<Vec<(String, f64)>> {
    table
        .categories()
        .iter()
        .map(|(name, scores)| {
            if scores.is_empty() {
                return Err(Error::Validation(format!(
                    "category {name} has no documents"
                )));
            }
            Ok((
                name.clone(),
                scores.iter().sum::<f64>() / scores.len() as f64,
            ))
        })
        .collect()
}

/// Pairwise cosine similarities between category embeddings.
pub fn cosine_matrix(embeddings: &[(String, Vec<f64>)]) -> Result<SimilarityMatrix> {
    if embeddings.len() < 2 {
        return Err(Error::Validation("need at least 2 categories".into()));
    }
    let dim = embeddings[0].1.len();
    let mut norms = Vec::with_capacity(embeddings.len());
    for (name, v) in embeddings {
        if v.len() != dim {
            return Err(Error::Validation(format!(
                "embedding for {name} has dim {}, expected {dim}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Validation(format!("zero embedding for {name}")));
        }
        norms.push(norm);
    }
    let k = embeddings.len();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        values[i * k + i] = 1.0;
        for j in (i + 1)..k {
            let dot: f64 = embeddings[i]
                .1
                .iter()
                .zip(&embeddings[j].1)
                .map(|(a, b)| a * b)
                .sum();
            let cos = dot / (norms[i] * norms[j]);
            values[i * k + j] = cos;
            values[j * k + i] = cos;
        }
    }
    SimilarityMatrix::new(embeddings.iter().map(|(n, _)| n.clone()).collect(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Pair the category most similar to the rest (the anchor) with the one
    /// least similar to the rest.
    AnchorDistinct,
    /// The unordered pair with the minimum similarity.
    MinPair,
}

/// Full ranking report emitted alongside either selection.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategoryRanking {
    /// (category, mean off-diagonal similarity), in matrix order.
    pub mean_similarity: Vec<(String, f64)>,
    /// Most similar unordered pair, names sorted lexicographically.
    pub max_pair: (String, String, f64),
    /// Least similar unordered pair, names sorted lexicographically.
    pub min_pair: (String, String, f64),
    /// (anchor, most distinct) under the anchor rule.
    pub anchor_distinct: (String, String),
    /// The minimum-similarity pair as a selection.
    pub min_pair_selection: (String, String),
}

/// Ties are broken lexicographically by category name.
pub fn rank_categories(m: &SimilarityMatrix) -> CategoryRanking {
    let k = m.k();
    let mean_similarity: Vec<(String, f64)> = (0..k)
        .map(|i| {
            let sum: f64 = (0..k).filter(|&j| j != i).map(|j| m.get(i, j)).sum();
            (m.names()[i].clone(), sum / (k - 1) as f64)
        })
        .collect();

    let better = |cand: (usize, f64), best: (usize, f64), maximize: bool| -> bool {
        if cand.1 != best.1 {
            return if maximize {
                cand.1 > best.1
            } else {
                cand.1 < best.1
            };
        }
        m.names()[cand.0] < m.names()[best.0]
    };

    let mut anchor = (0, mean_similarity[0].1);
    let mut distinct = (0, mean_similarity[0].1);
    for (i, entry) in mean_similarity.iter().enumerate().skip(1) {
        if better((i, entry.1), anchor, true) {
            anchor = (i, entry.1);
        }
        if better((i, entry.1), distinct, false) {
            distinct = (i, entry.1);
        }
    }

    let sorted_pair = |i: usize, j: usize| -> (String, String) {
        let (a, b) = (m.names()[i].clone(), m.names()[j].clone());
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    };

    let mut max_pair: Option<(usize, usize, f64)> = None;
    let mut min_pair: Option<(usize, usize, f64)> = None;
    for i in 0..k {
        for j in (i + 1)..k {
            let v = m.get(i, j);
            let key = sorted_pair(i, j);
            let replace_max = match &max_pair {
                None => true,
                Some((bi, bj, bv)) => v > *bv || (v == *bv && key < sorted_pair(*bi, *bj)),
            };
            if replace_max {
                max_pair = Some((i, j, v));
            }
            let replace_min = match &min_pair {
                None => true,
                Some((bi, bj, bv)) => v < *bv || (v == *bv && key < sorted_pair(*bi, *bj)),
            };
            if replace_min {
                min_pair = Some((i, j, v));
            }
        }
    }
    let (mi, mj, mv) = max_pair.expect("k >= 2");
    let (ni, nj, nv) = min_pair.expect("k >= 2");
    let max_named = sorted_pair(mi, mj);
    let min_named = sorted_pair(ni, nj);

    CategoryRanking {
        mean_similarity,
        max_pair: (max_named.0, max_named.1, mv),
        min_pair: (min_named.0.clone(), min_named.1.clone(), nv),
        anchor_distinct: (m.names()[anchor.0].clone(), m.names()[distinct.0].clone()),
        min_pair_selection: (min_named.0, min_named.1),
    }
}

/// Selected pair under `rule`, plus the full ranking report.
pub fn select_categories(
    m: &SimilarityMatrix,
    rule: SelectionRule,
) -> ((String, String), CategoryRanking) {
    let ranking = rank_categories(m);
    let pair = match rule {
        SelectionRule::AnchorDistinct => ranking.anchor_distinct.clone(),
        SelectionRule::MinPair => ranking.min_pair_selection.clone(),
    };
    (pair, ranking)
}
