//! Lexical retrieval over a local passage corpus (tf-idf, cosine similarity).

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub source_tag: String,
}

pub type Corpus = Vec<Document>;

/// Reads a corpus from JSONL records `{doc_id, text, source_tag}`.
pub fn load_corpus(path: impl AsRef<Path>) -> std::io::Result<Corpus> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut docs = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("corpus line {}: {e}", n + 1),
            )
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub doc_id: String,
    pub text: String,
    pub score: f64,
    pub source_tag: String,
}

pub trait RetrievalBackend: Send + Sync {
    /// At most `k` passages in non-increasing score order.
    fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievedPassage>;
}

/// Retrieval disabled: always empty.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoRetrieval;

impl RetrievalBackend for NoRetrieval {
    fn retrieve(&self, _query: &str, _k: usize) -> Vec<RetrievedPassage> {
        Vec::new()
    }
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_insert(0.0) += 1.0;
    }
    counts
}

/// Pre-computed tf-idf vectors for a corpus.
///
/// Weights are raw term frequency times smoothed idf
/// `ln((1 + N) / (1 + df)) + 1`; documents are L2-normalized.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    docs: Vec<Document>,
    idf: HashMap<String, f64>,
    vectors: Vec<Vec<(String, f64)>>,
}

impl TfIdfIndex {
    pub fn new(corpus: Corpus) -> Self {
        let n = corpus.len() as f64;
        let counts: Vec<BTreeMap<String, f64>> =
            corpus.iter().map(|d| term_counts(&d.text)).collect();
        let mut df: HashMap<String, f64> = HashMap::new();
        for c in &counts {
            for term in c.keys() {
                *df.entry(term.clone()).or_insert(0.0) += 1.0;
            }
        }
        let idf: HashMap<String, f64> = df
            .into_iter()
            .map(|(t, d)| (t, ((1.0 + n) / (1.0 + d)).ln() + 1.0))
            .collect();
        let vectors = counts
            .into_iter()
            .map(|c| {
                let mut v: Vec<(String, f64)> =
                    c.into_iter().map(|(t, tf)| { let w = tf * idf[&t]; (t, w) }).collect();
                let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|(_, w)| *w /= norm);
                }
                v
            })
            .collect();
        Self {
            docs: corpus,
            idf,
            vectors,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Cosine similarity between `query` and every document, in corpus order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q: Vec<(String, f64)> = term_counts(query)
            .into_iter()
            .filter_map(|(t, tf)| self.idf.get(&t).map(|idf| (t, tf * idf)))
            .collect();
        let q_norm = q.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if q_norm == 0.0 {
            return vec![0.0; self.docs.len()];
        }
        let q: HashMap<&str, f64> = q.iter().map(|(t, w)| (t.as_str(), w / q_norm)).collect();
        self.vectors
            .iter()
            .map(|doc| {
                doc.iter()
                    .filter_map(|(t, w)| q.get(t.as_str()).map(|qw| qw * w))
                    .sum()
            })
            .collect()
    }
}

impl RetrievalBackend for TfIdfIndex {
    fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievedPassage> {
        if self.docs.is_empty() {
            log::warn!("retrieval requested over an empty corpus");
            return Vec::new();
        }
        let scores = self.scores(query);
        let mut ranked: Vec<usize> = (0..self.docs.len()).filter(|&i| scores[i] > 0.0).collect();
        ranked.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.docs[a].doc_id.cmp(&self.docs[b].doc_id))
        });
        ranked
            .into_iter()
            .take(k)
            .map(|i| RetrievedPassage {
                doc_id: self.docs[i].doc_id.clone(),
                text: self.docs[i].text.clone(),
                score: scores[i],
                source_tag: self.docs[i].source_tag.clone(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            text: text.into(),
            source_tag: "guideline".into(),
        }
    }

    #[test]
    fn unique_match_ranks_first() {
        let idx = TfIdfIndex::new(vec![
            doc("doc1", "aspirin reduces fever"),
            doc("doc2", "troponin elevation indicates myocardial injury"),
            doc("doc3", "ferritin reflects iron stores"),
        ]);
        let hits = idx.retrieve("troponin", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "doc2");
        assert!(hits[0].score > 0.0);
    }

    #[test]
    fn empty_corpus_returns_nothing() {
        assert!(TfIdfIndex::new(Vec::new()).retrieve("anything", 3).is_empty());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = TfIdfIndex::new(vec![
            doc("b", "sepsis lactate"),
            doc("a", "sepsis lactate"),
            doc("c", "unrelated text"),
        ]);
        let ids: Vec<_> = idx.retrieve("lactate", 5).into_iter().map(|p| p.doc_id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    proptest! {
        #[test]
        fn at_most_k_sorted_and_idempotent(
            texts in prop::collection::vec("[a-e ]{0,30}", 0..12),
            query in "[a-e ]{1,10}",
            k in 1usize..6,
        ) {
            let corpus: Vec<Document> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| doc(&format!("d{i:02}"), t))
                .collect();
            let idx = TfIdfIndex::new(corpus);
            let first = idx.retrieve(&query, k);
            prop_assert!(first.len() <= k);
            prop_assert!(first.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(first.iter().all(|p| p.score >= 0.0));
            prop_assert_eq!(first, idx.retrieve(&query, k));
        }
    }
}
