//! Exact maximum-inner-product search over document embeddings.
//!
//! The index is a dense [n, d] matrix scanned linearly per query; at desk
//! scale (hundreds of documents) exactness is worth more than sublinear
//! tricks. Ranking is total: descending score, ties broken by ascending
//! document id, so `search(q, k)` is always the k-prefix of
//! `search(q, n)`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 4] = b"VRIX";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

/// Ranked retrieval result, best hit first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub hits: Vec<SearchHit>,
}

impl TopKResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.doc_id.as_str()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.hits.iter().map(|h| h.score).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DocumentIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f64>,
}

impl DocumentIndex {
    /// Builds from (id, embedding) pairs. All embeddings must share one
    /// dimension and ids must be unique.
    pub fn build(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("index needs at least one document"));
        }
        let dim = entries[0].1.len();
        if dim == 0 {
            return Err(Error::invalid("index embeddings must be non-empty"));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len() * dim);
        let mut seen = HashSet::new();
        for (id, emb) in entries {
            if emb.len() != dim {
                return Err(Error::shape(format!(
                    "document `{}` has dimension {}, index uses {}",
                    id,
                    emb.len(),
                    dim
                )));
            }
            if !emb.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("document `{}` embedding is not finite", id)));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate document id `{}` in index", id)));
            }
            ids.push(id);
            rows.extend(emb);
        }
        Ok(DocumentIndex { dim, ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|i| i == id)
    }

    /// The stored embedding of one document.
    pub fn embedding(&self, id: &str) -> Result<&[f64]> {
        let i = self
            .position(id)
            .ok_or_else(|| Error::invalid(format!("unknown document id `{}`", id)))?;
        Ok(&self.rows[i * self.dim..(i + 1) * self.dim])
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::shape(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn score_at(&self, i: usize, query: &[f64]) -> f64 {
        let row = &self.rows[i * self.dim..(i + 1) * self.dim];
        row.iter().zip(query).map(|(a, b)| a * b).sum()
    }

    /// Exact top-k by inner product. `k` greater than the collection size
    /// returns every document.
    pub fn search(&self, query: &[f64], k: usize) -> Result<TopKResult> {
        self.check_query(query)?;
        if k == 0 {
            return Err(Error::invalid("search needs k >= 1"));
        }
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|&a, &b| {
            self.score_at(b, query)
                .total_cmp(&self.score_at(a, query))
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        let hits = order
            .into_iter()
            .take(k)
            .map(|i| SearchHit {
                doc_id: self.ids[i].clone(),
                score: self.score_at(i, query),
            })
            .collect();
        Ok(TopKResult { hits })
    }

    /// New index without the given documents. Every id must be present.
    pub fn remove(&self, doc_ids: &[String]) -> Result<DocumentIndex> {
        let drop: HashSet<&str> = doc_ids.iter().map(|s| s.as_str()).collect();
        for id in doc_ids {
            if !self.contains(id) {
                return Err(Error::invalid(format!("cannot remove unknown document id `{}`", id)));
            }
        }
        let entries: Vec<(String, Vec<f64>)> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| !drop.contains(id.as_str()))
            .map(|(i, id)| (id.clone(), self.rows[i * self.dim..(i + 1) * self.dim].to_vec()))
            .collect();
        DocumentIndex::build(entries)
    }

    /// Raw inner-product scores for an explicit support set, in support
    /// order. The support must not repeat ids.
    pub fn scores_on_support(&self, query: &[f64], support: &[String]) -> Result<Vec<f64>> {
        self.check_query(query)?;
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(support.len());
        for id in support {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("support repeats document id `{}`", id)));
            }
            let i = self
                .position(id)
                .ok_or_else(|| Error::invalid(format!("unknown document id `{}` in support", id)))?;
            out.push(self.score_at(i, query));
        }
        Ok(out)
    }

    /// Writes the binary snapshot: magic, version, counts, ids, then the
    /// embedding matrix as little-endian f64. Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(SNAPSHOT_MAGIC).map_err(io_err)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io_err)?;
        for id in &self.ids {
            let bytes = id.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
        }
        for v in &self.rows {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<DocumentIndex> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path, e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::invalid(format!(
                "{} is not an index snapshot (bad magic)",
                path.display()
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io_err)?;
        let version = u32::from_le_bytes(b4);
        if version != SNAPSHOT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported index snapshot version {}",
                version
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io_err)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(io_err)?;
        let dim = u64::from_le_bytes(b8) as usize;

        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4).map_err(io_err)?;
            let len = u32::from_le_bytes(b4) as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io_err)?;
            let id = String::from_utf8(buf)
                .map_err(|_| Error::invalid("index snapshot id is not utf-8"))?;
            ids.push(id);
        }
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            r.read_exact(&mut b8).map_err(io_err)?;
            rows.push(f64::from_le_bytes(b8));
        }
        Ok(DocumentIndex { dim, ids, rows })
    }
}
