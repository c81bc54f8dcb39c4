use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use super::{Image, PromptPair};
use crate::error::{Error, Result};

/// Training database with a precomputed pixel index for retrieval.
#[derive(Clone, Debug)]
pub struct PromptDatabase {
    pairs: Vec<PromptPair>,
    /// Euclidean norm of each flattened image.
    norms: Vec<f64>,
}

/// A retrieval hit: database position and similarity score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub id: u32,
    pub score: f64,
}

fn norm(im: &Image) -> f64 {
    im.data
        .iter()
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity between two images' flattened raw pixels.
pub fn pixel_cosine(a: &Image, b: &Image) -> f64 {
    let dot: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    dot / (norm(a).max(1e-12) * norm(b).max(1e-12))
}

impl PromptDatabase {
    pub fn new(pairs: Vec<PromptPair>) -> Result<Self> {
        let mut ids: Vec<u32> = pairs.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("prompt database ids must be unique".into()));
        }
        if let Some(first) = pairs.first() {
            let (h, w) = (first.image.height, first.image.width);
            for p in &pairs {
                let dims = [p.image.height, p.image.width, p.label.height, p.label.width];
                if dims != [h, w, h, w] {
                    return Err(Error::Shape(format!(
                        "pair {} has dims {dims:?}, expected {h}x{w}",
                        p.id
                    )));
                }
            }
        }
        let norms = pairs.iter().map(|p| norm(&p.image)).collect();
        Ok(PromptDatabase { pairs, norms })
    }

    pub fn pairs(&self) -> &[PromptPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, index: usize) -> &PromptPair {
        &self.pairs[index]
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.pairs.iter().position(|p| p.id == id)
    }

    /// Scores every entry against `query`, optionally skipping one id, sorted
    /// by descending similarity with ascending id on ties.
    pub fn rank(&self, query: &Image, exclude: Option<u32>) -> Vec<Ranked> {
        let qn = norm(query).max(1e-12);
        let mut hits: Vec<Ranked> = self
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| Some(p.id) != exclude)
            .map(|(index, p)| {
                let dot: f64 = query
                    .data
                    .iter()
                    .zip(&p.image.data)
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                Ranked {
                    index,
                    id: p.id,
                    score: dot / (qn * self.norms[index].max(1e-12)),
                }
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.id.cmp(&b.id))
        });
        hits
    }

    /// Top-`n` pairs by pixel cosine similarity.
    pub fn retrieve_top_n(&self, query: &Image, n: usize) -> Result<Vec<&PromptPair>> {
        Ok(self
            .retrieve_ranked(query, n, None)?
            .into_iter()
            .map(|r| &self.pairs[r.index])
            .collect())
    }

    /// Like [`Self::retrieve_top_n`] but returns scores and can exclude the
    /// query's own id (used when training queries come from the database).
    pub fn retrieve_ranked(
        &self,
        query: &Image,
        n: usize,
        exclude: Option<u32>,
    ) -> Result<Vec<Ranked>> {
        let available =
            self.len() - usize::from(exclude.is_some_and(|id| self.position(id).is_some()));
        if n == 0 || n > available {
            return Err(Error::Capacity {
                requested: n,
                available,
            });
        }
        let mut hits = self.rank(query, exclude);
        hits.truncate(n);
        Ok(hits)
    }
}
