//! Prototype rows as a cosine classifier.
//!
//! Each class is the mean feature vector of its support samples. Rows are
//! stored unnormalized; normalization happens inside the similarity. The
//! matrix only ever grows: rows appended in one session are never touched by
//! later sessions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PrototypeMatrix {
    dim: usize,
    rows: Vec<Vec<f32>>,
    class_ids: Vec<u32>,
    session_of: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Classification {
    pub class_id: u32,
    /// Cosine similarity per stored row, in insertion order.
    pub scores: Vec<f32>,
    /// Softmax over the raw similarities (temperature 1).
    pub probabilities: Vec<f32>,
    /// Set when the query or a prototype had zero norm.
    pub degenerate: bool,
}

impl PrototypeMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            class_ids: Vec::new(),
            session_of: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn session_of(&self) -> &[u32] {
        &self.session_of
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i]
    }

    /// Append new class rows tagged with the session that introduced them.
    /// Existing rows are never modified; duplicate class ids are rejected.
    pub fn append_session(&mut self, new_rows: Vec<(u32, Vec<f32>)>, session: u32) -> Result<()> {
        for (id, row) in &new_rows {
            if self.class_ids.contains(id) {
                return Err(Error::DuplicateClassId(*id));
            }
            if row.len() != self.dim {
                return Err(Error::ShapeMismatch {
                    op: "append_session",
                    left: vec![row.len()],
                    right: vec![self.dim],
                });
            }
        }
        // reject duplicates within the incoming batch too
        for i in 0..new_rows.len() {
            for j in i + 1..new_rows.len() {
                if new_rows[i].0 == new_rows[j].0 {
                    return Err(Error::DuplicateClassId(new_rows[i].0));
                }
            }
        }
        for (id, row) in new_rows {
            self.class_ids.push(id);
            self.rows.push(row);
            self.session_of.push(session);
        }
        Ok(())
    }

    /// Cosine scores against every row plus the argmax class. Pure: no
    /// internal state changes. Ties break toward the lowest class id; zero
    /// norms yield similarity 0 and set the degenerate flag.
    pub fn classify(&self, feature: &[f32]) -> Result<Classification> {
        if self.is_empty() {
            return Err(Error::InvalidArgument(
                "prototype matrix is empty".into(),
            ));
        }
        if feature.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "classify",
                left: vec![feature.len()],
                right: vec![self.dim],
            });
        }
        let fnorm = norm(feature);
        let mut degenerate = fnorm == 0.0;
        let mut scores = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let wnorm = norm(row);
            if fnorm == 0.0 || wnorm == 0.0 {
                degenerate = true;
                scores.push(0.0);
            } else {
                let dot: f32 = feature.iter().zip(row).map(|(a, b)| a * b).sum();
                scores.push(dot / (fnorm * wnorm));
            }
        }
        let mut best = 0usize;
        for i in 1..scores.len() {
            let better = scores[i] > scores[best]
                || (scores[i] == scores[best] && self.class_ids[i] < self.class_ids[best]);
            if better {
                best = i;
            }
        }
        let max = scores.iter().cloned().fold(f32::MIN, f32::max);
        let exps: Vec<f32> = scores.iter().map(|&s| (s - max).exp()).collect();
        let denom: f32 = exps.iter().sum();
        Ok(Classification {
            class_id: self.class_ids[best],
            probabilities: exps.iter().map(|e| e / denom).collect(),
            scores,
            degenerate,
        })
    }
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// Mean feature per requested class: w_k = (1/N_k)·Σ_{yᵢ=k} fᵢ.
pub fn compute_prototypes(
    features: &Tensor<f32>,
    labels: &[u32],
    class_ids: &[u32],
) -> Result<Vec<(u32, Vec<f32>)>> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_prototypes",
            left: features.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let dim = features.shape()[1];
    let mut out = Vec::with_capacity(class_ids.len());
    for &k in class_ids {
        let mut acc = vec![0.0f32; dim];
        let mut count = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if y == k {
                for (a, &x) in acc.iter_mut().zip(features.row(i)) {
                    *a += x;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyClass(k));
        }
        let inv = 1.0 / count as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        out.push((k, acc));
    }
    Ok(out)
}
