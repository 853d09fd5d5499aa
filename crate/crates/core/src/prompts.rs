//! Learnable CLS-token prompt vectors.
//!
//! Per attention layer there is one additive triple (q, k, v), each of
//! length D, injected into the CLS row of the corresponding projection. A
//! single extra vector offsets the initial CLS embedding before layer 0.
//! At train time the triple can be stochastically perturbed with independent
//! inverted-dropout masks; at eval the stored vectors pass through untouched
//! and no RNG state is consumed.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{dropout_mask, Scalar, Tensor};
use crate::vit::VitConfig;

pub const DEFAULT_PROMPT_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct PromptSet<T = f32> {
    pub q: Vec<Tensor<T>>,
    pub k: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub d: Tensor<T>,
    pub dropout_rate: f64,
    pub training: bool,
}

impl PromptSet<f32> {
    /// Zero-initialized prompts: training starts exactly at the frozen
    /// backbone's behavior.
    pub fn zeros(cfg: &VitConfig) -> Self {
        let dim = cfg.dim;
        let vecs = |n: usize| -> Vec<Tensor<f32>> {
            (0..n).map(|_| Tensor::zeros(&[dim]).with_grad()).collect()
        };
        Self {
            q: vecs(cfg.depth),
            k: vecs(cfg.depth),
            v: vecs(cfg.depth),
            d: Tensor::zeros(&[dim]).with_grad(),
            dropout_rate: DEFAULT_PROMPT_DROPOUT,
            training: false,
        }
    }
}

impl<T: Scalar> PromptSet<T> {
    pub fn layer_count(&self) -> usize {
        self.q.len()
    }

    pub fn dim(&self) -> usize {
        self.d.numel()
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(3 * self.q.len() + 1);
        for (l, t) in self.q.iter().enumerate() {
            out.push((format!("cagp.q.{l}"), t));
        }
        for (l, t) in self.k.iter().enumerate() {
            out.push((format!("cagp.k.{l}"), t));
        }
        for (l, t) in self.v.iter().enumerate() {
            out.push((format!("cagp.v.{l}"), t));
        }
        out.push(("cdap.d".into(), &self.d));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::with_capacity(3 * self.q.len() + 1);
        for (l, t) in self.q.iter_mut().enumerate() {
            out.push((format!("cagp.q.{l}"), t));
        }
        for (l, t) in self.k.iter_mut().enumerate() {
            out.push((format!("cagp.k.{l}"), t));
        }
        for (l, t) in self.v.iter_mut().enumerate() {
            out.push((format!("cagp.v.{l}"), t));
        }
        out.push(("cdap.d".into(), &mut self.d));
        out
    }

    pub fn cast<U: Scalar>(&self) -> PromptSet<U> {
        PromptSet {
            q: self.q.iter().map(Tensor::cast).collect(),
            k: self.k.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
            d: self.d.cast(),
            dropout_rate: self.dropout_rate,
            training: self.training,
        }
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.layer_count() {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: self.layer_count(),
            });
        }
        Ok(())
    }

    /// Perturbed copy of layer `l`'s triple: three independent inverted
    /// dropout masks, drawn in q, k, v order. Identity at eval or rate 0,
    /// consuming no RNG state.
    pub fn perturb(&self, l: usize, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        self.check_layer(l)?;
        if !self.training || self.dropout_rate == 0.0 {
            return Ok((self.q[l].clone(), self.k[l].clone(), self.v[l].clone()));
        }
        let dim = self.dim();
        let apply = |p: &Tensor<T>, rng: &mut Rng| -> Result<Tensor<T>> {
            let mask: Tensor<T> = dropout_mask(&[dim], self.dropout_rate, rng)?;
            let data: Vec<T> = p
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&a, &m)| a * m)
                .collect();
            Tensor::from_vec(vec![dim], data)
        };
        let q = apply(&self.q[l], rng)?;
        let k = apply(&self.k[l], rng)?;
        let v = apply(&self.v[l], rng)?;
        Ok((q, k, v))
    }

    /// The (optionally perturbed) additive triple handed to attention at
    /// layer `l`. Pure parameter read in eval mode.
    pub fn cls_injection_for_layer(
        &self,
        l: usize,
        rng: &mut Rng,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        self.perturb(l, rng)
    }
}

/// Element-wise sum applied once to the initial CLS embedding.
pub fn apply_cdap<T: Scalar>(x_cls0: &Tensor<T>, p_d: &Tensor<T>) -> Result<Tensor<T>> {
    if x_cls0.numel() != p_d.numel() {
        return Err(Error::ShapeMismatch {
            op: "apply_cdap",
            left: x_cls0.shape().to_vec(),
            right: p_d.shape().to_vec(),
        });
    }
    let data: Vec<T> = x_cls0
        .data()
        .iter()
        .zip(p_d.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::from_vec(x_cls0.shape().to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct ParamCounts {
    pub cagp: usize,
    pub with_cdap: usize,
}

/// Prompt parameter accounting: 3·L·D for the per-layer triples, plus D
/// when the input-stage vector is included. Both figures are reported.
pub fn trainable_param_count(cfg: &VitConfig) -> ParamCounts {
    let cagp = 3 * cfg.depth * cfg.dim;
    ParamCounts {
        cagp,
        with_cdap: cagp + cfg.dim,
    }
}

// ── tape registration ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PromptVars {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
    pub d: Var,
}

pub fn register_prompts<T: Scalar>(tape: &mut Tape<T>, set: &PromptSet<T>) -> PromptVars {
    PromptVars {
        q: set.q.iter().map(|t| tape.leaf(t)).collect(),
        k: set.k.iter().map(|t| tape.leaf(t)).collect(),
        v: set.v.iter().map(|t| tape.leaf(t)).collect(),
        d: tape.leaf(&set.d),
    }
}

/// On-tape injection triple for layer `l`. Mask draw order matches
/// [`PromptSet::perturb`] so plain and taped paths consume the same stream.
pub fn injection_vars<T: Scalar>(
    tape: &mut Tape<T>,
    set: &PromptSet<T>,
    vars: &PromptVars,
    l: usize,
    rng: &mut Rng,
    pcap: bool,
) -> Result<(Var, Var, Var)> {
    set.check_layer(l)?;
    if !set.training || !pcap || set.dropout_rate == 0.0 {
        return Ok((vars.q[l], vars.k[l], vars.v[l]));
    }
    let dim = set.dim();
    let mut masked = |p: Var, rng: &mut Rng| -> Result<Var> {
        let mask: Tensor<T> = dropout_mask(&[dim], set.dropout_rate, rng)?;
        let m = tape.constant(vec![dim], mask.data().to_vec())?;
        tape.mul_elem(p, m)
    };
    let q = masked(vars.q[l], rng)?;
    let k = masked(vars.k[l], rng)?;
    let v = masked(vars.v[l], rng)?;
    Ok((q, k, v))
}
