//! Named parameter storage, binding onto a [`Graph`], and the Adam optimizer.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    m: Matrix<T>,
    v: Matrix<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Add every parameter to `g`. Trainable bindings receive gradients;
    /// frozen ones enter the graph as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Add the graph gradients of a trainable binding into `grad`.
    pub fn accumulate(&mut self, g: &Graph<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(d) = g.grad(v) {
                p.grad.add_assign(d);
            }
        }
    }

    /// One bias-corrected Adam update over all parameters, then zero the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        let (tc1, tc2) = (T::of(c1), T::of(c2));
        for p in &mut self.params {
            let n = p.value.len();
            let (val, grad) = (p.value.data_mut(), p.grad.data_mut());
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for i in 0..n {
                let gi = grad[i];
                m[i] = tb1 * m[i] + (T::one() - tb1) * gi;
                v[i] = tb2 * v[i] + (T::one() - tb2) * gi * gi;
                let mhat = m[i] / tc1;
                let vhat = v[i] / tc2;
                val[i] = val[i] - lr * mhat / (vhat.sqrt() + eps);
                grad[i] = T::zero();
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Snapshot as `f64` for the checkpoint container.
    pub fn export(&self, prefix: &str) -> Vec<(String, Matrix<f64>)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.cast()))
            .collect()
    }

    /// Overwrite values from checkpoint entries. Every parameter must be
    /// present with a matching shape.
    pub fn import(&mut self, prefix: &str, entries: &[(String, Matrix<f64>)]) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let (_, m) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{key}`")))?;
            if m.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: p.value.shape(),
                    rhs: m.shape(),
                });
            }
            p.value = m.cast();
        }
        Ok(())
    }
}

/// Graph handles for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Glorot uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    Matrix::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

pub fn normal<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}
