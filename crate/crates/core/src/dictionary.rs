//! Monomial dictionaries: enumeration, evaluation, Jacobians and Lie derivatives.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::poly::{power_table, MultiIndex};
use crate::systems::VectorField;

/// A lifting map `x ↦ Φ(x)`.
pub trait Observables: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn lift(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// On-disk description of a monomial dictionary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialSpec {
    pub n: usize,
    pub d: u32,
    pub ordering: String,
}

/// All monomials of total degree `≤ d` in `n` variables, graded
/// lexicographic with the constant first.
///
/// Because the ordering is graded, the terms of degree `≤ d` are a prefix of
/// the terms of any larger degree.
#[derive(Clone, Debug)]
pub struct MonomialDictionary {
    n: usize,
    degree: u32,
    terms: Vec<MultiIndex>,
    index: HashMap<MultiIndex, usize>,
}

impl PartialEq for MonomialDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.degree == other.degree
    }
}

/// `C(n + d, d)`.
pub fn monomial_count(n: usize, d: u32) -> usize {
    let d = d as u128;
    let mut acc: u128 = 1;
    for i in 1..=d {
        acc = acc * (n as u128 + i) / i;
    }
    acc as usize
}

fn push_compositions(n: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
    if prefix.len() + 1 == n {
        prefix.push(total);
        out.push(MultiIndex(prefix.clone()));
        prefix.pop();
        return;
    }
    for e in (0..=total).rev() {
        prefix.push(e);
        push_compositions(n, total - e, prefix, out);
        prefix.pop();
    }
}

impl MonomialDictionary {
    pub fn new(n: usize, d: u32) -> Result<Self> {
        if n == 0 {
            return Err(crate::Error::InvalidInput("dictionary needs n > 0".into()));
        }
        let mut terms = Vec::with_capacity(monomial_count(n, d));
        for k in 0..=d {
            push_compositions(n, k, &mut Vec::with_capacity(n), &mut terms);
        }
        let index = terms.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(MonomialDictionary {
            n,
            degree: d,
            terms,
            index,
        })
    }

    pub fn spec(&self) -> MonomialSpec {
        MonomialSpec {
            n: self.n,
            d: self.degree,
            ordering: "grlex".into(),
        }
    }

    pub fn from_spec(spec: &MonomialSpec) -> Result<Self> {
        if spec.ordering != "grlex" {
            return Err(crate::Error::Parse(format!("unsupported ordering {:?}", spec.ordering)));
        }
        Self::new(spec.n, spec.d)
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[MultiIndex] {
        &self.terms
    }

    pub fn index_of(&self, m: &MultiIndex) -> Option<usize> {
        self.index.get(m).copied()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n, x.len())?;
        let pw = power_table(x, self.degree);
        Ok(self.terms.iter().map(|t| t.eval_powers(&pw)).collect())
    }

    /// `J[(k, j)] = ∂φ_k/∂x_j`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.n, x.len())?;
        let pw = power_table(x, self.degree);
        let mut jac = DMatrix::zeros(self.len(), self.n);
        self.jacobian_into(&pw, &mut jac);
        Ok(jac)
    }

    pub(crate) fn jacobian_into(&self, pw: &[Vec<f64>], jac: &mut DMatrix<f64>) {
        let n = self.n;
        let mut prefix = vec![1.0; n + 1];
        let mut suffix = vec![1.0; n + 1];
        for (k, t) in self.terms.iter().enumerate() {
            let e = &t.0;
            for j in 0..n {
                prefix[j + 1] = prefix[j] * pw[j][e[j] as usize];
            }
            for j in (0..n).rev() {
                suffix[j] = suffix[j + 1] * pw[j][e[j] as usize];
            }
            for j in 0..n {
                jac[(k, j)] = if e[j] == 0 {
                    0.0
                } else {
                    e[j] as f64 * pw[j][e[j] as usize - 1] * prefix[j] * suffix[j + 1]
                };
            }
        }
    }

    /// `(∇Φ) f` at `x`.
    pub fn lie_derivative(&self, field: &VectorField, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n, field.dim())?;
        let jac = self.jacobian(x)?;
        let fx = field.eval(x)?;
        Ok((0..self.len())
            .map(|k| (0..self.n).map(|j| jac[(k, j)] * fx[j]).sum())
            .collect())
    }

    /// The Lie derivative as a linear map on coefficient vectors.
    ///
    /// Returns the extended dictionary of degree `d + deg f − 1` and the
    /// matrix `L` (extended × this) such that for any coefficients `c`,
    /// `((∇Φ) f)ᵀ c = Φ_ext(x)ᵀ (L c)`.
    pub fn lie_operator(&self, field: &VectorField) -> Result<(MonomialDictionary, DMatrix<f64>)> {
        check_dim(self.n, field.dim())?;
        let ext_degree = self.degree + field.degree().saturating_sub(1);
        let ext = MonomialDictionary::new(self.n, ext_degree)?;
        let mut l = DMatrix::zeros(ext.len(), self.len());
        for (k, t) in self.terms.iter().enumerate() {
            for j in 0..self.n {
                let ej = t.0[j];
                if ej == 0 {
                    continue;
                }
                let mut base = t.clone();
                base.0[j] -= 1;
                for term in field.components()[j].terms() {
                    let m = base.add(&term.exponents);
                    let row = ext.index_of(&m).expect("degree bound covers product");
                    l[(row, k)] += ej as f64 * term.coeff;
                }
            }
        }
        Ok((ext, l))
    }
}

impl Observables for MonomialDictionary {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn output_dim(&self) -> usize {
        self.len()
    }

    fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval(x)
    }
}
