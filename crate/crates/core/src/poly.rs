//! Sparse multivariate polynomials with real coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Exponent vector of a monomial.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zero(n: usize) -> Self {
        MultiIndex(vec![0; n])
    }

    /// Unit index `e_j` of length `n`.
    pub fn unit(n: usize, j: usize) -> Self {
        let mut e = vec![0; n];
        e[j] = 1;
        MultiIndex(e)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Evaluates the monomial against a precomputed power table
    /// (`powers[j][e] = x_j^e`).
    #[inline]
    pub fn eval_powers(&self, powers: &[Vec<f64>]) -> f64 {
        self.0
            .iter()
            .zip(powers)
            .fold(1.0, |acc, (&e, p)| acc * p[e as usize])
    }
}

/// Table of `x_j^e` for `e = 0..=max_degree`, built by repeated multiplication.
pub fn power_table(x: &[f64], max_degree: u32) -> Vec<Vec<f64>> {
    x.iter()
        .map(|&xj| {
            let mut row = Vec::with_capacity(max_degree as usize + 1);
            let mut acc = 1.0;
            row.push(acc);
            for _ in 0..max_degree {
                acc *= xj;
                row.push(acc);
            }
            row
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coeff: f64,
    pub exponents: MultiIndex,
}

/// `Σ coeff · x^exponents` over `n` variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    n: usize,
    terms: Vec<Term>,
}

impl Polynomial {
    pub fn new(n: usize, terms: Vec<Term>) -> Result<Self> {
        for t in &terms {
            check_dim(n, t.exponents.len())?;
            if !t.coeff.is_finite() {
                return Err(Error::InvalidInput("non-finite polynomial coefficient".into()));
            }
        }
        let mut p = Polynomial { n, terms };
        p.canonicalize();
        Ok(p)
    }

    /// Builds from `(coefficient, exponents)` pairs.
    pub fn from_pairs(n: usize, pairs: &[(f64, Vec<u32>)]) -> Result<Self> {
        Self::new(
            n,
            pairs
                .iter()
                .map(|(c, e)| Term {
                    coeff: *c,
                    exponents: MultiIndex(e.clone()),
                })
                .collect(),
        )
    }

    pub fn zero(n: usize) -> Self {
        Polynomial { n, terms: Vec::new() }
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.exponents.degree()).max().unwrap_or(0)
    }

    pub fn max_exponent(&self) -> u32 {
        self.terms
            .iter()
            .flat_map(|t| t.exponents.0.iter().copied())
            .max()
            .unwrap_or(0)
    }

    // merge duplicate exponents, drop exact zeros, sort for a stable layout
    fn canonicalize(&mut self) {
        self.terms.sort_by(|a, b| a.exponents.cmp(&b.exponents));
        let mut out: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms.drain(..) {
            match out.last_mut() {
                Some(last) if last.exponents == t.exponents => last.coeff += t.coeff,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.coeff != 0.0);
        self.terms = out;
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.n, x.len())?;
        Ok(self.eval_powers(&power_table(x, self.max_exponent())))
    }

    #[inline]
    pub fn eval_powers(&self, powers: &[Vec<f64>]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * t.exponents.eval_powers(powers))
            .sum()
    }

    /// Symbolic partial derivative with respect to `x_j`.
    pub fn partial(&self, j: usize) -> Polynomial {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.exponents.0[j] > 0)
            .map(|t| {
                let mut e = t.exponents.clone();
                let k = e.0[j];
                e.0[j] -= 1;
                Term {
                    coeff: t.coeff * k as f64,
                    exponents: e,
                }
            })
            .collect();
        let mut p = Polynomial { n: self.n, terms };
        p.canonicalize();
        p
    }
}
