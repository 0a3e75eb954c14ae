//! Named parameter groups and the flat-array arithmetic shared by model
//! weights, pseudo-gradients and optimizer state.
//!
//! All reductions run sequentially in group order, then index order, so the
//! same inputs always produce bitwise-identical sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Key used for whole-model quantities alongside per-group ones.
pub const ALL_GROUPS: &str = "__all__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::BadGroupShape {
                name,
                shape,
                len: values.len(),
            });
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc + v * v)
    }

    fn same_layout(&self, other: &ParamGroup) -> bool {
        self.name == other.name && self.shape == other.shape
    }
}

/// Ordered collection of named parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    groups: Vec<ParamGroup>,
}

impl ParamVector {
    pub fn new(groups: Vec<ParamGroup>) -> Result<Self> {
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::DuplicateGroup(g.name.clone()));
            }
        }
        Ok(Self { groups })
    }

    /// Convenience constructor for one-dimensional groups.
    pub fn from_flat<S: Into<String>>(groups: impl IntoIterator<Item = (S, Vec<f64>)>) -> Result<Self> {
        let groups = groups
            .into_iter()
            .map(|(name, values)| {
                let len = values.len();
                ParamGroup::new(name, vec![len], values)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup::zeros(g.name.clone(), g.shape.clone()))
                .collect(),
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.name.as_str())
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    pub fn is_congruent(&self, other: &ParamVector) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.same_layout(b))
    }

    pub fn check_congruent(&self, other: &ParamVector) -> Result<()> {
        if self.is_congruent(other) {
            return Ok(());
        }
        let describe = |v: &ParamVector| {
            v.groups
                .iter()
                .map(|g| format!("{}{:?}", g.name, g.shape))
                .collect::<Vec<_>>()
                .join(",")
        };
        Err(Error::IncongruentShapes(format!(
            "[{}] vs [{}]",
            describe(self),
            describe(other)
        )))
    }

    /// Returns `a * x + y`.
    pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
        let mut out = y.clone();
        out.axpy_in_place(a, x)?;
        Ok(out)
    }

    /// `self += a * x`, for single-owner buffers inside training loops.
    pub fn axpy_in_place(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_congruent(x)?;
        for (dst, src) in self.groups.iter_mut().zip(&x.groups) {
            for (d, s) in dst.values.iter_mut().zip(&src.values) {
                *d += a * s;
            }
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        self.map(|v| c * v)
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for g in &mut self.groups {
            for v in &mut g.values {
                *v *= c;
            }
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    shape: g.shape.clone(),
                    values: g.values.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.check_congruent(other)?;
        Ok(ParamVector {
            groups: self
                .groups
                .iter()
                .zip(&other.groups)
                .map(|(a, b)| ParamGroup {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
                })
                .collect(),
        })
    }

    pub fn group_sq_norm(&self, group: &str) -> Result<f64> {
        self.group(group).map(ParamGroup::sq_norm)
    }

    /// Squared norm of the whole vector, accumulated group by group.
    pub fn sq_norm(&self) -> f64 {
        self.groups.iter().fold(0.0, |acc, g| acc + g.sq_norm())
    }

    /// Full inner product; per-group partial sums are added in group order.
    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self.groups.iter().zip(&other.groups).fold(0.0, |acc, (a, b)| {
            acc + a
                .values
                .iter()
                .zip(&b.values)
                .fold(0.0, |s, (x, y)| s + x * y)
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.values.iter().all(|v| v.is_finite()))
    }

    /// Unweighted mean of congruent vectors, summed in slice order.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let (first, rest) = vectors.split_first().ok_or(Error::EmptyRound)?;
        let mut acc = first.clone();
        for v in rest {
            acc.axpy_in_place(1.0, v)?;
        }
        acc.scale_in_place(1.0 / vectors.len() as f64);
        Ok(acc)
    }
}
