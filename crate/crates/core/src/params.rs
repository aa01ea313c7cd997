//! Flat parameter vectors with named tensor views.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::lti_param::{gaussian, near_identity};
use crate::scalar::Scalar;

/// Name and shape of one tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of tensors making up `θ`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate tensor {name}");
        self.offsets.push(self.total);
        self.total += rows * cols;
        self.specs.push(TensorSpec { name, rows, cols });
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    /// `(offset, spec)` pairs in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &TensorSpec)> {
        self.offsets.iter().copied().zip(&self.specs)
    }

    pub fn find(&self, name: &str) -> Option<(usize, &TensorSpec)> {
        self.iter().find(|(_, s)| s.name == name)
    }

    pub fn from_specs(specs: impl IntoIterator<Item = TensorSpec>) -> Self {
        let mut l = Self::default();
        for s in specs {
            l.push(s.name, s.rows, s.cols);
        }
        l
    }
}

/// The free parameter vector `θ ∈ ℝᴺ` and its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectParams<T> {
    layout: ParamLayout,
    theta: Vec<T>,
}

impl<T: Scalar> DirectParams<T> {
    pub fn new(layout: ParamLayout, theta: Vec<T>) -> Result<Self> {
        if theta.len() != layout.len() {
            return Err(dim_err("parameter vector", layout.len(), theta.len()));
        }
        Ok(Self { layout, theta })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let theta = vec![T::zero(); layout.len()];
        Self { layout, theta }
    }

    /// Default initialization: Gaussian tensors with standard deviation
    /// `1/√fan-in`, the Gram factor `lti.x` near the identity, and zero biases,
    /// log-scalings and log-diagonals.
    pub fn init<R: Rng + ?Sized>(layout: ParamLayout, rng: &mut R) -> Self {
        let mut p = Self::zeros(layout);
        let specs = p.layout.specs.clone();
        for spec in specs {
            let name = spec.name.as_str();
            let zero = name.ends_with(".bx")
                || name.ends_with(".bv")
                || name.ends_with(".by")
                || name.ends_with(".b")
                || name.ends_with(".log_psi")
                || name.ends_with(".delta");
            if zero {
                continue;
            }
            let m = if name == "lti.x" {
                near_identity(spec.rows, rng)
            } else {
                gaussian(spec.rows, spec.cols, rng)
            };
            p.set_tensor(name, &m).expect("layout tensor");
        }
        p
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn into_vec(self) -> Vec<T> {
        self.theta
    }

    pub fn tensor(&self, name: &str) -> Result<Matrix<T>> {
        let (off, spec) = self
            .layout
            .find(name)
            .ok_or_else(|| Error::Parameter(format!("unknown tensor {name}")))?;
        Matrix::from_vec(spec.rows, spec.cols, self.theta[off..off + spec.len()].to_vec())
    }

    pub fn set_tensor(&mut self, name: &str, value: &Matrix<T>) -> Result<()> {
        let (off, spec) = self
            .layout
            .find(name)
            .ok_or_else(|| Error::Parameter(format!("unknown tensor {name}")))?;
        if value.shape() != (spec.rows, spec.cols) {
            return Err(dim_err(
                name,
                format!("{}x{}", spec.rows, spec.cols),
                format!("{:?}", value.shape()),
            ));
        }
        let len = spec.len();
        self.theta[off..off + len].copy_from_slice(value.as_slice());
        Ok(())
    }

    /// Fails unless the stored layout equals `want`.
    pub fn expect_layout(&self, want: &ParamLayout) -> Result<()> {
        if &self.layout != want {
            return Err(dim_err(
                "parameter layout",
                format!("{} scalars in {} tensors", want.len(), want.specs.len()),
                format!("{} scalars in {} tensors", self.layout.len(), self.layout.specs.len()),
            ));
        }
        Ok(())
    }

    /// Euclidean norm of each tensor, for diagnostics.
    pub fn tensor_norms(&self) -> Vec<(String, f64)> {
        self.layout
            .iter()
            .map(|(off, s)| {
                let ss: f64 = self.theta[off..off + s.len()]
                    .iter()
                    .map(|v| v.to_f64_lossy().powi(2))
                    .sum();
                (s.name.clone(), ss.sqrt())
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> DirectParams<U> {
        DirectParams {
            layout: self.layout.clone(),
            theta: self.theta.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Graph leaves for every tensor of a [`DirectParams`].
pub(crate) struct Leaves {
    layout: ParamLayout,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Leaves {
    pub(crate) fn new<T: Scalar>(g: &mut Graph<T>, params: &DirectParams<T>) -> Self {
        let mut vars = Vec::with_capacity(params.layout.specs.len());
        let mut index = HashMap::new();
        for (i, (off, spec)) in params.layout.iter().enumerate() {
            let m = Matrix::from_vec(spec.rows, spec.cols, params.theta[off..off + spec.len()].to_vec())
                .expect("layout consistent");
            vars.push(g.leaf(m));
            index.insert(spec.name.clone(), i);
        }
        Self {
            layout: params.layout.clone(),
            vars,
            index,
        }
    }

    pub(crate) fn find(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        self.find(name)
            .ok_or_else(|| Error::Parameter(format!("missing tensor {name}")))
    }

    /// Gradient with respect to `θ` in layout order.
    pub(crate) fn flatten<T: Scalar>(&self, grads: &Gradients<T>) -> Vec<T> {
        let mut out = Vec::with_capacity(self.layout.len());
        for ((_, spec), &v) in self.layout.iter().zip(&self.vars) {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(T::zero(), spec.len())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> ParamLayout {
        let mut l = ParamLayout::default();
        l.push("a", 2, 3);
        l.push("b", 1, 4);
        l.push("empty", 0, 5);
        l
    }

    #[test]
    fn tensor_views_round_trip() {
        let mut p = DirectParams::<f64>::zeros(layout());
        assert_eq!(p.len(), 10);
        let a = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        p.set_tensor("a", &a).unwrap();
        assert_eq!(p.tensor("a").unwrap(), a);
        assert_eq!(&p.as_slice()[..6], a.as_slice());
        assert!(p.set_tensor("b", &a).is_err());
        assert!(p.tensor("c").is_err());
        let q = DirectParams::new(layout(), p.as_slice().to_vec()).unwrap();
        assert_eq!(q, p);
        assert!(DirectParams::<f64>::new(layout(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a: DirectParams<f64> = DirectParams::init(layout(), &mut ChaCha8Rng::seed_from_u64(9));
        let b: DirectParams<f64> = DirectParams::init(layout(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.as_slice().iter().any(|&v| v != 0.0));
    }
}
