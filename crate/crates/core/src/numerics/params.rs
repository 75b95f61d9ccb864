//! Persistent parameter storage shared across tapes.

use crate::error::Error;
use crate::Result;

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named parameter tensor with an optional gradient buffer. The gradient
/// is populated by [`crate::numerics::Tape::accumulate_param_grads`] after a
/// backward pass and cleared by [`ParamSet::zero_grads`].
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// An ordered collection of parameters. Order is creation order and is part
/// of the deterministic behaviour of everything built on top.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique; shapes must match the
    /// value buffer.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape does not match value length"
        );
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            shape,
            values,
            grad: None,
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    /// Gradient buffer, once populated by a backward pass.
    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    /// Mutable values together with the (read-only) gradient of the same
    /// parameter, for in-place optimizer updates.
    pub(crate) fn values_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], Option<&[f64]>) {
        let p = &mut self.params[id.0];
        (&mut p.values, p.grad.as_deref())
    }

    pub(crate) fn grad_acc(&mut self, id: ParamId) -> &mut Vec<f64> {
        let len = self.params[id.0].values.len();
        self.params[id.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    /// Clears all gradient buffers.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn total_coords(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Euclidean norm of the full gradient; errors if any parameter has no
    /// populated gradient.
    pub fn grad_norm(&self) -> Result<f64> {
        let mut sq = 0.0;
        for p in &self.params {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            for v in g {
                sq += v * v;
            }
        }
        Ok(sq.sqrt())
    }

    /// Scales all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> Result<()> {
        let norm = self.grad_norm()?;
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                if let Some(g) = p.grad.as_mut() {
                    for v in g {
                        *v *= scale;
                    }
                }
            }
        }
        Ok(())
    }
}
