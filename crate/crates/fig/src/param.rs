//! Trainable parameter storage, shared by every model component.
//!
//! Parameters live outside any tape as plain buffers. Each training step
//! binds them onto a fresh [`Tape`] as requires-grad leaves via a [`Binder`],
//! which records the leaf ids in binding order so the optimizer can pair
//! every buffer with its gradient afterwards. A binder can instead carve all
//! parameters out of one flat leaf, which lets finite differences probe an
//! entire model through a single tensor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Param {
            data: vec![v],
            shape: vec![],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Param {
            data: vec![1.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// Glorot-uniform init: `U(±sqrt(6/(fan_in+fan_out)))` for a
    /// `[fan_in, fan_out]` matrix.
    pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Param {
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            shape: vec![rows, cols],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Creates requires-grad tensors for parameters and remembers them in order.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    flat: Option<(TensorId, usize)>,
    ids: Vec<TensorId>,
}

impl<'t> Binder<'t> {
    /// Each bound parameter becomes its own leaf.
    pub fn new(tape: &'t mut Tape) -> Self {
        Binder {
            tape,
            flat: None,
            ids: Vec::new(),
        }
    }

    /// Parameters are sliced out of `flat` (a one-row tensor already on the
    /// tape) in binding order; gradients flow back into `flat`.
    pub fn from_flat(tape: &'t mut Tape, flat: TensorId) -> Result<Self> {
        let len = tape.data(flat).len();
        let flat2d = tape.reshape(flat, vec![1, len])?;
        Ok(Binder {
            tape,
            flat: Some((flat2d, 0)),
            ids: Vec::new(),
        })
    }

    pub fn bind(&mut self, p: &Param) -> TensorId {
        let id = match &mut self.flat {
            None => self
                .tape
                .leaf(p.data.clone(), p.shape.clone())
                .expect("parameter buffers always have consistent shapes"),
            Some((flat, cursor)) => {
                let (flat, start) = (*flat, *cursor);
                let end = start + p.numel();
                let slice = self
                    .tape
                    .slice_cols(flat, start, end)
                    .expect("flat parameter vector too short for this model");
                self.flat.as_mut().unwrap().1 = end;
                self.tape
                    .reshape(slice, p.shape.clone())
                    .expect("slice length matches parameter shape")
            }
        };
        self.ids.push(id);
        id
    }

    /// Bound tensor ids in the order [`bind`](Self::bind) was called.
    pub fn into_ids(self) -> Vec<TensorId> {
        self.ids
    }
}

/// Anything holding an ordered, named set of parameters.
///
/// `visit`/`visit_mut` must enumerate the same parameters in the same order
/// that the component's `bind` method creates tensors; the optimizer and
/// checkpoint code zip the two sequences together.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(String, &Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param));

    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name, p.clone())));
        out
    }

    /// All parameter values, concatenated in visit order.
    fn flat_data(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.extend_from_slice(&p.data));
        out
    }

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, p| total += p.numel());
        total
    }
}

/// `x·W + b` with `b` broadcast across rows.
pub fn linear(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}
