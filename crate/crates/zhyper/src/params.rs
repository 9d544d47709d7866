//! Uniform access to a struct's trainable tensors.
//!
//! Tensors are immutable, so an optimizer step produces *new* leaves and
//! the owning structs are rebuilt around them. `visit` and `map` must
//! enumerate the same tensors in the same order — optimizer state is
//! keyed by visit position — and that order must be stable across
//! construction, checkpoint reload, and process restarts.

use crate::numerics::Tensor;

pub trait ParamBag {
    /// Walk every trainable tensor in canonical order.
    fn visit(&self, f: &mut dyn FnMut(&Tensor));

    /// Rebuild with each trainable tensor replaced by `f`'s result,
    /// visiting in the same canonical order as [`visit`](Self::visit).
    #[must_use]
    fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self;

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |t| total += t.numel());
        total
    }

    fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t.clone()));
        out
    }

    fn zero_grads(&self) {
        self.visit(&mut |t| t.zero_grad());
    }
}

/// A dense layer `x·W + b` with `W [in×out]`, `b [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> crate::error::Result<Tensor> {
        x.matmul(&self.w)?.add(&self.b)
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

impl ParamBag for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.w);
        f(&self.b);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }
}
