use serde::{Deserialize, Serialize};

use super::Tensor;

/// Identity of a parameter inside one model; stable across clones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Allocates fresh parameter ids in construction order.
#[derive(Debug, Default)]
pub struct ParamIds {
    next: usize,
}

impl ParamIds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&mut self) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        id
    }
}

/// A trainable value with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub id: ParamId,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Set when a backward pass delivered a gradient since the last zeroing.
    /// The optimizer skips untouched parameters, which keeps unused
    /// normalization branches bitwise frozen.
    touched: bool,
}

impl Parameter {
    pub fn new(id: ParamId, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id,
            value,
            grad,
            trainable: true,
            touched: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        self.touched = false;
    }

    pub fn accumulate(&mut self, grad: &Tensor) {
        debug_assert_eq!(grad.shape(), self.value.shape());
        for (g, d) in self.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        self.touched = true;
    }

    pub fn touched(&self) -> bool {
        self.touched
    }
}
