//! Double-precision tensors, a reverse-mode tape and the optimizer.

mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamIds, Parameter};
pub use tape::{
    gelu_value, normal_cdf, sigmoid_value, softmax_last_axis, BatchMoments, Gradients, PadMode, Tape, Var,
};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::Result;

/// `c = a * b + beta * c` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
    }
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let y = tape.conv1d(x, w, b, stride, padding)?;
    Ok(tape.value(y).clone())
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_value)
}

pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.dropout(v, rate, training, rng)?;
    Ok(tape.value(y).clone())
}

pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_last_axis(logits)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = tape.cross_entropy(z, labels)?;
    Ok(tape.value(l).item())
}
