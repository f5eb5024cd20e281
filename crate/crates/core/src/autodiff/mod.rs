//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation; [`Var`] handles index into it.
//! Gradients are populated by [`Tape::backward`] and read with
//! [`Tape::grad`]. There are no views or aliasing: every op materialises
//! its output.
//!
//! ```
//! use vgssl::autodiff::{Axis, Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq, Axis::All);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod tape;
mod tensor;

pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.l2().max(b.l2());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
