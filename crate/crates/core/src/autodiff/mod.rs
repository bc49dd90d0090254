//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`]. Gradients can be requested with the
//! graph retained, in which case the backward sweep itself is recorded and the
//! gradients can be differentiated again. This is what lets outer-loop
//! gradients flow through unrolled inner-loop updates.

mod array;
mod backward;
mod gradcheck;
mod ops;
mod tape;

pub use array::Array;
pub use backward::{backward, grad, higher_order_backward, GradMap};
pub use gradcheck::finite_diff_check;
pub use ops::concat_cols;
pub use tape::{ParamId, Tape, Tensor};
