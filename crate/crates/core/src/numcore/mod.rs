//! Dense tensors, the differentiation tape, finite-difference checking and
//! the tensor blob file format.

mod blob;
mod gradcheck;
mod tape;
mod tensor;

pub use blob::{decode_blob, encode_blob, read_blob, write_blob};
pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamReport, DEFAULT_STEP,
    DEFAULT_TOL,
};
pub use tape::{triu_len, Gradients, NodeId, Primitive, Tape, TapeNode};
pub use tensor::Tensor;
