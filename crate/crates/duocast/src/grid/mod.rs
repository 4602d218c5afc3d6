//! Field containers, parameters, and the reverse-mode operator set.

pub mod field;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use field::{Field, FieldShape, SequenceField};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use params::{GradMap, ParamId, ParamSet, ParamTensor};
pub use tape::{cross_attention, self_attention, AttentionOut, Tape, Var};
