//! Query sets, output harvesting and black-box access.

mod blackbox;
mod outputs;
mod query;
pub mod wire;

pub use blackbox::{align_classes, query_black_box, BlackBox, LocalBlackBox};
pub use outputs::{check_probability_blocks, harvest, model_vector, OutputMatrix, OutputRowMeta, BLOCK_SUM_TOLERANCE};
pub use query::{QuerySet, QuerySource};
