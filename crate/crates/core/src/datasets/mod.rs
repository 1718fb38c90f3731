//! Synthetic graph generators, the missing-vector transform and the text graph format.

pub mod citation;
pub mod io;
pub mod missing;
pub mod trees;

pub use citation::gen_synthetic_citation;
pub use io::{load_graph, parse_graph, save_graph, write_graph};
pub use missing::{missing_vector_transform, MissingVectorSpec};
pub use trees::{gen_trees, tree_answer, TreeRole, TreesSpec};
