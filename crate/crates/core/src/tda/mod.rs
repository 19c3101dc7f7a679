//! Merge trees of sublevel sets on 2D scalar fields and their 0-dimensional
//! persistence.

mod merge_tree;

pub use merge_tree::{
    branch_count, merge_tree, persistence_pairs, Connectivity, MergeTree, NodeKind,
    PersistencePair, TreeNode,
};
