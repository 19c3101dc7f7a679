use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::ScalarField2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Minimum,
    Saddle,
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    /// `(row, col)` of the field cell.
    pub cell: (usize, usize),
    pub value: f64,
    pub kind: NodeKind,
}

/// Join tree of the sublevel filtration.
///
/// The root sits at the field's global maximum and has the top node of each
/// surviving component as its child (one child unless masked cells split the
/// field).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTree {
    pub nodes: Vec<TreeNode>,
    /// `(child, parent)` links.
    pub edges: Vec<(usize, usize)>,
    /// `(minimum, node where its branch ends)`, by persistence descending.
    pub branch_decomposition: Vec<(usize, usize)>,
    pub connectivity: Connectivity,
}

impl MergeTree {
    pub fn root(&self) -> &TreeNode {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Root)
            .expect("merge tree has a root")
    }

    pub fn minima(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Minimum)
    }

    pub fn saddles(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Saddle)
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.edges.iter().find(|(c, _)| *c == id).map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    pub cell_birth: (usize, usize),
    pub cell_death: (usize, usize),
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

fn order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Merge tree of the sublevel sets of `field`.
///
/// Cells are swept in ascending `(value, row, col)` order. A cell with no
/// processed neighbor starts a component at a new minimum; a cell touching
/// two or more components becomes a saddle where the components join, and
/// the one with the lower minimum survives. Masked cells are skipped.
pub fn merge_tree(field: &ScalarField2D, connectivity: Connectivity) -> Result<MergeTree> {
    field.validate()?;
    let (rows, cols) = (field.rows(), field.cols());
    if rows * cols < 4 {
        return Err(Error::Precondition(format!(
            "merge tree needs at least 4 cells, got {}",
            rows * cols
        )));
    }
    let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if let Some(v) = field.get(r, c) {
                cells.push((v, r, c));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::EmptyInput("every field cell is masked".into()));
    }
    cells.sort_by(order);

    let idx = |r: usize, c: usize| r * cols + c;
    let mut uf = UnionFind {
        parent: (0..rows * cols).collect(),
    };
    let mut processed = vec![false; rows * cols];
    // Per component representative: the birth node (minimum) and the
    // current top node.
    let mut birth = vec![usize::MAX; rows * cols];
    let mut top = vec![usize::MAX; rows * cols];
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut edges = Vec::new();
    let mut deaths: Vec<(usize, usize)> = Vec::new();

    for &(value, r, c) in &cells {
        let here = idx(r, c);
        let mut roots: Vec<usize> = Vec::new();
        for (dr, dc) in connectivity.offsets() {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                continue;
            }
            let n = idx(nr as usize, nc as usize);
            if processed[n] {
                let root = uf.find(n);
                if !roots.contains(&root) {
                    roots.push(root);
                }
            }
        }
        processed[here] = true;
        match roots.len() {
            0 => {
                let id = nodes.len();
                nodes.push(TreeNode {
                    id,
                    cell: (r, c),
                    value,
                    kind: NodeKind::Minimum,
                });
                birth[here] = id;
                top[here] = id;
            }
            1 => {
                uf.parent[here] = roots[0];
            }
            _ => {
                // Minima are created in sweep order, so a smaller id is older.
                roots.sort_by_key(|&root| birth[root]);
                let id = nodes.len();
                nodes.push(TreeNode {
                    id,
                    cell: (r, c),
                    value,
                    kind: NodeKind::Saddle,
                });
                let elder = roots[0];
                for &root in &roots {
                    edges.push((top[root], id));
                    if root != elder {
                        deaths.push((birth[root], id));
                        uf.parent[root] = elder;
                    }
                }
                uf.parent[here] = elder;
                top[elder] = id;
            }
        }
    }

    let &(max_value, max_r, max_c) = cells.last().expect("nonempty");
    let root_id = nodes.len();
    nodes.push(TreeNode {
        id: root_id,
        cell: (max_r, max_c),
        value: max_value,
        kind: NodeKind::Root,
    });
    let mut survivors: Vec<usize> = Vec::new();
    for &(_, r, c) in &cells {
        let root = uf.find(idx(r, c));
        if !survivors.contains(&root) {
            survivors.push(root);
        }
    }
    survivors.sort_by_key(|&root| birth[root]);
    for &root in &survivors {
        edges.push((top[root], root_id));
        deaths.push((birth[root], root_id));
    }

    let persistence = |(b, d): &(usize, usize)| nodes[*d].value - nodes[*b].value;
    deaths.sort_by(|x, y| persistence(y).total_cmp(&persistence(x)).then(x.0.cmp(&y.0)));
    Ok(MergeTree {
        nodes,
        edges,
        branch_decomposition: deaths,
        connectivity,
    })
}

/// One `(birth, death)` pair per branch, by persistence descending. The
/// global minimum dies at the global maximum.
pub fn persistence_pairs(tree: &MergeTree) -> Vec<PersistencePair> {
    tree.branch_decomposition
        .iter()
        .map(|&(b, d)| {
            let (nb, nd) = (&tree.nodes[b], &tree.nodes[d]);
            PersistencePair {
                birth: nb.value,
                death: nd.value,
                cell_birth: nb.cell,
                cell_death: nd.cell,
            }
        })
        .collect()
}

/// Number of leaves, which is the number of minima.
pub fn branch_count(tree: &MergeTree) -> usize {
    tree.minima().count()
}
