//! The population-level graph: models as nodes placed by representation
//! distance, mode-connectivity edges within each configuration.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mds::classical_mds;
use crate::error::{Error, Result};

/// Unordered model pair, stored with the smaller id first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey(pub String, pub String);

impl PairKey {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }
}

/// `d_ij = 1 - cka_ij`, clipped to `[0, 1]`, zero on the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    pub values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn from_similarity(ids: &[String], similarity: impl Fn(&str, &str) -> Option<f64>) -> Result<Self> {
        let n = ids.len();
        let mut values = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let s = similarity(&ids[i], &ids[j]).ok_or_else(|| {
                    Error::Incomplete(format!("missing CKA for pair ({}, {})", ids[i], ids[j]))
                })?;
                let d = (1.0 - s).clamp(0.0, 1.0);
                values[[i, j]] = d;
                values[[j, i]] = d;
            }
        }
        Ok(Self {
            ids: ids.to_vec(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub model_id: String,
    pub config_id: String,
    pub xy: [f64; 2],
    pub metrics: BTreeMap<String, f64>,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: String,
    pub b: String,
    pub mc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub layout_method: String,
}

/// What the graph needs to know about one model.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInput {
    pub model_id: String,
    pub config_id: String,
    pub metrics: BTreeMap<String, f64>,
    pub eigenvalues: Option<Vec<f64>>,
}

/// Pairwise results keyed by unordered pair. Pairs listed in `failed` had a
/// metric error and are tolerated as gaps; any other missing pair is an
/// error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairwiseInput {
    pub cka: BTreeMap<PairKey, f64>,
    pub mc: BTreeMap<PairKey, f64>,
    pub failed: BTreeSet<PairKey>,
}

/// Assemble nodes and edges and lay the nodes out by classical MDS over the
/// distances between all models. A pair whose CKA failed is placed at the
/// maximum distance 1 and a pair whose mc failed has no edge.
pub fn build_global_graph(nodes: &[NodeInput], pairs: &PairwiseInput, k: usize) -> Result<GlobalGraph> {
    for n in nodes {
        if let Some(ev) = &n.eigenvalues {
            if ev.len() != k {
                return Err(Error::Incomplete(format!(
                    "model {} has {} eigenvalues, expected {k}",
                    n.model_id,
                    ev.len()
                )));
            }
        }
    }
    let ids: Vec<String> = nodes.iter().map(|n| n.model_id.clone()).collect();
    let coords = if nodes.len() >= 2 {
        let d = DistanceMatrix::from_similarity(&ids, |a, b| {
            let key = PairKey::new(a, b);
            pairs
                .cka
                .get(&key)
                .copied()
                .or_else(|| pairs.failed.contains(&key).then_some(0.0))
        })?;
        Some(classical_mds(&d.values, 2)?)
    } else {
        None
    };

    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            if nodes[i].config_id != nodes[j].config_id {
                continue;
            }
            let key = PairKey::new(&nodes[i].model_id, &nodes[j].model_id);
            match pairs.mc.get(&key) {
                Some(mc) => edges.push(GraphEdge {
                    a: key.0.clone(),
                    b: key.1.clone(),
                    mc: *mc,
                }),
                None if pairs.failed.contains(&key) => {}
                None => {
                    return Err(Error::Incomplete(format!(
                        "missing mode connectivity for pair ({}, {})",
                        key.0, key.1
                    )))
                }
            }
        }
    }

    let graph_nodes = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| GraphNode {
            model_id: n.model_id.clone(),
            config_id: n.config_id.clone(),
            xy: coords.as_ref().map_or([0.0, 0.0], |c| [c[[i, 0]], c[[i, 1]]]),
            metrics: n.metrics.clone(),
            eigenvalues: n.eigenvalues.clone().unwrap_or_default(),
        })
        .collect();
    Ok(GlobalGraph {
        nodes: graph_nodes,
        edges,
        layout_method: "classical-mds".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, config: &str) -> NodeInput {
        NodeInput {
            model_id: id.into(),
            config_id: config.into(),
            metrics: BTreeMap::from([("accuracy".to_string(), 0.9)]),
            eigenvalues: Some(vec![3.0, 1.0]),
        }
    }

    fn full_pairs(nodes: &[NodeInput]) -> PairwiseInput {
        let mut p = PairwiseInput::default();
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                let key = PairKey::new(&a.model_id, &b.model_id);
                let h = (a.model_id.len() * 7 + b.model_id.bytes().map(|c| c as usize).sum::<usize>()) % 10;
                p.cka.insert(key.clone(), 0.5 + 0.04 * h as f64);
                if a.config_id == b.config_id {
                    p.mc.insert(key, -0.1);
                }
            }
        }
        p
    }

    #[test]
    fn one_config_of_four_has_six_edges() {
        let nodes: Vec<_> = ["a", "b", "c", "d"].iter().map(|i| node(i, "R")).collect();
        let g = build_global_graph(&nodes, &full_pairs(&nodes), 2).unwrap();
        assert_eq!(g.edges.len(), 6);
    }

    #[test]
    fn two_configs_of_four_have_twelve_edges() {
        let mut nodes: Vec<_> = ["r0", "r1", "r2", "r3"].iter().map(|i| node(i, "R")).collect();
        nodes.extend(["n0", "n1", "n2", "n3"].iter().map(|i| node(i, "NR")));
        let g = build_global_graph(&nodes, &full_pairs(&nodes), 2).unwrap();
        assert_eq!(g.nodes.len(), 8);
        assert_eq!(g.edges.len(), 12);
        for e in &g.edges {
            assert_eq!(e.a.chars().next(), e.b.chars().next());
        }
    }

    #[test]
    fn single_model_sits_at_origin() {
        let nodes = vec![node("only", "R")];
        let g = build_global_graph(&nodes, &PairwiseInput::default(), 2).unwrap();
        assert_eq!(g.nodes[0].xy, [0.0, 0.0]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn missing_pair_is_incomplete_and_names_it() {
        let nodes: Vec<_> = ["a", "b", "c"].iter().map(|i| node(i, "R")).collect();
        let mut p = full_pairs(&nodes);
        p.mc.remove(&PairKey::new("c", "a"));
        match build_global_graph(&nodes, &p, 2) {
            Err(Error::Incomplete(msg)) => assert!(msg.contains("(a, c)")),
            other => panic!("{other:?}"),
        }
        p.failed.insert(PairKey::new("a", "c"));
        assert_eq!(build_global_graph(&nodes, &p, 2).unwrap().edges.len(), 2);
    }

    #[test]
    fn permuting_models_keeps_layout_distances() {
        let mut nodes: Vec<_> = ["a", "b", "c", "d", "e"].iter().map(|i| node(i, "R")).collect();
        let pairs = full_pairs(&nodes);
        let g1 = build_global_graph(&nodes, &pairs, 2).unwrap();
        nodes.reverse();
        let g2 = build_global_graph(&nodes, &pairs, 2).unwrap();
        let pos = |g: &GlobalGraph, id: &str| g.nodes.iter().find(|n| n.model_id == id).unwrap().xy;
        let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        for a in ["a", "b", "c", "d", "e"] {
            for b in ["a", "b", "c", "d", "e"] {
                assert!((d(pos(&g1, a), pos(&g1, b)) - d(pos(&g2, a), pos(&g2, b))).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pair_key_is_order_insensitive() {
        assert_eq!(PairKey::new("b", "a"), PairKey::new("a", "b"));
    }

    #[test]
    fn distance_is_clipped() {
        let ids = vec!["x".to_string(), "y".to_string()];
        let d = DistanceMatrix::from_similarity(&ids, |_, _| Some(1.0 + 1e-9)).unwrap();
        assert_eq!(d.values[[0, 1]], 0.0);
    }
}
