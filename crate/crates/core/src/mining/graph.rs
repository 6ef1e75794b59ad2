use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BirType, Implication};
use crate::error::{Error, Result};

/// Typed directed graph over named features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicationGraph {
    pub vertices: Vec<String>,
    pub edges: Vec<Implication>,
    /// Edge count per type, indexed by [`BirType::index`].
    pub type_counts: [usize; 6],
}

/// Identifies the quadrant an edge forbids, independent of orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum EdgeKey {
    Quadrant(usize, usize, bool, bool),
    Symmetric(usize, usize, BirType),
}

fn key(e: &Implication) -> EdgeKey {
    let (lo, hi) = (e.source.min(e.target), e.source.max(e.target));
    let (s, t) = match e.btype {
        BirType::T0 => (true, false),
        BirType::T1 => (false, true),
        BirType::T2 => (true, true),
        BirType::T3 => (false, false),
        b => return EdgeKey::Symmetric(lo, hi, b),
    };
    if e.source < e.target {
        EdgeKey::Quadrant(lo, hi, s, t)
    } else {
        EdgeKey::Quadrant(lo, hi, t, s)
    }
}

fn ordering(a: &Implication, b: &Implication) -> std::cmp::Ordering {
    a.log_p
        .total_cmp(&b.log_p)
        .then(a.source.cmp(&b.source))
        .then(a.target.cmp(&b.target))
        .then(a.btype.cmp(&b.btype))
}

impl ImplicationGraph {
    pub fn new(vertices: Vec<String>, edges: Vec<Implication>) -> Self {
        let mut type_counts = [0; 6];
        for e in &edges {
            type_counts[e.btype.index()] += 1;
        }
        Self {
            vertices,
            edges,
            type_counts,
        }
    }

    /// Tab-separated edge list with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "source\ttarget\ttype\tlog_p\texceptions\texception_fraction\tantecedent_support\n",
        );
        for e in &self.edges {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.vertices[e.source],
                self.vertices[e.target],
                e.btype,
                e.log_p,
                e.exceptions,
                e.exception_fraction,
                e.antecedent_support
            );
        }
        out
    }

    /// Parses [`to_tsv`](Self::to_tsv) output. Vertices are those named by
    /// `vertices`, or collected from the edges in order of appearance.
    pub fn from_tsv(text: &str, vertices: Option<Vec<String>>) -> Result<Self> {
        let mut names = vertices.unwrap_or_default();
        let mut lookup: HashMap<String, usize> =
            names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let fixed = !names.is_empty();
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Cell {
                row: lineno + 1,
                column: what.to_string(),
                message: format!("malformed edge line '{line}'"),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad("line"));
            }
            let mut vertex = |name: &str| -> Result<usize> {
                if let Some(&i) = lookup.get(name) {
                    return Ok(i);
                }
                if fixed {
                    return Err(bad("vertex"));
                }
                names.push(name.to_string());
                lookup.insert(name.to_string(), names.len() - 1);
                Ok(names.len() - 1)
            };
            let source = vertex(f[0])?;
            let target = vertex(f[1])?;
            edges.push(Implication {
                source,
                target,
                btype: BirType::parse(f[2]).ok_or_else(|| bad("type"))?,
                log_p: f[3].parse().map_err(|_| bad("log_p"))?,
                exceptions: f[4].parse().map_err(|_| bad("exceptions"))?,
                exception_fraction: f[5].parse().map_err(|_| bad("exception_fraction"))?,
                antecedent_support: f[6].parse().map_err(|_| bad("antecedent_support"))?,
            });
        }
        Ok(Self::new(names, edges))
    }

    /// Graphviz rendering. Edges carry the type and `−log₁₀ p`; T4/T5 edges
    /// are drawn without arrowheads.
    pub fn to_dot(&self) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        let mut out = String::from("digraph implications {\n");
        for v in &self.vertices {
            let _ = writeln!(out, "  {};", quote(v));
        }
        for e in &self.edges {
            let neg_log10 = -e.log_p / std::f64::consts::LN_10;
            let dir = if e.btype.is_symmetric() { ", dir=none" } else { "" };
            let _ = writeln!(
                out,
                "  {} -> {} [label=\"{} ({:.2})\"{dir}];",
                quote(&self.vertices[e.source]),
                quote(&self.vertices[e.target]),
                e.btype,
                neg_log10
            );
        }
        out.push_str("}\n");
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn export_dot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_dot()).map_err(|e| Error::io(path, e))
    }
}

/// Turns a mined graph into a layer specification: drops the second copy of
/// any edge that forbids the same quadrant from the other orientation (e.g.
/// T0 `a → b` versus T1 `b → a`), keeping the smaller `log_p` and, on ties,
/// the edge with `source < target`; then sorts most-significant first (ties
/// by source, target, type) and keeps at most `h_max` edges.
pub fn deduplicate_and_cap(graph: &ImplicationGraph, h_max: usize) -> Vec<Implication> {
    let mut best: HashMap<EdgeKey, usize> = HashMap::new();
    let mut keep: Vec<Implication> = Vec::new();
    for e in &graph.edges {
        match best.get(&key(e)) {
            None => {
                best.insert(key(e), keep.len());
                keep.push(e.clone());
            }
            Some(&slot) => {
                let cur = &keep[slot];
                let better = e.log_p < cur.log_p
                    || (e.log_p == cur.log_p && e.source < e.target && cur.source > cur.target);
                if better {
                    keep[slot] = e.clone();
                }
            }
        }
    }
    keep.sort_by(ordering);
    keep.truncate(h_max);
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(source: usize, target: usize, btype: BirType, log_p: f64) -> Implication {
        Implication {
            source,
            target,
            btype,
            log_p,
            exceptions: 0,
            exception_fraction: 0.0,
            antecedent_support: 10,
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn contrapositive_pair_collapses() {
        let g = ImplicationGraph::new(
            names(2),
            vec![edge(1, 0, BirType::T1, -50.0), edge(0, 1, BirType::T0, -50.0)],
        );
        let out = deduplicate_and_cap(&g, 10);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].source, out[0].target, out[0].btype), (0, 1, BirType::T0));

        // different quadrants survive
        let g = ImplicationGraph::new(
            names(2),
            vec![edge(0, 1, BirType::T0, -50.0), edge(1, 0, BirType::T0, -40.0)],
        );
        assert_eq!(deduplicate_and_cap(&g, 10).len(), 2);
    }

    #[test]
    fn smaller_log_p_wins() {
        let g = ImplicationGraph::new(
            names(2),
            vec![edge(0, 1, BirType::T2, -20.0), edge(1, 0, BirType::T2, -30.0)],
        );
        let out = deduplicate_and_cap(&g, 10);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source, 1);
    }

    #[test]
    fn truncation_drops_least_significant() {
        let edges: Vec<Implication> = (0..12)
            .map(|k| edge(k, k + 1, BirType::T0, -100.0 + k as f64))
            .collect();
        let g = ImplicationGraph::new(names(13), edges);
        let out = deduplicate_and_cap(&g, 10);
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|e| e.log_p <= -91.0));
        assert!(out.windows(2).all(|w| w[0].log_p <= w[1].log_p));
    }

    #[test]
    fn empty_graph() {
        let g = ImplicationGraph::new(names(3), vec![]);
        assert!(deduplicate_and_cap(&g, 10).is_empty());
        let dot = g.to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(!dot.contains("->"));
        assert_eq!(dot.matches(';').count(), 3);
    }

    #[test]
    fn dot_labels_and_direction() {
        let g = ImplicationGraph::new(names(2), vec![edge(0, 1, BirType::T0, -10.0 * 10f64.ln())]);
        let dot = g.to_dot();
        assert!(dot.contains("\"f0\" -> \"f1\" [label=\"T0 (10.00)\"];"), "{dot}");
        let g = ImplicationGraph::new(names(2), vec![edge(0, 1, BirType::T4, -5.0)]);
        assert!(g.to_dot().contains("dir=none"));
    }

    #[test]
    fn tsv_round_trip() {
        let g = ImplicationGraph::new(
            names(3),
            vec![edge(0, 2, BirType::T3, -12.5), edge(1, 2, BirType::T5, -7.25)],
        );
        let back = ImplicationGraph::from_tsv(&g.to_tsv(), Some(names(3))).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.type_counts[BirType::T5.index()], 1);
        assert!(ImplicationGraph::from_tsv("h\nx\ty\n", None).is_err());
    }
}
