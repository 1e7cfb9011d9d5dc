//! Rooted phylogenies: Newick parsing and the tree-derived structures used for
//! regression kernels (patristic distances, unweighted UniFrac, edge mass differences).

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;

use crate::error::{KprError, Result};
use crate::kernels::{Kernel, Provenance, SquareMatrix};
use crate::linalg::symmetrize;
use crate::matio::{center_matrix_columns, AbundanceTable};

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Length of the branch above this node (zero for the root).
    pub length: f64,
    pub label: Option<String>,
}

/// Rooted tree with branch lengths; leaves are kept in Newick appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct PhyloTree {
    nodes: Vec<Node>,
    root: usize,
    leaves: Vec<usize>,
}

/// Sample-by-edge matrix of root-side minus non-root-side mass.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix {
    pub sample_ids: Vec<String>,
    pub edge_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl PhyloTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Every non-root node carries exactly one edge.
    pub fn n_edges(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn leaf_labels(&self) -> Vec<String> {
        self.leaves
            .iter()
            .map(|&i| self.nodes[i].label.clone().unwrap_or_default())
            .collect()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.nodes[node].children.is_empty()
    }

    /// Nodes in post-order (children before parents, children left to right).
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                out.push(node);
            } else {
                stack.push((node, true));
                for &c in self.nodes[node].children.iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }

    /// Serializes back to Newick with shortest round-trip branch lengths.
    pub fn to_newick(&self) -> String {
        fn write(t: &PhyloTree, node: usize, out: &mut String) {
            let n = &t.nodes[node];
            if !n.children.is_empty() {
                out.push('(');
                for (i, &c) in n.children.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(t, c, out);
                }
                out.push(')');
            }
            if let Some(l) = &n.label {
                if l.contains(|c: char| "():,;[]' \t\n".contains(c)) {
                    out.push('\'');
                    out.push_str(&l.replace('\'', "''"));
                    out.push('\'');
                } else {
                    out.push_str(l);
                }
            }
            if n.parent.is_some() {
                out.push(':');
                out.push_str(&format!("{}", n.length));
            }
        }
        let mut s = String::new();
        write(self, self.root, &mut s);
        s.push(';');
        s
    }

    fn leaf_index_by_label(&self) -> HashMap<&str, usize> {
        self.leaves
            .iter()
            .map(|&i| (self.nodes[i].label.as_deref().unwrap_or(""), i))
            .collect()
    }

    /// For every node, the X columns (taxa) found below it.
    fn taxa_below(&self, x: &AbundanceTable) -> Result<Vec<Vec<usize>>> {
        let by_label = self.leaf_index_by_label();
        let mut below: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (col, taxon) in x.taxon_ids().iter().enumerate() {
            let leaf = by_label
                .get(taxon.as_str())
                .ok_or_else(|| KprError::Schema(format!("taxon '{taxon}' is not a leaf of the tree")))?;
            below[*leaf].push(col);
        }
        for node in self.postorder() {
            if let Some(parent) = self.nodes[node].parent {
                let moved = below[node].clone();
                below[parent].extend(moved);
            }
        }
        Ok(below)
    }

    /// Non-root nodes subtending at least one taxon of `x`, in post-order.
    fn observed_edges(&self, below: &[Vec<usize>]) -> Vec<usize> {
        self.postorder()
            .into_iter()
            .filter(|&n| self.nodes[n].parent.is_some() && !below[n].is_empty())
            .collect()
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> KprError {
        // Newick is usually one line; report the byte offset as the column.
        let line = 1 + self.text[..self.pos.min(self.text.len())].iter().filter(|&&b| b == b'\n').count();
        KprError::parse("newick", line, self.pos, message)
    }

    fn skip_ws(&mut self) -> Result<()> {
        loop {
            match self.text.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    while self.text.get(self.pos).is_some_and(|&b| b != b']') {
                        self.pos += 1;
                    }
                    if self.pos >= self.text.len() {
                        self.pos = start;
                        return Err(self.err("unterminated comment"));
                    }
                    self.pos += 1;
                }
                _ => return Ok(()),
            }
        }
    }

    fn peek(&mut self) -> Result<Option<u8>> {
        self.skip_ws()?;
        Ok(self.text.get(self.pos).copied())
    }

    fn new_node(&mut self, parent: Option<usize>) -> usize {
        self.nodes.push(Node {
            parent,
            children: Vec::new(),
            length: 0.0,
            label: None,
        });
        self.nodes.len() - 1
    }

    fn subtree(&mut self, parent: Option<usize>) -> Result<usize> {
        let node = self.new_node(parent);
        if self.peek()? == Some(b'(') {
            self.pos += 1;
            loop {
                let child = self.subtree(Some(node))?;
                self.nodes[node].children.push(child);
                match self.peek()? {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => return Err(self.err(format!("unexpected '{}' inside parentheses", c as char))),
                    None => return Err(self.err("unbalanced parentheses: input ended before ')'")),
                }
            }
            self.nodes[node].label = self.label()?;
        } else {
            let label = self.label()?;
            match label {
                Some(l) => self.nodes[node].label = Some(l),
                None => return Err(self.err("leaf without a label")),
            }
            self.leaves.push(node);
        }
        if parent.is_some() {
            if self.peek()? != Some(b':') {
                return Err(self.err("missing branch length"));
            }
            self.pos += 1;
            self.nodes[node].length = self.length()?;
        } else if self.peek()? == Some(b':') {
            // root branch length is allowed and ignored
            self.pos += 1;
            self.length()?;
        }
        Ok(node)
    }

    fn label(&mut self) -> Result<Option<String>> {
        match self.peek()? {
            Some(b'\'') => {
                self.pos += 1;
                let mut out = Vec::new();
                loop {
                    match self.text.get(self.pos) {
                        Some(b'\'') if self.text.get(self.pos + 1) == Some(&b'\'') => {
                            out.push(b'\'');
                            self.pos += 2;
                        }
                        Some(b'\'') => {
                            self.pos += 1;
                            break;
                        }
                        Some(&b) => {
                            out.push(b);
                            self.pos += 1;
                        }
                        None => return Err(self.err("unterminated quoted label")),
                    }
                }
                String::from_utf8(out)
                    .map(Some)
                    .map_err(|_| self.err("label is not valid UTF-8"))
            }
            _ => {
                let start = self.pos;
                while let Some(&b) = self.text.get(self.pos) {
                    if b"():,;[]'".contains(&b) || b.is_ascii_whitespace() {
                        break;
                    }
                    self.pos += 1;
                }
                if self.pos == start {
                    return Ok(None);
                }
                let raw = std::str::from_utf8(&self.text[start..self.pos]).map_err(|_| self.err("label is not valid UTF-8"))?;
                // underscores stand for blanks in unquoted Newick labels
                Ok(Some(raw.replace('_', " ")))
            }
        }
    }

    fn length(&mut self) -> Result<f64> {
        self.skip_ws()?;
        let start = self.pos;
        while let Some(&b) = self.text.get(self.pos) {
            if b.is_ascii_digit() || b"+-.eE".contains(&b) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let raw = std::str::from_utf8(&self.text[start..self.pos]).unwrap_or("");
        if raw.is_empty() {
            return Err(self.err("missing branch length"));
        }
        let v: f64 = raw.parse().map_err(|_| {
            self.pos = start;
            self.err(format!("invalid branch length '{raw}'"))
        })?;
        if !v.is_finite() || v < 0.0 {
            self.pos = start;
            return Err(self.err(format!("branch length must be finite and nonnegative, got {raw}")));
        }
        Ok(v)
    }
}

/// Parses a rooted Newick tree. Every non-root node must carry a branch length.
pub fn parse_newick(text: &str) -> Result<PhyloTree> {
    let mut p = Parser {
        text: text.as_bytes(),
        pos: 0,
        nodes: Vec::new(),
        leaves: Vec::new(),
    };
    if p.peek()?.is_none() {
        return Err(p.err("empty input"));
    }
    let root = p.subtree(None)?;
    match p.peek()? {
        Some(b';') => p.pos += 1,
        Some(b')') => return Err(p.err("unbalanced parentheses: unexpected ')'")),
        Some(c) => return Err(p.err(format!("expected ';', found '{}'", c as char))),
        None => return Err(p.err("missing terminating ';'")),
    }
    if p.peek()?.is_some() {
        return Err(p.err("trailing characters after ';'"));
    }
    let mut seen = HashSet::new();
    for &leaf in &p.leaves {
        let label = p.nodes[leaf].label.as_deref().unwrap_or("");
        if !seen.insert(label) {
            return Err(KprError::parse("newick", 1, text.find(label).unwrap_or(0), format!("duplicate leaf '{label}'")));
        }
    }
    Ok(PhyloTree {
        nodes: p.nodes,
        root,
        leaves: p.leaves,
    })
}

/// Path lengths between all pairs of leaves (squared if requested), ids in leaf order.
pub fn patristic_distances(t: &PhyloTree, squared: bool) -> SquareMatrix {
    let m = t.n_leaves();
    let leaf_pos: HashMap<usize, usize> = t.leaves.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut depth = vec![0.0; t.nodes.len()];
    let order = t.postorder();
    for &node in order.iter().rev() {
        if let Some(parent) = t.nodes[node].parent {
            depth[node] = depth[parent] + t.nodes[node].length;
        }
    }
    // Each pair of leaves meets at exactly one internal node: pair leaves across children there.
    let mut below: Vec<Vec<usize>> = vec![Vec::new(); t.nodes.len()];
    let mut d = DMatrix::zeros(m, m);
    for &node in &order {
        if t.is_leaf(node) {
            below[node].push(node);
            continue;
        }
        let children = t.nodes[node].children.clone();
        let mut acc: Vec<usize> = Vec::new();
        for c in children {
            let group = std::mem::take(&mut below[c]);
            for &a in &acc {
                for &b in &group {
                    let dist = depth[a] + depth[b] - 2.0 * depth[node];
                    let (i, j) = (leaf_pos[&a], leaf_pos[&b]);
                    d[(i, j)] = dist;
                    d[(j, i)] = dist;
                }
            }
            acc.extend(group);
        }
        below[node] = acc;
    }
    if squared {
        d.apply(|v| *v = *v * *v);
    }
    SquareMatrix::new(t.leaf_labels(), d).expect("patristic matrix is symmetric by construction")
}

/// Unweighted UniFrac between samples: unshared over total branch length of observed lineages.
///
/// Presence means abundance > 0. Tree taxa missing from `x` never contribute.
pub fn unifrac_unweighted(t: &PhyloTree, x: &AbundanceTable) -> Result<SquareMatrix> {
    let values = x.values();
    if values.iter().any(|v| *v < 0.0) {
        return Err(KprError::Domain("abundances must be nonnegative".into()));
    }
    for i in 0..x.n_samples() {
        if values.row(i).iter().all(|v| *v <= 0.0) {
            return Err(KprError::Domain(format!("sample '{}' has no present taxa", x.sample_ids()[i])));
        }
    }
    let below = t.taxa_below(x)?;
    let edges = t.observed_edges(&below);
    let n = x.n_samples();
    // presence[e][i]
    let presence: Vec<Vec<bool>> = edges
        .iter()
        .map(|&e| (0..n).map(|i| below[e].iter().any(|&c| values[(i, c)] > 0.0)).collect())
        .collect();
    let lengths: Vec<f64> = edges.iter().map(|&e| t.nodes[e].length).collect();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (mut unshared, mut total) = (0.0, 0.0);
            for (pres, len) in presence.iter().zip(&lengths) {
                if pres[i] || pres[j] {
                    total += len;
                    if pres[i] != pres[j] {
                        unshared += len;
                    }
                }
            }
            let v = if total > 0.0 { unshared / total } else { 0.0 };
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    SquareMatrix::new(x.sample_ids().to_vec(), d)
}

/// Edge mass difference matrix for proportion rows: `1 - 2 * (mass below the edge)`.
pub fn edge_mass_matrix(t: &PhyloTree, x: &AbundanceTable) -> Result<EdgeMatrix> {
    let values = x.values();
    for i in 0..x.n_samples() {
        let s = values.row(i).sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(KprError::Domain(format!(
                "sample '{}' is not a proportion vector (row sum {s})",
                x.sample_ids()[i]
            )));
        }
    }
    let below = t.taxa_below(x)?;
    let edges = t.observed_edges(&below);
    let mut used = HashSet::new();
    let leaf_labels: HashSet<String> = t.leaf_labels().into_iter().collect();
    let mut edge_ids = Vec::with_capacity(edges.len());
    for (k, &e) in edges.iter().enumerate() {
        let id = match (&t.nodes[e].label, t.is_leaf(e)) {
            (Some(l), true) => l.clone(),
            (Some(l), false) if !leaf_labels.contains(l) && !used.contains(l) => l.clone(),
            _ => format!("edge{k}"),
        };
        used.insert(id.clone());
        edge_ids.push(id);
    }
    let n = x.n_samples();
    let m = DMatrix::from_fn(n, edges.len(), |i, k| {
        let below_mass: f64 = below[edges[k]].iter().map(|&c| values[(i, c)]).sum();
        (1.0 - below_mass) - below_mass
    });
    Ok(EdgeMatrix {
        sample_ids: x.sample_ids().to_vec(),
        edge_ids,
        values: m,
    })
}

/// Sample kernel `H = E E'` from the column-centered edge mass difference matrix.
pub fn edge_kernel(t: &PhyloTree, x: &AbundanceTable) -> Result<Kernel> {
    let e = center_matrix_columns(&edge_mass_matrix(t, x)?.values);
    Kernel::new(x.sample_ids().to_vec(), symmetrize(&(&e * e.transpose())), Provenance::Edge)
}
