//! Category hierarchy processing.
//!
//! The hierarchy is a DAG read from an edge list (`parent>child` per line).
//! A set of nodes is marked as basic-level categories; every leaf is then
//! allocated to the first basic-marked ancestor met by a breadth-first search
//! upward from the leaf, expanding parents in file edge order.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynsetNode {
    pub id: String,
    pub display_name: String,
}

/// Directed acyclic category graph with edge order preserved as read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynsetGraph {
    nodes: Vec<SynsetNode>,
    index: HashMap<String, usize>,
    edges: Vec<(usize, usize)>,
    /// Per node, parents in edge-list order.
    parents: Vec<Vec<usize>>,
    /// Per node, children in edge-list order.
    children: Vec<Vec<usize>>,
}

impl SynsetGraph {
    /// Build a graph from ordered `(parent, child)` pairs. Nodes are
    /// numbered in order of first appearance.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self> {
        let mut g = SynsetGraph {
            nodes: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            parents: Vec::new(),
            children: Vec::new(),
        };
        let mut seen = BTreeSet::new();
        for (p, c) in edges {
            let (p, c) = (p.as_ref(), c.as_ref());
            if !seen.insert((p.to_string(), c.to_string())) {
                return Err(Error::Validation(format!("duplicate edge {p}>{c}")));
            }
            let pi = g.intern(p);
            let ci = g.intern(c);
            g.edges.push((pi, ci));
            g.parents[ci].push(pi);
            g.children[pi].push(ci);
        }
        if let Some(node) = g.find_cycle_node() {
            return Err(Error::Validation(format!(
                "cycle detected through node `{}`",
                g.nodes[node].id
            )));
        }
        Ok(g)
    }

    fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(SynsetNode { id: id.to_string(), display_name: id.to_string() });
        self.index.insert(id.to_string(), i);
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        i
    }

    /// Kahn's algorithm; any node left with a positive in-degree lies on or
    /// below a cycle, so walk parents until a node repeats.
    fn find_cycle_node(&self) -> Option<usize> {
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut removed = 0;
        while let Some(u) = queue.pop_front() {
            removed += 1;
            for &c in &self.children[u] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if removed == n {
            return None;
        }
        let mut cur = (0..n).find(|&i| indeg[i] > 0)?;
        let mut visited = vec![false; n];
        while !visited[cur] {
            visited[cur] = true;
            cur = *self.parents[cur].iter().find(|&&p| indeg[p] > 0)?;
        }
        Some(cur)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[SynsetNode] {
        &self.nodes
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Edges as `(parent_id, child_id)` in file order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges
            .iter()
            .map(|&(p, c)| (self.nodes[p].id.as_str(), self.nodes[c].id.as_str()))
    }

    pub fn parents_of(&self, id: &str) -> Vec<&str> {
        self.index
            .get(id)
            .map(|&i| self.parents[i].iter().map(|&p| self.nodes[p].id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn children_of(&self, id: &str) -> Vec<&str> {
        self.index
            .get(id)
            .map(|&i| self.children[i].iter().map(|&c| self.nodes[c].id.as_str()).collect())
            .unwrap_or_default()
    }

    /// Nodes with no outgoing child edge.
    pub fn leaf_set(&self) -> BTreeSet<String> {
        (0..self.nodes.len())
            .filter(|&i| self.children[i].is_empty())
            .map(|i| self.nodes[i].id.clone())
            .collect()
    }

    pub fn roots(&self) -> Vec<&str> {
        (0..self.nodes.len())
            .filter(|&i| self.parents[i].is_empty())
            .map(|i| self.nodes[i].id.as_str())
            .collect()
    }

    /// Attach display names (`id<TAB>name` pairs); unknown ids are ignored.
    pub fn set_display_names<'a>(&mut self, names: impl IntoIterator<Item = (&'a str, &'a str)>) {
        for (id, name) in names {
            if let Some(&i) = self.index.get(id) {
                self.nodes[i].display_name = name.to_string();
            }
        }
    }

    fn idx(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// All strict ancestors of `node`.
    fn ancestors(&self, node: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = self.parents[node].clone();
        while let Some(p) = stack.pop() {
            if out.insert(p) {
                stack.extend(&self.parents[p]);
            }
        }
        out
    }

    pub fn is_ancestor(&self, ancestor: &str, node: &str) -> bool {
        match (self.idx(ancestor), self.idx(node)) {
            (Some(a), Some(n)) => self.ancestors(n).contains(&a),
            _ => false,
        }
    }

    /// Upward BFS from `leaf`, parents expanded in edge order; returns the
    /// first node (the leaf itself included) accepted by `is_target`.
    fn first_ancestor_where(&self, leaf: usize, is_target: impl Fn(usize) -> bool) -> Option<usize> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([leaf]);
        seen[leaf] = true;
        while let Some(u) = queue.pop_front() {
            if is_target(u) {
                return Some(u);
            }
            for &p in &self.parents[u] {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        None
    }
}

/// Parse the edge-list format: one `parent>child` per line, `#` comments and
/// blank lines ignored.
pub fn parse_synset_str(text: &str, source: &str) -> Result<SynsetGraph> {
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('>');
        let (p, c) = match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(c), None) if !p.trim().is_empty() && !c.trim().is_empty() => {
                (p.trim(), c.trim())
            }
            _ => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: format!("expected `parent>child`, got `{line}`"),
                })
            }
        };
        edges.push((p.to_string(), c.to_string()));
    }
    SynsetGraph::from_edges(&edges)
}

pub fn parse_synset_file(path: &Path) -> Result<SynsetGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_synset_str(&text, &path.display().to_string())
}

/// One node id per line; `#` comments and blank lines ignored.
pub fn parse_marks_str(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn parse_marks_file(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_marks_str(&text))
}

/// A graph whose basic-level marks have passed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    graph: SynsetGraph,
    basic_marks: BTreeSet<String>,
}

impl Taxonomy {
    pub fn graph(&self) -> &SynsetGraph {
        &self.graph
    }

    pub fn basic_marks(&self) -> &BTreeSet<String> {
        &self.basic_marks
    }
}

/// Check basic marks: all known, none nested under another, every leaf
/// covered by a basic ancestor-or-self.
pub fn validate_basic_marks(graph: SynsetGraph, marks: &BTreeSet<String>) -> Result<Taxonomy> {
    if marks.is_empty() {
        return Err(Error::Validation("no basic-level marks given".into()));
    }
    let unknown: Vec<&str> = marks.iter().filter(|m| !graph.contains(m)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!("unknown basic marks: {}", unknown.join(", "))));
    }
    let marked: BTreeSet<usize> = marks.iter().map(|m| graph.index[m]).collect();
    for &m in &marked {
        if let Some(&a) = graph.ancestors(m).intersection(&marked).next() {
            return Err(Error::Validation(format!(
                "nested basic marks: `{}` is an ancestor of `{}`",
                graph.nodes[a].id, graph.nodes[m].id
            )));
        }
    }
    let uncovered: Vec<String> = graph
        .leaf_set()
        .into_iter()
        .filter(|leaf| {
            let li = graph.index[leaf];
            !marked.contains(&li) && graph.ancestors(li).is_disjoint(&marked)
        })
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::Validation(format!(
            "{} leaf(s) have no basic ancestor: {}",
            uncovered.len(),
            uncovered.join(", ")
        )));
    }
    Ok(Taxonomy { graph, basic_marks: marks.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Basic,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub sub_index: usize,
    pub basic_index: usize,
}

/// Per-leaf subordinate and basic-level class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    entries: BTreeMap<String, LabelEntry>,
    basic_names: Vec<String>,
    sub_names: Vec<String>,
}

impl LabelMap {
    pub fn entries(&self) -> &BTreeMap<String, LabelEntry> {
        &self.entries
    }

    pub fn get(&self, leaf: &str) -> Option<LabelEntry> {
        self.entries.get(leaf).copied()
    }

    pub fn basic_names(&self) -> &[String] {
        &self.basic_names
    }

    pub fn sub_names(&self) -> &[String] {
        &self.sub_names
    }

    pub fn basic_of(&self, leaf: &str) -> Option<&str> {
        self.get(leaf).map(|e| self.basic_names[e.basic_index].as_str())
    }

    /// Basic index of each subordinate index.
    pub fn sub_to_basic(&self) -> Vec<usize> {
        self.sub_names.iter().map(|s| self.entries[s].basic_index).collect()
    }

    pub fn labels(&self, level: Level) -> ClassLabels {
        let (names, leaf_to_class) = match level {
            Level::Basic => (
                self.basic_names.clone(),
                self.entries.iter().map(|(k, e)| (k.clone(), e.basic_index)).collect(),
            ),
            Level::Sub => (
                self.sub_names.clone(),
                self.entries.iter().map(|(k, e)| (k.clone(), e.sub_index)).collect(),
            ),
        };
        ClassLabels { names, leaf_to_class }
    }

    /// CSV `leaf_id,sub_index,basic_index,basic_id`, rows sorted by leaf id.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["leaf_id", "sub_index", "basic_index", "basic_id"])?;
        for (leaf, e) in &self.entries {
            wr.write_record([
                leaf.as_str(),
                &e.sub_index.to_string(),
                &e.basic_index.to_string(),
                &self.basic_names[e.basic_index],
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<labelmap csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            leaf_id: String,
            sub_index: usize,
            basic_index: usize,
            basic_id: String,
        }
        let mut entries = BTreeMap::new();
        let mut basic: BTreeMap<usize, String> = BTreeMap::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row?;
            if let Some(prev) = basic.insert(row.basic_index, row.basic_id.clone()) {
                if prev != row.basic_id {
                    return Err(Error::Validation(format!(
                        "basic index {} names both `{prev}` and `{}`",
                        row.basic_index, row.basic_id
                    )));
                }
            }
            let entry = LabelEntry { sub_index: row.sub_index, basic_index: row.basic_index };
            if entries.insert(row.leaf_id.clone(), entry).is_some() {
                return Err(Error::Validation(format!("leaf `{}` listed twice", row.leaf_id)));
            }
        }
        let n_sub = entries.len();
        let mut sub_names = vec![String::new(); n_sub];
        for (leaf, e) in &entries {
            if e.sub_index >= n_sub || !sub_names[e.sub_index].is_empty() {
                return Err(Error::Validation(format!("sub indices are not a bijection at `{leaf}`")));
            }
            sub_names[e.sub_index] = leaf.clone();
        }
        let basic_names: Vec<String> = basic.values().cloned().collect();
        if basic.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::Validation("basic indices have gaps".into()));
        }
        Ok(LabelMap { entries, basic_names, sub_names })
    }
}

/// Mapping from leaf ids to dense class indices for one training task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLabels {
    pub names: Vec<String>,
    pub leaf_to_class: BTreeMap<String, usize>,
}

impl ClassLabels {
    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    pub fn class_of(&self, leaf: &str) -> Option<usize> {
        self.leaf_to_class.get(leaf).copied()
    }

    /// One class per distinct leaf id, in sorted order.
    pub fn from_leaves<S: AsRef<str>>(leaves: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = leaves.into_iter().map(|l| l.as_ref().to_string()).collect();
        let names: Vec<String> = set.into_iter().collect();
        let leaf_to_class = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ClassLabels { names, leaf_to_class }
    }
}

/// Allocate every leaf to its first basic-marked ancestor-or-self.
pub fn allocate_descendants(tax: &Taxonomy) -> LabelMap {
    let g = &tax.graph;
    let marked: BTreeSet<usize> = tax.basic_marks.iter().map(|m| g.index[m]).collect();
    let basic_names: Vec<String> = tax.basic_marks.iter().cloned().collect();
    let sub_names: Vec<String> = g.leaf_set().into_iter().collect();
    let entries = sub_names
        .iter()
        .enumerate()
        .map(|(sub_index, leaf)| {
            let hit = g
                .first_ancestor_where(g.index[leaf], |u| marked.contains(&u))
                .expect("validated taxonomy covers every leaf");
            let basic_index = basic_names
                .binary_search(&g.nodes[hit].id)
                .expect("basic name list holds every mark");
            (leaf.clone(), LabelEntry { sub_index, basic_index })
        })
        .collect();
    LabelMap { entries, basic_names, sub_names }
}

/// Allocate leaves to an arbitrary category set by the same first-ancestor
/// rule. Leaves with no category ancestor are left out.
pub fn allocate_to_categories(graph: &SynsetGraph, categories: &BTreeSet<String>) -> Result<ClassLabels> {
    let mut marked = BTreeSet::new();
    for c in categories {
        marked.insert(graph.idx(c).ok_or_else(|| Error::Validation(format!("unknown category `{c}`")))?);
    }
    let names: Vec<String> = categories.iter().cloned().collect();
    let mut leaf_to_class = BTreeMap::new();
    for leaf in graph.leaf_set() {
        if let Some(hit) = graph.first_ancestor_where(graph.index[&leaf], |u| marked.contains(&u)) {
            let class = names.binary_search(&graph.nodes[hit].id).expect("category present");
            leaf_to_class.insert(leaf, class);
        }
    }
    Ok(ClassLabels { names, leaf_to_class })
}

/// Draw `count` non-basic categories that form an antichain (no one an
/// ancestor of another), by seeded shuffle of the candidate nodes.
pub fn random_nonbasic_categories(tax: &Taxonomy, count: usize, seed: u64) -> Result<BTreeSet<String>> {
    let g = &tax.graph;
    let roots: BTreeSet<&str> = g.roots().into_iter().collect();
    let mut candidates: Vec<usize> = (0..g.node_count())
        .filter(|&i| {
            let id = g.nodes[i].id.as_str();
            !tax.basic_marks.contains(id) && !roots.contains(id)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut chosen: Vec<usize> = Vec::new();
    let mut chosen_ancestors: Vec<BTreeSet<usize>> = Vec::new();
    for c in candidates {
        if chosen.len() == count {
            break;
        }
        let anc = g.ancestors(c);
        let nested = chosen
            .iter()
            .zip(&chosen_ancestors)
            .any(|(&o, o_anc)| anc.contains(&o) || o_anc.contains(&c));
        if !nested {
            chosen.push(c);
            chosen_ancestors.push(anc);
        }
    }
    if chosen.len() < count {
        return Err(Error::Validation(format!(
            "only {} non-nested non-basic categories available, {count} requested",
            chosen.len()
        )));
    }
    Ok(chosen.into_iter().map(|i| g.nodes[i].id.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeightMode {
    /// Longest downward path to any leaf.
    #[default]
    Longest,
    /// Shortest downward path to any leaf.
    Shortest,
}

/// Height of every node, leaves at 0.
fn node_heights(g: &SynsetGraph, mode: HeightMode) -> Vec<usize> {
    fn visit(g: &SynsetGraph, u: usize, mode: HeightMode, memo: &mut Vec<Option<usize>>) -> usize {
        if let Some(h) = memo[u] {
            return h;
        }
        let h = if g.children[u].is_empty() {
            0
        } else {
            let kids = g.children[u].iter().map(|&c| visit(g, c, mode, memo));
            1 + match mode {
                HeightMode::Longest => kids.max().unwrap(),
                HeightMode::Shortest => kids.min().unwrap(),
            }
        };
        memo[u] = Some(h);
        h
    }
    let mut memo = vec![None; g.node_count()];
    (0..g.node_count()).map(|u| visit(g, u, mode, &mut memo)).collect()
}

/// Height of each basic-marked node.
pub fn basic_heights(tax: &Taxonomy, mode: HeightMode) -> BTreeMap<String, usize> {
    let h = node_heights(&tax.graph, mode);
    tax.basic_marks.iter().map(|m| (m.clone(), h[tax.graph.index[m]])).collect()
}

/// Count of basic-marked nodes at each height.
pub fn category_height_histogram(tax: &Taxonomy, mode: HeightMode) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for h in basic_heights(tax, mode).into_values() {
        *hist.entry(h).or_insert(0) += 1;
    }
    hist
}
