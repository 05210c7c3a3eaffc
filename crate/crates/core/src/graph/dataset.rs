//! Feature/label containers, deterministic splits, and the TSV dataset
//! format.
//!
//! `nodes.tsv` starts with a header `#F=<F> C=<C>`, then one row per node:
//! `id <TAB> label <TAB> f_0 ... f_{F-1}` where label is an integer or `-`
//! for unlabeled. `edges.tsv` holds one `src <TAB> dst` row per directed
//! edge; undirected datasets list each edge once and are mirrored at load
//! time.

use super::{Graph, GraphError, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const UNLABELED: Option<u16> = None;

/// Dense N x F non-negative attribute matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    f: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, f: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * f {
            return Err(GraphError::Validation(format!(
                "{} feature values for a {n}x{f} matrix",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(GraphError::Validation(format!(
                "feature value {v} is negative or non-finite"
            )));
        }
        Ok(FeatureMatrix { n, f, values })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.f
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.f..(i + 1) * self.f]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-node category ids in `[0, C)`, `None` for unlabeled nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<Option<u16>>,
    n_classes: u16,
}

impl LabelSet {
    pub fn new(labels: Vec<Option<u16>>, n_classes: u16) -> Result<Self> {
        if n_classes < 2 {
            return Err(GraphError::Validation(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if let Some(l) = labels.iter().flatten().find(|&&l| l >= n_classes) {
            return Err(GraphError::Validation(format!(
                "label {l} outside [0, {n_classes})"
            )));
        }
        Ok(LabelSet { labels, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes as usize
    }

    pub fn label(&self, node: usize) -> Option<u16> {
        self.labels[node]
    }

    pub fn labels(&self) -> &[Option<u16>] {
        &self.labels
    }

    pub fn labeled_nodes(&self) -> impl Iterator<Item = (usize, u16)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l)))
    }

    /// Per-class node counts over labeled nodes.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.n_classes as usize];
        for (_, l) in self.labeled_nodes() {
            h[l as usize] += 1;
        }
        h
    }
}

/// Disjoint train/val/test node-id sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn validate(&self, labels: &LabelSet) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for set in [&self.train, &self.val, &self.test] {
            for &v in set {
                if !seen.insert(v) {
                    return Err(GraphError::Validation(format!(
                        "node {v} appears in more than one split"
                    )));
                }
            }
        }
        if let Some(&v) = self.train.iter().find(|&&v| labels.label(v).is_none()) {
            return Err(GraphError::Validation(format!("train node {v} is unlabeled")));
        }
        Ok(())
    }
}

/// A loaded dataset: topology, attributes, labels, and the original file
/// ids of each dense node id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Graph,
    pub features: FeatureMatrix,
    pub labels: LabelSet,
    pub original_ids: Vec<u64>,
}

/// Draw a split with exactly `per_class_train` train nodes per class and
/// `n_val`/`n_test` nodes sampled uniformly from the remaining labeled
/// nodes. Deterministic in `seed`.
pub fn make_split(
    labels: &LabelSet,
    per_class_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); labels.n_classes()];
    for (i, l) in labels.labeled_nodes() {
        per_class[l as usize].push(i);
    }
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for (c, nodes) in per_class.iter_mut().enumerate() {
        if nodes.len() < per_class_train {
            return Err(GraphError::Capacity(format!(
                "class {c} has {} labeled nodes, needs {per_class_train}",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        train.extend_from_slice(&nodes[..per_class_train]);
        rest.extend_from_slice(&nodes[per_class_train..]);
    }
    if rest.len() < n_val + n_test {
        return Err(GraphError::Capacity(format!(
            "{} labeled nodes left for val+test, need {}",
            rest.len(),
            n_val + n_test
        )));
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let mut val: Vec<usize> = rest[..n_val].to_vec();
    let mut test: Vec<usize> = rest[n_val..n_val + n_test].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Parse the nodes/edges TSV pair. Node ids are remapped to `[0, N)` in
/// file order; `undirected` mirrors each edge row.
pub fn load_dataset(nodes_path: &Path, edges_path: &Path, undirected: bool) -> Result<Dataset> {
    let nodes_text = std::fs::read_to_string(nodes_path)?;
    let npath = nodes_path.display().to_string();
    let mut lines = nodes_text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| GraphError::Parse {
        path: npath.clone(),
        line: 1,
        msg: "empty nodes file".into(),
    })?;
    let (f_dim, n_classes) = parse_header(header).map_err(|msg| GraphError::Parse {
        path: npath.clone(),
        line: 1,
        msg,
    })?;

    let mut original_ids = Vec::new();
    let mut id_map: HashMap<u64, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| GraphError::Parse { path: npath.clone(), line: lineno + 1, msg };
        let mut cols = line.split('\t');
        let id: u64 = cols
            .next()
            .ok_or_else(|| parse("missing id column".into()))?
            .trim()
            .parse()
            .map_err(|e| parse(format!("bad node id: {e}")))?;
        let label_col = cols.next().ok_or_else(|| parse("missing label column".into()))?.trim();
        let label = if label_col == "-" {
            None
        } else {
            Some(label_col.parse::<u16>().map_err(|e| parse(format!("bad label: {e}")))?)
        };
        let feats: Vec<f64> = cols
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse(format!("bad feature value: {e}")))?;
        if feats.len() != f_dim {
            return Err(GraphError::Validation(format!(
                "{npath}:{}: row has {} features, header says {f_dim}",
                lineno + 1,
                feats.len()
            )));
        }
        if id_map.insert(id, original_ids.len()).is_some() {
            return Err(GraphError::Validation(format!("duplicate node id {id}")));
        }
        original_ids.push(id);
        labels.push(label);
        values.extend_from_slice(&feats);
    }
    let n = original_ids.len();
    let features = FeatureMatrix::new(n, f_dim, values)?;
    let labels = LabelSet::new(labels, n_classes)?;

    let edges_text = std::fs::read_to_string(edges_path)?;
    let epath = edges_path.display().to_string();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for (lineno, line) in edges_text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |msg: String| GraphError::Parse { path: epath.clone(), line: lineno + 1, msg };
        let mut cols = line.split('\t');
        let src: u64 = cols
            .next()
            .ok_or_else(|| parse("missing src".into()))?
            .trim()
            .parse()
            .map_err(|e| parse(format!("bad src: {e}")))?;
        let dst: u64 = cols
            .next()
            .ok_or_else(|| parse("missing dst".into()))?
            .trim()
            .parse()
            .map_err(|e| parse(format!("bad dst: {e}")))?;
        let s = *id_map
            .get(&src)
            .ok_or_else(|| GraphError::Validation(format!("edge references unknown node {src}")))?;
        let d = *id_map
            .get(&dst)
            .ok_or_else(|| GraphError::Validation(format!("edge references unknown node {dst}")))?;
        edges.push((s as u32, d as u32));
        if undirected && s != d {
            edges.push((d as u32, s as u32));
        }
    }
    let graph = Graph::new(n, edges)?;
    Ok(Dataset { graph, features, labels, original_ids })
}

fn parse_header(line: &str) -> std::result::Result<(usize, u16), String> {
    let line = line.strip_prefix('#').ok_or("header must start with '#'")?;
    let mut f = None;
    let mut c = None;
    for part in line.split_whitespace() {
        if let Some(v) = part.strip_prefix("F=") {
            f = Some(v.parse::<usize>().map_err(|e| format!("bad F: {e}"))?);
        } else if let Some(v) = part.strip_prefix("C=") {
            c = Some(v.parse::<u16>().map_err(|e| format!("bad C: {e}"))?);
        }
    }
    match (f, c) {
        (Some(f), Some(c)) => Ok((f, c)),
        _ => Err("header must declare F=<dim> C=<classes>".into()),
    }
}

/// Induced sub-dataset on the given nodes (kept in the given order, ids
/// remapped dense). Labels, features, and original ids carry over; edges
/// with either endpoint outside the set are dropped.
pub fn induced_subset(dataset: &Dataset, keep: &[usize]) -> Result<Dataset> {
    let mut dense = vec![usize::MAX; dataset.graph.n_nodes()];
    for (new, &old) in keep.iter().enumerate() {
        if old >= dataset.graph.n_nodes() {
            return Err(GraphError::Validation(format!("node {old} out of range")));
        }
        if dense[old] != usize::MAX {
            return Err(GraphError::Validation(format!("node {old} listed twice")));
        }
        dense[old] = new;
    }
    let f = dataset.features.n_features();
    let mut values = Vec::with_capacity(keep.len() * f);
    let mut labels = Vec::with_capacity(keep.len());
    let mut original_ids = Vec::with_capacity(keep.len());
    for &old in keep {
        values.extend_from_slice(dataset.features.row(old));
        labels.push(dataset.labels.label(old));
        original_ids.push(dataset.original_ids[old]);
    }
    let edges: Vec<(u32, u32)> = dataset
        .graph
        .edges()
        .iter()
        .filter(|&&(s, d)| dense[s as usize] != usize::MAX && dense[d as usize] != usize::MAX)
        .map(|&(s, d)| (dense[s as usize] as u32, dense[d as usize] as u32))
        .collect();
    Ok(Dataset {
        graph: Graph::new(keep.len(), edges)?,
        features: FeatureMatrix::new(keep.len(), f, values)?,
        labels: LabelSet::new(labels, dataset.labels.n_classes() as u16)?,
        original_ids,
    })
}

/// Write the TSV pair in the exact format `load_dataset` reads. Edges are
/// written as stored (already directed), so the pair round-trips with
/// `undirected = false`.
pub fn save_dataset(dataset: &Dataset, nodes_path: &Path, edges_path: &Path) -> Result<()> {
    let mut nodes = String::new();
    writeln!(
        nodes,
        "#F={} C={}",
        dataset.features.n_features(),
        dataset.labels.n_classes()
    )
    .unwrap();
    for v in 0..dataset.graph.n_nodes() {
        write!(nodes, "{}\t", dataset.original_ids[v]).unwrap();
        match dataset.labels.label(v) {
            Some(l) => write!(nodes, "{l}").unwrap(),
            None => nodes.push('-'),
        }
        for x in dataset.features.row(v) {
            write!(nodes, "\t{x}").unwrap();
        }
        nodes.push('\n');
    }
    std::fs::write(nodes_path, nodes)?;

    let mut edges = String::new();
    for &(s, d) in dataset.graph.edges() {
        writeln!(
            edges,
            "{}\t{}",
            dataset.original_ids[s as usize], dataset.original_ids[d as usize]
        )
        .unwrap();
    }
    std::fs::write(edges_path, edges)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec};

    fn write_pair(dir: &std::path::Path, nodes: &str, edges: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let np = dir.join("nodes.tsv");
        let ep = dir.join("edges.tsv");
        std::fs::write(&np, nodes).unwrap();
        std::fs::write(&ep, edges).unwrap();
        (np, ep)
    }

    #[test]
    fn load_three_node_file() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write_pair(
            dir.path(),
            "#F=2 C=2\n10\t0\t1\t0\n20\t1\t0\t1\n30\t-\t0.5\t0.5\n",
            "10\t20\n20\t30\n",
        );
        let ds = load_dataset(&np, &ep, false).unwrap();
        assert_eq!(ds.graph.n_nodes(), 3);
        assert_eq!(ds.graph.n_edges(), 2);
        assert_eq!(ds.original_ids, vec![10, 20, 30]);
        assert_eq!(ds.labels.label(0), Some(0));
        assert_eq!(ds.labels.label(2), UNLABELED);
        assert_eq!(ds.features.row(2), &[0.5, 0.5]);
        // ids remapped in file order: edge 10→20 is (0, 1)
        assert!(ds.graph.edges().contains(&(0, 1)));
    }

    #[test]
    fn undirected_flag_mirrors_edges() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write_pair(
            dir.path(),
            "#F=1 C=2\n0\t0\t1\n1\t1\t0\n",
            "0\t1\n",
        );
        let ds = load_dataset(&np, &ep, true).unwrap();
        assert_eq!(ds.graph.n_edges(), 2);
        assert!(ds.graph.edges().contains(&(0, 1)));
        assert!(ds.graph.edges().contains(&(1, 0)));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write_pair(
            dir.path(),
            "#F=2 C=2\n0\t0\t1\t0\n1\tnope\t0\t1\n",
            "",
        );
        match load_dataset(&np, &ep, false) {
            Err(GraphError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_edge_endpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write_pair(
            dir.path(),
            "#F=1 C=2\n0\t0\t1\n1\t1\t0\n2\t1\t1\n",
            "0\t99\n",
        );
        assert!(matches!(
            load_dataset(&np, &ep, false),
            Err(GraphError::Validation(_))
        ));
    }

    #[test]
    fn inconsistent_feature_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write_pair(
            dir.path(),
            "#F=2 C=2\n0\t0\t1\t0\n1\t1\t0\n",
            "",
        );
        assert!(matches!(
            load_dataset(&np, &ep, false),
            Err(GraphError::Validation(_))
        ));
    }

    #[test]
    fn save_load_round_trips_byte_identically() {
        let spec = SbmSpec {
            n_per_class: 8,
            n_classes: 2,
            p_in: 0.4,
            p_out: 0.1,
            signal_dims_per_class: 2,
            q_hi: 0.9,
            q_lo: 0.1,
            n_features: 6,
            seed: 17,
        };
        let ds = generate_sbm(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let n1 = dir.path().join("n1.tsv");
        let e1 = dir.path().join("e1.tsv");
        save_dataset(&ds, &n1, &e1).unwrap();
        let loaded = load_dataset(&n1, &e1, false).unwrap();
        let n2 = dir.path().join("n2.tsv");
        let e2 = dir.path().join("e2.tsv");
        save_dataset(&loaded, &n2, &e2).unwrap();
        assert_eq!(std::fs::read(&n1).unwrap(), std::fs::read(&n2).unwrap());
        assert_eq!(std::fs::read(&e1).unwrap(), std::fs::read(&e2).unwrap());
    }

    fn labels_for_split() -> LabelSet {
        // 7 classes, 40 labeled nodes each, plus 20 unlabeled
        let mut labels = Vec::new();
        for c in 0..7u16 {
            labels.extend(std::iter::repeat(Some(c)).take(40));
        }
        labels.extend(std::iter::repeat(None).take(20));
        LabelSet::new(labels, 7).unwrap()
    }

    #[test]
    fn citation_style_split_sizes() {
        // 20 per class over 7 classes → |train| = 140, with val/test
        // scaled down to fit the synthetic labeled pool
        let labels = labels_for_split();
        let s = make_split(&labels, 20, 60, 80, 5).unwrap();
        assert_eq!(s.train.len(), 140);
        assert_eq!(s.val.len(), 60);
        assert_eq!(s.test.len(), 80);
        s.validate(&labels).unwrap();
        // exactly 20 per class in train
        let mut per_class = vec![0usize; 7];
        for &v in &s.train {
            per_class[labels.label(v).unwrap() as usize] += 1;
        }
        assert!(per_class.iter().all(|&n| n == 20));
        // unlabeled nodes appear nowhere
        for set in [&s.train, &s.val, &s.test] {
            assert!(set.iter().all(|&v| labels.label(v).is_some()));
        }
    }

    #[test]
    fn zero_per_class_gives_empty_train() {
        let labels = labels_for_split();
        let s = make_split(&labels, 0, 10, 10, 5).unwrap();
        assert!(s.train.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let labels = labels_for_split();
        let a = make_split(&labels, 10, 50, 50, 9).unwrap();
        let b = make_split(&labels, 10, 50, 50, 9).unwrap();
        assert_eq!(a, b);
        let mut any_different = false;
        for seed in 0..10 {
            let c = make_split(&labels, 10, 50, 50, seed).unwrap();
            if c.train != a.train {
                any_different = true;
            }
        }
        assert!(any_different, "ten seeds never changed the train set");
    }

    #[test]
    fn capacity_errors() {
        let labels = labels_for_split();
        assert!(matches!(
            make_split(&labels, 41, 0, 0, 1),
            Err(GraphError::Capacity(_))
        ));
        assert!(matches!(
            make_split(&labels, 20, 100, 100, 1),
            Err(GraphError::Capacity(_))
        ));
    }
}
