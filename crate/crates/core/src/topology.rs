//! Physical metro topology: binary connectivity and row-normalized edge weights.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Station graph shared by every graph convolution.
///
/// `connectivity` is symmetric with a zero diagonal. `weights` holds the
/// row-normalized connectivity, so the rows of connected stations sum to one
/// while isolated stations keep an all-zero row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetroGraph {
    station_names: Vec<String>,
    connectivity: Array2<u8>,
    weights: Array2<f64>,
}

impl MetroGraph {
    pub fn station_count(&self) -> usize {
        self.station_names.len()
    }

    pub fn station_names(&self) -> &[String] {
        &self.station_names
    }

    pub fn connectivity(&self) -> &Array2<u8> {
        &self.connectivity
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn neighbors(&self, station: usize) -> Vec<usize> {
        self.connectivity
            .row(station)
            .iter()
            .enumerate()
            .filter(|(_, &e)| e == 1)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn degree(&self, station: usize) -> usize {
        self.connectivity.row(station).iter().filter(|&&e| e == 1).count()
    }

    /// Undirected edges as `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.station_count();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.connectivity[[i, j]] == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.station_count() {
            return Err(Error::Dimension(format!(
                "{} station names for {} stations",
                names.len(),
                self.station_count()
            )));
        }
        self.station_names = names;
        Ok(self)
    }

    /// Breadth-first hop counts from every station; `None` marks unreachable pairs.
    pub fn hop_distances(&self) -> Vec<Vec<Option<usize>>> {
        let n = self.station_count();
        let adjacency: Vec<Vec<usize>> = (0..n).map(|i| self.neighbors(i)).collect();
        (0..n)
            .map(|src| {
                let mut dist = vec![None; n];
                dist[src] = Some(0);
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    let du = dist[u].unwrap_or(0);
                    for &v in &adjacency[u] {
                        if dist[v].is_none() {
                            dist[v] = Some(du + 1);
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    /// Relabels stations: station `i` of `self` becomes station `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<(usize, usize)> =
            self.edges().into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
        let mut g = build_graph(&edges, self.station_count())?;
        let mut names = vec![String::new(); self.station_count()];
        for (i, name) in self.station_names.iter().enumerate() {
            names[perm[i]] = name.clone();
        }
        g.station_names = names;
        Ok(g)
    }
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("S{i}")).collect()
}

/// Builds the graph from undirected station pairs. Duplicate pairs are accepted.
pub fn build_graph(edges: &[(usize, usize)], station_count: usize) -> Result<MetroGraph> {
    let n = station_count;
    let mut connectivity = Array2::<u8>::zeros((n, n));
    for &(a, b) in edges {
        if a >= n || b >= n || a == b {
            return Err(Error::InvalidEdge { from: a, to: b, stations: n });
        }
        connectivity[[a, b]] = 1;
        connectivity[[b, a]] = 1;
    }
    let mut weights = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let degree: u32 = connectivity.row(i).iter().map(|&e| e as u32).sum();
        if degree == 0 {
            continue;
        }
        let inv = 1.0 / degree as f64;
        for j in 0..n {
            if connectivity[[i, j]] == 1 {
                weights[[i, j]] = inv;
            }
        }
    }
    Ok(MetroGraph { station_names: default_names(n), connectivity, weights })
}

/// Parses the edge-list text format: a header line holding the station count,
/// then one `i j` pair per line. Blank lines and `#` comments are ignored.
///
/// Returns the graph and any normalization warnings (one-directional pairs in a
/// file that otherwise lists both directions).
pub fn parse_graph(text: &str, origin: &Path) -> Result<(MetroGraph, Vec<String>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header) =
        lines.next().ok_or_else(|| Error::parse(origin, 1, "missing station-count header"))?;
    let n: usize = header
        .parse()
        .map_err(|_| Error::parse(origin, header_line, format!("bad station count `{header}`")))?;
    if n == 0 {
        return Err(Error::parse(origin, header_line, "station count must be positive"));
    }

    let mut directed = BTreeSet::new();
    for (line_no, line) in lines {
        let mut fields = line.split_whitespace();
        let mut field = |what: &str| -> Result<usize> {
            let raw = fields
                .next()
                .ok_or_else(|| Error::parse(origin, line_no, format!("missing {what} index")))?;
            raw.parse::<usize>()
                .map_err(|_| Error::parse(origin, line_no, format!("bad {what} index `{raw}`")))
        };
        let a = field("first")?;
        let b = field("second")?;
        if fields.next().is_some() {
            return Err(Error::parse(origin, line_no, "expected exactly two indices"));
        }
        if a >= n || b >= n {
            return Err(Error::parse(
                origin,
                line_no,
                format!("station index out of range for N={n}: `{line}`"),
            ));
        }
        if a == b {
            return Err(Error::parse(origin, line_no, format!("self-loop on station {a}")));
        }
        directed.insert((a, b));
    }

    let mut warnings = Vec::new();
    let bidirectional = directed.iter().any(|&(a, b)| directed.contains(&(b, a)));
    if bidirectional {
        for &(a, b) in &directed {
            if !directed.contains(&(b, a)) {
                warnings.push(format!("edge {a}->{b} listed in one direction only; symmetrized"));
            }
        }
    }
    let edges: Vec<(usize, usize)> = directed.into_iter().collect();
    Ok((build_graph(&edges, n)?, warnings))
}

pub fn load_graph(path: &Path) -> Result<MetroGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut graph, warnings) = parse_graph(&text, path)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    let names_path = names_sidecar(path);
    if names_path.exists() {
        let names_text = fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?;
        let names: Vec<String> = names_text.lines().map(|l| l.trim().to_string()).collect();
        let names: Vec<String> = names.into_iter().filter(|l| !l.is_empty()).collect();
        graph = graph.with_names(names)?;
    }
    Ok(graph)
}

/// Writes the edge list (`i < j`, ascending) and a names sidecar next to it.
pub fn save_graph(graph: &MetroGraph, path: &Path) -> Result<()> {
    let mut text = format!("{}\n", graph.station_count());
    for (i, j) in graph.edges() {
        text.push_str(&format!("{i} {j}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let names_path = names_sidecar(path);
    let mut names = graph.station_names.join("\n");
    names.push('\n');
    fs::write(&names_path, names).map_err(|e| Error::io(&names_path, e))
}

fn names_sidecar(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".names");
    os.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &Array2<f64>, b: &[&[f64]]) {
        for (i, row) in b.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((a[[i, j]] - v).abs() < 1e-12, "W[{i},{j}] = {} != {v}", a[[i, j]]);
            }
        }
    }

    #[test]
    fn line_weights() {
        let g = build_graph(&[(0, 1), (1, 2)], 3).unwrap();
        assert_close(g.weights(), &[&[0.0, 1.0, 0.0], &[0.5, 0.0, 0.5], &[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn isolated_nodes_get_zero_rows() {
        let g = build_graph(&[], 2).unwrap();
        assert!(g.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn star_weights() {
        let g = build_graph(&[(0, 1), (0, 2), (0, 3), (0, 4)], 5).unwrap();
        assert_close(g.weights(), &[&[0.0, 0.25, 0.25, 0.25, 0.25]]);
        for k in 1..5 {
            assert_eq!(g.weights()[[k, 0]], 1.0);
            assert_eq!(g.weights().row(k).sum(), 1.0);
        }
    }

    #[test]
    fn duplicates_are_idempotent() {
        let a = build_graph(&[(0, 1), (1, 0), (0, 1)], 2).unwrap();
        let b = build_graph(&[(0, 1)], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(matches!(build_graph(&[(0, 3)], 3), Err(Error::InvalidEdge { .. })));
        assert!(matches!(build_graph(&[(1, 1)], 3), Err(Error::InvalidEdge { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("line.graph");
        let g = build_graph(&[(0, 1), (1, 2)], 3).unwrap();
        save_graph(&g, &path).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(back.connectivity(), g.connectivity());
        assert_eq!(back.station_names(), g.station_names());
        for (a, b) in back.weights().iter().zip(g.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_listing_is_symmetrized_with_warning() {
        let (g, warnings) = parse_graph("3\n0 1\n1 0\n1 2\n", Path::new("t")).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(g.connectivity()[[2, 1]], 1);
    }

    #[test]
    fn index_equal_to_n_is_a_parse_error_naming_the_line() {
        let err = parse_graph("3\n0 1\n1 3\n", Path::new("g.txt")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hop_distances_on_line() {
        let g = build_graph(&[(0, 1), (1, 2)], 3).unwrap();
        let d = g.hop_distances();
        assert_eq!(d[0][2], Some(2));
        let g2 = build_graph(&[(0, 1)], 3).unwrap();
        assert_eq!(g2.hop_distances()[0][2], None);
    }

    fn random_edges() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..=64).prop_flat_map(|n| {
            let pair = (0..n, 0..n).prop_filter("no self loops", |(a, b)| a != b);
            (Just(n), proptest::collection::vec(pair, 0..(3 * n)))
        })
    }

    proptest! {
        #[test]
        fn rows_are_stochastic((n, edges) in random_edges()) {
            let g = build_graph(&edges, n).unwrap();
            for i in 0..n {
                let s: f64 = g.weights().row(i).sum();
                if g.degree(i) > 0 {
                    prop_assert!((s - 1.0).abs() < 1e-12);
                } else {
                    prop_assert_eq!(s, 0.0);
                }
                for j in 0..n {
                    prop_assert_eq!(g.weights()[[i, j]] > 0.0, g.connectivity()[[i, j]] == 1);
                    prop_assert_eq!(g.connectivity()[[i, j]], g.connectivity()[[j, i]]);
                }
                prop_assert_eq!(g.connectivity()[[i, i]], 0);
            }
        }

        #[test]
        fn relabeling_commutes_with_normalization(
            (n, edges) in random_edges(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let g = build_graph(&edges, n).unwrap();
            let relabeled: Vec<(usize, usize)> =
                edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let gp = build_graph(&relabeled, n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((gp.weights()[[perm[i], perm[j]]] - g.weights()[[i, j]]).abs() < 1e-15);
                }
            }
        }
    }
}
