//! Hierarchical density-based clustering.
//!
//! The published pipeline: core distances → mutual-reachability graph →
//! minimum spanning tree → single-linkage dendrogram → condensed tree at
//! `min_cluster_size` → cluster selection (leaf or excess-of-mass) →
//! labeling with NOISE for points outside every selected cluster.
//! Euclidean metric; `min_samples` defaults to `min_cluster_size`.

use serde::{Deserialize, Serialize};

use super::{ClusterLabel, DiscoverError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Leaf,
    Eom,
}

impl std::str::FromStr for SelectionMethod {
    type Err = DiscoverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "leaf" => Ok(SelectionMethod::Leaf),
            "eom" => Ok(SelectionMethod::Eom),
            other => Err(DiscoverError::InvalidConfig(format!(
                "unknown selection method `{other}`"
            ))),
        }
    }
}

const LAMBDA_CAP: f64 = 1e10;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// One merge in the single-linkage dendrogram.
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
}

/// A node of the condensed tree.
struct CondensedCluster {
    birth_lambda: f64,
    children_clusters: Vec<usize>,
    /// (point, lambda at which it leaves this cluster)
    fallout: Vec<(usize, f64)>,
    size: usize,
}

/// Density clustering with NOISE. `min_samples` defaults to
/// `min_cluster_size` when `None`.
pub fn cluster_hdbscan(
    points: &[Vec<f64>],
    min_cluster_size: usize,
    selection: SelectionMethod,
    min_samples: Option<usize>,
) -> Result<Vec<ClusterLabel>, DiscoverError> {
    let n = points.len();
    if min_cluster_size < 2 {
        return Err(DiscoverError::InvalidConfig(
            "min_cluster_size must be >= 2".to_string(),
        ));
    }
    if n <= min_cluster_size {
        return Err(DiscoverError::TooFewPoints {
            have: n,
            need: min_cluster_size + 1,
        });
    }
    let k = min_samples.unwrap_or(min_cluster_size).max(1).min(n);

    // Core distance: k-th nearest neighbor counting the point itself.
    let mut core = vec![0.0f64; n];
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n).map(|j| euclidean(&points[i], &points[j])).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        core[i] = dists[k - 1];
    }
    let mreach = |i: usize, j: usize| euclidean(&points[i], &points[j]).max(core[i]).max(core[j]);

    // Prim's MST over the complete mutual-reachability graph.
    let mut in_tree = vec![false; n];
    let mut best_dist = vec![f64::INFINITY; n];
    let mut best_from = vec![0usize; n];
    in_tree[0] = true;
    for j in 1..n {
        best_dist[j] = mreach(0, j);
    }
    let mut mst: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let mut pick = usize::MAX;
        let mut pick_d = f64::INFINITY;
        for j in 0..n {
            if !in_tree[j] && best_dist[j] < pick_d {
                pick_d = best_dist[j];
                pick = j;
            }
        }
        in_tree[pick] = true;
        mst.push((best_from[pick], pick, pick_d));
        for j in 0..n {
            if !in_tree[j] {
                let d = mreach(pick, j);
                if d < best_dist[j] {
                    best_dist[j] = d;
                    best_from[j] = pick;
                }
            }
        }
    }
    mst.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));

    // Single-linkage dendrogram: leaves 0..n-1, internal nodes n..2n-2.
    let mut uf = UnionFind::new(2 * n - 1);
    let mut component_node: Vec<usize> = (0..n).collect();
    let mut merges: Vec<Merge> = Vec::with_capacity(n - 1);
    let mut node_size: Vec<usize> = vec![1; 2 * n - 1];
    for (idx, (a, b, w)) in mst.iter().enumerate() {
        let ra = uf.find(*a);
        let rb = uf.find(*b);
        let node_a = component_node[ra];
        let node_b = component_node[rb];
        let new_node = n + idx;
        node_size[new_node] = node_size[node_a] + node_size[node_b];
        merges.push(Merge {
            left: node_a,
            right: node_b,
            distance: *w,
        });
        uf.parent[ra] = rb;
        let root = uf.find(rb);
        component_node[root] = new_node;
    }

    // Condense: walk from the root; a split survives only when both sides
    // reach min_cluster_size, otherwise the small side's points fall out.
    let lambda_of = |distance: f64| {
        if distance <= 0.0 {
            LAMBDA_CAP
        } else {
            (1.0 / distance).min(LAMBDA_CAP)
        }
    };
    let children_of = |node: usize| -> Option<(usize, usize, f64)> {
        if node < n {
            None
        } else {
            let merge = &merges[node - n];
            Some((merge.left, merge.right, merge.distance))
        }
    };
    let leaves_under = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(cursor) = stack.pop() {
            match children_of(cursor) {
                None => out.push(cursor),
                Some((l, r, _)) => {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        out
    };

    let root_node = 2 * n - 2;
    let mut clusters: Vec<CondensedCluster> = vec![CondensedCluster {
        birth_lambda: 0.0,
        children_clusters: Vec::new(),
        fallout: Vec::new(),
        size: n,
    }];
    // (dendrogram node, condensed cluster it belongs to)
    let mut stack: Vec<(usize, usize)> = vec![(root_node, 0)];
    while let Some((node, cluster)) = stack.pop() {
        let Some((left, right, distance)) = children_of(node) else {
            // Singleton component: the leaf departs when its own edge ends.
            continue;
        };
        let lambda = lambda_of(distance);
        let left_size = node_size[left];
        let right_size = node_size[right];
        let left_big = left_size >= min_cluster_size;
        let right_big = right_size >= min_cluster_size;
        match (left_big, right_big) {
            (true, true) => {
                for child_node in [left, right] {
                    let child_id = clusters.len();
                    clusters.push(CondensedCluster {
                        birth_lambda: lambda,
                        children_clusters: Vec::new(),
                        fallout: Vec::new(),
                        size: node_size[child_node],
                    });
                    clusters[cluster].children_clusters.push(child_id);
                    stack.push((child_node, child_id));
                }
            }
            (true, false) => {
                for point in leaves_under(right) {
                    clusters[cluster].fallout.push((point, lambda));
                }
                stack.push((left, cluster));
            }
            (false, true) => {
                for point in leaves_under(left) {
                    clusters[cluster].fallout.push((point, lambda));
                }
                stack.push((right, cluster));
            }
            (false, false) => {
                for point in leaves_under(left).into_iter().chain(leaves_under(right)) {
                    clusters[cluster].fallout.push((point, lambda));
                }
            }
        }
    }

    // Stability: sum over departures of (lambda_leave - lambda_birth).
    let stability: Vec<f64> = clusters
        .iter()
        .map(|c| {
            let from_points: f64 = c
                .fallout
                .iter()
                .map(|(_, lambda)| lambda - c.birth_lambda)
                .sum();
            let from_splits: f64 = c
                .children_clusters
                .iter()
                .map(|child| {
                    (clusters[*child].birth_lambda - c.birth_lambda)
                        * clusters[*child].size as f64
                })
                .sum();
            from_points + from_splits
        })
        .collect();

    let n_clusters = clusters.len();
    let mut selected = vec![false; n_clusters];
    match selection {
        SelectionMethod::Leaf => {
            for (id, cluster) in clusters.iter().enumerate() {
                if cluster.children_clusters.is_empty() && (id != 0 || n_clusters == 1) {
                    selected[id] = true;
                }
            }
        }
        SelectionMethod::Eom => {
            let mut subtree = stability.clone();
            // Children always have higher ids than parents.
            for id in (0..n_clusters).rev() {
                if clusters[id].children_clusters.is_empty() {
                    selected[id] = id != 0 || n_clusters == 1;
                    continue;
                }
                let child_sum: f64 = clusters[id]
                    .children_clusters
                    .iter()
                    .map(|c| subtree[*c])
                    .sum();
                if stability[id] > child_sum && id != 0 {
                    selected[id] = true;
                    subtree[id] = stability[id];
                    // Deselect the whole subtree below.
                    let mut to_clear: Vec<usize> = clusters[id].children_clusters.clone();
                    while let Some(c) = to_clear.pop() {
                        selected[c] = false;
                        to_clear.extend(clusters[c].children_clusters.iter());
                    }
                } else {
                    subtree[id] = child_sum;
                }
            }
        }
    }

    // Assign points: each selected cluster owns every fallout point in its
    // subtree; everything else is noise.
    let mut labels = vec![ClusterLabel::Noise; n];
    let mut owners: Vec<(usize, usize)> = Vec::new(); // (min point, cluster id)
    for id in 0..n_clusters {
        if !selected[id] {
            continue;
        }
        let mut members = Vec::new();
        let mut stack = vec![id];
        while let Some(cursor) = stack.pop() {
            members.extend(clusters[cursor].fallout.iter().map(|(p, _)| *p));
            stack.extend(clusters[cursor].children_clusters.iter());
        }
        if let Some(min_point) = members.iter().min() {
            owners.push((*min_point, id));
        }
        for point in members {
            // Stash the condensed id; renumbered below.
            labels[point] = ClusterLabel::Cluster(id);
        }
    }
    owners.sort();
    let renumber: std::collections::HashMap<usize, usize> = owners
        .iter()
        .enumerate()
        .map(|(rank, (_, id))| (*id, rank))
        .collect();
    for label in labels.iter_mut() {
        if let ClusterLabel::Cluster(id) = label {
            *label = ClusterLabel::Cluster(renumber[id]);
        }
    }
    Ok(labels)
}
