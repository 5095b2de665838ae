//! Reverse Cuthill-McKee fill-reducing ordering.

use std::collections::VecDeque;

use super::CsrMatrix;
use crate::scalar::Scalar;

/// Returns `perm` with `perm[new] = old`. The pattern of `A + Aᵀ` is used.
pub fn reverse_cuthill_mckee<T: Scalar>(a: &CsrMatrix<T>) -> Vec<usize> {
    let n = a.rows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        for (c, _) in a.row(r) {
            if c != r {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        // Lowest-degree unvisited node seeds each connected component.
        let Some(seed) = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)) else {
            break;
        };
        let start = pseudo_peripheral(seed, &adj, &degree);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// George-Liu search for a node of (near) maximal eccentricity.
fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let levels = bfs_levels(current, adj);
        let depth = *levels.iter().filter_map(|l| l.as_ref()).max().unwrap_or(&0);
        if depth <= ecc && ecc > 0 {
            break;
        }
        ecc = depth;
        let candidate = (0..adj.len())
            .filter(|&i| levels[i] == Some(depth))
            .min_by_key(|&i| (degree[i], i))
            .unwrap_or(current);
        if candidate == current {
            break;
        }
        current = candidate;
    }
    current
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let l = level[v].unwrap();
        for &u in &adj[v] {
            if level[u].is_none() {
                level[u] = Some(l + 1);
                queue.push_back(u);
            }
        }
    }
    level
}

/// Half-bandwidth of `A` under the given permutation.
pub fn bandwidth<T: Scalar>(a: &CsrMatrix<T>, perm: &[usize]) -> usize {
    let mut inv = vec![0usize; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut bw = 0;
    for r in 0..a.rows() {
        for (c, _) in a.row(r) {
            bw = bw.max(inv[r].abs_diff(inv[c]));
        }
    }
    bw
}
