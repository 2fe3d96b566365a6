use std::collections::VecDeque;

use super::diagram::PersistenceDiagram;
use crate::error::{Error, Result};

/// An optimal partial matching between the finite points of two diagrams.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matching {
    /// Index pairs into the finite points of dimension `dim`, in the order
    /// [`PersistenceDiagram::in_dim`] yields them.
    pub pairs: Vec<(usize, usize)>,
    /// Points sent to the diagonal.
    pub unmatched_p: Vec<usize>,
    pub unmatched_q: Vec<usize>,
}

/// Bottleneck distance between the dimension-`dim` parts of two diagrams.
pub fn bottleneck(p: &PersistenceDiagram, q: &PersistenceDiagram, dim: usize) -> Result<f64> {
    bottleneck_matching(p, q, dim).map(|(d, _)| d)
}

/// `sqrt(Σ d_B²)` over `dims`, together with the per-dimension distances.
pub fn bottleneck_l2(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    dims: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let per_dim = dims
        .iter()
        .map(|&dim| bottleneck(p, q, dim))
        .collect::<Result<Vec<_>>>()?;
    let l2 = per_dim.iter().map(|d| d * d).sum::<f64>().sqrt();
    Ok((l2, per_dim))
}

#[inline]
fn linf(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

#[inline]
fn half_persistence(a: (f64, f64)) -> f64 {
    (a.1 - a.0) / 2.0
}

/// Bottleneck distance and a matching attaining it. Infinite bars must
/// occur in equal numbers; they are matched to each other in birth order.
pub fn bottleneck_matching(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    dim: usize,
) -> Result<(f64, Matching)> {
    let split = |d: &PersistenceDiagram| {
        let (mut fin, mut inf) = (Vec::new(), Vec::new());
        for b in d.in_dim(dim) {
            if b.is_infinite() {
                inf.push(b.birth);
            } else {
                fin.push((b.birth, b.death));
            }
        }
        (fin, inf)
    };
    let (pf, mut pi) = split(p);
    let (qf, mut qi) = split(q);
    if pi.len() != qi.len() {
        return Err(Error::Incomparable(format!(
            "{} vs {} infinite bars in dimension {dim}",
            pi.len(),
            qi.len()
        )));
    }
    pi.sort_by(f64::total_cmp);
    qi.sort_by(f64::total_cmp);
    let essential = pi.iter().zip(&qi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut candidates: Vec<f64> = vec![0.0];
    for &a in &pf {
        candidates.push(half_persistence(a));
        for &b in &qf {
            candidates.push(linf(a, b));
        }
    }
    candidates.extend(qf.iter().map(|&b| half_persistence(b)));
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let (mut lo, mut hi) = (0, candidates.len() - 1);
    let mut best = feasible(&pf, &qf, candidates[hi]).expect("the largest candidate is feasible");
    while lo < hi {
        let mid = (lo + hi) / 2;
        match feasible(&pf, &qf, candidates[mid]) {
            Some(m) => {
                hi = mid;
                best = m;
            }
            None => lo = mid + 1,
        }
    }
    Ok((candidates[hi].max(essential), best))
}

/// Perfect matching in the graph of pairs within `eps`, where each side is
/// padded with diagonal copies of the other side's points.
fn feasible(p: &[(f64, f64)], q: &[(f64, f64)], eps: f64) -> Option<Matching> {
    let (np, nq) = (p.len(), q.len());
    let size = np + nq;
    // Left: p then diag(q). Right: q then diag(p).
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); size];
    for (i, &a) in p.iter().enumerate() {
        for (j, &b) in q.iter().enumerate() {
            if linf(a, b) <= eps {
                adj[i].push(j);
            }
        }
        if half_persistence(a) <= eps {
            adj[i].push(nq + i);
        }
    }
    for (j, &b) in q.iter().enumerate() {
        let row = &mut adj[np + j];
        if half_persistence(b) <= eps {
            row.push(j);
        }
        row.extend((0..np).map(|i| nq + i));
    }
    let mate = hopcroft_karp(&adj, size)?;
    let mut m = Matching::default();
    for (i, &r) in mate.iter().enumerate().take(np) {
        if r < nq {
            m.pairs.push((i, r));
        } else {
            m.unmatched_p.push(i);
        }
    }
    let mut taken = vec![false; nq];
    for &(_, j) in &m.pairs {
        taken[j] = true;
    }
    m.unmatched_q = (0..nq).filter(|&j| !taken[j]).collect();
    Some(m)
}

/// Maximum bipartite matching on a square graph; returns the partner of
/// every left vertex if the matching is perfect.
fn hopcroft_karp(adj: &[Vec<usize>], n_right: usize) -> Option<Vec<usize>> {
    const FREE: usize = usize::MAX;
    let n = adj.len();
    let mut mate_l = vec![FREE; n];
    let mut mate_r = vec![FREE; n_right];
    let mut dist = vec![0u32; n];
    let mut matched = 0;
    loop {
        // BFS layers from free left vertices.
        let mut queue = VecDeque::new();
        for u in 0..n {
            if mate_l[u] == FREE {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = u32::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let w = mate_r[v];
                if w == FREE {
                    found = true;
                } else if dist[w] == u32::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if !found {
            break;
        }
        let mut it = vec![0usize; n];
        for u in 0..n {
            if mate_l[u] == FREE && augment(u, adj, &mut mate_l, &mut mate_r, &mut dist, &mut it) {
                matched += 1;
            }
        }
    }
    (matched == n).then_some(mate_l)
}

fn augment(
    root: usize,
    adj: &[Vec<usize>],
    mate_l: &mut [usize],
    mate_r: &mut [usize],
    dist: &mut [u32],
    it: &mut [usize],
) -> bool {
    const FREE: usize = usize::MAX;
    // Iterative DFS along the layered graph.
    let mut stack = vec![root];
    while let Some(&u) = stack.last() {
        if it[u] == adj[u].len() {
            dist[u] = u32::MAX;
            stack.pop();
            continue;
        }
        let v = adj[u][it[u]];
        it[u] += 1;
        let w = mate_r[v];
        if w == FREE {
            // Flip the path recorded on the stack.
            let mut right = v;
            while let Some(l) = stack.pop() {
                let prev = mate_l[l];
                mate_l[l] = right;
                mate_r[right] = l;
                right = prev;
            }
            return true;
        }
        if dist[w] == dist[u] + 1 {
            stack.push(w);
        }
    }
    false
}
