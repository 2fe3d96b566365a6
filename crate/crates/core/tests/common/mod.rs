//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use kleinvae::tda::DistanceMatrix;

/// Rank of a dense matrix over ℤ/p (rows of equal length).
pub fn rank_mod_p(mut m: Vec<Vec<u32>>, p: u32) -> usize {
    let rows = m.len();
    if rows == 0 {
        return 0;
    }
    let cols = m[0].len();
    let mut rank = 0;
    for c in 0..cols {
        let Some(piv) = (rank..rows).find(|&r| m[r][c] != 0) else {
            continue;
        };
        m.swap(rank, piv);
        let inv = inverse(m[rank][c], p);
        for x in &mut m[rank] {
            *x = *x * inv % p;
        }
        for r in 0..rows {
            if r != rank && m[r][c] != 0 {
                let f = m[r][c];
                for k in 0..cols {
                    m[r][k] = (m[r][k] + p * p - f * m[rank][k] % p) % p;
                }
            }
        }
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

fn inverse(a: u32, p: u32) -> u32 {
    (1..p).find(|&b| a * b % p == 1).unwrap()
}

/// Basis of the null space of `m` (`rows x cols`), as vectors of length `cols`.
pub fn kernel_mod_p(mut m: Vec<Vec<u32>>, cols: usize, p: u32) -> Vec<Vec<u32>> {
    let rows = m.len();
    let mut pivot_cols = Vec::new();
    let mut rank = 0;
    for c in 0..cols {
        let Some(piv) = (rank..rows).find(|&r| m[r][c] != 0) else {
            continue;
        };
        m.swap(rank, piv);
        let inv = inverse(m[rank][c], p);
        for x in &mut m[rank] {
            *x = *x * inv % p;
        }
        for r in 0..rows {
            if r != rank && m[r][c] != 0 {
                let f = m[r][c];
                for k in 0..cols {
                    m[r][k] = (m[r][k] + p * p - f * m[rank][k] % p) % p;
                }
            }
        }
        pivot_cols.push(c);
        rank += 1;
    }
    let mut basis = Vec::new();
    for free in (0..cols).filter(|c| !pivot_cols.contains(c)) {
        let mut v = vec![0u32; cols];
        v[free] = 1;
        for (r, &pc) in pivot_cols.iter().enumerate() {
            v[pc] = (p - m[r][free]) % p;
        }
        basis.push(v);
    }
    basis
}

/// Every simplex (ascending vertex list) of dimension `<= top` with its diameter.
pub fn all_simplices(d: &DistanceMatrix, top: usize) -> Vec<(Vec<usize>, f64)> {
    fn rec(
        d: &DistanceMatrix,
        cur: &mut Vec<usize>,
        diam: f64,
        top: usize,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if !cur.is_empty() {
            out.push((cur.clone(), diam));
        }
        if cur.len() == top + 1 {
            return;
        }
        let start = cur.last().map_or(0, |v| v + 1);
        for v in start..d.len() {
            let dd = cur.iter().fold(diam, |m, &u| m.max(d.get(u, v)));
            cur.push(v);
            rec(d, cur, dd, top, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, &mut Vec::new(), 0.0, top, &mut out);
    out
}

/// Persistent Betti numbers `β_k^{s,t}` for `k = 0..=max_dim` from ranks of
/// full boundary matrices: `rank[B_k(t) | Z_k(s)] - rank B_k(t)`.
pub fn naive_persistent_betti(
    simplices: &[(Vec<usize>, f64)],
    max_dim: usize,
    p: u32,
    s: f64,
    t: f64,
) -> Vec<usize> {
    let of_dim = |k: usize, cut: f64| -> Vec<&Vec<usize>> {
        simplices
            .iter()
            .filter(|(v, dd)| v.len() == k + 1 && *dd <= cut)
            .map(|(v, _)| v)
            .collect()
    };
    let boundary = |cols: &[&Vec<usize>], rows: &[&Vec<usize>]| -> Vec<Vec<u32>> {
        let mut m = vec![vec![0u32; cols.len()]; rows.len()];
        for (j, c) in cols.iter().enumerate() {
            for omit in 0..c.len() {
                let face: Vec<usize> = c
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != omit)
                    .map(|(_, &v)| v)
                    .collect();
                let r = rows.iter().position(|f| **f == face).expect("face present");
                m[r][j] = if omit % 2 == 0 { 1 } else { p - 1 };
            }
        }
        m
    };
    (0..=max_dim)
        .map(|k| {
            let ck_t = of_dim(k, t);
            let ck_s = of_dim(k, s);
            if ck_s.is_empty() {
                return 0;
            }
            // Cycles of K_s, written in the coordinates of C_k(K_t).
            let z: Vec<Vec<u32>> = if k == 0 {
                (0..ck_s.len())
                    .map(|i| {
                        let mut v = vec![0; ck_s.len()];
                        v[i] = 1;
                        v
                    })
                    .collect()
            } else {
                let rows = of_dim(k - 1, s);
                kernel_mod_p(boundary(&ck_s, &rows), ck_s.len(), p)
            };
            let z_t: Vec<Vec<u32>> = z
                .iter()
                .map(|v| {
                    let mut w = vec![0u32; ck_t.len()];
                    for (i, simplex) in ck_s.iter().enumerate() {
                        let pos = ck_t.iter().position(|x| x == simplex).unwrap();
                        w[pos] = v[i];
                    }
                    w
                })
                .collect();
            let b = boundary(&of_dim(k + 1, t), &ck_t);
            let nb = b.first().map_or(0, Vec::len);
            // Stack [B | Z] with simplices as rows.
            let mut stacked = b.clone();
            for (r, row) in stacked.iter_mut().enumerate() {
                row.extend(z_t.iter().map(|v| v[r]));
            }
            if stacked.is_empty() || nb + z_t.len() == 0 {
                return 0;
            }
            let rank_b = if nb == 0 { 0 } else { rank_mod_p(b, p) };
            rank_mod_p(stacked, p) - rank_b
        })
        .collect()
}

/// Exhaustive bottleneck distance between two finite diagrams.
pub fn brute_bottleneck(p: &[(f64, f64)], q: &[(f64, f64)]) -> f64 {
    fn go(i: usize, p: &[(f64, f64)], q: &[(f64, f64)], used: &mut Vec<bool>, cost: f64, best: &mut f64) {
        if cost >= *best {
            return;
        }
        if i == p.len() {
            let rest = q
                .iter()
                .zip(used.iter())
                .filter(|(_, &u)| !u)
                .map(|(b, _)| (b.1 - b.0) / 2.0)
                .fold(cost, f64::max);
            *best = best.min(rest);
            return;
        }
        let a = p[i];
        go(i + 1, p, q, used, cost.max((a.1 - a.0) / 2.0), best);
        for j in 0..q.len() {
            if !used[j] {
                used[j] = true;
                let c = (a.0 - q[j].0).abs().max((a.1 - q[j].1).abs());
                go(i + 1, p, q, used, cost.max(c), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, p, q, &mut vec![false; q.len()], 0.0, &mut best);
    best
}

/// Uniform points on a circle of the given radius.
pub fn circle(n: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Flat torus grid embedded in ℝ⁴ as a product of two circles.
pub fn torus_grid(k: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let (a, b) = (
                std::f64::consts::TAU * i as f64 / k as f64,
                std::f64::consts::TAU * j as f64 / k as f64,
            );
            out.push(vec![a.cos(), a.sin(), b.cos(), b.sin()]);
        }
    }
    out
}
