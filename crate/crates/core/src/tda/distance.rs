use crate::error::{domain, Result};
use crate::exec::Exec;

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates a full row-major `n x n` matrix.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(domain(format!("{} entries for {n} points", entries.len())));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(domain(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                let (a, b) = (entries[i * n + j], entries[j * n + i]);
                if a != b {
                    return Err(domain(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(domain(format!("entry ({i},{j}) = {a} is not a distance")));
                }
            }
        }
        Ok(Self { n, entries })
    }

    /// Euclidean distances between rows.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        Self::from_points_with(points, Exec::default())
    }

    pub fn from_points_with(points: &[Vec<f64>], exec: Exec) -> Result<Self> {
        let n = points.len();
        if let Some(d) = points.first().map(Vec::len) {
            if points.iter().any(|p| p.len() != d) {
                return Err(domain("points differ in dimension"));
            }
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(domain("non-finite coordinate"));
        }
        let mut entries = vec![0.0; n * n];
        exec.for_each_chunk_mut(&mut entries, n.max(1), |start, row| {
            let i = start / n;
            for (j, out) in row.iter_mut().enumerate() {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                *out = points[a]
                    .iter()
                    .zip(&points[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        });
        Ok(Self { n, entries })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Smallest over points of the largest distance to any other point.
    /// Rips homology above this scale is that of a point.
    pub fn enclosing_radius(&self) -> f64 {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_distance(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    /// The submatrix on `indices`.
    pub fn restrict(&self, indices: &[usize]) -> DistanceMatrix {
        let m = indices.len();
        let mut entries = Vec::with_capacity(m * m);
        for &i in indices {
            for &j in indices {
                entries.push(self.get(i, j));
            }
        }
        DistanceMatrix { n: m, entries }
    }
}

/// Greedy farthest-point subsample of `k` indices, starting from `start`.
pub fn maxmin_landmarks(d: &DistanceMatrix, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = d.len();
    if k == 0 || k > n || start >= n {
        return Err(domain(format!("cannot pick {k} landmarks from {n} points")));
    }
    let mut chosen = vec![start];
    let mut gap: Vec<f64> = (0..n).map(|j| d.get(start, j)).collect();
    while chosen.len() < k {
        let (next, _) =
            gap.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (j, &g)| if g > best.1 { (j, g) } else { best },
            );
        chosen.push(next);
        for (j, g) in gap.iter_mut().enumerate() {
            *g = g.min(d.get(next, j));
        }
    }
    Ok(chosen)
}
