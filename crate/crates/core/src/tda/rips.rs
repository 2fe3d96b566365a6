//! Rips persistence by coboundary reduction.
//!
//! Simplices are identified by their index in the combinatorial number
//! system, ordered by (diameter, index), and never materialised as lists:
//! cofaces are enumerated from the distance matrix on demand. Dimension 0
//! uses union-find. Higher dimensions reduce coboundary columns in reverse
//! filtration order with clearing, storing only the reduction matrix, and
//! pair a column immediately when its lowest coface has the same diameter
//! and is not yet claimed. The resulting pairs are the homology pairs of the
//! filtration.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::diagram::{Bar, PersistenceDiagram};
use super::distance::DistanceMatrix;
use super::field::PrimeField;
use crate::error::{domain, Error, Result};

/// Default cap on the number of top-dimensional simplices.
pub const DEFAULT_MAX_SIMPLICES: u64 = 60_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RipsOptions {
    pub max_dim: usize,
    /// `None` uses the enclosing radius of the distance matrix.
    pub threshold: Option<f64>,
    pub field_char: u32,
    pub max_simplices: u64,
}

impl RipsOptions {
    pub fn new(max_dim: usize, field_char: u32) -> Self {
        Self {
            max_dim,
            threshold: None,
            field_char,
            max_simplices: DEFAULT_MAX_SIMPLICES,
        }
    }
}

/// Persistence diagram of the Rips filtration of `d` in dimensions
/// `0..=max_dim` over ℤ/`field_char`, cut off at `threshold`.
pub fn rips_ph(
    d: &DistanceMatrix,
    max_dim: usize,
    threshold: f64,
    field_char: u32,
) -> Result<PersistenceDiagram> {
    rips_ph_with(
        d,
        RipsOptions {
            threshold: Some(threshold),
            ..RipsOptions::new(max_dim, field_char)
        },
    )
}

pub fn rips_ph_with(d: &DistanceMatrix, opts: RipsOptions) -> Result<PersistenceDiagram> {
    let field = PrimeField::new(opts.field_char)?;
    let threshold = opts.threshold.unwrap_or_else(|| d.enclosing_radius());
    if !(threshold > 0.0) {
        return Err(domain(format!("threshold {threshold} must be positive")));
    }
    if opts.max_dim > 2 {
        return Err(domain("dimensions above 2 are not supported"));
    }
    let n = d.len();
    let binom = Binomials::new(n, opts.max_dim + 2)?;
    let top = binom.get(n, opts.max_dim + 1);
    if top > opts.max_simplices {
        return Err(Error::Capacity(format!(
            "{n} points give {top} simplices of dimension {}, above the cap of {}",
            opts.max_dim, opts.max_simplices
        )));
    }
    let mut engine = Engine {
        d,
        binom,
        field,
        threshold,
        bars: Vec::new(),
    };
    let mut columns = engine.dim0();
    for dim in 1..=opts.max_dim {
        let pivots = engine.reduce(dim, &columns);
        if dim < opts.max_dim {
            columns = engine.columns(dim + 1, &pivots);
        }
    }
    PersistenceDiagram::new(field.char(), engine.bars, Some(threshold))
}

pub(crate) struct Binomials {
    table: Vec<Vec<u64>>,
}

impl Binomials {
    pub(crate) fn new(n: usize, k: usize) -> Result<Self> {
        let mut table = vec![vec![0u64; k + 1]; n + 1];
        for i in 0..=n {
            table[i][0] = 1;
            for j in 1..=k.min(i) {
                let v = table[i - 1][j - 1].checked_add(if j < i { table[i - 1][j] } else { 0 });
                table[i][j] =
                    v.ok_or_else(|| Error::Capacity(format!("simplex indices of {n} points overflow u64")))?;
            }
        }
        Ok(Self { table })
    }

    #[inline]
    pub(crate) fn get(&self, n: usize, k: usize) -> u64 {
        if k > n {
            0
        } else {
            self.table[n][k]
        }
    }

    /// Vertices of simplex `index` of dimension `dim`, in descending order.
    pub(crate) fn vertices(&self, mut index: u64, dim: usize, n: usize, out: &mut [usize]) {
        let mut hi = n;
        for (slot, k) in (1..=dim + 1).rev().enumerate() {
            // Largest v < hi with C(v, k) <= index.
            let (mut lo, mut top) = (k - 1, hi - 1);
            while lo < top {
                let mid = (lo + top + 1) / 2;
                if self.get(mid, k) <= index {
                    lo = mid;
                } else {
                    top = mid - 1;
                }
            }
            out[slot] = lo;
            index -= self.get(lo, k);
            hi = lo;
        }
    }

    /// Index of a simplex given its vertices in descending order.
    pub(crate) fn index(&self, verts: &[usize]) -> u64 {
        let k = verts.len();
        verts.iter().enumerate().map(|(s, &v)| self.get(v, k - s)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    diam_bits: u64,
    index: u64,
}

impl Key {
    fn new(diam: f64, index: u64) -> Self {
        // Non-negative floats order like their bit patterns.
        Key {
            diam_bits: diam.to_bits(),
            index,
        }
    }

    fn diam(self) -> f64 {
        f64::from_bits(self.diam_bits)
    }
}

/// A reduction-matrix column: a combination of simplices of one dimension.
struct Reduced {
    entries: Vec<(Key, u32)>,
    pivot_coef: u32,
}

struct Engine<'a> {
    d: &'a DistanceMatrix,
    binom: Binomials,
    field: PrimeField,
    threshold: f64,
    bars: Vec<Bar>,
}

impl Engine<'_> {
    #[cfg(test)]
    fn diameter(&self, verts: &[usize]) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..verts.len() {
            for j in 0..i {
                m = m.max(self.d.get(verts[i], verts[j]));
            }
        }
        m
    }

    fn bar(&mut self, birth: f64, death: f64, dim: usize) {
        if death > birth {
            self.bars.push(Bar { birth, death, dim });
        }
    }

    /// Components by union-find; returns the edges that close cycles, which
    /// are the columns for dimension 1.
    fn dim0(&mut self) -> Vec<Key> {
        let n = self.d.len();
        let mut edges = Vec::new();
        for i in 1..n {
            for j in 0..i {
                let diam = self.d.get(i, j);
                if diam <= self.threshold {
                    edges.push(Key::new(diam, self.binom.index(&[i, j])));
                }
            }
        }
        edges.sort_unstable();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut cycles = Vec::new();
        let mut verts = [0usize; 2];
        for e in edges {
            self.binom.vertices(e.index, 1, n, &mut verts);
            let (a, b) = (find(&mut parent, verts[0]), find(&mut parent, verts[1]));
            if a == b {
                cycles.push(e);
            } else {
                parent[a.max(b)] = a.min(b);
                self.bar(0.0, e.diam(), 0);
            }
        }
        let roots = (0..n).filter(|&v| find(&mut parent, v) == v).count();
        for _ in 0..roots {
            self.bar(0.0, f64::INFINITY, 0);
        }
        cycles.reverse();
        cycles
    }

    /// Visits the cofaces of a `dim`-simplex within the threshold in
    /// increasing index order with their coboundary coefficients. Stops when
    /// `visit` returns false.
    fn for_each_coface(&self, simplex: Key, dim: usize, mut visit: impl FnMut(Key, u32) -> bool) {
        let n = self.d.len();
        let mut desc = [0usize; 4];
        self.binom.vertices(simplex.index, dim, n, &mut desc);
        let k_total = dim + 1;
        // Ascending order: asc[i] is the i-th smallest vertex.
        let mut asc = [0usize; 4];
        for i in 0..k_total {
            asc[i] = desc[k_total - 1 - i];
        }
        let mut below = 0usize;
        let mut idx_below = 0u64;
        let mut idx_above: u64 = (0..k_total).map(|i| self.binom.get(asc[i], i + 2)).sum();
        let base = simplex.diam();
        for w in 0..n {
            if below < k_total && asc[below] == w {
                idx_below += self.binom.get(w, below + 1);
                idx_above -= self.binom.get(w, below + 2);
                below += 1;
                continue;
            }
            let mut diam = base;
            for &v in &asc[..k_total] {
                diam = diam.max(self.d.get(w, v));
            }
            if diam > self.threshold {
                continue;
            }
            let index = idx_below + self.binom.get(w, below + 1) + idx_above;
            let coef = self.field.sign(k_total - below);
            if !visit(Key::new(diam, index), coef) {
                return;
            }
        }
    }

    fn push_coboundary(
        &self,
        heap: &mut BinaryHeap<Reverse<(Key, u32)>>,
        simplex: Key,
        dim: usize,
        scale: u32,
    ) {
        self.for_each_coface(simplex, dim, |key, c| {
            heap.push(Reverse((key, self.field.mul(c, scale))));
            true
        });
    }

    /// Lowest non-zero entry of the working column, left in the heap.
    fn pivot(&self, heap: &mut BinaryHeap<Reverse<(Key, u32)>>) -> Option<(Key, u32)> {
        while let Some(Reverse((key, mut coef))) = heap.pop() {
            while let Some(&Reverse((next, c))) = heap.peek() {
                if next != key {
                    break;
                }
                coef = self.field.add(coef, c);
                heap.pop();
            }
            if coef != 0 {
                heap.push(Reverse((key, coef)));
                return Some((key, coef));
            }
        }
        None
    }

    /// Reduces the coboundary columns of the given `dim`-simplices, which
    /// arrive in reverse filtration order. Returns the pivots, which are the
    /// `dim + 1` simplices to skip in the next dimension.
    fn reduce(&mut self, dim: usize, columns: &[Key]) -> HashMap<u64, usize> {
        let mut pivot_of: HashMap<u64, usize> = HashMap::new();
        let mut reduced: Vec<Reduced> = Vec::new();
        let mut heap = BinaryHeap::new();
        for &sigma in columns {
            let birth = sigma.diam();
            // The lowest coface has the column's diameter when one exists.
            let mut emergent = None;
            self.for_each_coface(sigma, dim, |key, c| {
                if key.diam_bits == sigma.diam_bits {
                    emergent = Some((key, c));
                    false
                } else {
                    true
                }
            });
            if let Some((key, c)) = emergent {
                if !pivot_of.contains_key(&key.index) {
                    pivot_of.insert(key.index, reduced.len());
                    reduced.push(Reduced {
                        entries: vec![(sigma, 1)],
                        pivot_coef: c,
                    });
                    continue;
                }
            }
            heap.clear();
            self.push_coboundary(&mut heap, sigma, dim, 1);
            let mut v: Vec<(Key, u32)> = vec![(sigma, 1)];
            loop {
                match self.pivot(&mut heap) {
                    None => {
                        self.bar(birth, f64::INFINITY, dim);
                        break;
                    }
                    Some((key, coef)) => match pivot_of.get(&key.index) {
                        Some(&slot) => {
                            let other = &reduced[slot];
                            let factor = self
                                .field
                                .neg(self.field.mul(coef, self.field.inv(other.pivot_coef)));
                            for &(s, c) in &other.entries {
                                let scale = self.field.mul(c, factor);
                                v.push((s, scale));
                                self.push_coboundary(&mut heap, s, dim, scale);
                            }
                        }
                        None => {
                            self.bar(birth, key.diam(), dim);
                            pivot_of.insert(key.index, reduced.len());
                            reduced.push(Reduced {
                                entries: compact(v, self.field),
                                pivot_coef: coef,
                            });
                            break;
                        }
                    },
                }
            }
        }
        pivot_of
    }

    /// All `dim`-simplices within the threshold that are not pivots of the
    /// previous reduction, in reverse filtration order.
    fn columns(&self, dim: usize, pivots: &HashMap<u64, usize>) -> Vec<Key> {
        let n = self.d.len();
        let mut out = Vec::new();
        let k = dim + 1;
        let mut verts = vec![0usize; k];
        // Odometer over descending vertex tuples.
        fn rec(
            e: &Engine<'_>,
            verts: &mut Vec<usize>,
            depth: usize,
            hi: usize,
            diam: f64,
            pivots: &HashMap<u64, usize>,
            out: &mut Vec<Key>,
        ) {
            let k = verts.len();
            if depth == k {
                let index = e.binom.index(verts);
                if !pivots.contains_key(&index) {
                    out.push(Key::new(diam, index));
                }
                return;
            }
            for v in (k - depth - 1)..hi {
                let mut dd = diam;
                for &u in &verts[..depth] {
                    dd = dd.max(e.d.get(u, v));
                }
                if dd > e.threshold {
                    continue;
                }
                verts[depth] = v;
                rec(e, verts, depth + 1, v, dd, pivots, out);
            }
        }
        rec(self, &mut verts, 0, n, 0.0, pivots, &mut out);
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }
}

fn compact(mut v: Vec<(Key, u32)>, field: PrimeField) -> Vec<(Key, u32)> {
    v.sort_unstable_by_key(|e| e.0);
    let mut out: Vec<(Key, u32)> = Vec::with_capacity(v.len());
    for (k, c) in v {
        match out.last_mut() {
            Some(last) if last.0 == k => last.1 = field.add(last.1, c),
            _ => out.push((k, c)),
        }
    }
    out.retain(|e| e.1 != 0);
    out
}
