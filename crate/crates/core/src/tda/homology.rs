//! Rips persistence by explicit boundary-matrix reduction with the twist.
//!
//! Materialises every simplex up to dimension `max_dim + 1`, so it is only
//! practical for small complexes; it serves as an independent route to the
//! same diagram.

use std::collections::HashMap;

use super::diagram::{Bar, PersistenceDiagram};
use super::distance::DistanceMatrix;
use super::field::PrimeField;
use super::rips::Binomials;
use crate::error::{domain, Result};

struct Simplex {
    diam: f64,
    dim: usize,
    verts: Vec<usize>,
}

pub fn rips_ph_homology(
    d: &DistanceMatrix,
    max_dim: usize,
    threshold: f64,
    field_char: u32,
) -> Result<PersistenceDiagram> {
    let field = PrimeField::new(field_char)?;
    if !(threshold > 0.0) {
        return Err(domain("threshold must be positive"));
    }
    let n = d.len();
    let binom = Binomials::new(n, max_dim + 3)?;
    let mut simplices = Vec::new();
    fn rec(
        d: &DistanceMatrix,
        verts: &mut Vec<usize>,
        diam: f64,
        top: usize,
        threshold: f64,
        out: &mut Vec<Simplex>,
    ) {
        if !verts.is_empty() {
            out.push(Simplex {
                diam,
                dim: verts.len() - 1,
                verts: verts.clone(),
            });
        }
        if verts.len() == top + 1 {
            return;
        }
        let hi = verts.last().copied().unwrap_or(d.len());
        for v in 0..hi {
            let dd = verts.iter().fold(diam, |m, &u| m.max(d.get(u, v)));
            if dd <= threshold {
                verts.push(v);
                rec(d, verts, dd, top, threshold, out);
                verts.pop();
            }
        }
    }
    rec(d, &mut Vec::new(), 0.0, max_dim + 1, threshold, &mut simplices);
    // Vertex tuples are stored in descending order, so the combinatorial
    // index breaks ties within a dimension.
    let key = |s: &Simplex| (s.diam, s.dim, binom.index(&s.verts));
    simplices.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    let position: HashMap<(usize, u64), usize> = simplices
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.dim, binom.index(&s.verts)), i))
        .collect();

    let boundary = |s: &Simplex| -> Vec<(usize, u32)> {
        if s.dim == 0 {
            return Vec::new();
        }
        let mut col: Vec<(usize, u32)> = (0..s.verts.len())
            .map(|j| {
                let mut face = s.verts.clone();
                face.remove(j);
                (position[&(s.dim - 1, binom.index(&face))], field.sign(j))
            })
            .collect();
        col.sort_unstable();
        col
    };

    let m = simplices.len();
    let mut cols: Vec<Vec<(usize, u32)>> = vec![Vec::new(); m];
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let mut cleared = vec![false; m];
    for dim in (1..=max_dim + 1).rev() {
        for j in 0..m {
            if simplices[j].dim != dim || cleared[j] {
                continue;
            }
            let mut col = boundary(&simplices[j]);
            while let Some(&(low, coef)) = col.last() {
                let Some(k) = owner[low] else { break };
                let other = &cols[k];
                let pivot = other.last().unwrap().1;
                let factor = field.neg(field.mul(coef, field.inv(pivot)));
                col = axpy(&col, other, factor, field);
            }
            if let Some(&(low, _)) = col.last() {
                owner[low] = Some(j);
                cleared[low] = true;
            }
            cols[j] = col;
        }
    }

    let mut bars = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        if let Some(&(low, _)) = col.last() {
            let (b, dd) = (simplices[low].diam, simplices[j].diam);
            if dd > b {
                bars.push(Bar {
                    birth: b,
                    death: dd,
                    dim: simplices[low].dim,
                });
            }
        }
    }
    for (i, s) in simplices.iter().enumerate() {
        let negative = !cols[i].is_empty();
        if s.dim <= max_dim && !negative && owner[i].is_none() {
            bars.push(Bar {
                birth: s.diam,
                death: f64::INFINITY,
                dim: s.dim,
            });
        }
    }
    PersistenceDiagram::new(field.char(), bars, Some(threshold))
}

/// `a + factor * b` for sparse columns sorted by row.
fn axpy(a: &[(usize, u32)], b: &[(usize, u32)], factor: u32, f: PrimeField) -> Vec<(usize, u32)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let take_a = j == b.len() || (i < a.len() && a[i].0 < b[j].0);
        let take_b = i == a.len() || (j < b.len() && b[j].0 < a[i].0);
        if take_a {
            out.push(a[i]);
            i += 1;
        } else if take_b {
            out.push((b[j].0, f.mul(b[j].1, factor)));
            j += 1;
        } else {
            let c = f.add(a[i].1, f.mul(b[j].1, factor));
            if c != 0 {
                out.push((a[i].0, c));
            }
            i += 1;
            j += 1;
        }
    }
    out
}
