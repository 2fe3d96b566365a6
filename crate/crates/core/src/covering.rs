//! Quotient (covering) maps of the circle, torus and Klein bottle.
//!
//! Points on a cover are plain coordinate slices; the base is represented by
//! a half-open fundamental domain so that canonicalization is a function.
//! The Klein bottle is reached from the plane by reducing modulo the lattice
//! `2Z x Z` (a torus of shape `[0,2) x [0,1)`) and then folding the right half
//! of that torus onto the left half with a flip of the second coordinate.
//! The induced gluing of the unit square is `(x, 0) ~ (x, 1)` and
//! `(0, y) ~ (1, 1 - y)`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// A point on the plane or on a 2-D base.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        p.to_array()
    }
}

/// Orientation of the sheet a cover point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Direct,
    /// Only produced by [`CoveringMap::KleinComposed`].
    Flipped,
}

/// Identifies one sheet of a covering: a lattice offset plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SheetIndex {
    pub translate: (i64, i64),
    pub branch: Branch,
}

impl SheetIndex {
    const IDENTITY: SheetIndex = SheetIndex {
        translate: (0, 0),
        branch: Branch::Direct,
    };
}

/// A symmetry of the cover commuting with the projection. For the Klein
/// covering it acts as `(x, y) -> (x + k, (-1)^k y + n)`; for the torus and
/// circle as a lattice translation by `cells` periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeckTransform {
    pub cells: (i64, i64),
    pub flip: bool,
}

impl DeckTransform {
    pub const IDENTITY: DeckTransform = DeckTransform {
        cells: (0, 0),
        flip: false,
    };
}

/// Covering maps from a Euclidean cover onto a base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoveringMap {
    /// The trivial covering of `R^d` by itself.
    Identity(usize),
    /// `R -> R / period Z`.
    CircleMod { period: f64 },
    /// `R^2 -> R^2 / (p0 Z x p1 Z)`.
    Torus { periods: (f64, f64) },
    /// `R^2 -> torus [0,2) x [0,1) -> Klein bottle [0,1)^2`.
    KleinComposed,
}

/// Jacobian of a covering map at a point, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub dim: usize,
    pub entries: Vec<f64>,
}

impl Jacobian {
    fn diagonal(signs: &[f64]) -> Self {
        let dim = signs.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, s) in signs.iter().enumerate() {
            entries[i * dim + i] = *s;
        }
        Self { dim, entries }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    /// Determinant; these Jacobians are always diagonal.
    pub fn det(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).product()
    }
}

/// `v mod period` in `[0, period)`, guarding the round-up to `period` that
/// `rem_euclid` produces for tiny negative inputs.
#[inline]
pub(crate) fn wrap(v: f64, period: f64) -> f64 {
    let r = v.rem_euclid(period);
    if r >= period {
        0.0
    } else {
        r + 0.0
    }
}

fn check_finite(p: &[f64]) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(domain(format!("non-finite point {p:?}")))
    }
}

impl CoveringMap {
    /// Unit-period torus, the latent used by the torus ablation.
    pub const UNIT_TORUS: CoveringMap = CoveringMap::Torus { periods: (1.0, 1.0) };

    pub fn dim(&self) -> usize {
        match *self {
            CoveringMap::Identity(d) => d,
            CoveringMap::CircleMod { .. } => 1,
            CoveringMap::Torus { .. } | CoveringMap::KleinComposed => 2,
        }
    }

    /// Half-open extent `[lo, hi)` of the fundamental domain on each axis.
    pub fn fundamental_domain(&self) -> Vec<(f64, f64)> {
        match *self {
            CoveringMap::Identity(d) => vec![(f64::NEG_INFINITY, f64::INFINITY); d],
            CoveringMap::CircleMod { period } => vec![(0.0, period)],
            CoveringMap::Torus { periods } => vec![(0.0, periods.0), (0.0, periods.1)],
            CoveringMap::KleinComposed => vec![(0.0, 1.0), (0.0, 1.0)],
        }
    }

    /// Lebesgue measure of the fundamental domain (infinite for identity).
    pub fn domain_area(&self) -> f64 {
        self.fundamental_domain().iter().map(|(lo, hi)| hi - lo).product()
    }

    /// Number of sheets per lattice cell enumerated by [`Self::preimages`].
    pub fn sheets_per_cell(&self) -> usize {
        match self {
            CoveringMap::KleinComposed => 2,
            _ => 1,
        }
    }

    /// Number of preimages returned for a window of half-width `window`.
    pub fn preimage_count(&self, window: usize) -> usize {
        let side = 2 * window + 1;
        match self {
            CoveringMap::Identity(_) => 1,
            CoveringMap::CircleMod { .. } => side,
            CoveringMap::Torus { .. } => side * side,
            CoveringMap::KleinComposed => 2 * side * side,
        }
    }

    /// Shortest lattice period, the length scale preimage windows step by.
    pub fn min_period(&self) -> f64 {
        match *self {
            CoveringMap::Identity(_) => f64::INFINITY,
            CoveringMap::CircleMod { period } => period,
            CoveringMap::Torus { periods } => periods.0.min(periods.1),
            CoveringMap::KleinComposed => 1.0,
        }
    }

    pub fn is_periodic(&self) -> bool {
        !matches!(self, CoveringMap::Identity(_))
    }

    /// Whether `p` lies in the half-open fundamental domain.
    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter().all(|v| v.is_finite())
            && self
                .fundamental_domain()
                .iter()
                .zip(p)
                .all(|((lo, hi), v)| *v >= *lo && *v < *hi)
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        if p.len() == self.dim() {
            Ok(())
        } else {
            Err(domain(format!(
                "expected a {}-dimensional point, got {}",
                self.dim(),
                p.len()
            )))
        }
    }

    /// Projects a cover point into the fundamental domain, writing into `out`
    /// and returning the branch the projection took.
    pub fn project_into(&self, p: &[f64], out: &mut [f64]) -> Result<Branch> {
        self.check_dim(p)?;
        check_finite(p)?;
        Ok(self.project_unchecked(p, out))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &[f64], out: &mut [f64]) -> Branch {
        match *self {
            CoveringMap::Identity(_) => {
                out.copy_from_slice(p);
                Branch::Direct
            }
            CoveringMap::CircleMod { period } => {
                out[0] = wrap(p[0], period);
                Branch::Direct
            }
            CoveringMap::Torus { periods } => {
                out[0] = wrap(p[0], periods.0);
                out[1] = wrap(p[1], periods.1);
                Branch::Direct
            }
            CoveringMap::KleinComposed => {
                let x = wrap(p[0], 2.0);
                let y = wrap(p[1], 1.0);
                if x >= 1.0 {
                    out[0] = x - 1.0;
                    out[1] = wrap(-y, 1.0);
                    Branch::Flipped
                } else {
                    out[0] = x;
                    out[1] = y;
                    Branch::Direct
                }
            }
        }
    }

    pub fn project(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; p.len()];
        self.project_into(p, &mut out)?;
        Ok(out)
    }

    /// Projection of a planar point; the map must be two-dimensional.
    pub fn project_point(&self, p: Point2) -> Result<Point2> {
        let mut out = [0.0; 2];
        self.project_into(&p.to_array(), &mut out)?;
        Ok(out.into())
    }

    /// Calls `visit` with every preimage of `base` whose lattice offset lies
    /// within `window` cells on each axis.
    pub fn for_each_preimage<F>(&self, base: &[f64], window: usize, mut visit: F) -> Result<()>
    where
        F: FnMut(&[f64], SheetIndex),
    {
        if !self.contains(base) {
            return Err(domain(format!(
                "{base:?} is outside the fundamental domain of {self:?}"
            )));
        }
        let w = window as i64;
        match *self {
            CoveringMap::Identity(_) => visit(base, SheetIndex::IDENTITY),
            CoveringMap::CircleMod { period } => {
                for m in -w..=w {
                    let sheet = SheetIndex {
                        translate: (m, 0),
                        branch: Branch::Direct,
                    };
                    visit(&[base[0] + m as f64 * period], sheet);
                }
            }
            CoveringMap::Torus { periods } => {
                for m in -w..=w {
                    for n in -w..=w {
                        let q = [base[0] + m as f64 * periods.0, base[1] + n as f64 * periods.1];
                        let sheet = SheetIndex {
                            translate: (m, n),
                            branch: Branch::Direct,
                        };
                        visit(&q, sheet);
                    }
                }
            }
            CoveringMap::KleinComposed => {
                let flipped_y = wrap(1.0 - base[1], 1.0);
                for m in -w..=w {
                    for n in -w..=w {
                        let dx = 2.0 * m as f64;
                        let dy = n as f64;
                        visit(
                            &[base[0] + dx, base[1] + dy],
                            SheetIndex {
                                translate: (m, n),
                                branch: Branch::Direct,
                            },
                        );
                        visit(
                            &[base[0] + 1.0 + dx, flipped_y + dy],
                            SheetIndex {
                                translate: (m, n),
                                branch: Branch::Flipped,
                            },
                        );
                    }
                }
            }
        }
        Ok(())
    }

    /// All preimages of `base` within `window` lattice cells.
    pub fn preimages(&self, base: &[f64], window: usize) -> Result<Vec<(Vec<f64>, SheetIndex)>> {
        let mut out = Vec::with_capacity(self.preimage_count(window));
        self.for_each_preimage(base, window, |q, s| out.push((q.to_vec(), s)))?;
        Ok(out)
    }

    /// Flat distance on the base between two canonical points.
    pub fn quotient_distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if !self.contains(a) {
            return Err(domain(format!("{a:?} is outside the fundamental domain")));
        }
        let mut best = f64::INFINITY;
        self.for_each_preimage(b, 1, |q, _| {
            let d2: f64 = a.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum();
            best = best.min(d2);
        })?;
        Ok(best.sqrt())
    }

    /// The deck transformation carrying `project(p)` back to `p`.
    pub fn deck_to(&self, p: &[f64]) -> Result<DeckTransform> {
        let mut canon = vec![0.0; p.len()];
        let branch = self.project_into(p, &mut canon)?;
        Ok(match *self {
            CoveringMap::Identity(_) => DeckTransform::IDENTITY,
            CoveringMap::CircleMod { period } => DeckTransform {
                cells: (((p[0] - canon[0]) / period).round() as i64, 0),
                flip: false,
            },
            CoveringMap::Torus { periods } => DeckTransform {
                cells: (
                    ((p[0] - canon[0]) / periods.0).round() as i64,
                    ((p[1] - canon[1]) / periods.1).round() as i64,
                ),
                flip: false,
            },
            CoveringMap::KleinComposed => {
                let k = (p[0] - canon[0]).round() as i64;
                let flip = k.rem_euclid(2) == 1;
                debug_assert_eq!(flip, branch == Branch::Flipped);
                let sy = if flip { -canon[1] } else { canon[1] };
                DeckTransform {
                    cells: (k, (p[1] - sy).round() as i64),
                    flip,
                }
            }
        })
    }

    /// Applies a deck transformation to a cover point.
    #[inline]
    pub fn apply_deck(&self, g: DeckTransform, q: &[f64], out: &mut [f64]) {
        match *self {
            CoveringMap::Identity(_) => out.copy_from_slice(q),
            CoveringMap::CircleMod { period } => out[0] = q[0] + g.cells.0 as f64 * period,
            CoveringMap::Torus { periods } => {
                out[0] = q[0] + g.cells.0 as f64 * periods.0;
                out[1] = q[1] + g.cells.1 as f64 * periods.1;
            }
            CoveringMap::KleinComposed => {
                out[0] = q[0] + g.cells.0 as f64;
                let y = if g.flip { -q[1] } else { q[1] };
                out[1] = y + g.cells.1 as f64;
            }
        }
    }

    /// Jacobian of [`Self::project`] at `p`. On sheet boundaries this is the
    /// Jacobian of the branch the projection evaluates.
    pub fn derivative_ae(&self, p: &[f64]) -> Result<Jacobian> {
        let mut out = vec![0.0; p.len()];
        let branch = self.project_into(p, &mut out)?;
        Ok(match branch {
            Branch::Direct => Jacobian::diagonal(&vec![1.0; self.dim()]),
            Branch::Flipped => Jacobian::diagonal(&[1.0, -1.0]),
        })
    }
}
