use serde::{Deserialize, Serialize};

use super::diagram::PersistenceDiagram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Match,
    NoMatch,
    Ambiguous,
}

/// Long-bar counts in dimensions 1 and 2 for one field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongBars {
    pub field: u32,
    pub h1: usize,
    pub h2: usize,
    /// No clear gap separated long bars from short ones.
    pub ambiguous: bool,
}

/// Splits the bars of dimensions 1 and 2 into long and short.
///
/// Persistences of both dimensions are pooled and sorted in decreasing
/// order. The long bars are those before the first position where a bar
/// exceeds `gap_factor` times the next one, searched only among bars longer
/// than `1 / gap_factor` of the longest. If the search runs off the end all
/// bars are long; if it runs into a bar at or below that level first, the
/// split is ambiguous. Infinite bars are measured up to the diagram
/// threshold, or the largest finite death.
pub fn long_bar_counts(d: &PersistenceDiagram, gap_factor: f64) -> LongBars {
    let cap = d.threshold.filter(|t| t.is_finite()).unwrap_or_else(|| {
        d.points
            .iter()
            .filter(|b| !b.is_infinite())
            .map(|b| b.death)
            .fold(0.0, f64::max)
    });
    let mut bars: Vec<(f64, usize)> = d
        .points
        .iter()
        .filter(|b| b.dim == 1 || b.dim == 2)
        .map(|b| {
            let death = if b.is_infinite() {
                cap.max(b.birth)
            } else {
                b.death
            };
            (death - b.birth, b.dim)
        })
        .collect();
    bars.sort_by(|a, b| b.0.total_cmp(&a.0));
    let m = bars.len();
    let mut split = (m, false);
    for i in 0..m {
        if bars[i].0 * gap_factor <= bars[0].0 {
            split = (0, true);
            break;
        }
        if i + 1 < m && bars[i].0 > gap_factor * bars[i + 1].0 {
            split = (i + 1, false);
            break;
        }
    }
    let (long, ambiguous) = split;
    let count = |dim| bars[..long].iter().filter(|b| b.1 == dim).count();
    LongBars {
        field: d.field_char,
        h1: count(1),
        h2: count(2),
        ambiguous,
    }
}

/// Klein bottle test: two long H₁ bars and one long H₂ bar over ℤ₂, one
/// long H₁ bar and no long H₂ bar over ℤ₃.
pub fn klein_signature(
    p2: &PersistenceDiagram,
    p3: &PersistenceDiagram,
    gap_factor: f64,
) -> (Verdict, [LongBars; 2]) {
    let (a, b) = (long_bar_counts(p2, gap_factor), long_bar_counts(p3, gap_factor));
    let verdict = if a.ambiguous || b.ambiguous {
        Verdict::Ambiguous
    } else if (a.h1, a.h2, b.h1, b.h2) == (2, 1, 1, 0) {
        Verdict::Match
    } else {
        Verdict::NoMatch
    };
    (verdict, [a, b])
}
