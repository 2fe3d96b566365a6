use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// One persistence pair. `death` is `f64::INFINITY` for classes that never die.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub birth: f64,
    pub death: f64,
    pub dim: usize,
}

impl Bar {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }

    pub fn is_infinite(&self) -> bool {
        self.death == f64::INFINITY
    }
}

/// Persistence pairs of all dimensions computed over one field.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    pub field_char: u32,
    pub points: Vec<Bar>,
    /// Filtration cut-off used to compute the diagram, if any.
    pub threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BarJson {
    birth: f64,
    death: Option<f64>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct DiagramJson {
    field: u32,
    points: Vec<BarJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
}

impl PersistenceDiagram {
    pub fn new(field_char: u32, mut points: Vec<Bar>, threshold: Option<f64>) -> Result<Self> {
        for b in &points {
            if b.birth.is_nan() || b.death.is_nan() || b.death < b.birth {
                return Err(domain(format!("invalid bar [{}, {})", b.birth, b.death)));
            }
        }
        points.sort_by(|a, b| {
            (a.dim, a.birth, a.death)
                .partial_cmp(&(b.dim, b.birth, b.death))
                .unwrap()
        });
        Ok(Self {
            field_char,
            points,
            threshold,
        })
    }

    pub fn in_dim(&self, dim: usize) -> impl Iterator<Item = &Bar> + '_ {
        self.points.iter().filter(move |b| b.dim == dim)
    }

    pub fn count_in_dim(&self, dim: usize) -> usize {
        self.in_dim(dim).count()
    }

    /// A copy with infinite deaths replaced by `cap`.
    pub fn truncated(&self, cap: f64) -> PersistenceDiagram {
        let points = self
            .points
            .iter()
            .map(|b| Bar {
                death: if b.is_infinite() {
                    cap.max(b.birth)
                } else {
                    b.death
                },
                ..*b
            })
            .filter(|b| b.death > b.birth)
            .collect();
        PersistenceDiagram {
            field_char: self.field_char,
            points,
            threshold: self.threshold,
        }
    }

    /// Number of bars of dimension `dim` alive over the whole interval
    /// `[s, t]`: born at or before `s`, dying after `t`.
    pub fn persistent_betti(&self, dim: usize, s: f64, t: f64) -> usize {
        self.in_dim(dim).filter(|b| b.birth <= s && b.death > t).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DiagramJson {
            field: self.field_char,
            points: self
                .points
                .iter()
                .map(|b| BarJson {
                    birth: b.birth,
                    death: (!b.is_infinite()).then_some(b.death),
                    dim: b.dim,
                })
                .collect(),
            threshold: self.threshold.filter(|t| t.is_finite()),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DiagramJson = serde_json::from_str(s)?;
        let points = doc
            .points
            .into_iter()
            .map(|b| Bar {
                birth: b.birth,
                death: b.death.unwrap_or(f64::INFINITY),
                dim: b.dim,
            })
            .collect();
        Self::new(doc.field, points, doc.threshold)
    }

    /// `dim,birth,death` rows with `inf` for infinite deaths.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,birth,death\n");
        for b in &self.points {
            let _ = writeln!(out, "{},{},{}", b.dim, b.birth, b.death);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_with_infinite_bars() {
        let d = PersistenceDiagram::new(
            3,
            vec![
                Bar {
                    birth: 0.0,
                    death: f64::INFINITY,
                    dim: 0,
                },
                Bar {
                    birth: 0.25,
                    death: 1.5,
                    dim: 1,
                },
            ],
            Some(2.0),
        )
        .unwrap();
        let s = d.to_json().unwrap();
        assert!(s.contains("\"death\":null"));
        assert!(s.contains("\"field\":3"));
        assert_eq!(PersistenceDiagram::from_json(&s).unwrap(), d);
        assert!(d.to_csv().contains("0,0,inf"));
    }

    #[test]
    fn rejects_inverted_bars() {
        let bad = vec![Bar {
            birth: 1.0,
            death: 0.5,
            dim: 1,
        }];
        assert!(PersistenceDiagram::new(2, bad, None).is_err());
    }

    #[test]
    fn truncation_caps_infinite_bars() {
        let d = PersistenceDiagram::new(
            2,
            vec![
                Bar {
                    birth: 0.0,
                    death: f64::INFINITY,
                    dim: 0,
                },
                Bar {
                    birth: 0.5,
                    death: f64::INFINITY,
                    dim: 1,
                },
            ],
            None,
        )
        .unwrap();
        let t = d.truncated(2.0);
        assert_eq!(t.points[0].death, 2.0);
        assert_eq!(t.points[1].persistence(), 1.5);
    }
}
