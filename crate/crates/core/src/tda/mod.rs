//! Vietoris-Rips persistent homology over ℤ₂ and ℤ₃, bottleneck distance,
//! and the two-field Klein bottle signature.

mod bottleneck;
mod diagram;
mod distance;
mod field;
mod homology;
mod rips;
mod signature;

pub use bottleneck::{bottleneck, bottleneck_l2, bottleneck_matching, Matching};
pub use diagram::{Bar, PersistenceDiagram};
pub use distance::{maxmin_landmarks, DistanceMatrix};
pub use homology::rips_ph_homology;
pub use rips::{rips_ph, rips_ph_with, RipsOptions, DEFAULT_MAX_SIMPLICES};
pub use signature::{klein_signature, long_bar_counts, LongBars, Verdict};
