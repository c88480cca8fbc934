//! Fixtures shared by the benchmarks.

use phonon_kinetics::{DispersionTable, ForceField, LatticeSpec};

/// Scalar massive nearest-neighbour field, `ω² = m² + Σ 2(1 − cos θ_i)`.
pub fn massive(dim: usize, side: usize) -> ForceField {
    let lat = LatticeSpec::new(dim, 1, side).expect("valid lattice");
    ForceField::nearest_neighbor(lat, &[1.0], &[1.0]).expect("valid field")
}

pub fn table(field: &ForceField) -> DispersionTable {
    DispersionTable::build(field, None).expect("even, positive field")
}
