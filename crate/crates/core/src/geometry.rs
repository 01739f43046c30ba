//! Atomic systems, neighbor lists and radial features.
//!
//! Edges are directed pairs within a hard cutoff; the radial basis expands a
//! distance into Gaussians of `exp(-r)` so that spacing is densest where
//! interactions vary fastest, and a cosine window switches contributions off
//! continuously (with continuous first derivative) at the cutoff.

use crate::Real;
use thiserror::Error;

/// Minimal separation below which two atoms are considered coincident.
pub const MIN_SEPARATION: Real = 1e-8;

/// Atom count above which [`build_edges`] switches to the uniform-cell
/// accelerator. Both paths return identical, sorted edge sets.
pub const CELL_LIST_THRESHOLD: usize = 1000;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("system must contain at least one atom")]
    Empty,
    #[error("atomic number {z} of atom {atom} is out of range 1..=118")]
    BadAtomicNumber { atom: usize, z: u32 },
    #[error("non-finite coordinate on atom {atom}")]
    NonFinitePosition { atom: usize },
    #[error("{what} has length {len}, expected {expected}")]
    BadLabelLength { what: &'static str, len: usize, expected: usize },
    #[error("polarizability label is not symmetric: |a - a^T| max = {deviation:e}")]
    AsymmetricPolarizability { deviation: Real },
    #[error("atoms {i} and {j} are closer than {tol:e}")]
    CoincidentAtoms { i: usize, j: usize, tol: Real },
    #[error("cutoff must be positive and finite, got {0}")]
    BadCutoff(Real),
    #[error("radial basis needs at least 2 functions, got {0}")]
    BadBasisSize(usize),
}

/// Element symbols indexed by atomic number − 1 (H..Og).
pub const ELEMENT_SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga",
    "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd",
    "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm",
    "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os",
    "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa",
    "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg",
    "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Symbol for an atomic number, or `None` outside 1..=118.
pub fn element_symbol(z: u32) -> Option<&'static str> {
    ELEMENT_SYMBOLS.get(z.checked_sub(1)? as usize).copied()
}

/// Atomic number for a case-sensitive element symbol.
pub fn element_number(symbol: &str) -> Option<u32> {
    ELEMENT_SYMBOLS.iter().position(|&s| s == symbol).map(|i| i as u32 + 1)
}

/// Reference labels a system may carry for training and evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub energy: Option<Real>,
    pub forces: Option<Vec<[Real; 3]>>,
    pub dipole: Option<[Real; 3]>,
    /// Row-major symmetric 3x3.
    pub polarizability: Option<[Real; 9]>,
    /// Per-atom row-major 3x3 tensors.
    pub shieldings: Option<Vec<[Real; 9]>>,
}

/// A molecule: atomic numbers plus Cartesian positions (Angstrom).
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicSystem {
    atomic_numbers: Vec<u32>,
    positions: Vec<[Real; 3]>,
    pub labels: Labels,
}

impl AtomicSystem {
    /// Validate and build. Checks: non-empty, atomic numbers in 1..=118,
    /// finite coordinates, label lengths, symmetric polarizability.
    pub fn new(
        atomic_numbers: Vec<u32>,
        positions: Vec<[Real; 3]>,
        labels: Labels,
    ) -> Result<Self, GeometryError> {
        if atomic_numbers.is_empty() {
            return Err(GeometryError::Empty);
        }
        if positions.len() != atomic_numbers.len() {
            return Err(GeometryError::BadLabelLength {
                what: "positions",
                len: positions.len(),
                expected: atomic_numbers.len(),
            });
        }
        for (atom, &z) in atomic_numbers.iter().enumerate() {
            if z == 0 || z > 118 {
                return Err(GeometryError::BadAtomicNumber { atom, z });
            }
        }
        for (atom, p) in positions.iter().enumerate() {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(GeometryError::NonFinitePosition { atom });
            }
        }
        if let Some(f) = &labels.forces {
            if f.len() != atomic_numbers.len() {
                return Err(GeometryError::BadLabelLength {
                    what: "forces",
                    len: f.len(),
                    expected: atomic_numbers.len(),
                });
            }
        }
        if let Some(s) = &labels.shieldings {
            if s.len() != atomic_numbers.len() {
                return Err(GeometryError::BadLabelLength {
                    what: "shieldings",
                    len: s.len(),
                    expected: atomic_numbers.len(),
                });
            }
        }
        if let Some(a) = &labels.polarizability {
            let mut dev: Real = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    dev = dev.max((a[3 * r + c] - a[3 * c + r]).abs());
                }
            }
            if dev > 1e-8 {
                return Err(GeometryError::AsymmetricPolarizability { deviation: dev });
            }
        }
        Ok(Self { atomic_numbers, positions, labels })
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty systems
    }

    pub fn atomic_numbers(&self) -> &[u32] {
        &self.atomic_numbers
    }

    pub fn positions(&self) -> &[[Real; 3]] {
        &self.positions
    }

    /// Replace positions, revalidating finiteness.
    pub fn with_positions(&self, positions: Vec<[Real; 3]>) -> Result<Self, GeometryError> {
        Self::new(self.atomic_numbers.clone(), positions, self.labels.clone())
    }
}

/// Directed edges within the cutoff, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    /// `(receiver, sender)` pairs; both directions of each bond are present.
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<Real>,
    /// Unit vectors from receiver `i` to sender `j`.
    pub unit_vectors: Vec<[Real; 3]>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// All directed pairs `(i, j)`, `i != j`, with `|r_j - r_i| <= cutoff`.
///
/// Uses brute force for small systems and a uniform-cell accelerator above
/// [`CELL_LIST_THRESHOLD`] atoms; both return the identical sorted set.
/// Rejects pairs closer than [`MIN_SEPARATION`].
pub fn build_edges(system: &AtomicSystem, cutoff: Real) -> Result<EdgeSet, GeometryError> {
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(GeometryError::BadCutoff(cutoff));
    }
    let pairs = if system.len() > CELL_LIST_THRESHOLD {
        cell_list_pairs(system.positions(), cutoff)
    } else {
        brute_force_pairs(system.positions(), cutoff)
    };
    let mut edges = EdgeSet {
        pairs: Vec::with_capacity(pairs.len()),
        distances: Vec::with_capacity(pairs.len()),
        unit_vectors: Vec::with_capacity(pairs.len()),
    };
    for (i, j) in pairs {
        let a = system.positions()[i];
        let b = system.positions()[j];
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if r < MIN_SEPARATION {
            return Err(GeometryError::CoincidentAtoms { i, j, tol: MIN_SEPARATION });
        }
        edges.pairs.push((i, j));
        edges.distances.push(r);
        edges.unit_vectors.push([d[0] / r, d[1] / r, d[2] / r]);
    }
    Ok(edges)
}

fn brute_force_pairs(positions: &[[Real; 3]], cutoff: Real) -> Vec<(usize, usize)> {
    let n = positions.len();
    let cut_sq = cutoff * cutoff;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let a = positions[i];
            let b = positions[j];
            let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= cut_sq {
                pairs.push((i, j));
            }
        }
    }
    pairs // already sorted: outer loop over i, inner over j
}

/// Uniform-grid neighbor search: bin atoms into cells of edge `cutoff`,
/// compare only atoms in neighboring cells, then sort to the canonical order.
fn cell_list_pairs(positions: &[[Real; 3]], cutoff: Real) -> Vec<(usize, usize)> {
    let mut lo = [Real::INFINITY; 3];
    for p in positions {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
        }
    }
    let cell_of = |p: &[Real; 3]| -> [i64; 3] {
        std::array::from_fn(|k| ((p[k] - lo[k]) / cutoff).floor() as i64)
    };
    let mut bins: std::collections::HashMap<[i64; 3], Vec<usize>> =
        std::collections::HashMap::new();
    for (idx, p) in positions.iter().enumerate() {
        bins.entry(cell_of(p)).or_default().push(idx);
    }
    let cut_sq = cutoff * cutoff;
    let mut pairs = Vec::new();
    for (idx, p) in positions.iter().enumerate() {
        let cell = cell_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [cell[0] + dx, cell[1] + dy, cell[2] + dz];
                    let Some(neighbors) = bins.get(&key) else { continue };
                    for &j in neighbors {
                        if j == idx {
                            continue;
                        }
                        let q = positions[j];
                        let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= cut_sq {
                            pairs.push((idx, j));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Gaussian expansion of `exp(-r)`: centers equally spaced on
/// `[exp(-cutoff), 1]` (both endpoints included) and a shared width so that
/// neighboring Gaussians overlap at comparable density everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialBasis {
    pub count: usize,
    pub cutoff: Real,
    pub centers: Vec<Real>,
    pub betas: Vec<Real>,
}

impl RadialBasis {
    /// `count >= 2` Gaussians on `[exp(-cutoff), 1]`; every width is
    /// `(2 (1 - exp(-cutoff)) / count)^-2`.
    pub fn new(count: usize, cutoff: Real) -> Result<Self, GeometryError> {
        if !(cutoff > 0.0) || !cutoff.is_finite() {
            return Err(GeometryError::BadCutoff(cutoff));
        }
        if count < 2 {
            return Err(GeometryError::BadBasisSize(count));
        }
        let lo = (-cutoff).exp();
        // Interpolate so both endpoints are hit exactly.
        let centers: Vec<Real> = (0..count)
            .map(|k| {
                let t = k as Real / (count as Real - 1.0);
                lo * (1.0 - t) + t
            })
            .collect();
        let beta = (2.0 * (1.0 - lo) / count as Real).powi(-2);
        Ok(Self { count, cutoff, centers, betas: vec![beta; count] })
    }

    /// Evaluate all basis functions at distance `r`:
    /// `e_k(r) = exp(-beta_k (exp(-r) - mu_k)^2)`.
    pub fn expand(&self, r: Real) -> Vec<Real> {
        let m = (-r).exp();
        self.centers
            .iter()
            .zip(&self.betas)
            .map(|(&mu, &beta)| (-beta * (m - mu) * (m - mu)).exp())
            .collect()
    }
}

/// Cosine cutoff window: `0.5 (cos(pi r / cutoff) + 1)` inside, `0` outside.
/// Value and first derivative both vanish at `r = cutoff`.
pub fn cutoff_fn(r: Real, cutoff: Real) -> Real {
    if r <= cutoff {
        0.5 * ((std::f64::consts::PI as Real * r / cutoff).cos() + 1.0)
    } else {
        0.0
    }
}
