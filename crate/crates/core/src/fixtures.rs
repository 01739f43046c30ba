//! Synthetic data: a pairwise-Morse toy dataset with analytic forces for
//! overfit tests, a certifiably chiral probe molecule for symmetry checks,
//! and seeded random clouds.

use crate::geometry::{AtomicSystem, Labels};
use crate::Real;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Pairwise Morse potential `D (1 - exp(-a (r - r0)))^2`.
#[derive(Debug, Clone, Copy)]
pub struct MorseParams {
    pub depth: Real,
    pub width: Real,
    pub r0: Real,
}

impl Default for MorseParams {
    fn default() -> Self {
        Self { depth: 1.0, width: 1.0, r0: 1.5 }
    }
}

/// Total Morse energy over all pairs plus the analytic forces.
pub fn morse_labels(positions: &[[Real; 3]], params: MorseParams) -> (Real, Vec<[Real; 3]>) {
    let n = positions.len();
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = [
                positions[j][0] - positions[i][0],
                positions[j][1] - positions[i][1],
                positions[j][2] - positions[i][2],
            ];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let e = (-params.width * (r - params.r0)).exp();
            energy += params.depth * (1.0 - e) * (1.0 - e);
            // dV/dr, then project along the bond: F_i = -dV/dr * (r_i - r_j)/r.
            let dv_dr = 2.0 * params.depth * params.width * (1.0 - e) * e;
            for k in 0..3 {
                let g = dv_dr * d[k] / r;
                forces[i][k] += g;
                forces[j][k] -= g;
            }
        }
    }
    (energy, forces)
}

/// `count` jittered conformations of a five-atom cluster, labeled with Morse
/// energies and forces. Deterministic in `seed`.
pub fn morse_dataset(count: usize, seed: u64, params: MorseParams) -> Vec<AtomicSystem> {
    // Trigonal bipyramid with edges near r0, so labels sample the potential
    // well rather than its flat dissociation tail.
    let s = params.r0;
    let base = [
        [0.0, 0.0, 0.0],
        [s, 0.0, 0.0],
        [0.5 * s, 0.866 * s, 0.0],
        [0.5 * s, 0.289 * s, 0.816 * s],
        [0.5 * s, 0.289 * s, -0.816 * s],
    ];
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            // +-0.15 A per coordinate samples the harmonic basin around the
            // well minimum without straying into the repulsive wall.
            let positions: Vec<[Real; 3]> = base
                .iter()
                .map(|p| std::array::from_fn(|k| p[k] + rng.gen_range(-0.15..0.15)))
                .collect();
            let (energy, forces) = morse_labels(&positions, params);
            let labels =
                Labels { energy: Some(energy), forces: Some(forces), ..Default::default() };
            AtomicSystem::new(vec![6; 5], positions, labels)
                .expect("jittered cluster is a valid system")
        })
        .collect()
}

/// A five-atom molecule with five distinct elements and no mirror symmetry.
/// See [`chirality_volume`] for why this configuration is certifiably chiral.
pub fn chiral_probe() -> AtomicSystem {
    AtomicSystem::new(
        vec![1, 6, 7, 8, 9],
        vec![
            [0.0, 0.0, 0.0],
            [1.1, 0.1, -0.2],
            [-0.3, 1.2, 0.2],
            [0.2, -0.4, 1.3],
            [-0.9, -0.8, -0.7],
        ],
        Labels::default(),
    )
    .expect("probe geometry is valid")
}

/// Orientation certificate for systems whose atomic numbers are all
/// distinct: the largest |det| over difference-vector triples taken from
/// atom 0.
///
/// With distinct species, the only way the mirrored system could coincide
/// with a rotation of the original is atom-by-atom, and a proper rotation
/// preserves every such determinant while a reflection flips its sign. A
/// nonzero value therefore proves the labeled geometry is chiral. Returns
/// `None` when species repeat (the argument does not apply).
pub fn chirality_volume(system: &AtomicSystem) -> Option<Real> {
    let z = system.atomic_numbers();
    for (k, zi) in z.iter().enumerate() {
        if z[..k].contains(zi) {
            return None;
        }
    }
    let p = system.positions();
    let n = p.len();
    if n < 4 {
        return Some(0.0);
    }
    let diff = |i: usize| -> [Real; 3] { std::array::from_fn(|k| p[i][k] - p[0][k]) };
    let mut best: Real = 0.0;
    for i in 1..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let (a, b, c) = (diff(i), diff(j), diff(k));
                let det = a[0] * (b[1] * c[2] - b[2] * c[1])
                    - a[1] * (b[0] * c[2] - b[2] * c[0])
                    + a[2] * (b[0] * c[1] - b[1] * c[0]);
                if det.abs() > best {
                    best = det.abs();
                }
            }
        }
    }
    Some(best)
}

/// Seeded random cloud with a minimum pairwise separation of 0.7 Å.
/// Species cycle through `elements`.
pub fn random_cloud(seed: u64, n: usize, elements: &[u32], side: Real) -> AtomicSystem {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut positions: Vec<[Real; 3]> = Vec::with_capacity(n);
    while positions.len() < n {
        let candidate: [Real; 3] = std::array::from_fn(|_| rng.gen_range(-side..side));
        let ok = positions.iter().all(|p| {
            let d2: Real = (0..3).map(|k| (p[k] - candidate[k]).powi(2)).sum();
            d2 > 0.49
        });
        if ok {
            positions.push(candidate);
        }
    }
    let numbers = (0..n).map(|i| elements[i % elements.len()]).collect();
    AtomicSystem::new(numbers, positions, Labels::default()).expect("cloud is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn morse_is_zero_and_forceless_at_equilibrium() {
        let params = MorseParams::default();
        let positions = [[0.0, 0.0, 0.0], [params.r0, 0.0, 0.0]];
        let (e, f) = morse_labels(&positions, params);
        assert!(e.abs() < 1e-15);
        assert!(f.iter().flatten().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn morse_forces_match_finite_differences() {
        let params = MorseParams::default();
        let positions = vec![
            [0.0, 0.1, -0.2],
            [1.4, 0.0, 0.3],
            [0.6, 1.2, 0.1],
            [0.8, 0.3, 1.5],
        ];
        let (_, forces) = morse_labels(&positions, params);
        let h = 1e-6;
        for atom in 0..positions.len() {
            for axis in 0..3 {
                let mut plus = positions.clone();
                let mut minus = positions.clone();
                plus[atom][axis] += h;
                minus[atom][axis] -= h;
                let (ep, _) = morse_labels(&plus, params);
                let (em, _) = morse_labels(&minus, params);
                let fd = -(ep - em) / (2.0 * h);
                assert!(
                    (fd - forces[atom][axis]).abs() < 1e-8,
                    "atom {atom} axis {axis}: {fd} vs {}",
                    forces[atom][axis]
                );
            }
        }
        // Pair forces are internal: they cancel exactly.
        for axis in 0..3 {
            let net: Real = forces.iter().map(|f| f[axis]).sum();
            assert!(net.abs() < 1e-14);
        }
    }

    #[test]
    fn morse_dataset_is_seeded_and_fully_labeled() {
        let a = morse_dataset(100, 3, MorseParams::default());
        let b = morse_dataset(100, 3, MorseParams::default());
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        for system in &a {
            assert_eq!(system.len(), 5);
            let e = system.labels.energy.unwrap();
            assert!(e.is_finite() && e > 0.0);
            assert_eq!(system.labels.forces.as_ref().unwrap().len(), 5);
        }
        let c = morse_dataset(100, 4, MorseParams::default());
        assert_ne!(a, c);
    }

    #[test]
    fn chiral_probe_is_certified_chiral() {
        let probe = chiral_probe();
        let volume = chirality_volume(&probe).expect("distinct species");
        assert!(volume > 0.1, "volume {volume}");
        // A planar arrangement of the same species is not certified.
        let flat = AtomicSystem::new(
            vec![1, 6, 7, 8, 9],
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
                [2.0, 1.0, 0.0],
            ],
            Labels::default(),
        )
        .unwrap();
        assert!(chirality_volume(&flat).unwrap() < 1e-15);
        // Repeated species void the certificate.
        let twins = AtomicSystem::new(
            vec![1, 1, 7, 8, 9],
            probe.positions().to_vec(),
            Labels::default(),
        )
        .unwrap();
        assert!(chirality_volume(&twins).is_none());
    }

    #[test]
    fn random_cloud_is_separated_and_deterministic() {
        let a = random_cloud(11, 20, &[1, 6, 8], 3.0);
        let b = random_cloud(11, 20, &[1, 6, 8], 3.0);
        assert_eq!(a, b);
        let p = a.positions();
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                let d2: Real = (0..3).map(|k| (p[i][k] - p[j][k]).powi(2)).sum();
                assert!(d2 > 0.49, "atoms {i},{j} too close");
            }
        }
    }
}
