//! Molecular geometry: atoms, coordinates, distances, rigid motions, and the
//! two-view coordinate perturbation used by every pretraining objective.

pub mod elements;
mod transform;
mod xyz;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use transform::RigidTransform;
pub use xyz::{parse_xyz, serialize_xyz};

/// Default coordinate-noise standard deviation for the second view, Å.
pub const DEFAULT_COORD_SIGMA: f64 = 0.3;
/// Cutoff radius used when the optional neighbor cutoff is switched on, Å.
pub const DEFAULT_CUTOFF: f64 = 5.0;

/// Atom types (atomic numbers) and Cartesian coordinates in Å.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGeometry {
    atom_types: Vec<u8>,
    coords: Vec<[f64; 3]>,
}

impl MoleculeGeometry {
    pub fn new(atom_types: Vec<u8>, coords: Vec<[f64; 3]>) -> Result<Self> {
        if atom_types.is_empty() {
            return Err(Error::invalid("molecule needs at least one atom"));
        }
        if atom_types.len() != coords.len() {
            return Err(Error::invalid(format!(
                "{} atom types but {} coordinate rows",
                atom_types.len(),
                coords.len()
            )));
        }
        if let Some(z) = atom_types.iter().find(|&&z| z == 0 || z > elements::MAX_ATOMIC_NUMBER) {
            return Err(Error::invalid(format!("atomic number {z} out of range")));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(Self { atom_types, coords })
    }

    pub fn atom_types(&self) -> &[u8] {
        &self.atom_types
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.atom_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atom_types.is_empty()
    }

    /// Same atoms with new coordinates.
    pub fn with_coords(&self, coords: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(self.atom_types.clone(), coords)
    }

    /// Keeps only the masked-in atoms, in index order.
    pub fn subset(&self, mask: &AtomMask) -> Result<Self> {
        if let Some(&i) = mask.kept_indices().iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "mask index {i} out of range for {} atoms",
                self.len()
            )));
        }
        Self::new(
            mask.kept_indices().iter().map(|&i| self.atom_types[i]).collect(),
            mask.kept_indices().iter().map(|&i| self.coords[i]).collect(),
        )
    }

    /// Relabels atoms so that new atom `perm[k]` is old atom `k`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("not a permutation of the atom indices"));
        }
        let mut types = vec![0; n];
        let mut coords = vec![[0.0; 3]; n];
        for (old, &new) in perm.iter().enumerate() {
            types[new] = self.atom_types[old];
            coords[new] = self.coords[old];
        }
        Self::new(types, coords)
    }
}

/// Two views of one molecule: `g2` is `g1` with Gaussian coordinate noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryPair {
    pub g1: MoleculeGeometry,
    pub g2: MoleculeGeometry,
    pub coord_noise_sigma: f64,
}

impl GeometryPair {
    pub fn new(g1: MoleculeGeometry, g2: MoleculeGeometry, coord_noise_sigma: f64) -> Result<Self> {
        if g1.atom_types() != g2.atom_types() {
            return Err(Error::invalid("views must share atom types"));
        }
        Ok(Self {
            g1,
            g2,
            coord_noise_sigma,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistancePair {
    pub i: usize,
    pub j: usize,
    pub d: f64,
}

/// Unordered atom pairs `i < j` with their distances, ordered by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSet {
    pub pairs: Vec<DistancePair>,
    pub cutoff: Option<f64>,
}

impl DistanceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.d).collect()
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn pairwise_distances(g: &MoleculeGeometry, cutoff: Option<f64>) -> DistanceSet {
    let r = g.coords();
    let mut pairs = Vec::with_capacity(r.len() * r.len().saturating_sub(1) / 2);
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            let d = distance(&r[i], &r[j]);
            if cutoff.is_none_or(|c| d <= c) {
                pairs.push(DistancePair { i, j, d });
            }
        }
    }
    DistanceSet { pairs, cutoff }
}

pub fn apply_rigid_transform(g: &MoleculeGeometry, t: &RigidTransform) -> MoleculeGeometry {
    let coords = g.coords().iter().map(|r| t.apply(r)).collect();
    MoleculeGeometry {
        atom_types: g.atom_types.clone(),
        coords,
    }
}

/// Builds the second view by adding i.i.d. `N(0, sigma²)` noise to every
/// coordinate component.
pub fn perturb_coordinates<R: Rng + ?Sized>(g: &MoleculeGeometry, sigma: f64, rng: &mut R) -> Result<GeometryPair> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("coordinate sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return GeometryPair::new(g.clone(), g.clone(), sigma);
    }
    let coords = g
        .coords()
        .iter()
        .map(|r| {
            let mut out = *r;
            for c in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *c += sigma * z;
            }
            out
        })
        .collect();
    GeometryPair::new(g.clone(), g.with_coords(coords)?, sigma)
}

/// The atoms that survive masking, shared by both views of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomMask {
    kept: Vec<usize>,
    ratio: f64,
}

impl AtomMask {
    pub fn all(n: usize) -> Self {
        Self {
            kept: (0..n).collect(),
            ratio: 0.0,
        }
    }

    pub fn from_indices(mut kept: Vec<usize>, ratio: f64) -> Result<Self> {
        kept.sort_unstable();
        kept.dedup();
        if kept.is_empty() {
            return Err(Error::invalid("mask keeps no atoms"));
        }
        Ok(Self { kept, ratio })
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Number of atoms kept out of `n` at masking ratio `r`: `⌈(1 − r)·n⌉`, at least one.
pub fn kept_count(n: usize, r: f64) -> usize {
    // guard against 0.7 * 10 = 7.000000000000001 style round-off
    let k = ((1.0 - r) * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

pub fn sample_atom_mask<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Result<AtomMask> {
    if n == 0 {
        return Err(Error::invalid("cannot mask an empty molecule"));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::invalid(format!("masking ratio {r} must lie in [0, 1)")));
    }
    if r == 0.0 {
        return Ok(AtomMask::all(n));
    }
    let k = kept_count(n, r);
    let mut kept = rand::seq::index::sample(rng, n, k).into_vec();
    kept.sort_unstable();
    Ok(AtomMask { kept, ratio: r })
}
