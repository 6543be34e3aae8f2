//! SchNet-style continuous-filter convolution encoder.
//!
//! Atom embeddings are refined by `num_layers` interaction blocks. Each block
//! expands neighbor distances in a Gaussian radial basis, turns the expansion
//! into per-pair filters with a small network, multiplies neighbor features
//! by those filters, sums them per atom, and adds the transformed sum back
//! as a residual. Coordinates enter only through pairwise distances, so the
//! embeddings are invariant to rotations and translations.

use rand::Rng;

use crate::autodiff::{glorot, Bound, Graph, Linear, Mlp, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geom::{elements::MAX_ATOMIC_NUMBER, pairwise_distances, AtomMask, DistanceSet, MoleculeGeometry};

/// Embedding row reserved for masked atoms; real elements use rows `1..=118`.
pub const MASK_TOKEN: u8 = 0;
pub const EMBEDDING_ROWS: usize = MAX_ATOMIC_NUMBER as usize + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub rbf_count: usize,
    /// Å⁻²
    pub rbf_gamma: f64,
    /// Last RBF center, Å. Centers are evenly spaced on `[0, rbf_max]`.
    pub rbf_max: f64,
    /// Neighbor cutoff in Å; `None` connects every pair.
    pub cutoff: Option<f64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            num_layers: 3,
            rbf_count: 32,
            rbf_gamma: 10.0,
            rbf_max: 10.0,
            cutoff: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.num_layers == 0 || self.rbf_count == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if !(self.rbf_gamma > 0.0 && self.rbf_gamma.is_finite()) {
            return Err(Error::invalid("rbf_gamma must be positive"));
        }
        if !(self.rbf_max > 0.0 && self.rbf_max.is_finite()) {
            return Err(Error::invalid("rbf_max must be positive"));
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("cutoff must be positive"));
            }
        }
        Ok(())
    }

    pub fn rbf_centers(&self) -> Vec<f64> {
        if self.rbf_count == 1 {
            return vec![0.0];
        }
        let step = self.rbf_max / (self.rbf_count - 1) as f64;
        (0..self.rbf_count).map(|k| k as f64 * step).collect()
    }
}

#[derive(Debug, Clone)]
struct Interaction {
    filter: Mlp,
    in_to_filter: Linear,
    update: Mlp,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    centers: Vec<f64>,
    embedding: ParamId,
    interactions: Vec<Interaction>,
    output: Mlp,
}

impl Encoder {
    /// Registers the encoder parameters under `encoder.*`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embedding_dim;
        let k = config.rbf_count;
        let embedding = store.add("encoder.embedding", glorot(EMBEDDING_ROWS, d, rng))?;
        let interactions = (0..config.num_layers)
            .map(|t| {
                Ok(Interaction {
                    filter: Mlp::new(store, &format!("encoder.interaction{t}.filter"), &[k, d, d], true, rng)?,
                    in_to_filter: Linear::new(store, &format!("encoder.interaction{t}.in2f"), d, d, false, rng)?,
                    // bias-free with ssp(0) = 0, so an isolated atom keeps its embedding
                    update: Mlp::new(store, &format!("encoder.interaction{t}.update"), &[d, d, d], false, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let output = Mlp::new(store, "encoder.output", &[d, d, d], true, rng)?;
        Ok(Self {
            config: config.clone(),
            centers: config.rbf_centers(),
            embedding,
            interactions,
            output,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn rbf_centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    /// Node embeddings `n × D` for the given atoms, with `pairs[k]` at the
    /// distance stored in entry `k` of the `distances` vector node.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        atom_types: &[u8],
        pairs: &[(usize, usize)],
        distances: NodeId,
    ) -> Result<NodeId> {
        let n = atom_types.len();
        if n == 0 {
            return Err(Error::Degenerate("no atoms to encode".into()));
        }
        if let Some(z) = atom_types.iter().find(|&&z| z > MAX_ATOMIC_NUMBER) {
            return Err(Error::invalid(format!("atom type {z} outside embedding table")));
        }
        if g.shape(distances) != [pairs.len()] {
            return Err(Error::shape(format!(
                "{} pairs but distances {:?}",
                pairs.len(),
                g.shape(distances)
            )));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n || i == j) {
            return Err(Error::invalid(format!("bad pair ({i}, {j}) for {n} atoms")));
        }

        let rows: Vec<usize> = atom_types.iter().map(|&z| z as usize).collect();
        let mut z = g.gather_rows(p.node(self.embedding), &rows)?;

        if !pairs.is_empty() {
            let np = pairs.len();
            // each unordered pair feeds messages both ways
            let src: Vec<usize> = pairs.iter().map(|p| p.1).chain(pairs.iter().map(|p| p.0)).collect();
            let dst: Vec<usize> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
            let edge_pair: Vec<usize> = (0..np).chain(0..np).collect();
            let expanded = g.rbf(distances, &self.centers, self.config.rbf_gamma)?;

            for block in &self.interactions {
                let filters = block.filter.forward(g, p, expanded)?;
                let filters = g.gather_rows(filters, &edge_pair)?;
                let x = block.in_to_filter.forward(g, p, z)?;
                let xj = g.gather_rows(x, &src)?;
                let messages = g.mul(xj, filters)?;
                let summed = g.scatter_add_rows(messages, &dst, n)?;
                let v = block.update.forward(g, p, summed)?;
                z = g.add(z, v)?;
            }
        }
        self.output.forward(g, p, z)
    }

    /// Embeds the kept atoms of `mol` (all atoms when `mask` is `None`),
    /// with distances as constants on the tape.
    pub fn encode_on(
        &self,
        g: &mut Graph,
        p: &Bound,
        mol: &MoleculeGeometry,
        mask: Option<&AtomMask>,
    ) -> Result<NodeId> {
        let kept = match mask {
            Some(m) => mol.subset(m)?,
            None => mol.clone(),
        };
        let ds = pairwise_distances(&kept, self.config.cutoff);
        let pairs: Vec<(usize, usize)> = ds.pairs.iter().map(|p| (p.i, p.j)).collect();
        let dist = g.constant(Tensor::vector(ds.distances()));
        self.forward(g, p, kept.atom_types(), &pairs, dist)
    }
}

/// One embedding row per (kept) atom.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub h: Tensor,
}

impl NodeEmbeddings {
    pub fn new(h: Tensor) -> Result<Self> {
        if h.rank() != 2 {
            return Err(Error::shape(format!(
                "embeddings must be a matrix, got {:?}",
                h.shape()
            )));
        }
        Ok(Self { h })
    }

    pub fn num_atoms(&self) -> usize {
        self.h.rows()
    }

    pub fn dim(&self) -> usize {
        self.h.row_width()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.h.row(i)
    }
}

/// Inference-only embedding of `mol` under `mask`.
pub fn encode(
    encoder: &Encoder,
    params: &ParamStore,
    mol: &MoleculeGeometry,
    mask: Option<&AtomMask>,
) -> Result<NodeEmbeddings> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let h = encoder.encode_on(&mut g, &p, mol, mask)?;
    NodeEmbeddings::new(g.value(h).clone())
}

/// Mean over atoms.
pub fn readout(h: &NodeEmbeddings) -> Result<Vec<f64>> {
    let n = h.num_atoms();
    if n == 0 {
        return Err(Error::Degenerate("readout of an empty embedding set".into()));
    }
    let mut out = vec![0.0; h.dim()];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(h.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// `h_ij = h_i + h_j` for every stored pair, in pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRepresentation {
    pub pairs: Vec<(usize, usize)>,
    pub vectors: Tensor,
}

pub fn pair_representation(h: &NodeEmbeddings, pairs: &DistanceSet) -> Result<PairRepresentation> {
    let n = h.num_atoms();
    let d = h.dim();
    let mut data = Vec::with_capacity(pairs.len() * d);
    for p in &pairs.pairs {
        if p.i >= n || p.j >= n {
            return Err(Error::invalid(format!(
                "pair ({}, {}) out of range for {n} atoms",
                p.i, p.j
            )));
        }
        data.extend(h.row(p.i).iter().zip(h.row(p.j)).map(|(a, b)| a + b));
    }
    Ok(PairRepresentation {
        pairs: pairs.pairs.iter().map(|p| (p.i, p.j)).collect(),
        vectors: Tensor::new(vec![pairs.len(), d], data)?,
    })
}

/// Tape version of [`pair_representation`] over explicit index lists.
pub fn pair_sum_on(g: &mut Graph, h: NodeId, left: &[usize], right: &[usize]) -> Result<NodeId> {
    let hi = g.gather_rows(h, left)?;
    let hj = g.gather_rows(h, right)?;
    g.add(hi, hj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_rigid_transform, DistancePair, RigidTransform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embedding_dim: 8,
            num_layers: 2,
            rbf_count: 6,
            ..EncoderConfig::default()
        }
    }

    fn setup(config: &EncoderConfig) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, config, &mut rng).unwrap();
        (store, enc)
    }

    fn molecule() -> MoleculeGeometry {
        MoleculeGeometry::new(
            vec![6, 8, 1, 1],
            vec![[0.0, 0.0, 0.0], [1.2, 0.1, 0.0], [-0.5, 0.9, 0.2], [-0.4, -0.9, -0.3]],
        )
        .unwrap()
    }

    #[test]
    fn centers_evenly_spaced() {
        let c = EncoderConfig::default().rbf_centers();
        assert_eq!(c.len(), 32);
        assert_eq!(c[0], 0.0);
        assert!((c[31] - 10.0).abs() < 1e-12);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn single_atom_is_output_mlp_of_embedding() {
        let (store, enc) = setup(&small());
        let mol = MoleculeGeometry::new(vec![8], vec![[1.0, 2.0, 3.0]]).unwrap();
        let h = encode(&enc, &store, &mol, None).unwrap();

        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let row = g.gather_rows(p.node(enc.embedding), &[8]).unwrap();
        let want = enc.output.forward(&mut g, &p, row).unwrap();
        assert_eq!(h.h.data(), g.value(want).data());
    }

    #[test]
    fn rigid_motion_invariance() {
        let (store, enc) = setup(&small());
        let mol = molecule();
        let base = encode(&enc, &store, &mol, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t = RigidTransform::random(&mut rng, 3.0);
            let moved = encode(&enc, &store, &apply_rigid_transform(&mol, &t), None).unwrap();
            for (a, b) in base.h.data().iter().zip(moved.h.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (store, enc) = setup(&small());
        let mol = molecule();
        let perm = [2, 0, 3, 1];
        let base = encode(&enc, &store, &mol, None).unwrap();
        let permuted = encode(&enc, &store, &mol.permute(&perm).unwrap(), None).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            for (a, b) in base.row(old).iter().zip(permuted.row(new)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let ra = readout(&base).unwrap();
        let rb = readout(&permuted).unwrap();
        assert!(ra.iter().zip(&rb).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn masked_atoms_contribute_nothing() {
        let (store, enc) = setup(&small());
        let mol = molecule();
        let mask = AtomMask::from_indices(vec![0, 1, 3], 0.25).unwrap();
        let a = encode(&enc, &store, &mol, Some(&mask)).unwrap();
        // moving the dropped atom anywhere changes nothing
        let mut coords = mol.coords().to_vec();
        coords[2] = [40.0, -3.0, 7.0];
        let b = encode(&enc, &store, &mol.with_coords(coords).unwrap(), Some(&mask)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_atoms(), 3);
    }

    #[test]
    fn cutoff_locality() {
        let config = EncoderConfig {
            cutoff: Some(5.0),
            ..small()
        };
        let (store, enc) = setup(&config);
        let mut coords = molecule().coords().to_vec();
        coords[3] = [20.0, 0.0, 0.0];
        let far = MoleculeGeometry::new(vec![6, 8, 1, 1], coords.clone()).unwrap();
        coords[3] = [0.0, -30.0, 9.0];
        let elsewhere = MoleculeGeometry::new(vec![6, 8, 1, 1], coords).unwrap();
        let a = encode(&enc, &store, &far, None).unwrap();
        let b = encode(&enc, &store, &elsewhere, None).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn readout_examples() {
        let one = NodeEmbeddings::new(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(readout(&one).unwrap(), vec![1.0, 2.0, 3.0]);
        let opposite = NodeEmbeddings::new(Tensor::matrix(2, 2, vec![0.5, -1.5, -0.5, 1.5]).unwrap()).unwrap();
        assert_eq!(readout(&opposite).unwrap(), vec![0.0, 0.0]);
        let base = NodeEmbeddings::new(Tensor::matrix(2, 2, vec![1.0, 4.0, 3.0, -2.0]).unwrap()).unwrap();
        let doubled =
            NodeEmbeddings::new(Tensor::matrix(4, 2, vec![1.0, 4.0, 3.0, -2.0, 1.0, 4.0, 3.0, -2.0]).unwrap()).unwrap();
        assert_eq!(readout(&base).unwrap(), readout(&doubled).unwrap());
        let empty = NodeEmbeddings::new(Tensor::zeros(&[0, 2])).unwrap();
        assert!(readout(&empty).is_err());
    }

    #[test]
    fn pair_representation_examples() {
        let v = [0.25, -1.0];
        let h = NodeEmbeddings::new(Tensor::matrix(3, 2, vec![v[0], v[1], v[0], v[1], 0.0, 0.0]).unwrap()).unwrap();
        let ds = |i, j| DistanceSet {
            pairs: vec![DistancePair { i, j, d: 1.0 }],
            cutoff: None,
        };
        assert_eq!(pair_representation(&h, &ds(0, 1)).unwrap().vectors.data(), &[0.5, -2.0]);
        assert_eq!(
            pair_representation(&h, &ds(0, 2)).unwrap().vectors,
            pair_representation(&h, &ds(2, 0)).unwrap().vectors
        );
        assert_eq!(pair_representation(&h, &ds(2, 1)).unwrap().vectors.data(), &v);
        assert!(pair_representation(&h, &ds(0, 3)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let config = EncoderConfig {
            embedding_dim: 4,
            num_layers: 2,
            rbf_count: 5,
            rbf_gamma: 0.5,
            rbf_max: 3.0,
            cutoff: None,
        };
        let (store, enc) = setup(&config);
        let mol = molecule();
        let ds = pairwise_distances(&mol, None);
        let pairs: Vec<(usize, usize)> = ds.pairs.iter().map(|p| (p.i, p.j)).collect();
        let mut inputs = store.tensors().to_vec();
        // perturb the zero biases so their gradients are generic
        for (k, t) in inputs.iter_mut().enumerate() {
            for (m, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((k * 7 + m) as f64).sin();
            }
        }
        inputs.push(Tensor::vector(ds.distances()));
        let np = store.len();
        let err = crate::autodiff::finite_diff_check(&inputs, 1e-5, |g, leaves| {
            let p = Bound::from_nodes(leaves[..np].to_vec());
            let h = enc.forward(g, &p, mol.atom_types(), &pairs, leaves[np])?;
            let sq = g.square(h)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_types_outside_table() {
        let (store, enc) = setup(&small());
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let d = g.constant(Tensor::vector(vec![]));
        assert!(enc.forward(&mut g, &p, &[119], &[], d).is_err());
        let d = g.constant(Tensor::vector(vec![1.0]));
        assert!(enc.forward(&mut g, &p, &[MASK_TOKEN, 6], &[(0, 1)], d).is_ok());
    }
}
