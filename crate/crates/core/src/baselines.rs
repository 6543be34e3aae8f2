//! Comparison pretraining objectives on the same encoder.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::autodiff::{Bound, Graph, Mlp, NodeId, OptimizerState, ParamStore, Tensor};
use crate::backbone::{pair_sum_on, Encoder, EncoderConfig, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::geom::{
    elements::MAX_ATOMIC_NUMBER, pairwise_distances, perturb_coordinates, GeometryPair, MoleculeGeometry,
    DEFAULT_COORD_SIGMA,
};

/// Atomic-number classes predicted by the type head (`Z − 1`).
pub const TYPE_CLASSES: usize = MAX_ATOMIC_NUMBER as usize;
pub const DEFAULT_TYPE_MASK_RATIO: f64 = 0.15;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    DistancePred,
    TypePred,
    Rr,
    InfoNce,
    EbmNce,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::DistancePred,
        BaselineKind::TypePred,
        BaselineKind::Rr,
        BaselineKind::InfoNce,
        BaselineKind::EbmNce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::DistancePred => "distance_pred",
            BaselineKind::TypePred => "type_pred",
            BaselineKind::Rr => "rr",
            BaselineKind::InfoNce => "infonce",
            BaselineKind::EbmNce => "ebm_nce",
        }
    }

    /// Whether the loss contrasts molecules within a batch.
    pub fn is_batch_level(self) -> bool {
        matches!(self, BaselineKind::InfoNce | BaselineKind::EbmNce)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Hidden width of the head MLP.
    pub head_hidden: usize,
    pub mask_ratio: f64,
    pub temperature: f64,
    pub coord_sigma: f64,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, encoder: &EncoderConfig) -> Self {
        Self {
            kind,
            head_hidden: encoder.embedding_dim,
            mask_ratio: DEFAULT_TYPE_MASK_RATIO,
            temperature: DEFAULT_TEMPERATURE,
            coord_sigma: DEFAULT_COORD_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid("type mask ratio must lie in (0, 1)"));
        }
        if !(self.coord_sigma >= 0.0 && self.coord_sigma.is_finite()) {
            return Err(Error::invalid("coordinate sigma must be >= 0"));
        }
        if self.head_hidden == 0 {
            return Err(Error::invalid("head width must be positive"));
        }
        Ok(())
    }
}

/// Encoder plus the objective's head (none for InfoNCE).
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub encoder: Encoder,
    pub head: Option<Mlp>,
    pub config: BaselineConfig,
}

impl BaselineModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        encoder: &EncoderConfig,
        config: &BaselineConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let enc = Encoder::new(store, encoder, rng)?;
        let d = encoder.embedding_dim;
        let w = config.head_hidden;
        let widths = match config.kind {
            BaselineKind::DistancePred => Some(vec![d, w, 1]),
            BaselineKind::TypePred => Some(vec![d, w, TYPE_CLASSES]),
            BaselineKind::Rr => Some(vec![d, w, d]),
            BaselineKind::InfoNce => None,
            BaselineKind::EbmNce => Some(vec![2 * d, w, 1]),
        };
        let head = widths.map(|w| Mlp::new(store, "head", &w, true, rng)).transpose()?;
        Ok(Self {
            encoder: enc,
            head,
            config: config.clone(),
        })
    }

    pub fn head(&self) -> Result<&Mlp> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} has no head", self.config.kind)))
    }
}

/// Mean readout as a `1 × D` row.
pub fn readout_on(g: &mut Graph, h: NodeId) -> Result<NodeId> {
    let d = g.shape(h)[1];
    let mean = g.mean_over_rows(h)?;
    g.reshape(mean, &[1, d])
}

fn sum_diagonal(g: &mut Graph, m: NodeId) -> Result<NodeId> {
    let b = g.shape(m)[0];
    let mut eye = Tensor::zeros(&[b, b]);
    for k in 0..b {
        eye.data_mut()[k * b + k] = 1.0;
    }
    let eye = g.constant(eye);
    let diag = g.mul(m, eye)?;
    g.sum(diag)
}

/// Mean squared error of the head on `h_ij` against `d_ij`.
pub fn loss_distance_pred_on(
    g: &mut Graph,
    p: &Bound,
    model: &BaselineModel,
    mol: &MoleculeGeometry,
) -> Result<NodeId> {
    let ds = pairwise_distances(mol, model.encoder.config().cutoff);
    if ds.is_empty() {
        return Err(Error::Degenerate("distance prediction needs at least one pair".into()));
    }
    let h = model.encoder.encode_on(g, p, mol, None)?;
    let left: Vec<usize> = ds.pairs.iter().map(|q| q.i).collect();
    let right: Vec<usize> = ds.pairs.iter().map(|q| q.j).collect();
    let hij = pair_sum_on(g, h, &left, &right)?;
    let pred = model.head()?.forward(g, p, hij)?;
    let pred = g.reshape(pred, &[ds.len()])?;
    distance_mse(g, pred, &ds.distances())
}

/// `mean_k (pred_k − d_k)²`.
pub fn distance_mse(g: &mut Graph, pred: NodeId, distances: &[f64]) -> Result<NodeId> {
    let target = g.constant(Tensor::vector(distances.to_vec()));
    let r = g.sub(pred, target)?;
    let q = g.square(r)?;
    g.mean(q)
}

/// `⌈ratio·n⌉` atoms, at least one and at most `n`.
pub fn masked_type_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Cross-entropy of the type head at masked atoms, whose embeddings are
/// replaced by the mask token.
pub fn loss_type_pred_on<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    model: &BaselineModel,
    mol: &MoleculeGeometry,
    mask_ratio: f64,
    rng: &mut R,
) -> Result<NodeId> {
    let n = mol.len();
    if n == 0 {
        return Err(Error::invalid("type prediction needs atoms"));
    }
    let mut masked = rand::seq::index::sample(rng, n, masked_type_count(n, mask_ratio)).into_vec();
    masked.sort_unstable();
    let mut types = mol.atom_types().to_vec();
    for &k in &masked {
        types[k] = MASK_TOKEN;
    }
    let ds = pairwise_distances(mol, model.encoder.config().cutoff);
    let pairs: Vec<(usize, usize)> = ds.pairs.iter().map(|q| (q.i, q.j)).collect();
    let dist = g.constant(Tensor::vector(ds.distances()));
    let h = model.encoder.forward(g, p, &types, &pairs, dist)?;
    let hm = g.gather_rows(h, &masked)?;
    let logits = model.head()?.forward(g, p, hm)?;
    let classes: Vec<usize> = masked.iter().map(|&k| mol.atom_types()[k] as usize - 1).collect();
    type_cross_entropy(g, logits, &classes)
}

/// Mean over rows of `−log softmax(logits)[class]`.
pub fn type_cross_entropy(g: &mut Graph, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != classes.len() || classes.iter().any(|&c| c >= shape[1]) {
        return Err(Error::shape(format!("logits {shape:?} for {} labels", classes.len())));
    }
    let mut onehot = Tensor::zeros(&shape);
    for (r, &c) in classes.iter().enumerate() {
        onehot.data_mut()[r * shape[1] + c] = 1.0;
    }
    let ls = g.log_softmax_rows(logits)?;
    let oh = g.constant(onehot);
    let picked = g.mul(ls, oh)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / classes.len() as f64)
}

/// `‖predict(za) − stopgrad(zb)‖²` for `1 × D` readouts.
pub fn rr_direction<F>(g: &mut Graph, za: NodeId, zb: NodeId, predict: &F) -> Result<NodeId>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let pred = predict(g, za)?;
    let target = g.detach(zb);
    let r = g.sub(pred, target)?;
    let q = g.square(r)?;
    g.sum(q)
}

/// Mean of the two reconstruction directions.
pub fn rr_symmetric<F>(g: &mut Graph, z1: NodeId, z2: NodeId, predict: &F) -> Result<NodeId>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let a = rr_direction(g, z1, z2, predict)?;
    let b = rr_direction(g, z2, z1, predict)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}

pub fn loss_rr_on(g: &mut Graph, p: &Bound, model: &BaselineModel, pair: &GeometryPair) -> Result<NodeId> {
    let h1 = model.encoder.encode_on(g, p, &pair.g1, None)?;
    let h2 = model.encoder.encode_on(g, p, &pair.g2, None)?;
    let z1 = readout_on(g, h1)?;
    let z2 = readout_on(g, h2)?;
    let head = model.head()?;
    rr_symmetric(g, z1, z2, &|g: &mut Graph, x| head.forward(g, p, x))
}

/// Symmetric cross-entropy over cosine-similarity logits `/ temperature`;
/// row `k` of `z1` and `z2` are the positive pair.
pub fn infonce_from_readouts(g: &mut Graph, z1: NodeId, z2: NodeId, temperature: f64) -> Result<NodeId> {
    let b = g.shape(z1)[0];
    if b < 2 {
        return Err(Error::invalid(format!("InfoNCE needs a batch of at least 2, got {b}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let n1 = g.normalize_rows(z1)?;
    let n2 = g.normalize_rows(z2)?;
    let n2t = g.transpose(n2)?;
    let sim = g.matmul(n1, n2t)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let forward = g.log_softmax_rows(logits)?;
    let lt = g.transpose(logits)?;
    let backward = g.log_softmax_rows(lt)?;
    let both = g.add(forward, backward)?;
    let diag = sum_diagonal(g, both)?;
    g.scale(diag, -0.5 / b as f64)
}

/// Stacks the readouts of a batch into `B × D`.
fn batch_readouts(g: &mut Graph, p: &Bound, encoder: &Encoder, mols: &[&MoleculeGeometry]) -> Result<NodeId> {
    let rows = mols
        .iter()
        .map(|m| {
            let h = encoder.encode_on(g, p, m, None)?;
            readout_on(g, h)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&rows, 0)
}

pub fn loss_infonce_on(g: &mut Graph, p: &Bound, model: &BaselineModel, batch: &[GeometryPair]) -> Result<NodeId> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!(
            "InfoNCE needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    let v1: Vec<&MoleculeGeometry> = batch.iter().map(|q| &q.g1).collect();
    let v2: Vec<&MoleculeGeometry> = batch.iter().map(|q| &q.g2).collect();
    let z1 = batch_readouts(g, p, &model.encoder, &v1)?;
    let z2 = batch_readouts(g, p, &model.encoder, &v2)?;
    infonce_from_readouts(g, z1, z2, model.config.temperature)
}

/// A uniformly random permutation of `0..n` without fixed points.
pub fn sample_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::invalid("a derangement needs at least 2 elements"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(k, &v)| k != v) {
            return Ok(perm);
        }
    }
}

/// Logistic discrimination of matched against shuffled view pairs.
///
/// `critic` maps `B × 2D` concatenations to `B × 1` scores. Direction 1
/// scores `(z1, z2)` against `(z1[perm], z2)`, direction 2 scores `(z2, z1)`
/// against `(z2[perm], z1)`; each contributes
/// `−½(mean log(1 − σ(f_neg)) + mean log σ(f_pos))`.
pub fn ebm_nce_from_readouts<F>(g: &mut Graph, z1: NodeId, z2: NodeId, perm: &[usize], critic: &F) -> Result<NodeId>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let b = g.shape(z1)[0];
    if b < 2 || perm.len() != b {
        return Err(Error::invalid(format!(
            "EBM-NCE needs a batch of at least 2 and a matching shuffle, got {b}"
        )));
    }
    let direction = |za: NodeId, zb: NodeId, g: &mut Graph| -> Result<NodeId> {
        let pos_in = g.concat(&[za, zb], 1)?;
        let shuffled = g.gather_rows(za, perm)?;
        let neg_in = g.concat(&[shuffled, zb], 1)?;
        let f_pos = critic(g, pos_in)?;
        let f_neg = critic(g, neg_in)?;
        // −log σ(x) = softplus(−x), −log(1 − σ(x)) = softplus(x)
        let neg_pos = g.scale(f_pos, -1.0)?;
        let lp = g.softplus(neg_pos)?;
        let ln = g.softplus(f_neg)?;
        let lp = g.mean(lp)?;
        let ln = g.mean(ln)?;
        let s = g.add(lp, ln)?;
        g.scale(s, 0.5)
    };
    let a = direction(z1, z2, g)?;
    let b = direction(z2, z1, g)?;
    g.add(a, b)
}

pub fn loss_ebm_nce_on<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    model: &BaselineModel,
    batch: &[GeometryPair],
    rng: &mut R,
) -> Result<NodeId> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!(
            "EBM-NCE needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    let v1: Vec<&MoleculeGeometry> = batch.iter().map(|q| &q.g1).collect();
    let v2: Vec<&MoleculeGeometry> = batch.iter().map(|q| &q.g2).collect();
    let z1 = batch_readouts(g, p, &model.encoder, &v1)?;
    let z2 = batch_readouts(g, p, &model.encoder, &v2)?;
    let perm = sample_derangement(batch.len(), rng)?;
    let head = model.head()?;
    ebm_nce_from_readouts(g, z1, z2, &perm, &|g: &mut Graph, x| head.forward(g, p, x))
}

/// Batch objective for `model.config.kind`: per-molecule losses are
/// averaged, batch-level losses use the whole batch as negatives.
pub fn baseline_loss_on(
    g: &mut Graph,
    p: &Bound,
    model: &BaselineModel,
    batch: &[MoleculeGeometry],
    rng: &mut dyn RngCore,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let kind = model.config.kind;
    let pairs = |rng: &mut dyn RngCore| {
        batch
            .iter()
            .map(|m| perturb_coordinates(m, model.config.coord_sigma, rng))
            .collect::<Result<Vec<_>>>()
    };
    match kind {
        BaselineKind::InfoNce => {
            let pairs = pairs(rng)?;
            loss_infonce_on(g, p, model, &pairs)
        }
        BaselineKind::EbmNce => {
            let pairs = pairs(rng)?;
            loss_ebm_nce_on(g, p, model, &pairs, rng)
        }
        _ => {
            let mut sum: Option<NodeId> = None;
            for mol in batch {
                let loss = match kind {
                    BaselineKind::DistancePred => loss_distance_pred_on(g, p, model, mol)?,
                    BaselineKind::TypePred => loss_type_pred_on(g, p, model, mol, model.config.mask_ratio, rng)?,
                    _ => {
                        let pair = perturb_coordinates(mol, model.config.coord_sigma, rng)?;
                        loss_rr_on(g, p, model, &pair)?
                    }
                };
                sum = Some(match sum {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            g.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64)
        }
    }
}

/// One optimizer step on [`baseline_loss_on`]; returns the pre-update loss.
pub fn baseline_step(
    model: &BaselineModel,
    params: &mut ParamStore,
    optimizer: &mut OptimizerState,
    batch: &[MoleculeGeometry],
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let loss = baseline_loss_on(&mut g, &p, model, batch, rng)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).item();
    optimizer.adam_step(params, &p.gradients(&g, &grads), lr)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embedding_dim: 6,
            num_layers: 2,
            rbf_count: 5,
            ..EncoderConfig::default()
        }
    }

    fn model(kind: BaselineKind, store: &mut ParamStore) -> BaselineModel {
        let enc = small();
        BaselineModel::new(
            store,
            &enc,
            &BaselineConfig::new(kind, &enc),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap()
    }

    fn zero_head(store: &mut ParamStore, m: &BaselineModel) {
        for id in m.head.as_ref().unwrap().param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn mol() -> MoleculeGeometry {
        MoleculeGeometry::new(vec![6, 8, 1], vec![[0.0; 3], [1.2, 0.0, 0.0], [-0.4, 0.9, 0.1]]).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("angle".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn distance_pred_with_zero_head() {
        let mut store = ParamStore::new();
        let m = model(BaselineKind::DistancePred, &mut store);
        zero_head(&mut store, &m);
        let two = MoleculeGeometry::new(vec![6, 6], vec![[0.0; 3], [0.0, 2.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let l = loss_distance_pred_on(&mut g, &p, &m, &two).unwrap();
        assert!((g.value(l).item() - 4.0).abs() < 1e-12);

        let pred = g.constant(Tensor::vector(vec![1.5, 2.5]));
        let perfect = distance_mse(&mut g, pred, &[1.5, 2.5]).unwrap();
        assert_eq!(g.value(perfect).item(), 0.0);

        let one = MoleculeGeometry::new(vec![6], vec![[0.0; 3]]).unwrap();
        assert!(loss_distance_pred_on(&mut g, &p, &m, &one).is_err());
    }

    #[test]
    fn type_pred_uniform_logits() {
        let mut store = ParamStore::new();
        let m = model(BaselineKind::TypePred, &mut store);
        zero_head(&mut store, &m);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = loss_type_pred_on(&mut g, &p, &m, &mol(), 0.15, &mut rng).unwrap();
        assert!((g.value(l).item() - (TYPE_CLASSES as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn type_pred_confident_logits() {
        let mut g = Graph::new();
        let mut logits = Tensor::zeros(&[2, TYPE_CLASSES]);
        logits.data_mut()[5] = 60.0;
        logits.data_mut()[TYPE_CLASSES + 7] = 60.0;
        let l = g.constant(logits);
        let ce = type_cross_entropy(&mut g, l, &[5, 7]).unwrap();
        assert!(g.value(ce).item() < 1e-20);
        assert_eq!(masked_type_count(3, 0.15), 1);
        assert_eq!(masked_type_count(20, 0.15), 3);
    }

    #[test]
    fn rr_identity_and_stop_gradient() {
        let mut g = Graph::new();
        let z = g.variable(Tensor::matrix(1, 3, vec![0.2, -1.0, 0.5]).unwrap());
        let zero = rr_symmetric(&mut g, z, z, &|_g: &mut Graph, x| Ok(x)).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);

        let u = g.variable(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let v = g.variable(Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap());
        let l = rr_direction(&mut g, u, v, &|_g: &mut Graph, x| Ok(x)).unwrap();
        assert!((g.value(l).item() - 9.25).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(&g, v).data().iter().all(|&x| x == 0.0));
        assert_eq!(grads.wrt(&g, u).data(), &[1.0, 6.0]);
    }

    #[test]
    fn infonce_examples() {
        let mut g = Graph::new();
        let same = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let l = infonce_from_readouts(&mut g, same, same, 0.1).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-10);

        let z1 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap());
        let l = infonce_from_readouts(&mut g, z1, z1, 0.1).unwrap();
        let want = (1.0 + (-20f64).exp()).ln();
        assert!((g.value(l).item() - want).abs() < 1e-14);
        let single = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(infonce_from_readouts(&mut g, single, single, 0.1).is_err());
    }

    #[test]
    fn ebm_nce_zero_critic() {
        let mut g = Graph::new();
        let z1 = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 0.3, -1.0, 0.0, 4.0]).unwrap());
        let z2 = g.constant(Tensor::matrix(3, 2, vec![0.5, 2.0, 1.3, -1.0, 2.0, 0.0]).unwrap());
        let zero = |g: &mut Graph, x: NodeId| {
            let rows = g.shape(x)[0];
            let s = g.scale(x, 0.0)?;
            let c = g.sum_rows(s)?;
            g.reshape(c, &[rows, 1])
        };
        let l = ebm_nce_from_readouts(&mut g, z1, z2, &[1, 2, 0], &zero).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 2..8 {
            let p = sample_derangement(n, &mut rng).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(k, &v)| k != v));
        }
        assert_eq!(sample_derangement(2, &mut rng).unwrap(), vec![1, 0]);
        assert!(sample_derangement(1, &mut rng).is_err());
    }

    #[test]
    fn every_kind_trains_one_step() {
        let batch = vec![mol(), mol().permute(&[2, 0, 1]).unwrap()];
        for kind in BaselineKind::ALL {
            let mut store = ParamStore::new();
            let m = model(kind, &mut store);
            let mut opt = OptimizerState::new(&store);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let loss = baseline_step(&m, &mut store, &mut opt, &batch, 1e-3, &mut rng).unwrap();
            assert!(loss.is_finite() && loss >= 0.0, "{kind}: {loss}");
        }
    }
}
