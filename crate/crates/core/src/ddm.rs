//! Multi-level denoising distance matching.
//!
//! Every pairwise distance of one view is perturbed at each level of a
//! geometric noise ladder, and a score network conditioned on the other
//! view's pair representations learns the closed-form denoising score
//! `(d − d̃)/σ²`. Both views take a turn as the denoised one; the two
//! directions share all parameters.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::autodiff::{Bound, Graph, Mlp, NodeId, OptimizerState, ParamStore, Tensor};
use crate::backbone::{pair_sum_on, Encoder, EncoderConfig, PairRepresentation};
use crate::error::{Error, Result};
use crate::geom::{
    pairwise_distances, perturb_coordinates, sample_atom_mask, AtomMask, DistanceSet, GeometryPair, MoleculeGeometry,
    DEFAULT_COORD_SIGMA,
};

pub const DEFAULT_LEVELS: usize = 50;
pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_SIGMA_MAX: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 0.2;

/// Geometric ladder `σ_1 < … < σ_L` with level weights `σ_l^β`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    beta: f64,
}

impl NoiseSchedule {
    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_max(&self) -> f64 {
        *self.sigmas.last().expect("non-empty ladder")
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `σ_l` for a 1-based level.
    pub fn sigma(&self, level: usize) -> Result<f64> {
        if level == 0 || level > self.levels() {
            return Err(Error::invalid(format!("level {level} outside 1..={}", self.levels())));
        }
        Ok(self.sigmas[level - 1])
    }

    /// `λ(σ_l) = σ_l^β` for a 1-based level.
    pub fn weight(&self, level: usize) -> Result<f64> {
        Ok(self.sigma(level)?.powf(self.beta))
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        build_schedule(self.levels(), self.sigma_min(), self.sigma_max(), beta)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_LEVELS, DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX, DEFAULT_BETA).expect("valid defaults")
    }
}

pub fn build_schedule(levels: usize, sigma_min: f64, sigma_max: f64, beta: f64) -> Result<NoiseSchedule> {
    if levels == 0 {
        return Err(Error::invalid("noise ladder needs at least one level"));
    }
    if !(sigma_min > 0.0 && sigma_min.is_finite() && sigma_max.is_finite() && sigma_min <= sigma_max) {
        return Err(Error::invalid(format!(
            "need 0 < sigma_min <= sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if !beta.is_finite() {
        return Err(Error::invalid("beta must be finite"));
    }
    let sigmas = if levels == 1 {
        if sigma_min != sigma_max {
            return Err(Error::invalid("a single-level ladder needs sigma_min == sigma_max"));
        }
        vec![sigma_min]
    } else {
        if sigma_min == sigma_max {
            return Err(Error::invalid("a multi-level ladder needs sigma_min < sigma_max"));
        }
        let ratio = sigma_max / sigma_min;
        let mut s: Vec<f64> = (0..levels)
            .map(|l| sigma_min * ratio.powf(l as f64 / (levels - 1) as f64))
            .collect();
        s[0] = sigma_min;
        s[levels - 1] = sigma_max;
        s
    };
    if sigmas.iter().any(|s| !s.powf(beta).is_finite()) {
        return Err(Error::invalid("level weights overflow"));
    }
    Ok(NoiseSchedule { sigmas, beta })
}

/// How perturbed distances are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// `d̃ = d + σ_l·ε`, `ε ~ N(0, 1)` per pair.
    #[default]
    Gaussian,
    /// `d̃ = d + σ_l` for every pair; consumes no randomness.
    LiteralShift,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedPair {
    pub i: usize,
    pub j: usize,
    pub d: f64,
    /// Not clamped; may be negative at large σ.
    pub d_tilde: f64,
    pub level: usize,
}

/// One level's perturbation of a distance set, in the set's pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedDistances {
    pub pairs: Vec<PerturbedPair>,
    pub sigma: f64,
}

impl PerturbedDistances {
    /// Perturbation with explicit offsets `d̃ = d + offsets[k]`.
    pub fn with_offsets(d: &DistanceSet, level: usize, schedule: &NoiseSchedule, offsets: &[f64]) -> Result<Self> {
        let sigma = schedule.sigma(level)?;
        if offsets.len() != d.len() {
            return Err(Error::shape(format!("{} offsets for {} pairs", offsets.len(), d.len())));
        }
        let pairs = d
            .pairs
            .iter()
            .zip(offsets)
            .map(|(p, &o)| PerturbedPair {
                i: p.i,
                j: p.j,
                d: p.d,
                d_tilde: p.d + o,
                level,
            })
            .collect();
        Ok(Self { pairs, sigma })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn perturb_distances<R: Rng + ?Sized>(
    d: &DistanceSet,
    level: usize,
    schedule: &NoiseSchedule,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<PerturbedDistances> {
    let sigma = schedule.sigma(level)?;
    let offsets: Vec<f64> = match mode {
        NoiseMode::Gaussian => (0..d.len())
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        NoiseMode::LiteralShift => vec![sigma; d.len()],
    };
    PerturbedDistances::with_offsets(d, level, schedule, &offsets)
}

/// `(d − d̃)/σ²`.
pub fn dsm_target(d: f64, d_tilde: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    Ok((d - d_tilde) / (sigma * sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetConfig {
    /// Hidden widths of the MLP on the RBF-expanded perturbed distance; the
    /// last entry is its output width.
    pub distance_widths: Vec<usize>,
    /// Hidden widths of the fusion MLP; its output is one scalar.
    pub fusion_widths: Vec<usize>,
}

impl ScoreNetConfig {
    pub fn for_encoder(encoder: &EncoderConfig) -> Self {
        let d = encoder.embedding_dim;
        Self {
            distance_widths: vec![d, d],
            fusion_widths: vec![d],
        }
    }
}

/// `s(d̃, h_ij) = MLP(MLP(rbf(d̃)) ⊕ h_ij)`.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    distance: Mlp,
    fusion: Mlp,
    centers: Vec<f64>,
    gamma: f64,
    pair_dim: usize,
}

impl ScoreNet {
    /// Registers parameters under `score.*`; the RBF basis is the encoder's.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ScoreNetConfig,
        encoder: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let Some(&branch_out) = config.distance_widths.last() else {
            return Err(Error::invalid("score distance branch needs at least one layer"));
        };
        let mut dw = vec![encoder.rbf_count];
        dw.extend(&config.distance_widths);
        let mut fw = vec![branch_out + encoder.embedding_dim];
        fw.extend(&config.fusion_widths);
        fw.push(1);
        Ok(Self {
            distance: Mlp::new(store, "score.distance", &dw, true, rng)?,
            fusion: Mlp::new(store, "score.fusion", &fw, true, rng)?,
            centers: encoder.rbf_centers(),
            gamma: encoder.rbf_gamma,
            pair_dim: encoder.embedding_dim,
        })
    }

    pub fn param_ids(&self) -> Vec<crate::autodiff::ParamId> {
        let mut ids = self.distance.param_ids();
        ids.extend(self.fusion.param_ids());
        ids
    }

    /// `d_tilde: [R]`, `pair_rep: [P × D]` → scores `[R]`, where `R` is a
    /// multiple of `P` and row `k` belongs to pair `k mod P`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, d_tilde: NodeId, pair_rep: NodeId) -> Result<NodeId> {
        let rows = g.shape(d_tilde).first().copied().unwrap_or(0);
        let np = g.shape(pair_rep).first().copied().unwrap_or(0);
        if g.shape(d_tilde).len() != 1 || g.shape(pair_rep) != [np, self.pair_dim] || np == 0 || rows % np != 0 {
            return Err(Error::shape(format!(
                "score inputs {:?} and {:?}",
                g.shape(d_tilde),
                g.shape(pair_rep)
            )));
        }
        let expanded = g.rbf(d_tilde, &self.centers, self.gamma)?;
        let branch = self.distance.forward(g, p, expanded)?;
        // first fusion layer on [branch ⊕ pair_rep], with the pair half per pair
        let first = &self.fusion.layers[0];
        let bw = self.distance.output_dim();
        let w = p.node(first.weight);
        let w_branch = g.gather_rows(w, &(0..bw).collect::<Vec<_>>())?;
        let w_pair = g.gather_rows(w, &(bw..bw + self.pair_dim).collect::<Vec<_>>())?;
        let from_branch = g.matmul(branch, w_branch)?;
        let mut from_pair = g.matmul(pair_rep, w_pair)?;
        if rows != np {
            from_pair = g.gather_rows(from_pair, &(0..rows).map(|k| k % np).collect::<Vec<_>>())?;
        }
        let mut x = g.add(from_branch, from_pair)?;
        if let Some(b) = first.bias {
            x = g.add_bias(x, p.node(b))?;
        }
        for layer in &self.fusion.layers[1..] {
            x = g.shifted_softplus(x)?;
            x = layer.forward(g, p, x)?;
        }
        g.reshape(x, &[rows])
    }
}

/// Inference-only scores for perturbed distances `d_tilde[k]` at pair `k`.
pub fn score(net: &ScoreNet, params: &ParamStore, d_tilde: &[f64], pair_rep: &PairRepresentation) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let d = g.constant(Tensor::vector(d_tilde.to_vec()));
    let h = g.constant(pair_rep.vectors.clone());
    let s = net.forward(&mut g, &p, d, h)?;
    Ok(g.value(s).data().to_vec())
}

/// Encoder plus score network over one parameter store.
#[derive(Debug, Clone)]
pub struct DdmModel {
    pub encoder: Encoder,
    pub score: ScoreNet,
}

impl DdmModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        encoder: &EncoderConfig,
        score: &ScoreNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let enc = Encoder::new(store, encoder, rng)?;
        let net = ScoreNet::new(store, score, encoder, rng)?;
        Ok(Self {
            encoder: enc,
            score: net,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdmConfig {
    pub schedule: NoiseSchedule,
    pub noise_mode: NoiseMode,
    /// Coordinate noise that builds the second view, Å.
    pub coord_sigma: f64,
    pub mask_ratio: f64,
    /// Add a further independent coordinate perturbation of `coord_sigma`
    /// to each view before it is encoded as the conditioning input.
    pub condition_coord_noise: bool,
}

impl Default for DdmConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            noise_mode: NoiseMode::Gaussian,
            coord_sigma: DEFAULT_COORD_SIGMA,
            mask_ratio: 0.0,
            condition_coord_noise: false,
        }
    }
}

/// The masked views of a pair: the clean distances to denoise and the
/// geometries fed to the encoder as conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct DdmViews {
    pub d1: DistanceSet,
    pub d2: DistanceSet,
    pub cond1: MoleculeGeometry,
    pub cond2: MoleculeGeometry,
}

impl DdmViews {
    pub fn prepare<R: Rng + ?Sized>(
        pair: &GeometryPair,
        mask: &AtomMask,
        config: &DdmConfig,
        cutoff: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let m1 = pair.g1.subset(mask)?;
        let m2 = pair.g2.subset(mask)?;
        if m1.len() < 2 {
            return Err(Error::Degenerate(format!("{} kept atoms leave no pairs", m1.len())));
        }
        let d1 = pairwise_distances(&m1, cutoff);
        let d2 = pairwise_distances(&m2, cutoff);
        if d1.is_empty() || d2.is_empty() {
            return Err(Error::Degenerate("no atom pairs within the cutoff".into()));
        }
        let (cond1, cond2) = if config.condition_coord_noise {
            let c2 = perturb_coordinates(&m2, config.coord_sigma, rng)?.g2;
            let c1 = perturb_coordinates(&m1, config.coord_sigma, rng)?.g2;
            (c1, c2)
        } else {
            (m1, m2)
        };
        Ok(Self { d1, d2, cond1, cond2 })
    }
}

/// Perturbed distances for both directions, one entry per level.
#[derive(Debug, Clone, PartialEq)]
pub struct DdmNoise {
    pub direction_1: Vec<PerturbedDistances>,
    pub direction_2: Vec<PerturbedDistances>,
}

impl DdmNoise {
    /// Direction 1 at every level, then direction 2.
    pub fn sample<R: Rng + ?Sized>(
        views: &DdmViews,
        schedule: &NoiseSchedule,
        mode: NoiseMode,
        rng: &mut R,
    ) -> Result<Self> {
        let mut draw = |d: &DistanceSet| {
            (1..=schedule.levels())
                .map(|l| perturb_distances(d, l, schedule, mode, rng))
                .collect::<Result<Vec<_>>>()
        };
        let direction_1 = draw(&views.d1)?;
        let direction_2 = draw(&views.d2)?;
        Ok(Self {
            direction_1,
            direction_2,
        })
    }

    /// `offset(direction, level, pair)` gives `d̃ − d`; direction and level
    /// are 1-based.
    pub fn from_offsets(
        views: &DdmViews,
        schedule: &NoiseSchedule,
        offset: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let build = |dir: usize, d: &DistanceSet| {
            (1..=schedule.levels())
                .map(|l| {
                    let o: Vec<f64> = (0..d.len()).map(|k| offset(dir, l, k)).collect();
                    PerturbedDistances::with_offsets(d, l, schedule, &o)
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            direction_1: build(1, &views.d1)?,
            direction_2: build(2, &views.d2)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdmLossReport {
    pub total: f64,
    pub direction_1: f64,
    pub direction_2: f64,
    /// `σ_l^β · mean_pairs (s/σ_l − (d − d̃)/σ_l²)²` for each direction; a
    /// direction's value is the sum of its entries over `2L`.
    pub per_level: [Vec<f64>; 2],
}

impl DdmLossReport {
    /// Each level's contribution to `total`; the entries sum to `total`.
    pub fn level_contributions(&self) -> Vec<f64> {
        let denom = 2.0 * self.per_level[0].len() as f64;
        self.per_level[0]
            .iter()
            .zip(&self.per_level[1])
            .map(|(a, b)| (a + b) / denom)
            .collect()
    }
}

struct DirectionTerms {
    loss: NodeId,
    per_level: Vec<f64>,
    scaled_score: Vec<f64>,
    target: Vec<f64>,
    pairs: usize,
}

fn direction_terms(
    g: &mut Graph,
    p: &Bound,
    net: &ScoreNet,
    condition: NodeId,
    levels: &[PerturbedDistances],
    schedule: &NoiseSchedule,
) -> Result<DirectionTerms> {
    let nl = schedule.levels();
    if levels.len() != nl {
        return Err(Error::shape(format!(
            "{} noise levels for a {nl}-level ladder",
            levels.len()
        )));
    }
    let np = levels[0].len();
    if np == 0 {
        return Err(Error::Degenerate("no pairs to denoise".into()));
    }
    let left: Vec<usize> = levels[0].pairs.iter().map(|pp| pp.i).collect();
    let right: Vec<usize> = levels[0].pairs.iter().map(|pp| pp.j).collect();
    let mut d_tilde = Vec::with_capacity(nl * np);
    let mut sigmas = Vec::with_capacity(nl * np);
    let mut target = Vec::with_capacity(nl * np);
    for (k, level) in levels.iter().enumerate() {
        if level.len() != np
            || level
                .pairs
                .iter()
                .zip(&levels[0].pairs)
                .any(|(a, b)| (a.i, a.j) != (b.i, b.j))
        {
            return Err(Error::shape("noise levels disagree on the pair list"));
        }
        let sigma = schedule.sigma(k + 1)?;
        for pp in &level.pairs {
            d_tilde.push(pp.d_tilde);
            sigmas.push(sigma);
            target.push(dsm_target(pp.d, pp.d_tilde, sigma)?);
        }
    }
    let level_weights = (1..=nl)
        .map(|l| Ok(schedule.weight(l)? / (2.0 * nl as f64)))
        .collect::<Result<Vec<_>>>()?;
    let h_pair = pair_sum_on(g, condition, &left, &right)?;
    let dt = g.constant(Tensor::vector(d_tilde));
    let s = net.forward(g, p, dt, h_pair)?;
    let sig = g.constant(Tensor::vector(sigmas));
    let scaled = g.div(s, sig)?;
    let tgt = g.constant(Tensor::vector(target.clone()));
    let r = g.sub(scaled, tgt)?;
    let q = g.square(r)?;
    // level-major rows: [L × P] → [P × L] → per-level means
    let q = g.reshape(q, &[nl, np])?;
    let q = g.transpose(q)?;
    let means = g.mean_over_rows(q)?;
    let wn = g.constant(Tensor::vector(level_weights));
    let weighted = g.mul(means, wn)?;
    let loss = g.sum(weighted)?;

    let per_level = g
        .value(means)
        .data()
        .iter()
        .enumerate()
        .map(|(l, m)| Ok(schedule.weight(l + 1)? * m))
        .collect::<Result<Vec<_>>>()?;
    Ok(DirectionTerms {
        loss,
        per_level,
        scaled_score: g.value(scaled).data().to_vec(),
        target,
        pairs: np,
    })
}

fn both_directions(
    g: &mut Graph,
    p: &Bound,
    model: &DdmModel,
    views: &DdmViews,
    noise: &DdmNoise,
    schedule: &NoiseSchedule,
) -> Result<(DirectionTerms, DirectionTerms)> {
    let h1 = model.encoder.encode_on(g, p, &views.cond1, None)?;
    let h2 = model.encoder.encode_on(g, p, &views.cond2, None)?;
    // denoise d1 given g2, and d2 given g1
    let t1 = direction_terms(g, p, &model.score, h2, &noise.direction_1, schedule)?;
    let t2 = direction_terms(g, p, &model.score, h1, &noise.direction_2, schedule)?;
    Ok((t1, t2))
}

/// Builds the two-direction objective on `g`; returns the scalar loss node.
pub fn ddm_loss_on(
    g: &mut Graph,
    p: &Bound,
    model: &DdmModel,
    views: &DdmViews,
    noise: &DdmNoise,
    schedule: &NoiseSchedule,
) -> Result<(NodeId, DdmLossReport)> {
    let (t1, t2) = both_directions(g, p, model, views, noise, schedule)?;
    let total = g.add(t1.loss, t2.loss)?;
    let direction_1 = g.value(t1.loss).item();
    let direction_2 = g.value(t2.loss).item();
    let report = DdmLossReport {
        total: g.value(total).item(),
        direction_1,
        direction_2,
        per_level: [t1.per_level, t2.per_level],
    };
    Ok((total, report))
}

/// Evaluates the objective for one pair, drawing conditioning and distance
/// noise from `rng`.
pub fn ddm_loss<R: Rng + ?Sized>(
    model: &DdmModel,
    params: &ParamStore,
    pair: &GeometryPair,
    mask: &AtomMask,
    config: &DdmConfig,
    rng: &mut R,
) -> Result<DdmLossReport> {
    let views = DdmViews::prepare(pair, mask, config, model.encoder.config().cutoff, rng)?;
    let noise = DdmNoise::sample(&views, &config.schedule, config.noise_mode, rng)?;
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    Ok(ddm_loss_on(&mut g, &p, model, &views, &noise, &config.schedule)?.1)
}

/// Cosine similarity between `s/σ_l` and the target, taken per pair across
/// levels and averaged over the pairs of both directions.
pub fn score_alignment(
    model: &DdmModel,
    params: &ParamStore,
    views: &DdmViews,
    noise: &DdmNoise,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (t1, t2) = both_directions(&mut g, &p, model, views, noise, schedule)?;
    let nl = schedule.levels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in [&t1, &t2] {
        for k in 0..t.pairs {
            let (mut dot, mut ss, mut tt) = (0.0, 0.0, 0.0);
            for l in 0..nl {
                let a = t.scaled_score[l * t.pairs + k];
                let b = t.target[l * t.pairs + k];
                dot += a * b;
                ss += a * a;
                tt += b * b;
            }
            let denom = (ss * tt).sqrt();
            sum += if denom > 0.0 { dot / denom } else { 0.0 };
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Batch mean of the objective before the update.
    pub loss: f64,
    /// Batch mean of each level's contribution to `loss`.
    pub per_level: Vec<f64>,
}

/// One optimizer step on the batch mean of the objective.
///
/// Molecules are processed sequentially on a single tape, so the result
/// does not depend on thread scheduling.
pub fn pretrain_step(
    model: &DdmModel,
    params: &mut ParamStore,
    optimizer: &mut OptimizerState,
    batch: &[MoleculeGeometry],
    config: &DdmConfig,
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let mut sum: Option<NodeId> = None;
    let mut per_level = vec![0.0; config.schedule.levels()];
    for mol in batch {
        let pair = perturb_coordinates(mol, config.coord_sigma, rng)?;
        let mask = sample_atom_mask(mol.len(), config.mask_ratio, rng)?;
        let views = DdmViews::prepare(&pair, &mask, config, model.encoder.config().cutoff, rng)?;
        let noise = DdmNoise::sample(&views, &config.schedule, config.noise_mode, rng)?;
        let (loss, report) = ddm_loss_on(&mut g, &p, model, &views, &noise, &config.schedule)?;
        for (acc, v) in per_level.iter_mut().zip(report.level_contributions()) {
            *acc += v / batch.len() as f64;
        }
        sum = Some(match sum {
            Some(acc) => g.add(acc, loss)?,
            None => loss,
        });
    }
    let mean = g.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let grads = g.backward(mean)?;
    let loss = g.value(mean).item();
    optimizer.adam_step(params, &p.gradients(&g, &grads), lr)?;
    Ok(StepReport { loss, per_level })
}

/// Per-atom coordinate scores computed two ways.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateScores {
    /// Tape gradient of the scalar with respect to the coordinates.
    pub direct: Vec<[f64; 3]>,
    /// `Σ_{j≠i} (∂f/∂d_ij)·(r_i − r_j)/d_ij` from per-distance gradients.
    pub decomposed: Vec<[f64; 3]>,
}

impl CoordinateScores {
    /// Largest relative discrepancy between the two routes.
    pub fn max_relative_error(&self) -> f64 {
        self.direct
            .iter()
            .flatten()
            .zip(self.decomposed.iter().flatten())
            .map(|(&a, &b)| crate::autodiff::relative_error(a, b))
            .fold(0.0, f64::max)
    }
}

/// `head` maps the vector of all pairwise distances (ordered by `(i, j)`,
/// `i < j`) to a scalar node.
pub fn coordinate_score_oracle<F>(coords: &[[f64; 3]], head: F) -> Result<CoordinateScores>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let n = coords.len();
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut dist = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = crate::geom::distance(&coords[i], &coords[j]);
            if d == 0.0 {
                return Err(Error::Degenerate(format!("atoms {i} and {j} coincide")));
            }
            left.push(i);
            right.push(j);
            dist.push(d);
        }
    }
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();

    // route (a): distances built on the tape from coordinate leaves
    let mut g = Graph::new();
    let r = g.variable(Tensor::matrix(n, 3, flat)?);
    let ri = g.gather_rows(r, &left)?;
    let rj = g.gather_rows(r, &right)?;
    let diff = g.sub(ri, rj)?;
    let sq = g.square(diff)?;
    let d2 = g.sum_rows(sq)?;
    let d = g.sqrt(d2)?;
    let out = head(&mut g, d)?;
    let grads = g.backward(out)?;
    let gr = grads.wrt(&g, r);
    let direct = (0..n).map(|a| [gr.row(a)[0], gr.row(a)[1], gr.row(a)[2]]).collect();

    // route (b): distances as leaves, then chain through ∂d_ij/∂r_i
    let mut g = Graph::new();
    let dl = g.variable(Tensor::vector(dist.clone()));
    let out = head(&mut g, dl)?;
    let grads = g.backward(out)?;
    let s = grads.wrt(&g, dl);
    let mut decomposed = vec![[0.0; 3]; n];
    for (k, (&i, &j)) in left.iter().zip(&right).enumerate() {
        let c = s.data()[k] / dist[k];
        for x in 0..3 {
            let v = c * (coords[i][x] - coords[j][x]);
            decomposed[i][x] += v;
            decomposed[j][x] -= v;
        }
    }
    Ok(CoordinateScores { direct, decomposed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let s = build_schedule(3, 0.01, 10.0, 0.0).unwrap();
        assert!((s.sigmas()[1] - 0.1f64.sqrt()).abs() < 1e-12);
        let s = build_schedule(50, 0.01, 10.0, 0.2).unwrap();
        assert_eq!((s.sigma_min(), s.sigma_max()), (0.01, 10.0));
        assert!(s.sigmas().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(build_schedule(1, 0.5, 0.5, 0.2).unwrap().sigmas(), &[0.5]);
        assert!(build_schedule(1, 0.5, 0.6, 0.2).is_err());
        assert!(build_schedule(0, 0.5, 0.5, 0.2).is_err());
        assert!(build_schedule(3, 0.0, 1.0, 0.2).is_err());
        assert!(build_schedule(3, 2.0, 1.0, 0.2).is_err());
        assert!(s.sigma(0).is_err() && s.sigma(51).is_err());
    }

    #[test]
    fn dsm_target_examples() {
        assert_eq!(dsm_target(2.0, 2.5, 0.5).unwrap(), -2.0);
        assert_eq!(dsm_target(1.7, 1.7, 0.3).unwrap(), 0.0);
        assert!((dsm_target(1.0, 0.9, 0.1).unwrap() - 10.0).abs() < 1e-12);
        assert!(dsm_target(1.0, 0.9, 0.0).is_err());
        assert!(dsm_target(1.0, 0.9, -1.0).is_err());
    }

    fn set(ds: &[f64]) -> DistanceSet {
        DistanceSet {
            pairs: ds
                .iter()
                .enumerate()
                .map(|(k, &d)| crate::geom::DistancePair { i: 0, j: k + 1, d })
                .collect(),
            cutoff: None,
        }
    }

    #[test]
    fn zero_noise_limit() {
        let s = build_schedule(1, 1e-12, 1e-12, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = perturb_distances(&set(&[1.0, 2.5, 7.0]), 1, &s, NoiseMode::Gaussian, &mut rng).unwrap();
        assert!(p.pairs.iter().all(|q| (q.d_tilde - q.d).abs() < 1e-10 && q.level == 1));
    }

    #[test]
    fn literal_shift_adds_sigma() {
        let s = build_schedule(2, 0.1, 0.4, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = perturb_distances(&set(&[1.0, 2.0]), 2, &s, NoiseMode::LiteralShift, &mut rng).unwrap();
        assert_eq!(p.pairs.iter().map(|q| q.d_tilde).collect::<Vec<_>>(), vec![1.4, 2.4]);
        assert!(perturb_distances(&set(&[1.0]), 3, &s, NoiseMode::Gaussian, &mut rng).is_err());
    }

    #[test]
    fn noise_variance() {
        let s = build_schedule(1, 0.5, 0.5, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = perturb_distances(&set(&vec![3.0; 100_000]), 1, &s, NoiseMode::Gaussian, &mut rng).unwrap();
        let e: Vec<f64> = p.pairs.iter().map(|q| q.d_tilde - q.d).collect();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (e.len() - 1) as f64;
        assert!((var - 0.25).abs() < 0.01, "{var}");
    }

    #[test]
    fn coordinate_oracle_examples() {
        let sum_sq = |g: &mut Graph, d: NodeId| {
            let sq = g.square(d)?;
            g.sum(sq)
        };
        let c = coordinate_score_oracle(&[[0.0; 3], [2.0, 0.0, 0.0]], sum_sq).unwrap();
        for route in [&c.direct, &c.decomposed] {
            assert!((route[0][0] + 4.0).abs() < 1e-12 && (route[1][0] - 4.0).abs() < 1e-12);
            assert!(route.iter().all(|v| v[1] == 0.0 && v[2] == 0.0));
        }
        let constant = |g: &mut Graph, d: NodeId| {
            let z = g.scale(d, 0.0)?;
            g.sum(z)
        };
        let c = coordinate_score_oracle(&[[0.0; 3], [1.0, 2.0, 0.0], [0.0, 1.0, 3.0]], constant).unwrap();
        assert!(c.direct.iter().chain(&c.decomposed).flatten().all(|&v| v == 0.0));
        assert!(coordinate_score_oracle(&[[1.0; 3], [1.0; 3]], sum_sq).is_err());
    }

    fn tiny_model(store: &mut ParamStore) -> DdmModel {
        let enc = EncoderConfig {
            embedding_dim: 6,
            num_layers: 2,
            rbf_count: 5,
            rbf_gamma: 1.0,
            rbf_max: 4.0,
            cutoff: None,
        };
        let score = ScoreNetConfig {
            distance_widths: vec![5],
            fusion_widths: vec![4],
        };
        DdmModel::new(store, &enc, &score, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
    }

    fn zero_score(store: &mut ParamStore, model: &DdmModel) {
        for id in model.score.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn two_atoms() -> GeometryPair {
        let g = MoleculeGeometry::new(vec![6, 8], vec![[0.0; 3], [1.3, 0.0, 0.0]]).unwrap();
        GeometryPair::new(g.clone(), g, 0.0).unwrap()
    }

    fn eval(
        model: &DdmModel,
        store: &ParamStore,
        views: &DdmViews,
        noise: &DdmNoise,
        s: &NoiseSchedule,
    ) -> DdmLossReport {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        ddm_loss_on(&mut g, &p, model, views, noise, s).unwrap().1
    }

    #[test]
    fn hand_evaluated_single_pair() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store);
        zero_score(&mut store, &model);
        let s = build_schedule(1, 1.0, 1.0, 0.0).unwrap();
        let config = DdmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views = DdmViews::prepare(&two_atoms(), &AtomMask::all(2), &config, None, &mut rng).unwrap();
        let noise = DdmNoise::from_offsets(&views, &s, |_, _, _| 0.5).unwrap();
        let r = eval(&model, &store, &views, &noise, &s);
        assert!((r.direction_1 - 0.125).abs() < 1e-12);
        assert!((r.direction_2 - 0.125).abs() < 1e-12);
        assert!((r.total - 0.25).abs() < 1e-12);

        let clean = DdmNoise::from_offsets(&views, &s, |_, _, _| 0.0).unwrap();
        assert_eq!(eval(&model, &store, &views, &clean, &s).total, 0.0);
    }

    #[test]
    fn zero_network_scores_zero() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store);
        zero_score(&mut store, &model);
        let rep = PairRepresentation {
            pairs: vec![(0, 1), (1, 2)],
            vectors: Tensor::matrix(2, 6, (0..12).map(|k| k as f64 * 0.3 - 1.0).collect()).unwrap(),
        };
        assert_eq!(score(&model.score, &store, &[0.7, -2.0], &rep).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn beta_reweights_levels_exactly() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store);
        let s = build_schedule(4, 0.05, 2.0, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mol = MoleculeGeometry::new(vec![6, 1, 8], vec![[0.0; 3], [1.0, 0.2, 0.0], [-0.3, 1.1, 0.4]]).unwrap();
        let pair = perturb_coordinates(&mol, 0.3, &mut rng).unwrap();
        let views = DdmViews::prepare(&pair, &AtomMask::all(3), &DdmConfig::default(), None, &mut rng).unwrap();
        let noise = DdmNoise::sample(&views, &s, NoiseMode::Gaussian, &mut rng).unwrap();
        let base = eval(&model, &store, &views, &noise, &s);
        let shifted = s.with_beta(1.7).unwrap();
        let other = eval(&model, &store, &views, &noise, &shifted);
        for dir in 0..2 {
            for (l, sigma) in s.sigmas().iter().enumerate() {
                let want = base.per_level[dir][l] * sigma.powf(1.5);
                assert!((other.per_level[dir][l] - want).abs() <= 1e-12 * want.abs());
            }
        }
        let sum: f64 = base.level_contributions().iter().sum();
        assert!((sum - base.total).abs() < 1e-12 * base.total);
    }

    #[test]
    fn too_few_atoms_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = MoleculeGeometry::new(vec![6], vec![[0.0; 3]]).unwrap();
        let pair = GeometryPair::new(one.clone(), one, 0.0).unwrap();
        let err = DdmViews::prepare(&pair, &AtomMask::all(1), &DdmConfig::default(), None, &mut rng);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store);
        let before = store.clone();
        let mut opt = OptimizerState::new(&store);
        let config = DdmConfig {
            schedule: build_schedule(3, 0.1, 2.0, 0.2).unwrap(),
            ..DdmConfig::default()
        };
        let mol = MoleculeGeometry::new(vec![6, 1, 8], vec![[0.0; 3], [1.0, 0.2, 0.0], [-0.3, 1.1, 0.4]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = pretrain_step(&model, &mut store, &mut opt, &[mol], &config, 0.0, &mut rng).unwrap();
        assert!(r.loss.is_finite() && r.loss > 0.0);
        assert_eq!(store, before);
    }
}
