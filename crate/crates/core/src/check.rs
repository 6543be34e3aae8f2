//! Self-contained invariant and oracle checks behind `geossl check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Bound, Graph, Mlp, NodeId, OptimizerState, ParamStore, Tensor};
use crate::backbone::{encode, EncoderConfig};
use crate::baselines::{
    ebm_nce_from_readouts, infonce_from_readouts, loss_distance_pred_on, loss_ebm_nce_on, loss_infonce_on, loss_rr_on,
    loss_type_pred_on, type_cross_entropy, BaselineConfig, BaselineKind, BaselineModel, TYPE_CLASSES,
};
use crate::ddm::{
    build_schedule, coordinate_score_oracle, ddm_loss, ddm_loss_on, dsm_target, DdmConfig, DdmModel, DdmNoise,
    DdmViews, NoiseMode, ScoreNetConfig,
};
use crate::error::Result;
use crate::geom::{
    apply_rigid_transform, perturb_coordinates, AtomMask, GeometryPair, MoleculeGeometry, RigidTransform,
};
use crate::harness::checkpoint::Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        embedding_dim: 6,
        num_layers: 2,
        rbf_count: 6,
        rbf_gamma: 1.0,
        rbf_max: 5.0,
        cutoff: None,
    }
}

fn small_score() -> ScoreNetConfig {
    ScoreNetConfig {
        distance_widths: vec![5],
        fusion_widths: vec![4],
    }
}

/// A molecule with `n` atoms spread over a few ångström.
pub fn random_molecule<R: Rng + ?Sized>(n: usize, rng: &mut R) -> MoleculeGeometry {
    let types = (0..n).map(|_| [1u8, 6, 7, 8][rng.random_range(0..4)]).collect();
    let coords = (0..n)
        .map(|_| {
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ]
        })
        .collect();
    MoleculeGeometry::new(types, coords).expect("valid molecule")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn value(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).item())
}

fn se3_invariance() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let enc = small_encoder();
    let mut store = ParamStore::new();
    let ddm = DdmModel::new(&mut store, &enc, &small_score(), &mut rng)?;
    let baselines = BaselineKind::ALL
        .iter()
        .map(|&k| {
            let mut s = ParamStore::new();
            BaselineModel::new(&mut s, &enc, &BaselineConfig::new(k, &enc), &mut rng).map(|m| (m, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = DdmConfig {
        schedule: build_schedule(4, 0.01, 10.0, 0.2)?,
        ..DdmConfig::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let n = rng.random_range(3..8);
        let mols: Vec<MoleculeGeometry> = (0..3).map(|_| random_molecule(n, &mut rng)).collect();
        let pairs = mols
            .iter()
            .map(|m| perturb_coordinates(m, 0.3, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let losses = |pairs: &[GeometryPair]| -> Result<Vec<f64>> {
            let mut out = vec![
                ddm_loss(
                    &ddm,
                    &store,
                    &pairs[0],
                    &AtomMask::all(n),
                    &config,
                    &mut ChaCha8Rng::seed_from_u64(1),
                )?
                .total,
            ];
            let emb = encode(&ddm.encoder, &store, &pairs[0].g1, None)?;
            out.extend_from_slice(emb.h.data());
            for (m, s) in &baselines {
                let mut g = Graph::new();
                let p = s.bind_frozen(&mut g);
                let mut r = ChaCha8Rng::seed_from_u64(2);
                let l = match m.config.kind {
                    BaselineKind::DistancePred => loss_distance_pred_on(&mut g, &p, m, &pairs[0].g1)?,
                    BaselineKind::TypePred => loss_type_pred_on(&mut g, &p, m, &pairs[0].g1, 0.15, &mut r)?,
                    BaselineKind::Rr => loss_rr_on(&mut g, &p, m, &pairs[0])?,
                    BaselineKind::InfoNce => loss_infonce_on(&mut g, &p, m, pairs)?,
                    BaselineKind::EbmNce => loss_ebm_nce_on(&mut g, &p, m, pairs, &mut r)?,
                };
                out.push(g.value(l).item());
            }
            Ok(out)
        };
        let base = losses(&pairs)?;
        for _ in 0..4 {
            let t1 = RigidTransform::random(&mut rng, 5.0);
            let t2 = RigidTransform::random(&mut rng, 5.0);
            let moved: Vec<GeometryPair> = pairs
                .iter()
                .map(|q| {
                    GeometryPair::new(
                        apply_rigid_transform(&q.g1, &t1),
                        apply_rigid_transform(&q.g2, &t2),
                        0.3,
                    )
                })
                .collect::<Result<_>>()?;
            for (a, b) in base.iter().zip(losses(&moved)?) {
                worst = worst.max(rel(*a, b));
            }
        }
    }
    Ok((worst < 1e-6, format!("max relative change {worst:.2e}")))
}

fn ddm_gradient() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let enc = small_encoder();
    let mut store = ParamStore::new();
    let model = DdmModel::new(&mut store, &enc, &small_score(), &mut rng)?;
    let schedule = build_schedule(2, 0.5, 2.0, 0.2)?;
    let config = DdmConfig {
        schedule: schedule.clone(),
        ..DdmConfig::default()
    };
    let mol = random_molecule(3, &mut rng);
    let pair = perturb_coordinates(&mol, 0.3, &mut rng)?;
    let views = DdmViews::prepare(&pair, &AtomMask::all(3), &config, None, &mut rng)?;
    let noise = DdmNoise::sample(&views, &schedule, NoiseMode::Gaussian, &mut rng)?;
    let mut inputs = store.tensors().to_vec();
    for (k, t) in inputs.iter_mut().enumerate() {
        for (m, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((3 * k + m) as f64).cos();
        }
    }
    let err = finite_diff_check(&inputs, 1e-5, |g, leaves| {
        let p = Bound::from_nodes(leaves.to_vec());
        Ok(ddm_loss_on(g, &p, &model, &views, &noise, &schedule)?.0)
    })?;
    Ok((err < 1e-4, format!("max relative error {err:.2e}")))
}

fn eq4_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..7);
        let mol = random_molecule(n, &mut rng);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", &[1, 4, 1], true, &mut rng)?;
        let head = |g: &mut Graph, d: NodeId| {
            let p = store.bind_frozen(g);
            let rows = g.shape(d)[0];
            let x = g.reshape(d, &[rows, 1])?;
            let y = mlp.forward(g, &p, x)?;
            let s = g.sum(y)?;
            g.square(s)
        };
        let c = coordinate_score_oracle(mol.coords(), head)?;
        worst = worst.max(c.max_relative_error());
    }
    Ok((worst < 1e-8, format!("max relative disagreement {worst:.2e}")))
}

fn closed_forms() -> Result<(bool, String)> {
    let mut ok = dsm_target(2.0, 2.5, 0.5)? == -2.0
        && dsm_target(3.0, 3.0, 0.7)? == 0.0
        && (dsm_target(1.0, 0.9, 0.1)? - 10.0).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut store = ParamStore::new();
    let model = DdmModel::new(&mut store, &small_encoder(), &small_score(), &mut rng)?;
    for id in model.score.param_ids() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let schedule = build_schedule(1, 1.0, 1.0, 0.0)?;
    let two = MoleculeGeometry::new(vec![6, 8], vec![[0.0; 3], [1.4, 0.0, 0.0]])?;
    let pair = GeometryPair::new(two.clone(), two, 0.0)?;
    let views = DdmViews::prepare(&pair, &AtomMask::all(2), &DdmConfig::default(), None, &mut rng)?;
    let noise = DdmNoise::from_offsets(&views, &schedule, |_, _, _| 0.5)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let total = ddm_loss_on(&mut g, &p, &model, &views, &noise, &schedule)?.1.total;
    ok &= (total - 0.25).abs() < 1e-12;
    Ok((ok, format!("single-pair objective {total}")))
}

fn analytic_anchors() -> Result<(bool, String)> {
    let b = 4;
    let same = Tensor::matrix(b, 3, [0.3, -1.0, 2.0].repeat(b))?;
    let infonce = value(|g| {
        let z = g.constant(same.clone());
        infonce_from_readouts(g, z, z, 0.1)
    })?;
    let ebm = value(|g| {
        let z1 = g.constant(same.clone());
        let z2 = g.constant(Tensor::matrix(b, 3, (0..3 * b).map(|k| k as f64).collect())?);
        let zero = |g: &mut Graph, x: NodeId| {
            let rows = g.shape(x)[0];
            let s = g.scale(x, 0.0)?;
            let c = g.sum_rows(s)?;
            g.reshape(c, &[rows, 1])
        };
        ebm_nce_from_readouts(g, z1, z2, &[1, 2, 3, 0], &zero)
    })?;
    let ce = value(|g| {
        let l = g.constant(Tensor::zeros(&[3, TYPE_CLASSES]));
        type_cross_entropy(g, l, &[0, 5, 117])
    })?;
    let ok = (infonce - (b as f64).ln()).abs() < 1e-10
        && (ebm - 2.0 * 2f64.ln()).abs() < 1e-10
        && (ce - (TYPE_CLASSES as f64).ln()).abs() < 1e-10;
    Ok((
        ok,
        format!("InfoNCE {infonce:.12}, EBM-NCE {ebm:.12}, type CE {ce:.12}"),
    ))
}

fn ladder() -> Result<(bool, String)> {
    let mut ok = true;
    for l in [30, 50] {
        let s = build_schedule(l, 0.01, 10.0, 0.2)?;
        ok &= s.sigma_min() == 0.01 && s.sigma_max() == 10.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut store = ParamStore::new();
    let model = DdmModel::new(&mut store, &small_encoder(), &small_score(), &mut rng)?;
    let s = build_schedule(5, 0.01, 10.0, 0.2)?;
    let mol = random_molecule(4, &mut rng);
    let pair = perturb_coordinates(&mol, 0.3, &mut rng)?;
    let views = DdmViews::prepare(&pair, &AtomMask::all(4), &DdmConfig::default(), None, &mut rng)?;
    let noise = DdmNoise::sample(&views, &s, NoiseMode::Gaussian, &mut rng)?;
    let eval = |s: &crate::ddm::NoiseSchedule| -> Result<_> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        Ok(ddm_loss_on(&mut g, &p, &model, &views, &noise, s)?.1)
    };
    let a = eval(&s)?;
    let b = eval(&s.with_beta(2.0)?)?;
    let mut worst: f64 = 0.0;
    for d in 0..2 {
        for (l, sigma) in s.sigmas().iter().enumerate() {
            worst = worst.max(rel(b.per_level[d][l], a.per_level[d][l] * sigma.powf(1.8)));
        }
    }
    ok &= worst <= 1e-12;
    Ok((ok, format!("reweighting error {worst:.2e}")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut store = ParamStore::new();
    DdmModel::new(&mut store, &small_encoder(), &small_score(), &mut rng)?;
    let opt = OptimizerState::new(&store);
    let ck = Checkpoint::capture("seed = 600\n".into(), 3, &rng, &store, &opt);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let ok = back == ck && back.to_bytes() == bytes && Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err();
    Ok((ok, format!("{} bytes", bytes.len())))
}

/// Runs every check; failures are reported, not raised.
pub fn run_checks() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 7] = [
        ("se3_invariance", se3_invariance),
        ("ddm_gradient", ddm_gradient),
        ("coordinate_score_decomposition", eq4_oracle),
        ("dsm_closed_form", closed_forms),
        ("analytic_loss_anchors", analytic_anchors),
        ("noise_ladder", ladder),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}
