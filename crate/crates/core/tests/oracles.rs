mod common;

use common::{rel, small_encoder};
use geossl::autodiff::{Graph, ParamStore};
use geossl::backbone::{encode, Encoder, EncoderConfig};
use geossl::ddm::{build_schedule, ddm_loss_on, DdmConfig, DdmModel, DdmNoise, DdmViews, NoiseMode, ScoreNetConfig};
use geossl::geom::{perturb_coordinates, AtomMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_embeddings_match(store: &ParamStore, enc: &Encoder, cfg: &EncoderConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5 {
        let n = rng.random_range(1..8);
        let mol = common::random_molecule(n, &mut rng);
        let got = encode(enc, store, &mol, None).unwrap();
        let want = common::encoder_forward(store, cfg, &mol);
        for (i, row) in want.iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "atom {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn encoder_matches_straight_line_forward() {
    let cfg = small_encoder();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_embeddings_match(&store, &enc, &cfg, 2);
}

#[test]
fn encoder_with_cutoff_matches_straight_line_forward() {
    let cfg = EncoderConfig {
        cutoff: Some(2.5),
        ..small_encoder()
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_embeddings_match(&store, &enc, &cfg, 4);
}

#[test]
fn default_encoder_matches_on_ethanol() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mol = common::ethanol();
    let got = encode(&enc, &store, &mol, None).unwrap();
    let want = common::encoder_forward(&store, &cfg, &mol);
    for (i, row) in want.iter().enumerate() {
        for (a, b) in got.row(i).iter().zip(row) {
            assert!((a - b).abs() <= 1e-11 * b.abs().max(1.0));
        }
    }
}

#[test]
fn three_atom_two_level_loss_matches_oracle() {
    let cfg = small_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let model = DdmModel::new(&mut store, &cfg, &ScoreNetConfig::for_encoder(&cfg), &mut rng).unwrap();
    let schedule = build_schedule(2, 0.1, 1.0, 0.2).unwrap();
    let config = DdmConfig {
        schedule: schedule.clone(),
        ..DdmConfig::default()
    };
    for _ in 0..10 {
        let mol = common::random_molecule(3, &mut rng);
        let pair = perturb_coordinates(&mol, 0.3, &mut rng).unwrap();
        let views = DdmViews::prepare(&pair, &AtomMask::all(3), &config, None, &mut rng).unwrap();
        let noise = DdmNoise::sample(&views, &schedule, NoiseMode::Gaussian, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let (_, report) = ddm_loss_on(&mut g, &p, &model, &views, &noise, &schedule).unwrap();
        let want = common::ddm_loss(&store, &cfg, &views, &noise, &schedule);
        assert!(rel(report.total, want) < 1e-12, "{} vs {want}", report.total);
        let sum: f64 = report.level_contributions().iter().sum();
        assert!(rel(sum, report.total) < 1e-14);
    }
}

#[test]
fn masked_and_conditioned_views_match_oracle() {
    let cfg = small_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let model = DdmModel::new(&mut store, &cfg, &ScoreNetConfig::for_encoder(&cfg), &mut rng).unwrap();
    let schedule = build_schedule(3, 0.05, 2.0, 0.5).unwrap();
    let config = DdmConfig {
        schedule: schedule.clone(),
        condition_coord_noise: true,
        ..DdmConfig::default()
    };
    let mol = common::random_molecule(6, &mut rng);
    let pair = perturb_coordinates(&mol, 0.3, &mut rng).unwrap();
    let mask = AtomMask::from_indices(vec![0, 2, 3, 5], 2.0 / 6.0).unwrap();
    let views = DdmViews::prepare(&pair, &mask, &config, None, &mut rng).unwrap();
    assert_eq!(views.d1.len(), 6);
    assert_ne!(views.cond1, pair.g1.subset(&mask).unwrap());
    let noise = DdmNoise::sample(&views, &schedule, NoiseMode::LiteralShift, &mut rng).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let (_, report) = ddm_loss_on(&mut g, &p, &model, &views, &noise, &schedule).unwrap();
    let want = common::ddm_loss(&store, &cfg, &views, &noise, &schedule);
    assert!(rel(report.total, want) < 1e-12);
}
