//! Straight-line reimplementations used as oracles. They read parameters
//! by name and never touch the tape.

#![allow(dead_code)]

use geossl::autodiff::ParamStore;
use geossl::backbone::EncoderConfig;
use geossl::ddm::{DdmNoise, DdmViews, NoiseSchedule};
use geossl::geom::MoleculeGeometry;
use rand::Rng;

pub fn ethanol() -> MoleculeGeometry {
    let text = include_str!("../../fixtures/ethanol.xyz");
    geossl::geom::parse_xyz(text).unwrap().remove(0)
}

pub fn random_molecule<R: Rng + ?Sized>(n: usize, rng: &mut R) -> MoleculeGeometry {
    geossl::check::random_molecule(n, rng)
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        embedding_dim: 6,
        num_layers: 2,
        rbf_count: 5,
        rbf_gamma: 1.5,
        rbf_max: 5.0,
        cutoff: None,
    }
}

fn ssp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(store.id(&format!("{name}.weight")).unwrap());
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in, "{name}");
    let mut y = match store.id(&format!("{name}.bias")) {
        Some(b) => store.get(b).data().to_vec(),
        None => vec![0.0; n_out],
    };
    for (i, xi) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xi * w.data()[i * n_out + o];
        }
    }
    y
}

fn mlp(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut k = 0;
    while store.id(&format!("{name}.{k}.weight")).is_some() {
        if k > 0 {
            h.iter_mut().for_each(|v| *v = ssp(*v));
        }
        h = linear(store, &format!("{name}.{k}"), &h);
        k += 1;
    }
    assert!(k > 0, "no layers under {name}");
    h
}

fn rbf(cfg: &EncoderConfig, d: f64) -> Vec<f64> {
    let step = cfg.rbf_max / (cfg.rbf_count - 1) as f64;
    (0..cfg.rbf_count)
        .map(|k| (-cfg.rbf_gamma * (d - k as f64 * step).powi(2)).exp())
        .collect()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Node embeddings of an all-pairs (no cutoff) continuous-filter network.
pub fn encoder_forward(store: &ParamStore, cfg: &EncoderConfig, mol: &MoleculeGeometry) -> Vec<Vec<f64>> {
    let n = mol.len();
    let emb = store.get(store.id("encoder.embedding").unwrap());
    let d = cfg.embedding_dim;
    let mut z: Vec<Vec<f64>> = mol
        .atom_types()
        .iter()
        .map(|&t| emb.data()[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();
    for t in 0..cfg.num_layers {
        let name = format!("encoder.interaction{t}");
        let x: Vec<Vec<f64>> = z.iter().map(|zi| linear(store, &format!("{name}.in2f"), zi)).collect();
        let mut agg = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let r = dist(mol.coords()[i], mol.coords()[j]);
                if cfg.cutoff.is_some_and(|c| r > c) {
                    continue;
                }
                let w = mlp(store, &format!("{name}.filter"), &rbf(cfg, r));
                for c in 0..d {
                    agg[i][c] += x[j][c] * w[c];
                }
            }
        }
        for i in 0..n {
            let v = mlp(store, &format!("{name}.update"), &agg[i]);
            for c in 0..d {
                z[i][c] += v[c];
            }
        }
    }
    z.iter().map(|zi| mlp(store, "encoder.output", zi)).collect()
}

pub fn score_forward(store: &ParamStore, cfg: &EncoderConfig, d_tilde: f64, pair: &[f64]) -> f64 {
    let mut x = mlp(store, "score.distance", &rbf(cfg, d_tilde));
    x.extend_from_slice(pair);
    mlp(store, "score.fusion", &x)[0]
}

/// `Σ_dir Σ_l σ_l^β/(2L) · mean_pairs (s/σ_l − (d − d̃)/σ_l²)²`.
pub fn ddm_loss(
    store: &ParamStore,
    cfg: &EncoderConfig,
    views: &DdmViews,
    noise: &DdmNoise,
    schedule: &NoiseSchedule,
) -> f64 {
    let h1 = encoder_forward(store, cfg, &views.cond1);
    let h2 = encoder_forward(store, cfg, &views.cond2);
    let nl = schedule.levels() as f64;
    let mut total = 0.0;
    for (h, levels) in [(&h2, &noise.direction_1), (&h1, &noise.direction_2)] {
        for (l, level) in levels.iter().enumerate() {
            let sigma = schedule.sigmas()[l];
            let mut acc = 0.0;
            for p in &level.pairs {
                let pair: Vec<f64> = h[p.i].iter().zip(&h[p.j]).map(|(a, b)| a + b).collect();
                let s = score_forward(store, cfg, p.d_tilde, &pair);
                acc += (s / sigma - (p.d - p.d_tilde) / (sigma * sigma)).powi(2);
            }
            total += sigma.powf(schedule.beta()) / (2.0 * nl) * acc / level.pairs.len() as f64;
        }
    }
    total
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
