//! Synthetic conformer datasets and their label files.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fmt::sig10;
use crate::geom::{pairwise_distances, perturb_coordinates, MoleculeGeometry};

/// `Σ_{i<j} (d_ij − d_ij^template)²` over all pairs.
pub fn surrogate_label(template: &MoleculeGeometry, mol: &MoleculeGeometry) -> Result<f64> {
    if template.atom_types() != mol.atom_types() {
        return Err(Error::invalid("conformer and template differ in atoms"));
    }
    let a = pairwise_distances(template, None);
    let b = pairwise_distances(mol, None);
    Ok(a.pairs.iter().zip(&b.pairs).map(|(p, q)| (q.d - p.d).powi(2)).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub conformers: Vec<MoleculeGeometry>,
    pub labels: Vec<f64>,
}

/// `count` Gaussian-perturbed copies of `template`, labeled with
/// [`surrogate_label`].
pub fn generate_synthetic_conformers<R: Rng + ?Sized>(
    template: &MoleculeGeometry,
    count: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<LabeledSet> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("invalid sigma {sigma}")));
    }
    let conformers = (0..count)
        .map(|_| perturb_coordinates(template, sigma, rng).map(|p| p.g2))
        .collect::<Result<Vec<_>>>()?;
    let labels = conformers
        .iter()
        .map(|c| surrogate_label(template, c))
        .collect::<Result<_>>()?;
    Ok(LabeledSet { conformers, labels })
}

pub fn labels_to_csv(labels: &[f64]) -> String {
    let mut out = String::from("index,label\n");
    for (k, v) in labels.iter().enumerate() {
        writeln!(out, "{k},{}", sig10(*v)).expect("string write");
    }
    out
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "index,label" => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header index,label".into(),
            })
        }
    }
    let mut labels = Vec::new();
    for (k, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: k + 1, message };
        let (idx, value) = line
            .split_once(',')
            .ok_or_else(|| err(format!("expected index,label, got {line:?}")))?;
        if idx.trim().parse::<usize>().ok() != Some(labels.len()) {
            return Err(err(format!("expected index {}", labels.len())));
        }
        let v: f64 = value.trim().parse().map_err(|_| err(format!("bad label {value:?}")))?;
        if !v.is_finite() {
            return Err(err(format!("non-finite label {value:?}")));
        }
        labels.push(v);
    }
    Ok(labels)
}

pub fn read_xyz_file(path: &Path) -> Result<Vec<MoleculeGeometry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::geom::parse_xyz(&text)
}

pub fn read_labels_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn template() -> MoleculeGeometry {
        MoleculeGeometry::new(vec![1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn zero_sigma_gives_zero_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = generate_synthetic_conformers(&template(), 5, 0.0, &mut rng).unwrap();
        assert_eq!(set.labels, vec![0.0; 5]);
        assert!(set.conformers.iter().all(|c| c == &template()));
    }

    #[test]
    fn stretched_pair_label() {
        let stretched = template().with_coords(vec![[0.0; 3], [1.1, 0.0, 0.0]]).unwrap();
        assert!((surrogate_label(&template(), &stretched).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_synthetic_conformers(&template(), 0, 0.1, &mut rng).is_err());
        assert!(generate_synthetic_conformers(&template(), 2, -0.1, &mut rng).is_err());
        assert!(generate_synthetic_conformers(&template(), 2, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let labels = vec![0.0, 0.0123456789012, 4.5e-7, 12.0];
        let text = labels_to_csv(&labels);
        let back = parse_labels_csv(&text).unwrap();
        for (a, b) in labels.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-9 * a.abs());
        }
        assert!(parse_labels_csv("idx,label\n0,1").is_err());
        let e = parse_labels_csv("index,label\n0,1\n2,3").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
    }
}
