//! Reader and writer for the plain XYZ format.
//!
//! ```text
//! <atom count>
//! <comment>
//! <symbol> <x> <y> <z>
//! ...
//! ```
//!
//! Frames may follow each other back to back. Coordinates are in Å.

use super::{elements, MoleculeGeometry};
use crate::error::{Error, Result};
use crate::fmt::sig10;

pub fn parse_xyz(text: &str) -> Result<Vec<MoleculeGeometry>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut pos = 0;

    while pos < lines.len() {
        if lines[pos].trim().is_empty() {
            pos += 1;
            continue;
        }
        let count_line = pos + 1;
        let count: usize = lines[pos].trim().parse().map_err(|_| Error::Parse {
            line: count_line,
            message: format!("malformed atom count {:?}", lines[pos].trim()),
        })?;
        if count == 0 {
            return Err(Error::Parse {
                line: count_line,
                message: "atom count must be at least 1".into(),
            });
        }
        // comment line
        pos += 2;
        if pos + count > lines.len() {
            return Err(Error::Parse {
                line: lines.len() + 1,
                message: format!(
                    "truncated frame: expected {count} atoms, found {}",
                    lines.len().saturating_sub(pos)
                ),
            });
        }

        let mut atom_types = Vec::with_capacity(count);
        let mut coords = Vec::with_capacity(count);
        for (offset, raw) in lines[pos..pos + count].iter().enumerate() {
            let line = pos + offset + 1;
            let mut fields = raw.split_whitespace();
            let sym = fields.next().ok_or_else(|| Error::Parse {
                line,
                message: "truncated frame: empty atom line".into(),
            })?;
            let z = elements::atomic_number(sym).ok_or_else(|| Error::Parse {
                line,
                message: format!("unknown element {sym}"),
            })?;
            let mut xyz = [0.0; 3];
            for c in xyz.iter_mut() {
                let field = fields.next().ok_or_else(|| Error::Parse {
                    line,
                    message: "missing coordinate".into(),
                })?;
                *c = field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("non-numeric coordinate {field:?}"),
                    })?;
            }
            atom_types.push(z);
            coords.push(xyz);
        }
        frames.push(MoleculeGeometry::new(atom_types, coords)?);
        pos += count;
    }
    Ok(frames)
}

/// Writes one frame per molecule with 10 significant digits per coordinate.
pub fn serialize_xyz(molecules: &[MoleculeGeometry]) -> String {
    let mut out = String::new();
    for (k, mol) in molecules.iter().enumerate() {
        out.push_str(&format!("{}\nframe {k}\n", mol.len()));
        for (z, r) in mol.atom_types().iter().zip(mol.coords()) {
            let sym = elements::symbol(*z).expect("validated atomic number");
            out.push_str(&format!("{sym} {} {} {}\n", sig10(r[0]), sig10(r[1]), sig10(r[2])));
        }
    }
    out
}
