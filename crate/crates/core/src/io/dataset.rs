//! Toy molecule generator, JSON-lines molecule records and XYZ export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Atom, AtomClass, Element, Molecule, Rotation, Vec3};
use crate::rng::Noise;

pub const CHAIN_BOND: f64 = 1.54;
pub const RING_BOND: f64 = 1.40;
pub const TETRAHEDRAL_DEG: f64 = 109.47;
pub const JITTER: f64 = 0.02;
const C_O_BOND: f64 = 1.43;
const C_N_BOND: f64 = 1.47;
const RING_SUBSTITUENT: f64 = 1.51;

/// Planar zigzag with the given bond lengths and tetrahedral angles.
pub fn zigzag(bonds: &[f64]) -> Vec<Vec3> {
    let half = TETRAHEDRAL_DEG.to_radians() / 2.0;
    let mut out = vec![Vec3::zeros()];
    for (k, b) in bonds.iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let dir = Vec3::new(half.sin(), sign * half.cos(), 0.0);
        out.push(out[k] + dir * *b);
    }
    out
}

/// Unit direction of the out-of-plane tetrahedral position at an atom whose
/// two bonds point along `u1` and `u2`.
fn tetrahedral_branch(u1: &Vec3, u2: &Vec3) -> Vec3 {
    let bis = (u1 + u2).normalize();
    let normal = u1.cross(u2).normalize();
    let half = TETRAHEDRAL_DEG.to_radians() / 2.0;
    -bis * half.cos() + normal * half.sin()
}

fn class(el: Element, aromatic: bool) -> AtomClass {
    AtomClass::new(el, aromatic).expect("template classes are valid")
}

fn chain(len: usize) -> Vec<Atom> {
    zigzag(&vec![CHAIN_BOND; len - 1])
        .into_iter()
        .map(|p| Atom::new(p, class(Element::C, false)))
        .collect()
}

/// Regular hexagon of aromatic atoms; `hetero` replaces atom 0 with aromatic N
/// and `substituent` attaches a non-aromatic C or O outward from atom 3.
fn ring(hetero: bool, substituent: Option<Element>) -> Vec<Atom> {
    let mut atoms: Vec<Atom> = (0..6)
        .map(|k| {
            let a = k as f64 * std::f64::consts::PI / 3.0;
            let el = if hetero && k == 0 { Element::N } else { Element::C };
            Atom::new(Vec3::new(a.cos(), a.sin(), 0.0) * RING_BOND, class(el, true))
        })
        .collect();
    if let Some(el) = substituent {
        let len = if el == Element::O { 1.36 } else { RING_SUBSTITUENT };
        let p = atoms[3].position;
        atoms.push(Atom::new(p + p.normalize() * len, class(el, false)));
    }
    atoms
}

/// Chain with a tetrahedral methyl branch on an interior atom and optionally
/// a terminal N or O.
fn branched(len: usize, at: usize, terminal: Option<Element>) -> Vec<Atom> {
    let mut bonds = vec![CHAIN_BOND; len - 1];
    if let Some(el) = terminal {
        bonds[len - 2] = if el == Element::O { C_O_BOND } else { C_N_BOND };
    }
    let pos = zigzag(&bonds);
    let mut atoms: Vec<Atom> = pos.iter().map(|p| Atom::new(*p, class(Element::C, false))).collect();
    if let Some(el) = terminal {
        atoms[len - 1].class = class(el, false);
    }
    let u1 = (pos[at - 1] - pos[at]).normalize();
    let u2 = (pos[at + 1] - pos[at]).normalize();
    let branch = pos[at] + tetrahedral_branch(&u1, &u2) * CHAIN_BOND;
    atoms.push(Atom::new(branch, class(Element::C, false)));
    atoms
}

/// Template geometry before rotation and jitter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    Chain {
        len: usize,
    },
    Ring {
        hetero: bool,
        substituent: Option<Element>,
    },
    Branched {
        len: usize,
        at: usize,
        terminal: Option<Element>,
    },
}

impl Template {
    pub fn atoms(self) -> Vec<Atom> {
        match self {
            Template::Chain { len } => chain(len),
            Template::Ring { hetero, substituent } => ring(hetero, substituent),
            Template::Branched { len, at, terminal } => branched(len, at, terminal),
        }
    }

    pub fn draw(noise: &mut Noise) -> Self {
        let u = noise.uniform();
        if u < 0.4 {
            Template::Chain {
                len: 3 + noise.index(6),
            }
        } else if u < 0.7 {
            let substituent = [None, Some(Element::C), Some(Element::O)][noise.index(3)];
            Template::Ring {
                hetero: noise.uniform() < 0.3,
                substituent,
            }
        } else {
            let len = 4 + noise.index(4);
            let terminal = [None, Some(Element::N), Some(Element::O)][noise.index(3)];
            Template::Branched {
                len,
                at: 1 + noise.index(len - 2),
                terminal,
            }
        }
    }
}

/// Centers the template, applies a random rotation and per-coordinate
/// Gaussian jitter.
pub fn place(template: Template, jitter: f64, noise: &mut Noise) -> Result<Molecule> {
    let atoms = template.atoms();
    let c = atoms.iter().map(|a| a.position).sum::<Vec3>() / atoms.len() as f64;
    let r = Rotation::from_noise(noise);
    let atoms = atoms
        .into_iter()
        .map(|a| {
            let p = r.matrix() * (a.position - c);
            let j = Vec3::new(
                noise.standard_normal(),
                noise.standard_normal(),
                noise.standard_normal(),
            );
            Atom::new(p + j * jitter, a.class)
        })
        .collect();
    Molecule::new(atoms)
}

pub fn generate_toy_dataset(n: usize, seed: u64) -> Result<Vec<Molecule>> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let mut noise = Noise::derived(seed, &[0x7071, i as u64]);
            let t = Template::draw(&mut noise);
            place(t, JITTER, &mut noise)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomRecord {
    pub el: String,
    pub aromatic: bool,
    pub xyz: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeRecord {
    pub atoms: Vec<AtomRecord>,
}

impl MoleculeRecord {
    pub fn from_molecule(m: &Molecule) -> Self {
        Self {
            atoms: m
                .atoms()
                .iter()
                .map(|a| AtomRecord {
                    el: a.element().symbol().to_string(),
                    aromatic: a.class.aromatic(),
                    xyz: [a.position.x, a.position.y, a.position.z],
                })
                .collect(),
        }
    }

    pub fn to_molecule(&self) -> Result<Molecule> {
        let atoms = self
            .atoms
            .iter()
            .map(|r| {
                let el = Element::from_symbol(&r.el).ok_or_else(|| invalid(format!("unknown element {:?}", r.el)))?;
                Ok(Atom::new(Vec3::from(r.xyz), AtomClass::new(el, r.aromatic)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Molecule::new(atoms)
    }
}

pub fn parse_molecule_line(line: &str, line_no: usize) -> Result<Molecule> {
    let parse_err = |msg: String| Error::Parse { line: line_no, msg };
    let rec: MoleculeRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    rec.to_molecule().map_err(|e| parse_err(e.to_string()))
}

/// Reads one molecule per non-blank line.
pub fn read_molecules(reader: impl BufRead) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_molecule_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Molecule>> {
    read_molecules(BufReader::new(File::open(path)?))
}

pub fn write_molecules(mut w: impl Write, mols: &[Molecule]) -> Result<()> {
    for m in mols {
        serde_json::to_writer(&mut w, &MoleculeRecord::from_molecule(m))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, mols: &[Molecule]) -> Result<()> {
    write_molecules(BufWriter::new(File::create(path)?), mols)
}

/// XYZ text: atom count, a comment line, then `symbol x y z` per atom.
pub fn xyz_string(m: &Molecule, comment: &str) -> String {
    let mut s = format!("{}\n{}\n", m.len(), comment.replace('\n', " "));
    for a in m.atoms() {
        let p = a.position;
        s.push_str(&format!("{} {:.6} {:.6} {:.6}\n", a.element().symbol(), p.x, p.y, p.z));
    }
    s
}

pub fn export_xyz(m: &Molecule, path: &Path, comment: &str) -> Result<()> {
    std::fs::write(path, xyz_string(m, comment))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{connectivity, infer_bonds, BondOrder};

    #[test]
    fn chain_geometry() {
        let m = place(Template::Chain { len: 4 }, 0.0, &mut Noise::new(1)).unwrap();
        let p = m.positions();
        for k in 0..3 {
            assert!(((p[k + 1] - p[k]).norm() - CHAIN_BOND).abs() < 1e-12);
        }
        for k in 0..2 {
            let cos = (p[k] - p[k + 1]).normalize().dot(&(p[k + 2] - p[k + 1]).normalize());
            assert!((cos.acos().to_degrees() - TETRAHEDRAL_DEG).abs() < 1e-9);
        }
        let jittered = place(Template::Chain { len: 4 }, JITTER, &mut Noise::new(2)).unwrap();
        let p = jittered.positions();
        for k in 0..3 {
            assert!(((p[k + 1] - p[k]).norm() - CHAIN_BOND).abs() < JITTER * 3.0 * 2f64.sqrt());
        }
    }

    #[test]
    fn ring_geometry_and_bonds() {
        let m = place(
            Template::Ring {
                hetero: false,
                substituent: None,
            },
            0.0,
            &mut Noise::new(3),
        )
        .unwrap();
        let p = m.positions();
        for k in 0..6 {
            assert!(((p[(k + 1) % 6] - p[k]).norm() - RING_BOND).abs() < 1e-12);
        }
        let g = infer_bonds(&m);
        assert_eq!(g.bonds.len(), 6);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
        assert!(connectivity(&m));
    }

    #[test]
    fn branch_is_tetrahedral() {
        let atoms = branched(5, 2, Some(Element::O));
        let c = atoms[2].position;
        let dirs: Vec<Vec3> = [1, 3, 5].iter().map(|&i| (atoms[i].position - c).normalize()).collect();
        for a in 0..3 {
            for b in a + 1..3 {
                assert!((dirs[a].dot(&dirs[b]).acos().to_degrees() - TETRAHEDRAL_DEG).abs() < 0.01);
            }
        }
        assert_eq!(atoms[4].element(), Element::O);
        assert!(((atoms[4].position - atoms[3].position).norm() - C_O_BOND).abs() < 1e-12);
    }

    #[test]
    fn toy_dataset_is_deterministic_and_connected() {
        let a = generate_toy_dataset(60, 7).unwrap();
        let b = generate_toy_dataset(60, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_toy_dataset(60, 8).unwrap());
        assert!(a.iter().all(connectivity));
        assert!(a.iter().any(|m| m.atoms().iter().any(|x| x.class.aromatic())));
        assert!(a.iter().any(|m| m.atoms().iter().any(|x| x.element() == Element::N)));
        assert!(generate_toy_dataset(0, 1).is_err());
    }

    #[test]
    fn round_trip_is_lossless() {
        let mols = generate_toy_dataset(20, 9).unwrap();
        let mut buf = Vec::new();
        write_molecules(&mut buf, &mols).unwrap();
        let back = read_molecules(buf.as_slice()).unwrap();
        assert_eq!(mols, back);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let good = r#"{"atoms":[{"el":"C","aromatic":false,"xyz":[0,0,0]}]}"#;
        let bad = r#"{"atoms":[{"el":"Xx","aromatic":false,"xyz":[0,0,0]}]}"#;
        let text = format!("{good}\n\n{bad}\n");
        match read_molecules(text.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("Xx"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let truncated = r#"{"atoms":[{"el":"C""#;
        assert!(matches!(
            read_molecules(truncated.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let aromatic_h = r#"{"atoms":[{"el":"H","aromatic":true,"xyz":[0,0,0]}]}"#;
        assert!(matches!(
            read_molecules(aromatic_h.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn xyz_methane() {
        let s = 0.63;
        let h = class(Element::H, false);
        let m = Molecule::new(vec![
            Atom::new(Vec3::zeros(), class(Element::C, false)),
            Atom::new(Vec3::new(s, s, s), h),
            Atom::new(Vec3::new(s, -s, -s), h),
            Atom::new(Vec3::new(-s, s, -s), h),
            Atom::new(Vec3::new(-s, -s, s), h),
        ])
        .unwrap();
        let text = xyz_string(&m, "methane");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "5");
        assert_eq!(lines.len(), 7);
        assert!(lines[2].starts_with("C "));
        assert!(lines[3..]
            .iter()
            .all(|l| l.starts_with("H ") && l.split_whitespace().count() == 4));
    }
}
