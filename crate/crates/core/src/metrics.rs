//! Evaluation: bond perception, connectivity, shape and graph similarity,
//! diversity and bond-length divergence.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{invalid, Result};
use crate::geometry::{Molecule, Vec3};

/// Tolerance added to the covalent-radius sum when deciding whether two atoms
/// are bonded.
pub const BOND_TOLERANCE: f64 = 0.4;
pub const GAUSSIAN_AMPLITUDE: f64 = 2.7;
pub const FINGERPRINT_BITS: usize = 2048;
pub const FINGERPRINT_RADIUS: usize = 2;
pub const JS_SMOOTHING: f64 = 1e-12;

/// C–C reference length that the band edges below are scaled from.
const CC_SINGLE: f64 = 1.52;
const TRIPLE_BELOW: f64 = 1.27;
const DOUBLE_BELOW: f64 = 1.45;
const AROMATIC_FROM: f64 = 1.34;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    fn code(self) -> u64 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
    pub length: f64,
}

/// Undirected bonds with `i < j`, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct BondGraph {
    pub n_atoms: usize,
    pub bonds: Vec<Bond>,
}

impl BondGraph {
    pub fn neighbors(&self) -> Vec<Vec<(usize, BondOrder)>> {
        let mut adj = vec![Vec::new(); self.n_atoms];
        for b in &self.bonds {
            adj[b.i].push((b.j, b.order));
            adj[b.j].push((b.i, b.order));
        }
        adj
    }
}

/// Bond order from the distance bands, scaled by the pair's covalent-radius sum.
pub fn bond_order(d: f64, radius_sum: f64, both_aromatic: bool) -> BondOrder {
    let s = radius_sum / CC_SINGLE;
    if d < TRIPLE_BELOW * s {
        BondOrder::Triple
    } else if both_aromatic && d >= AROMATIC_FROM * s && d <= DOUBLE_BELOW * s {
        BondOrder::Aromatic
    } else if d < DOUBLE_BELOW * s {
        BondOrder::Double
    } else {
        BondOrder::Single
    }
}

pub fn infer_bonds(mol: &Molecule) -> BondGraph {
    let atoms = mol.atoms();
    let mut bonds = Vec::new();
    for i in 0..atoms.len() {
        for j in i + 1..atoms.len() {
            let d = (atoms[i].position - atoms[j].position).norm();
            let sum = atoms[i].element().covalent_radius() + atoms[j].element().covalent_radius();
            if d <= sum + BOND_TOLERANCE {
                let aromatic = atoms[i].class.aromatic() && atoms[j].class.aromatic();
                bonds.push(Bond {
                    i,
                    j,
                    order: bond_order(d, sum, aromatic),
                    length: d,
                });
            }
        }
    }
    BondGraph {
        n_atoms: atoms.len(),
        bonds,
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

pub fn component_count(graph: &BondGraph) -> usize {
    let mut uf = UnionFind((0..graph.n_atoms).collect());
    for b in &graph.bonds {
        uf.union(b.i, b.j);
    }
    (0..graph.n_atoms).filter(|&i| uf.find(i) == i).count()
}

pub fn connectivity(mol: &Molecule) -> bool {
    component_count(&infer_bonds(mol)) == 1
}

/// Gaussian exponent whose integral with amplitude `p` equals the volume of
/// a sphere of radius `r`.
pub fn gaussian_exponent(r: f64) -> f64 {
    use std::f64::consts::PI;
    PI * (3.0 * GAUSSIAN_AMPLITUDE / (4.0 * PI)).powf(2.0 / 3.0) / (r * r)
}

/// Summed pairwise overlap of atom-centered Gaussians `(center, exponent)`.
pub fn overlap_volume(a: &[(Vec3, f64)], b: &[(Vec3, f64)]) -> f64 {
    use std::f64::consts::PI;
    let p2 = GAUSSIAN_AMPLITUDE * GAUSSIAN_AMPLITUDE;
    let mut v = 0.0;
    for (xa, aa) in a {
        for (xb, ab) in b {
            let s = aa + ab;
            v += (PI / s).powf(1.5) * p2 * (-aa * ab * (xa - xb).norm_squared() / s).exp();
        }
    }
    v
}

/// Gaussian-overlap Tanimoto in the given frames (no alignment).
pub fn overlap_tanimoto(a: &[(Vec3, f64)], b: &[(Vec3, f64)]) -> f64 {
    let vab = overlap_volume(a, b);
    vab / (overlap_volume(a, a) + overlap_volume(b, b) - vab)
}

fn gaussians(mol: &Molecule) -> Vec<(Vec3, f64)> {
    mol.atoms()
        .iter()
        .map(|a| (a.position, gaussian_exponent(a.element().vdw_radius())))
        .collect()
}

/// Coordinates in the centroid + principal-axes frame (axes by decreasing
/// variance, right-handed).
pub fn principal_frame(points: &[Vec3]) -> Vec<Vec3> {
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if axes.determinant() < 0.0 {
        axes.set_column(2, &(-axes.column(2)));
    }
    points.iter().map(|p| axes.transpose() * (p - c)).collect()
}

const FLIPS: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];

/// Shape similarity in `[0, 1]` after centroid and principal-axes alignment,
/// maximized over the four proper axis-sign flips.
pub fn shape_similarity(x: &Molecule, y: &Molecule) -> f64 {
    let frame = |m: &Molecule| {
        let pts = principal_frame(&m.positions());
        gaussians(m)
            .into_iter()
            .zip(pts)
            .map(|((_, a), p)| (p, a))
            .collect::<Vec<_>>()
    };
    let gx = frame(x);
    let gy = frame(y);
    FLIPS
        .iter()
        .map(|f| {
            let flipped: Vec<(Vec3, f64)> = gy
                .iter()
                .map(|(p, a)| (Vec3::new(p.x * f[0], p.y * f[1], p.z * f[2]), *a))
                .collect();
            overlap_tanimoto(&gx, &flipped)
        })
        .fold(0.0, f64::max)
}

fn fnv1a(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Per-radius atom environment identifiers of a circular fingerprint.
pub fn environment_ids(mol: &Molecule, graph: &BondGraph, radius: usize) -> Vec<Vec<u64>> {
    let adj = graph.neighbors();
    let mut ids: Vec<u64> = mol
        .atoms()
        .iter()
        .zip(&adj)
        .map(|(a, nb)| fnv1a(&[a.element() as u64, a.class.aromatic() as u64, nb.len() as u64]))
        .collect();
    let mut rounds = vec![ids.clone()];
    for r in 1..=radius {
        ids = (0..ids.len())
            .map(|i| {
                let mut nb: Vec<(u64, u64)> = adj[i].iter().map(|&(j, o)| (o.code(), ids[j])).collect();
                nb.sort_unstable();
                let mut words = vec![r as u64, ids[i]];
                words.extend(nb.into_iter().flat_map(|(o, id)| [o, id]));
                fnv1a(&words)
            })
            .collect();
        rounds.push(ids.clone());
    }
    rounds
}

/// Set bits of the folded circular fingerprint.
pub fn fingerprint(mol: &Molecule) -> BTreeSet<usize> {
    let graph = infer_bonds(mol);
    environment_ids(mol, &graph, FINGERPRINT_RADIUS)
        .into_iter()
        .flatten()
        .map(|id| (id % FINGERPRINT_BITS as u64) as usize)
        .collect()
}

pub fn tanimoto<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn graph_similarity(x: &Molecule, y: &Molecule) -> f64 {
    tanimoto(&fingerprint(x), &fingerprint(y))
}

/// One minus the mean pairwise graph similarity.
pub fn diversity(mols: &[Molecule]) -> Result<f64> {
    if mols.len() < 2 {
        return Err(invalid("diversity needs at least two molecules"));
    }
    let fps: Vec<_> = mols.iter().map(fingerprint).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            sum += tanimoto(&fps[i], &fps[j]);
            pairs += 1;
        }
    }
    Ok(1.0 - sum / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bins: 100,
            lo: 0.5,
            hi: 3.0,
        }
    }
}

/// Normalized histogram; values outside the range land in the edge bins.
pub fn histogram(values: &[f64], spec: HistogramSpec) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(invalid("empty bond set"));
    }
    if spec.bins == 0 || !(spec.hi > spec.lo) {
        return Err(invalid("histogram needs bins >= 1 and hi > lo"));
    }
    let width = (spec.hi - spec.lo) / spec.bins as f64;
    let mut h = vec![0.0; spec.bins];
    for v in values {
        let b = ((v - spec.lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(spec.bins - 1) };
        h[b] += 1.0;
    }
    let n = values.len() as f64;
    Ok(h.into_iter().map(|c| c / n).collect())
}

/// Jensen-Shannon divergence (natural log) with additive smoothing.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let smooth = |h: &[f64]| {
        let z: f64 = h.iter().map(|x| x + JS_SMOOTHING).sum();
        h.iter().map(|x| (x + JS_SMOOTHING) / z).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    let mut js = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        js += 0.5 * a * (a / m).ln() + 0.5 * b * (b / m).ln();
    }
    js
}

pub fn bond_lengths(mols: &[Molecule]) -> Vec<f64> {
    mols.iter()
        .flat_map(|m| infer_bonds(m).bonds.into_iter().map(|b| b.length))
        .collect()
}

pub fn js_divergence_bond_lengths(real: &[Molecule], generated: &[Molecule], spec: HistogramSpec) -> Result<f64> {
    let p = histogram(&bond_lengths(real), spec)?;
    let q = histogram(&bond_lengths(generated), spec)?;
    Ok(js_divergence(&p, &q))
}

/// Per-molecule scores against the condition molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeScores {
    pub connected: bool,
    pub shape_similarity: f64,
    pub graph_similarity: f64,
}

pub fn score(condition: &Molecule, generated: &Molecule) -> MoleculeScores {
    MoleculeScores {
        connected: connectivity(generated),
        shape_similarity: shape_similarity(condition, generated),
        graph_similarity: graph_similarity(condition, generated),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub max: f64,
    pub std: f64,
}

/// Mean, maximum and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Aggregate {
        mean,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std: var.sqrt(),
    })
}
