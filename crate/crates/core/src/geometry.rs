//! Molecules, molecular surfaces and the point-level geometry used by the
//! shape encoder.
//!
//! The molecular surface is the boundary of the union of atom-centered
//! van der Waals spheres. Signed distances are positive inside that union.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Noise;

pub type Vec3 = Vector3<f64>;

/// Number of atom feature classes (element x aromaticity).
pub const NUM_CLASSES: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Element {
    H,
    C,
    N,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 10] = [
        Element::H,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::P,
        Element::S,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.symbol() == s)
    }

    /// Van der Waals radius in Å.
    pub fn vdw_radius(self) -> f64 {
        match self {
            Element::H => 1.10,
            Element::C => 1.70,
            Element::N => 1.55,
            Element::O => 1.52,
            Element::F => 1.47,
            Element::P => 1.80,
            Element::S => 1.80,
            Element::Cl => 1.75,
            Element::Br => 1.85,
            Element::I => 1.98,
        }
    }

    /// Covalent radius in Å.
    pub fn covalent_radius(self) -> f64 {
        match self {
            Element::H => 0.31,
            Element::C => 0.76,
            Element::N => 0.71,
            Element::O => 0.66,
            Element::F => 0.57,
            Element::P => 1.07,
            Element::S => 1.05,
            Element::Cl => 1.02,
            Element::Br => 1.20,
            Element::I => 1.39,
        }
    }

    pub fn can_be_aromatic(self) -> bool {
        matches!(self, Element::C | Element::N | Element::O | Element::P | Element::S)
    }
}

/// One of the 15 atom feature classes: 10 non-aromatic elements followed by
/// aromatic C, N, O, P, S.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AtomClass(u8);

const AROMATIC: [Element; 5] = [Element::C, Element::N, Element::O, Element::P, Element::S];

impl AtomClass {
    pub fn new(element: Element, aromatic: bool) -> Result<Self> {
        if aromatic {
            AROMATIC
                .iter()
                .position(|&e| e == element)
                .map(|p| AtomClass(10 + p as u8))
                .ok_or_else(|| invalid(format!("{} cannot be aromatic", element.symbol())))
        } else {
            Ok(AtomClass(Element::ALL.iter().position(|&e| e == element).unwrap() as u8))
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i < NUM_CLASSES {
            Ok(AtomClass(i as u8))
        } else {
            Err(invalid(format!("class index {i} out of range")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn element(self) -> Element {
        let i = self.index();
        if i < 10 {
            Element::ALL[i]
        } else {
            AROMATIC[i - 10]
        }
    }

    pub fn aromatic(self) -> bool {
        self.index() >= 10
    }

    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub position: Vec3,
    pub class: AtomClass,
}

impl Atom {
    pub fn new(position: Vec3, class: AtomClass) -> Self {
        Self { position, class }
    }

    pub fn element(&self) -> Element {
        self.class.element()
    }

    pub fn feature(&self) -> [f64; NUM_CLASSES] {
        self.class.one_hot()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    atoms: Vec<Atom>,
}

impl Molecule {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMolecule);
        }
        for (i, a) in atoms.iter().enumerate() {
            if !a.position.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("atom {i} position")));
            }
            if atoms[..i].iter().any(|b| b.position == a.position) {
                return Err(invalid(format!("atom {i} duplicates an earlier position")));
            }
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.atoms.iter().map(|a| a.position).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        self.atoms.iter().map(|a| a.position).sum::<Vec3>() / self.atoms.len() as f64
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        self.map_positions(|p| p + offset)
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        self.map_positions(|p| r.matrix() * p)
    }

    pub fn map_positions(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            atoms: self.atoms.iter().map(|a| Atom::new(f(&a.position), a.class)).collect(),
        }
    }

    /// Axis-aligned bounds of the sphere union.
    pub fn surface_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for a in &self.atoms {
            let r = a.element().vdw_radius();
            lo = lo.inf(&a.position.add_scalar(-r));
            hi = hi.sup(&a.position.add_scalar(r));
        }
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub centered: bool,
    /// Mean that was subtracted during centering; add it back to un-center.
    pub offset: Vec3,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            centered: false,
            offset: Vec3::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len().max(1) as f64
    }

    /// Subtracts the mean; the accumulated offset is kept in `offset`.
    pub fn centered(mut self) -> Self {
        let m = self.mean();
        for p in &mut self.points {
            *p -= m;
        }
        self.offset += m;
        self.centered = true;
        self
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        Self {
            points: self.points.iter().map(|p| r.matrix() * p).collect(),
            centered: self.centered,
            offset: r.matrix() * self.offset,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuerySample {
    pub point: Vec3,
    /// Å, positive inside the surface.
    pub signed_distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let orth = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if orth > 1e-10 || (det - 1.0).abs() > 1e-10 {
            return Err(invalid("matrix is not a proper rotation"));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn from_noise(noise: &mut Noise) -> Self {
        // Normalized 4D Gaussian gives a uniformly distributed unit quaternion.
        loop {
            let q = Quaternion::new(
                noise.standard_normal(),
                noise.standard_normal(),
                noise.standard_normal(),
                noise.standard_normal(),
            );
            if q.norm() > 1e-8 {
                return Self(*UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix());
            }
        }
    }
}

/// Uniformly distributed proper rotation.
pub fn random_rotation(seed: u64) -> Rotation {
    Rotation::from_noise(&mut Noise::derived(seed, &[0x0807]))
}

/// Samples `n_points` points uniformly on the sphere-union surface and centers them.
pub fn build_surface_point_cloud(mol: &Molecule, n_points: usize, seed: u64) -> Result<PointCloud> {
    build_surface_point_cloud_with(mol, n_points, &mut Noise::derived(seed, &[0x5E7F]))
}

pub fn build_surface_point_cloud_with(mol: &Molecule, n_points: usize, noise: &mut Noise) -> Result<PointCloud> {
    if mol.is_empty() {
        return Err(Error::EmptyMolecule);
    }
    if n_points < 8 {
        return Err(invalid("need at least 8 surface points"));
    }
    let atoms = mol.atoms();
    let areas: Vec<f64> = atoms.iter().map(|a| a.element().vdw_radius().powi(2)).collect();
    let mut points = Vec::with_capacity(n_points);
    let max_attempts = 10_000 * n_points;
    let mut attempts = 0;
    while points.len() < n_points {
        attempts += 1;
        if attempts > max_attempts {
            return Err(invalid("surface sampling did not converge"));
        }
        let i = noise.categorical(&areas);
        let dir = loop {
            let v = noise.normal3();
            let n = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        };
        let r = atoms[i].element().vdw_radius();
        let p = atoms[i].position + dir * r;
        let buried = atoms
            .iter()
            .enumerate()
            .any(|(j, b)| j != i && (p - b.position).norm() < b.element().vdw_radius());
        if !buried {
            points.push(p);
        }
    }
    Ok(PointCloud::new(points).centered())
}

/// Signed distance to the sphere-union surface, positive inside.
pub fn signed_distance(mol: &Molecule, q: &Vec3) -> f64 {
    let min = mol
        .atoms()
        .iter()
        .map(|a| (q - a.position).norm() - a.element().vdw_radius())
        .fold(f64::INFINITY, f64::min);
    -min
}

/// Draws `k` query points in the surface bounding box (padded by 1 Å),
/// keeping at most `k/2` inside points.
pub fn sample_query_points(mol: &Molecule, k: usize, seed: u64) -> Result<Vec<QuerySample>> {
    sample_query_points_with(mol, k, &mut Noise::derived(seed, &[0x0E7]))
}

pub fn sample_query_points_with(mol: &Molecule, k: usize, noise: &mut Noise) -> Result<Vec<QuerySample>> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(invalid("query count must be even and at least 2"));
    }
    if mol.is_empty() {
        return Err(Error::EmptyMolecule);
    }
    let (lo, hi) = mol.surface_bounds();
    let lo = lo.add_scalar(-1.0);
    let hi = hi.add_scalar(1.0);
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    let mut draw = |count: usize, inside: &mut Vec<QuerySample>, outside: &mut Vec<QuerySample>| {
        for _ in 0..count {
            let p = Vec3::new(
                noise.uniform_range(lo.x, hi.x),
                noise.uniform_range(lo.y, hi.y),
                noise.uniform_range(lo.z, hi.z),
            );
            let sd = signed_distance(mol, &p);
            let s = QuerySample {
                point: p,
                signed_distance: sd,
            };
            if sd > 0.0 {
                inside.push(s);
            } else {
                outside.push(s);
            }
        }
    };
    draw(3 * k, &mut inside, &mut outside);
    let n_in = inside.len().min(k / 2);
    // The 1 Å margin is always outside, so extra rounds terminate quickly.
    while outside.len() < k - n_in {
        draw(k, &mut Vec::new(), &mut outside);
    }
    let mut out: Vec<QuerySample> = inside.into_iter().take(n_in).collect();
    out.extend(outside.into_iter().take(k - n_in));
    Ok(out)
}

/// k-nearest-neighbor lists, ties broken by lower index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    /// `neighbors[i * k + m]` is the `m`-th nearest neighbor of `i`.
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn n_nodes(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Directed edges `i -> j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(e, &j)| (e / self.k, j))
            .collect()
    }
}

pub fn knn_graph(points: &[Vec3], k: usize) -> Result<KnnGraph> {
    let n = points.len();
    if k >= n {
        return Err(invalid(format!("k = {k} needs more than {n} points")));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| ((points[i] - points[j]).norm_squared(), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k > 0 && k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_by(cmp);
        neighbors.extend(cand[..k].iter().map(|c| c.1));
    }
    Ok(KnnGraph { k, neighbors })
}
