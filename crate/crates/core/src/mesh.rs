//! Watertight triangle meshes for cells and clusters.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Rotation3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    clamp_cluster, satisfies, separate_positions, CellFeatures, ClusterFeatures, ConstraintSet,
    Vec3,
};

pub const MAX_SUBDIVISIONS: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Material {
    Membrane,
    Nucleus,
}

impl Material {
    pub fn name(self) -> &'static str {
        match self {
            Material::Membrane => "membrane",
            Material::Nucleus => "nucleus",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// One label per triangle.
    pub materials: Vec<Material>,
}

impl Mesh {
    /// Axis-aligned unit cube `[0,1]^3`, outward oriented.
    pub fn unit_cube() -> Self {
        let vertices = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let triangles = vec![
            [0, 2, 1], [1, 2, 3], // z = 0
            [4, 5, 6], [5, 7, 6], // z = 1
            [0, 1, 4], [1, 5, 4], // y = 0
            [2, 6, 3], [3, 6, 7], // y = 1
            [0, 4, 2], [2, 4, 6], // x = 0
            [1, 3, 5], [3, 7, 5], // x = 1
        ];
        Self {
            vertices,
            materials: vec![Material::Membrane; 12],
            triangles,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v + t).collect(),
            ..self.clone()
        }
    }

    /// Every undirected edge is used by exactly two triangles, once in each
    /// direction (closed and consistently oriented).
    pub fn check_watertight(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::NotWatertight("mesh has no triangles".into()));
        }
        if self.materials.len() != self.triangles.len() {
            return Err(Error::Shape("one material per triangle required".into()));
        }
        let nv = self.vertices.len() as u32;
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.triangles.len() * 3);
        for t in &self.triangles {
            if t.iter().any(|&i| i >= nv) {
                return Err(Error::NotWatertight("triangle index out of range".into()));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::NotWatertight("degenerate triangle".into()));
            }
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &n) in &directed {
            if n != 1 {
                return Err(Error::NotWatertight(format!("edge ({a},{b}) used {n} times in one direction")));
            }
            if directed.get(&(b, a)) != Some(&1) {
                return Err(Error::NotWatertight(format!("edge ({a},{b}) has no opposite")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("mesh vertices".into()));
        }
        Ok(())
    }

    /// Signed volume and volume centroid of the triangles matching `filter`.
    fn volume_moments(&self, filter: impl Fn(Material) -> bool) -> (f64, Vec3) {
        // accumulate 6V and 24M, divide once
        let mut vol6 = 0.0;
        let mut moment24 = Vec3::zeros();
        for (t, m) in self.triangles.iter().zip(&self.materials) {
            if !filter(*m) {
                continue;
            }
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            let v6 = a.dot(&b.cross(&c));
            vol6 += v6;
            moment24 += (a + b + c) * v6;
        }
        (vol6 / 6.0, moment24 / 24.0)
    }

    /// Volume enclosed by the outer (membrane) shell, or by all triangles
    /// if there is no membrane, and its centroid.
    pub fn outer_volume_centroid(&self) -> (f64, Vec3) {
        let has_membrane = self.materials.contains(&Material::Membrane);
        let (vol, moment) = self.volume_moments(|m| !has_membrane || m == Material::Membrane);
        let centroid = if vol.abs() > 1e-300 {
            moment / vol
        } else {
            vertex_mean(&self.vertices)
        };
        (vol, centroid)
    }

    /// Vertex indices bordering each vertex.
    pub fn neighbours(&self) -> Vec<Vec<u32>> {
        let mut nb: Vec<Vec<u32>> = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if !nb[a as usize].contains(&b) {
                    nb[a as usize].push(b);
                }
                if !nb[b as usize].contains(&a) {
                    nb[b as usize].push(a);
                }
            }
        }
        nb
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let fn_ = (b - a).cross(&(c - a));
            for &i in t {
                n[i as usize] += fn_;
            }
        }
        n.iter()
            .map(|v| v.try_normalize(1e-300).unwrap_or_else(Vec3::zeros))
            .collect()
    }

    /// Append `other`, offsetting its indices.
    pub fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
        self.materials.extend_from_slice(&other.materials);
    }

    /// Sub-mesh of the triangles with the given material (vertices shared).
    pub fn triangles_of(&self, material: Material) -> impl Iterator<Item = [Vec3; 3]> + '_ {
        self.triangles
            .iter()
            .zip(&self.materials)
            .filter(move |(_, m)| **m == material)
            .map(|(t, _)| t.map(|i| self.vertices[i as usize]))
    }
}

fn vertex_mean(v: &[Vec3]) -> Vec3 {
    if v.is_empty() {
        return Vec3::zeros();
    }
    v.iter().fold(Vec3::zeros(), |a, p| a + p) / v.len() as f64
}

/// Enclosed volume by signed tetrahedra about the origin.
pub fn mesh_volume(m: &Mesh) -> Result<f64> {
    m.check_watertight()?;
    Ok(m.volume_moments(|_| true).0)
}

fn build_icosphere(subdivisions: u32) -> Mesh {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, p, 0.0), (1.0, p, 0.0), (-1.0, -p, 0.0), (1.0, -p, 0.0),
        (0.0, -1.0, p), (0.0, 1.0, p), (0.0, -1.0, -p), (0.0, 1.0, -p),
        (p, 0.0, -1.0), (p, 0.0, 1.0), (-p, 0.0, -1.0), (-p, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let m = (verts[a as usize] + verts[b as usize]).normalize();
                verts.push(m);
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for &[a, b, c] in &triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    let n = triangles.len();
    Mesh {
        vertices,
        triangles,
        materials: vec![Material::Membrane; n],
    }
}

/// Unit icosphere with `20 * 4^s` triangles.
pub fn icosphere(subdivisions: u32) -> Result<Mesh> {
    Ok(icosphere_cached(subdivisions)?.clone())
}

fn icosphere_cached(subdivisions: u32) -> Result<&'static Mesh> {
    static CACHE: [OnceLock<Mesh>; (MAX_SUBDIVISIONS + 1) as usize] =
        [const { OnceLock::new() }; (MAX_SUBDIVISIONS + 1) as usize];
    if subdivisions > MAX_SUBDIVISIONS {
        return Err(Error::InvalidArgument(format!(
            "icosphere subdivisions must be in 0..={MAX_SUBDIVISIONS}, got {subdivisions}"
        )));
    }
    Ok(CACHE[subdivisions as usize].get_or_init(|| build_icosphere(subdivisions)))
}

/// `n` roughly evenly spread unit directions (Fibonacci lattice).
pub fn anchor_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let a = golden * k as f64;
            Vec3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

/// Inverse-distance interpolation of anchor coefficients at direction `u`.
fn interpolate(u: &Vec3, anchors: &[Vec3], coeffs: &[f64]) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for (a, c) in anchors.iter().zip(coeffs) {
        let d2 = (u - a).norm_squared();
        if d2 < 1e-18 {
            return *c;
        }
        let w = 1.0 / d2;
        wsum += w;
        acc += w * c;
    }
    acc / wsum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellBuildOptions {
    pub subdivisions: u32,
    pub smoothing_passes: usize,
    pub smoothing_lambda: f64,
}

impl Default for CellBuildOptions {
    fn default() -> Self {
        Self {
            subdivisions: 3,
            smoothing_passes: 3,
            smoothing_lambda: 0.5,
        }
    }
}

/// Uniform-weight Jacobi Laplacian smoothing of a per-vertex vector field.
pub fn laplacian_smooth(field: &mut [Vec3], neighbours: &[Vec<u32>], passes: usize, lambda: f64) {
    let mut next = field.to_vec();
    for _ in 0..passes {
        for (i, nb) in neighbours.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            let mean = nb.iter().fold(Vec3::zeros(), |a, &j| a + field[j as usize]) / nb.len() as f64;
            next[i] = field[i] + (mean - field[i]) * lambda;
        }
        field.copy_from_slice(&next);
    }
}

/// Largest displacement difference across any mesh edge.
pub fn max_edge_jump(field: &[Vec3], neighbours: &[Vec<u32>]) -> f64 {
    neighbours
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j as usize)))
        .map(|(i, j)| (field[i] - field[j]).norm())
        .fold(0.0, f64::max)
}

struct ShellParams<'a> {
    base_radius: f64,
    coeffs: &'a [f64],
    strength: f64,
    distance: f64,
}

/// Deformed shell positions: radial deformation, normal displacement with
/// gaussian falloff from the nearest anchor, then smoothing of the
/// displacement relative to the undeformed sphere.
fn shell_positions(base: &Mesh, nb: &[Vec<u32>], p: &ShellParams, opts: &CellBuildOptions) -> Vec<Vec3> {
    let anchors = anchor_directions(p.coeffs.len());
    let mut pos: Vec<Vec3> = base
        .vertices
        .iter()
        .map(|u| u * p.base_radius * (1.0 + interpolate(u, &anchors, p.coeffs)))
        .collect();
    if p.strength != 0.0 {
        let falloff_anchors = anchor_directions(p.coeffs.len().max(12));
        let deformed = Mesh {
            vertices: pos.clone(),
            ..base.clone()
        };
        let normals = deformed.vertex_normals();
        let d2 = p.distance * p.distance;
        for ((v, u), n) in pos.iter_mut().zip(&base.vertices).zip(&normals) {
            let best = falloff_anchors.iter().map(|a| u.dot(a)).fold(-1.0f64, f64::max);
            let angle = best.clamp(-1.0, 1.0).acos();
            *v += n * (p.strength * (-(angle * angle) / d2).exp());
        }
    }
    let mut disp: Vec<Vec3> = pos
        .iter()
        .zip(&base.vertices)
        .map(|(v, u)| v - u * p.base_radius)
        .collect();
    laplacian_smooth(&mut disp, nb, opts.smoothing_passes, opts.smoothing_lambda);
    base.vertices
        .iter()
        .zip(&disp)
        .map(|(u, d)| u * p.base_radius + d)
        .collect()
}

const RAY_DIR: [f64; 3] = [0.543_092_814, 0.621_357_094, 0.564_752_671];

fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> bool {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return false;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    e2.dot(&q) * inv > 0.0
}

/// Ray-parity point-in-solid test against a closed triangle set.
pub fn point_in_triangles(p: &Vec3, tris: &[[Vec3; 3]]) -> bool {
    let dir = Vec3::new(RAY_DIR[0], RAY_DIR[1], RAY_DIR[2]).normalize();
    tris.iter().filter(|t| ray_triangle(p, &dir, t)).count() % 2 == 1
}

/// Closest distance between a point and a triangle.
pub fn point_triangle_distance(p: &Vec3, t: &[Vec3; 3]) -> f64 {
    // Ericson, closest point on triangle by Voronoi regions
    let (a, b, c) = (t[0], t[1], t[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (p - a).norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (p - b).norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (p - c).norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Containment oracle for a closed shell: a ball around an interior point
/// that touches no triangle is inside, everything else is ray-tested.
struct Container {
    tris: Vec<[Vec3; 3]>,
    centre: Vec3,
    inner_radius: f64,
}

impl Container {
    fn new(tris: Vec<[Vec3; 3]>, centre: Vec3) -> Self {
        let inner_radius = if point_in_triangles(&centre, &tris) {
            tris.iter()
                .map(|t| point_triangle_distance(&centre, t))
                .fold(f64::INFINITY, f64::min)
        } else {
            0.0
        };
        Self {
            tris,
            centre,
            inner_radius,
        }
    }

    fn contains(&self, p: &Vec3) -> bool {
        if (p - self.centre).norm() < self.inner_radius * (1.0 - 1e-9) {
            return true;
        }
        point_in_triangles(p, &self.tris)
    }
}

/// Build a cell mesh (membrane shell plus optional nucleus shell).
pub fn build_cell(f: &CellFeatures, c: &ConstraintSet) -> Result<Mesh> {
    build_cell_with(f, c, &CellBuildOptions::default())
}

pub fn build_cell_with(f: &CellFeatures, c: &ConstraintSet, opts: &CellBuildOptions) -> Result<Mesh> {
    if !satisfies(f, c) {
        return Err(Error::Validation(
            "cell features violate the constraint set; clamp them first".into(),
        ));
    }
    let base = icosphere_cached(opts.subdivisions)?;
    let nb = shared_neighbours(opts.subdivisions)?;
    let membrane = shell_positions(
        base,
        nb,
        &ShellParams {
            base_radius: 1.0,
            coeffs: &f.deformation,
            strength: f.surface_strength,
            distance: f.surface_distance,
        },
        opts,
    );
    let mut mesh = Mesh {
        vertices: membrane,
        triangles: base.triangles.clone(),
        materials: vec![Material::Membrane; base.triangles.len()],
    };
    if c.layout.has_nucleus {
        let offset = Vec3::new(f.nucleus_offset[0], f.nucleus_offset[1], f.nucleus_offset[2]);
        let local = shell_positions(
            base,
            nb,
            &ShellParams {
                base_radius: c.nucleus_radius,
                coeffs: &f.nucleus_deformation,
                strength: 0.0,
                distance: 1.0,
            },
            opts,
        );
        let container = Container::new(mesh.triangles_of(Material::Membrane).collect(), Vec3::zeros());
        let nucleus = fit_nucleus(&local, offset, &container);
        mesh.append(&Mesh {
            vertices: nucleus,
            triangles: base.triangles.clone(),
            materials: vec![Material::Nucleus; base.triangles.len()],
        });
    }
    for v in &mut mesh.vertices {
        *v *= f.scale;
    }
    Ok(mesh)
}

/// Place the nucleus at `offset`, shrinking it about its own centre until
/// every vertex is inside the membrane. If the centre itself is outside it
/// is pulled toward the membrane centre as well.
fn fit_nucleus(local: &[Vec3], offset: Vec3, container: &Container) -> Vec<Vec3> {
    let mut centre = offset;
    let mut k = 1.0;
    for step in 0..200 {
        let placed: Vec<Vec3> = local.iter().map(|v| centre + v * k).collect();
        if placed.iter().all(|p| container.contains(p)) {
            return placed;
        }
        k *= 0.9;
        if step >= 40 {
            centre *= 0.9;
        }
    }
    local.iter().map(|v| container.centre + v * (k * 1e-3)).collect()
}

fn shared_neighbours(subdivisions: u32) -> Result<&'static Vec<Vec<u32>>> {
    static CACHE: [OnceLock<Vec<Vec<u32>>>; (MAX_SUBDIVISIONS + 1) as usize] =
        [const { OnceLock::new() }; (MAX_SUBDIVISIONS + 1) as usize];
    let base = icosphere_cached(subdivisions)?;
    Ok(CACHE[subdivisions as usize].get_or_init(|| base.neighbours()))
}

/// Rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }
}

impl RigidTransform {
    pub fn translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.rotation * v + self.translation
    }

    /// `other ∘ self`.
    pub fn then(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub mesh: Mesh,
    pub transform: RigidTransform,
    pub membrane_color: [f64; 4],
    pub nucleus_color: [f64; 4],
}

impl SceneObject {
    pub fn new(mesh: Mesh) -> Self {
        Self {
            mesh,
            transform: RigidTransform::default(),
            membrane_color: [0.8, 0.5, 0.7, 1.0],
            nucleus_color: [0.3, 0.2, 0.6, 1.0],
        }
    }

    pub fn world_vertices(&self) -> Vec<Vec3> {
        self.mesh.vertices.iter().map(|v| self.transform.apply(v)).collect()
    }

    pub fn color(&self, m: Material) -> [f64; 4] {
        match m {
            Material::Membrane => self.membrane_color,
            Material::Nucleus => self.nucleus_color,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>) -> Self {
        Self { objects }
    }

    pub fn single(mesh: Mesh) -> Self {
        Self::new(vec![SceneObject::new(mesh)])
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Centre and radius of a sphere enclosing every vertex.
    pub fn bounding_sphere(&self) -> Option<(Vec3, f64)> {
        let all: Vec<Vec3> = self.objects.iter().flat_map(|o| o.world_vertices()).collect();
        if all.is_empty() {
            return None;
        }
        let centre = vertex_mean(&all);
        let r = all.iter().map(|v| (v - centre).norm()).fold(0.0, f64::max);
        Some((centre, r))
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            objects: self
                .objects
                .iter()
                .map(|o| SceneObject {
                    transform: o.transform.then(t),
                    ..o.clone()
                })
                .collect(),
        }
    }

    pub fn translated(&self, t: Vec3) -> Self {
        self.transformed(&RigidTransform::translation(t))
    }

    /// Rotate about the axis through `pivot`.
    pub fn rotated(&self, axis: Vec3, angle: f64, pivot: Vec3) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner();
        self.transformed(&RigidTransform {
            rotation: r,
            translation: pivot - r * pivot,
        })
    }
}

/// Volume-weighted centroid of the outer shells of all objects.
pub fn center_of_gravity(s: &Scene) -> Result<Vec3> {
    if s.is_empty() {
        return Err(Error::Empty("scene has no meshes".into()));
    }
    let mut vol = 0.0;
    let mut moment = Vec3::zeros();
    for o in &s.objects {
        let (v, c) = o.mesh.outer_volume_centroid();
        vol += v;
        moment += o.transform.apply(&c) * v;
    }
    if vol.abs() > 1e-300 {
        Ok(moment / vol)
    } else {
        let all: Vec<Vec3> = s.objects.iter().flat_map(|o| o.world_vertices()).collect();
        Ok(vertex_mean(&all))
    }
}

pub fn cell_object(f: &CellFeatures, c: &ConstraintSet, opts: &CellBuildOptions) -> Result<SceneObject> {
    Ok(SceneObject {
        mesh: build_cell_with(f, c, opts)?,
        transform: RigidTransform::default(),
        membrane_color: f.membrane_rgba(&c.palette),
        nucleus_color: f.nucleus_rgba(&c.palette),
    })
}

/// One positioned cell mesh per cluster member, with the overlap floor
/// enforced.
pub fn assemble_cluster(g: &ClusterFeatures, c: &ConstraintSet) -> Result<Scene> {
    assemble_cluster_with(g, c, &CellBuildOptions::default())
}

pub fn assemble_cluster_with(
    g: &ClusterFeatures,
    c: &ConstraintSet,
    opts: &CellBuildOptions,
) -> Result<Scene> {
    let g = clamp_cluster(g, c)?;
    let mut positions: Vec<Vec3> = g.positions.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
    let scales: Vec<f64> = g.cells.iter().map(|f| f.scale).collect();
    separate_positions(&mut positions, &scales);
    let objects = g
        .cells
        .iter()
        .zip(&positions)
        .map(|(f, p)| {
            let mut o = cell_object(f, c, opts)?;
            o.transform = RigidTransform::translation(*p);
            Ok(o)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene::new(objects))
}

/// Serialize a scene as Wavefront OBJ in world coordinates.
pub fn obj_string(s: &Scene) -> Result<String> {
    if s.is_empty() {
        return Err(Error::Empty("cannot export an empty scene".into()));
    }
    let mut out = String::from("# cellsynth scene\n");
    let mut base = 1usize;
    for (k, o) in s.objects.iter().enumerate() {
        writeln!(out, "o cell_{k}").unwrap();
        for v in o.world_vertices() {
            writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z).unwrap();
        }
        for material in [Material::Membrane, Material::Nucleus] {
            let faces: Vec<&[u32; 3]> = o
                .mesh
                .triangles
                .iter()
                .zip(&o.mesh.materials)
                .filter(|(_, m)| **m == material)
                .map(|(t, _)| t)
                .collect();
            if faces.is_empty() {
                continue;
            }
            writeln!(out, "usemtl {}", material.name()).unwrap();
            for t in faces {
                let [a, b, c] = t.map(|i| i as usize + base);
                writeln!(out, "f {a} {b} {c}").unwrap();
            }
        }
        base += o.mesh.vertices.len();
    }
    Ok(out)
}

pub fn export_obj(s: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let text = obj_string(s)?;
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

/// Parse OBJ text written by [`obj_string`] (one object per `o` record).
pub fn parse_obj(text: &str) -> Result<Scene> {
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut all_vertices: Vec<Vec3> = Vec::new();
    let mut object_base = 0usize;
    let mut material = Material::Membrane;
    let bad = |line: &str| Error::InvalidArgument(format!("malformed OBJ line: {line}"));
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("o") => {
                object_base = all_vertices.len();
                objects.push(SceneObject::new(Mesh {
                    vertices: Vec::new(),
                    triangles: Vec::new(),
                    materials: Vec::new(),
                }));
            }
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .map(|p| p.parse::<f64>().map_err(|_| bad(line)))
                    .collect::<Result<_>>()?;
                if xyz.len() < 3 {
                    return Err(bad(line));
                }
                let v = Vec3::new(xyz[0], xyz[1], xyz[2]);
                all_vertices.push(v);
                objects.last_mut().ok_or_else(|| bad(line))?.mesh.vertices.push(v);
            }
            Some("usemtl") => {
                material = match parts.next() {
                    Some("nucleus") => Material::Nucleus,
                    _ => Material::Membrane,
                };
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| {
                        p.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .ok_or_else(|| bad(line))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 || idx.iter().any(|&i| i <= object_base || i > all_vertices.len()) {
                    return Err(bad(line));
                }
                let o = objects.last_mut().ok_or_else(|| bad(line))?;
                o.mesh.triangles.push(idx.map_into(object_base));
                o.mesh.materials.push(material);
            }
            _ => {}
        }
    }
    Ok(Scene::new(objects))
}

trait MapInto {
    fn map_into(self, base: usize) -> [u32; 3];
}

impl MapInto for Vec<usize> {
    fn map_into(self, base: usize) -> [u32; 3] {
        [
            (self[0] - base - 1) as u32,
            (self[1] - base - 1) as u32,
            (self[2] - base - 1) as u32,
        ]
    }
}

pub fn import_obj(path: impl AsRef<Path>) -> Result<Scene> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_obj(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{random_features, FeatureLayout};
    use std::f64::consts::PI;

    const SPHERE_VOLUME: f64 = 4.0 * PI / 3.0;

    fn neutral(c: &ConstraintSet) -> CellFeatures {
        let mut f = random_features(&c.layout, c, 0).unwrap();
        f.deformation.iter_mut().for_each(|x| *x = 0.0);
        f.nucleus_deformation.iter_mut().for_each(|x| *x = 0.0);
        f.nucleus_offset = [0.0; 3];
        f.surface_strength = 0.0;
        f.scale = 1.0;
        f
    }

    #[test]
    fn icosahedron_counts() {
        let m = icosphere(0).unwrap();
        assert_eq!(m.triangles.len(), 20);
        assert_eq!(m.vertices.len(), 12);
        for s in 0..=4 {
            let m = icosphere(s).unwrap();
            assert_eq!(m.triangles.len(), 20 * 4usize.pow(s));
            m.check_watertight().unwrap();
        }
        assert!(icosphere(7).is_err());
    }

    #[test]
    fn icosphere_volume_close_to_ball() {
        let v = mesh_volume(&icosphere(3).unwrap()).unwrap();
        assert!((v - SPHERE_VOLUME).abs() / SPHERE_VOLUME < 0.02, "{v}");
    }

    #[test]
    fn unit_cube_volume_exact() {
        assert_eq!(mesh_volume(&Mesh::unit_cube()).unwrap(), 1.0);
        let v = mesh_volume(&Mesh::unit_cube().scaled(3.0)).unwrap();
        assert!((v - 27.0).abs() / 27.0 < 1e-9);
    }

    #[test]
    fn open_mesh_rejected() {
        let mut m = Mesh::unit_cube();
        m.triangles.pop();
        m.materials.pop();
        assert!(matches!(mesh_volume(&m), Err(Error::NotWatertight(_))));
    }

    #[test]
    fn neutral_cell_is_unit_icosphere() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let m = build_cell(&neutral(&c), &c).unwrap();
        m.check_watertight().unwrap();
        let (v, _) = m.outer_volume_centroid();
        assert!((v - SPHERE_VOLUME).abs() / SPHERE_VOLUME < 0.02, "{v}");
    }

    #[test]
    fn cell_volume_scales_cubically() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let mut f = random_features(&c.layout, &c, 11).unwrap();
        f.scale = 1.0;
        let v1 = mesh_volume(&build_cell(&f, &c).unwrap()).unwrap();
        f.scale = 1.5;
        let v2 = mesh_volume(&build_cell(&f, &c).unwrap()).unwrap();
        assert!((v2 / v1 - 1.5f64.powi(3)).abs() / 1.5f64.powi(3) < 0.01);
    }

    #[test]
    fn unclamped_features_rejected() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let mut f = neutral(&c);
        f.scale = 10.0;
        assert!(matches!(build_cell(&f, &c), Err(Error::Validation(_))));
    }

    #[test]
    fn nucleus_inside_membrane_for_random_cells() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        for seed in 0..10 {
            let f = random_features(&c.layout, &c, seed).unwrap();
            let m = build_cell(&f, &c).unwrap();
            let membrane: Vec<[Vec3; 3]> = m.triangles_of(Material::Membrane).collect();
            let nucleus_vertices: Vec<usize> = m
                .triangles
                .iter()
                .zip(&m.materials)
                .filter(|(_, mat)| **mat == Material::Nucleus)
                .flat_map(|(t, _)| t.iter().map(|&i| i as usize))
                .collect();
            for i in nucleus_vertices {
                assert!(point_in_triangles(&m.vertices[i], &membrane));
            }
        }
    }

    #[test]
    fn nucleus_shrunk_when_it_would_escape() {
        let mut c = ConstraintSet::preset("table1-32").unwrap();
        c.nucleus_radius = 0.95;
        c.nucleus_offset = crate::features::Bounds::new(-0.5, 0.5);
        let mut f = neutral(&c);
        f.nucleus_offset = [0.5, 0.0, 0.0];
        let m = build_cell(&f, &c).unwrap();
        let membrane: Vec<[Vec3; 3]> = m.triangles_of(Material::Membrane).collect();
        let n = m.triangles_of(Material::Nucleus).flatten().all(|v| point_in_triangles(&v, &membrane));
        assert!(n);
    }

    #[test]
    fn build_is_deterministic() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let f = random_features(&c.layout, &c, 4).unwrap();
        let a = build_cell(&f, &c).unwrap();
        let b = build_cell(&f, &c).unwrap();
        let bits = |m: &Mesh| m.vertices.iter().flat_map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn smoothing_does_not_increase_edge_jump() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let base = icosphere(3).unwrap();
        let nb = base.neighbours();
        let anchors = anchor_directions(12);
        for seed in 0..10 {
            let f = random_features(&c.layout, &c, seed).unwrap();
            let mut disp: Vec<Vec3> = base
                .vertices
                .iter()
                .map(|u| u * interpolate(u, &anchors, &f.deformation))
                .collect();
            let before = max_edge_jump(&disp, &nb);
            laplacian_smooth(&mut disp, &nb, 3, 0.5);
            assert!(max_edge_jump(&disp, &nb) <= before + 1e-15);
        }
    }

    #[test]
    fn cog_of_symmetric_pair_is_origin() {
        let s = icosphere(2).unwrap();
        let mut a = SceneObject::new(s.clone());
        a.transform = RigidTransform::translation(Vec3::new(2.0, 0.0, 0.0));
        let mut b = SceneObject::new(s.clone());
        b.transform = RigidTransform::translation(Vec3::new(-2.0, 0.0, 0.0));
        let cog = center_of_gravity(&Scene::new(vec![a, b])).unwrap();
        assert!(cog.norm() < 1e-12);
        let single = Scene::single(s);
        assert!(center_of_gravity(&single).unwrap().norm() < 1e-12);
        let t = Vec3::new(0.3, -1.0, 2.0);
        assert!((center_of_gravity(&single.translated(t)).unwrap() - t).norm() < 1e-12);
        assert!(center_of_gravity(&Scene::default()).is_err());
    }

    #[test]
    fn cluster_assembly() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let f = random_features(&c.layout, &c, 2).unwrap();
        let g = ClusterFeatures {
            cells: vec![f.clone()],
            positions: vec![[0.0; 3]],
        };
        let s = assemble_cluster(&g, &c).unwrap();
        assert_eq!(s.objects.len(), 1);

        let g = ClusterFeatures {
            cells: vec![neutral(&c), neutral(&c)],
            positions: vec![[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]],
        };
        let s = assemble_cluster(&g, &c).unwrap();
        assert!(center_of_gravity(&s).unwrap().norm() < 1e-9);

        let g = ClusterFeatures {
            cells: vec![f.clone(), f],
            positions: vec![[0.5, 0.5, 0.0]; 2],
        };
        let s = assemble_cluster(&g, &c).unwrap();
        let p: Vec<Vec3> = s.objects.iter().map(|o| o.transform.translation).collect();
        let floor = crate::features::overlap_floor(g.cells[0].scale, g.cells[1].scale);
        assert!((p[0] - p[1]).norm() >= floor);
    }

    #[test]
    fn obj_round_trip_and_counts() {
        let s = Scene::single(icosphere(1).unwrap());
        let text = obj_string(&s).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 80);
        let back = parse_obj(&text).unwrap();
        assert_eq!(back.objects[0].mesh.triangles.len(), 80);
        assert!(obj_string(&Scene::default()).is_err());

        let c = ConstraintSet::with_layout(FeatureLayout::preset(32).unwrap());
        let g = ClusterFeatures {
            cells: (0..3).map(|k| random_features(&c.layout, &c, k).unwrap()).collect(),
            positions: vec![[0.0; 3], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
        };
        let scene = assemble_cluster(&g, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cluster.obj");
        export_obj(&scene, &path).unwrap();
        let back = import_obj(&path).unwrap();
        assert_eq!(back.objects.len(), 3);
        for (a, b) in scene.objects.iter().zip(&back.objects) {
            assert_eq!(a.mesh.triangles, b.mesh.triangles);
            assert_eq!(a.mesh.materials, b.mesh.materials);
            b.mesh.check_watertight().unwrap();
            for (va, vb) in a.world_vertices().iter().zip(&b.mesh.vertices) {
                assert!((va - vb).amax() <= 5e-7);
            }
        }
    }
}
