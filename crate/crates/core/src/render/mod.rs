//! Orthographic projections and planar cross-sections of scenes.
//!
//! The camera for angles `(theta, phi)` is the rotation `Rz(phi) * Ry(theta)`
//! applied to the canonical frame: the view direction is the spherical unit
//! vector `(sinθ cosφ, sinθ sinφ, cosθ)`, image x follows the rotated x axis
//! and image y the rotated y axis (row 0 at the top). Every image is centred
//! on the scene's center of gravity and spans `world_extent` world units.
//!
//! Coverage is supersampled on a 3x3 grid per pixel and box filtered, so
//! antialiasing only ever touches the 1-pixel band on silhouette edges.

mod image;

pub use self::image::{connected_components, Image};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Vec3;
use crate::mesh::{center_of_gravity, Material, Scene};

/// Supersampling factor per axis.
pub const SUPERSAMPLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    Projection,
    CrossSection,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Self::Projection),
            "cross-section" => Ok(Self::CrossSection),
            other => Err(Error::InvalidArgument(format!("unknown render mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
    pub size: usize,
    pub mode: RenderMode,
    pub world_extent: f64,
}

impl ProjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thetas.is_empty() || self.phis.is_empty() {
            return Err(Error::InvalidArgument("angle lists must be nonempty".into()));
        }
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("image size {} < 16", self.size)));
        }
        if !(self.world_extent > 0.0) {
            return Err(Error::InvalidArgument("world_extent must be > 0".into()));
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.thetas.len() * self.phis.len()
    }

    /// `(theta, phi)` pairs in row-major order.
    pub fn angles(&self) -> Vec<(f64, f64)> {
        self.thetas
            .iter()
            .flat_map(|&t| self.phis.iter().map(move |&p| (t, p)))
            .collect()
    }
}

/// Orthonormal camera frame for `(theta, phi)`.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl Camera {
    pub fn new(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        // columns of Rz(phi) * Ry(theta)
        Self {
            right: Vec3::new(cp * ct, sp * ct, -st),
            up: Vec3::new(-sp, cp, 0.0),
            forward: Vec3::new(cp * st, sp * st, ct),
        }
    }
}

/// Maps world points into supersampled raster coordinates.
struct Frame {
    camera: Camera,
    centre: Vec3,
    /// Sub-samples per world unit.
    density: f64,
    half: f64,
}

impl Frame {
    fn new(camera: Camera, centre: Vec3, size: usize, world_extent: f64) -> Self {
        let sub = (size * SUPERSAMPLE) as f64;
        Self {
            camera,
            centre,
            density: sub / world_extent,
            half: sub / 2.0,
        }
    }

    /// (x, y, depth) with depth increasing toward the viewer.
    fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let d = p - self.centre;
        (
            self.half + self.camera.right.dot(&d) * self.density,
            self.half - self.camera.up.dot(&d) * self.density,
            self.camera.forward.dot(&d),
        )
    }
}

/// Supersampled color buffer.
struct SampleBuffer {
    sub: usize,
    color: Vec<[f64; 4]>,
    covered: Vec<bool>,
}

impl SampleBuffer {
    fn new(size: usize) -> Self {
        let sub = size * SUPERSAMPLE;
        Self {
            sub,
            color: vec![[0.0; 4]; sub * sub],
            covered: vec![false; sub * sub],
        }
    }

    fn resolve(&self, size: usize) -> Image {
        let mut img = Image::new(size, size);
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0; 4];
                let mut k = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let i = (py * SUPERSAMPLE + sy) * self.sub + px * SUPERSAMPLE + sx;
                        if self.covered[i] {
                            k += 1;
                            for c in 0..4 {
                                acc[c] += self.color[i][c];
                            }
                        }
                    }
                }
                if k > 0 {
                    let kf = k as f64;
                    img.set_pixel(
                        px,
                        py,
                        [acc[0] / kf, acc[1] / kf, acc[2] / kf, (acc[3] / kf) * (kf / n)],
                    );
                }
            }
        }
        img
    }
}

fn scene_is_degenerate(s: &Scene) -> bool {
    let vol: f64 = s
        .objects
        .iter()
        .map(|o| o.mesh.outer_volume_centroid().0.abs())
        .sum();
    vol < 1e-12
}

/// Orthographic, depth-buffered, flat-shaded projection.
pub fn project(s: &Scene, theta: f64, phi: f64, size: usize, world_extent: f64) -> Result<Image> {
    let centre = center_of_gravity(s)?;
    Ok(project_about(s, centre, theta, phi, size, world_extent))
}

fn project_about(s: &Scene, centre: Vec3, theta: f64, phi: f64, size: usize, world_extent: f64) -> Image {
    if scene_is_degenerate(s) {
        return Image::new(size, size);
    }
    let frame = Frame::new(Camera::new(theta, phi), centre, size, world_extent);
    let mut buf = SampleBuffer::new(size);
    let mut depth = vec![f64::NEG_INFINITY; buf.sub * buf.sub];
    let max = buf.sub as f64;
    for o in &s.objects {
        let pts: Vec<(f64, f64, f64)> = o
            .mesh
            .vertices
            .iter()
            .map(|v| frame.project(&o.transform.apply(v)))
            .collect();
        for (t, m) in o.mesh.triangles.iter().zip(&o.mesh.materials) {
            let color = o.color(*m);
            let [a, b, c] = t.map(|i| pts[i as usize]);
            let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            if area.abs() < 1e-14 {
                continue;
            }
            let x0 = a.0.min(b.0).min(c.0).floor().max(0.0);
            let x1 = a.0.max(b.0).max(c.0).ceil().min(max);
            let y0 = a.1.min(b.1).min(c.1).floor().max(0.0);
            let y1 = a.1.max(b.1).max(c.1).ceil().min(max);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            let inv = 1.0 / area;
            for sy in y0 as usize..y1 as usize {
                let py = sy as f64 + 0.5;
                for sx in x0 as usize..x1 as usize {
                    let px = sx as f64 + 0.5;
                    let w0 = ((b.0 - px) * (c.1 - py) - (b.1 - py) * (c.0 - px)) * inv;
                    let w1 = ((c.0 - px) * (a.1 - py) - (c.1 - py) * (a.0 - px)) * inv;
                    let w2 = 1.0 - w0 - w1;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let z = w0 * a.2 + w1 * b.2 + w2 * c.2;
                    let i = sy * buf.sub + sx;
                    if z > depth[i] {
                        depth[i] = z;
                        buf.color[i] = color;
                        buf.covered[i] = true;
                    }
                }
            }
        }
    }
    buf.resolve(size)
}

/// Planar slice through the center of gravity with normal `(theta, phi)`.
pub fn cross_section(s: &Scene, theta: f64, phi: f64, size: usize, world_extent: f64) -> Result<Image> {
    let centre = center_of_gravity(s)?;
    Ok(cross_section_about(s, centre, theta, phi, size, world_extent))
}

/// Plane-crossing segments of the triangles of one material, in raster
/// coordinates.
fn section_segments(
    verts: &[Vec3],
    triangles: impl Iterator<Item = [u32; 3]>,
    frame: &Frame,
) -> Vec<[(f64, f64); 2]> {
    let n = frame.camera.forward;
    let dist: Vec<f64> = verts.iter().map(|v| n.dot(&(v - frame.centre))).collect();
    let mut segs = Vec::new();
    for t in triangles {
        let d = t.map(|i| dist[i as usize]);
        let side = d.map(|x| x >= 0.0);
        if side[0] == side[1] && side[1] == side[2] {
            continue;
        }
        let mut pts = Vec::with_capacity(2);
        for k in 0..3 {
            let (i, j) = (k, (k + 1) % 3);
            if side[i] != side[j] {
                let a = verts[t[i] as usize];
                let b = verts[t[j] as usize];
                let u = d[i] / (d[i] - d[j]);
                let p = a + (b - a) * u;
                let (x, y, _) = frame.project(&p);
                pts.push((x, y));
            }
        }
        if pts.len() == 2 {
            segs.push([pts[0], pts[1]]);
        }
    }
    segs
}

/// Even-odd scanline fill of closed segment loops.
fn fill_even_odd(segs: &[[(f64, f64); 2]], color: [f64; 4], buf: &mut SampleBuffer) {
    if segs.is_empty() {
        return;
    }
    let ymin = segs.iter().map(|s| s[0].1.min(s[1].1)).fold(f64::INFINITY, f64::min);
    let ymax = segs.iter().map(|s| s[0].1.max(s[1].1)).fold(f64::NEG_INFINITY, f64::max);
    let r0 = (ymin - 0.5).ceil().max(0.0) as usize;
    let r1 = ((ymax - 0.5).floor() + 1.0).clamp(0.0, buf.sub as f64) as usize;
    let mut xs = Vec::new();
    for row in r0..r1 {
        let yc = row as f64 + 0.5;
        xs.clear();
        for s in segs {
            let (a, b) = (s[0], s[1]);
            let (lo, hi) = if a.1 <= b.1 { (a, b) } else { (b, a) };
            if lo.1 <= yc && yc < hi.1 {
                xs.push(lo.0 + (yc - lo.1) * (hi.0 - lo.0) / (hi.1 - lo.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let c0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let c1 = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(buf.sub);
            for col in c0..c1 {
                let i = row * buf.sub + col;
                buf.color[i] = color;
                buf.covered[i] = true;
            }
        }
    }
}

fn cross_section_about(s: &Scene, centre: Vec3, theta: f64, phi: f64, size: usize, world_extent: f64) -> Image {
    let frame = Frame::new(Camera::new(theta, phi), centre, size, world_extent);
    let mut buf = SampleBuffer::new(size);
    let world: Vec<Vec<Vec3>> = s.objects.iter().map(|o| o.world_vertices()).collect();
    for material in [Material::Membrane, Material::Nucleus] {
        for (o, verts) in s.objects.iter().zip(&world) {
            let tris = o
                .mesh
                .triangles
                .iter()
                .zip(&o.mesh.materials)
                .filter(|(_, m)| **m == material)
                .map(|(t, _)| *t);
            let segs = section_segments(verts, tris, &frame);
            fill_even_odd(&segs, o.color(material), &mut buf);
        }
    }
    buf.resolve(size)
}

pub fn render_view(s: &Scene, mode: RenderMode, theta: f64, phi: f64, size: usize, world_extent: f64) -> Result<Image> {
    match mode {
        RenderMode::Projection => project(s, theta, phi, size, world_extent),
        RenderMode::CrossSection => cross_section(s, theta, phi, size, world_extent),
    }
}

/// Images for every `(theta_i, phi_j)` in row-major order, rendered in
/// parallel.
pub fn render_batch(s: &Scene, spec: &ProjectionSpec) -> Result<Vec<(f64, f64, Image)>> {
    spec.validate()?;
    let centre = center_of_gravity(s)?;
    Ok(spec
        .angles()
        .into_par_iter()
        .map(|(t, p)| (t, p, render_one(s, centre, spec, t, p)))
        .collect())
}

/// Sequential variant of [`render_batch`].
pub fn render_batch_sequential(s: &Scene, spec: &ProjectionSpec) -> Result<Vec<(f64, f64, Image)>> {
    spec.validate()?;
    let centre = center_of_gravity(s)?;
    Ok(spec
        .angles()
        .into_iter()
        .map(|(t, p)| (t, p, render_one(s, centre, spec, t, p)))
        .collect())
}

fn render_one(s: &Scene, centre: Vec3, spec: &ProjectionSpec, theta: f64, phi: f64) -> Image {
    match spec.mode {
        RenderMode::Projection => project_about(s, centre, theta, phi, spec.size, spec.world_extent),
        RenderMode::CrossSection => cross_section_about(s, centre, theta, phi, spec.size, spec.world_extent),
    }
}
