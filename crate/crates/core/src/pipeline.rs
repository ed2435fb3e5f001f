//! Patch ingestion, blob segmentation, dataset layout, synthetic fixtures and
//! end-to-end experiment runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{fid_report, Embedder, FidReport};
use crate::features::{clamp_features, CellClass, CellFeatures, ClusterFeatures, ConstraintSet};
use crate::gan::{fid_endpoints, save_metrics_csv, GanTrainer, RunSchedule, TrainConfig};
use crate::mesh::{anchor_directions, assemble_cluster_with, cell_object, export_obj, CellBuildOptions, Scene};
use crate::render::{connected_components, render_batch_sequential, render_view, Image, ProjectionSpec, RenderMode};
use crate::topo::{mean_loss, topo_metrics_csv, train_transformer, TopoConfig, TopoTransformer};

/// Row-major sliding-window crops; windows that would cross the border are dropped.
pub fn extract_patches(image: &Image, size: usize, stride: usize) -> Result<Vec<Image>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if size > image.width() || size > image.height() {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} exceeds {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let origins = |n: usize| (0..=n - size).step_by(stride).collect::<Vec<_>>();
    let (xs, ys) = (origins(image.width()), origins(image.height()));
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(image.crop(x, y, size, size)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentOptions {
    /// Threshold on `B − (R + G) / 2`.
    pub threshold: f64,
    pub min_area: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            threshold: 0.15,
            min_area: 50,
        }
    }
}

/// One segmented cell crop with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image: Image,
    pub patch_id: String,
    pub source: String,
    pub class: CellClass,
    /// Top-left of the crop in the source image.
    pub offset: [usize; 2],
}

/// Blue-dominance threshold, 8-connected components of at least `min_area`
/// pixels, each cropped to its bounding box with everything outside the
/// component made transparent.
pub fn segment_blobs(patch: &Image, source: &str, class: CellClass, opts: &SegmentOptions) -> Vec<PatchRecord> {
    segment_blobs_at(patch, source, class, opts, [0, 0])
}

fn segment_blobs_at(
    patch: &Image,
    source: &str,
    class: CellClass,
    opts: &SegmentOptions,
    origin: [usize; 2],
) -> Vec<PatchRecord> {
    let (w, h) = (patch.width(), patch.height());
    let mask: Vec<bool> = patch
        .data()
        .chunks(4)
        .map(|p| p[3] > 0.0 && p[2] - 0.5 * (p[0] + p[1]) > opts.threshold)
        .collect();
    let (labels, count) = connected_components(&mask, w, h);
    let mut area = vec![0usize; count + 1];
    let mut bbox = vec![[usize::MAX, usize::MAX, 0, 0]; count + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let b = &mut bbox[l as usize];
        area[l as usize] += 1;
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    let mut out = Vec::new();
    for l in 1..=count {
        if area[l] < opts.min_area {
            continue;
        }
        let [x0, y0, x1, y1] = bbox[l];
        let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut crop = Image::new(cw, ch);
        for y in 0..ch {
            for x in 0..cw {
                if labels[(y0 + y) * w + x0 + x] as usize == l {
                    crop.set_pixel(x, y, patch.pixel(x0 + x, y0 + y));
                }
            }
        }
        let offset = [origin[0] + x0, origin[1] + y0];
        out.push(PatchRecord {
            image: crop,
            patch_id: format!("{source}-{}-{}", offset[0], offset[1]),
            source: source.to_string(),
            class,
            offset,
        });
    }
    out
}

/// Extract patches from a source image and segment each one.
pub fn ingest_image(
    image: &Image,
    source: &str,
    class: CellClass,
    patch_size: usize,
    stride: usize,
    opts: &SegmentOptions,
) -> Result<Vec<PatchRecord>> {
    let size = patch_size.min(image.width()).min(image.height());
    let xs: Vec<usize> = (0..=image.width() - size).step_by(stride.max(1)).collect();
    let ys: Vec<usize> = (0..=image.height() - size).step_by(stride.max(1)).collect();
    let patches = extract_patches(image, size, stride)?;
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y]));
    let mut records: Vec<PatchRecord> = patches
        .par_iter()
        .zip(origins.collect::<Vec<_>>())
        .flat_map_iter(|(p, o)| segment_blobs_at(p, source, class, opts, o))
        .collect();
    // Overlapping windows see the same blob more than once.
    let mut seen = BTreeSet::new();
    records.retain(|r| seen.insert(r.patch_id.clone()));
    Ok(records)
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root, `data/{class}/{source}/{patch_id}.png`.
    pub path: String,
    pub patch_id: String,
    pub source: String,
    pub class: CellClass,
    pub offset: [usize; 2],
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_preset: String,
    pub seeds: Vec<u64>,
    pub class_counts: BTreeMap<CellClass, usize>,
    pub records: Vec<ManifestEntry>,
}

fn safe_component(s: &str) -> Result<&str> {
    if s.is_empty() || s.contains(['/', '\\']) || s == "." || s == ".." {
        return Err(Error::InvalidArgument(format!("`{s}` is not a valid path component")));
    }
    Ok(s)
}

impl DatasetManifest {
    /// Check counts and that the referenced files are exactly the PNGs under `data/`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!("unsupported manifest version {}", self.version)));
        }
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.class).or_insert(0) += 1;
        }
        if counts != self.class_counts {
            return Err(Error::Validation("class counts disagree with records".into()));
        }
        let listed: BTreeSet<PathBuf> = self.records.iter().map(|r| root.join(&r.path)).collect();
        if listed.len() != self.records.len() {
            return Err(Error::Validation("duplicate record paths".into()));
        }
        let on_disk = list_pngs(&root.join("data"))?;
        if listed != on_disk {
            let missing: Vec<_> = listed.difference(&on_disk).collect();
            let extra: Vec<_> = on_disk.difference(&listed).collect();
            return Err(Error::Validation(format!(
                "manifest and files disagree: missing {missing:?}, unlisted {extra:?}"
            )));
        }
        Ok(())
    }
}

fn list_pngs(dir: &Path) -> Result<BTreeSet<PathBuf>> {
    let mut out = BTreeSet::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "png") {
                out.insert(p);
            }
        }
    }
    Ok(out)
}

/// Write records as PNGs under `root/data/...` plus `root/manifest.json`.
pub fn write_dataset(root: &Path, records: &[PatchRecord], preset: &str, seeds: &[u64]) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(records.len());
    let mut counts = BTreeMap::new();
    for r in records {
        let rel = format!(
            "data/{}/{}/{}.png",
            r.class,
            safe_component(&r.source)?,
            safe_component(&r.patch_id)?
        );
        let path = root.join(&rel);
        let parent = path.parent().expect("dataset paths have parents");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        r.image.save_png(&path)?;
        *counts.entry(r.class).or_insert(0) += 1;
        entries.push(ManifestEntry {
            path: rel,
            patch_id: r.patch_id.clone(),
            source: r.source.clone(),
            class: r.class,
            offset: r.offset,
            width: r.image.width(),
            height: r.image.height(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        feature_preset: preset.to_string(),
        seeds: seeds.to_vec(),
        class_counts: counts,
        records: entries,
    };
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read and validate a dataset written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<PatchRecord>)> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate(root)?;
    let records = manifest
        .records
        .iter()
        .map(|e| {
            Ok(PatchRecord {
                image: Image::load_png(root.join(&e.path))?,
                patch_id: e.patch_id.clone(),
                source: e.source.clone(),
                class: e.class,
                offset: e.offset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

/// Stain-like parameters of the synthetic fixture classes.
#[derive(Clone, Copy, Debug)]
struct ClassProfile {
    scale: (f64, f64),
    elongation: (f64, f64),
    membrane: (f64, f64),
    nucleus: (f64, f64),
    nucleus_growth: f64,
    roughness: f64,
}

fn profile(class: CellClass) -> ClassProfile {
    match class {
        CellClass::Normal => ClassProfile {
            scale: (0.95, 1.15),
            elongation: (1.15, 1.3),
            membrane: (0.25, 0.35),
            nucleus: (0.8, 0.9),
            nucleus_growth: 0.0,
            roughness: 0.0,
        },
        CellClass::Cancer => ClassProfile {
            scale: (1.2, 1.4),
            elongation: (1.02, 1.12),
            membrane: (0.4, 0.5),
            nucleus: (0.9, 1.0),
            nucleus_growth: 0.15,
            roughness: 0.05,
        },
    }
}

/// Radial coefficients placing anchors on an ellipsoid with the given radii.
fn ellipsoid_coefficients(n: usize, radii: [f64; 3], rot: &Rotation3<f64>, growth: f64) -> Vec<f64> {
    anchor_directions(n)
        .iter()
        .map(|u| {
            let local = rot.inverse() * u;
            let s: f64 = (0..3).map(|i| (local[i] / radii[i]).powi(2)).sum();
            (1.0 + growth) / s.sqrt() - 1.0
        })
        .collect()
}

/// Known ellipsoidal cell features of a class, clamped to `c`.
pub fn fixture_cell_features(c: &ConstraintSet, class: CellClass, rng: &mut ChaCha8Rng) -> Result<CellFeatures> {
    let p = profile(class);
    let tau = std::f64::consts::TAU;
    let rot = Rotation3::from_euler_angles(rng.gen_range(0.0..tau), rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
    let e = rng.gen_range(p.elongation.0..p.elongation.1);
    let radii = [e, 1.0 / e.sqrt(), 1.0 / e.sqrt()];
    let ne = 1.0 + (e - 1.0) * 0.5;
    let nradii = [ne, 1.0 / ne.sqrt(), 1.0 / ne.sqrt()];
    let channels = c.layout.color_channels;
    let shade = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng, dark: [f64; 4], light: [f64; 4]| -> Vec<f64> {
        let t = rng.gen_range(lo..hi);
        if channels == 1 {
            vec![t]
        } else {
            (0..4).map(|k| light[k] * (1.0 - t) + dark[k] * t).collect()
        }
    };
    let pal = &c.palette;
    let f = CellFeatures {
        deformation: ellipsoid_coefficients(c.layout.deformation_count, radii, &rot, 0.0),
        nucleus_deformation: ellipsoid_coefficients(c.layout.nucleus_deformation_count, nradii, &rot, p.nucleus_growth),
        surface_distance: 0.4,
        surface_strength: if p.roughness > 0.0 {
            rng.gen_range(-p.roughness..p.roughness)
        } else {
            0.0
        },
        nucleus_offset: [0.0; 3],
        scale: rng.gen_range(p.scale.0..p.scale.1),
        membrane_color: shade(p.membrane, rng, pal.membrane_dark, pal.membrane_light),
        nucleus_color: shade(p.nucleus, rng, pal.nucleus_dark, pal.nucleus_light),
    };
    clamp_features(&f, c)
}

/// Rendering parameters shared by the synthetic fixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub cells_per_class: usize,
    pub clusters: usize,
    pub cell_image_size: usize,
    pub cell_extent: f64,
    pub cluster_image_size: usize,
    pub cluster_extent: f64,
    pub subdivisions: u32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            cells_per_class: 64,
            clusters: 10,
            cell_image_size: 32,
            cell_extent: 4.0,
            cluster_image_size: 40,
            cluster_extent: 8.0,
            subdivisions: 3,
            seed: 1234,
        }
    }
}

/// The constraint set the fixture features are expressed in.
pub fn fixture_constraints() -> ConstraintSet {
    ConstraintSet::preset("table1-32").expect("bundled preset")
}

/// Rendered single-cell fixture of one class, with the features that produced it.
pub fn fixture_cells(class: CellClass, spec: &FixtureSpec) -> Result<Vec<(CellFeatures, Image)>> {
    let c = fixture_constraints();
    let salt = match class {
        CellClass::Normal => 0,
        CellClass::Cancer => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(2).wrapping_add(salt));
    let features = (0..spec.cells_per_class)
        .map(|_| fixture_cell_features(&c, class, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let opts = CellBuildOptions {
        subdivisions: spec.subdivisions,
        ..CellBuildOptions::default()
    };
    features
        .into_par_iter()
        .map(|f| {
            let scene = Scene::new(vec![cell_object(&f, &c, &opts)?]);
            let im = render_view(&scene, RenderMode::Projection, 0.0, 0.0, spec.cell_image_size, spec.cell_extent)?;
            Ok((f, im))
        })
        .collect()
}

/// Two or three same-class fixture cells at random offsets around the origin.
pub fn fixture_cluster_features(c: &ConstraintSet, rng: &mut ChaCha8Rng) -> Result<ClusterFeatures> {
    let n = rng.gen_range(2..=3);
    let class = if rng.gen::<bool>() { CellClass::Normal } else { CellClass::Cancer };
    let cells = (0..n)
        .map(|_| fixture_cell_features(c, class, rng))
        .collect::<Result<Vec<_>>>()?;
    let positions = (0..n)
        .map(|_| [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-0.4..0.4)])
        .collect();
    Ok(ClusterFeatures { cells, positions })
}

/// Rendered clusters of two or three known cells, viewed along the z axis.
pub fn fixture_clusters(spec: &FixtureSpec) -> Result<Vec<(ClusterFeatures, Image)>> {
    let c = fixture_constraints();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc1u64 << 32);
    let opts = CellBuildOptions {
        subdivisions: spec.subdivisions,
        ..CellBuildOptions::default()
    };
    let clusters = (0..spec.clusters)
        .map(|_| fixture_cluster_features(&c, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    clusters
        .into_par_iter()
        .map(|g| {
            let scene = assemble_cluster_with(&g, &c, &opts)?;
            let im = render_view(&scene, RenderMode::Projection, 0.0, 0.0, spec.cluster_image_size, spec.cluster_extent)?;
            Ok((g, im))
        })
        .collect()
}

/// A white field with dark-purple elliptic nuclei, for exercising ingestion.
pub fn fixture_slide(width: usize, height: usize, blobs: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut im = Image::filled(width, height, [0.97, 0.95, 0.96, 1.0]);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.1..0.9) * width as f64;
        let cy = rng.gen_range(0.1..0.9) * height as f64;
        let (a, b) = (rng.gen_range(6.0..11.0), rng.gen_range(4.0..7.0));
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let color = [rng.gen_range(0.3..0.45), rng.gen_range(0.15..0.25), rng.gen_range(0.55..0.7), 1.0];
        fill_ellipse(&mut im, [cx, cy], [a, b], ang, color);
    }
    im
}

pub fn fill_ellipse(im: &mut Image, centre: [f64; 2], radii: [f64; 2], angle: f64, rgba: [f64; 4]) {
    let (s, c) = angle.sin_cos();
    for y in 0..im.height() {
        for x in 0..im.width() {
            let dx = x as f64 + 0.5 - centre[0];
            let dy = y as f64 + 0.5 - centre[1];
            let u = (c * dx + s * dy) / radii[0];
            let v = (-s * dx + c * dy) / radii[1];
            if u * u + v * v <= 1.0 {
                im.set_pixel(x, y, rgba);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopoStage {
    pub steps: usize,
    pub config: TopoConfig,
    /// Seed the decoder tails from the generator trained for this class.
    pub decoder_from_class: Option<CellClass>,
}

impl Default for TopoStage {
    fn default() -> Self {
        Self {
            steps: 50,
            config: TopoConfig::default(),
            decoder_from_class: Some(CellClass::Normal),
        }
    }
}

/// Everything `run_experiment` needs; read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub preset: String,
    /// Overrides the preset's tail count when set.
    #[serde(default)]
    pub tails: Option<usize>,
    pub classes: Vec<CellClass>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub gan: TrainConfig,
    #[serde(default)]
    pub schedule: RunSchedule,
    #[serde(default)]
    pub topo: Option<TopoStage>,
    #[serde(default)]
    pub fixture: FixtureSpec,
    /// Dataset written by `export-dataset`; the synthetic fixture is used when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_samples")]
    pub sample_meshes: usize,
}

fn default_samples() -> usize {
    3
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn constraints(&self) -> Result<ConstraintSet> {
        let mut c = ConstraintSet::preset(&self.preset).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = self.tails {
            c.layout.tails = t;
        }
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(&self.run_id)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("run_id `{}` must be a plain directory name", self.run_id));
        }
        self.constraints()?;
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.schedule.iters == 0 {
            return bad("schedule.iters must be positive".into());
        }
        if self.schedule.eval_samples < 2 {
            return bad("schedule.eval_samples must be at least 2".into());
        }
        if self.schedule.embed_dim == 0 || self.schedule.embed_dim % 4 != 0 {
            return bad("schedule.embed_dim must be a positive multiple of 4".into());
        }
        self.gan.validate()?;
        if self.data_dir.is_none() && self.gan.image_size != self.fixture.cell_image_size {
            return bad(format!(
                "gan.image_size {} differs from fixture.cell_image_size {}",
                self.gan.image_size, self.fixture.cell_image_size
            ));
        }
        if self.data_dir.is_none() && self.fixture.cells_per_class < 2 {
            return bad("fixture.cells_per_class must be at least 2".into());
        }
        if let Some(t) = &self.topo {
            t.config.validate()?;
            if t.steps == 0 {
                return bad("topo.steps must be positive".into());
            }
            if t.config.image_size != self.fixture.cluster_image_size {
                return bad("topo.config.image_size must match fixture.cluster_image_size".into());
            }
            if self.fixture.clusters == 0 {
                return bad("fixture.clusters must be positive for the topology stage".into());
            }
            if let Some(c) = t.decoder_from_class {
                if !self.classes.contains(&c) {
                    return bad(format!("decoder_from_class {c} is not among the trained classes"));
                }
                if t.config.generator != self.gan.generator {
                    return bad("topo generator shape must equal gan generator shape to reuse its tails".into());
                }
            }
        }
        if self.sample_meshes == 0 {
            return bad("sample_meshes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanRunSummary {
    pub class: CellClass,
    pub seed: u64,
    pub initial_fid: f64,
    pub final_fid: f64,
    pub metrics_csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoRunSummary {
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub decoder_unchanged: bool,
    pub metrics_csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub features: usize,
    pub tails: usize,
    pub gan: Vec<GanRunSummary>,
    pub topo: Vec<TopoRunSummary>,
    pub fid: FidReport,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Prepare an empty run directory. Fails before anything is written when the
/// output location is missing, not writable or already used.
fn claim_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = &cfg.output_dir;
    let meta = std::fs::metadata(out).map_err(|e| Error::io(out, e))?;
    if !meta.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", out.display())));
    }
    if meta.permissions().readonly() {
        return Err(Error::io(
            out,
            std::io::Error::new(std::io::ErrorKind::PermissionDenied, "output directory is read-only"),
        ));
    }
    let dir = cfg.run_dir();
    if dir.exists() {
        return Err(Error::Config(format!("run directory {} already exists", dir.display())));
    }
    mkdir(&dir)?;
    Ok(dir)
}

/// Real single-cell images per class, from the configured dataset or the fixture.
fn real_images(cfg: &ExperimentConfig, run_dir: &Path) -> Result<BTreeMap<CellClass, Vec<Image>>> {
    let mut out = BTreeMap::new();
    if let Some(dir) = &cfg.data_dir {
        let (_, records) = load_dataset(dir)?;
        let size = cfg.gan.image_size;
        for class in &cfg.classes {
            let images: Vec<Image> = records
                .iter()
                .filter(|r| r.class == *class)
                .map(|r| fit_to_canvas(&r.image, size))
                .collect();
            if images.len() < 2 {
                return Err(Error::Config(format!("dataset has fewer than 2 {class} patches")));
            }
            out.insert(*class, images);
        }
        return Ok(out);
    }
    let mut records = Vec::new();
    for class in &cfg.classes {
        let cells = fixture_cells(*class, &cfg.fixture)?;
        for (k, (_, im)) in cells.iter().enumerate() {
            records.push(PatchRecord {
                image: im.clone(),
                patch_id: format!("cell-{k:04}"),
                source: "fixture".into(),
                class: *class,
                offset: [0, 0],
            });
        }
        out.insert(*class, cells.into_iter().map(|(_, im)| im).collect());
    }
    write_dataset(run_dir, &records, "table1-32", &[cfg.fixture.seed])?;
    Ok(out)
}

/// Centre an image on a transparent square canvas, cropping if larger.
pub fn fit_to_canvas(im: &Image, size: usize) -> Image {
    let mut out = Image::new(size, size);
    let ox = (size as isize - im.width() as isize) / 2;
    let oy = (size as isize - im.height() as isize) / 2;
    for y in 0..im.height() {
        for x in 0..im.width() {
            let (tx, ty) = (x as isize + ox, y as isize + oy);
            if tx >= 0 && ty >= 0 && (tx as usize) < size && (ty as usize) < size {
                out.set_pixel(tx as usize, ty as usize, im.pixel(x, y));
            }
        }
    }
    out
}

/// Train, evaluate and export everything described by `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let constraints = cfg.constraints()?;
    let run_dir = claim_run_dir(cfg)?;
    write_json(&run_dir.join("config.json"), cfg)?;
    let real = real_images(cfg, &run_dir)?;

    let mut summaries = Vec::new();
    let mut generators = BTreeMap::new();
    let mut fake_all = Vec::new();
    let mut fake_labels = Vec::new();
    for (class, images) in &real {
        for &seed in &cfg.seeds {
            let dir = run_dir.join("gan").join(class.name()).join(format!("seed-{seed}"));
            mkdir(&dir)?;
            let tcfg = TrainConfig {
                seed,
                class: *class,
                ..cfg.gan.clone()
            };
            let mut trainer = GanTrainer::new(constraints.clone(), tcfg.clone())?;
            let rows = trainer.run(images, &cfg.schedule)?;
            let csv = dir.join("metrics.csv");
            save_metrics_csv(&rows, &csv)?;
            trainer.generator.params.save(&dir.join("generator.ckpt"))?;
            trainer.critic.params.save(&dir.join("critic.ckpt"))?;
            write_json(&dir.join("train_config.json"), &tcfg)?;

            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a3_91e5_u64);
            let z = trainer.generator.sample_latent(cfg.schedule.eval_samples, &mut rng);
            let samples = trainer.sample_images(&z)?;
            let views: Vec<Image> = samples.iter().map(|v| v[0].clone()).collect();
            Image::grid(&views[..views.len().min(16)], 4)?.save_png(dir.join("samples.png"))?;
            let features = trainer.sample_features(&z)?;
            let objects = features
                .iter()
                .take(cfg.sample_meshes)
                .map(|f| cell_object(f, &constraints, &tcfg.build_options()))
                .collect::<Result<Vec<_>>>()?;
            for (k, o) in objects.into_iter().enumerate() {
                export_obj(&Scene::new(vec![o]), dir.join(format!("cell-{k}.obj")))?;
            }
            write_json(&dir.join("sample_features.json"), &features[..cfg.sample_meshes.min(features.len())])?;

            if seed == cfg.seeds[0] {
                fake_labels.extend(std::iter::repeat(*class).take(views.len()));
                fake_all.extend(views);
                generators.insert(*class, trainer.generator.params.clone());
            }
            let (initial_fid, final_fid) = fid_endpoints(&rows).expect("run records FID-proxy");
            summaries.push(GanRunSummary {
                class: *class,
                seed,
                initial_fid,
                final_fid,
                metrics_csv: csv,
            });
        }
    }

    let real_all: Vec<Image> = real.values().flatten().cloned().collect();
    let real_labels: Vec<CellClass> = real.iter().flat_map(|(c, v)| std::iter::repeat(*c).take(v.len())).collect();
    let embedder = Embedder::new(cfg.schedule.embed_dim, cfg.schedule.embed_seed)?;
    let fid = fid_report(&real_all, &fake_all, &embedder, Some(&real_labels), Some(&fake_labels))?;
    write_json(&run_dir.join("fid.json"), &fid)?;

    let mut topo = Vec::new();
    if let Some(stage) = &cfg.topo {
        let clusters: Vec<Image> = fixture_clusters(&cfg.fixture)?.into_iter().map(|(_, im)| im).collect();
        let cluster_dir = run_dir.join("clusters");
        mkdir(&cluster_dir)?;
        Image::grid(&clusters, 5)?.save_png(cluster_dir.join("inputs.png"))?;
        for &seed in &cfg.seeds {
            let dir = run_dir.join("topo").join(format!("seed-{seed}"));
            mkdir(&dir)?;
            let tc = TopoConfig {
                seed,
                ..stage.config.clone()
            };
            let mut t = TopoTransformer::new(constraints.clone(), tc)?;
            if let Some(class) = stage.decoder_from_class {
                t.load_decoder_tails(&generators[&class])?;
            }
            let before = t.decoder_bytes();
            let rows = train_transformer(&mut t, &clusters, stage.steps)?;
            let end = mean_loss(&mut t, &clusters)?;
            let csv = dir.join("metrics.csv");
            std::fs::write(&csv, topo_metrics_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
            t.params.save(&dir.join("transformer.ckpt"))?;
            let scenes = crate::topo::reconstruct(&t, &clusters)?;
            export_obj(&scenes[0], dir.join("cluster-0.obj"))?;
            let spec = ProjectionSpec {
                thetas: vec![0.0],
                phis: vec![0.0],
                ..t.cfg.projection()
            };
            let renders = scenes
                .iter()
                .map(|s| Ok(render_batch_sequential(s, &spec)?.remove(0).2))
                .collect::<Result<Vec<_>>>()?;
            Image::grid(&renders, 5)?.save_png(dir.join("reconstructions.png"))?;
            topo.push(TopoRunSummary {
                seed,
                initial_loss: rows[0].loss,
                final_loss: end.total(),
                decoder_unchanged: t.decoder_bytes() == before,
                metrics_csv: csv,
            });
        }
    }

    let report = ExperimentReport {
        run_dir: run_dir.clone(),
        features: constraints.layout.total_features,
        tails: constraints.layout.tails,
        gan: summaries,
        topo,
        fid,
    };
    write_json(&run_dir.join("report.json"), &report)?;
    write_json(
        &run_dir.join("run.json"),
        &serde_json::json!({
            "run_id": cfg.run_id,
            "preset": cfg.preset,
            "features": report.features,
            "tails": report.tails,
            "classes": cfg.classes,
            "seeds": cfg.seeds,
        }),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_window_counts() {
        assert_eq!(extract_patches(&Image::new(100, 100), 50, 50).unwrap().len(), 4);
        assert_eq!(extract_patches(&Image::new(100, 100), 50, 200).unwrap().len(), 1);
        assert!(extract_patches(&Image::new(40, 40), 50, 10).is_err());
        let mut im = Image::new(96, 96);
        for y in 0..96 {
            for x in 0..96 {
                im.set_pixel(x, y, [x as f64 / 96.0, y as f64 / 96.0, 0.0, 1.0]);
            }
        }
        let patches = extract_patches(&im, 40, 28).unwrap();
        let origins: Vec<(usize, usize)> = [0, 28, 56]
            .iter()
            .flat_map(|&y| [0, 28, 56].map(move |x| (x, y)))
            .collect();
        assert_eq!(patches.len(), origins.len());
        for (p, (x, y)) in patches.iter().zip(origins) {
            assert_eq!(p.pixel(0, 0), im.pixel(x, y));
            assert_eq!(p.pixel(39, 39), im.pixel(x + 39, y + 39));
        }
    }

    #[test]
    fn blank_patch_has_no_blobs() {
        let white = Image::filled(64, 64, [1.0, 1.0, 1.0, 1.0]);
        assert!(segment_blobs(&white, "s", CellClass::Normal, &SegmentOptions::default()).is_empty());
    }

    #[test]
    fn single_ellipse_mask_is_exact() {
        let mut im = Image::filled(64, 64, [1.0, 1.0, 1.0, 1.0]);
        let purple = [0.4, 0.2, 0.65, 1.0];
        fill_ellipse(&mut im, [30.0, 33.0], [12.0, 7.0], 0.4, purple);
        let blobs = segment_blobs(&im, "s", CellClass::Cancer, &SegmentOptions::default());
        assert_eq!(blobs.len(), 1);
        let b = &blobs[0];
        assert_eq!(b.class, CellClass::Cancer);
        for y in 0..b.image.height() {
            for x in 0..b.image.width() {
                let src = im.pixel(b.offset[0] + x, b.offset[1] + y);
                let inside = src == purple;
                assert_eq!(b.image.alpha(x, y) > 0.0, inside);
                if !inside {
                    assert_eq!(b.image.pixel(x, y), [0.0; 4]);
                }
            }
        }
        let count_src = im.data().chunks(4).filter(|p| *p == purple).count();
        assert_eq!(b.image.opaque_count(), count_src);
    }

    #[test]
    fn two_separated_ellipses_give_two_blobs() {
        let mut im = Image::filled(80, 48, [1.0, 1.0, 1.0, 1.0]);
        fill_ellipse(&mut im, [18.0, 24.0], [10.0, 6.0], 0.0, [0.4, 0.2, 0.65, 1.0]);
        fill_ellipse(&mut im, [60.0, 22.0], [8.0, 8.0], 0.0, [0.35, 0.2, 0.6, 1.0]);
        // a speck below the area floor
        fill_ellipse(&mut im, [40.0, 5.0], [2.0, 2.0], 0.0, [0.35, 0.2, 0.6, 1.0]);
        assert_eq!(segment_blobs(&im, "s", CellClass::Normal, &SegmentOptions::default()).len(), 2);
    }

    #[test]
    fn dataset_round_trip_and_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let slide = fixture_slide(96, 96, 4, 3);
        let records = ingest_image(&slide, "slide-a", CellClass::Normal, 96, 96, &SegmentOptions::default()).unwrap();
        assert!(!records.is_empty());
        let m = write_dataset(dir.path(), &records, "table1-32", &[3]).unwrap();
        assert_eq!(m.class_counts[&CellClass::Normal], records.len());
        let (m2, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.patch_id, b.patch_id);
            for (p, q) in a.image.data().chunks(4).zip(b.image.data().chunks(4)) {
                assert_eq!(p[3] == 0.0, q[3] == 0.0);
            }
        }
        std::fs::write(dir.path().join("data/normal/slide-a/stray.png"), b"x").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn fixtures_are_deterministic_and_constrained() {
        let spec = FixtureSpec {
            cells_per_class: 3,
            clusters: 2,
            subdivisions: 2,
            ..FixtureSpec::default()
        };
        let a = fixture_cells(CellClass::Cancer, &spec).unwrap();
        let b = fixture_cells(CellClass::Cancer, &spec).unwrap();
        assert_eq!(a, b);
        let c = fixture_constraints();
        assert!(a.iter().all(|(f, im)| crate::features::satisfies(f, &c) && im.coverage() > 0.0));
        let n = fixture_cells(CellClass::Normal, &spec).unwrap();
        assert_ne!(a[0].0, n[0].0);
        let clusters = fixture_clusters(&spec).unwrap();
        assert_eq!(clusters.len(), 2);
        assert!(clusters.iter().all(|(g, _)| g.count() >= 2));
    }

    fn tiny_config(out: &Path) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "run_id": "t",
                "output_dir": {:?},
                "preset": "table1-32",
                "tails": 4,
                "classes": ["normal"],
                "seeds": [1],
                "gan": {{"batch": 2, "critic_steps": 1, "spsa_probes": 2, "subdivisions": 1, "image_size": 16, "world_extent": 4.0}},
                "schedule": {{"iters": 2, "eval_every": 1, "eval_samples": 4, "embed_dim": 8}},
                "fixture": {{"cells_per_class": 4, "clusters": 2, "cell_image_size": 16, "cluster_image_size": 16, "subdivisions": 1}},
                "topo": {{"steps": 1, "config": {{"image_size": 16, "patch_size": 4, "d_model": 8, "heads": 2, "depth": 1, "mlp_hidden": 8, "slots": 2, "min_n": 1, "thetas": [0.0], "phis": [0.0], "subdivisions": 1, "spsa_probes": 2, "batch": 1}}}}
            }}"#,
            out
        ))
        .unwrap()
    }

    #[test]
    fn experiment_writes_artifacts_and_records_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let report = run_experiment(&cfg).unwrap();
        assert_eq!((report.features, report.tails), (32, 4));
        let run = cfg.run_dir();
        for f in [
            "manifest.json",
            "config.json",
            "fid.json",
            "report.json",
            "run.json",
            "gan/normal/seed-1/metrics.csv",
            "gan/normal/seed-1/generator.ckpt",
            "gan/normal/seed-1/samples.png",
            "gan/normal/seed-1/cell-0.obj",
            "topo/seed-1/metrics.csv",
            "topo/seed-1/cluster-0.obj",
        ] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert!(report.topo[0].decoder_unchanged);
        let (m, _) = load_dataset(&run).unwrap();
        assert_eq!(m.class_counts[&CellClass::Normal], 4);
        assert!(run_experiment(&cfg).is_err(), "existing run directory must be refused");
    }

    #[test]
    fn invalid_config_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.preset = "table1-7".into();
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
        let mut cfg = tiny_config(&dir.path().join("missing"));
        cfg.seeds.clear();
        assert!(run_experiment(&cfg).is_err());
        let cfg = tiny_config(&dir.path().join("missing"));
        assert!(run_experiment(&cfg).is_err());
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
