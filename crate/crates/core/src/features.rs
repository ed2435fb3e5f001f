//! Constrained feature parameterization of single cells and clusters.
//!
//! A cell is described by a flat vector of "features" produced by the
//! generator tails. The [`FeatureLayout`] fixes how that vector splits into
//! named groups, and the [`ConstraintSet`] bounds each group so that every
//! decoded model stays smooth and biologically plausible.
//!
//! Packed coordinate order:
//!
//! ```text
//! scale, surface_distance, surface_strength,
//! nucleus_offset[3]          (if layout.nucleus_offset)
//! deformation[n_m]
//! nucleus_deformation[n_n]   (if layout.has_nucleus)
//! membrane_color[cc]
//! nucleus_color[cc]          (if layout.has_nucleus)
//! ```

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Pairwise centre distance floor between two cells, as a multiple of the
/// sum of their scales.
pub const OVERLAP_FACTOR: f64 = 0.6;

const MAX_SMOOTHING_SWEEPS: usize = 32;
const MAX_SEPARATION_SWEEPS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        if v.is_nan() {
            return self.min;
        }
        v.clamp(self.min, self.max)
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    /// Map a normalized coordinate in `[0, 1]` into the interval.
    pub fn lerp(&self, t: f64) -> f64 {
        self.min + self.width() * t
    }

    /// Inverse of [`Bounds::lerp`]; degenerate intervals map to 0.
    pub fn unlerp(&self, v: f64) -> f64 {
        let w = self.width();
        if w > 0.0 {
            (v - self.min) / w
        } else {
            0.0
        }
    }
}

/// Sizes of the feature groups and the number of generator tails.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    /// Radial deformation coefficients on the membrane shell.
    pub deformation_count: usize,
    /// Radial deformation coefficients on the nucleus shell.
    pub nucleus_deformation_count: usize,
    pub has_nucleus: bool,
    /// Whether the nucleus offset is a free feature (otherwise centred).
    pub nucleus_offset: bool,
    /// Free color channels per material: 1 = stain intensity on a palette
    /// ramp, 4 = direct RGBA.
    pub color_channels: usize,
    pub tails: usize,
    pub total_features: usize,
}

/// Named contiguous feature groups in packed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureGroup {
    Form,
    NucleusOffset,
    Deformation,
    NucleusDeformation,
    MembraneColor,
    NucleusColor,
}

impl FeatureLayout {
    /// Build a layout whose `total_features` is computed from the groups.
    pub fn new(
        deformation_count: usize,
        nucleus_deformation_count: usize,
        has_nucleus: bool,
        nucleus_offset: bool,
        color_channels: usize,
        tails: usize,
    ) -> Result<Self> {
        let mut layout = Self {
            deformation_count,
            nucleus_deformation_count,
            has_nucleus,
            nucleus_offset,
            color_channels,
            tails,
            total_features: 0,
        };
        layout.total_features = layout.group_total();
        layout.validate()?;
        Ok(layout)
    }

    /// Layouts reproducing the constrained-feature budgets and tail counts
    /// of the four reference configurations (5/4, 32/4, 1165/4, 4129/5).
    pub fn preset(budget: usize) -> Result<Self> {
        match budget {
            5 => Self::new(0, 0, true, false, 1, 4),
            32 => Self::new(12, 12, true, true, 1, 4),
            1165 => Self::new(576, 575, true, true, 4, 4),
            4129 => Self::new(2058, 2057, true, true, 4, 5),
            other => Err(Error::InvalidArgument(format!(
                "no preset layout for {other} features (expected 5, 32, 1165 or 4129)"
            ))),
        }
    }

    pub fn groups(&self) -> Vec<(FeatureGroup, usize)> {
        let mut g = vec![(FeatureGroup::Form, 3)];
        if self.has_nucleus && self.nucleus_offset {
            g.push((FeatureGroup::NucleusOffset, 3));
        }
        if self.deformation_count > 0 {
            g.push((FeatureGroup::Deformation, self.deformation_count));
        }
        if self.has_nucleus && self.nucleus_deformation_count > 0 {
            g.push((FeatureGroup::NucleusDeformation, self.nucleus_deformation_count));
        }
        g.push((FeatureGroup::MembraneColor, self.color_channels));
        if self.has_nucleus {
            g.push((FeatureGroup::NucleusColor, self.color_channels));
        }
        g
    }

    fn group_total(&self) -> usize {
        self.groups().iter().map(|(_, n)| n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.color_channels, 1 | 4) {
            return Err(Error::Config(format!(
                "color_channels must be 1 or 4, got {}",
                self.color_channels
            )));
        }
        if !self.has_nucleus && (self.nucleus_deformation_count > 0 || self.nucleus_offset) {
            return Err(Error::Config(
                "nucleus groups present on a layout without nucleus".into(),
            ));
        }
        let sum = self.group_total();
        if sum != self.total_features {
            return Err(Error::Config(format!(
                "total_features {} does not match group sizes (sum {sum})",
                self.total_features
            )));
        }
        if self.tails == 0 || self.tails > self.total_features {
            return Err(Error::Config(format!(
                "tails must be in 1..={}, got {}",
                self.total_features, self.tails
            )));
        }
        Ok(())
    }

    /// Output width of each generator tail, in packed order.
    ///
    /// Starts from the natural groups; adjacent groups with the smallest
    /// combined size are merged while there are too many, the largest group
    /// is halved while there are too few.
    pub fn tail_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.groups().into_iter().map(|(_, n)| n).collect();
        while sizes.len() > self.tails {
            let (i, _) = sizes
                .windows(2)
                .enumerate()
                .min_by_key(|(i, w)| (w[0] + w[1], *i))
                .expect("at least two groups");
            sizes[i] += sizes[i + 1];
            sizes.remove(i + 1);
        }
        while sizes.len() < self.tails {
            let (i, &n) = sizes
                .iter()
                .enumerate()
                .max_by_key(|(i, n)| (**n, std::cmp::Reverse(*i)))
                .expect("nonempty");
            let hi = n.div_ceil(2);
            sizes[i] = hi;
            sizes.insert(i + 1, n - hi);
        }
        sizes
    }
}

/// Stain palette used when a layout carries one intensity scalar per
/// material instead of full RGBA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainPalette {
    pub membrane_light: [f64; 4],
    pub membrane_dark: [f64; 4],
    pub nucleus_light: [f64; 4],
    pub nucleus_dark: [f64; 4],
}

impl Default for StainPalette {
    fn default() -> Self {
        Self {
            membrane_light: [0.96, 0.80, 0.86, 1.0],
            membrane_dark: [0.62, 0.28, 0.55, 1.0],
            nucleus_light: [0.55, 0.45, 0.80, 1.0],
            nucleus_dark: [0.18, 0.08, 0.40, 1.0],
        }
    }
}

fn ramp(light: &[f64; 4], dark: &[f64; 4], t: f64) -> [f64; 4] {
    std::array::from_fn(|k| light[k] * (1.0 - t) + dark[k] * t)
}

/// Bounds for every feature group plus the smoothness limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub layout: FeatureLayout,
    pub scale: Bounds,
    pub surface_distance: Bounds,
    pub surface_strength: Bounds,
    /// Per-component bound on the nucleus offset.
    pub nucleus_offset: Bounds,
    pub deformation: Bounds,
    pub nucleus_deformation: Bounds,
    /// Bound on color channels (and on stain intensity for 1-channel layouts).
    pub color: Bounds,
    /// Bound on the alpha channel of 4-channel colors. Kept above 0 so that
    /// geometry is never fully transparent.
    pub alpha: Bounds,
    /// Max |c[i] - c[i+1]| between adjacent deformation coefficients.
    pub smoothness_bound: f64,
    /// Undeformed nucleus radius relative to the undeformed membrane.
    pub nucleus_radius: f64,
    /// Per-component bound on cluster cell positions.
    pub cluster_position: Bounds,
    #[serde(default)]
    pub palette: StainPalette,
}

impl ConstraintSet {
    pub fn with_layout(layout: FeatureLayout) -> Self {
        Self {
            layout,
            scale: Bounds::new(0.6, 1.6),
            surface_distance: Bounds::new(0.1, 0.8),
            surface_strength: Bounds::new(-0.1, 0.1),
            nucleus_offset: Bounds::new(-0.15, 0.15),
            deformation: Bounds::new(-0.3, 0.3),
            nucleus_deformation: Bounds::new(-0.25, 0.25),
            color: Bounds::new(0.0, 1.0),
            alpha: Bounds::new(0.6, 1.0),
            smoothness_bound: 0.2,
            nucleus_radius: 0.45,
            cluster_position: Bounds::new(-2.5, 2.5),
            palette: StainPalette::default(),
        }
    }

    /// Named presets shipped with the crate.
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "table1-5" => include_str!("../presets/table1-5.json"),
            "table1-32" => include_str!("../presets/table1-32.json"),
            "table1-1165" => include_str!("../presets/table1-1165.json"),
            "table1-4129" => include_str!("../presets/table1-4129.json"),
            other => {
                return Err(Error::Config(format!("unknown preset `{other}`")));
            }
        };
        Self::from_json(text)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["table1-5", "table1-32", "table1-1165", "table1-4129"]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("constraint set serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let named = [
            ("scale", self.scale),
            ("surface_distance", self.surface_distance),
            ("surface_strength", self.surface_strength),
            ("nucleus_offset", self.nucleus_offset),
            ("deformation", self.deformation),
            ("nucleus_deformation", self.nucleus_deformation),
            ("color", self.color),
            ("alpha", self.alpha),
            ("cluster_position", self.cluster_position),
        ];
        for (name, b) in named {
            if !(b.min.is_finite() && b.max.is_finite()) || b.min > b.max {
                return Err(Error::Config(format!("invalid bounds for {name}: {b:?}")));
            }
        }
        if self.scale.min <= 0.0 {
            return Err(Error::Config("scale lower bound must be > 0".into()));
        }
        if self.alpha.min <= 0.0 || self.alpha.max > 1.0 {
            return Err(Error::Config("alpha bounds must lie in (0, 1]".into()));
        }
        if self.color.min < 0.0 || self.color.max > 1.0 {
            return Err(Error::Config("color bounds must lie in [0, 1]".into()));
        }
        if !(self.smoothness_bound > 0.0) {
            return Err(Error::Config("smoothness_bound must be > 0".into()));
        }
        if !(self.nucleus_radius > 0.0 && self.nucleus_radius < 1.0) {
            return Err(Error::Config("nucleus_radius must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Bounds of every packed coordinate, in packed order.
    pub fn coordinate_bounds(&self) -> Vec<Bounds> {
        let l = &self.layout;
        let mut out = Vec::with_capacity(l.total_features);
        for (group, n) in l.groups() {
            match group {
                FeatureGroup::Form => {
                    out.extend([self.scale, self.surface_distance, self.surface_strength])
                }
                FeatureGroup::NucleusOffset => out.extend([self.nucleus_offset; 3]),
                FeatureGroup::Deformation => {
                    out.extend(std::iter::repeat(self.deformation).take(n))
                }
                FeatureGroup::NucleusDeformation => {
                    out.extend(std::iter::repeat(self.nucleus_deformation).take(n))
                }
                FeatureGroup::MembraneColor | FeatureGroup::NucleusColor => {
                    if n == 4 {
                        out.extend([self.color, self.color, self.color, self.alpha]);
                    } else {
                        out.extend(std::iter::repeat(self.color).take(n));
                    }
                }
            }
        }
        out
    }

    /// Map packed feature values to normalized `[0, 1]` coordinates.
    pub fn normalize(&self, packed: &[f64]) -> Result<Vec<f64>> {
        let bounds = self.coordinate_bounds();
        check_len(packed.len(), bounds.len())?;
        Ok(packed.iter().zip(&bounds).map(|(v, b)| b.unlerp(*v)).collect())
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Result<Vec<f64>> {
        let bounds = self.coordinate_bounds();
        check_len(normalized.len(), bounds.len())?;
        Ok(normalized.iter().zip(&bounds).map(|(t, b)| b.lerp(*t)).collect())
    }

    /// Decode normalized generator output into clamped features.
    pub fn features_from_normalized(&self, normalized: &[f64]) -> Result<CellFeatures> {
        let packed = self.denormalize(normalized)?;
        let f = unpack_features(&packed, &self.layout)?;
        clamp_features(&f, self)
    }
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "expected {want} packed features, got {got}"
        )));
    }
    Ok(())
}

/// Tissue class a patch or a trained model belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    Normal,
    Cancer,
}

impl CellClass {
    pub const ALL: [CellClass; 2] = [CellClass::Normal, CellClass::Cancer];

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Normal => "normal",
            CellClass::Cancer => "cancer",
        }
    }
}

impl std::fmt::Display for CellClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CellClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "cancer" => Ok(Self::Cancer),
            other => Err(Error::InvalidArgument(format!("unknown class `{other}`"))),
        }
    }
}

/// Parameters of one cell model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFeatures {
    pub deformation: Vec<f64>,
    pub nucleus_deformation: Vec<f64>,
    pub surface_distance: f64,
    pub surface_strength: f64,
    pub nucleus_offset: [f64; 3],
    pub scale: f64,
    /// Raw color channels: one stain intensity or RGBA, per layout.
    pub membrane_color: Vec<f64>,
    pub nucleus_color: Vec<f64>,
}

impl CellFeatures {
    pub fn membrane_rgba(&self, palette: &StainPalette) -> [f64; 4] {
        channels_to_rgba(&self.membrane_color, &palette.membrane_light, &palette.membrane_dark)
    }

    pub fn nucleus_rgba(&self, palette: &StainPalette) -> [f64; 4] {
        channels_to_rgba(&self.nucleus_color, &palette.nucleus_light, &palette.nucleus_dark)
    }

    /// Layout sizes implied by the vector fields.
    fn matches(&self, layout: &FeatureLayout) -> bool {
        let cc = layout.color_channels;
        self.deformation.len() == layout.deformation_count
            && self.nucleus_deformation.len() == layout.nucleus_deformation_count
            && self.membrane_color.len() == cc
            && self.nucleus_color.len() == if layout.has_nucleus { cc } else { 0 }
            && (layout.nucleus_offset || self.nucleus_offset == [0.0; 3])
    }
}

fn channels_to_rgba(ch: &[f64], light: &[f64; 4], dark: &[f64; 4]) -> [f64; 4] {
    match ch.len() {
        4 => [ch[0], ch[1], ch[2], ch[3]],
        1 => ramp(light, dark, ch[0]),
        _ => *light,
    }
}

/// Project features onto the constraint set.
///
/// Every field is saturated into its bounds, then adjacent deformation
/// coefficients are pulled together until no pair differs by more than the
/// smoothness bound. Idempotent.
pub fn clamp_features(f: &CellFeatures, c: &ConstraintSet) -> Result<CellFeatures> {
    if !f.matches(&c.layout) {
        return Err(Error::Shape(
            "cell features do not match the constraint layout".into(),
        ));
    }
    let mut packed = pack_features(f, &c.layout)?;
    let bounds = c.coordinate_bounds();
    for (v, b) in packed.iter_mut().zip(&bounds) {
        *v = b.clamp(*v);
    }
    let mut out = unpack_features(&packed, &c.layout)?;
    smooth_chain(&mut out.deformation, c.smoothness_bound);
    smooth_chain(&mut out.nucleus_deformation, c.smoothness_bound);
    Ok(out)
}

/// Enforce |c[i+1] - c[i]| <= bound by pairwise averaging, with a final
/// forward Lipschitz pass if the sweeps do not converge. Values stay inside
/// the convex hull of the input.
fn smooth_chain(c: &mut [f64], bound: f64) {
    if c.len() < 2 {
        return;
    }
    let target = bound * (1.0 - 1e-9);
    for _ in 0..MAX_SMOOTHING_SWEEPS {
        let mut changed = false;
        for i in 0..c.len() - 1 {
            let d = c[i + 1] - c[i];
            if d.abs() > bound {
                let mid = 0.5 * (c[i] + c[i + 1]);
                let half = 0.5 * target * d.signum();
                c[i] = mid - half;
                c[i + 1] = mid + half;
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
    for i in 1..c.len() {
        let prev = c[i - 1];
        if (c[i] - prev).abs() > bound {
            c[i] = c[i].clamp(prev - target, prev + target);
        }
    }
}

/// Whether `f` already satisfies every bound (with no tolerance).
pub fn satisfies(f: &CellFeatures, c: &ConstraintSet) -> bool {
    if !f.matches(&c.layout) {
        return false;
    }
    let Ok(packed) = pack_features(f, &c.layout) else {
        return false;
    };
    let in_bounds = packed
        .iter()
        .zip(c.coordinate_bounds())
        .all(|(v, b)| b.contains(*v));
    let smooth = |v: &[f64]| v.windows(2).all(|w| (w[1] - w[0]).abs() <= c.smoothness_bound);
    in_bounds && smooth(&f.deformation) && smooth(&f.nucleus_deformation)
}

/// Uniformly sample normalized coordinates and decode them.
pub fn random_features(layout: &FeatureLayout, c: &ConstraintSet, seed: u64) -> Result<CellFeatures> {
    if layout != &c.layout {
        return Err(Error::Shape("layout differs from constraint layout".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalized: Vec<f64> = (0..layout.total_features).map(|_| rng.gen::<f64>()).collect();
    c.features_from_normalized(&normalized)
}

/// Flatten features in packed order; groups absent from `layout` are omitted.
pub fn pack_features(f: &CellFeatures, layout: &FeatureLayout) -> Result<Vec<f64>> {
    if !f.matches(layout) {
        return Err(Error::Shape("cell features do not match layout".into()));
    }
    let mut v = Vec::with_capacity(layout.total_features);
    v.extend([f.scale, f.surface_distance, f.surface_strength]);
    if layout.has_nucleus && layout.nucleus_offset {
        v.extend_from_slice(&f.nucleus_offset);
    }
    v.extend_from_slice(&f.deformation);
    v.extend_from_slice(&f.nucleus_deformation);
    v.extend_from_slice(&f.membrane_color);
    v.extend_from_slice(&f.nucleus_color);
    Ok(v)
}

pub fn unpack_features(v: &[f64], layout: &FeatureLayout) -> Result<CellFeatures> {
    check_len(v.len(), layout.total_features)?;
    let offset_present = layout.has_nucleus && layout.nucleus_offset;
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &v[pos..pos + n];
        pos += n;
        s
    };
    let form = take(3);
    let nucleus_offset = if offset_present {
        let o = take(3);
        [o[0], o[1], o[2]]
    } else {
        [0.0; 3]
    };
    let deformation = take(layout.deformation_count).to_vec();
    let nucleus_deformation = take(layout.nucleus_deformation_count).to_vec();
    let membrane_color = take(layout.color_channels).to_vec();
    let nucleus_color = if layout.has_nucleus {
        take(layout.color_channels).to_vec()
    } else {
        Vec::new()
    };
    let f = CellFeatures {
        deformation,
        nucleus_deformation,
        surface_distance: form[1],
        surface_strength: form[2],
        nucleus_offset,
        scale: form[0],
        membrane_color,
        nucleus_color,
    };
    if !f.matches(layout) {
        return Err(Error::Shape(
            "nonzero nucleus offset on a layout without offset".into(),
        ));
    }
    Ok(f)
}

/// A group of cells with centre positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterFeatures {
    pub cells: Vec<CellFeatures>,
    pub positions: Vec<[f64; 3]>,
}

impl ClusterFeatures {
    pub fn count(&self) -> usize {
        self.cells.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Empty("cluster has no cells".into()));
        }
        if self.cells.len() != self.positions.len() {
            return Err(Error::Shape(format!(
                "{} cells but {} positions",
                self.cells.len(),
                self.positions.len()
            )));
        }
        Ok(())
    }

    /// Packed length of a cluster with `slots` cells.
    pub fn packed_len(layout: &FeatureLayout, slots: usize) -> usize {
        slots * (layout.total_features + 3)
    }

    /// Per slot: the layout-exact cell features followed by the position.
    pub fn pack(&self, layout: &FeatureLayout) -> Result<Vec<f64>> {
        self.validate()?;
        let mut v = Vec::with_capacity(Self::packed_len(layout, self.count()));
        for (cell, p) in self.cells.iter().zip(&self.positions) {
            v.extend(pack_features(cell, layout)?);
            v.extend_from_slice(p);
        }
        Ok(v)
    }

    pub fn unpack(v: &[f64], layout: &FeatureLayout) -> Result<Self> {
        let stride = layout.total_features + 3;
        if v.is_empty() || v.len() % stride != 0 {
            return Err(Error::Shape(format!(
                "cluster vector length {} is not a positive multiple of {stride}",
                v.len()
            )));
        }
        let mut cells = Vec::new();
        let mut positions = Vec::new();
        for chunk in v.chunks(stride) {
            cells.push(unpack_features(&chunk[..layout.total_features], layout)?);
            let p = &chunk[layout.total_features..];
            positions.push([p[0], p[1], p[2]]);
        }
        Ok(Self { cells, positions })
    }

    /// Coordinate bounds of the packed cluster vector.
    pub fn coordinate_bounds(c: &ConstraintSet, slots: usize) -> Vec<Bounds> {
        let cell = c.coordinate_bounds();
        let mut out = Vec::with_capacity(slots * (cell.len() + 3));
        for _ in 0..slots {
            out.extend_from_slice(&cell);
            out.extend([c.cluster_position; 3]);
        }
        out
    }

    /// Decode a normalized cluster vector and clamp every slot.
    pub fn from_normalized(normalized: &[f64], c: &ConstraintSet) -> Result<Self> {
        let stride = c.layout.total_features + 3;
        if normalized.is_empty() || normalized.len() % stride != 0 {
            return Err(Error::Shape("bad normalized cluster length".into()));
        }
        let bounds = Self::coordinate_bounds(c, normalized.len() / stride);
        let packed: Vec<f64> = normalized.iter().zip(&bounds).map(|(t, b)| b.lerp(*t)).collect();
        clamp_cluster(&Self::unpack(&packed, &c.layout)?, c)
    }
}

/// Clamp each cell and enforce the overlap floor between cell centres.
pub fn clamp_cluster(g: &ClusterFeatures, c: &ConstraintSet) -> Result<ClusterFeatures> {
    g.validate()?;
    let cells = g
        .cells
        .iter()
        .map(|f| clamp_features(f, c))
        .collect::<Result<Vec<_>>>()?;
    let mut positions: Vec<Vec3> = g
        .positions
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]).map(|x| c.cluster_position.clamp(x)))
        .collect();
    let scales: Vec<f64> = cells.iter().map(|f| f.scale).collect();
    separate_positions(&mut positions, &scales);
    Ok(ClusterFeatures {
        cells,
        positions: positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
    })
}

/// Minimum allowed distance between the centres of two cells.
pub fn overlap_floor(scale_a: f64, scale_b: f64) -> f64 {
    OVERLAP_FACTOR * (scale_a + scale_b)
}

fn fallback_direction(i: usize, j: usize) -> Vec3 {
    // golden-angle spiral keyed on the pair, never zero
    let k = (i * 7 + j * 13) as f64;
    let z = 1.0 - 2.0 * ((k * 0.618_033_988_749_894_9).fract());
    let r = (1.0 - z * z).max(0.0).sqrt();
    let a = k * 2.399_963_229_728_653;
    Vec3::new(r * a.cos(), r * a.sin(), z).normalize()
}

/// Push cell centres apart until every pair satisfies the overlap floor.
///
/// Pairs are pushed symmetrically so the unweighted centroid is preserved.
/// If the sweeps do not converge the configuration is scaled about its
/// centroid, which fixes any remaining violation in one step.
pub fn separate_positions(positions: &mut [Vec3], scales: &[f64]) {
    let n = positions.len();
    if n < 2 {
        return;
    }
    for _ in 0..MAX_SEPARATION_SWEEPS {
        let mut moved = false;
        for i in 0..n {
            for j in i + 1..n {
                let floor = overlap_floor(scales[i], scales[j]);
                let d = positions[j] - positions[i];
                let dist = d.norm();
                if dist < floor {
                    let dir = if dist > 1e-12 { d / dist } else { fallback_direction(i, j) };
                    let push = 0.5 * (floor * (1.0 + 1e-9) - dist);
                    positions[i] -= dir * push;
                    positions[j] += dir * push;
                    moved = true;
                }
            }
        }
        if !moved {
            return;
        }
    }
    let centroid = positions.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let mut k: f64 = 1.0;
    for i in 0..n {
        for j in i + 1..n {
            let dist = (positions[j] - positions[i]).norm().max(1e-12);
            k = k.max(overlap_floor(scales[i], scales[j]) * (1.0 + 1e-9) / dist);
        }
    }
    for p in positions.iter_mut() {
        *p = centroid + (*p - centroid) * k;
    }
}
