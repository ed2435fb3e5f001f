//! Single-cell Wasserstein GAN: latent → multi-tail generator → features →
//! mesh → projections → critic.
//!
//! The mesh and raster stages are not differentiable, so the generator's
//! gradient with respect to its feature output is estimated by simultaneous
//! perturbation (SPSA) and then backpropagated through tails and trunk.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::FidProxy;
use crate::features::{CellClass, CellFeatures, ConstraintSet, FeatureLayout};
use crate::mesh::{cell_object, CellBuildOptions, Scene};
use crate::nn::{
    optimizer_step, sigmoid, Activation, Conv2d, Linear, NetParams, OptimizerKind, Tensor, DEFAULT_LEARNING_RATE,
};
use crate::render::{render_batch_sequential, Image, ProjectionSpec, RenderMode};

pub const TRUNK_GROUP: &str = "trunk";
pub const TAILS_GROUP: &str = "tails";
pub const CRITIC_GROUP: &str = "critic";
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorShape {
    pub latent_dim: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub tail_width: usize,
}

impl Default for GeneratorShape {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            trunk_width: 64,
            trunk_depth: 2,
            tail_width: 32,
        }
    }
}

/// Hidden layer plus output layer of one tail.
#[derive(Clone, Copy, Debug)]
pub struct Tail {
    pub hidden: Linear,
    pub out: Linear,
}

/// Shared trunk MLP feeding one small MLP per feature tail. Tail outputs are
/// concatenated in packed order and squashed into normalized coordinates.
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub params: NetParams,
    pub shape: GeneratorShape,
    pub layout: FeatureLayout,
    trunk: Vec<Linear>,
    tails: Vec<Tail>,
}

pub struct GeneratorCache {
    trunk_inputs: Vec<Tensor>,
    trunk_pre: Vec<Tensor>,
    trunk_out: Tensor,
    tail_pre: Vec<Tensor>,
    tail_hidden: Vec<Tensor>,
    normalized: Tensor,
}

impl GeneratorCache {
    /// Sigmoid outputs `[batch, total_features]` in `[0, 1]`.
    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }
}

/// Create the per-tail layers for `layout` inside `p`. Shared with the
/// topology decoder, which replicates the tails per cluster slot.
pub fn build_tails(
    p: &mut NetParams,
    prefix: &str,
    group: &str,
    layout: &FeatureLayout,
    input_width: usize,
    tail_width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tail>> {
    layout
        .tail_sizes()
        .into_iter()
        .enumerate()
        .map(|(k, size)| {
            Ok(Tail {
                hidden: Linear::new(p, &format!("{prefix}.{k}.hidden"), group, input_width, tail_width, true, rng)?,
                out: Linear::new(p, &format!("{prefix}.{k}.out"), group, tail_width, size, true, rng)?,
            })
        })
        .collect()
}

/// Run tails on `[batch, input_width]` rows; returns pre-sigmoid outputs and the caches.
pub fn tails_forward(p: &NetParams, tails: &[Tail], x: &Tensor) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
    let rows = x.dims2()?.0;
    let total: usize = tails.iter().map(|t| t.out.outputs).sum();
    let mut out = Tensor::zeros(&[rows, total]);
    let mut pre = Vec::with_capacity(tails.len());
    let mut hidden = Vec::with_capacity(tails.len());
    let mut col = 0;
    for t in tails {
        let h_pre = t.hidden.forward(p, x)?;
        let h = Activation::LeakyRelu(LEAK).forward(&h_pre);
        out.set_columns(col, &t.out.forward(p, &h)?)?;
        col += t.out.outputs;
        pre.push(h_pre);
        hidden.push(h);
    }
    Ok((out, pre, hidden))
}

/// Backpropagate `d_out` (gradient on pre-sigmoid outputs) through tails; returns `dL/dx`.
pub fn tails_backward(
    p: &mut NetParams,
    tails: &[Tail],
    x: &Tensor,
    pre: &[Tensor],
    hidden: &[Tensor],
    d_out: &Tensor,
    param_grads: bool,
) -> Result<Tensor> {
    let mut dx = Tensor::zeros(x.shape());
    let mut col = 0;
    for (k, t) in tails.iter().enumerate() {
        let g = d_out.columns(col, t.out.outputs)?;
        col += t.out.outputs;
        let dh = if param_grads {
            t.out.backward(p, &hidden[k], &g)?
        } else {
            t.out.backward_input(p, &g)?
        };
        let dpre = Activation::LeakyRelu(LEAK).backward(&pre[k], &dh)?;
        let d = if param_grads {
            t.hidden.backward(p, x, &dpre)?
        } else {
            t.hidden.backward_input(p, &dpre)?
        };
        dx.add_assign(&d)?;
    }
    Ok(dx)
}

impl GeneratorNet {
    pub fn new(layout: &FeatureLayout, shape: &GeneratorShape, seed: u64) -> Result<Self> {
        layout.validate()?;
        if shape.latent_dim == 0 || shape.trunk_width == 0 || shape.tail_width == 0 {
            return Err(Error::InvalidArgument("generator widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetParams::new();
        let mut trunk = Vec::with_capacity(shape.trunk_depth);
        let mut width = shape.latent_dim;
        for i in 0..shape.trunk_depth {
            trunk.push(Linear::new(
                &mut params,
                &format!("trunk.{i}"),
                TRUNK_GROUP,
                width,
                shape.trunk_width,
                true,
                &mut rng,
            )?);
            width = shape.trunk_width;
        }
        let tails = build_tails(&mut params, "tail", TAILS_GROUP, layout, width, shape.tail_width, &mut rng)?;
        Ok(Self {
            params,
            shape: shape.clone(),
            layout: layout.clone(),
            trunk,
            tails,
        })
    }

    pub fn tail_count(&self) -> usize {
        self.tails.len()
    }

    pub fn tails(&self) -> &[Tail] {
        &self.tails
    }

    /// Width of the representation the tails consume.
    pub fn tail_input_width(&self) -> usize {
        if self.trunk.is_empty() {
            self.shape.latent_dim
        } else {
            self.shape.trunk_width
        }
    }

    /// Uniform latent codes in `[-1, 1]`.
    pub fn sample_latent(&self, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..batch * self.shape.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(&[batch, self.shape.latent_dim], data).expect("shape matches data")
    }

    pub fn forward(&self, z: &Tensor) -> Result<GeneratorCache> {
        let (_, d) = z.dims2()?;
        if d != self.shape.latent_dim {
            return Err(Error::Shape(format!("latent width {d}, expected {}", self.shape.latent_dim)));
        }
        let mut h = z.clone();
        let mut trunk_inputs = Vec::with_capacity(self.trunk.len());
        let mut trunk_pre = Vec::with_capacity(self.trunk.len());
        for lin in &self.trunk {
            let pre = lin.forward(&self.params, &h)?;
            trunk_inputs.push(h);
            h = Activation::LeakyRelu(LEAK).forward(&pre);
            trunk_pre.push(pre);
        }
        let (out, tail_pre, tail_hidden) = tails_forward(&self.params, &self.tails, &h)?;
        Ok(GeneratorCache {
            trunk_inputs,
            trunk_pre,
            trunk_out: h,
            tail_pre,
            tail_hidden,
            normalized: out.map(sigmoid),
        })
    }

    /// Accumulate parameter gradients given `dL/d(normalized output)`.
    pub fn backward(&mut self, cache: &GeneratorCache, d_normalized: &Tensor) -> Result<()> {
        let d_out = cache.normalized.zip(d_normalized, |s, g| g * s * (1.0 - s))?;
        let mut g = tails_backward(
            &mut self.params,
            &self.tails,
            &cache.trunk_out,
            &cache.tail_pre,
            &cache.tail_hidden,
            &d_out,
            true,
        )?;
        for (i, lin) in self.trunk.iter().enumerate().rev() {
            let dpre = Activation::LeakyRelu(LEAK).backward(&cache.trunk_pre[i], &g)?;
            g = lin.backward(&mut self.params, &cache.trunk_inputs[i], &dpre)?;
        }
        Ok(())
    }
}

/// Features for one latent vector: tails → packed → unpacked → clamped.
pub fn generator_forward(g: &GeneratorNet, z: &[f64], c: &ConstraintSet) -> Result<CellFeatures> {
    if c.layout != g.layout {
        return Err(Error::Shape("constraint layout differs from generator layout".into()));
    }
    let z = Tensor::new(&[1, z.len()], z.to_vec())?;
    let cache = g.forward(&z)?;
    c.features_from_normalized(cache.normalized.row(0))
}

/// Strided convolutions and a dense head producing one unbounded score.
#[derive(Clone, Debug)]
pub struct CriticNet {
    pub params: NetParams,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
    image_size: usize,
}

pub struct CriticCache {
    x: Tensor,
    pre1: Tensor,
    h1: Tensor,
    pre2: Tensor,
    flat: Tensor,
}

impl CriticNet {
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if image_size < 8 || image_size % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "critic image size {image_size} must be a multiple of 4 and at least 8"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetParams::new();
        let conv1 = Conv2d::new(&mut params, "critic.conv1", CRITIC_GROUP, 4, 8, 4, 2, 1, &mut rng)?;
        let conv2 = Conv2d::new(&mut params, "critic.conv2", CRITIC_GROUP, 8, 16, 4, 2, 1, &mut rng)?;
        let flat = 16 * (image_size / 4) * (image_size / 4);
        let head = Linear::new(&mut params, "critic.head", CRITIC_GROUP, flat, 1, true, &mut rng)?;
        Ok(Self {
            params,
            conv1,
            conv2,
            head,
            image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn forward(&self, image: &Image) -> Result<(f64, CriticCache)> {
        if image.width() != self.image_size || image.height() != self.image_size {
            return Err(Error::Shape(format!(
                "critic expects {0}x{0} images, got {1}x{2}",
                self.image_size,
                image.width(),
                image.height()
            )));
        }
        let x = Tensor::new(&[4, self.image_size, self.image_size], image.to_chw())?;
        let act = Activation::LeakyRelu(LEAK);
        let pre1 = self.conv1.forward(&self.params, &x)?;
        let h1 = act.forward(&pre1);
        let pre2 = self.conv2.forward(&self.params, &h1)?;
        let n = pre2.len();
        let flat = act.forward(&pre2).reshape(&[1, n])?;
        let score = self.head.forward(&self.params, &flat)?.data()[0];
        Ok((score, CriticCache { x, pre1, h1, pre2, flat }))
    }

    pub fn score(&self, image: &Image) -> Result<f64> {
        self.forward(image).map(|(s, _)| s)
    }

    pub fn backward(&mut self, cache: &CriticCache, d_score: f64) -> Result<()> {
        let act = Activation::LeakyRelu(LEAK);
        let dflat = self.head.backward(&mut self.params, &cache.flat, &Tensor::new(&[1, 1], vec![d_score])?)?;
        let dflat = dflat.reshape(cache.pre2.shape())?;
        let dpre2 = act.backward(&cache.pre2, &dflat)?;
        let dh1 = self.conv2.backward(&mut self.params, &cache.h1, &dpre2, true)?;
        let dpre1 = act.backward(&cache.pre1, &dh1)?;
        self.conv1.backward(&mut self.params, &cache.x, &dpre1, true)?;
        Ok(())
    }
}

/// `(critic_loss, gen_loss)` with `critic_loss = −(mean real − mean fake)` and
/// `gen_loss = −mean fake`.
pub fn wgan_losses(f_real: &[f64], f_fake: &[f64]) -> Result<(f64, f64)> {
    if f_real.is_empty() || f_fake.is_empty() {
        return Err(Error::Empty("critic score lists".into()));
    }
    if f_real.len() != f_fake.len() {
        return Err(Error::Shape(format!(
            "{} real vs {} fake scores",
            f_real.len(),
            f_fake.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, f) = (mean(f_real), mean(f_fake));
    Ok((-(r - f), -f))
}

/// Clamp every trainable critic weight into `[-c, c]`.
pub fn weight_clip(p: &mut NetParams, c: f64) -> Result<()> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::InvalidArgument(format!("clip bound must be positive, got {c}")));
    }
    p.clip_values(c);
    Ok(())
}

/// Exact 1-Wasserstein distance between two equal-size empirical samples.
pub fn exact_w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Empty("w1 samples".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Sylvester Hadamard entry `H[r][c]` for a power-of-two order.
fn hadamard(r: usize, c: usize) -> f64 {
    if (r & c).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Balanced ±1 perturbation directions: within each block of `order` probes the
/// directions are distinct columns of a Hadamard matrix (so they are mutually
/// orthogonal across coordinates), with per-block column shuffles and sign flips.
fn perturbations(dim: usize, probes: usize, seed: u64) -> Vec<Vec<f64>> {
    let order = (dim + 1).next_power_of_two();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(probes);
    while out.len() < probes {
        let mut cols: Vec<usize> = (1..order).collect();
        cols.shuffle(&mut rng);
        let signs: Vec<f64> = (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut rows: Vec<usize> = (0..order).collect();
        rows.shuffle(&mut rng);
        for &r in rows.iter().take(probes - out.len()) {
            out.push((0..dim).map(|i| signs[i] * hadamard(r, cols[i])).collect());
        }
    }
    out
}

/// SPSA estimate of `∇score(v)`: the mean over probes of
/// `(score(v + hΔ) − score(v − hΔ)) / 2h · Δ`.
pub fn estimate_feature_grad<F>(v: &[f64], score: F, probes: usize, step: f64, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if probes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 probes, got {probes}")));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!("probe step must be positive, got {step}")));
    }
    let dirs = perturbations(v.len(), probes, seed);
    let diffs = dirs
        .par_iter()
        .map(|d| {
            let plus: Vec<f64> = v.iter().zip(d).map(|(x, e)| x + step * e).collect();
            let minus: Vec<f64> = v.iter().zip(d).map(|(x, e)| x - step * e).collect();
            Ok((score(&plus)? - score(&minus)?) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut g = vec![0.0; v.len()];
    for (d, df) in dirs.iter().zip(&diffs) {
        for (gi, di) in g.iter_mut().zip(d) {
            *gi += df * di;
        }
    }
    g.iter_mut().for_each(|x| *x /= probes as f64);
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Batch size `m`.
    pub batch: usize,
    pub clip: f64,
    pub lr: f64,
    pub critic_lr: f64,
    pub critic_steps: usize,
    pub spsa_probes: usize,
    pub spsa_step: f64,
    pub seed: u64,
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
    pub image_size: usize,
    pub world_extent: f64,
    pub class: CellClass,
    pub subdivisions: u32,
    pub optimizer: OptimizerKind,
    pub generator: GeneratorShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            clip: 0.01,
            lr: DEFAULT_LEARNING_RATE,
            critic_lr: DEFAULT_LEARNING_RATE,
            critic_steps: 5,
            spsa_probes: 8,
            spsa_step: 1e-2,
            seed: 0,
            thetas: vec![0.0],
            phis: vec![0.0],
            image_size: 32,
            world_extent: 4.0,
            class: CellClass::Normal,
            subdivisions: 3,
            optimizer: OptimizerKind::default(),
            generator: GeneratorShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch < 1 {
            return bad("batch must be at least 1".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.spsa_probes < 2 {
            return bad(format!("spsa_probes must be at least 2, got {}", self.spsa_probes));
        }
        if !(self.spsa_step > 0.0) {
            return bad("spsa_step must be positive".into());
        }
        if self.subdivisions > crate::mesh::MAX_SUBDIVISIONS {
            return bad(format!("subdivisions above {}", crate::mesh::MAX_SUBDIVISIONS));
        }
        self.projection().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn projection(&self) -> ProjectionSpec {
        ProjectionSpec {
            thetas: self.thetas.clone(),
            phis: self.phis.clone(),
            size: self.image_size,
            mode: RenderMode::Projection,
            world_extent: self.world_extent,
        }
    }

    pub fn build_options(&self) -> CellBuildOptions {
        CellBuildOptions {
            subdivisions: self.subdivisions,
            ..CellBuildOptions::default()
        }
    }
}

/// Projections of one cell over the configured angle grid.
pub fn render_cell(f: &CellFeatures, c: &ConstraintSet, cfg: &TrainConfig) -> Result<Vec<Image>> {
    let scene = Scene::new(vec![cell_object(f, c, &cfg.build_options())?]);
    Ok(render_batch_sequential(&scene, &cfg.projection())?
        .into_iter()
        .map(|(_, _, im)| im)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub wasserstein_estimate: f64,
}

/// Generator, critic and the random stream of one training run.
pub struct GanTrainer {
    pub generator: GeneratorNet,
    pub critic: CriticNet,
    pub constraints: ConstraintSet,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl GanTrainer {
    pub fn new(constraints: ConstraintSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        constraints.validate()?;
        let generator = GeneratorNet::new(&constraints.layout, &cfg.generator, cfg.seed)?;
        let critic = CriticNet::new(cfg.image_size, cfg.seed.wrapping_add(1))?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        Ok(Self {
            generator,
            critic,
            constraints,
            cfg,
            rng,
        })
    }

    /// Mean critic score of the projections of the cell decoded from `normalized`.
    fn cell_score(&self, normalized: &[f64]) -> Result<f64> {
        let f = self.constraints.features_from_normalized(normalized)?;
        let images = render_cell(&f, &self.constraints, &self.cfg)?;
        let mut s = 0.0;
        for im in &images {
            s += self.critic.score(im)?;
        }
        Ok(s / images.len() as f64)
    }

    /// Render a batch of generator samples, one image set per latent.
    pub fn sample_images(&self, z: &Tensor) -> Result<Vec<Vec<Image>>> {
        let cache = self.generator.forward(z)?;
        (0..z.dims2()?.0)
            .into_par_iter()
            .map(|i| {
                let f = self.constraints.features_from_normalized(cache.normalized.row(i))?;
                render_cell(&f, &self.constraints, &self.cfg)
            })
            .collect()
    }

    pub fn sample_features(&self, z: &Tensor) -> Result<Vec<CellFeatures>> {
        let cache = self.generator.forward(z)?;
        (0..z.dims2()?.0)
            .map(|i| self.constraints.features_from_normalized(cache.normalized.row(i)))
            .collect()
    }

    /// One critic update on a real batch and a fresh fake batch. Returns the critic loss.
    pub fn critic_step(&mut self, real: &[Image]) -> Result<f64> {
        let m = self.cfg.batch;
        let z = self.generator.sample_latent(m, &mut self.rng);
        let fakes: Vec<Image> = self.sample_images(&z)?.into_iter().flatten().collect();
        let reals: Vec<&Image> = (0..fakes.len())
            .map(|_| &real[self.rng.gen_range(0..real.len())])
            .collect();
        self.critic.params.zero_grad();
        let n = fakes.len() as f64;
        let mut f_real = Vec::with_capacity(fakes.len());
        let mut f_fake = Vec::with_capacity(fakes.len());
        for (r, f) in reals.iter().zip(&fakes) {
            let (sr, cr) = self.critic.forward(r)?;
            self.critic.backward(&cr, -1.0 / n)?;
            let (sf, cf) = self.critic.forward(f)?;
            self.critic.backward(&cf, 1.0 / n)?;
            f_real.push(sr);
            f_fake.push(sf);
        }
        let (loss, _) = wgan_losses(&f_real, &f_fake)?;
        optimizer_step(&mut self.critic.params, self.cfg.critic_lr, self.cfg.optimizer);
        weight_clip(&mut self.critic.params, self.cfg.clip)?;
        Ok(loss)
    }

    /// One generator update through the SPSA bridge. Returns the generator loss.
    pub fn generator_step(&mut self) -> Result<f64> {
        let m = self.cfg.batch;
        let z = self.generator.sample_latent(m, &mut self.rng);
        let cache = self.generator.forward(&z)?;
        let seeds: Vec<u64> = (0..m).map(|_| self.rng.gen()).collect();
        let width = self.constraints.layout.total_features;
        let this = &*self;
        let per_sample = (0..m)
            .into_par_iter()
            .map(|i| {
                let v = cache.normalized.row(i);
                let s = this.cell_score(v)?;
                let g = estimate_feature_grad(
                    v,
                    |u| this.cell_score(u),
                    this.cfg.spsa_probes,
                    this.cfg.spsa_step,
                    seeds[i],
                )?;
                Ok((s, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = Tensor::zeros(&[m, width]);
        let mut scores = Vec::with_capacity(m);
        for (i, (s, g)) in per_sample.into_iter().enumerate() {
            scores.push(s);
            for (j, gj) in g.into_iter().enumerate() {
                grad.data_mut()[i * width + j] = -gj / m as f64;
            }
        }
        self.generator.params.zero_grad();
        self.generator.backward(&cache, &grad)?;
        optimizer_step(&mut self.generator.params, self.cfg.lr, self.cfg.optimizer);
        Ok(-scores.iter().sum::<f64>() / m as f64)
    }

    /// `critic_steps` critic updates followed by one generator update.
    pub fn train_step(&mut self, real: &[Image]) -> Result<StepMetrics> {
        if real.is_empty() {
            return Err(Error::Empty("real image batch".into()));
        }
        let mut critic_loss = 0.0;
        for _ in 0..self.cfg.critic_steps {
            critic_loss = self.critic_step(real)?;
        }
        let gen_loss = self.generator_step()?;
        Ok(StepMetrics {
            critic_loss,
            gen_loss,
            wasserstein_estimate: -critic_loss,
        })
    }
}

/// One line of the training metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub metrics: StepMetrics,
    pub fid_proxy: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,critic_loss,gen_loss,w_estimate,fid_proxy";

pub fn write_metrics_csv(rows: &[MetricsRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let fid = r.fid_proxy.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iter, r.metrics.critic_loss, r.metrics.gen_loss, r.metrics.wasserstein_estimate, fid
        )?;
    }
    Ok(())
}

pub fn save_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Schedule for a full training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSchedule {
    pub iters: usize,
    /// FID-proxy evaluation period in iterations; 0 evaluates only at start and end.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
}

impl Default for RunSchedule {
    fn default() -> Self {
        Self {
            iters: 200,
            eval_every: 50,
            eval_samples: 64,
            embed_dim: crate::eval::DEFAULT_EMBED_DIM,
            embed_seed: 0,
        }
    }
}

impl GanTrainer {
    /// FID-proxy of images rendered from a fixed latent batch.
    pub fn fid_proxy(&self, proxy: &FidProxy, z: &Tensor) -> Result<f64> {
        let images: Vec<Image> = self.sample_images(z)?.into_iter().flatten().collect();
        proxy.score(&images)
    }

    /// Train for `schedule.iters` steps, scoring the FID-proxy at iteration 0,
    /// every `eval_every` iterations, and after the last step.
    pub fn run(&mut self, real: &[Image], schedule: &RunSchedule) -> Result<Vec<MetricsRow>> {
        if real.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 real images".into()));
        }
        if schedule.eval_samples < 2 {
            return Err(Error::Config("eval_samples must be at least 2".into()));
        }
        let proxy = FidProxy::new(real, schedule.embed_dim, schedule.embed_seed)?;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_f1d0);
        let eval_z = self.generator.sample_latent(schedule.eval_samples, &mut eval_rng);
        let mut rows = Vec::with_capacity(schedule.iters + 1);
        let initial = self.fid_proxy(&proxy, &eval_z)?;
        rows.push(MetricsRow {
            iter: 0,
            metrics: StepMetrics {
                critic_loss: 0.0,
                gen_loss: 0.0,
                wasserstein_estimate: 0.0,
            },
            fid_proxy: Some(initial),
        });
        for it in 1..=schedule.iters {
            let metrics = self.train_step(real)?;
            let due = it == schedule.iters || (schedule.eval_every > 0 && it % schedule.eval_every == 0);
            let fid_proxy = if due { Some(self.fid_proxy(&proxy, &eval_z)?) } else { None };
            rows.push(MetricsRow {
                iter: it,
                metrics,
                fid_proxy,
            });
        }
        Ok(rows)
    }
}

/// Iteration-0 and final FID-proxy of a metrics stream.
pub fn fid_endpoints(rows: &[MetricsRow]) -> Option<(f64, f64)> {
    let mut it = rows.iter().filter_map(|r| r.fid_proxy);
    let first = it.next()?;
    let last = it.last().unwrap_or(first);
    Some((first, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::satisfies;
    use crate::nn::grad_check;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch: 2,
            critic_steps: 2,
            spsa_probes: 2,
            image_size: 16,
            subdivisions: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn generator_is_deterministic_and_constrained() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let g = GeneratorNet::new(&c.layout, &GeneratorShape::default(), 5).unwrap();
        assert_eq!(g.tail_count(), c.layout.tails);
        let z = vec![0.3; g.shape.latent_dim];
        let a = generator_forward(&g, &z, &c).unwrap();
        assert_eq!(a, generator_forward(&g, &z, &c).unwrap());
        assert!(satisfies(&a, &c));
        assert!(generator_forward(&g, &z[1..], &c).is_err());
    }

    #[test]
    fn distinct_latents_give_distinct_features() {
        let c = ConstraintSet::preset("table1-32").unwrap();
        let g = GeneratorNet::new(&c.layout, &GeneratorShape::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut differ = 0;
        for _ in 0..100 {
            let z = g.sample_latent(2, &mut rng);
            let a = generator_forward(&g, z.row(0), &c).unwrap();
            let b = generator_forward(&g, z.row(1), &c).unwrap();
            differ += usize::from(a != b);
        }
        assert!(differ >= 99);
    }

    #[test]
    fn generator_backward_matches_finite_differences() {
        let layout = FeatureLayout::preset(32).unwrap();
        let shape = GeneratorShape {
            latent_dim: 3,
            trunk_width: 5,
            trunk_depth: 2,
            tail_width: 4,
        };
        let mut g = GeneratorNet::new(&layout, &shape, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = g.sample_latent(2, &mut rng);
        let w = Tensor::new(&[2, 32], (0..64).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect()).unwrap();
        let mut params = std::mem::take(&mut g.params);
        let err = grad_check(
            |p| {
                std::mem::swap(&mut g.params, p);
                let cache = g.forward(&z).unwrap();
                let loss = cache.normalized().zip(&w, |a, b| a * b).unwrap().sum();
                g.backward(&cache, &w).unwrap();
                std::mem::swap(&mut g.params, p);
                loss
            },
            &mut params,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn critic_backward_matches_finite_differences() {
        let mut critic = CriticNet::new(8, 3).unwrap();
        let mut im = Image::new(8, 8);
        for y in 2..6 {
            for x in 1..7 {
                im.set_pixel(x, y, [0.2 * x as f64 / 7.0, 0.5, 0.9, 1.0]);
            }
        }
        let mut params = std::mem::take(&mut critic.params);
        let err = grad_check(
            |p| {
                std::mem::swap(&mut critic.params, p);
                let (s, cache) = critic.forward(&im).unwrap();
                critic.backward(&cache, 1.0).unwrap();
                std::mem::swap(&mut critic.params, p);
                s
            },
            &mut params,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wgan_loss_arithmetic() {
        assert_eq!(wgan_losses(&[0.3, -0.2], &[0.3, -0.2]).unwrap().0, 0.0);
        assert_eq!(wgan_losses(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), (-1.0, -0.0));
        assert!(wgan_losses(&[], &[]).is_err());
        assert!(wgan_losses(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let r: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let f: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mr = r.iter().sum::<f64>() / 7.0;
            let mf = f.iter().sum::<f64>() / 7.0;
            let (cl, gl) = wgan_losses(&r, &f).unwrap();
            assert!((cl + (mr - mf)).abs() < 1e-12);
            let k = rng.gen_range(-5.0..5.0);
            let rk: Vec<f64> = r.iter().map(|v| v + k).collect();
            let fk: Vec<f64> = f.iter().map(|v| v + k).collect();
            let (cl2, gl2) = wgan_losses(&rk, &fk).unwrap();
            assert!((cl2 - cl).abs() < 1e-12);
            assert!((gl2 - (gl - k)).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_and_idempotence() {
        let mut critic = CriticNet::new(16, 0).unwrap();
        let id = critic.params.ids().next().unwrap();
        let mut v = critic.params.value(id).clone();
        v.data_mut()[0] = 5.0;
        critic.params.set_value(id, v).unwrap();
        weight_clip(&mut critic.params, 0.01).unwrap();
        assert_eq!(critic.params.value(id).data()[0], 0.01);
        let once = critic.params.to_bytes().unwrap();
        weight_clip(&mut critic.params, 0.01).unwrap();
        assert_eq!(critic.params.to_bytes().unwrap(), once);
        for id in critic.params.ids() {
            assert!(critic.params.value(id).data().iter().all(|w| w.abs() <= 0.01));
        }
        assert!(weight_clip(&mut critic.params, 0.0).is_err());
    }

    #[test]
    fn w1_small_cases() {
        assert_eq!(exact_w1_1d(&[1.0, 4.0], &[4.0, 1.0]).unwrap(), 0.0);
        assert_eq!(exact_w1_1d(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(exact_w1_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(exact_w1_1d(&[0.0], &[]).is_err());
        assert!(exact_w1_1d(&[], &[]).is_err());
    }

    #[test]
    fn spsa_constant_linear_quadratic() {
        let v = vec![0.2, -0.4, 0.7];
        let zero = estimate_feature_grad(&v, |_| Ok(2.5), 8, 1e-2, 1).unwrap();
        assert!(zero.iter().all(|g| *g == 0.0));
        let a = [1.0, -2.5, 0.75];
        let linear = |u: &[f64]| Ok(u.iter().zip(&a).map(|(x, y)| x * y).sum());
        let lin = estimate_feature_grad(&v, linear, 100, 1e-2, 2).unwrap();
        for (g, ai) in lin.iter().zip(&a) {
            assert!((g - ai).abs() < 0.1 * ai.abs(), "{g} vs {ai}");
        }
        assert_eq!(lin, estimate_feature_grad(&v, linear, 100, 1e-2, 2).unwrap());
        let quad = estimate_feature_grad(&v, |u| Ok(u.iter().map(|x| x * x).sum()), 100, 1e-2, 3).unwrap();
        for (g, x) in quad.iter().zip(&v) {
            assert!((g - 2.0 * x).abs() < 0.1 * (2.0 * x).abs(), "{g} vs {}", 2.0 * x);
        }
        assert!(estimate_feature_grad(&v, |_| Ok(0.0), 1, 1e-2, 0).is_err());
        assert!(estimate_feature_grad(&v, |_| Ok(0.0), 4, 0.0, 0).is_err());
    }

    #[test]
    fn spsa_full_hadamard_blocks_are_exact_for_quadratics() {
        // 10 coordinates use order-16 blocks; 96 probes are six complete blocks.
        let v: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.3).collect();
        let a: Vec<f64> = (0..10).map(|i| 1.0 + 0.3 * i as f64).collect();
        let g = estimate_feature_grad(
            &v,
            |u| Ok(u.iter().zip(&a).map(|(x, y)| x * y + x * x).sum()),
            96,
            1e-2,
            7,
        )
        .unwrap();
        for ((gi, ai), vi) in g.iter().zip(&a).zip(&v) {
            assert!((gi - (ai + 2.0 * vi)).abs() < 1e-9);
        }
    }

    #[test]
    fn train_steps_are_deterministic_and_keep_clip() {
        let c = ConstraintSet::preset("table1-5").unwrap();
        let cfg = small_cfg();
        let real: Vec<Image> = (0..4)
            .map(|i| {
                let f = crate::features::random_features(&c.layout, &c, i).unwrap();
                render_cell(&f, &c, &cfg).unwrap().remove(0)
            })
            .collect();
        let run = || {
            let mut t = GanTrainer::new(c.clone(), cfg.clone()).unwrap();
            let mut out = Vec::new();
            for _ in 0..3 {
                out.push(t.train_step(&real).unwrap());
                for id in t.critic.params.ids() {
                    assert!(t.critic.params.value(id).data().iter().all(|w| w.abs() <= cfg.clip));
                }
                let z = t.generator.sample_latent(2, &mut ChaCha8Rng::seed_from_u64(0));
                for f in t.sample_features(&z).unwrap() {
                    assert!(satisfies(&f, &c));
                }
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![
            MetricsRow {
                iter: 0,
                metrics: StepMetrics {
                    critic_loss: 0.0,
                    gen_loss: 0.0,
                    wasserstein_estimate: 0.0,
                },
                fid_proxy: Some(1.5),
            },
            MetricsRow {
                iter: 1,
                metrics: StepMetrics {
                    critic_loss: -0.25,
                    gen_loss: 0.125,
                    wasserstein_estimate: 0.25,
                },
                fid_proxy: None,
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,critic_loss,gen_loss,w_estimate,fid_proxy\n0,0,0,0,1.5\n1,-0.25,0.125,0.25,\n"
        );
        assert_eq!(fid_endpoints(&rows), Some((1.5, 1.5)));
    }
}
