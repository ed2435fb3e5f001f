//! Topology transformer: a patch-embedding encoder whose pooled output is
//! decoded by frozen per-slot generator tails into cluster features, trained
//! by comparing re-rendered projections with the input patch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ClusterFeatures, ConstraintSet};
use crate::gan::{build_tails, estimate_feature_grad, tails_backward, tails_forward, GeneratorShape, Tail};
use crate::mesh::{assemble_cluster_with, CellBuildOptions, Scene};
use crate::nn::{
    optimizer_step, sigmoid, Activation, LayerStack, Linear, NetParams, OptimizerKind, ParamId, StackCache, Tensor,
};
use crate::render::{render_batch_sequential, Image, ProjectionSpec, RenderMode};

pub const EMBED_GROUP: &str = "embed";
pub const ENCODER_GROUP: &str = "encoder";
pub const DECODER_GROUP: &str = "decoder";
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopoConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Cells decoded per patch.
    pub slots: usize,
    pub lambda: f64,
    pub min_n: usize,
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
    pub world_extent: f64,
    pub subdivisions: u32,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    pub spsa_probes: usize,
    pub spsa_step: f64,
    /// Step of the finite-difference Hessian-vector product used for the
    /// parameter gradient of the contractive penalty.
    pub hvp_step: f64,
    pub seed: u64,
    pub generator: GeneratorShape,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self {
            image_size: 40,
            patch_size: 8,
            d_model: 32,
            depth: 2,
            heads: 4,
            mlp_hidden: 64,
            slots: 3,
            lambda: 1e-3,
            min_n: 3,
            thetas: vec![0.0, 45.0, 90.0, 135.0],
            phis: vec![0.0, 60.0, 120.0],
            world_extent: 8.0,
            subdivisions: 2,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            batch: 2,
            spsa_probes: 8,
            spsa_step: 1e-2,
            hvp_step: 1e-4,
            seed: 0,
            generator: GeneratorShape::default(),
        }
    }
}

impl TopoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.slots == 0 {
            return bad("slots must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        let views = self.thetas.len() * self.phis.len();
        if self.min_n == 0 || self.min_n > views {
            return bad(format!("min_n {} must lie in 1..={views}", self.min_n));
        }
        if self.batch == 0 || self.spsa_probes < 2 || !(self.spsa_step > 0.0) || !(self.hvp_step > 0.0) {
            return bad("batch, spsa_probes, spsa_step and hvp_step must be positive (probes >= 2)".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive".into());
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

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }
}

/// Frozen adapter, tails and position head for one cluster slot.
#[derive(Clone, Debug)]
struct SlotDecoder {
    adapter: Linear,
    tails: Vec<Tail>,
    position: Linear,
}

#[derive(Clone, Debug)]
pub struct TopoTransformer {
    pub params: NetParams,
    pub cfg: TopoConfig,
    pub constraints: ConstraintSet,
    patch_linear: Linear,
    pos: ParamId,
    encoder: LayerStack,
    decoder: Vec<SlotDecoder>,
}

/// Forward state of the encoder, enough to backpropagate from the pooled layer.
pub struct EncodeCache {
    patches: Tensor,
    stack: StackCache,
    tokens: usize,
}

/// Flatten `patch_size²` RGBA tiles in row-major tile order.
pub fn image_patches(x: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || x.width() % patch != 0 || x.height() % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {patch}px patches",
            x.width(),
            x.height()
        )));
    }
    let (gw, gh) = (x.width() / patch, x.height() / patch);
    let width = patch * patch * 4;
    let mut out = Vec::with_capacity(gw * gh * width);
    for ty in 0..gh {
        for tx in 0..gw {
            for y in 0..patch {
                for xx in 0..patch {
                    out.extend(x.pixel(tx * patch + xx, ty * patch + y));
                }
            }
        }
    }
    Tensor::new(&[gw * gh, width], out)
}

/// Scatter per-patch gradients back to image layout `[height * width * 4]`.
fn patches_to_image_grad(g: &Tensor, width: usize, height: usize, patch: usize) -> Vec<f64> {
    let gw = width / patch;
    let mut out = vec![0.0; width * height * 4];
    for t in 0..g.shape()[0] {
        let (tx, ty) = (t % gw, t / gw);
        let row = g.row(t);
        for y in 0..patch {
            for xx in 0..patch {
                let src = (y * patch + xx) * 4;
                let dst = ((ty * patch + y) * width + tx * patch + xx) * 4;
                out[dst..dst + 4].copy_from_slice(&row[src..src + 4]);
            }
        }
    }
    out
}

impl TopoTransformer {
    pub fn new(constraints: ConstraintSet, cfg: TopoConfig) -> Result<Self> {
        cfg.validate()?;
        constraints.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = NetParams::new();
        let patch_width = cfg.patch_size * cfg.patch_size * 4;
        let patch_linear = Linear::new(&mut params, "embed.patch", EMBED_GROUP, patch_width, cfg.d_model, true, &mut rng)?;
        let pos = params.add_uniform("embed.pos", EMBED_GROUP, &[cfg.tokens(), cfg.d_model], cfg.d_model, &mut rng)?;
        let encoder = LayerStack::new(
            &mut params,
            "encoder",
            ENCODER_GROUP,
            cfg.depth,
            cfg.d_model,
            cfg.heads,
            cfg.mlp_hidden,
            &mut rng,
        )?;
        // The decoder gets its own stream so encoder shapes do not change its weights.
        let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0_de00);
        let adapter_width = cfg.generator.trunk_width;
        let decoder = (0..cfg.slots)
            .map(|s| {
                Ok(SlotDecoder {
                    adapter: Linear::new(
                        &mut params,
                        &format!("decoder.{s}.adapter"),
                        DECODER_GROUP,
                        cfg.d_model,
                        adapter_width,
                        true,
                        &mut drng,
                    )?,
                    tails: build_tails(
                        &mut params,
                        &format!("decoder.{s}.tail"),
                        DECODER_GROUP,
                        &constraints.layout,
                        adapter_width,
                        cfg.generator.tail_width,
                        &mut drng,
                    )?,
                    position: Linear::new(
                        &mut params,
                        &format!("decoder.{s}.position"),
                        DECODER_GROUP,
                        cfg.d_model,
                        3,
                        true,
                        &mut drng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        params.freeze(DECODER_GROUP);
        Ok(Self {
            params,
            cfg,
            constraints,
            patch_linear,
            pos,
            encoder,
            decoder,
        })
    }

    /// Copy generator tail weights (`tail.{k}.*`) into every slot's tails.
    /// The generator must share this transformer's feature layout and tail shape.
    pub fn load_decoder_tails(&mut self, generator: &NetParams) -> Result<usize> {
        let mut copied = 0;
        for s in 0..self.cfg.slots {
            let prefix = format!("decoder.{s}.");
            let targets: Vec<ParamId> = self
                .params
                .ids()
                .filter(|&id| self.params.name(id).starts_with(&format!("{prefix}tail.")))
                .collect();
            for id in targets {
                let src_name = self.params.name(id)[prefix.len()..].to_string();
                let src = generator
                    .find(&src_name)
                    .ok_or_else(|| Error::Validation(format!("generator checkpoint lacks {src_name}")))?;
                let value = generator.value(src);
                if value.shape() != self.params.value(id).shape() {
                    return Err(Error::Shape(format!(
                        "{src_name}: checkpoint {:?} vs decoder {:?}",
                        value.shape(),
                        self.params.value(id).shape()
                    )));
                }
                *self.params.value_mut_unchecked(id) = value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn decoder_bytes(&self) -> Vec<u8> {
        self.params.group_bytes(DECODER_GROUP)
    }

    /// Tokens = linear(flattened patch) + position embedding.
    pub fn patch_embed(&self, x: &Image) -> Result<Tensor> {
        self.embed_with_patches(x).map(|(t, _)| t)
    }

    fn embed_with_patches(&self, x: &Image) -> Result<(Tensor, Tensor)> {
        if x.width() != self.cfg.image_size || x.height() != self.cfg.image_size {
            return Err(Error::Shape(format!(
                "expected {0}x{0} input, got {1}x{2}",
                self.cfg.image_size,
                x.width(),
                x.height()
            )));
        }
        let patches = image_patches(x, self.cfg.patch_size)?;
        let tokens = self.patch_linear.forward(&self.params, &patches)?.add(self.params.value(self.pos))?;
        Ok((tokens, patches))
    }

    /// Encoder output tokens and the per-block hidden activations.
    pub fn encode(&self, x: &Image) -> Result<(Tensor, Vec<Tensor>)> {
        let (tokens, _) = self.embed_with_patches(x)?;
        let (y, hidden, _) = self.encoder.forward(&self.params, &tokens)?;
        Ok((y, hidden))
    }

    /// Mean-pooled latent: the designated hidden layer.
    pub fn pooled(&self, x: &Image) -> Result<(Vec<f64>, EncodeCache)> {
        let (tokens, patches) = self.embed_with_patches(x)?;
        let (y, _, stack) = self.encoder.forward(&self.params, &tokens)?;
        let pooled = y.mean_rows()?.into_data();
        Ok((
            pooled,
            EncodeCache {
                patches,
                stack,
                tokens: y.dims2()?.0,
            },
        ))
    }

    /// Backpropagate `dL/d(pooled)` through encoder and embedding.
    /// Returns `dL/d(patches)`; accumulates parameter gradients when asked.
    fn backward_pooled(&mut self, cache: &EncodeCache, d_pooled: &[f64], param_grads: bool) -> Result<Tensor> {
        let t = cache.tokens;
        let d = self.cfg.d_model;
        let row: Vec<f64> = d_pooled.iter().map(|g| g / t as f64).collect();
        let dy = Tensor::new(&[t, d], row.repeat(t))?;
        let dtokens = self.encoder.backward(&mut self.params, &cache.stack, &dy, param_grads)?;
        if param_grads {
            self.params.accumulate(self.pos, &dtokens)?;
            self.patch_linear.backward(&mut self.params, &cache.patches, &dtokens)
        } else {
            self.patch_linear.backward_input(&self.params, &dtokens)
        }
    }

    /// Normalized cluster vector from the pooled latent, plus what the
    /// backward pass needs.
    fn decode_normalized(&self, pooled: &[f64]) -> Result<(Tensor, Vec<DecoderCache>)> {
        let a = Tensor::new(&[1, pooled.len()], pooled.to_vec())?;
        let stride = self.constraints.layout.total_features + 3;
        let mut out = Tensor::zeros(&[1, self.cfg.slots * stride]);
        let mut caches = Vec::with_capacity(self.cfg.slots);
        for (s, dec) in self.decoder.iter().enumerate() {
            let pre = dec.adapter.forward(&self.params, &a)?;
            let h = Activation::LeakyRelu(LEAK).forward(&pre);
            let (tails_out, tail_pre, tail_hidden) = tails_forward(&self.params, &dec.tails, &h)?;
            let position = dec.position.forward(&self.params, &a)?;
            out.set_columns(s * stride, &tails_out.map(sigmoid))?;
            out.set_columns(s * stride + stride - 3, &position.map(sigmoid))?;
            caches.push(DecoderCache {
                pre,
                h,
                tail_pre,
                tail_hidden,
            });
        }
        Ok((out, caches))
    }

    /// `dL/d(pooled)` from `dL/d(normalized)`, without touching decoder gradients.
    fn decoder_backward(&mut self, normalized: &Tensor, caches: &[DecoderCache], d_norm: &Tensor) -> Result<Vec<f64>> {
        let stride = self.constraints.layout.total_features + 3;
        let tf = self.constraints.layout.total_features;
        let dpre_all = normalized.zip(d_norm, |s, g| g * s * (1.0 - s))?;
        let mut da = Tensor::zeros(&[1, self.cfg.d_model]);
        for (s, (dec, c)) in self.decoder.clone().iter().zip(caches).enumerate() {
            let dtails = dpre_all.columns(s * stride, tf)?;
            let dpos = dpre_all.columns(s * stride + tf, 3)?;
            let dh = tails_backward(&mut self.params, &dec.tails, &c.h, &c.tail_pre, &c.tail_hidden, &dtails, false)?;
            let dpre = Activation::LeakyRelu(LEAK).backward(&c.pre, &dh)?;
            da.add_assign(&dec.adapter.backward_input(&self.params, &dpre)?)?;
            da.add_assign(&dec.position.backward_input(&self.params, &dpos)?)?;
        }
        Ok(da.into_data())
    }

    /// Cluster features decoded from the mean-pooled latent tokens.
    pub fn decode_features(&self, latent: &Tensor) -> Result<ClusterFeatures> {
        let pooled = latent.mean_rows()?.into_data();
        let (norm, _) = self.decode_normalized(&pooled)?;
        ClusterFeatures::from_normalized(norm.data(), &self.constraints)
    }

    fn build_options(&self) -> CellBuildOptions {
        CellBuildOptions {
            subdivisions: self.cfg.subdivisions,
            ..CellBuildOptions::default()
        }
    }

    /// Scene for a normalized cluster vector.
    pub fn scene_from_normalized(&self, normalized: &[f64]) -> Result<Scene> {
        let g = ClusterFeatures::from_normalized(normalized, &self.constraints)?;
        assemble_cluster_with(&g, &self.constraints, &self.build_options())
    }

    fn reconstruction_loss(&self, x: &Image, normalized: &[f64]) -> Result<f64> {
        let scene = self.scene_from_normalized(normalized)?;
        let views = render_batch_sequential(&scene, &self.cfg.projection())?;
        min_n_loss(x, &views, self.cfg.min_n)
    }

    /// Input-gradient rows `∇ₓ aᵢ` of the pooled layer, as patch-shaped tensors.
    fn pooled_jacobian(&mut self, cache: &EncodeCache) -> Result<Vec<Tensor>> {
        let d = self.cfg.d_model;
        (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                self.backward_pooled(cache, &e, false)
            })
            .collect()
    }

    /// `λ Σᵢ ‖∇ₓ aᵢ‖²` over the pooled layer.
    pub fn contractive_penalty(&mut self, x: &Image) -> Result<f64> {
        if self.cfg.lambda == 0.0 {
            return Ok(0.0);
        }
        let (_, cache) = self.pooled(x)?;
        let rows = self.pooled_jacobian(&cache)?;
        Ok(self.cfg.lambda * rows.iter().map(|r| r.sum_squares()).sum::<f64>())
    }

    /// `∇ₓ aᵢ` as full images (RGBA-interleaved rows), one per pooled coordinate.
    pub fn pooled_input_gradients(&mut self, x: &Image) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = self.pooled(x)?;
        let rows = self.pooled_jacobian(&cache)?;
        Ok(rows
            .iter()
            .map(|g| patches_to_image_grad(g, x.width(), x.height(), self.cfg.patch_size))
            .collect())
    }

    /// Penalty value, accumulating its parameter gradient.
    ///
    /// `∂/∂θ Σᵢ ‖gᵢ‖²` with `gᵢ = ∇ₓ aᵢ` equals `2 Σᵢ ∂/∂ε ∇_θ aᵢ(x + ε gᵢ)` at
    /// `ε = 0`, taken by central differences of two parameter backward passes.
    fn penalty_with_grad(&mut self, x: &Image) -> Result<f64> {
        if self.cfg.lambda == 0.0 {
            return Ok(0.0);
        }
        let (_, cache) = self.pooled(x)?;
        let rows = self.pooled_jacobian(&cache)?;
        let value = self.cfg.lambda * rows.iter().map(|r| r.sum_squares()).sum::<f64>();
        let h = self.cfg.hvp_step;
        let d = self.cfg.d_model;
        let coef = 2.0 * self.cfg.lambda / (2.0 * h);
        for (i, g) in rows.iter().enumerate() {
            let dir = patches_to_image_grad(g, x.width(), x.height(), self.cfg.patch_size);
            for sign in [1.0, -1.0] {
                let shifted: Vec<f64> = x.data().iter().zip(&dir).map(|(v, e)| v + sign * h * e).collect();
                let xs = Image::from_raw(x.width(), x.height(), shifted)?;
                let (_, c) = self.pooled(&xs)?;
                let mut e = vec![0.0; d];
                e[i] = sign * coef;
                self.backward_pooled(&c, &e, true)?;
            }
        }
        Ok(value)
    }

    /// Loss terms of one sample without any gradient work.
    pub fn sample_loss(&mut self, x: &Image) -> Result<TopoLoss> {
        let (pooled, _) = self.pooled(x)?;
        let (norm, _) = self.decode_normalized(&pooled)?;
        let reconstruction = self.reconstruction_loss(x, norm.data())?;
        let penalty = self.contractive_penalty(x)?;
        Ok(TopoLoss {
            reconstruction,
            penalty,
        })
    }

    /// Accumulate encoder gradients of `L_T` for one sample; returns its loss terms.
    fn accumulate_sample(&mut self, x: &Image, seed: u64) -> Result<TopoLoss> {
        let (pooled, cache) = self.pooled(x)?;
        let (norm, dcaches) = self.decode_normalized(&pooled)?;
        let this = &*self;
        let reconstruction = this.reconstruction_loss(x, norm.data())?;
        let g = estimate_feature_grad(
            norm.data(),
            |u| this.reconstruction_loss(x, u),
            this.cfg.spsa_probes,
            this.cfg.spsa_step,
            seed,
        )?;
        let d_norm = Tensor::new(norm.shape(), g)?;
        let d_pooled = self.decoder_backward(&norm, &dcaches, &d_norm)?;
        self.backward_pooled(&cache, &d_pooled, true)?;
        let penalty = self.penalty_with_grad(x)?;
        Ok(TopoLoss {
            reconstruction,
            penalty,
        })
    }
}

struct DecoderCache {
    pre: Tensor,
    h: Tensor,
    tail_pre: Vec<Tensor>,
    tail_hidden: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoLoss {
    pub reconstruction: f64,
    pub penalty: f64,
}

impl TopoLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.penalty
    }
}

/// Masked RGB error over pixels where either image has coverage, plus the
/// mean squared alpha mismatch over all pixels.
pub fn projection_error(x: &Image, y: &Image) -> Result<f64> {
    if x.width() != y.width() || x.height() != y.height() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{} images",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        )));
    }
    let mut rgb = 0.0;
    let mut masked = 0usize;
    let mut alpha = 0.0;
    for (p, q) in x.data().chunks(4).zip(y.data().chunks(4)) {
        if p[3] > 0.0 || q[3] > 0.0 {
            masked += 1;
            rgb += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
        }
        alpha += (p[3] - q[3]).powi(2);
    }
    let pixels = (x.width() * x.height()) as f64;
    let rgb = if masked > 0 { rgb / (3 * masked) as f64 } else { 0.0 };
    Ok(rgb + alpha / pixels)
}

/// Sum of the `n` smallest projection errors; ties keep list order.
pub fn min_n_loss(x: &Image, projections: &[(f64, f64, Image)], n: usize) -> Result<f64> {
    if projections.is_empty() {
        return Err(Error::Empty("projection list".into()));
    }
    let losses = projections
        .iter()
        .map(|(_, _, im)| projection_error(x, im))
        .collect::<Result<Vec<_>>>()?;
    sum_of_smallest(&losses, n)
}

/// Sum of the `n` smallest values (stable order for ties).
pub fn sum_of_smallest(losses: &[f64], n: usize) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Empty("loss list".into()));
    }
    if n == 0 || n > losses.len() {
        return Err(Error::InvalidArgument(format!("n = {n} outside 1..={}", losses.len())));
    }
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    Ok(idx[..n].iter().map(|&i| losses[i]).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopoMetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub penalty: f64,
}

pub const TOPO_METRICS_HEADER: &str = "iter,loss,min_n_loss,penalty";

pub fn topo_metrics_csv(rows: &[TopoMetricsRow]) -> String {
    let mut s = format!("{TOPO_METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iter, r.loss, r.reconstruction, r.penalty));
    }
    s
}

/// Mean loss terms over a dataset.
pub fn mean_loss(t: &mut TopoTransformer, data: &[Image]) -> Result<TopoLoss> {
    if data.is_empty() {
        return Err(Error::Empty("topology dataset".into()));
    }
    let mut acc = TopoLoss {
        reconstruction: 0.0,
        penalty: 0.0,
    };
    for x in data {
        let l = t.sample_loss(x)?;
        acc.reconstruction += l.reconstruction;
        acc.penalty += l.penalty;
    }
    let n = data.len() as f64;
    Ok(TopoLoss {
        reconstruction: acc.reconstruction / n,
        penalty: acc.penalty / n,
    })
}

/// Train the encoder for `steps` mini-batch updates drawn in a seeded order.
/// Row 0 holds the loss before training; each later row is the mean over that step's batch.
pub fn train_transformer(t: &mut TopoTransformer, data: &[Image], steps: usize) -> Result<Vec<TopoMetricsRow>> {
    if data.is_empty() {
        return Err(Error::Empty("topology dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t.cfg.seed.wrapping_add(17));
    let start = mean_loss(t, data)?;
    let mut rows = vec![TopoMetricsRow {
        iter: 0,
        loss: start.total(),
        reconstruction: start.reconstruction,
        penalty: start.penalty,
    }];
    for it in 1..=steps {
        t.params.zero_grad();
        let picks: Vec<usize> = (0..t.cfg.batch).map(|_| rng.gen_range(0..data.len())).collect();
        let seeds: Vec<u64> = picks.iter().map(|_| rng.gen()).collect();
        let mut rec = 0.0;
        let mut pen = 0.0;
        for (&i, &s) in picks.iter().zip(&seeds) {
            let l = t.accumulate_sample(&data[i], s)?;
            rec += l.reconstruction;
            pen += l.penalty;
        }
        let b = picks.len() as f64;
        scale_grads(&mut t.params, 1.0 / b);
        optimizer_step(&mut t.params, t.cfg.lr, t.cfg.optimizer);
        let (rec, pen) = (rec / b, pen / b);
        if !(rec + pen).is_finite() {
            return Err(Error::NonFinite(format!("topology loss at step {it}")));
        }
        rows.push(TopoMetricsRow {
            iter: it,
            loss: rec + pen,
            reconstruction: rec,
            penalty: pen,
        });
    }
    Ok(rows)
}

fn scale_grads(p: &mut NetParams, k: f64) {
    for id in p.ids().collect::<Vec<_>>() {
        p.grad_mut(id).iter_mut().for_each(|g| *g *= k);
    }
}

/// Renders of decoded clusters for a set of inputs, one view each.
pub fn reconstruct(t: &TopoTransformer, data: &[Image]) -> Result<Vec<Scene>> {
    data.par_iter()
        .map(|x| {
            let (pooled, _) = t.pooled(x)?;
            let (norm, _) = t.decode_normalized(&pooled)?;
            t.scene_from_normalized(norm.data())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::satisfies;

    fn tiny_cfg() -> TopoConfig {
        TopoConfig {
            image_size: 16,
            patch_size: 4,
            d_model: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 8,
            slots: 2,
            lambda: 0.5,
            min_n: 1,
            thetas: vec![0.0, 90.0],
            phis: vec![0.0],
            subdivisions: 1,
            batch: 1,
            spsa_probes: 2,
            generator: GeneratorShape {
                latent_dim: 4,
                trunk_width: 6,
                trunk_depth: 1,
                tail_width: 5,
            },
            ..TopoConfig::default()
        }
    }

    fn test_image(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::from_raw(size, size, data).unwrap()
    }

    fn transformer(cfg: TopoConfig) -> TopoTransformer {
        TopoTransformer::new(ConstraintSet::preset("table1-5").unwrap(), cfg).unwrap()
    }

    #[test]
    fn patch_count_and_divisibility() {
        let t = transformer(TopoConfig {
            image_size: 40,
            patch_size: 8,
            ..tiny_cfg()
        });
        assert_eq!(t.patch_embed(&test_image(40, 0)).unwrap().shape(), &[25, 8]);
        assert!(image_patches(&test_image(40, 0), 7).is_err());
        assert!(t.patch_embed(&test_image(16, 0)).is_err());
    }

    #[test]
    fn zero_image_and_weights_leave_position_embeddings() {
        let mut t = transformer(tiny_cfg());
        let w = t.patch_linear.w;
        let b = t.patch_linear.b.unwrap();
        for id in [w, b] {
            let z = Tensor::zeros(t.params.value(id).shape());
            t.params.set_value(id, z).unwrap();
        }
        let tokens = t.patch_embed(&Image::new(16, 16)).unwrap();
        assert_eq!(&tokens, t.params.value(t.pos));
    }

    #[test]
    fn swapping_patches_changes_only_their_tokens() {
        let t = transformer(tiny_cfg());
        let x = test_image(16, 3);
        let mut y = x.clone();
        for yy in 0..4 {
            for xx in 0..4 {
                let a = x.pixel(xx, yy);
                let b = x.pixel(8 + xx, 4 + yy);
                y.set_pixel(xx, yy, b);
                y.set_pixel(8 + xx, 4 + yy, a);
            }
        }
        let tx = t.patch_embed(&x).unwrap();
        let ty = t.patch_embed(&y).unwrap();
        let pos = t.params.value(t.pos);
        // patch (0,0) is token 0, patch (2,1) is token 6
        for k in 0..16 {
            if k == 0 || k == 6 {
                assert_ne!(tx.row(k), ty.row(k));
            } else {
                assert_eq!(tx.row(k), ty.row(k));
            }
        }
        for j in 0..8 {
            let content_x0 = tx.at(0, j) - pos.at(0, j);
            let content_y6 = ty.at(6, j) - pos.at(6, j);
            assert!((content_x0 - content_y6).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_residual_identity_and_position_sensitivity() {
        let mut t = transformer(tiny_cfg());
        let x = test_image(16, 5);
        let (a, _) = t.encode(&x).unwrap();
        assert_eq!(a, t.encode(&x).unwrap().0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut order: Vec<usize> = (0..16).collect();
            while order.iter().enumerate().all(|(i, &o)| i == o) {
                rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
            }
            let mut y = Image::new(16, 16);
            for (dst, &src) in order.iter().enumerate() {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let p = x.pixel((src % 4) * 4 + xx, (src / 4) * 4 + yy);
                        y.set_pixel((dst % 4) * 4 + xx, (dst / 4) * 4 + yy, p);
                    }
                }
            }
            assert_ne!(t.encode(&y).unwrap().0, a);
        }
        t.encoder.clone().zero_output_projections(&mut t.params).unwrap();
        assert_eq!(t.encode(&x).unwrap().0, t.patch_embed(&x).unwrap());
    }

    #[test]
    fn decode_is_constrained_and_deterministic() {
        let t = transformer(tiny_cfg());
        let (latent, _) = t.encode(&test_image(16, 2)).unwrap();
        let g = t.decode_features(&latent).unwrap();
        assert_eq!(g, t.decode_features(&latent).unwrap());
        assert_eq!(g.count(), 2);
        assert!(g.cells.iter().all(|f| satisfies(f, &t.constraints)));
    }

    #[test]
    fn min_n_arithmetic() {
        assert!((sum_of_smallest(&[0.5, 0.2, 0.9], 2).unwrap() - 0.7).abs() < 1e-15);
        assert!(sum_of_smallest(&[0.5], 2).is_err());
        assert!(sum_of_smallest(&[0.5], 0).is_err());
        let x = test_image(8, 1);
        let views = vec![(0.0, 0.0, test_image(8, 2)), (0.0, 1.0, x.clone()), (1.0, 0.0, test_image(8, 3))];
        assert_eq!(min_n_loss(&x, &views, 1).unwrap(), 0.0);
        assert!(min_n_loss(&x, &[], 1).is_err());
    }

    #[test]
    fn penalty_zero_lambda_and_linear_case() {
        let mut t = transformer(TopoConfig {
            lambda: 0.0,
            ..tiny_cfg()
        });
        assert_eq!(t.contractive_penalty(&test_image(16, 0)).unwrap(), 0.0);
        let mut t = transformer(TopoConfig {
            depth: 0,
            lambda: 0.3,
            ..tiny_cfg()
        });
        // pooled a = (1/T) Σ_t W patch_t + const, so the input Jacobian has
        // Frobenius norm² = ‖W‖² / T
        let w = t.params.value(t.patch_linear.w).sum_squares();
        let tokens = t.cfg.tokens() as f64;
        for seed in 0..3 {
            let p = t.contractive_penalty(&test_image(16, seed)).unwrap();
            assert!((p - 0.3 * w / tokens).abs() < 1e-12 * p.max(1.0));
        }
    }

    #[test]
    fn penalty_matches_finite_difference_jacobian() {
        let mut t = transformer(tiny_cfg());
        let x = test_image(16, 9);
        let analytic = t.contractive_penalty(&x).unwrap();
        let h = 1e-6;
        let mut fd = 0.0;
        for k in 0..x.data().len() {
            let mut up = x.data().to_vec();
            let mut down = x.data().to_vec();
            up[k] += h;
            down[k] -= h;
            let (a, _) = t.pooled(&Image::from_raw(16, 16, up).unwrap()).unwrap();
            let (b, _) = t.pooled(&Image::from_raw(16, 16, down).unwrap()).unwrap();
            fd += a.iter().zip(&b).map(|(p, q)| ((p - q) / (2.0 * h)).powi(2)).sum::<f64>();
        }
        fd *= t.cfg.lambda;
        assert!((analytic - fd).abs() / fd < 1e-4, "{analytic} vs {fd}");
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let mut t = transformer(TopoConfig {
            hvp_step: 1e-5,
            ..tiny_cfg()
        });
        let x = test_image(16, 4);
        t.params.zero_grad();
        t.penalty_with_grad(&x).unwrap();
        let trainable: Vec<ParamId> = t.params.ids().filter(|&id| t.params.is_trainable(id)).collect();
        let mut worst: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..40 {
            let id = trainable[rng.gen_range(0..trainable.len())];
            let k = rng.gen_range(0..t.params.value(id).len());
            let analytic = t.params.grad(id).data()[k];
            let orig = t.params.value(id).data()[k];
            let h = 1e-5;
            t.params.value_mut_unchecked(id).data_mut()[k] = orig + h;
            let up = t.contractive_penalty(&x).unwrap();
            t.params.value_mut_unchecked(id).data_mut()[k] = orig - h;
            let down = t.contractive_penalty(&x).unwrap();
            t.params.value_mut_unchecked(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6));
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn training_keeps_decoder_and_is_deterministic() {
        let cfg = tiny_cfg();
        let data: Vec<Image> = (0..2).map(|s| test_image(16, s)).collect();
        let run = || {
            let mut t = transformer(cfg.clone());
            let before = t.decoder_bytes();
            let rows = train_transformer(&mut t, &data, 3).unwrap();
            assert_eq!(t.decoder_bytes(), before);
            assert!(rows.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
            rows
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_tails_load_from_generator() {
        let c = ConstraintSet::preset("table1-5").unwrap();
        let cfg = tiny_cfg();
        let g = crate::gan::GeneratorNet::new(&c.layout, &cfg.generator, 3).unwrap();
        let mut t = TopoTransformer::new(c, cfg).unwrap();
        let n = t.load_decoder_tails(&g.params).unwrap();
        assert_eq!(n, 2 * 4 * g.tail_count());
        let src = g.params.value(g.params.find("tail.0.out.w").unwrap());
        let dst = t.params.value(t.params.find("decoder.1.tail.0.out.w").unwrap());
        assert_eq!(src, dst);
        assert!(t.params.is_frozen(DECODER_GROUP));
    }
}
