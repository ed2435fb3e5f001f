//! Fréchet distance between embedded image sets.
//!
//! The embedder is a fixed-seed random convolution stack, so scores are
//! reproducible and comparable between runs of this crate but not with
//! Inception-based FID numbers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CellClass;
use crate::nn::{Activation, Conv2d, NetParams, Tensor};
use crate::render::Image;

pub const DEFAULT_EMBED_DIM: usize = 64;

/// Random convolutional features average-pooled over the four image quadrants,
/// `dim / 4` channels each.
#[derive(Clone, Debug)]
pub struct Embedder {
    params: NetParams,
    conv1: Conv2d,
    conv2: Conv2d,
    dim: usize,
    seed: u64,
}

impl Embedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be a positive multiple of 4, got {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetParams::new();
        let conv1 = Conv2d::new(&mut params, "embed.conv1", "embed", 4, 16, 4, 2, 1, &mut rng)?;
        let conv2 = Conv2d::new(&mut params, "embed.conv2", "embed", 16, dim / 4, 4, 2, 1, &mut rng)?;
        params.freeze("embed");
        Ok(Self {
            params,
            conv1,
            conv2,
            dim,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_one(&self, image: &Image) -> Result<Vec<f64>> {
        if image.width() < 8 || image.height() < 8 {
            return Err(Error::Shape("images must be at least 8x8 to embed".into()));
        }
        let x = Tensor::new(&[4, image.height(), image.width()], image.to_chw())?;
        let h = Activation::Relu.forward(&self.conv1.forward(&self.params, &x)?);
        let y = Activation::Relu.forward(&self.conv2.forward(&self.params, &h)?);
        let (ch, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);
        let mut out = vec![0.0; ch * 4];
        let mut counts = [0usize; 4];
        for i in 0..oh {
            for j in 0..ow {
                counts[usize::from(i >= oh / 2) * 2 + usize::from(j >= ow / 2)] += 1;
            }
        }
        for c in 0..ch {
            for i in 0..oh {
                for j in 0..ow {
                    let q = usize::from(i >= oh / 2) * 2 + usize::from(j >= ow / 2);
                    out[c * 4 + q] += y.data()[(c * oh + i) * ow + j] / counts[q] as f64;
                }
            }
        }
        Ok(out)
    }
}

/// One `dim`-vector per image, as rows of an `n × dim` matrix.
pub fn embed(images: &[Image], e: &Embedder) -> Result<DMatrix<f64>> {
    let first = images.first().ok_or_else(|| Error::Empty("no images to embed".into()))?;
    if images
        .iter()
        .any(|im| im.width() != first.width() || im.height() != first.height())
    {
        return Err(Error::Shape("images to embed differ in size".into()));
    }
    let rows = images
        .par_iter()
        .map(|im| e.embed_one(im))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(rows.len(), e.dim, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrechetStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Sample mean and unbiased, symmetrized sample covariance of the rows.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<FrechetStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 rows, got {n}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let mu = features.row_mean().transpose();
    let mut centred = features.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let sigma = centred.transpose() * &centred / (n as f64 - 1.0);
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(FrechetStats { mu, sigma })
}

/// Square root of a symmetric positive semi-definite matrix, negative
/// eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, clamped at zero.
///
/// The trace of the cross term is taken from the eigenvalues of
/// `Σa^½ Σb Σa^½`, which is symmetric and shares its spectrum with `Σa Σb`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.shape() != (d, d) || b.sigma.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "frechet stats of dimension {d} vs {}",
            b.mu.len()
        )));
    }
    let finite = |s: &FrechetStats| s.mu.iter().chain(s.sigma.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::NonFinite("frechet stats".into()));
    }
    let root_a = psd_sqrt(&a.sigma);
    let product = &root_a * &b.sigma * &root_a;
    let product = (&product + product.transpose()) * 0.5;
    let eig = SymmetricEigen::new(product);
    let cross: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let diff = &a.mu - &b.mu;
    let value = diff.norm_squared() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Pooled and per-class Fréchet distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub total: f64,
    pub regular: Option<f64>,
    pub cancer: Option<f64>,
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
}

fn fid_between(real: &[Image], fake: &[Image], e: &Embedder) -> Result<f64> {
    let a = fit_gaussian(&embed(real, e)?)?;
    let b = fit_gaussian(&embed(fake, e)?)?;
    frechet_distance(&a, &b)
}

fn class_subset<'a>(images: &'a [Image], labels: Option<&[CellClass]>, class: CellClass) -> Option<Vec<Image>> {
    let labels = labels?;
    let v: Vec<Image> = images
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == class)
        .map(|(im, _)| im.clone())
        .collect();
    (v.len() >= 2).then_some(v)
}

/// Total is computed over the pooled sets; class columns are filled when both
/// sides carry labels and have at least two images of that class.
pub fn fid_report(
    real: &[Image],
    fake: &[Image],
    e: &Embedder,
    real_labels: Option<&[CellClass]>,
    fake_labels: Option<&[CellClass]>,
) -> Result<FidReport> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::InvalidArgument("each image set needs at least 2 images".into()));
    }
    for (imgs, labels) in [(real, real_labels), (fake, fake_labels)] {
        if labels.is_some_and(|l| l.len() != imgs.len()) {
            return Err(Error::Shape("label count differs from image count".into()));
        }
    }
    let per_class = |class| -> Result<Option<f64>> {
        match (
            class_subset(real, real_labels, class),
            class_subset(fake, fake_labels, class),
        ) {
            (Some(r), Some(f)) => fid_between(&r, &f, e).map(Some),
            _ => Ok(None),
        }
    };
    Ok(FidReport {
        total: fid_between(real, fake, e)?,
        regular: per_class(CellClass::Normal)?,
        cancer: per_class(CellClass::Cancer)?,
        n_real: real.len(),
        n_fake: fake.len(),
        seed: e.seed,
    })
}

/// Mean and standard deviation of the pooled score over several embedder seeds.
pub fn fid_spread(real: &[Image], fake: &[Image], dim: usize, seeds: &[u64]) -> Result<(f64, f64)> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("spread needs at least 2 seeds".into()));
    }
    let scores = seeds
        .iter()
        .map(|&s| fid_between(real, fake, &Embedder::new(dim, s)?))
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (scores.len() - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// Reference statistics of a fixed real set, reused across evaluations.
#[derive(Clone, Debug)]
pub struct FidProxy {
    embedder: Embedder,
    reference: FrechetStats,
}

impl FidProxy {
    pub fn new(real: &[Image], dim: usize, seed: u64) -> Result<Self> {
        let embedder = Embedder::new(dim, seed)?;
        let reference = fit_gaussian(&embed(real, &embedder)?)?;
        Ok(Self { embedder, reference })
    }

    pub fn score(&self, fake: &[Image]) -> Result<f64> {
        let stats = fit_gaussian(&embed(fake, &self.embedder)?)?;
        frechet_distance(&self.reference, &stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = random_matrix(d, d, rng);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.01
    }

    #[test]
    fn gaussian_fit_hand_case() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let s = fit_gaussian(&f).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma, DMatrix::from_element(2, 2, 2.0));
        let same = DMatrix::from_row_slice(3, 2, &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
        assert_eq!(fit_gaussian(&same).unwrap().sigma, DMatrix::zeros(2, 2));
        assert!(fit_gaussian(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn gaussian_fit_matches_two_pass_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_matrix(5, 3, &mut rng);
        let s = fit_gaussian(&f).unwrap();
        for j in 0..3 {
            let m: f64 = (0..5).map(|i| f[(i, j)]).sum::<f64>() / 5.0;
            assert!((s.mu[j] - m).abs() < 1e-12);
        }
        for a in 0..3 {
            for b in 0..3 {
                let ma = s.mu[a];
                let mb = s.mu[b];
                let c: f64 = (0..5).map(|i| (f[(i, a)] - ma) * (f[(i, b)] - mb)).sum::<f64>() / 4.0;
                assert!((s.sigma[(a, b)] - c).abs() < 1e-12);
            }
        }
        let min_eig = SymmetricEigen::new(s.sigma.clone()).eigenvalues.min();
        assert!(min_eig >= -1e-10);
    }

    #[test]
    fn psd_square_root_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let s = random_psd(6, &mut rng);
            let r = psd_sqrt(&s);
            let err = (&r * &r - &s).norm() / s.norm();
            assert!(err < 1e-8);
        }
    }

    #[test]
    fn distance_to_self_and_shifted_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma = random_psd(4, &mut rng);
        let a = FrechetStats {
            mu: DVector::from_vec(vec![0.1, 0.2, -0.3, 0.0]),
            sigma: sigma.clone(),
        };
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let shift = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let b = FrechetStats {
            mu: &a.mu + &shift,
            sigma,
        };
        assert!((frechet_distance(&a, &b).unwrap() - shift.norm_squared()).abs() < 1e-8);
    }

    #[test]
    fn diagonal_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let sr: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..3.0)).collect();
            let sg: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..3.0)).collect();
            let a = FrechetStats {
                mu: DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0)),
                sigma: DMatrix::from_diagonal(&DVector::from_vec(sr.clone())),
            };
            let b = FrechetStats {
                mu: DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0)),
                sigma: DMatrix::from_diagonal(&DVector::from_vec(sg.clone())),
            };
            let closed = (&a.mu - &b.mu).norm_squared()
                + sr.iter().zip(&sg).map(|(r, g)| (r.sqrt() - g.sqrt()).powi(2)).sum::<f64>();
            assert!((frechet_distance(&a, &b).unwrap() - closed).abs() < 1e-8);
        }
    }

    #[test]
    fn symmetric_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fa = random_matrix(30, 4, &mut rng);
        let fb = random_matrix(30, 4, &mut rng) * 1.5;
        let a = fit_gaussian(&fa).unwrap();
        let b = fit_gaussian(&fb).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-10);
        let q = random_matrix(4, 4, &mut rng).qr().q();
        let ra = fit_gaussian(&(&fa * &q)).unwrap();
        let rb = fit_gaussian(&(&fb * &q)).unwrap();
        assert!((frechet_distance(&ra, &rb).unwrap() - ab).abs() < 1e-6);
    }

    #[test]
    fn mismatched_and_non_finite_rejected() {
        let a = FrechetStats {
            mu: DVector::zeros(2),
            sigma: DMatrix::identity(2, 2),
        };
        let b = FrechetStats {
            mu: DVector::zeros(3),
            sigma: DMatrix::identity(3, 3),
        };
        assert!(frechet_distance(&a, &b).is_err());
        let mut c = a.clone();
        c.mu[0] = f64::NAN;
        assert!(frechet_distance(&a, &c).is_err());
    }

    fn blob(rgb: [f64; 3], r: f64, size: usize) -> Image {
        let mut im = Image::new(size, size);
        let c = size as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                if (x as f64 + 0.5 - c).hypot(y as f64 + 0.5 - c) < r {
                    im.set_pixel(x, y, [rgb[0], rgb[1], rgb[2], 1.0]);
                }
            }
        }
        im
    }

    #[test]
    fn embedding_is_deterministic_and_separates_fixtures() {
        let e = Embedder::new(16, 3).unwrap();
        let red = blob([0.9, 0.1, 0.1], 8.0, 24);
        let blue = blob([0.1, 0.1, 0.9], 8.0, 24);
        let m = embed(&[red.clone(), red.clone(), blue.clone()], &e).unwrap();
        assert_eq!(m.shape(), (3, 16));
        assert_eq!(m.row(0), m.row(1));
        assert!((m.row(0) - m.row(2)).norm() > 0.0);
        let again = Embedder::new(16, 3).unwrap();
        assert_eq!(embed(&[red], &again).unwrap().row(0), m.row(0));
        assert!(embed(&[blob([0.0; 3], 1.0, 24), blob([0.0; 3], 1.0, 20)], &e).is_err());
    }

    #[test]
    fn report_zero_for_identical_sets_and_positive_for_disjoint_colors() {
        let e = Embedder::new(8, 0).unwrap();
        let reds: Vec<Image> = (0..6).map(|i| blob([0.9, 0.1, 0.1], 5.0 + i as f64, 24)).collect();
        let blues: Vec<Image> = (0..6).map(|i| blob([0.1, 0.1, 0.9], 5.0 + i as f64, 24)).collect();
        let same = fid_report(&reds, &reds, &e, None, None).unwrap();
        assert!(same.total < 1e-6);
        assert_eq!(same.regular, None);
        let diff = fid_report(&reds, &blues, &e, None, None).unwrap();
        assert!(diff.total > 0.0);
        let back = fid_report(&blues, &reds, &e, None, None).unwrap();
        assert!((diff.total - back.total).abs() < 1e-10);
    }

    #[test]
    fn report_fills_class_columns() {
        let e = Embedder::new(8, 0).unwrap();
        let imgs: Vec<Image> = (0..8).map(|i| blob([0.5, 0.2, 0.7], 4.0 + i as f64, 24)).collect();
        let labels: Vec<CellClass> = (0..8)
            .map(|i| if i % 2 == 0 { CellClass::Normal } else { CellClass::Cancer })
            .collect();
        let r = fid_report(&imgs, &imgs, &e, Some(&labels), Some(&labels)).unwrap();
        assert!(r.regular.unwrap() < 1e-6 && r.cancer.unwrap() < 1e-6);
        assert_eq!((r.n_real, r.n_fake), (8, 8));
    }
}
