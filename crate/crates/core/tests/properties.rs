//! Cross-module invariants, property tested.

use cellsynth::eval::{fit_gaussian, frechet_distance, psd_sqrt};
use cellsynth::features::{random_features, satisfies, CellClass, ConstraintSet};
use cellsynth::gan::{exact_w1_1d, wgan_losses, GanTrainer, TrainConfig};
use cellsynth::mesh::{build_cell, laplacian_smooth, max_edge_jump, mesh_volume, icosphere};
use cellsynth::nn::{multi_head_attention, optimizer_step, softmax_rows, MultiHeadAttention, NetParams, OptimizerKind, Tensor};
use cellsynth::pipeline::{fill_ellipse, load_dataset, segment_blobs, write_dataset, SegmentOptions};
use cellsynth::render::{render_batch, render_batch_sequential, Image, ProjectionSpec, RenderMode};
use cellsynth::mesh::Scene;
use cellsynth::topo::{min_n_loss, TopoConfig, TopoTransformer};
use nalgebra::{DMatrix, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c32() -> ConstraintSet {
    ConstraintSet::preset("table1-32").unwrap()
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cells_are_watertight_deterministic_and_scale_cubically(seed in 0u64..10_000, k in 0.6f64..1.6) {
        let c = c32();
        let mut f = random_features(&c.layout, &c, seed).unwrap();
        let a = build_cell(&f, &c).unwrap();
        prop_assert!(a.check_watertight().is_ok());
        prop_assert_eq!(&a.vertices, &build_cell(&f, &c).unwrap().vertices);
        f.scale = 0.6;
        let v1 = mesh_volume(&build_cell(&f, &c).unwrap()).unwrap();
        f.scale = k;
        let vk = mesh_volume(&build_cell(&f, &c).unwrap()).unwrap();
        let expected = (k / 0.6).powi(3);
        prop_assert!((vk / v1 - expected).abs() / expected < 0.01);
    }

    #[test]
    fn smoothing_never_increases_the_jump(seed in 0u64..10_000, passes in 1usize..5, lambda in 0.05f64..1.0) {
        let mesh = icosphere(2).unwrap();
        let nb = mesh.neighbours();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field: Vec<Vector3<f64>> = mesh
            .vertices
            .iter()
            .map(|v| v * (1.0 + rng.gen_range(-0.3..0.3)))
            .collect();
        let before = max_edge_jump(&field, &nb);
        laplacian_smooth(&mut field, &nb, passes, lambda);
        prop_assert!(max_edge_jump(&field, &nb) <= before + 1e-12);
    }

    #[test]
    fn parallel_and_sequential_rendering_agree(seed in 0u64..10_000, cross in any::<bool>()) {
        let c = c32();
        let f = random_features(&c.layout, &c, seed).unwrap();
        let scene = Scene::single(build_cell(&f, &c).unwrap());
        let spec = ProjectionSpec {
            thetas: vec![0.0, 0.8],
            phis: vec![0.3, 2.0],
            size: 24,
            mode: if cross { RenderMode::CrossSection } else { RenderMode::Projection },
            world_extent: 4.0,
        };
        let a = render_batch(&scene, &spec).unwrap();
        let b = render_batch_sequential(&scene, &spec).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(rows, cols, &mut rng).map(|v| 20.0 * v);
        let s = softmax_rows(&x).unwrap();
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_permutation_symmetry(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetParams::new();
        let attn = MultiHeadAttention::new(&mut p, "a", "g", 6, 2, &mut rng).unwrap();
        let (q, k, v) = (tensor(3, 6, &mut rng), tensor(4, 6, &mut rng), tensor(4, 6, &mut rng));
        let base = multi_head_attention(&attn, &p, &q, &k, &v).unwrap();
        let permute = |t: &Tensor, order: &[usize]| {
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let kv = [2, 0, 3, 1];
        let same = multi_head_attention(&attn, &p, &q, &permute(&k, &kv), &permute(&v, &kv)).unwrap();
        for (a, b) in base.data().iter().zip(same.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let qo = [1, 2, 0];
        let moved = multi_head_attention(&attn, &p, &permute(&q, &qo), &k, &v).unwrap();
        let expected = permute(&base, &qo);
        for (a, b) in moved.data().iter().zip(expected.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_groups_never_move(seed in 0u64..10_000, sgd in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetParams::new();
        let live = p.add_uniform("live", "a", &[3, 3], 3, &mut rng).unwrap();
        let frozen = p.add_uniform("frozen", "b", &[3, 3], 3, &mut rng).unwrap();
        p.freeze("b");
        let snapshot = p.value(frozen).clone();
        let kind = if sgd { OptimizerKind::Sgd } else { OptimizerKind::default() };
        for _ in 0..5 {
            p.accumulate(live, &tensor(3, 3, &mut rng)).unwrap();
            let _ = p.accumulate(frozen, &tensor(3, 3, &mut rng));
            optimizer_step(&mut p, 0.1, kind);
            p.clip_values(0.01);
            p.zero_grad();
        }
        prop_assert_eq!(p.value(frozen), &snapshot);
        prop_assert!(p.set_value(frozen, snapshot.clone()).is_err());
    }

    #[test]
    fn wgan_losses_translation_covariance(
        real in proptest::collection::vec(-5.0f64..5.0, 1..8),
        shift in -3.0f64..3.0,
    ) {
        let fake: Vec<f64> = real.iter().rev().map(|v| v * 0.5 - 1.0).collect();
        let (c0, g0) = wgan_losses(&real, &fake).unwrap();
        let r2: Vec<f64> = real.iter().map(|v| v + shift).collect();
        let f2: Vec<f64> = fake.iter().map(|v| v + shift).collect();
        let (c1, g1) = wgan_losses(&r2, &f2).unwrap();
        prop_assert!((c1 - c0).abs() < 1e-9);
        prop_assert!((g1 - (g0 - shift)).abs() < 1e-9);
    }

    #[test]
    fn w1_is_a_metric(
        a in proptest::collection::vec(0u8..10, 1..7),
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.len();
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
        let ab = exact_w1_1d(&a, &b).unwrap();
        prop_assert_eq!(ab, exact_w1_1d(&b, &a).unwrap());
        prop_assert_eq!(exact_w1_1d(&a, &a).unwrap(), 0.0);
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        prop_assert_eq!(ab == 0.0, sa == sb);
        prop_assert!(exact_w1_1d(&a, &c).unwrap() <= ab + exact_w1_1d(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn min_n_loss_monotone_and_order_free(seed in 0u64..10_000, views in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = |rng: &mut ChaCha8Rng| {
            Image::from_raw(8, 8, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
        };
        let x = img(&mut rng);
        let grid: Vec<(f64, f64, Image)> = (0..views).map(|k| (k as f64, 0.0, img(&mut rng))).collect();
        let mut reversed = grid.clone();
        reversed.reverse();
        let mut prev = 0.0;
        for n in 1..=views {
            let l = min_n_loss(&x, &grid, n).unwrap();
            prop_assert!(l >= prev);
            prop_assert_eq!(l, min_n_loss(&x, &reversed, n).unwrap());
            prev = l;
        }
    }

    #[test]
    fn frechet_symmetric_and_rotation_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_matrix(30, 3, &mut rng);
        let y = rand_matrix(30, 3, &mut rng).map(|v| 1.5 * v + 0.3);
        let (gx, gy) = (fit_gaussian(&x).unwrap(), fit_gaussian(&y).unwrap());
        let d = frechet_distance(&gx, &gy).unwrap();
        prop_assert!((d - frechet_distance(&gy, &gx).unwrap()).abs() < 1e-9);
        prop_assert!(frechet_distance(&gx, &gx).unwrap().abs() < 1e-9);
        let r = Rotation3::from_euler_angles(rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0));
        let rm = DMatrix::from_column_slice(3, 3, r.matrix().as_slice());
        let (xr, yr) = (&x * &rm, &y * &rm);
        let dr = frechet_distance(&fit_gaussian(&xr).unwrap(), &fit_gaussian(&yr).unwrap()).unwrap();
        prop_assert!((d - dr).abs() < 1e-6);
    }

    #[test]
    fn psd_sqrt_squares_back_and_covariance_is_psd(seed in 0u64..10_000, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_matrix(d, d + 2, &mut rng);
        let sigma = &a * a.transpose();
        let s = psd_sqrt(&sigma);
        prop_assert!((&s * &s - &sigma).norm() / sigma.norm() < 1e-8);
        let g = fit_gaussian(&rand_matrix(12, d, &mut rng)).unwrap();
        let min_eig = g.sigma.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-10);
    }

    #[test]
    fn blobs_round_trip_with_transparent_background(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut im = Image::filled(48, 48, [1.0, 1.0, 1.0, 1.0]);
        fill_ellipse(
            &mut im,
            [rng.gen_range(16.0..32.0), rng.gen_range(16.0..32.0)],
            [rng.gen_range(6.0..12.0), rng.gen_range(5.0..8.0)],
            rng.gen_range(0.0..3.0),
            [0.4, 0.2, 0.65, 1.0],
        );
        let records = segment_blobs(&im, "src", CellClass::Cancer, &SegmentOptions::default());
        prop_assert_eq!(records.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &records, "table1-32", &[seed]).unwrap();
        let (_, loaded) = load_dataset(dir.path()).unwrap();
        let (orig, back) = (&records[0].image, &loaded[0].image);
        for (p, q) in orig.data().chunks(4).zip(back.data().chunks(4)) {
            if p[3] == 0.0 {
                prop_assert_eq!(q[3], 0.0);
            } else {
                prop_assert!(q[3] > 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn generator_updates_respect_constraints(seed in 0u64..1000) {
        let cfg = TrainConfig {
            seed,
            batch: 2,
            critic_steps: 1,
            spsa_probes: 2,
            subdivisions: 1,
            image_size: 16,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let c = c32();
        let mut trainer = GanTrainer::new(c.clone(), cfg).unwrap();
        let real: Vec<Image> = (0..4)
            .map(|s| {
                let f = random_features(&c.layout, &c, s).unwrap();
                cellsynth::gan::render_cell(&f, &c, &trainer.cfg).unwrap().remove(0)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 {
            trainer.train_step(&real).unwrap();
            let z = trainer.generator.sample_latent(4, &mut rng);
            for f in trainer.sample_features(&z).unwrap() {
                prop_assert!(satisfies(&f, &c));
            }
        }
    }

    #[test]
    fn penalty_is_linear_in_lambda(seed in 0u64..1000, lambda in 0.01f64..2.0) {
        let base = TopoConfig {
            image_size: 16,
            patch_size: 4,
            d_model: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 8,
            slots: 1,
            min_n: 1,
            thetas: vec![0.0],
            phis: vec![0.0],
            seed,
            lambda: 1.0,
            ..TopoConfig::default()
        };
        let c = ConstraintSet::preset("table1-5").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Image::from_raw(16, 16, (0..1024).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut one = TopoTransformer::new(c.clone(), base.clone()).unwrap();
        let mut scaled = TopoTransformer::new(c, TopoConfig { lambda, ..base }).unwrap();
        let p1 = one.contractive_penalty(&x).unwrap();
        let pl = scaled.contractive_penalty(&x).unwrap();
        prop_assert!((pl - lambda * p1).abs() <= 1e-12 * pl.abs().max(1e-12));
    }
}
