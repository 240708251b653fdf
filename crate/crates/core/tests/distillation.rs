use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsqueeze::data::{synth, ImageSet};
use srsqueeze::distill::{
    dis_loss, gaussian_blur_5x5, gaussian_kernel_5x5, high_freq, laplacian_loss,
    laplacian_loss_weighted, run_distillation, run_distillation_logged, total_loss, KDConfig,
    KDLog, LevelWeights, StudentLoss, Teacher, BINOMIAL_5,
};
use srsqueeze::model::{srwt, ModelConfig, SRModel};
use srsqueeze::train::{pretrain, training_sampler, PretrainConfig};
use srsqueeze::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn apply(x: &Tensor, f: impl FnOnce(&mut Graph, srsqueeze::Var) -> srsqueeze::Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = f(&mut g, v);
    g.value(y).clone()
}

fn scalar(f: impl FnOnce(&mut Graph) -> srsqueeze::Var) -> f32 {
    let mut g = Graph::new();
    let y = f(&mut g);
    g.value(y).item()
}

// ---- f64 reference pyramid, written from the definition -----------------

type Plane = Vec<Vec<f64>>;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn blur(p: &Plane) -> Plane {
    let (h, w) = (p.len(), p[0].len());
    let k = BINOMIAL_5.map(|v| v as f64);
    let mut out = vec![vec![0.0; w]; h];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, o) in row.iter_mut().enumerate() {
            for (dy, ky) in k.iter().enumerate() {
                for (dx, kx) in k.iter().enumerate() {
                    let sy = reflect(y as isize + dy as isize - 2, h);
                    let sx = reflect(x as isize + dx as isize - 2, w);
                    *o += ky * kx * p[sy][sx];
                }
            }
        }
    }
    out
}

fn pyramid(p: &Plane, levels: usize) -> Vec<Plane> {
    let mut bands = Vec::new();
    let mut cur = p.clone();
    for _ in 0..levels - 1 {
        let (h, w) = (cur.len(), cur[0].len());
        let b = blur(&cur);
        let down: Plane = (0..h.div_ceil(2))
            .map(|y| (0..w.div_ceil(2)).map(|x| b[2 * y][2 * x]).collect())
            .collect();
        let mut zi = vec![vec![0.0; w]; h];
        for (y, row) in down.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                zi[2 * y][2 * x] = *v;
            }
        }
        let up = blur(&zi);
        bands.push(
            (0..h)
                .map(|y| (0..w).map(|x| cur[y][x] - 4.0 * up[y][x]).collect())
                .collect(),
        );
        cur = down;
    }
    bands.push(cur);
    bands
}

fn planes(t: &Tensor) -> Vec<Plane> {
    let (n, c, h, w) = t.dims4().unwrap();
    (0..n * c)
        .map(|i| {
            (0..h)
                .map(|y| {
                    (0..w)
                        .map(|x| t.data()[(i * h + y) * w + x] as f64)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn oracle_laplacian(a: &Tensor, b: &Tensor, levels: usize, weight: impl Fn(usize) -> f64) -> f64 {
    let (pa, pb) = (planes(a), planes(b));
    let mut level_sums = vec![(0.0, 0usize); levels];
    for (x, y) in pa.iter().zip(&pb) {
        for (j, (bx, by)) in pyramid(x, levels)
            .iter()
            .zip(pyramid(y, levels))
            .enumerate()
        {
            for (rx, ry) in bx.iter().zip(&by) {
                for (u, v) in rx.iter().zip(ry) {
                    level_sums[j].0 += (u - v).abs();
                    level_sums[j].1 += 1;
                }
            }
        }
    }
    level_sums
        .iter()
        .enumerate()
        .map(|(j, (s, n))| weight(j) * s / *n as f64)
        .sum()
}

// ---- blur and high-frequency map ----------------------------------------

#[test]
fn kernel_properties() {
    let k = gaussian_kernel_5x5();
    assert_eq!(k.iter().sum::<f32>(), 1.0);
    assert_eq!(k[12], 36.0 / 256.0);
    assert_eq!(k[0], 1.0 / 256.0);
}

#[test]
fn blur_of_constant_is_constant() {
    let x = Tensor::full(&[2, 3, 5, 6], 0.625);
    let y = apply(&x, |g, v| gaussian_blur_5x5(g, v).unwrap());
    assert_eq!(y, x);
}

/// The reflected copies of a centred impulse land outside the kernel's
/// footprint once the image is at least 9 pixels wide.
#[test]
fn blur_impulse_response_is_kernel() {
    let mut x = Tensor::zeros(&[1, 1, 9, 9]);
    x.data_mut()[4 * 9 + 4] = 1.0;
    let y = apply(&x, |g, v| gaussian_blur_5x5(g, v).unwrap());
    let k = gaussian_kernel_5x5();
    for r in 0..9 {
        for c in 0..9 {
            let want = if (2..7).contains(&r) && (2..7).contains(&c) {
                k[(r - 2) * 5 + (c - 2)]
            } else {
                0.0
            };
            assert_eq!(y.data()[r * 9 + c], want, "({r},{c})");
        }
    }
}

#[test]
fn blur_matches_direct_correlation() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 3, 7, 10]);
        let y = apply(&x, |g, v| gaussian_blur_5x5(g, v).unwrap());
        let want: Vec<f64> = planes(&x)
            .iter()
            .flat_map(|p| blur(p).into_iter().flatten())
            .collect();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn high_freq_of_constant_is_zero() {
    let y = apply(&Tensor::full(&[1, 3, 6, 6], 0.3), |g, v| {
        high_freq(g, v).unwrap()
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
}

/// Values on a 1/16 grid keep every blur sum exact in f32.
fn dyadic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0..16) as f32 / 16.0)
}

#[test]
fn high_freq_ignores_constant_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = dyadic(&mut rng, &[1, 3, 8, 8]);
    let shifted = x.map(|v| v + 0.25);
    let a = apply(&x, |g, v| high_freq(g, v).unwrap());
    let b = apply(&shifted, |g, v| high_freq(g, v).unwrap());
    assert_eq!(a, b);
}

#[test]
fn checkerboard_passes_through() {
    let x = Tensor::from_fn(&[1, 1, 10, 10], |i| {
        if (i / 10 + i % 10) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    });
    let y = apply(&x, |g, v| high_freq(g, v).unwrap());
    let mut sum = 0.0;
    for r in 2..8 {
        for c in 2..8 {
            let v = y.data()[r * 10 + c];
            assert_eq!(v, x.data()[r * 10 + c]);
            sum += v;
        }
    }
    assert_eq!(sum, 0.0);
}

// ---- Laplacian, distillation and total losses ---------------------------

#[test]
fn laplacian_identity_and_single_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (
        random(&mut rng, &[1, 3, 16, 16]),
        random(&mut rng, &[1, 3, 16, 16]),
    );
    let same = scalar(|g| {
        let (x, y) = (g.constant(a.clone()), g.constant(a.clone()));
        laplacian_loss(g, x, y, 5).unwrap()
    });
    assert_eq!(same, 0.0);
    let l1 = scalar(|g| {
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        laplacian_loss(g, x, y, 1).unwrap()
    });
    let want: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (*p as f64 - *q as f64).abs())
        .sum::<f64>()
        / a.numel() as f64;
    assert!((l1 as f64 - want).abs() < 1e-6);
}

#[test]
fn laplacian_matches_reference_pyramid() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (
            random(&mut rng, &[1, 3, 32, 32]),
            random(&mut rng, &[1, 3, 32, 32]),
        );
        for levels in [3, 5] {
            let got = scalar(|g| {
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                laplacian_loss(g, x, y, levels).unwrap()
            });
            let want = oracle_laplacian(&a, &b, levels, |j| 0.5f64.powi(j as i32));
            assert!(
                (got as f64 - want).abs() <= 1e-5,
                "levels {levels}: {got} vs {want}"
            );

            for (scheme, w) in [
                (LevelWeights::Uniform, 1.0f64),
                (LevelWeights::Doubling, 2.0),
            ] {
                let got = scalar(|g| {
                    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                    laplacian_loss_weighted(g, x, y, levels, scheme).unwrap()
                });
                let want = oracle_laplacian(&a, &b, levels, |j| w.powi(j as i32));
                assert!(
                    (got as f64 - want).abs() <= 1e-5 * want.max(1.0),
                    "{scheme:?}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn laplacian_too_many_levels_names_limit() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 1, 12, 40]));
    let err = laplacian_loss(&mut g, a, a, 6).unwrap_err().to_string();
    assert!(err.contains("at most 4"), "{err}");
}

#[test]
fn dis_loss_identities() {
    let cfg = KDConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = dyadic(&mut rng, &[1, 3, 16, 16]);
    let b = random(&mut rng, &[1, 3, 16, 16]);

    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(a.clone()));
    let d = dis_loss(&mut g, x, y, &cfg).unwrap();
    assert_eq!(g.value(d.total).item(), 0.0);

    // Shift by a constant: image term sees it, HF term does not.
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.map(|v| v + 0.25)), g.constant(a.clone()));
    let d = dis_loss(&mut g, x, y, &cfg).unwrap();
    assert!(g.value(d.lap_image).item() > 0.0);
    assert_eq!(g.value(d.lap_hf).item(), 0.0);

    // Sum of the separately computed terms.
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let d = dis_loss(&mut g, x, y, &cfg).unwrap();
    let whole = g.value(d.total).item();
    let sep_img = scalar(|g| {
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        laplacian_loss_weighted(g, x, y, cfg.pyramid_levels, cfg.level_weights).unwrap()
    });
    let sep_hf = scalar(|g| {
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let (hx, hy) = (high_freq(g, x).unwrap(), high_freq(g, y).unwrap());
        laplacian_loss_weighted(g, hx, hy, cfg.pyramid_levels, cfg.level_weights).unwrap()
    });
    assert_eq!(whole, sep_img + sep_hf);
}

#[test]
fn total_loss_identities() {
    let cfg = KDConfig::default();
    let a = Tensor::full(&[1, 3, 16, 16], 0.4);
    let mut g = Graph::new();
    let (s, t, gt) = (
        g.constant(a.clone()),
        g.constant(a.clone()),
        g.constant(a.clone()),
    );
    let l = total_loss(&mut g, s, t, gt, &cfg).unwrap().values(&g);
    assert_eq!(l.total, 0.1f32 * 1e-3f32);
    assert!((l.total as f64 - 1e-4).abs() < 1e-10);
    assert_eq!(l.dis_term, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y, z) = (
        random(&mut rng, &[1, 3, 16, 16]),
        random(&mut rng, &[1, 3, 16, 16]),
        random(&mut rng, &[1, 3, 16, 16]),
    );
    for (alpha, student_loss) in [
        (0.0, StudentLoss::Charbonnier),
        (0.1, StudentLoss::Charbonnier),
        (0.7, StudentLoss::L1),
    ] {
        let cfg = KDConfig {
            alpha,
            student_loss,
            ..Default::default()
        };
        let mut g = Graph::new();
        let (s, t, gt) = (
            g.constant(x.clone()),
            g.constant(y.clone()),
            g.constant(z.clone()),
        );
        let l = total_loss(&mut g, s, t, gt, &cfg).unwrap().values(&g);
        assert_eq!(l.total, alpha * l.student_term + l.dis_term);
        assert_eq!(l.dis_term, l.lap_image + l.lap_hf);
        if alpha == 0.0 {
            assert_eq!(l.total, l.dis_term);
        }
    }
}

#[test]
fn total_loss_shape_mismatch_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let b = g.constant(Tensor::zeros(&[1, 3, 8, 10]));
    assert!(total_loss(&mut g, a, a, b, &KDConfig::default()).is_err());
    assert!(total_loss(&mut g, a, b, a, &KDConfig::default()).is_err());
}

#[test]
fn config_validation() {
    assert!(KDConfig::default().validate().is_ok());
    assert!(KDConfig {
        alpha: -0.1,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(KDConfig {
        pyramid_levels: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
}

// ---- training loop -------------------------------------------------------

fn toy_set(n: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n).map(|_| synth::scene(32, 32, &mut rng)).collect();
    ImageSet::new((0..n).map(|i| format!("{i}")).collect(), images).unwrap()
}

fn quick(iterations: usize) -> KDConfig {
    KDConfig {
        iterations,
        batch: 2,
        patch: 24,
        pyramid_levels: 3,
        ..Default::default()
    }
}

#[test]
fn copy_of_teacher_starts_with_zero_distillation() {
    let set = toy_set(3, 0);
    let teacher = SRModel::build(ModelConfig::new(8, 2, 1, 2), 1).unwrap();
    let mut student = teacher.clone();
    let s = run_distillation(&mut student, Teacher::Model(&teacher), &set, &quick(2)).unwrap();
    let first = s.first.unwrap();
    assert_eq!(first.dis_term, 0.0);
    assert_eq!(first.lap_image, 0.0);
    assert_eq!(first.lap_hf, 0.0);
}

#[test]
fn ground_truth_teacher_matches_offline_loss() {
    let set = toy_set(3, 1);
    let cfg = quick(1);
    let init = SRModel::build(ModelConfig::new(8, 1, 2, 2), 5).unwrap();
    let mut student = init.clone();
    let s = run_distillation(&mut student, Teacher::GroundTruth, &set, &cfg).unwrap();

    let batch = training_sampler(&set, cfg.patch, 2, cfg.augment, cfg.seed)
        .unwrap()
        .next_batch(cfg.batch)
        .unwrap();
    let sr = init.predict(&batch.lr).unwrap();
    let mut g = Graph::new();
    let (st, te, gt) = (
        g.constant(sr),
        g.constant(batch.hr.clone()),
        g.constant(batch.hr),
    );
    let offline = total_loss(&mut g, st, te, gt, &cfg).unwrap().values(&g);
    assert_eq!(s.first.unwrap().total, offline.total);
}

#[test]
fn teacher_is_untouched() {
    let set = toy_set(3, 2);
    let teacher = SRModel::build(ModelConfig::new(8, 2, 2, 2), 3).unwrap();
    let before = srwt::to_bytes(&teacher);
    let mut student = SRModel::build(ModelConfig::new(8, 1, 1, 2), 4).unwrap();
    run_distillation(&mut student, Teacher::Model(&teacher), &set, &quick(3)).unwrap();
    assert_eq!(srwt::to_bytes(&teacher), before);
}

#[test]
fn scale_mismatch_rejected() {
    let set = toy_set(2, 3);
    let teacher = SRModel::build(ModelConfig::new(8, 1, 1, 3), 0).unwrap();
    let mut student = SRModel::build(ModelConfig::new(8, 1, 1, 2), 0).unwrap();
    let err =
        run_distillation(&mut student, Teacher::Model(&teacher), &set, &quick(1)).unwrap_err();
    assert!(err.to_string().contains("x3"), "{err}");
}

#[test]
fn distillation_lowers_the_loss() {
    let set = toy_set(10, 4);
    let teacher = pretrain(
        ModelConfig::new(8, 2, 2, 2),
        &set,
        &PretrainConfig {
            iters: 100,
            batch: 4,
            patch: 24,
            ..Default::default()
        },
    )
    .unwrap();
    let mut student = SRModel::build(ModelConfig::new(8, 1, 2, 2), 9).unwrap();
    let cfg = KDConfig {
        batch: 4,
        ..quick(300)
    };
    let mut logs: Vec<KDLog> = Vec::new();
    let s = run_distillation_logged(&mut student, Teacher::Model(&teacher), &set, &cfg, |l| {
        logs.push(*l);
        Ok(())
    })
    .unwrap();
    assert_eq!(logs.len(), 300);
    assert!(logs.iter().enumerate().all(|(i, l)| l.iter == i));
    assert!(logs
        .iter()
        .all(|l| l.total >= 0.0 && l.dis_term >= 0.0 && l.student_term >= 0.0));
    // Compare averages over the first and last 20 iterations so batch noise does not decide.
    let avg = |ls: &[KDLog]| ls.iter().map(|l| l.total as f64).sum::<f64>() / ls.len() as f64;
    assert!(avg(&logs[280..]) < avg(&logs[..20]));
    assert!(s.last.unwrap().total < s.first.unwrap().total);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn components_non_negative_and_dis_symmetric(seed in any::<u64>(), levels in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random(&mut rng, &[1, 2, 8, 8]), random(&mut rng, &[1, 2, 8, 8]), random(&mut rng, &[1, 2, 8, 8]));
        let cfg = KDConfig { pyramid_levels: levels, ..Default::default() };
        let mut g = Graph::new();
        let (x, y, z) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c));
        let l = total_loss(&mut g, x, y, z, &cfg).unwrap().values(&g);
        prop_assert!(l.total >= 0.0 && l.student_term >= 0.0 && l.dis_term >= 0.0);
        prop_assert!(l.lap_image >= 0.0 && l.lap_hf >= 0.0);
        let rev = dis_loss(&mut g, y, x, &cfg).unwrap();
        prop_assert_eq!(g.value(rev.total).item(), l.dis_term);
    }
}
