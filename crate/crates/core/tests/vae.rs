use kleinvae::autodiff::Tensor;
use kleinvae::covering::CoveringMap;
use kleinvae::data::{gen_klein_circles, ImageSet, Raster};
use kleinvae::density::{kl_gaussian_analytic, GaussianParams};
use kleinvae::vae::{
    batch_tensor, draw_noise, encode, latent_variance, reconstruct, reparameterize, train, Architecture,
    LatentSpec, Preset, TrainConfig, VaeModel,
};
use kleinvae::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn circles(n: usize, seed: u64) -> ImageSet {
    gen_klein_circles(n, 30, 0.3, seed).unwrap().0
}

fn small_model(latent: LatentSpec, hidden: usize, seed: u64) -> VaeModel {
    VaeModel::new(Architecture::new(latent, 900, vec![hidden]), 1e-3, seed).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 2,
        latent_var_sample: 32,
        spot_check_every: 0,
        ..Preset::Ablation.train_config(seed)
    }
}

/// Distance from a cover point to the nearest seam of the latent's lattice.
fn seam_margin(latent: LatentSpec, z: &[f64]) -> f64 {
    match latent {
        LatentSpec::Euclidean(_) => f64::INFINITY,
        _ => z
            .iter()
            .map(|v| {
                let f = v - v.floor();
                f.min(1.0 - f)
            })
            .fold(f64::INFINITY, f64::min),
    }
}

#[test]
fn loss_gradient_matches_central_differences() {
    let images = circles(4, 11);
    let x = batch_tensor(&images, &[0, 1, 2, 3]);
    for latent in [LatentSpec::Klein, LatentSpec::Torus2, LatentSpec::Euclidean(3)] {
        let mut model = small_model(latent, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = loop {
            let e = draw_noise(&mut rng, 4, latent.dim());
            let z = model.cover_latents(&x, &e).unwrap();
            if (0..4).all(|r| seam_margin(latent, z.row(r)) > 1e-3) {
                break e;
            }
        };
        let (_, grads) = model.loss_and_grad(&x, &eps).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        // Every tenth entry keeps the test fast while touching every layer.
        for pi in 0..model.params.len() {
            for k in (0..model.params[pi].value.len()).step_by(10) {
                let orig = model.params[pi].value.data[k];
                model.params[pi].value.data[k] = orig + h;
                let up = model.loss(&x, &eps).unwrap().loss;
                model.params[pi].value.data[k] = orig - h;
                let down = model.loss(&x, &eps).unwrap().loss;
                model.params[pi].value.data[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads[pi].data[k];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-4, "{latent}: worst relative error {worst}");
    }
}

#[test]
fn klein_reparameterization_examples() {
    let q = GaussianParams::isotropic(vec![0.3, 0.4], 0.2).unwrap();
    let z = reparameterize(&q, LatentSpec::Klein, &[0.0, 0.0]).unwrap();
    assert!((z[0] - 0.3).abs() < 1e-15 && (z[1] - 0.4).abs() < 1e-15);
    let q = GaussianParams::isotropic(vec![1.5, 0.3], 0.2).unwrap();
    let z = reparameterize(&q, LatentSpec::Klein, &[0.0, 0.0]).unwrap();
    assert!((z[0] - 0.5).abs() < 1e-12 && (z[1] - 0.7).abs() < 1e-12);
    // Jacobian of the mean-to-latent map on the flipped sheet.
    let h = 1e-6;
    let f = |m: [f64; 2]| {
        let q = GaussianParams::isotropic(m.to_vec(), 0.2).unwrap();
        reparameterize(&q, LatentSpec::Klein, &[0.0, 0.0]).unwrap()
    };
    let mut jac = [[0.0; 2]; 2];
    for c in 0..2 {
        let (mut up, mut down) = ([1.5, 0.3], [1.5, 0.3]);
        up[c] += h;
        down[c] -= h;
        let (a, b) = (f(up), f(down));
        for r in 0..2 {
            jac[r][c] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    let expect = [[1.0, 0.0], [0.0, -1.0]];
    for r in 0..2 {
        for c in 0..2 {
            assert!((jac[r][c] - expect[r][c]).abs() < 1e-6, "{jac:?}");
        }
    }
}

#[test]
fn graph_projection_agrees_with_the_covering() {
    // With zero hidden influence the graph's latent must equal projecting
    // the cover point returned alongside it.
    let images = circles(8, 2);
    let x = batch_tensor(&images, &(0..8).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for latent in LatentSpec::ABLATION {
        let model = small_model(latent, 8, 1);
        let eps = draw_noise(&mut rng, 8, latent.dim()).map(|v| 4.0 * v);
        let z = model.cover_latents(&x, &eps).unwrap();
        let params = encode(&model, &images).unwrap();
        for r in 0..8 {
            let direct = reparameterize(&params[r], latent, eps.row(r)).unwrap();
            let projected = latent.covering().project(z.row(r)).unwrap();
            assert!(latent.covering().contains(&direct) || !latent.covering().is_periodic());
            for (a, b) in direct.iter().zip(&projected) {
                assert!((a - b).abs() < 1e-12, "{latent}: {direct:?} vs {projected:?}");
            }
        }
    }
}

#[test]
fn euclidean_reparameterization_is_the_classic_trick() {
    let q = GaussianParams::new(
        vec![0.1, -2.0, 3.0],
        vec![0.5, 0.0, 0.0, 0.2, 0.3, 0.0, -0.1, 0.4, 0.7],
    )
    .unwrap();
    let eps = [0.3, -1.2, 0.8];
    let z = reparameterize(&q, LatentSpec::Euclidean(3), &eps).unwrap();
    let expect = [0.1 + 0.15, -2.0 + 0.06 - 0.36, 3.0 - 0.03 - 0.48 + 0.56];
    for (a, b) in z.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn kl_term_matches_the_closed_form() {
    let images = circles(6, 4);
    let x = batch_tensor(&images, &(0..6).collect::<Vec<_>>());
    for latent in LatentSpec::ABLATION {
        let mut model = small_model(latent, 8, 7);
        model.kl_weight = 1.0;
        let eps = Tensor::zeros(6, latent.dim());
        let terms = model.loss(&x, &eps).unwrap();
        let prior = model.arch.prior().unwrap();
        let expect: f64 = encode(&model, &images)
            .unwrap()
            .iter()
            .map(|q| kl_gaussian_analytic(q, &prior).unwrap())
            .sum::<f64>()
            / 6.0;
        assert!((terms.kl - expect).abs() < 1e-10 * expect.max(1.0), "{latent}");
        assert!((terms.loss - (-terms.recon + terms.kl)).abs() < 1e-9);
    }
}

#[test]
fn kl_vanishes_when_the_posterior_is_the_prior() {
    // Zero weights and biases chosen so the encoder outputs the prior.
    let mut model = small_model(LatentSpec::Klein, 4, 0);
    for p in &mut model.params {
        p.value.data.fill(0.0);
    }
    let last_bias = 3; // enc.1.bias
    let diag = (0.1f64.sqrt() - 1e-4).exp_m1().ln();
    model.params[last_bias].value.data = vec![0.5, 0.5, diag, 0.0, diag];
    let images = circles(3, 1);
    let x = batch_tensor(&images, &[0, 1, 2]);
    let terms = model.loss(&x, &Tensor::zeros(3, 2)).unwrap();
    assert!(terms.kl.abs() < 1e-12, "{}", terms.kl);
}

#[test]
fn encoded_covariances_are_positive_definite() {
    let images = circles(64, 8);
    for latent in LatentSpec::ABLATION {
        let model = small_model(latent, 16, 2);
        for q in encode(&model, &images).unwrap() {
            let d = q.dim();
            let cov = q.covariance();
            for i in 0..d {
                for j in 0..d {
                    assert_eq!(cov[i * d + j], cov[j * d + i]);
                }
            }
            // det(L)^2 bounds the smallest eigenvalue from below through
            // the largest: lambda_min >= det / lambda_max^(d-1).
            let lmax = q.max_std().powi(2);
            let det = q.log_det_cov().exp();
            assert!(det / lmax.powi(d as i32 - 1) >= 1e-8 * 0.999);
        }
        let zero = ImageSet::new(Raster::new(1, 30, 30, vec![0.0; 900]).unwrap()).unwrap();
        assert!(encode(&model, &zero).is_ok());
    }
}

#[test]
fn batched_and_single_encodes_agree() {
    let images = circles(5, 3);
    let model = small_model(LatentSpec::Klein, 16, 4);
    let all = encode(&model, &images).unwrap();
    for i in 0..5 {
        let one = encode(&model, &images.select(&[i]).unwrap()).unwrap();
        assert_eq!(one[0], all[i]);
    }
}

#[test]
fn latent_variance_examples() {
    let model = small_model(LatentSpec::Euclidean(2), 8, 5);
    let same = circles(1, 1).select(&[0, 0, 0]).unwrap();
    assert_eq!(latent_variance(&model, &same).unwrap(), 0.0);
    let two = circles(2, 6);
    let mu: Vec<Vec<f64>> = encode(&model, &two)
        .unwrap()
        .into_iter()
        .map(|q| q.mean)
        .collect();
    let expect = ((mu[0][0] - mu[1][0]).powi(2) / 4.0 + (mu[0][1] - mu[1][1]).powi(2) / 4.0) / 2.0;
    let got = latent_variance(&model, &two).unwrap();
    assert!((got - expect).abs() < 1e-14);
    let doubled = two.select(&[0, 1, 0, 1]).unwrap();
    assert!((latent_variance(&model, &doubled).unwrap() - got).abs() < 1e-14);
    assert!(latent_variance(&model, &circles(1, 1)).is_err());
}

#[test]
fn reconstructions_keep_shape_and_stay_inside_the_unit_interval() {
    let images = circles(10, 12);
    for latent in [LatentSpec::Klein, LatentSpec::Euclidean(2)] {
        let model = small_model(latent, 8, 6);
        let r = reconstruct(&model, &images).unwrap();
        assert_eq!((r.count(), r.height(), r.width()), (10, 30, 30));
        assert!(r.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(reconstruct(&model, &images).unwrap(), r);
    }
}

#[test]
fn training_is_reproducible() {
    let images = circles(64, 21);
    let run = || {
        let mut model = small_model(LatentSpec::Klein, 16, 9);
        let mut log = Vec::new();
        let report = train(&mut model, &images, &tiny_config(3), Some(&mut log)).unwrap();
        (report, model, log)
    };
    let (a, ma, la) = run();
    let (b, mb, lb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert_eq!(la, lb);
    assert_eq!(a.log.len(), 3);
    let text = String::from_utf8(la).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "elbo", "recon", "kl", "lr", "latent_var"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn single_image_overfit_reduces_reconstruction_loss() {
    let image = circles(1, 5);
    let mut model = small_model(LatentSpec::Klein, 64, 2);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 1000,
        latent_var_sample: 0,
        spot_check_every: 0,
        ..Preset::Ablation.train_config(1)
    };
    let report = train(&mut model, &image, &cfg, None).unwrap();
    let nll: Vec<f64> = report.log[1..].iter().map(|l| -l.recon * 900.0).collect();
    let blocks: Vec<f64> = nll.chunks(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    // Sampling noise keeps the loss jittering by a fraction of a nat once
    // the image is memorised; a block may not rise above the best earlier
    // block by more than that.
    let mut best = f64::INFINITY;
    for (i, &b) in blocks.iter().enumerate() {
        assert!(b < best + 0.5, "block {i}: {b} after best {best}");
        best = best.min(b);
    }
    assert!(blocks[blocks.len() - 1] < 0.01 * blocks[0], "{blocks:?}");
}

#[test]
fn kl_weight_shrinks_latent_variance() {
    let images = circles(256, 13);
    let run = |beta: f64| {
        let mut model = small_model(LatentSpec::Euclidean(2), 32, 4);
        let cfg = TrainConfig {
            batch_size: 64,
            epochs: 30,
            kl_weight: beta,
            latent_var_sample: 256,
            spot_check_every: 0,
            ..Preset::Ablation.train_config(8)
        };
        let report = train(&mut model, &images, &cfg, None).unwrap();
        report.log.last().unwrap().latent_var
    };
    let (free, weighted) = (run(0.0), run(1e-3));
    assert!(free > weighted, "{free} vs {weighted}");
}

#[test]
fn divergence_stops_with_the_last_good_parameters() {
    let images = circles(32, 2);
    let mut model = small_model(LatentSpec::Torus2, 8, 1);
    let cfg = TrainConfig {
        lr: 1e150,
        epochs: 20,
        ..tiny_config(1)
    };
    let report = train(&mut model, &images, &cfg, None).unwrap();
    let msg = report.diverged.expect("training should diverge");
    assert!(msg.contains("epoch"), "{msg}");
    assert!(model.params.iter().all(|p| p.value.all_finite()));
}

#[test]
fn spot_checks_respect_the_bound() {
    let images = circles(64, 4);
    let mut model = small_model(LatentSpec::Klein, 16, 3);
    let cfg = TrainConfig {
        spot_check_every: 2,
        ..tiny_config(2)
    };
    let report = train(&mut model, &images, &cfg, None).unwrap();
    assert_eq!(report.spot_checks.len(), 4);
    assert!(
        report.spot_checks.iter().all(|c| c.holds(1e-3)),
        "{:?}",
        report.spot_checks
    );
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let model = small_model(LatentSpec::Klein, 8, 5);
    let bytes = model.to_bytes().unwrap();
    let back = VaeModel::from_bytes(&bytes).unwrap();
    assert_eq!(back.arch, model.arch);
    assert_eq!(back.kl_weight, model.kl_weight);
    for (a, b) in back.params.iter().zip(&model.params) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.value.data.iter().zip(&b.value.data) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    assert_eq!(VaeModel::from_bytes(&back.to_bytes().unwrap()).unwrap(), back);
    let offset = |r: kleinvae::Result<VaeModel>| match r {
        Err(Error::Parse { offset, .. }) => offset,
        other => panic!("expected a parse error, got {other:?}"),
    };
    assert_eq!(
        offset(VaeModel::from_bytes(&bytes[..bytes.len() - 1])),
        bytes.len() as u64 - 1
    );
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(offset(VaeModel::from_bytes(&bad)), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset(VaeModel::from_bytes(&bad)), 4);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(offset(VaeModel::from_bytes(&long)), bytes.len() as u64);
}

#[test]
fn latent_names_parse() {
    for l in LatentSpec::ABLATION {
        assert_eq!(l.to_string().parse::<LatentSpec>().unwrap(), l);
    }
    assert!("euclidean5".parse::<LatentSpec>().is_err());
    assert!("sphere".parse::<LatentSpec>().is_err());
    assert_eq!(LatentSpec::Klein.covering(), CoveringMap::KleinComposed);
    assert_eq!(LatentSpec::Klein.encoder_outputs(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn reparameterized_points_lie_in_the_fundamental_domain(
        m in prop::array::uniform2(-20.0f64..20.0),
        l in prop::array::uniform3(0.001f64..3.0),
        e in prop::array::uniform2(-5.0f64..5.0),
    ) {
        let q = GaussianParams::new(m.to_vec(), vec![l[0], 0.0, l[1] - 1.5, l[2]]).unwrap();
        for latent in [LatentSpec::Torus2, LatentSpec::Klein] {
            let z = reparameterize(&q, latent, &e).unwrap();
            prop_assert!(latent.covering().contains(&z), "{:?}", z);
        }
    }
}

#[test]
fn noise_is_seeded() {
    let mut a = ChaCha8Rng::seed_from_u64(4);
    let mut b = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(draw_noise(&mut a, 3, 2), draw_noise(&mut b, 3, 2));
    let _: f64 = a.random();
}
