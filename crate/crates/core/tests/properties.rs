use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;

use qsr_core::diffusion::{forward_diffuse, mask_ratio_schedule, sample_mask, NoiseSchedule};
use qsr_core::io::{read_volumes, write_volumes};
use qsr_core::metrics::{pearson_r, psnr, ssim, tensor_scalars};
use qsr_core::phantom::generate_directions;
use qsr_core::shps::{select_best, GuidanceWeights};
use qsr_core::sphere_sh::{
    eval_sh_basis, fit_sh, heat_smooth, laplace_beltrami_apply, n_coeffs, smoothness_energy, synth_from_sh, ShCoefficients,
};
use qsr_core::volume::{DwiVolume, GradientTable};

fn image(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_symmetric(x in image(100), y in image(100)) {
        prop_assert_eq!(ssim(&x, &y, 10, 10, 1.0).unwrap(), ssim(&y, &x, 10, 10, 1.0).unwrap());
    }

    #[test]
    fn ssim_of_identical_images_is_one(x in image(64)) {
        prop_assert!((ssim(&x, &x, 8, 8, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric(x in image(50), y in image(50)) {
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn pearson_affine_invariance(x in image(40), y in image(40), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let r = pearson_r(&x, &y).unwrap();
        let xa: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let ya: Vec<f64> = y.iter().map(|v| a * v - b).collect();
        prop_assert!((pearson_r(&xa, &y).unwrap() - r).abs() < 1e-12);
        prop_assert!((pearson_r(&x, &ya).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn fa_is_scale_invariant(
        l in prop::array::uniform3(1e-5f64..3e-3),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..3.0,
        c in 1e-3f64..1e3,
    ) {
        let v = Vector3::from(axis);
        prop_assume!(v.norm() > 1e-3);
        let r = Rotation3::new(v.normalize() * angle);
        let d = r.matrix() * Matrix3::from_diagonal(&Vector3::from(l)) * r.matrix().transpose();
        let (fa, md, ad) = tensor_scalars(&d).unwrap();
        let (fa_c, md_c, ad_c) = tensor_scalars(&(d * c)).unwrap();
        prop_assert!((fa - fa_c).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&fa));
        prop_assert!((md_c / md - c).abs() < 1e-9 * c);
        prop_assert!((ad_c / ad - c).abs() < 1e-9 * c);
    }

    #[test]
    fn sh_round_trip(coeffs in prop::collection::vec(-2.0f64..2.0, n_coeffs(4))) {
        let dirs = generate_directions(30, 5).unwrap();
        let basis = eval_sh_basis(&dirs, 4).unwrap();
        let c = ShCoefficients::new(4, coeffs.clone()).unwrap();
        let fit = fit_sh(&synth_from_sh(&c, &basis).unwrap(), &basis, 0.0).unwrap();
        for (a, b) in fit.coeffs.iter().zip(&coeffs) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothing_never_raises_energy(coeffs in prop::collection::vec(-2.0f64..2.0, n_coeffs(6)), tau in 0.0f64..0.5) {
        let c = ShCoefficients::new(6, coeffs).unwrap();
        let e = smoothness_energy(&c);
        prop_assert!(e >= 0.0);
        prop_assert!(smoothness_energy(&heat_smooth(&c, tau).unwrap()) <= e + 1e-12);
        // Energy is half the inner product of c with -Δc.
        let lap = laplace_beltrami_apply(&c);
        let dot: f64 = c.coeffs.iter().zip(&lap.coeffs).map(|(a, b)| a * b).sum();
        prop_assert!((e + 0.5 * dot).abs() < 1e-9 * (1.0 + e));
    }

    #[test]
    fn noiseless_forward_process_scales_signal(x0 in prop::collection::vec(-1.0f64..1.0, 8), t in 1usize..=1000) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let xt = forward_diffuse(&s, &x0, t, &[0.0; 8]).unwrap();
        let a = s.alpha_bar(t).sqrt();
        for (u, v) in xt.iter().zip(&x0) {
            prop_assert!((u - a * v).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_ratio_ramp_is_monotone(i in 0usize..5000, j in 0usize..5000) {
        let (a, b) = (mask_ratio_schedule(i.min(j), 4000), mask_ratio_schedule(i.max(j), 4000));
        prop_assert!(a <= b);
        prop_assert!((0.5..=0.94).contains(&a) && (0.5..=0.94).contains(&b));
    }

    #[test]
    fn sampled_masks_hit_the_ratio(k in 0.5f64..0.94, seed in any::<u64>()) {
        let m = sample_mask(k, 60, seed).unwrap();
        prop_assert_eq!(m.n_masked(), (k * 60.0).round() as usize);
        prop_assert_eq!(sample_mask(k, 60, seed).unwrap(), m);
    }

    #[test]
    fn grid_selection_ignores_order(scores in prop::collection::vec((0usize..4, 0usize..4, 0usize..3), 1..12), rot in 0usize..12) {
        let grid = [0.0, 0.25, 0.5, 0.75];
        let levels = [20.0, 21.0, f64::NAN];
        let mut list: Vec<(GuidanceWeights, f64)> = scores
            .iter()
            .map(|&(a, b, s)| (GuidanceWeights::new(grid[a], grid[b]).unwrap(), levels[s]))
            .collect();
        list.dedup_by_key(|e| (e.0.lambda_oc.to_bits(), e.0.lambda_scc.to_bits()));
        let best = select_best(&list).unwrap();
        let k = rot % list.len();
        list.rotate_left(k);
        let again = select_best(&list).unwrap();
        prop_assert_eq!(best.0, again.0);
    }

    #[test]
    fn volume_files_round_trip_f32_values(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 2 * 3 * 4)) {
        let dir = tempfile::tempdir().unwrap();
        let table = GradientTable::single_shell(1000.0, generate_directions(4, 1).unwrap()).unwrap();
        let data: Vec<f64> = vals.iter().map(|&v| f64::from(v)).collect();
        let vol = DwiVolume::new(2, 3, data, table.clone()).unwrap();
        let p = dir.path().join("v.f32");
        write_volumes(&p, std::slice::from_ref(&vol)).unwrap();
        prop_assert_eq!(read_volumes(&p, &table).unwrap(), vec![vol]);
    }
}
