use emitterforge_core::analysis::{count_emitters, debye_waller, saturation_gradient, saturation_model, Spectrum};
use emitterforge_core::correlator::{
    background_correct_value, correlate, correlate_raw, correlate_raw_time_chunked, g2_model, ChannelView, G2Params,
};
use emitterforge_core::defectstats::{composite_defect_pmf, CreationModel};
use emitterforge_core::photonsim::simulate_background_tags;
use proptest::prelude::*;

fn sorted_tags(max: u64, n: usize) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0..max, 1..n).prop_map(|mut v| {
        v.sort_unstable();
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_equals_monolithic(
        a in sorted_tags(50_000, 400),
        b in sorted_tags(50_000, 400),
        bin in 1u64..40,
        half in 1usize..30,
        chunks in 1usize..9,
    ) {
        let whole = correlate_raw(&a, &b, bin, half);
        let parts = correlate_raw_time_chunked(&a, &b, bin, half, chunks);
        prop_assert_eq!(whole.counts, parts.counts);
    }

    #[test]
    fn swapping_channels_mirrors_tau(
        a in sorted_tags(20_000, 300),
        b in sorted_tags(20_000, 300),
        bin in 1u64..25,
        half in 1usize..20,
    ) {
        let ab = correlate_raw(&a, &b, bin, half);
        let mut ba = correlate_raw(&b, &a, bin, half).counts;
        ba.reverse();
        prop_assert_eq!(ab.counts, ba);
    }

    #[test]
    fn model_at_zero_ignores_bunching(n in 1.0f64..50.0, a in 0.0f64..20.0, t1 in 0.1f64..100.0, t2 in 0.1f64..1e4) {
        let p = G2Params { n_emitters: n, a, tau1: t1, tau2: t2 };
        prop_assert!((g2_model(0.0, &p) - (n - 1.0) / n).abs() < 1e-12);
    }

    #[test]
    fn correction_inverts_mixing(g in 0.0f64..2.0, rho in 0.2f64..1.0) {
        let mixed = rho * rho * g + 1.0 - rho * rho;
        let c = background_correct_value(mixed, 0.01, rho, 0.1).unwrap();
        prop_assert!((c.value - g).abs() < 1e-12);
        prop_assert!((c.sigma - 0.01 / (rho * rho)).abs() < 1e-15);
    }

    #[test]
    fn saturation_gradient_matches_differences(
        p in 1e-6f64..2e-3,
        i_sat in 1e3f64..1e6,
        p0 in 1e-5f64..2e-3,
        sd in 0.0f64..1e7,
    ) {
        let g = saturation_gradient(p, i_sat, p0);
        let x = [i_sat, p0, sd];
        for (k, gk) in g.iter().enumerate() {
            let h = 1e-6 * x[k].abs().max(1e-9);
            let mut up = x;
            let mut dn = x;
            up[k] += h;
            dn[k] -= h;
            let fd = (saturation_model(p, up[0], up[1], up[2]) - saturation_model(p, dn[0], dn[1], dn[2])) / (2.0 * h);
            prop_assert!((fd - gk).abs() <= 1e-5 * gk.abs().max(1e-3), "k={} fd={} g={}", k, fd, gk);
        }
    }

    #[test]
    fn count_is_monotone_in_rate(b in 0.0f64..1e4, ig in 1.0f64..1e5, r1 in 0.0f64..1e6, dr in 0.0f64..1e5) {
        let lo = count_emitters(r1, b, ig).unwrap();
        let hi = count_emitters(r1 + dr, b, ig).unwrap();
        prop_assert!(hi >= lo);
    }

    #[test]
    fn composite_pmf_sums_to_one(mu in 0.05f64..20.0, k in 1u32..6) {
        let m = CreationModel { mu, k, p_success: 0.16 };
        let total: f64 = (0..200).map(|n| composite_defect_pmf(&m, n).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}

fn gauss(x: f64, c: f64, a: f64, f: f64) -> f64 {
    a * (-4.0 * 2f64.ln() * ((x - c) / f).powi(2)).exp()
}

fn toy_spectrum(scale: f64) -> Spectrum {
    let samples = (0..500)
        .map(|i| {
            let w = 1260.0 + i as f64 * 0.2;
            let y = gauss(w, 1278.0, 1.0, 1.2) + gauss(w, 1290.0, 0.1, 12.0) + gauss(w, 1305.0, 0.05, 15.0) + 0.002;
            (w * 1e-9, y * scale)
        })
        .collect();
    Spectrum { samples, zpl_wavelength: 1278e-9 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn debye_waller_ignores_intensity_scale(exp in -3.0f64..6.0) {
        let base = debye_waller(&toy_spectrum(1.0), 3e-9, 3).unwrap();
        let scaled = debye_waller(&toy_spectrum(10f64.powf(exp)), 3e-9, 3).unwrap();
        prop_assert!((base.dw - scaled.dw).abs() < 1e-6, "{} vs {}", base.dw, scaled.dw);
    }
}

#[test]
fn independent_poisson_streams_average_to_one() {
    let a = simulate_background_tags(1e4, 100.0, 21).unwrap();
    let b = simulate_background_tags(1e4, 100.0, 22).unwrap();
    let (ta, tb) = (a.channel(0), b.channel(0));
    let h = correlate(ChannelView::new(&ta, &a), ChannelView::new(&tb, &b), 1e-6, 50e-6).unwrap();
    let mean = h.bins.iter().map(|b| b.g2).sum::<f64>() / h.bins.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}
