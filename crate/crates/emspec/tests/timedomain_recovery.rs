//! Recovery tests for the correlation and lifetime fits against seeded
//! synthetic histograms, plus convolution oracles.

use emspec::synth::{
    self, decay_expectation, derive_seed, scenarios, synth_decay_histogram, synth_g2_histogram,
    DecayTruth, StreamTruth,
};
use emspec::timedomain::{
    convolve_with_irf, fit_g2, fit_irf, fit_lifetime, g2_ideal, normalize_g2,
    skew_gaussian_density, CorrelationHistogram, G2FitConfig, IrfModel, LifetimeFitConfig,
    TimeGrid,
};

fn paper_stream(seed: u64) -> StreamTruth {
    scenarios::paper_g2(seed).0
}

/// Brute-force convolution oracle: 100x oversampled midpoint quadrature of
/// `int model(t - s) irf(s) ds`, independent of the production kernel code.
fn convolve_brute(model: impl Fn(f64) -> f64, irf: &IrfModel, grid: &TimeGrid) -> Vec<f64> {
    let reach = 12.0 * irf.scale_ns;
    let fine = grid.step_ns / 100.0;
    let n_k = (2.0 * reach / fine).ceil() as usize;
    let mut out = Vec::with_capacity(grid.n);
    for i in 0..grid.n {
        let t = grid.start_ns + i as f64 * grid.step_ns;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for k in 0..n_k {
            let s = irf.location_ns - reach + (k as f64 + 0.5) * fine;
            let w = skew_gaussian_density(s, irf);
            acc += w * model(t - s);
            norm += w;
        }
        out.push(acc / norm);
    }
    out
}

#[test]
fn convolution_matches_brute_force_quadrature() {
    let irf = IrfModel::new(0.15, 0.5, 3.0).unwrap();
    let grid = TimeGrid {
        start_ns: -15.0,
        step_ns: 0.1,
        n: 301,
    };
    let model = |t: f64| g2_ideal(t, 0.73, 1.954);
    let fast = convolve_with_irf(model, &irf, &grid, 10).unwrap();
    let slow = convolve_brute(model, &irf, &grid);
    for (i, (a, b)) in fast.iter().zip(&slow).enumerate() {
        let rel = (a - b).abs() / b.abs();
        assert!(rel < 1e-4, "bin {i}: {a} vs {b} ({rel:.2e})");
    }
}

#[test]
fn convolution_preserves_pulse_integral() {
    let irf = IrfModel::new(0.0, 0.4, -2.0).unwrap();
    let grid = TimeGrid {
        start_ns: -30.0,
        step_ns: 0.05,
        n: 1401,
    };
    let tau = 1.5;
    let model = move |t: f64| if t >= 0.0 { (-t / tau).exp() } else { 0.0 };
    let out = convolve_with_irf(model, &irf, &grid, 10).unwrap();
    let integral: f64 = out.iter().sum::<f64>() * grid.step_ns;
    assert!(
        (integral - tau).abs() / tau < 1e-4,
        "integral {integral} vs {tau}"
    );
}

#[test]
fn g2_bounds_survive_convolution() {
    let irf = IrfModel::new(0.1, 0.5, 2.0).unwrap();
    let grid = TimeGrid {
        start_ns: -20.0,
        step_ns: 0.1,
        n: 401,
    };
    let p = 0.73;
    let out = convolve_with_irf(|t| g2_ideal(t, p, 1.954), &irf, &grid, 10).unwrap();
    for &v in &out {
        assert!(v >= 1.0 - p - 1e-9 && v <= 1.0 + 1e-9, "value {v} out of bounds");
    }
}

#[test]
fn irf_fit_recovers_skew_normal_shape() {
    let truth = IrfModel::new(5.0, 0.5, 3.0).unwrap();
    let grid = TimeGrid {
        start_ns: 0.0,
        step_ns: 0.1,
        n: 101,
    };
    use rand::SeedableRng;
    // Per-parameter 3-sigma coverage over several seeds; a single draw of a
    // 3-sigma check is itself a ~1% coin flip.
    let trials = 5;
    let mut hits = 0;
    let mut checks = 0;
    for trial in 0..trials {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(90 + trial);
        let counts: Vec<f64> = grid
            .points()
            .iter()
            .map(|&t| {
                let lambda = 3.0e5 * 0.1 * skew_gaussian_density(t, &truth);
                synth::poisson_counts(&mut rng, lambda)
            })
            .collect();
        let hist = CorrelationHistogram::from_start(0.0, 0.1, counts).unwrap();
        let fit = fit_irf(&hist).unwrap();
        assert!(fit.fit.converged);
        for (value, expected, sigma) in [
            (fit.model.location_ns, truth.location_ns, fit.location_sigma_ns),
            (fit.model.scale_ns, truth.scale_ns, fit.scale_sigma_ns),
            (fit.model.shape, truth.shape, fit.shape_sigma),
        ] {
            checks += 1;
            if (value - expected).abs() <= 3.0 * sigma {
                hits += 1;
            }
        }
    }
    assert!(
        hits + 1 >= checks,
        "only {hits}/{checks} parameter recoveries within 3 sigma"
    );
}

#[test]
fn symmetric_pulse_gives_zero_shape() {
    let truth = IrfModel::new(5.0, 0.5, 0.0).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let counts: Vec<f64> = (0..101)
        .map(|i| {
            let t = i as f64 * 0.1;
            let lambda = 5.0e4 * 0.1 * skew_gaussian_density(t, &truth);
            synth::poisson_counts(&mut rng, lambda)
        })
        .collect();
    let hist = CorrelationHistogram::from_start(0.0, 0.1, counts).unwrap();
    let fit = fit_irf(&hist).unwrap();
    assert!(
        fit.model.shape.abs() <= 3.0 * fit.shape_sigma,
        "shape {} (sigma {})",
        fit.model.shape,
        fit.shape_sigma
    );
}

#[test]
fn g2_fit_recovers_paper_scale_truth() {
    let truth = paper_stream(0);
    let hist = synth_g2_histogram(&truth, 0.1, 100.0, derive_seed(500, 0));
    let norm = normalize_g2(&hist, (50.0, 100.0), 2.0).unwrap();
    let fit = fit_g2(&norm, &truth.irf, &G2FitConfig::default()).unwrap();
    assert!(fit.fit.converged);
    assert!(
        (fit.g2_zero - 0.27).abs() <= 3.0 * fit.g2_zero_sigma,
        "g2(0) {} vs 0.27 (sigma {})",
        fit.g2_zero,
        fit.g2_zero_sigma
    );
    assert!(
        (fit.tau1_ns - truth.tau1_ns).abs() <= 3.0 * fit.tau1_sigma_ns,
        "tau1 {} vs {} (sigma {})",
        fit.tau1_ns,
        truth.tau1_ns,
        fit.tau1_sigma_ns
    );
    assert!(fit.g2_zero_sigma <= 0.10, "sigma {}", fit.g2_zero_sigma);
}

#[test]
fn delta_irf_dip_tracks_raw_minimum_more_closely() {
    let truth_jitter = paper_stream(0);
    let mut truth_delta = truth_jitter;
    truth_delta.irf = IrfModel::new(0.0, 0.002, 0.0).unwrap();

    // Robust raw dip level: mean of the central bins, normalized.
    let raw_dip = |hist: &CorrelationHistogram, norm_scale: f64| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for (&t, &c) in hist.bin_centers_ns().iter().zip(hist.counts()) {
            if t.abs() <= 0.25 {
                acc += c;
                n += 1.0;
            }
        }
        acc / n / norm_scale
    };

    let hist_j = synth_g2_histogram(&truth_jitter, 0.1, 100.0, 11);
    let norm_j = normalize_g2(&hist_j, (50.0, 100.0), 2.0).unwrap();
    let fit_j = fit_g2(&norm_j, &truth_jitter.irf, &G2FitConfig::default()).unwrap();
    let gap_j = (raw_dip(&hist_j, norm_j.scale) - fit_j.g2_zero).abs();

    let hist_d = synth_g2_histogram(&truth_delta, 0.1, 100.0, 11);
    let norm_d = normalize_g2(&hist_d, (50.0, 100.0), 2.0).unwrap();
    let fit_d = fit_g2(&norm_d, &truth_delta.irf, &G2FitConfig::default()).unwrap();
    let gap_d = (raw_dip(&hist_d, norm_d.scale) - fit_d.g2_zero).abs();

    assert!(
        gap_d < gap_j,
        "delta-IRF gap {gap_d} should be below jittered gap {gap_j}"
    );
}

#[test]
fn poissonian_stream_is_consistent_with_flat_g2() {
    let mut truth = paper_stream(0);
    truth.p = 0.0;
    let hist = synth_g2_histogram(&truth, 0.1, 100.0, 21);
    let norm = normalize_g2(&hist, (50.0, 100.0), 2.0).unwrap();
    let fit = fit_g2(&norm, &truth.irf, &G2FitConfig::default()).unwrap();
    assert!(
        (fit.g2_zero - 1.0).abs() <= 3.0 * fit.g2_zero_sigma.max(0.02),
        "g2(0) {} (sigma {})",
        fit.g2_zero,
        fit.g2_zero_sigma
    );
}

#[test]
fn time_shift_equivariance() {
    // Shifting the bin centers and the response location by the same delta
    // must shift t0 and leave the physical parameters unchanged. Fitting
    // the full histogram keeps the selected bin subset identical.
    let truth = paper_stream(0);
    let hist = synth_g2_histogram(&truth, 0.1, 100.0, 31);
    let norm = normalize_g2(&hist, (50.0, 100.0), 2.0).unwrap();
    let cfg = G2FitConfig {
        fit_window_ns: 1.0e4,
        ..G2FitConfig::default()
    };
    let fit0 = fit_g2(&norm, &truth.irf, &cfg).unwrap();

    let delta = 1.7;
    let shifted = CorrelationHistogram::from_start(
        hist.bin_centers_ns()[0] + delta,
        hist.bin_width_ns(),
        hist.counts().to_vec(),
    )
    .unwrap();
    let mut irf_shifted = truth.irf;
    irf_shifted.location_ns += delta;
    let mut norm_shifted = norm.clone();
    norm_shifted.tau_ns = shifted.bin_centers_ns().to_vec();
    let fit1 = fit_g2(&norm_shifted, &irf_shifted, &cfg).unwrap();

    // t0 is relative to the response's absolute time axis, so the physical
    // dip position t0 + location is what shifts by delta.
    let dip0 = fit0.t0_ns + truth.irf.location_ns;
    let dip1 = fit1.t0_ns + irf_shifted.location_ns;
    assert!(
        (dip1 - dip0 - delta).abs() < 1e-6,
        "dip {} vs {} + {delta}",
        dip1,
        dip0
    );
    assert!((fit1.p - fit0.p).abs() < 1e-6, "p {} vs {}", fit1.p, fit0.p);
    assert!(
        (fit1.tau1_ns - fit0.tau1_ns).abs() < 1e-6,
        "tau1 {} vs {}",
        fit1.tau1_ns,
        fit0.tau1_ns
    );
}

#[test]
fn lifetime_fit_recovers_paper_scale_truth() {
    let truth = scenarios::paper_lifetime();
    let hist = synth_decay_histogram(&truth, 0.1, 0.0, 45.0, derive_seed(600, 0));
    let fit = fit_lifetime(&hist, &truth.irf, &LifetimeFitConfig::default()).unwrap();
    assert!(fit.fit.converged);
    assert!(
        (fit.tau1_ns - truth.tau1_ns).abs() <= 3.0 * fit.tau1_sigma_ns,
        "tau1 {} vs {} (sigma {})",
        fit.tau1_ns,
        truth.tau1_ns,
        fit.tau1_sigma_ns
    );
    assert!(fit.tau1_sigma_ns <= 0.05, "sigma {}", fit.tau1_sigma_ns);
}

#[test]
fn lifetime_fit_is_exact_on_noiseless_delta_irf_decay() {
    let irf = IrfModel::new(0.0, 0.003, 0.0).unwrap();
    let truth = DecayTruth {
        tau1_ns: 1.954,
        t0_ns: 8.0,
        irf,
        amplitude: 500.0,
        baseline: 2.0,
    };
    let grid = TimeGrid {
        start_ns: 0.0,
        step_ns: 0.1,
        n: 451,
    };
    let counts = decay_expectation(&truth, &grid);
    let hist = CorrelationHistogram::from_start(0.0, 0.1, counts).unwrap();
    let fit = fit_lifetime(&hist, &irf, &LifetimeFitConfig::default()).unwrap();
    assert!(
        (fit.tau1_ns - truth.tau1_ns).abs() / truth.tau1_ns < 1e-6,
        "tau1 {} vs {}",
        fit.tau1_ns,
        truth.tau1_ns
    );
}

#[test]
fn sparse_lifetime_widens_sigma_but_stays_covered() {
    let truth = scenarios::sparse_lifetime();
    let dense = scenarios::paper_lifetime();
    let hist = synth_decay_histogram(&truth, 0.1, 0.0, 45.0, derive_seed(700, 1));
    let fit = fit_lifetime(&hist, &truth.irf, &LifetimeFitConfig::default()).unwrap();
    assert!(
        (fit.tau1_ns - truth.tau1_ns).abs() <= 3.0 * fit.tau1_sigma_ns,
        "tau1 {} vs {} (sigma {})",
        fit.tau1_ns,
        truth.tau1_ns,
        fit.tau1_sigma_ns
    );
    assert!(fit.tau1_sigma_ns <= 0.6, "sigma {}", fit.tau1_sigma_ns);

    let hist_dense = synth_decay_histogram(&dense, 0.1, 0.0, 45.0, derive_seed(700, 2));
    let fit_dense = fit_lifetime(&hist_dense, &dense.irf, &LifetimeFitConfig::default()).unwrap();
    assert!(
        fit.tau1_sigma_ns > fit_dense.tau1_sigma_ns,
        "sparse sigma {} should exceed dense sigma {}",
        fit.tau1_sigma_ns,
        fit_dense.tau1_sigma_ns
    );
}

#[test]
fn decay_log_slope_matches_lifetime() {
    // Huge counts, near-delta response: the log-linear tail slope is -1/tau1.
    let irf = IrfModel::new(0.0, 0.002, 0.0).unwrap();
    let truth = DecayTruth {
        tau1_ns: 1.954,
        t0_ns: 2.0,
        irf,
        amplitude: 1.0e7,
        baseline: 0.0,
    };
    let hist = synth_decay_histogram(&truth, 0.1, 0.0, 30.0, 77);
    let t = hist.bin_centers_ns();
    let c = hist.counts();
    // Regress ln(counts) on t over a clean stretch of the tail.
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..t.len() {
        if t[i] > 3.0 && t[i] < 15.0 && c[i] > 0.0 {
            let y = c[i].ln();
            sx += t[i];
            sy += y;
            sxx += t[i] * t[i];
            sxy += t[i] * y;
            n += 1.0;
        }
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let tau = -1.0 / slope;
    assert!(
        (tau - truth.tau1_ns).abs() / truth.tau1_ns < 1e-3,
        "tau {tau} vs {}",
        truth.tau1_ns
    );
}

#[test]
fn short_decay_histogram_matches_irf_shape() {
    // tau1 far below the bin width: the histogram reproduces the response.
    let irf = IrfModel::new(5.0, 0.5, 3.0).unwrap();
    let grid = TimeGrid {
        start_ns: 0.0,
        step_ns: 0.1,
        n: 101,
    };
    let truth = DecayTruth::with_peak_counts(1e-4, 0.0, irf, 1.0e5, 0.0, &grid);
    let hist = synth_decay_histogram(&truth, 0.1, 0.0, 10.0, 13);
    let peak_irf = grid
        .points()
        .iter()
        .map(|&t| skew_gaussian_density(t, &irf))
        .fold(0.0_f64, f64::max);
    for (i, &t) in hist.bin_centers_ns().iter().enumerate() {
        let expected = 1.0e5 * skew_gaussian_density(t, &irf) / peak_irf;
        let err = (hist.counts()[i] - expected).abs();
        // A few percent of shape slack covers the sub-tap smearing of the
        // delta-lifetime limit on the steep flanks.
        assert!(
            err <= 5.0 * expected.sqrt() + 10.0 + 0.04 * expected,
            "bin {i}: {} vs {expected}",
            hist.counts()[i]
        );
    }
}

#[test]
fn synth_expectations_reuse_production_evaluators() {
    // The generator's expectation curve must match the fit model evaluated
    // at the truth parameters bin by bin.
    let truth = paper_stream(0);
    let grid = TimeGrid {
        start_ns: -50.0,
        step_ns: 0.1,
        n: 1001,
    };
    let expectation = synth::g2_expectation(&truth, &grid);
    let direct = convolve_with_irf(
        |t| g2_ideal(t - truth.t0_ns, truth.p, truth.tau1_ns),
        &truth.irf,
        &grid,
        10,
    )
    .unwrap();
    for (a, b) in expectation.iter().zip(&direct) {
        assert_eq!(*a, b * truth.tail_counts);
    }
}
