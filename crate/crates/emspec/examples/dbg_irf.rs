use emspec::fit::{least_squares, FitOptions, ParamSpec};
use emspec::synth;
use emspec::timedomain::*;
use rand::SeedableRng;

fn main() {
    let truth = IrfModel::new(5.0, 0.5, 3.0).unwrap();
    let trial = 2u64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(90 + trial);
    let t: Vec<f64> = (0..101).map(|i| i as f64 * 0.1).collect();
    let counts: Vec<f64> = t.iter()
        .map(|&ti| synth::poisson_counts(&mut rng, 3.0e5 * 0.1 * skew_gaussian_density(ti, &truth)))
        .collect();
    // replicate fit_irf seeding manually with debug output on the optimum path
    let specs = vec![
        ParamSpec::bounded("amplitude", 3.0e4, 0.0, f64::INFINITY),
        ParamSpec::free("location", 4.8),
        ParamSpec::bounded("scale", 0.6, 1e-4, 1e4),
        ParamSpec::bounded("shape", 2.0, -30.0, 30.0),
    ];
    let model = |p: &[f64], x: &[f64], out: &mut [f64]| {
        let irf = IrfModel { location_ns: p[1], scale_ns: p[2], shape: p[3] };
        for (o, &ti) in out.iter_mut().zip(x) {
            *o = p[0] * skew_gaussian_density(ti, &irf);
        }
    };
    match least_squares(model, &t, &counts, None, &specs, &FitOptions::default()) {
        Ok(f) => println!("manual seed ok: {:?} iter {}", f.values, f.n_iter),
        Err(e) => println!("manual seed ERROR: {e}"),
    }
    match fit_irf(&CorrelationHistogram::from_start(0.0, 0.1, counts).unwrap()) {
        Ok(f) => println!("auto ok al {}", f.model.shape),
        Err(e) => println!("auto ERROR: {e}"),
    }
}
