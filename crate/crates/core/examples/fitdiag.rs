use mfa_core::image::ImageGrid;
use mfa_core::psf::fit_sigma_to_point_source;
use mfa_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let normal = Normal::new(0.0, 10.0).unwrap();
    let (mut ok_in, mut ok_out, mut nc, mut other) = (0, 0, 0, 0);
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = ImageGrid::from_fn(33, 33, |row, col| {
            let r2 = (col as f64 - 16.0).powi(2) + (row as f64 - 16.0).powi(2);
            100.0 * (-r2 / 8.0).exp()
        });
        let noisy = ImageGrid::from_fn(33, 33, |i, j| clean.at(i, j) + normal.sample(&mut rng));
        match fit_sigma_to_point_source(&noisy) {
            Ok(fit) => {
                let err = (fit.sigma - 2.0).abs();
                worst = worst.max(err);
                if err <= 0.1 { ok_in += 1 } else { ok_out += 1; eprintln!("seed {seed}: sigma {}", fit.sigma); }
            }
            Err(Error::FitNotConverged { sigma, .. }) => { nc += 1; eprintln!("seed {seed}: NC sigma {sigma}"); }
            Err(e) => { other += 1; eprintln!("seed {seed}: {e}"); }
        }
    }
    eprintln!("in: {ok_in}, out: {ok_out}, not-converged: {nc}, other: {other}, worst {worst}");
}
