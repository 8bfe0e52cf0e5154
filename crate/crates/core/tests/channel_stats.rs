use fusionpos::channel::{synthesize_channel, ChannelConfig, CsiMatrix, LsEstimator, PilotBlock};
use fusionpos::geometry::WorldCoord2D;
use fusionpos::rng::task_rng;
use nalgebra::DMatrix;
use num_complex::Complex64;

fn config(np: usize, sigma: f64) -> ChannelConfig {
    ChannelConfig {
        n_antennas: 4,
        n_subcarriers: 8,
        n_pilot_symbols: np,
        carrier_spacing: 1.0e6,
        antenna_spacing: 0.5,
        n_paths: 3,
        noise_std: sigma,
        scatterer_seed: 5,
        scatter_cell_size: 20.0,
        reference_distance: 10.0,
        noise_covariance: None,
    }
}

fn truth(cfg: &ChannelConfig) -> CsiMatrix {
    synthesize_channel(WorldCoord2D::new(0.0, -10.0), WorldCoord2D::new(25.0, 3.0), cfg)
}

/// Per-entry mean squared error and the entry-wise mean error.
fn empirical(cfg: &ChannelConfig, pilot: &PilotBlock, trials: u64) -> (f64, Complex64) {
    let est = LsEstimator::new(pilot).unwrap();
    let h = truth(cfg);
    let mut mse = 0.0;
    let mut bias = Complex64::new(0.0, 0.0);
    for t in 0..trials {
        let e = est.estimate(&h, &mut task_rng(1, &[t])).unwrap();
        let d = &e.entries - &h.entries;
        mse += d.iter().map(|z| z.norm_sqr()).sum::<f64>();
        bias += d.iter().sum::<Complex64>();
    }
    let n = (trials as usize * h.entries.len()) as f64;
    (mse / n, bias / n)
}

/// Error covariance of the LS estimate: pinv * Sigma * pinv^H, averaged over
/// its diagonal. Written out from `A` directly rather than through the
/// estimator.
fn oracle_mse(pilot: &PilotBlock) -> f64 {
    let a = pilot.observation_matrix();
    let gram_inv = (a.adjoint() * &a).try_inverse().unwrap();
    let pinv = gram_inv * a.adjoint();
    let sigma = pilot.noise_cov.map(|x| Complex64::new(x, 0.0));
    let cov = &pinv * sigma * pinv.adjoint();
    cov.diagonal().iter().map(|z| z.re).sum::<f64>() / a.ncols() as f64
}

#[test]
fn white_noise_mse_matches_closed_form() {
    let sigma = 0.1;
    let cfg = config(16, sigma);
    let pilot = PilotBlock::from_config(&cfg).unwrap();
    // unit-modulus orthogonal pilots behind an equal-gain beam: A^H A = (N^P / N^B) I
    let closed = sigma * sigma * 4.0 / 16.0;
    assert!((oracle_mse(&pilot) - closed).abs() < 1e-15);
    let (mse, bias) = empirical(&cfg, &pilot, 4000);
    assert!((mse / closed - 1.0).abs() < 0.03, "mse {mse} vs {closed}");
    assert!(bias.norm() < 4.0 * (closed / (4000.0 * 32.0)).sqrt(), "bias {bias}");
}

#[test]
fn doubling_pilots_halves_the_error() {
    let sigma = 0.2;
    let (m1, _) = empirical(&config(8, sigma), &PilotBlock::from_config(&config(8, sigma)).unwrap(), 3000);
    let (m2, _) = empirical(&config(16, sigma), &PilotBlock::from_config(&config(16, sigma)).unwrap(), 3000);
    assert!((m1 / m2 - 2.0).abs() < 0.1, "{m1} / {m2}");
}

#[test]
fn coloured_noise_follows_the_covariance_oracle() {
    let np = 8;
    let mut cov = DMatrix::<f64>::zeros(np, np);
    for i in 0..np {
        for j in 0..np {
            cov[(i, j)] = 0.01 * 0.6f64.powi((i as i32 - j as i32).abs()) * (1.0 + 0.2 * i as f64);
        }
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    let mut cfg = config(np, 0.0);
    cfg.noise_covariance = Some(cov.transpose().iter().copied().collect());
    let pilot = PilotBlock::from_config(&cfg).unwrap();
    let (mse, _) = empirical(&cfg, &pilot, 4000);
    let o = oracle_mse(&pilot);
    assert!((mse / o - 1.0).abs() < 0.04, "mse {mse} oracle {o}");
}

#[test]
fn nearby_positions_are_more_correlated_than_distant_ones() {
    let cfg = config(8, 0.0);
    let bs = WorldCoord2D::new(50.0, -12.0);
    let mut near = 0.0;
    let mut far = 0.0;
    let n = 40;
    for k in 0..n {
        let p = WorldCoord2D::new(20.0 + 3.0 * k as f64, (k % 5) as f64 - 2.0);
        let h = synthesize_channel(bs, p, &cfg);
        near += h.correlation(&synthesize_channel(bs, p + WorldCoord2D::new(0.05, 0.0), &cfg));
        far += h.correlation(&synthesize_channel(bs, p + WorldCoord2D::new(30.0, 4.0), &cfg));
    }
    assert!(near / n as f64 > 0.9, "near {}", near / n as f64);
    assert!(far < near * 0.8, "far {far} near {near}");
}
