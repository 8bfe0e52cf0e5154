#![allow(dead_code)]

use fusionpos::assignment::CostMatrix;
use fusionpos::rng::TaskRng;
use rand::Rng;

/// Exhaustive minimum over injective maps from columns to rows.
pub fn brute_force_min(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, col: usize, used: &mut Vec<bool>) -> f64 {
        if col == c.n_cols {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..c.n_rows {
            if !used[r] {
                used[r] = true;
                best = best.min(c.get(r, col) + go(c, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    go(c, 0, &mut vec![false; c.n_rows])
}

/// Random `rows x cols` matrix; integer-valued when `ties` so that equal
/// optima are common.
pub fn random_cost(rng: &mut TaskRng, rows: usize, cols: usize, ties: bool) -> CostMatrix {
    let m: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| if ties { rng.random_range(0..5) as f64 } else { rng.random_range(0.0..100.0) })
                .collect()
        })
        .collect();
    CostMatrix::from_rows(&m).unwrap()
}

use fusionpos::config::ExperimentConfig;
use fusionpos::metatrain::{init_models, LrSchedule};
use fusionpos::posnet::{Activation, ArchSpec, ModelParams};
use fusionpos::scenario::{build_datasets, DatasetBundle, DatasetSizes, Simulator};

/// A few-second scenario: 4 x 8 CSI, a one-block network, small splits.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.channel.n_antennas = 4;
    cfg.channel.n_subcarriers = 8;
    cfg.channel.n_pilot_symbols = 8;
    cfg.arch = ArchSpec {
        n_residual_blocks: 1,
        conv_channels: vec![3],
        kernel_size: 3,
        fc_widths: vec![12, 2],
        activation: Activation::Tanh,
        input_antennas: 4,
        input_subcarriers: 8,
        input_scale: 1.0,
        output_scale: 1.0,
        output_offset: [80.0, 0.0],
    };
    cfg.sizes = DatasetSizes::from_labeled(30, 24, 8);
    cfg.train.pretrain_epochs = 20;
    cfg.train.pretrain_lr = LrSchedule::constant(3e-5);
    cfg.train.iterations = 20;
    cfg.train.em_batch = 4;
    cfg.train.em_lr = LrSchedule::constant(3e-5);
    cfg.train.sigma_period = 7;
    cfg
}

pub fn tiny_data(cfg: &ExperimentConfig) -> DatasetBundle {
    let sim = Simulator::new(cfg.world.clone(), cfg.channel.clone()).unwrap();
    build_datasets(&sim, cfg.sizes, cfg.seed).unwrap()
}

pub fn tiny_models(cfg: &ExperimentConfig) -> Vec<ModelParams> {
    init_models(&cfg.arch, cfg.world.n_bs(), cfg.seed).unwrap()
}

pub fn max_param_diff(a: &[ModelParams], b: &[ModelParams]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.params.iter().zip(&y.params).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
