mod common;

use dictbench::sae::{sae_grad, sae_loss, train_sae, SaeParams, TrainConfig};
use ndarray::{Array2, ArrayViewMutD};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_params(n: usize, m: usize, seed: u64) -> (SaeParams, Array2<f64>) {
    let mut p = SaeParams::init(n, m, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    p.b_enc.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    p.b_dec.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let batch = Array2::from_shape_simple_fn((5, n), || rng.sample::<f64, _>(StandardNormal));
    (p, batch)
}

fn min_abs_preactivation(p: &SaeParams, batch: &Array2<f64>) -> f64 {
    let pre = (batch - &p.b_dec).dot(&p.w_enc.t()) + &p.b_enc;
    pre.iter().fold(f64::INFINITY, |a, &x| a.min(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn codes_are_nonnegative(n in 1usize..8, m in 1usize..16, seed in any::<u64>()) {
        let (p, batch) = random_params(n, m, seed);
        prop_assert!(p.encode(batch.view()).iter().all(|&f| f >= 0.0));
    }

    #[test]
    fn gradient_matches_central_differences(n in 2usize..6, m in 2usize..8, seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let (p, batch) = random_params(n, m, seed);
        prop_assume!(min_abs_preactivation(&p, &batch) > 1e-6);
        let g = sae_grad(&p, batch.view(), lambda, false).unwrap();
        let h = 1e-8;
        let loss = |q: &SaeParams| sae_loss(q, batch.view(), lambda).unwrap().total;
        let grads = [g.w_enc.into_dyn(), g.b_enc.into_dyn(), g.w_dec.into_dyn(), g.b_dec.into_dyn()];
        for (slot, analytic) in grads.iter().enumerate() {
            let mut fd = analytic.clone();
            for idx in 0..analytic.len() {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let view: ArrayViewMutD<f64> = match slot {
                        0 => q.w_enc.view_mut().into_dyn(),
                        1 => q.b_enc.view_mut().into_dyn(),
                        2 => q.w_dec.view_mut().into_dyn(),
                        _ => q.b_dec.view_mut().into_dyn(),
                    };
                    let mut view = view;
                    *view.iter_mut().nth(idx).unwrap() += delta;
                    loss(&q)
                };
                *fd.iter_mut().nth(idx).unwrap() = (bump(h) - bump(-h)) / (2.0 * h);
            }
            let err = (&fd - analytic).mapv(|x| x * x).sum().sqrt();
            let scale = analytic.mapv(|x| x * x).sum().sqrt().max(1e-3);
            prop_assert!(err / scale <= 1e-4, "slot {slot}: {}", err / scale);
        }
    }

    #[test]
    fn training_keeps_unit_decoder_columns(seed in any::<u64>(), epochs in 1usize..4, lambda in 0.0f64..0.5) {
        let ds = common::random_dataset(120, 6, &[2], seed);
        let config = TrainConfig { epochs, lambda, expansion: 2, batch_size: 32, lr: 3e-3, seed, ..TrainConfig::default() };
        let out = train_sae(&ds, &config).unwrap();
        for col in out.params.w_dec.columns() {
            prop_assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-9);
        }
        let again = train_sae(&ds, &config).unwrap();
        prop_assert_eq!(out.params, again.params);
    }
}
