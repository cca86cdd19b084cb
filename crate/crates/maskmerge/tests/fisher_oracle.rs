//! Fisher estimates cross-checked against hand-composed finite-difference
//! gradients, plus the directional runtime property.

mod common;

use std::time::Instant;

use common::{config_with, fd_mask_grad, fd_param_grad};
use maskmerge::fisher::{estimate_full_fisher, estimate_mask_fisher};
use maskmerge::model::{Checkpoint, Example};

fn close(analytic: f64, oracle: f64, rel: f64, floor: f64) -> bool {
    let err = (analytic - oracle).abs();
    err <= floor || err / analytic.abs().max(oracle.abs()) <= rel
}

// Four hand-enumerated examples; the estimate must equal the mean of the
// four squared finite-difference mask gradients.
#[test]
fn mask_fisher_matches_mean_of_squared_fd_gradients() {
    let cfg = config_with(1, 1, 4, 2, &[("t", 2)]);
    let ckpt = Checkpoint::init_random(&cfg, 41).unwrap();
    let data = vec![
        Example { tokens: vec![1, 2, 3], label: 0, task_id: "t".into() },
        Example { tokens: vec![4, 4, 0], label: 1, task_id: "t".into() },
        Example { tokens: vec![9, 12, 7], label: 1, task_id: "t".into() },
        Example { tokens: vec![5, 0], label: 0, task_id: "t".into() },
    ];

    let mf = estimate_mask_fisher(&ckpt, &data, 4).unwrap();

    let fd: Vec<_> = data.iter().map(|ex| fd_mask_grad(&ckpt, ex)).collect();
    for idx in 0..mf.f_mha.numel() {
        let oracle: f64 = fd.iter().map(|(mha, _)| mha.data()[idx].powi(2)).sum::<f64>() / 4.0;
        assert!(
            close(mf.f_mha.data()[idx], oracle, 1e-5, 1e-12),
            "f_mha[{idx}]: {} vs {oracle}",
            mf.f_mha.data()[idx]
        );
    }
    for idx in 0..mf.f_mlp.numel() {
        let oracle: f64 = fd.iter().map(|(_, mlp)| mlp.data()[idx].powi(2)).sum::<f64>() / 4.0;
        assert!(
            close(mf.f_mlp.data()[idx], oracle, 1e-5, 1e-12),
            "f_mlp[{idx}]: {} vs {oracle}",
            mf.f_mlp.data()[idx]
        );
    }
}

#[test]
fn full_fisher_matches_fd_oracle_within_1e5_relative() {
    let cfg = config_with(1, 1, 4, 2, &[("t", 2)]);
    let mut ckpt = Checkpoint::init_random(&cfg, 42).unwrap();
    let data = vec![
        Example { tokens: vec![2, 6], label: 1, task_id: "t".into() },
        Example { tokens: vec![11, 3, 8], label: 0, task_id: "t".into() },
    ];

    let ff = estimate_full_fisher(&ckpt, &data, 2).unwrap();
    let names: Vec<String> = ff.fisher.keys().cloned().collect();
    for name in names {
        let fd: Vec<_> = data
            .iter()
            .map(|ex| fd_param_grad(&mut ckpt, ex, &name))
            .collect();
        for idx in 0..ff.fisher[&name].numel() {
            let oracle: f64 = fd.iter().map(|g| g.data()[idx].powi(2)).sum::<f64>() / 2.0;
            assert!(
                close(ff.fisher[&name].data()[idx], oracle, 1e-5, 1e-12),
                "{name}[{idx}]: {} vs {oracle}",
                ff.fisher[&name].data()[idx]
            );
        }
    }
}

// Directional only: estimation cost grows with n, roughly linearly. The
// bounds are deliberately loose so scheduler noise cannot flip the verdict.
#[test]
fn mask_fisher_cost_grows_linearly_in_n() {
    let cfg = config_with(2, 2, 4, 8, &[("t", 2)]);
    let ckpt = Checkpoint::init_random(&cfg, 43).unwrap();
    let data: Vec<Example> = (0..192)
        .map(|i| Example {
            tokens: vec![i % 13, (i * 3 + 1) % 13, (i * 7 + 2) % 13, i % 5],
            label: i % 2,
            task_id: "t".into(),
        })
        .collect();

    let time_n = |n: usize| -> f64 {
        let mut times: Vec<f64> = (0..5)
            .map(|_| {
                let t = Instant::now();
                estimate_mask_fisher(&ckpt, &data, n).unwrap();
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times[2]
    };
    // warm-up
    estimate_mask_fisher(&ckpt, &data, 8).unwrap();

    let t_small = time_n(16);
    let t_large = time_n(192);
    let ratio = t_large / t_small;
    assert!(
        ratio > 2.0 && ratio < 80.0,
        "12x more samples changed wall-clock by {ratio:.1}x"
    );
}
