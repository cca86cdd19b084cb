//! Finite-difference validation of the backward pass. The acceptance suite
//! runs the wide sweep; these tests pin the named cases.

mod common;

use common::{
    assert_grads_agree, config_with, fd_mask_grad, fd_param_grad, random_example, seeded,
};
use maskmerge::grad::{mask_grad, param_grad};
use maskmerge::model::{Checkpoint, Example};

// The spec'd case: L=1, H=1, D=2, random weights, one example; every mask
// gradient entry agrees with central finite differences.
#[test]
fn tiny_model_mask_gradients_match_finite_differences() {
    let cfg = config_with(1, 1, 4, 2, &[("t", 2)]);
    let ckpt = Checkpoint::init_random(&cfg, 21).unwrap();
    let example = Example { tokens: vec![1, 5, 9], label: 1, task_id: "t".into() };

    let analytic = mask_grad(&ckpt, &example).unwrap();
    let (fd_mha, fd_mlp) = fd_mask_grad(&ckpt, &example);
    for (i, (&a, &n)) in analytic.g_mha.data().iter().zip(fd_mha.data()).enumerate() {
        assert_grads_agree(a, n, &format!("m_mha[{i}]"));
    }
    for (i, (&a, &n)) in analytic.g_mlp.data().iter().zip(fd_mlp.data()).enumerate() {
        assert_grads_agree(a, n, &format!("m_mlp[{i}]"));
    }
    // sanity: gradients are not trivially zero
    assert!(analytic.g_mha.data().iter().any(|&v| v.abs() > 1e-8));
}

#[test]
fn tiny_model_param_gradients_match_finite_differences() {
    let cfg = config_with(1, 1, 4, 2, &[("t", 2)]);
    let mut ckpt = Checkpoint::init_random(&cfg, 22).unwrap();
    let example = Example { tokens: vec![0, 7], label: 0, task_id: "t".into() };

    let analytic = param_grad(&ckpt, &example).unwrap();
    let names: Vec<String> = analytic.grads.keys().cloned().collect();
    for name in names {
        let fd = fd_param_grad(&mut ckpt, &example, &name);
        for (i, (&a, &n)) in analytic.grads[&name].data().iter().zip(fd.data()).enumerate() {
            assert_grads_agree(a, n, &format!("{name}[{i}]"));
        }
    }
}

// Largest config in the contract envelope: L=2, H=2, D=4, d_model=8.
#[test]
fn contract_envelope_model_gradients_match_finite_differences() {
    let cfg = config_with(2, 2, 4, 4, &[("t", 3)]);
    let mut ckpt = Checkpoint::init_random(&cfg, 23).unwrap();
    let mut rng = seeded(23);

    for trial in 0..3 {
        let example = random_example(&cfg, "t", &mut rng);
        let analytic_masks = mask_grad(&ckpt, &example).unwrap();
        let (fd_mha, fd_mlp) = fd_mask_grad(&ckpt, &example);
        for (i, (&a, &n)) in analytic_masks.g_mha.data().iter().zip(fd_mha.data()).enumerate() {
            assert_grads_agree(a, n, &format!("trial {trial} m_mha[{i}]"));
        }
        for (i, (&a, &n)) in analytic_masks.g_mlp.data().iter().zip(fd_mlp.data()).enumerate() {
            assert_grads_agree(a, n, &format!("trial {trial} m_mlp[{i}]"));
        }

        let analytic = param_grad(&ckpt, &example).unwrap();
        // spot-check a representative parameter from every block kind
        for name in [
            "embeddings.token",
            "embeddings.position",
            "layers.0.attn.head.1.q.weight",
            "layers.1.attn.head.0.k.bias",
            "layers.0.attn.head.0.v.weight",
            "layers.1.attn.out.weight",
            "layers.0.attn.norm.gain",
            "layers.1.mlp.norm.bias",
            "layers.1.mlp.w1",
            "layers.0.mlp.b1",
            "layers.0.mlp.w2",
            "layers.1.mlp.b2",
            "heads.t.weight",
        ] {
            let fd = fd_param_grad(&mut ckpt, &example, name);
            for (i, (&a, &n)) in analytic.grads[name].data().iter().zip(fd.data()).enumerate() {
                assert_grads_agree(a, n, &format!("trial {trial} {name}[{i}]"));
            }
        }
    }
}
