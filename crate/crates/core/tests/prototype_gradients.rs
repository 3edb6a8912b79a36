//! Finite-difference checks of both prototype losses through a small feature map.

use dmmia_core::numerics::{gradcheck, Rng, Tensor};
use dmmia_core::prototypes::{idr_loss, imr_loss, IdrBank};

#[test]
fn imr_loss_gradients_in_features_and_prototypes() {
    for point in 0..10 {
        let mut rng = Rng::derive(31, point);
        let feats: Tensor = rng.normal_tensor(vec![3, 8], 1.0).unwrap();
        let w: Tensor = rng.normal_tensor(vec![6, 8], 0.5).unwrap();
        let report = gradcheck::check(&[feats, w], 1e-5, |g, v| imr_loss(g, v[0], v[1], 2)).unwrap();
        assert!(report.max_relative_error <= 1e-4, "point {point}: {}", report.max_relative_error);
    }
}

#[test]
fn idr_loss_gradient_reaches_features_only() {
    for point in 0..10 {
        let mut rng = Rng::derive(32, point);
        let z: Tensor = rng.normal_tensor(vec![4, 5], 1.0).unwrap();
        let proj: Tensor = rng.normal_tensor(vec![5, 8], 0.4).unwrap();
        let mut bank = IdrBank::new(5, 8, 0.7).unwrap();
        let mem: Tensor = rng.normal_tensor(vec![5, 8], 1.0).unwrap();
        bank.memory_update(&mem, &[0, 1, 2, 3, 4]).unwrap();
        let m = bank.m().clone();
        let report = gradcheck::check(&[z, proj], 1e-5, |g, v| {
            let f = g.matmul(v[0], v[1])?;
            let f = g.tanh(f)?;
            let mv = g.constant(m.clone())?;
            let loss = idr_loss(g, f, mv, 3)?;
            assert!(g.grad(mv).is_none());
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "point {point}: {}", report.max_relative_error);
    }
}
