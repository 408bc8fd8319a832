mod common;

use cnav_core::tensor::ParamStore;
use cnav_core::trainer::{batch_loss_and_grad, loss_current, loss_fr, loss_kd, BatchItem, CurrentItem, LossSetup};
use common::{gradient_fixture, loss_gradient_errors, FD_TOL};

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, err) in loss_gradient_errors() {
        assert!(err < FD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn kd_vanishes_against_itself() {
    let f = gradient_fixture();
    for e in [1, 2] {
        assert_eq!(loss_kd(&f.params, &f.params, &f.demos[0], e).unwrap(), 0.0);
    }
    let d1 = loss_kd(&f.old, &f.params, &f.demos[0], 1).unwrap();
    let d2 = loss_kd(&f.old, &f.params, &f.demos[0], 2).unwrap();
    assert!(d1 > 0.0 && d2 > 0.0);
}

#[test]
fn batch_components_match_standalone_losses() {
    let f = gradient_fixture();
    let item = CurrentItem {
        demo: f.demos[0].clone(),
        old_features: None,
        old_probs: None,
    };
    let setup = LossSetup {
        gamma: 3.48,
        lambda_kd: 5.0,
        lambda_fr: 5.0,
        kd_exponent: 2,
        lwf_coefficient: 0.2,
    };
    let items = [BatchItem::Current(&item), BatchItem::Replay(&f.entry)];
    let (c, _) = batch_loss_and_grad(&f.params, &items, &setup).unwrap();
    assert_eq!(c.curr, loss_current(&f.params, &f.demos[0], 3.48).unwrap());
    assert_eq!(c.fr, loss_fr(&f.params, &f.entry).unwrap());
    assert_eq!(c.kd, 0.0);
    assert!((c.total - (c.curr + 5.0 * c.fr)).abs() < 1e-12);
}

#[test]
fn replay_loss_ignores_projector_parameters() {
    let f = gradient_fixture();
    let mut moved: ParamStore = f.params.clone();
    let names: Vec<String> = moved.names().filter(|n| n.starts_with("encoder.")).map(String::from).collect();
    assert!(!names.is_empty());
    for n in names {
        moved.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    assert_eq!(loss_fr(&moved, &f.entry).unwrap(), loss_fr(&f.params, &f.entry).unwrap());
}
