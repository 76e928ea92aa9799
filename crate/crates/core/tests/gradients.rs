//! Finite-difference checks of every differentiable op and of the model
//! compositions built from them.

mod support;

use drivewm::backbone::Frontend;
use drivewm::experts::DecoderKind;
use support::*;

#[test]
fn every_op_matches_central_differences_in_f64() {
    for op in ALL_OPS {
        let r = check_op::<f64>(op, TOL_F64);
        assert!(r.passed, "{op:?}: {r:?}");
    }
}

#[test]
fn every_op_matches_central_differences_in_f32() {
    for op in ALL_OPS {
        let r = check_op::<f32>(op, TOL_F32);
        assert!(r.passed, "{op:?}: {r:?}");
    }
}

#[test]
fn two_layer_backbone_discrete() {
    let (store, f) = mini_backbone(Frontend::Discrete);
    let r = check_model::<f64, _>(&f, &store, TOL_F64);
    assert!(r.passed, "f64: {r:?}");
    let r = check_model::<f32, _>(&f, &store, TOL_F32);
    assert!(r.passed, "f32: {r:?}");
}

#[test]
fn two_layer_backbone_continuous() {
    let (store, f) = mini_backbone(Frontend::Continuous);
    let r = check_model::<f64, _>(&f, &store, TOL_F64);
    assert!(r.passed, "f64: {r:?}");
}

#[test]
fn joint_attention_experts() {
    for (kind, on) in [
        (DecoderKind::Query, false),
        (DecoderKind::Query, true),
        (DecoderKind::Autoregressive, false),
        (DecoderKind::Flow, false),
    ] {
        let (store, f) = mini_expert(kind, on);
        let r = check_model::<f64, _>(&f, &store, TOL_F64);
        assert!(r.passed, "{kind:?} on={on}: {r:?}");
    }
}

#[test]
fn diffusion_world_model() {
    let (store, f) = mini_diffusion();
    let r = check_model::<f64, _>(&f, &store, TOL_F64);
    assert!(r.passed, "{r:?}");
}
