use ibunet_core::model::gradcheck_model;
use ibunet_core::tensor::gradcheck::{check_op, OPS};
use ibunet_core::{Model, ModelConfig, Task};

#[test]
fn every_operator_passes_at_double_precision() {
    for seed in [0u64, 1, 2] {
        for name in OPS {
            let r = check_op(name, seed).unwrap();
            assert!(r.checked > 0, "{name}: nothing checked");
            assert!(r.passed(1e-4), "{name} seed {seed}: max rel err {:.3e}", r.max_rel_err);
        }
    }
}

#[test]
fn ibunet_end_to_end_on_32x32() {
    for task in [Task::Rc, Task::Drc] {
        let model = Model::new(&ModelConfig::ibunet(task), 3).unwrap();
        let r = gradcheck_model(&model, 2, 32, 150, 4).unwrap();
        assert!(r.checked >= 100, "{task}: only {} probes usable", r.checked);
        assert!(r.passed(1e-3), "{task}: max rel err {:.3e}", r.max_rel_err);
    }
}

#[test]
fn baseline_end_to_end_on_32x32() {
    let model = Model::new(&ModelConfig::baseline(Task::Rc).with_base_width(4), 3).unwrap();
    let r = gradcheck_model(&model, 2, 32, 100, 5).unwrap();
    assert!(r.passed(1e-3), "max rel err {:.3e}", r.max_rel_err);
}
