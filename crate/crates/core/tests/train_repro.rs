use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ibunet_core::synth::SynthProfile;
use ibunet_core::train::{load_checkpoint, save_checkpoint, train};
use ibunet_core::{InMemoryDataset, Model, ModelConfig, Task, TrainConfig, TrainState};

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn setup(task: Task) -> (InMemoryDataset, ModelConfig, TrainConfig) {
    let data = InMemoryDataset::synthetic(task, &SynthProfile::tiny(), 0..4).unwrap();
    let model = ModelConfig::ibunet(task).with_base_width(4);
    let cfg = TrainConfig { batch_size: 2, iterations_per_epoch: 3, epochs: 2, learning_rate: 1e-3, seed: 9, ..TrainConfig::default() };
    (data, model, cfg)
}

fn run(task: Task, dir: &Path) -> Vec<f64> {
    let (data, mc, mut cfg) = setup(task);
    cfg.checkpoint_dir = Some(dir.to_path_buf());
    let mut state = TrainState::new(Model::new(&mc, cfg.seed).unwrap(), &cfg);
    let out = train(&mut state, &data, None, &cfg, |_, _| {}).unwrap();
    save_checkpoint(&state, dir).unwrap();
    out.step_losses
}

#[test]
fn identical_runs_give_bit_identical_checkpoints() {
    for task in [Task::Rc, Task::Drc] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let la = run(task, a.path());
        let lb = run(task, b.path());
        assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let (fa, fb) = (files(a.path()), files(b.path()));
        assert!(fa.len() > 10);
        assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
        for (k, v) in &fa {
            assert!(v == &fb[k], "{task}: {} differs", k.display());
        }
    }
}

#[test]
fn resume_matches_unbroken_run_step_for_step() {
    let (data, mc, cfg) = setup(Task::Rc);
    let mut full = TrainState::new(Model::new(&mc, cfg.seed).unwrap(), &cfg);
    let unbroken = train(&mut full, &data, None, &cfg, |_, _| {}).unwrap().step_losses;
    assert_eq!(unbroken.len(), 6);

    for cut in [2u64, 3, 4] {
        let dir = tempfile::tempdir().unwrap();
        let mut first = TrainState::new(Model::new(&mc, cfg.seed).unwrap(), &cfg);
        let head = train(&mut first, &data, None, &TrainConfig { max_steps: Some(cut), ..cfg.clone() }, |_, _| {}).unwrap().step_losses;
        save_checkpoint(&first, dir.path()).unwrap();
        drop(first);
        let mut resumed = load_checkpoint(dir.path()).unwrap();
        assert_eq!(resumed.step, cut);
        let tail = train(&mut resumed, &data, None, &cfg, |_, _| {}).unwrap().step_losses;
        let joined: Vec<u64> = head.iter().chain(&tail).map(|v| v.to_bits()).collect();
        assert_eq!(joined, unbroken.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), "cut at {cut}");
        for (p, q) in resumed.model.params.iter().zip(full.model.params.iter()) {
            assert_eq!(p.name, q.name);
            assert!(p.data == q.data, "{} differs after resume at {cut}", p.name);
        }
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.optimizer.t, full.optimizer.t);
    }
}
