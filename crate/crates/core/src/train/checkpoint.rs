use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use super::{curve_csv, Adam, EpochRecord, TrainError, TrainState, CURVE_HEADER};
use crate::model::{Model, ModelConfig};
use crate::npy::{read_npy_file, write_npy_file, NpyArray};

pub const STATE_FILE: &str = "state.txt";
pub const MODEL_FILE: &str = "model.toml";
pub const CURVE_FILE: &str = "curve.csv";
const OPTIMIZER_DIR: &str = "optimizer";

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

/// Writes parameters (`index.txt` + one NPY each), Adam moments under
/// `optimizer/`, `state.txt`, `model.toml` and `curve.csv` into `dir`.
pub fn save_checkpoint(state: &TrainState, dir: impl AsRef<Path>) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    state.model.params.save_dir(dir)?;
    let opt_dir = dir.join(OPTIMIZER_DIR);
    std::fs::create_dir_all(&opt_dir)?;
    let opt = &state.optimizer;
    for p in state.model.params.learnable() {
        for (suffix, moments) in [("m", &opt.m), ("v", &opt.v)] {
            let path = opt_dir.join(format!("{}.{suffix}.npy", p.name));
            let data = moments.get(&p.name).ok_or_else(|| bad(format!("no moment for {}", p.name)))?.clone();
            write_npy_file(&path, &NpyArray::new(p.shape.clone(), data)).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "step={}", state.step);
    let _ = writeln!(s, "epoch={}", state.epoch);
    let _ = writeln!(s, "seed={}", state.seed);
    let _ = writeln!(s, "epoch_loss_sum={:?}", state.epoch_loss_sum);
    let _ = writeln!(s, "lr={:?}", opt.lr);
    let _ = writeln!(s, "beta1={:?}", opt.beta1);
    let _ = writeln!(s, "beta2={:?}", opt.beta2);
    let _ = writeln!(s, "eps={:?}", opt.eps);
    let _ = writeln!(s, "adam_t={}", opt.t);
    std::fs::write(dir.join(STATE_FILE), s)?;
    std::fs::write(dir.join(MODEL_FILE), state.model.config().to_toml())?;
    std::fs::write(dir.join(CURVE_FILE), curve_csv(&state.history))?;
    Ok(())
}

fn parse_curve(text: &str) -> Result<Vec<EpochRecord>, TrainError> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(bad("curve.csv header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("curve row `{l}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("curve value `{s}`")));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(format!("curve epoch `{}`", f[0])))?,
                loss: num(f[1])?,
                avg_nrmse: num(f[2])?,
                avg_ssim: num(f[3])?,
                auc: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            })
        })
        .collect()
}

/// Restores a state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainState, TrainError> {
    let dir = dir.as_ref();
    let config = ModelConfig::from_toml(&std::fs::read_to_string(dir.join(MODEL_FILE))?)?;
    let mut model = Model::new(&config, 0)?;
    model.params.load_into(dir)?;

    let text = std::fs::read_to_string(dir.join(STATE_FILE))?;
    let kv: IndexMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("state.txt lacks `{k}`")));
    let int = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(format!("state.txt `{k}`")));
    let float = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(format!("state.txt `{k}`")));

    let mut optimizer = Adam::new(&model.params, float("lr")?, float("beta1")?, float("beta2")?, float("eps")?);
    optimizer.t = int("adam_t")?;
    let opt_dir = dir.join(OPTIMIZER_DIR);
    for p in model.params.learnable() {
        for (suffix, moments) in [("m", &mut optimizer.m), ("v", &mut optimizer.v)] {
            let path = opt_dir.join(format!("{}.{suffix}.npy", p.name));
            let arr = read_npy_file(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
            if arr.shape != p.shape {
                return Err(bad(format!("{}: shape {:?}, expected {:?}", path.display(), arr.shape, p.shape)));
            }
            moments.insert(p.name.clone(), arr.data);
        }
    }
    let history = match std::fs::read_to_string(dir.join(CURVE_FILE)) {
        Ok(t) => parse_curve(&t)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    Ok(TrainState {
        model,
        optimizer,
        step: int("step")?,
        epoch: int("epoch")?,
        seed: int("seed")?,
        epoch_loss_sum: float("epoch_loss_sum")?,
        history,
    })
}
