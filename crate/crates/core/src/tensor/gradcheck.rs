//! Central-difference gradient checking in double precision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NormMode, Tensor4, TensorError, Var};

/// Denominator floor for [`rel_err`].
pub const REL_FLOOR: f64 = 1e-6;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Probes dropped because the perturbation crossed a kink.
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// Which coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probes {
    All,
    /// `count` distinct coordinates drawn uniformly with the given seed.
    Sample { count: usize, seed: u64 },
}

fn eval<F>(f: &F, inputs: &[Tensor4<f64>]) -> Result<(f64, Option<u64>), TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.dims));
    }
    Ok((v.data[0], g.kink_fingerprint()))
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with respect to every input tensor. Probes whose `±step`
/// evaluations take a different piecewise branch than the base point are
/// skipped and counted.
pub fn check<F>(name: &str, inputs: &[Tensor4<f64>], step: f64, probes: Probes, f: F) -> Result<CheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let base_fp = g.kink_fingerprint();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut coords: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k))).collect();
    if let Probes::Sample { seed, .. } = probes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
    }
    let want = match probes {
        Probes::All => coords.len(),
        Probes::Sample { count, .. } => count.min(coords.len()),
    };

    let mut work: Vec<Tensor4<f64>> = inputs.to_vec();
    let mut report = CheckReport { name: name.to_string(), max_rel_err: 0.0, checked: 0, skipped: 0 };
    for (i, k) in coords {
        if report.checked >= want {
            break;
        }
        let x0 = work[i].data[k];
        work[i].data[k] = x0 + step;
        let (fp, fpp) = eval(&f, &work)?;
        work[i].data[k] = x0 - step;
        let (fm, fpm) = eval(&f, &work)?;
        work[i].data[k] = x0;
        if fpp != base_fp || fpm != base_fp {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic[i][k], numeric));
        report.checked += 1;
    }
    Ok(report)
}

/// Operators covered by [`check_op`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "conv_transpose2d",
    "maxpool2d",
    "upsample_bilinear2x",
    "prelu",
    "batchnorm",
    "batchnorm_eval",
    "instancenorm",
    "add",
    "concat_channels",
    "sigmoid",
    "mse_loss",
];

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero by `min_abs`, with random sign.
fn off_zero(rng: &mut ChaCha8Rng, dims: [usize; 4], min_abs: f64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| {
        let m = rng.gen_range(min_abs..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced by `gap`, randomly permuted.
fn distinct(rng: &mut ChaCha8Rng, dims: [usize; 4], gap: f64) -> Tensor4<f64> {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|k| (k as f64 - n as f64 / 2.0) * gap).collect();
    vals.shuffle(rng);
    Tensor4 { dims, data: vals }
}

/// Reduces an op output to a scalar with an MSE against a fixed target.
fn reduce(g: &mut Graph<f64>, y: Var, target: &Tensor4<f64>) -> Result<Var, TensorError> {
    let t = g.constant(target.clone());
    g.mse_loss(y, t)
}

/// Runs the gradient check of one named operator on a random instance.
pub fn check_op(name: &str, seed: u64) -> Result<CheckReport, TensorError> {
    check_op_with_step(name, seed, STEP)
}

pub fn check_op_with_step(name: &str, seed: u64, step: f64) -> Result<CheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    match name {
        "conv2d" | "conv2d_strided" => {
            let (stride, pad, k) = if name == "conv2d" { (1, 1, 3) } else { (2, 2, 5) };
            let x = uniform(rng, [2, 3, 7, 7], -1.0, 1.0);
            let w = uniform(rng, [4, 3, k, k], -0.5, 0.5);
            let b = uniform(rng, [4, 1, 1, 1], -0.5, 0.5);
            let oh = (7 + 2 * pad - k) / stride + 1;
            let t = uniform(rng, [2, 4, oh, oh], -1.0, 1.0);
            check(name, &[x, w, b], step, Probes::All, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                reduce(g, y, &t)
            })
        }
        "conv_transpose2d" => {
            let x = uniform(rng, [2, 3, 4, 4], -1.0, 1.0);
            let w = uniform(rng, [3, 2, 2, 2], -0.5, 0.5);
            let b = uniform(rng, [2, 1, 1, 1], -0.5, 0.5);
            let t = uniform(rng, [2, 2, 8, 8], -1.0, 1.0);
            check(name, &[x, w, b], step, Probes::All, |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
                reduce(g, y, &t)
            })
        }
        "maxpool2d" => {
            let x = distinct(rng, [2, 2, 6, 6], 0.01);
            let t1 = uniform(rng, [2, 2, 3, 3], -1.0, 1.0);
            let t2 = uniform(rng, [2, 2, 6, 6], -1.0, 1.0);
            check(name, &[x], step, Probes::All, |g, v| {
                let a = g.maxpool2d(v[0], 2, 2, 0)?;
                let b = g.maxpool2d(v[0], 3, 1, 1)?;
                let la = reduce(g, a, &t1)?;
                let lb = reduce(g, b, &t2)?;
                g.add(la, lb)
            })
        }
        "upsample_bilinear2x" => {
            let x = uniform(rng, [2, 2, 3, 4], -1.0, 1.0);
            let t = uniform(rng, [2, 2, 6, 8], -1.0, 1.0);
            check(name, &[x], step, Probes::All, |g, v| {
                let y = g.upsample_bilinear2x(v[0])?;
                reduce(g, y, &t)
            })
        }
        "prelu" => {
            let x = off_zero(rng, [2, 3, 4, 4], 0.01);
            let a = uniform(rng, [3, 1, 1, 1], 0.05, 0.5);
            let t = uniform(rng, [2, 3, 4, 4], -1.0, 1.0);
            check(name, &[x, a], step, Probes::All, |g, v| {
                let y = g.prelu(v[0], v[1])?;
                reduce(g, y, &t)
            })
        }
        "batchnorm" | "batchnorm_eval" => {
            let x = uniform(rng, [3, 2, 4, 4], -2.0, 2.0);
            let gamma = uniform(rng, [2, 1, 1, 1], 0.5, 1.5);
            let beta = uniform(rng, [2, 1, 1, 1], -0.5, 0.5);
            let t = uniform(rng, [3, 2, 4, 4], -1.0, 1.0);
            let rm = [0.1, -0.2];
            let rv = [0.8, 1.3];
            let eval = name == "batchnorm_eval";
            check(name, &[x, gamma, beta], step, Probes::All, |g, v| {
                let mode = if eval { NormMode::Eval { running_mean: &rm, running_var: &rv } } else { NormMode::Train };
                let (y, _) = g.batchnorm(v[0], v[1], v[2], 1e-5, mode)?;
                reduce(g, y, &t)
            })
        }
        "instancenorm" => {
            let x = uniform(rng, [2, 3, 4, 4], -2.0, 2.0);
            let gamma = uniform(rng, [3, 1, 1, 1], 0.5, 1.5);
            let beta = uniform(rng, [3, 1, 1, 1], -0.5, 0.5);
            let t = uniform(rng, [2, 3, 4, 4], -1.0, 1.0);
            check(name, &[x, gamma, beta], step, Probes::All, |g, v| {
                let y = g.instancenorm(v[0], v[1], v[2], 1e-5)?;
                reduce(g, y, &t)
            })
        }
        "add" => {
            let a = uniform(rng, [2, 2, 3, 3], -1.0, 1.0);
            let b = uniform(rng, [2, 2, 3, 3], -1.0, 1.0);
            let t = uniform(rng, [2, 2, 3, 3], -1.0, 1.0);
            check(name, &[a, b], step, Probes::All, |g, v| {
                let y = g.add(v[0], v[1])?;
                reduce(g, y, &t)
            })
        }
        "concat_channels" => {
            let a = uniform(rng, [2, 2, 3, 3], -1.0, 1.0);
            let b = uniform(rng, [2, 3, 3, 3], -1.0, 1.0);
            let t = uniform(rng, [2, 5, 3, 3], -1.0, 1.0);
            check(name, &[a, b], step, Probes::All, |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                reduce(g, y, &t)
            })
        }
        "sigmoid" => {
            let x = uniform(rng, [2, 2, 3, 3], -4.0, 4.0);
            let t = uniform(rng, [2, 2, 3, 3], 0.0, 1.0);
            check(name, &[x], step, Probes::All, |g, v| {
                let y = g.sigmoid(v[0])?;
                reduce(g, y, &t)
            })
        }
        "mse_loss" => {
            let p = uniform(rng, [2, 1, 4, 4], -1.0, 1.0);
            let l = uniform(rng, [2, 1, 4, 4], -1.0, 1.0);
            check(name, &[p, l], step, Probes::All, |g, v| g.mse_loss(v[0], v[1]))
        }
        other => Err(TensorError::DimMismatch { op: "check_op", msg: format!("unknown operator `{other}`") }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for (k, op) in OPS.iter().enumerate() {
            let r = check_op(op, 7 + k as u64).unwrap();
            assert!(r.passed(1e-6), "{r:?}");
            assert_eq!(r.skipped, 0, "{r:?}");
        }
    }

    #[test]
    fn linear_op_is_tight() {
        for op in ["add", "concat_channels"] {
            let r = check_op_with_step(op, 1, 1e-2).unwrap();
            assert!(r.max_rel_err <= 1e-10, "{r:?}");
        }
    }

    #[test]
    fn kink_crossing_probe_is_skipped() {
        let x = Tensor4::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let a = Tensor4::vector(vec![0.25]);
        let t = Tensor4::zeros([1, 1, 1, 2]);
        let r = check("prelu_at_kink", &[x, a], STEP, Probes::All, |g, v| {
            let y = g.prelu(v[0], v[1])?;
            reduce(g, y, &t)
        })
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("softmax", 0).is_err());
    }
}
