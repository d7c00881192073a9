use ibunet_core::model::{bind_params, build_inception_block, inception_forward, Activation, Mode, NormKind};
use ibunet_core::{Graph, ParamStore, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn direct_conv(x: &Tensor4<f64>, w: &[f64], b: &[f64], k: usize) -> Tensor4<f64> {
    let [n, c, h, wd] = x.dims;
    let p = (k / 2) as isize;
    let mut out = Tensor4::zeros([n, c, h, wd]);
    for s in 0..n {
        for co in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - p;
                                let ix = xx as isize + kx as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((co * c + ci) * k + ky) * k + kx] * x.at(s, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let o = out.offset(s, co, y, xx);
                    out.data[o] = acc;
                }
            }
        }
    }
    out
}

fn direct_pool(x: &Tensor4<f64>, k: usize) -> Tensor4<f64> {
    let [n, c, h, wd] = x.dims;
    let p = (k / 2) as isize;
    let mut out = Tensor4::zeros([n, c, h, wd]);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let mut m = f64::NEG_INFINITY;
                    for dy in -p..=p {
                        for dx in -p..=p {
                            let (iy, ix) = (y as isize + dy, xx as isize + dx);
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                m = m.max(x.at(s, ch, iy as usize, ix as usize));
                            }
                        }
                    }
                    let o = out.offset(s, ch, y, xx);
                    out.data[o] = m;
                }
            }
        }
    }
    out
}

fn f64s(params: &ParamStore, name: &str) -> Vec<f64> {
    params.get(name).unwrap().data.iter().map(|&v| v as f64).collect()
}

#[test]
fn block_sum_equals_six_independent_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (trial, &c) in [8usize, 16, 32, 8, 16, 32].iter().enumerate() {
        let norm = if trial % 2 == 0 { NormKind::Batch } else { NormKind::Instance };
        let (block, params) = build_inception_block(c, norm, Activation::Prelu, trial as u64);
        let (n, h, w) = (2, rng.gen_range(4..10), rng.gen_range(4..10));
        let x = Tensor4::<f64>::from_fn([n, c, h, w], |_| rng.gen_range(-1.0..1.0));

        let mut g = Graph::<f64>::new();
        let vars = bind_params(&params, &mut g, false);
        let xv = g.constant(x.clone());
        let (sum, out) = inception_forward(&block, &params, &mut g, xv, &vars, Mode::Train).unwrap();
        assert_eq!(g.value(out).dims, x.dims);
        assert_eq!(g.value(sum).dims, x.dims);

        let mut want = Tensor4::<f64>::zeros(x.dims);
        for k in [1, 3, 5, 7] {
            let y = direct_conv(&x, &f64s(&params, &block.branch_weight(k)), &f64s(&params, &block.branch_bias(k)), k);
            want.data.iter_mut().zip(&y.data).for_each(|(a, b)| *a += b);
        }
        for k in [3, 5] {
            let y = direct_pool(&x, k);
            want.data.iter_mut().zip(&y.data).for_each(|(a, b)| *a += b);
        }
        let got = g.value(sum);
        for (a, b) in want.data.iter().zip(&got.data) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel <= 1e-6, "C={c}: oracle {a} vs block {b}");
        }
    }
}
