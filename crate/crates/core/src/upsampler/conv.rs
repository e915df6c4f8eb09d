//! Stride-1 "same" convolution with zero padding, `H × W × C` layout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Backward, Tape, Tensor, Var};

fn dims(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, cin) = input.dims3()?;
    let (k, cout) = match kernel.shape()[..] {
        [k, k2, ci, co] if k == k2 && k % 2 == 1 && ci == cin => (k, co),
        _ => {
            return Err(Error::shape(format!(
                "kernel {:?} incompatible with input {:?}",
                kernel.shape(),
                input.shape()
            )))
        }
    };
    if bias.shape() != [cout] {
        return Err(Error::shape(format!("bias {:?} for {cout} output channels", bias.shape())));
    }
    Ok((h, w, cin, k, cout))
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin, k, cout) = dims(input, kernel, bias)?;
    let pad = (k / 2) as isize;
    let kd = kernel.data();
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias.data());
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = x as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = input.pixel(iy as usize, ix as usize);
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &kd[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (oo, &wv) in o.iter_mut().zip(wrow) {
                            *oo += v * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cout], out)
}

pub fn conv2d_var(tape: &mut Tape, input: Var, kernel: Var, bias: Var) -> Result<Var> {
    let out = conv2d(tape.value(input), tape.value(kernel), tape.value(bias))?;
    Ok(tape.record(out, &[input, kernel, bias], Conv2dRule))
}

struct Conv2dRule;

impl Backward for Conv2dRule {
    fn backward(&self, p: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let (input, kernel, bias) = (p[0], p[1], p[2]);
        let (h, w, cin, k, cout) = dims(input, kernel, bias).expect("checked in forward");
        let pad = (k / 2) as isize;
        let kd = kernel.data();
        let mut gin = vec![0.0; input.len()];
        let mut gw = vec![0.0; kernel.len()];
        let mut gb = vec![0.0; cout];
        for y in 0..h {
            for x in 0..w {
                let go = g.pixel(y, x);
                for (b, &v) in gb.iter_mut().zip(go) {
                    *b += v;
                }
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ioff = (iy as usize * w + ix as usize) * cin;
                        let wbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &kd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut acc = 0.0;
                            for (&gv, &wv) in go.iter().zip(wrow) {
                                acc += gv * wv;
                            }
                            gin[ioff + ci] += acc;
                            let v = input.data()[ioff + ci];
                            if v != 0.0 {
                                let gwrow = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (gwv, &gv) in gwrow.iter_mut().zip(go) {
                                    *gwv += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![
            Tensor::new(input.shape(), gin).expect("shape"),
            Tensor::new(kernel.shape(), gw).expect("shape"),
            Tensor::new(bias.shape(), gb).expect("shape"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig, Rng};

    #[test]
    fn matches_direct_sum() {
        let mut rng = Rng::new(2, 0);
        let input = Tensor::from_fn(&[4, 5, 2], |_| rng.normal());
        let kernel = Tensor::from_fn(&[3, 3, 2, 3], |_| rng.normal());
        let bias = Tensor::from_fn(&[3], |_| rng.normal());
        let out = conv2d(&input, &kernel, &bias).unwrap();
        for y in 0..4usize {
            for x in 0..5usize {
                for co in 0..3 {
                    let mut acc = bias.data()[co];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += input.get(&[iy as usize, ix as usize, ci]) * kernel.get(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    assert!((out.get(&[y, x, co]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_fd() {
        for seed in 0..50 {
            let mut rng = Rng::new(seed, 3);
            let input = Tensor::from_fn(&[3, 4, 2], |_| rng.normal());
            let kernel = Tensor::from_fn(&[3, 3, 2, 2], |_| rng.normal());
            let bias = Tensor::from_fn(&[2], |_| rng.normal());
            let rep = grad_check(
                |t, v| {
                    let o = conv2d_var(t, v[0], v[1], v[2])?;
                    crate::numerics::tape::sum_of_squares(t, o)
                },
                &[input, kernel, bias],
                &GradCheckConfig::default(),
                &mut rng,
            )
            .unwrap();
            assert!(rep.passed, "seed {seed}: {:?}", rep.params);
        }
    }
}
