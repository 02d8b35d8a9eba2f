//! Independent reference implementations, written as plain loops over
//! stored parameter values.
#![allow(dead_code)]

use mcgu::blocks::{BConvLstm, ConvLstmCell, SeBlock};
use mcgu::data::{CtSlice, Disk};
use mcgu::numerics::{ParamStore, Rng, Tensor};

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stride-1 cross-correlation with zero padding `(k-1)/2` before and the
/// rest after each axis. `x: [B,C,H,W]`, `k: [O,C,kh,kw]`.
pub fn conv_ref(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = ((k - 1) / 2) as isize;
    let mut out = Tensor::zeros(&[b, o, h, w]).unwrap();
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oi]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += kernel.at(&[oi, ci, ky, kx]) * x.at(&[bi, ci, sy as usize, sx as usize]);
                            }
                        }
                    }
                    out.set(&[bi, oi, y, xx], acc);
                }
            }
        }
    }
    out
}

/// SE block by its defining sums: `z = mean(x)`, `s = σ(W₂ relu(W₁z+b₁)+b₂)`,
/// `y_f = s_f x_f`.
pub fn se_ref(se: &SeBlock, store: &ParamStore, x: &Tensor) -> Tensor {
    let (b, f, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let w1 = store.get(se.reduce.weight);
    let b1 = store.get(se.reduce.bias);
    let w2 = store.get(se.expand.weight);
    let b2 = store.get(se.expand.bias);
    let hidden = f / se.ratio;
    let mut out = x.clone();
    for bi in 0..b {
        let mut z = vec![0.0; f];
        for (fi, zf) in z.iter_mut().enumerate() {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(&[bi, fi, y, xx]);
                }
            }
            *zf = s / (h * w) as f64;
        }
        let mut hv = vec![0.0; hidden];
        for (j, hj) in hv.iter_mut().enumerate() {
            let mut a = b1.data()[j];
            for (fi, zf) in z.iter().enumerate() {
                a += w1.at(&[j, fi]) * zf;
            }
            *hj = a.max(0.0);
        }
        for fi in 0..f {
            let mut a = b2.data()[fi];
            for (j, hj) in hv.iter().enumerate() {
                a += w2.at(&[fi, j]) * hj;
            }
            let s = sig(a);
            for y in 0..h {
                for xx in 0..w {
                    out.set(&[bi, fi, y, xx], s * x.at(&[bi, fi, y, xx]));
                }
            }
        }
    }
    out
}

/// One ConvLSTM step; `None` state means zeros. Convolutions come from
/// [`conv_ref`], the gate arithmetic is done pixel by pixel.
pub fn lstm_step_ref(
    cell: &ConvLstmCell,
    store: &ParamStore,
    x: &Tensor,
    state: Option<(&Tensor, &Tensor)>,
) -> (Tensor, Tensor) {
    let zeros = x.zeros_like();
    let (h_prev, c_prev) = state.unwrap_or((&zeros, &zeros));
    let pre: Vec<Tensor> = (0..4)
        .map(|g| {
            let xi = &cell.input_kernels[g];
            let hi = &cell.hidden_kernels[g];
            let a = conv_ref(x, store.get(xi.kernel), xi.bias.map(|b| store.get(b)));
            let r = conv_ref(h_prev, store.get(hi.kernel), None);
            a.add(&r).unwrap()
        })
        .collect();
    let [w_ci, w_cf, w_co] = cell.peepholes.map(|id| store.get(id).clone());
    let (b, f, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut h_new = x.zeros_like();
    let mut c_new = x.zeros_like();
    for bi in 0..b {
        for fi in 0..f {
            for y in 0..hh {
                for xx in 0..ww {
                    let ix = [bi, fi, y, xx];
                    let px = [fi, y, xx];
                    let c0 = c_prev.at(&ix);
                    let i = sig(pre[0].at(&ix) + w_ci.at(&px) * c0);
                    let fg = sig(pre[1].at(&ix) + w_cf.at(&px) * c0);
                    let c1 = fg * c0 + i * pre[2].at(&ix).tanh();
                    let o = sig(pre[3].at(&ix) + w_co.at(&px) * c1);
                    c_new.set(&ix, c1);
                    h_new.set(&ix, o * c1.tanh());
                }
            }
        }
    }
    (h_new, c_new)
}

/// Forward cell over `(enc, dec)`, backward cell over `(dec, enc)`, then
/// `tanh(W_f * H_f + W_b * H_b + b)` with 1×1 kernels.
pub fn bconvlstm_ref(m: &BConvLstm, store: &ParamStore, enc: &Tensor, dec: &Tensor) -> Tensor {
    let two_steps = |cell: &ConvLstmCell, a: &Tensor, b: &Tensor| {
        let (h1, c1) = lstm_step_ref(cell, store, a, None);
        lstm_step_ref(cell, store, b, Some((&h1, &c1))).0
    };
    let hf = two_steps(&m.forward_cell, enc, dec);
    let hb = two_steps(&m.backward_cell, dec, enc);
    let yf = conv_ref(&hf, store.get(m.out_forward.kernel), Some(store.get(m.bias)));
    let yb = conv_ref(&hb, store.get(m.out_backward.kernel), None);
    yf.add(&yb).unwrap().map(f64::tanh)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half, by enumerating every pair.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Random CT-like slice: air background, a soft-tissue body disk, two lung
/// disks inside it (the ground truth) and a few bright bone pixels.
pub fn random_ct_slice(rng: &mut Rng) -> CtSlice {
    let h = 8 + rng.below(25);
    let w = 8 + rng.below(25);
    let s = h.min(w) as f64;
    let body = Disk {
        cy: h as f64 / 2.0,
        cx: w as f64 / 2.0,
        r: s * rng.uniform(0.35, 0.5),
    };
    let lungs = [
        Disk {
            cy: h as f64 / 2.0,
            cx: w as f64 * 0.35,
            r: s * rng.uniform(0.08, 0.18),
        },
        Disk {
            cy: h as f64 / 2.0,
            cx: w as f64 * 0.65,
            r: s * rng.uniform(0.08, 0.18),
        },
    ];
    let mut raw = Tensor::zeros(&[h, w]).unwrap();
    let mut gt = Tensor::zeros(&[h, w]).unwrap();
    for y in 0..h {
        for x in 0..w {
            let lung = lungs.iter().any(|d| d.contains(y, x));
            let v = if lung {
                rng.uniform(-900.0, -600.0)
            } else if body.contains(y, x) {
                if rng.unit() < 0.05 {
                    rng.uniform(600.0, 1500.0)
                } else {
                    rng.uniform(0.0, 120.0)
                }
            } else {
                rng.uniform(-1100.0, -950.0)
            };
            raw.set(&[y, x], v);
            gt.set(&[y, x], lung as u8 as f64);
        }
    }
    CtSlice::new(raw, gt).unwrap()
}
