//! Verification batteries for the numerical core: every graph operator (and
//! both morphological mask builders) replayed against an independently coded
//! brute-force oracle with bit-exact 64-bit comparison, plus central
//! finite-difference gradient checks for the differentiable operators.
//!
//! Bit-exactness is meaningful because every reduction in the tree is a
//! strict sequential fold; the one gemm-lowered operator (convolution)
//! accumulates per output element in patch order with fused multiply-add,
//! which a direct nested loop reproduces exactly while the reduction dim
//! stays under the gemm's 256-wide blocking panel. The batteries keep all
//! instances below that bound.

use crate::autograd::{BnMode, Graph, NodeId};
use crate::loss::{composite_loss, one_hot, outer_gm_mask, wm_sulci_mask};
use crate::resnorm::{SampleKernel, SamplingGrid};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Outcome of one battery line (one operator).
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    /// Largest deviation seen: ulp distance for the forward battery
    /// (0 = bit-identical everywhere), relative error for gradients.
    pub worst: f64,
}

/// One battery's results, one line per operator.
#[derive(Debug, Clone)]
pub struct Report {
    pub battery: &'static str,
    pub metric: &'static str,
    pub lines: Vec<CheckLine>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.failures == 0)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}:", self.battery)?;
        for l in &self.lines {
            let verdict = if l.failures == 0 { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "  {verdict}  {:<24} {:>5} instances  worst {} {:.3e}",
                l.name, l.instances, self.metric, l.worst
            )?;
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn ulp_distance(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if !a.is_finite() || !b.is_finite() {
        return u64::MAX;
    }
    let (ia, ib) = (a.to_bits() as i64, b.to_bits() as i64);
    (ia - ib).unsigned_abs()
}

/// Bit-compares two maps; returns the largest ulp distance.
fn compare_bits(got: &Array4<f64>, want: &Array4<f64>) -> u64 {
    debug_assert_eq!(got.dim(), want.dim());
    got.iter()
        .zip(want.iter())
        .map(|(&a, &b)| ulp_distance(a, b))
        .max()
        .unwrap_or(0)
}

fn rand_map(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize), lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------------------
// Forward oracles
// ---------------------------------------------------------------------------

/// Runs every forward oracle line with `per_op` randomized instances each.
pub fn forward_oracles(seed: u64, per_op: usize) -> Report {
    type Line = fn(&mut ChaCha8Rng) -> u64;
    let ops: &[(&'static str, Line)] = &[
        ("conv2d", fwd_conv2d),
        ("batch_norm_train", fwd_bn_train),
        ("batch_norm_eval", fwd_bn_eval),
        ("prelu", fwd_prelu),
        ("maxout", fwd_maxout),
        ("maxpool2", fwd_maxpool2),
        ("unpool2", fwd_unpool2),
        ("softmax_channels", fwd_softmax),
        ("concat_channels", fwd_concat),
        ("add", fwd_add),
        ("mul", fwd_mul),
        ("log_clamped", fwd_log_clamped),
        ("scale", fwd_scale),
        ("sum_all", fwd_sum_all),
        ("sum_nhw", fwd_sum_nhw),
        ("div_guarded", fwd_div_guarded),
        ("mul_channel_scalar", fwd_mul_channel_scalar),
        ("slice_channels", fwd_slice_channels),
        ("sample_nearest", |r| fwd_sample(r, SampleKernel::Nn)),
        ("sample_bilinear", |r| fwd_sample(r, SampleKernel::Bilinear)),
        ("sample_bicubic", |r| fwd_sample(r, SampleKernel::Bicubic)),
        ("sample_area", |r| fwd_sample(r, SampleKernel::Area)),
        ("pad_reflect", fwd_pad_reflect),
        ("crop2d", fwd_crop2d),
        ("wm_sulci_mask", |r| fwd_mask(r, true)),
        ("outer_gm_mask", |r| fwd_mask(r, false)),
    ];
    let mut lines = Vec::with_capacity(ops.len());
    for (idx, (name, run)) in ops.iter().enumerate() {
        let mut rng = rng_for(seed, idx as u64 + 1);
        let mut failures = 0;
        let mut worst = 0u64;
        for _ in 0..per_op {
            let u = run(&mut rng);
            if u > 0 {
                failures += 1;
                worst = worst.max(u);
            }
        }
        lines.push(CheckLine { name, instances: per_op, failures, worst: worst as f64 });
    }
    Report { battery: "forward oracles (bit-exact 64-bit)", metric: "ulp", lines }
}

/// Runs `build` on a fresh untracked graph and returns the root's value.
fn eval_graph(build: impl FnOnce(&mut Graph<f64>) -> NodeId) -> Array4<f64> {
    let mut g = Graph::<f64>::new(false);
    let id = build(&mut g);
    g.value(id).clone()
}

fn fwd_conv2d(rng: &mut ChaCha8Rng) -> u64 {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
    let k = [1usize, 3, 5][rng.gen_range(0..3)];
    let x = rand_map(rng, (n, cin, h, w), -1.0, 1.0);
    let wt = rand_map(rng, (cout, cin, k, k), -1.0, 1.0);
    let b = rand_map(rng, (1, cout, 1, 1), -1.0, 1.0);
    let got = eval_graph(|g| {
        let (xi, wi, bi) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        g.conv2d(xi, wi, bi).unwrap()
    });
    // Direct nested-loop convolution; fused multiply-add per term matches the
    // single-rounding-per-term accumulation of the lowered kernel.
    let (ph, pw) = (k as isize / 2, k as isize / 2);
    let mut want = Array4::zeros((n, cout, h, w));
    for bn in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = 0.0f64;
                    for ci in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = y as isize + dy as isize - ph;
                                let ix = xo as isize + dx as isize - pw;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc = x[[bn, ci, iy as usize, ix as usize]]
                                        .mul_add(wt[[co, ci, dy, dx]], acc);
                                }
                            }
                        }
                    }
                    want[[bn, co, y, xo]] = acc + b[[0, co, 0, 0]];
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_bn_train(rng: &mut ChaCha8Rng) -> u64 {
    let (n, c) = (rng.gen_range(2..=4), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let x = rand_map(rng, (n, c, h, w), -2.0, 2.0);
    let gm = rand_map(rng, (1, c, 1, 1), 0.5, 1.5);
    let bt = rand_map(rng, (1, c, 1, 1), -0.5, 0.5);
    let got = eval_graph(|g| {
        let (xi, gi, bi) = (g.input(x.clone()), g.input(gm.clone()), g.input(bt.clone()));
        g.batch_norm(xi, gi, bi, BnMode::Train, None).unwrap().0
    });
    let m = (n * h * w) as f64;
    let mut want = Array4::zeros((n, c, h, w));
    for ch in 0..c {
        let mut mu = 0.0;
        for bn in 0..n {
            for y in 0..h {
                for xo in 0..w {
                    mu += x[[bn, ch, y, xo]];
                }
            }
        }
        let mu = mu / m;
        let mut var = 0.0;
        for bn in 0..n {
            for y in 0..h {
                for xo in 0..w {
                    let d = x[[bn, ch, y, xo]] - mu;
                    var += d * d;
                }
            }
        }
        let var = var / m;
        let inv_std = 1.0 / (var + 1e-5).sqrt();
        let (g, b) = (gm[[0, ch, 0, 0]], bt[[0, ch, 0, 0]]);
        for bn in 0..n {
            for y in 0..h {
                for xo in 0..w {
                    want[[bn, ch, y, xo]] = (x[[bn, ch, y, xo]] - mu) * inv_std * g + b;
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_bn_eval(rng: &mut ChaCha8Rng) -> u64 {
    let (n, c) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let x = rand_map(rng, (n, c, h, w), -2.0, 2.0);
    let gm = rand_map(rng, (1, c, 1, 1), 0.5, 1.5);
    let bt = rand_map(rng, (1, c, 1, 1), -0.5, 0.5);
    let rm = Array1::from_shape_fn(c, |_| rng.gen_range(-0.5..0.5));
    let rv = Array1::from_shape_fn(c, |_| rng.gen_range(0.1..1.5));
    let got = eval_graph(|g| {
        let (xi, gi, bi) = (g.input(x.clone()), g.input(gm.clone()), g.input(bt.clone()));
        g.batch_norm(xi, gi, bi, BnMode::Eval, Some((&rm, &rv))).unwrap().0
    });
    let mut want = x.clone();
    for ch in 0..c {
        let inv_std = 1.0 / (rv[ch] + 1e-5).sqrt();
        for bn in 0..n {
            for y in 0..h {
                for xo in 0..w {
                    want[[bn, ch, y, xo]] = (x[[bn, ch, y, xo]] - rm[ch]) * inv_std * gm[[0, ch, 0, 0]]
                        + bt[[0, ch, 0, 0]];
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_prelu(rng: &mut ChaCha8Rng) -> u64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let x = rand_map(rng, (n, c, h, w), -1.0, 1.0);
    let a = rand_map(rng, (1, c, 1, 1), -0.5, 1.0);
    let got = eval_graph(|g| {
        let (xi, ai) = (g.input(x.clone()), g.input(a.clone()));
        g.prelu(xi, ai).unwrap()
    });
    let mut want = x.clone();
    for ch in 0..c {
        for bn in 0..n {
            for y in 0..h {
                for xo in 0..w {
                    let v = x[[bn, ch, y, xo]];
                    want[[bn, ch, y, xo]] = if v > 0.0 { v } else { a[[0, ch, 0, 0]] * v };
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_maxout(rng: &mut ChaCha8Rng) -> u64 {
    let parts = rng.gen_range(1..=4);
    let dim = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5));
    let xs: Vec<_> = (0..parts).map(|_| rand_map(rng, dim, -1.0, 1.0)).collect();
    let got = eval_graph(|g| {
        let ids: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
        g.maxout(&ids).unwrap()
    });
    let mut want = xs[0].clone();
    for x in &xs[1..] {
        for (o, &v) in want.iter_mut().zip(x.iter()) {
            if v > *o {
                *o = v;
            }
        }
    }
    compare_bits(&got, &want)
}

/// Direct 2x2 window scan with the first-in-row-major tie rule; returns the
/// pooled map and the flat argmax indices.
fn pool_oracle(x: &Array4<f64>) -> (Array4<f64>, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut idx = Array4::zeros((n, c, oh, ow));
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x2) = (2 * oy + dy, 2 * ox + dx);
                            let v = x[[bn, ch, y, x2]];
                            if v > best {
                                best = v;
                                at = y * w + x2;
                            }
                        }
                    }
                    out[[bn, ch, oy, ox]] = best;
                    idx[[bn, ch, oy, ox]] = at;
                }
            }
        }
    }
    (out, idx)
}

fn fwd_maxpool2(rng: &mut ChaCha8Rng) -> u64 {
    let dim = (rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4));
    let x = rand_map(rng, dim, -1.0, 1.0);
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.maxpool2(xi).unwrap()
    });
    compare_bits(&got, &pool_oracle(&x).0)
}

fn fwd_unpool2(rng: &mut ChaCha8Rng) -> u64 {
    let (h, w) = (2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4));
    let dim = (rng.gen_range(1..=2), rng.gen_range(1..=3), h, w);
    let x = rand_map(rng, dim, -1.0, 1.0);
    let vals = rand_map(rng, (dim.0, dim.1, h / 2, w / 2), -1.0, 1.0);
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        let p = g.maxpool2(xi).unwrap();
        let vi = g.input(vals.clone());
        g.unpool2(vi, p).unwrap()
    });
    let (_, idx) = pool_oracle(&x);
    let mut want = Array4::zeros(dim);
    for bn in 0..dim.0 {
        for ch in 0..dim.1 {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let flat = idx[[bn, ch, oy, ox]];
                    want[[bn, ch, flat / w, flat % w]] = vals[[bn, ch, oy, ox]];
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_softmax(rng: &mut ChaCha8Rng) -> u64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=6));
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let x = rand_map(rng, (n, c, h, w), -3.0, 3.0);
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.softmax_channels(xi).unwrap()
    });
    let mut want = Array4::zeros((n, c, h, w));
    for bn in 0..n {
        for y in 0..h {
            for xo in 0..w {
                let mut mx = x[[bn, 0, y, xo]];
                for ch in 1..c {
                    mx = mx.max(x[[bn, ch, y, xo]]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (x[[bn, ch, y, xo]] - mx).exp();
                    want[[bn, ch, y, xo]] = e;
                    z += e;
                }
                for ch in 0..c {
                    want[[bn, ch, y, xo]] /= z;
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_concat(rng: &mut ChaCha8Rng) -> u64 {
    let parts = rng.gen_range(2..=4);
    let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=5));
    let xs: Vec<_> = (0..parts)
        .map(|_| {
            let c = rng.gen_range(1..=3);
            rand_map(rng, (n, c, h, w), -1.0, 1.0)
        })
        .collect();
    let got = eval_graph(|g| {
        let ids: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
        g.concat_channels(&ids).unwrap()
    });
    let ctot: usize = xs.iter().map(|x| x.dim().1).sum();
    let mut want = Array4::zeros((n, ctot, h, w));
    let mut at = 0;
    for x in &xs {
        for ch in 0..x.dim().1 {
            for bn in 0..n {
                for y in 0..h {
                    for xo in 0..w {
                        want[[bn, at + ch, y, xo]] = x[[bn, ch, y, xo]];
                    }
                }
            }
        }
        at += x.dim().1;
    }
    compare_bits(&got, &want)
}

fn elementwise_dim(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(2..=6), rng.gen_range(2..=6))
}

fn fwd_add(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let (a, b) = (rand_map(rng, dim, -1.0, 1.0), rand_map(rng, dim, -1.0, 1.0));
    let got = eval_graph(|g| {
        let (ai, bi) = (g.input(a.clone()), g.input(b.clone()));
        g.add(ai, bi).unwrap()
    });
    let mut want = a.clone();
    for (o, &v) in want.iter_mut().zip(b.iter()) {
        *o += v;
    }
    compare_bits(&got, &want)
}

fn fwd_mul(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let (a, b) = (rand_map(rng, dim, -1.0, 1.0), rand_map(rng, dim, -1.0, 1.0));
    let got = eval_graph(|g| {
        let (ai, bi) = (g.input(a.clone()), g.input(b.clone()));
        g.mul(ai, bi).unwrap()
    });
    let mut want = a.clone();
    for (o, &v) in want.iter_mut().zip(b.iter()) {
        *o *= v;
    }
    compare_bits(&got, &want)
}

fn fwd_log_clamped(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let x = rand_map(rng, dim, -0.5, 1.5);
    let eps = [1e-7, 1e-3][rng.gen_range(0..2)];
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.log_clamped(xi, eps).unwrap()
    });
    let want = x.mapv(|v| v.max(eps).ln());
    compare_bits(&got, &want)
}

fn fwd_scale(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let x = rand_map(rng, dim, -1.0, 1.0);
    let c: f64 = rng.gen_range(-2.0..2.0);
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.scale(xi, c).unwrap()
    });
    let want = x.mapv(|v| v * c);
    compare_bits(&got, &want)
}

fn fwd_sum_all(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let x = rand_map(rng, dim, -1.0, 1.0);
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.sum_all(xi).unwrap()
    });
    let mut acc = 0.0;
    for bn in 0..dim.0 {
        for ch in 0..dim.1 {
            for y in 0..dim.2 {
                for xo in 0..dim.3 {
                    acc += x[[bn, ch, y, xo]];
                }
            }
        }
    }
    compare_bits(&got, &Array4::from_elem((1, 1, 1, 1), acc))
}

fn fwd_sum_nhw(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let x = rand_map(rng, dim, -1.0, 1.0);
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.sum_nhw(xi).unwrap()
    });
    let mut want = Array4::zeros((1, dim.1, 1, 1));
    for ch in 0..dim.1 {
        let mut acc = 0.0;
        for bn in 0..dim.0 {
            for y in 0..dim.2 {
                for xo in 0..dim.3 {
                    acc += x[[bn, ch, y, xo]];
                }
            }
        }
        want[[0, ch, 0, 0]] = acc;
    }
    compare_bits(&got, &want)
}

fn fwd_div_guarded(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let num = rand_map(rng, dim, -1.0, 1.0);
    let mut den = rand_map(rng, dim, -1.0, 1.0);
    for v in den.iter_mut() {
        if rng.gen_bool(0.2) {
            *v = 0.0;
        }
    }
    let got = eval_graph(|g| {
        let (ni, di) = (g.input(num.clone()), g.input(den.clone()));
        g.div_guarded(ni, di).unwrap()
    });
    let mut want = num.clone();
    for (o, &d) in want.iter_mut().zip(den.iter()) {
        *o = if d > 0.0 { *o / d } else { 0.0 };
    }
    compare_bits(&got, &want)
}

fn fwd_mul_channel_scalar(rng: &mut ChaCha8Rng) -> u64 {
    let dim = elementwise_dim(rng);
    let a = rand_map(rng, dim, -1.0, 1.0);
    let s = rand_map(rng, (dim.0, 1, dim.2, dim.3), -1.0, 1.0);
    let got = eval_graph(|g| {
        let (ai, si) = (g.input(a.clone()), g.input(s.clone()));
        g.mul_channel_scalar(ai, si).unwrap()
    });
    let mut want = a.clone();
    for bn in 0..dim.0 {
        for ch in 0..dim.1 {
            for y in 0..dim.2 {
                for xo in 0..dim.3 {
                    want[[bn, ch, y, xo]] = a[[bn, ch, y, xo]] * s[[bn, 0, y, xo]];
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_slice_channels(rng: &mut ChaCha8Rng) -> u64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(2..=6));
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let x = rand_map(rng, (n, c, h, w), -1.0, 1.0);
    let from = rng.gen_range(0..c - 1);
    let to = rng.gen_range(from + 1..=c);
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.slice_channels(xi, from, to).unwrap()
    });
    let mut want = Array4::zeros((n, to - from, h, w));
    for bn in 0..n {
        for ch in from..to {
            for y in 0..h {
                for xo in 0..w {
                    want[[bn, ch - from, y, xo]] = x[[bn, ch, y, xo]];
                }
            }
        }
    }
    compare_bits(&got, &want)
}

/// Interpolation taps for one axis, re-derived from the sampling contract:
/// `src = (dst + 0.5) * scale - 0.5`, taps clamped to the edge, area boxes
/// folding any out-of-image mass onto the edge cell.
fn oracle_taps(kernel: SampleKernel, src: f64, dim: usize, scale: f64) -> Vec<(usize, f64)> {
    let clamp = |i: isize| i.clamp(0, dim as isize - 1) as usize;
    match kernel {
        SampleKernel::Nn => vec![(clamp((src + 0.5).floor() as isize), 1.0)],
        SampleKernel::Bilinear => {
            let i0 = src.floor() as isize;
            let f = src - i0 as f64;
            vec![(clamp(i0), 1.0 - f), (clamp(i0 + 1), f)]
        }
        SampleKernel::Bicubic => {
            const A: f64 = -0.75;
            let i0 = src.floor() as isize;
            let f = src - i0 as f64;
            let mut taps = Vec::new();
            for k in -1..=2isize {
                let t = (f - k as f64).abs();
                let w = if t <= 1.0 {
                    ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
                } else if t < 2.0 {
                    ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
                } else {
                    0.0
                };
                if w != 0.0 {
                    taps.push((clamp(i0 + k), w));
                }
            }
            taps
        }
        SampleKernel::Area => {
            let center = src + 0.5;
            let (lo, hi) = (center - scale / 2.0, center + scale / 2.0);
            let first = lo.floor().max(0.0) as usize;
            let last = (hi.ceil() as usize).min(dim).max(first + 1);
            let mut taps = Vec::new();
            for i in first..last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            if (total - 1.0).abs() > 1e-12 && !taps.is_empty() {
                let missing = 1.0 - total;
                if lo < 0.0 {
                    taps.first_mut().unwrap().1 += missing;
                } else {
                    taps.last_mut().unwrap().1 += missing;
                }
            }
            taps
        }
    }
}

fn fwd_sample(rng: &mut ChaCha8Rng, kernel: SampleKernel) -> u64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (ih, iw) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
    let (oh, ow) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
    let x = rand_map(rng, (n, c, ih, iw), -1.0, 1.0);
    let grid = SamplingGrid::new((ih, iw), (oh, ow));
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.sample(xi, &grid, kernel).unwrap()
    });
    let (sy, sx) = (ih as f64 / oh as f64, iw as f64 / ow as f64);
    let mut want = Array4::zeros((n, c, oh, ow));
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let rt = oracle_taps(kernel, (oy as f64 + 0.5) * sy - 0.5, ih, sy);
                    let ct = oracle_taps(kernel, (ox as f64 + 0.5) * sx - 0.5, iw, sx);
                    let mut acc = 0.0;
                    for &(ty, wy) in &rt {
                        for &(tx, wx) in &ct {
                            acc += x[[bn, ch, ty, tx]] * (wy * wx);
                        }
                    }
                    want[[bn, ch, oy, ox]] = acc;
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_pad_reflect(rng: &mut ChaCha8Rng) -> u64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let x = rand_map(rng, (n, c, h, w), -1.0, 1.0);
    let pad = [
        rng.gen_range(0..h.min(4)),
        rng.gen_range(0..h.min(4)),
        rng.gen_range(0..w.min(4)),
        rng.gen_range(0..w.min(4)),
    ];
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.pad_reflect(xi, pad).unwrap()
    });
    // Reflection about the edge sample without repeating it has period
    // 2d - 2; the modular form covers any number of bounces.
    let reflect = |i: isize, d: usize| -> usize {
        if d == 1 {
            return 0;
        }
        let p = 2 * d as isize - 2;
        let m = i.rem_euclid(p);
        (if m >= d as isize { p - m } else { m }) as usize
    };
    let (oh, ow) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
    let mut want = Array4::zeros((n, c, oh, ow));
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = reflect(oy as isize - pad[0] as isize, h);
                    let sx = reflect(ox as isize - pad[2] as isize, w);
                    want[[bn, ch, oy, ox]] = x[[bn, ch, sy, sx]];
                }
            }
        }
    }
    compare_bits(&got, &want)
}

fn fwd_crop2d(rng: &mut ChaCha8Rng) -> u64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
    let x = rand_map(rng, (n, c, h, w), -1.0, 1.0);
    let (th, tw) = (rng.gen_range(1..=h - 1), rng.gen_range(1..=w - 1));
    let off = (rng.gen_range(0..=h - th), rng.gen_range(0..=w - tw));
    let got = eval_graph(|g| {
        let xi = g.input(x.clone());
        g.crop2d(xi, off, (th, tw)).unwrap()
    });
    let mut want = Array4::zeros((n, c, th, tw));
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..th {
                for xo in 0..tw {
                    want[[bn, ch, y, xo]] = x[[bn, ch, off.0 + y, off.1 + xo]];
                }
            }
        }
    }
    compare_bits(&got, &want)
}

/// Full-window O(h·w·r²) morphology scans, independent of the separable
/// two-pass implementation.
fn dilate_bf(m: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = m.dim();
    let ri = r as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = false;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    acc = acc || m[[sy as usize, sx as usize]];
                }
            }
        }
        acc
    })
}

fn erode_bf(m: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = m.dim();
    let ri = r as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = true;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    m[[sy as usize, sx as usize]]
                } else {
                    false
                };
                acc = acc && v;
            }
        }
        acc
    })
}

fn fwd_mask(rng: &mut ChaCha8Rng, sulci: bool) -> u64 {
    let (h, w) = (rng.gen_range(4..=12), rng.gen_range(4..=12));
    let density = [0.2, 0.5, 0.8][rng.gen_range(0..3)];
    let m = Array2::from_shape_fn((h, w), |_| rng.gen_bool(density));
    let r = rng.gen_range(1..=3);
    let (got, want) = if sulci {
        let closed = erode_bf(&dilate_bf(&m, r), r);
        let want = Array2::from_shape_fn((h, w), |i| closed[i] && !m[i]);
        (wm_sulci_mask(&m, r), want)
    } else {
        let eroded = erode_bf(&m, r);
        let want = Array2::from_shape_fn((h, w), |i| m[i] && !eroded[i]);
        (outer_gm_mask(&m, r), want)
    };
    got.iter().zip(want.iter()).filter(|(a, b)| a != b).count() as u64
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;

/// Scale-aware error: relative for large gradients, absolute below 1.
fn grad_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// One gradient case: differentiable inputs plus a builder that assembles a
/// scalar root from their leaf ids.
struct GradCase {
    inputs: Vec<Array4<f64>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId>,
}

/// Checks autograd against central differences on every input element;
/// returns the worst scale-aware error.
fn grad_case_err(case: &GradCase) -> f64 {
    let mut g = Graph::<f64>::new(true);
    let ids: Vec<_> = case.inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let root = (case.build)(&mut g, &ids);
    g.backward(root).expect("gradcheck backward");
    let grads: Vec<Array4<f64>> = ids.iter().map(|&id| g.grad(id).expect("leaf grad").clone()).collect();

    let eval = |inputs: &[Array4<f64>]| -> f64 {
        let mut g = Graph::<f64>::new(false);
        let ids: Vec<_> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let root = (case.build)(&mut g, &ids);
        g.value(root)[[0, 0, 0, 0]]
    };

    let mut worst = 0.0f64;
    let mut probe = case.inputs.clone();
    for (i, input) in case.inputs.iter().enumerate() {
        for idx in ndarray::indices(input.dim()) {
            let orig = probe[i][idx];
            probe[i][idx] = orig + FD_STEP;
            let up = eval(&probe);
            probe[i][idx] = orig - FD_STEP;
            let down = eval(&probe);
            probe[i][idx] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(grad_err(grads[i][idx], fd));
        }
    }
    worst
}

/// Wraps an op output into a scalar via a fixed random projection so every
/// output element contributes to the root.
fn project(g: &mut Graph<f64>, y: NodeId, r: &Array4<f64>) -> NodeId {
    let ri = g.input(r.clone());
    let m = g.mul(y, ri).unwrap();
    g.sum_all(m).unwrap()
}

fn grad_conv2d(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    let k = [1usize, 3, 5][rng.gen_range(0..3)];
    let inputs = vec![
        rand_map(rng, (n, cin, h, w), -1.0, 1.0),
        rand_map(rng, (cout, cin, k, k), -1.0, 1.0),
        rand_map(rng, (1, cout, 1, 1), -1.0, 1.0),
    ];
    let r = rand_map(rng, (n, cout, h, w), -1.0, 1.0);
    GradCase {
        inputs,
        build: Box::new(move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2]).unwrap();
            project(g, y, &r)
        }),
    }
}

fn grad_batch_norm(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, c) = (rng.gen_range(2..=3), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let inputs = vec![
        rand_map(rng, (n, c, h, w), -2.0, 2.0),
        rand_map(rng, (1, c, 1, 1), 0.5, 1.5),
        rand_map(rng, (1, c, 1, 1), -0.5, 0.5),
    ];
    let r = rand_map(rng, (n, c, h, w), -1.0, 1.0);
    GradCase {
        inputs,
        build: Box::new(move |g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], BnMode::Train, None).unwrap().0;
            project(g, y, &r)
        }),
    }
}

fn grad_prelu(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    // Keep activations away from the kink at 0 so central differences stay on
    // one branch.
    let x = Array4::from_shape_fn((n, c, h, w), |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            -v
        } else {
            v
        }
    });
    let inputs = vec![x, rand_map(rng, (1, c, 1, 1), -0.5, 1.0)];
    let r = rand_map(rng, (n, c, h, w), -1.0, 1.0);
    GradCase {
        inputs,
        build: Box::new(move |g, ids| {
            let y = g.prelu(ids[0], ids[1]).unwrap();
            project(g, y, &r)
        }),
    }
}

fn grad_maxout(rng: &mut ChaCha8Rng) -> GradCase {
    let parts = rng.gen_range(2..=3);
    let dim = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4));
    let mut inputs: Vec<_> = (0..parts).map(|_| rand_map(rng, dim, -1.0, 1.0)).collect();
    // Separate the per-pixel winner from the runner-up so the max stays on
    // one branch under the probe step.
    for idx in ndarray::indices(dim) {
        let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
        for (i, x) in inputs.iter().enumerate() {
            if x[idx] > bv {
                bv = x[idx];
                bi = i;
            }
        }
        inputs[bi][idx] += 0.05;
    }
    let r = rand_map(rng, dim, -1.0, 1.0);
    GradCase {
        inputs,
        build: Box::new(move |g, ids| {
            let y = g.maxout(ids).unwrap();
            project(g, y, &r)
        }),
    }
}

fn grad_softmax(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(2..=5));
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let inputs = vec![rand_map(rng, (n, c, h, w), -2.0, 2.0)];
    let r = rand_map(rng, (n, c, h, w), -1.0, 1.0);
    GradCase {
        inputs,
        build: Box::new(move |g, ids| {
            let y = g.softmax_channels(ids[0]).unwrap();
            project(g, y, &r)
        }),
    }
}

fn grad_loss(rng: &mut ChaCha8Rng) -> GradCase {
    let c = rng.gen_range(2..=4);
    let (h, w) = (rng.gen_range(4..=6), rng.gen_range(4..=6));
    // Drive the loss through softmax exactly as training does; bounded logits
    // keep probabilities far above the log clamp.
    let logits = rand_map(rng, (1, c, h, w), -2.0, 2.0);
    let labels = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..c as u16));
    let y = one_hot::<f64>(&labels, c);
    let omega = rand_map(rng, (1, 1, h, w), 0.2, 2.0);
    GradCase {
        inputs: vec![logits],
        build: Box::new(move |g, ids| {
            let p = g.softmax_channels(ids[0]).unwrap();
            composite_loss(g, p, &y, &omega).unwrap().total
        }),
    }
}

fn grad_sample(rng: &mut ChaCha8Rng, kernel: SampleKernel) -> GradCase {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let (ih, iw) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
    let (oh, ow) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
    let inputs = vec![rand_map(rng, (n, c, ih, iw), -1.0, 1.0)];
    let grid = SamplingGrid::new((ih, iw), (oh, ow));
    let r = rand_map(rng, (n, c, oh, ow), -1.0, 1.0);
    GradCase {
        inputs,
        build: Box::new(move |g, ids| {
            let y = g.sample(ids[0], &grid, kernel).unwrap();
            project(g, y, &r)
        }),
    }
}

/// Runs every finite-difference line with `per_op` random cases each.
pub fn gradient_checks(seed: u64, per_op: usize) -> Report {
    type Mk = fn(&mut ChaCha8Rng) -> GradCase;
    let ops: &[(&'static str, Mk)] = &[
        ("conv2d", grad_conv2d),
        ("batch_norm", grad_batch_norm),
        ("prelu", grad_prelu),
        ("maxout", grad_maxout),
        ("softmax_channels", grad_softmax),
        ("composite_loss", grad_loss),
        ("sample_bilinear", |r| grad_sample(r, SampleKernel::Bilinear)),
        ("sample_bicubic", |r| grad_sample(r, SampleKernel::Bicubic)),
        ("sample_area", |r| grad_sample(r, SampleKernel::Area)),
    ];
    let mut lines = Vec::with_capacity(ops.len());
    for (idx, (name, mk)) in ops.iter().enumerate() {
        let mut rng = rng_for(seed, 0x100 + idx as u64);
        let mut failures = 0;
        let mut worst = 0.0f64;
        for _ in 0..per_op {
            let err = grad_case_err(&mk(&mut rng));
            worst = worst.max(err);
            if !(err < GRAD_TOL) {
                failures += 1;
            }
        }
        lines.push(CheckLine { name, instances: per_op, failures, worst });
    }
    Report { battery: "finite-difference gradients (64-bit)", metric: "rel err", lines }
}
