//! Oracles shared by the acceptance suite and the property tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stunet::arch::{build, forward_all, ArchConfig};
use stunet::tensor::kernels::{conv3d, INSTANCE_NORM_EPS, LEAKY_RELU_SLOPE};
use stunet::tensor::{Tape, Var};
use stunet::weights::{init_weights, is_head, transfer};
use stunet::{Result, Tensor};

/// Writes one line past the test harness's output capture.
pub fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Builds a scalar from the op's output so every output element gets a distinct random weight.
fn scalarize(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Central finite differences against reverse mode, in f64. Returns the worst
/// norm-relative error over the inputs: `|g_fd - g_ad| / max(|g_fd|, |g_ad|)`.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<(Tape<f64>, Var, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(format!("p{i}"), t.clone())).collect::<Result<_>>()?;
        let out = f(&mut tape, &vars)?;
        let loss = match weights {
            Some(w) => scalarize(&mut tape, out, w)?,
            None => out,
        };
        Ok((tape, out, loss))
    };
    let (probe, out, _) = eval(inputs, None)?;
    let shape = probe.value(out).shape().to_vec();
    let weights = rand_tensor(rng, &shape, -1.0, 1.0);
    let (tape, _, loss) = eval(inputs, Some(&weights))?;
    let grads = tape.backward(loss)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let ad = &grads[&format!("p{i}")];
        let (mut diff, mut n_ad, mut n_fd) = (0.0, 0.0, 0.0);
        for j in 0..x.numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] = x.data()[j] + h;
            let (t, _, l) = eval(&shifted, Some(&weights))?;
            let up = t.value(l).data()[0];
            shifted[i].data_mut()[j] = x.data()[j] - h;
            let (t, _, l) = eval(&shifted, Some(&weights))?;
            let down = t.value(l).data()[0];
            let fd = (up - down) / (2.0 * h);
            diff += (fd - ad.data()[j]).powi(2);
            n_ad += ad.data()[j].powi(2);
            n_fd += fd * fd;
        }
        let scale = n_ad.sqrt().max(n_fd.sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    Ok(worst)
}

fn dim(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.gen_range(1..=max)
}

fn spatial(rng: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    [dim(rng, max), dim(rng, max), dim(rng, max)]
}

/// One randomized instance of a differentiable op: inputs plus the function of them.
pub struct OpCase {
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
}

pub const GRAD_OPS: [&str; 14] = [
    "conv3d",
    "transpose_conv3d",
    "instance_norm",
    "leaky_relu",
    "upsample_nearest",
    "upsample_trilinear",
    "concat_channels",
    "add",
    "mul",
    "scale",
    "sum",
    "softmax_channels",
    "soft_dice_loss",
    "cross_entropy",
];

pub fn op_case(op: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let n = dim(rng, 2);
    let c = dim(rng, 3);
    let sp = spatial(rng, 4);
    let x5 = |rng: &mut ChaCha8Rng, ch: usize, sp: [usize; 3]| rand_tensor(rng, &[n, ch, sp[0], sp[1], sp[2]], -1.0, 1.0);
    match op {
        "conv3d" => {
            let co = dim(rng, 3);
            let k = [0, 1, 2].map(|_| rng.gen_range(1..=3usize));
            let stride = [0, 1, 2].map(|_| rng.gen_range(1..=2usize));
            let pad = [0, 1, 2].map(|a| rng.gen_range(0..=(k[a] / 2)));
            // extents large enough for the kernel
            let sp = [0, 1, 2].map(|a| sp[a].max(k[a]));
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![x5(rng, c, sp), rand_tensor(rng, &[co, c, k[0], k[1], k[2]], -1.0, 1.0)];
            if bias {
                inputs.push(rand_tensor(rng, &[co], -1.0, 1.0));
            }
            OpCase { inputs, f: Box::new(move |t, v| t.conv3d(v[0], v[1], v.get(2).copied(), stride, pad)) }
        }
        "transpose_conv3d" => {
            let co = dim(rng, 3);
            let s = [0, 1, 2].map(|_| rng.gen_range(1..=2usize));
            let sp = [0, 1, 2].map(|a| sp[a].min(2));
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![x5(rng, c, sp), rand_tensor(rng, &[c, co, s[0], s[1], s[2]], -1.0, 1.0)];
            if bias {
                inputs.push(rand_tensor(rng, &[co], -1.0, 1.0));
            }
            OpCase { inputs, f: Box::new(move |t, v| t.transpose_conv3d(v[0], v[1], v.get(2).copied(), s)) }
        }
        "instance_norm" => {
            // at least two voxels so the variance is informative
            let sp = if sp.iter().product::<usize>() < 2 { [2, sp[1], sp[2]] } else { sp };
            let inputs = vec![x5(rng, c, sp), rand_tensor(rng, &[c], 0.5, 1.5), rand_tensor(rng, &[c], -0.5, 0.5)];
            OpCase { inputs, f: Box::new(|t, v| t.instance_norm(v[0], v[1], v[2], INSTANCE_NORM_EPS)) }
        }
        "leaky_relu" => {
            // keep inputs away from the kink at 0
            let mut x = x5(rng, c, sp);
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.01;
                }
            }
            OpCase { inputs: vec![x], f: Box::new(|t, v| Ok(t.leaky_relu(v[0], LEAKY_RELU_SLOPE))) }
        }
        "upsample_nearest" | "upsample_trilinear" => {
            let f = [0, 1, 2].map(|_| rng.gen_range(1..=2usize));
            let sp = [0, 1, 2].map(|a| sp[a].min(3));
            let tri = op == "upsample_trilinear";
            OpCase {
                inputs: vec![x5(rng, c, sp)],
                f: Box::new(move |t, v| if tri { t.upsample_trilinear(v[0], f) } else { t.upsample_nearest(v[0], f) }),
            }
        }
        "concat_channels" => {
            let c2 = dim(rng, 3);
            OpCase { inputs: vec![x5(rng, c, sp), x5(rng, c2, sp)], f: Box::new(|t, v| t.concat_channels(v[0], v[1])) }
        }
        "add" => OpCase { inputs: vec![x5(rng, c, sp), x5(rng, c, sp)], f: Box::new(|t, v| t.add(v[0], v[1])) },
        "mul" => OpCase { inputs: vec![x5(rng, c, sp), x5(rng, c, sp)], f: Box::new(|t, v| t.mul(v[0], v[1])) },
        "scale" => {
            let k: f64 = rng.gen_range(-2.0..2.0);
            OpCase { inputs: vec![x5(rng, c, sp)], f: Box::new(move |t, v| Ok(t.scale(v[0], k))) }
        }
        "sum" => OpCase { inputs: vec![x5(rng, c, sp)], f: Box::new(|t, v| Ok(t.sum(v[0]))) },
        "softmax_channels" => {
            let c = c.max(2);
            OpCase { inputs: vec![rand_tensor(rng, &[n, c, sp[0], sp[1], sp[2]], -2.0, 2.0)], f: Box::new(|t, v| t.softmax_channels(v[0])) }
        }
        "soft_dice_loss" | "cross_entropy" => {
            let c = c.max(2);
            let vox = n * sp.iter().product::<usize>();
            let labels: Vec<usize> = (0..vox).map(|_| rng.gen_range(0..c)).collect();
            let p = rand_tensor(rng, &[n, c, sp[0], sp[1], sp[2]], 0.05, 1.0);
            if op == "cross_entropy" {
                OpCase { inputs: vec![p], f: Box::new(move |t, v| t.cross_entropy(v[0], labels.clone())) }
            } else {
                let target: Tensor<f64> = stunet::tensor::kernels::one_hot(&labels, n, c, &sp).expect("valid labels");
                OpCase { inputs: vec![p], f: Box::new(move |t, v| t.soft_dice_loss(v[0], target.clone())) }
            }
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// Worst gradcheck error per op over `cases` random instances each.
pub fn gradient_suite(cases: usize, seed: u64) -> Vec<(&'static str, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GRAD_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let case = op_case(op, &mut rng);
                let e = gradcheck(&case.inputs, &mut rng, case.f.as_ref()).unwrap_or_else(|e| panic!("{op}: {e}"));
                worst = worst.max(e);
            }
            (op, cases, worst)
        })
        .collect()
}

/// Direct nested-loop cross-correlation with zero padding, accumulated in f64.
pub fn naive_conv3d(x: &Tensor<f32>, w: &Tensor<f32>, b: Option<&Tensor<f32>>, stride: [usize; 3], pad: [usize; 3]) -> Vec<f64> {
    let [n, ci, d, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
    let [co, _, kd, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]];
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let xi = |s: usize, c: usize, z: isize, y: isize, q: isize| -> f64 {
        if z < 0 || y < 0 || q < 0 || z >= d as isize || y >= h as isize || q >= wd as isize {
            return 0.0;
        }
        x.data()[(((s * ci + c) * d + z as usize) * h + y as usize) * wd + q as usize] as f64
    };
    let mut out = Vec::with_capacity(n * co * od * oh * ow);
    for s in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for q in 0..ow {
                        let mut acc = b.map(|b| b.data()[o] as f64).unwrap_or(0.0);
                        for c in 0..ci {
                            for a in 0..kd {
                                for e in 0..kh {
                                    for f in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + e) as isize - pad[1] as isize;
                                        let iq = (q * stride[2] + f) as isize - pad[2] as isize;
                                        let wv = w.data()[(((o * ci + c) * kd + a) * kh + e) * kw + f] as f64;
                                        acc += wv * xi(s, c, iz, iy, iq);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

/// Random strided/padded conv instance with extents up to `max_extent`;
/// returns the max absolute deviation from [`naive_conv3d`].
pub fn conv_oracle_instance(rng: &mut ChaCha8Rng, max_extent: usize) -> f64 {
    let n = dim(rng, 2);
    let ci = dim(rng, 3);
    let co = dim(rng, 3);
    let k = [0, 1, 2].map(|_| rng.gen_range(1..=3usize));
    let stride = [0, 1, 2].map(|_| rng.gen_range(1..=3usize));
    let pad = [0, 1, 2].map(|a| rng.gen_range(0..=k[a] - 1));
    let sp = [0, 1, 2].map(|a| rng.gen_range(k[a].saturating_sub(2 * pad[a]).max(1)..=max_extent));
    let x = Tensor::from_fn(&[n, ci, sp[0], sp[1], sp[2]], |_| rng.gen_range(-1.0f32..1.0));
    let w = Tensor::from_fn(&[co, ci, k[0], k[1], k[2]], |_| rng.gen_range(-1.0f32..1.0));
    let b = rng.gen_bool(0.5).then(|| Tensor::from_fn(&[co], |_| rng.gen_range(-1.0f32..1.0)));
    let y = conv3d(&x, &w, b.as_ref(), stride, pad).expect("valid geometry");
    let r = naive_conv3d(&x, &w, b.as_ref(), stride, pad);
    assert_eq!(y.numel(), r.len());
    y.data().iter().zip(&r).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max)
}

/// Small network used by the transfer checks.
pub fn toy_config(in_channels: usize, num_classes: usize) -> ArchConfig {
    ArchConfig { widths: vec![2, 4, 4, 8, 8, 8], in_channels, num_classes, ..ArchConfig::stu_net_s() }
}

/// Number of inputs (out of `trials`) whose pre-head activations after
/// transfer to a new class count are bit-identical to the source.
pub fn transfer_bit_exact_trials(trials: usize, seed: u64) -> usize {
    let src_g = build(&toy_config(1, 5)).unwrap();
    let src = init_weights(&src_g, seed).unwrap();
    let dst_g = build(&toy_config(1, 3)).unwrap();
    let (dst, _) = transfer(&src, &dst_g, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0;
    for _ in 0..trials {
        let x = Tensor::from_fn(&[1, 1, 32, 32, 32], |_| rng.gen_range(-2.0f32..2.0));
        let a = forward_all(&src_g, &src, &x, true).unwrap().activations.unwrap();
        let b = forward_all(&dst_g, &dst, &x, true).unwrap().activations.unwrap();
        let pre_head: Vec<&String> = a.keys().filter(|k| !is_head(k)).collect();
        let same = !pre_head.is_empty() && pre_head.iter().all(|k| b.get(*k).is_some_and(|t| t.bit_eq(&a[*k])));
        ok += same as usize;
    }
    ok
}

/// Channel replication check: the replicated network fed `[x, 0, ...]` must
/// produce exactly the source's pre-head activations for `x`. Returns the
/// number of passing trials.
pub fn replication_trials(trials: usize, channels: usize, seed: u64) -> usize {
    let src_g = build(&toy_config(1, 4)).unwrap();
    let src = init_weights(&src_g, seed).unwrap();
    let dst_g = build(&toy_config(channels, 4)).unwrap();
    let (dst, _) = transfer(&src, &dst_g, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut ok = 0;
    for _ in 0..trials {
        let vox = 32 * 32 * 32;
        let x = Tensor::from_fn(&[1, 1, 32, 32, 32], |_| rng.gen_range(-2.0f32..2.0));
        let padded = Tensor::from_fn(&[1, channels, 32, 32, 32], |i| if i < vox { x.data()[i] } else { 0.0 });
        let a = forward_all(&src_g, &src, &x, true).unwrap().activations.unwrap();
        let b = forward_all(&dst_g, &dst, &padded, true).unwrap().activations.unwrap();
        let same = a
            .iter()
            .filter(|(k, _)| !is_head(k) && k.as_str() != "input")
            .all(|(k, t)| b.get(k).is_some_and(|u| u.shape() == t.shape() && u.data() == t.data()));
        ok += same as usize;
    }
    ok
}
