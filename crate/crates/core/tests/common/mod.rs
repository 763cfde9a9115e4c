//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use voxseg::network::{build_unet, LayerKind, Model, NetworkConfig};
use voxseg::{IntensityKind, Tensor4D, Volume3D};

pub fn toy_config(kernel_plan: &[usize]) -> NetworkConfig {
    NetworkConfig {
        in_channels: 1,
        num_classes: 3,
        base_width: 2,
        num_stages: kernel_plan.len(),
        kernel_plan: kernel_plan.to_vec(),
        convs_per_stage: 2,
    }
}

/// Seeded model whose biases and norm affines are also random, so the oracle
/// comparison exercises every parameter.
pub fn perturbed_model(cfg: &NetworkConfig, seed: u64) -> Model {
    let mut model = build_unet(cfg, seed).unwrap();
    let mut rng = voxseg::seeded_rng(seed ^ 0x5eed);
    for layer in model.layers_mut() {
        match layer.spec.kind {
            LayerKind::Conv => layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3)),
            LayerKind::InstanceNorm => {
                layer.weight.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
                layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
            _ => {}
        }
    }
    model
}

/// Dense `[c][z][y][x]` array in f64.
#[derive(Clone)]
pub struct Grid {
    pub c: usize,
    pub n: [usize; 3],
    pub v: Vec<f64>,
}

impl Grid {
    fn zeros(c: usize, n: [usize; 3]) -> Self {
        Grid { c, n, v: vec![0.0; c * n[0] * n[1] * n[2]] }
    }
    fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.v[((c * self.n[2] + z) * self.n[1] + y) * self.n[0] + x]
    }
    fn at_mut(&mut self, c: usize, x: usize, y: usize, z: usize) -> &mut f64 {
        let [nx, ny, nz] = self.n;
        &mut self.v[((c * nz + z) * ny + y) * nx + x]
    }
    fn from_tensor(t: &Tensor4D) -> Self {
        Grid { c: t.channels(), n: t.dims(), v: t.data().iter().map(|&v| v as f64).collect() }
    }
}

fn conv(x: &Grid, w: &[f32], b: &[f32], k: usize) -> Grid {
    let cout = b.len();
    let p = (k / 2) as isize;
    let mut out = Grid::zeros(cout, x.n);
    for co in 0..cout {
        for z in 0..x.n[2] {
            for y in 0..x.n[1] {
                for xx in 0..x.n[0] {
                    let mut s = b[co] as f64;
                    for ci in 0..x.c {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sx = xx as isize + kx as isize - p;
                                    let sy = y as isize + ky as isize - p;
                                    let sz = z as isize + kz as isize - p;
                                    if sx < 0 || sy < 0 || sz < 0 {
                                        continue;
                                    }
                                    let (sx, sy, sz) = (sx as usize, sy as usize, sz as usize);
                                    if sx >= x.n[0] || sy >= x.n[1] || sz >= x.n[2] {
                                        continue;
                                    }
                                    let wi = (((co * x.c + ci) * k + kz) * k + ky) * k + kx;
                                    s += w[wi] as f64 * x.at(ci, sx, sy, sz);
                                }
                            }
                        }
                    }
                    *out.at_mut(co, xx, y, z) = s;
                }
            }
        }
    }
    out
}

fn norm_relu(x: &Grid, g: &[f32], b: &[f32]) -> Grid {
    let mut out = x.clone();
    let n = x.n[0] * x.n[1] * x.n[2];
    for c in 0..x.c {
        let ch = &x.v[c * n..(c + 1) * n];
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        for i in 0..n {
            let y = (ch[i] - mean) / (var + 1e-5).sqrt() * g[c] as f64 + b[c] as f64;
            out.v[c * n + i] = y.max(0.0);
        }
    }
    out
}

fn pool(x: &Grid) -> Grid {
    let n = [x.n[0] / 2, x.n[1] / 2, x.n[2] / 2];
    let mut out = Grid::zeros(x.c, n);
    for c in 0..x.c {
        for z in 0..n[2] {
            for y in 0..n[1] {
                for xx in 0..n[0] {
                    let mut m = f64::NEG_INFINITY;
                    for d in 0..8 {
                        m = m.max(x.at(c, 2 * xx + (d & 1), 2 * y + ((d >> 1) & 1), 2 * z + (d >> 2)));
                    }
                    *out.at_mut(c, xx, y, z) = m;
                }
            }
        }
    }
    out
}

fn upsample(x: &Grid) -> Grid {
    let n = [x.n[0] * 2, x.n[1] * 2, x.n[2] * 2];
    let mut out = Grid::zeros(x.c, n);
    for c in 0..x.c {
        for z in 0..n[2] {
            for y in 0..n[1] {
                for xx in 0..n[0] {
                    *out.at_mut(c, xx, y, z) = x.at(c, xx / 2, y / 2, z / 2);
                }
            }
        }
    }
    out
}

/// Straightforward f64 U-Net evaluation driven by the model's stored layers.
/// Returns probabilities in `(c, z, y, x)` order, matching `Tensor4D::data`.
pub fn naive_forward(model: &Model, input: &Tensor4D) -> Vec<f64> {
    let cfg = model.config();
    let mut layers = model.layers().iter().filter(|l| matches!(l.spec.kind, LayerKind::Conv | LayerKind::InstanceNorm));
    let mut block = |x: &Grid| {
        let c = layers.next().unwrap();
        let n = layers.next().unwrap();
        norm_relu(&conv(x, &c.weight, &c.bias, c.spec.kernel[0]), &n.weight, &n.bias)
    };
    let mut x = Grid::from_tensor(input);
    let mut skips = Vec::new();
    for s in 0..cfg.num_stages {
        if s > 0 {
            x = pool(&x);
        }
        for _ in 0..cfg.convs_per_stage {
            x = block(&x);
        }
        skips.push(x.clone());
    }
    skips.pop();
    for _ in (0..cfg.num_stages - 1).rev() {
        let up = upsample(&block(&x));
        let skip = skips.pop().unwrap();
        let mut cat = Grid::zeros(skip.c + up.c, skip.n);
        cat.v[..skip.v.len()].copy_from_slice(&skip.v);
        cat.v[skip.v.len()..].copy_from_slice(&up.v);
        x = cat;
        for _ in 0..cfg.convs_per_stage {
            x = block(&x);
        }
    }
    let head = model.layers().iter().rev().find(|l| l.spec.kind == LayerKind::Conv).unwrap();
    let logits = conv(&x, &head.weight, &head.bias, 1);
    let n = logits.n[0] * logits.n[1] * logits.n[2];
    let mut out = logits.v.clone();
    for i in 0..n {
        let e: Vec<f64> = (0..logits.c).map(|c| logits.v[c * n + i].exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..logits.c {
            out[c * n + i] = e[c] / s;
        }
    }
    out
}

/// Parameter total from closed-form per-stage expressions.
pub fn analytic_parameter_tally(cfg: &NetworkConfig) -> usize {
    let w = |s: usize| cfg.base_width << s;
    let k3 = |s: usize| cfg.kernel_plan[s].pow(3);
    // conv weights + bias + norm gamma/beta
    let block = |k: usize, cin: usize, cout: usize| k * cin * cout + cout + 2 * cout;
    let mut total = 0;
    for s in 0..cfg.num_stages {
        let cin = if s == 0 { cfg.in_channels } else { w(s - 1) };
        total += block(k3(s), cin, w(s)) + (cfg.convs_per_stage - 1) * block(k3(s), w(s), w(s));
    }
    for s in 0..cfg.num_stages - 1 {
        total += block(1, w(s + 1), w(s));
        total += block(k3(s), 2 * w(s), w(s)) + (cfg.convs_per_stage - 1) * block(k3(s), w(s), w(s));
    }
    total + w(0) * cfg.num_classes + cfg.num_classes
}

/// Smooth blob on a noisy background, one channel.
pub fn synthetic_volume(dims: [usize; 3], spacing: [f64; 3], seed: u64) -> Volume3D {
    let mut rng = voxseg::seeded_rng(seed);
    let c = dims.map(|d| d as f64 / 2.0);
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let r2 = [x, y, z].iter().zip(c).map(|(&p, c)| ((p as f64 - c) / c).powi(2)).sum::<f64>();
                data.push((300.0 * (-3.0 * r2).exp() + 50.0 + rng.random_range(-5.0..5.0)) as f32);
            }
        }
    }
    Volume3D::new(dims, 1, spacing, data, IntensityKind::Continuous).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
