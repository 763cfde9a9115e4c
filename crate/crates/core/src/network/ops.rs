//! Tensor operators used by the U-Net: convolution, instance normalization,
//! pooling, upsampling and the channel softmax.

use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::tensor::Tensor4D;

/// Epsilon added to the variance inside instance normalization.
pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Same-size 3D cross-correlation with zero padding.
///
/// `weights` is laid out `[c_out][c_in][kz][ky][kx]` (kx fastest) and must
/// hold `kx * ky * kz * c_in * c_out` values; `bias.len()` gives `c_out`.
/// Kernel edges must be odd so that `(k - 1) / 2` padding preserves dims.
pub fn conv3d(input: &Tensor4D, weights: &[f32], bias: &[f32], kernel: [usize; 3]) -> Result<Tensor4D> {
    if kernel.iter().any(|k| k % 2 == 0) {
        return arg_err(format!("kernel edges must be odd, got {kernel:?}"));
    }
    let cin = input.channels();
    let cout = bias.len();
    let [kx, ky, kz] = kernel;
    let ksize = kx * ky * kz;
    if weights.len() != ksize * cin * cout {
        return arg_err(format!(
            "conv weight length {} does not match {kx}x{ky}x{kz} kernel with {cin} -> {cout} channels ({})",
            weights.len(),
            ksize * cin * cout
        ));
    }
    let dims = input.dims();
    let [nx, ny, nz] = dims;
    let [px, py, pz] = [kx / 2, ky / 2, kz / 2];
    let n = input.voxels();
    let mut out = Tensor4D::zeros(cout, dims);

    out.data_mut().par_chunks_mut(n).enumerate().for_each(|(co, dst)| {
        dst.fill(bias[co]);
        for ci in 0..cin {
            let src = input.channel(ci);
            let wbase = (co * cin + ci) * ksize;
            for dz in 0..kz {
                let (z0, z1) = valid_range(nz, dz, pz);
                for dy in 0..ky {
                    let (y0, y1) = valid_range(ny, dy, py);
                    for dx in 0..kx {
                        let (x0, x1) = valid_range(nx, dx, px);
                        if x0 >= x1 {
                            continue;
                        }
                        let w = weights[wbase + (dz * ky + dy) * kx + dx];
                        for z in z0..z1 {
                            let sz = z + dz - pz;
                            for y in y0..y1 {
                                let sy = y + dy - py;
                                let drow = (z * ny + y) * nx;
                                let s0 = (sz * ny + sy) * nx + x0 + dx - px;
                                let d = &mut dst[drow + x0..drow + x1];
                                let s = &src[s0..s0 + (x1 - x0)];
                                for (o, i) in d.iter_mut().zip(s) {
                                    *o += w * i;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Output positions `t` for which `t + d - pad` lands inside `0..n`.
#[inline]
fn valid_range(n: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (n + pad).saturating_sub(d).min(n);
    (lo, hi.max(lo))
}

/// Per-channel standardization over the spatial voxels of a single instance,
/// followed by the affine map `gamma * x_hat + beta`.
pub fn instance_norm(input: &Tensor4D, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor4D> {
    let c = input.channels();
    if gamma.len() != c || beta.len() != c {
        return arg_err(format!(
            "instance norm expects {c} affine parameters, got gamma {} / beta {}",
            gamma.len(),
            beta.len()
        ));
    }
    if eps <= 0.0 {
        return arg_err("instance norm eps must be positive");
    }
    let n = input.voxels();
    let mut out = input.clone();
    out.data_mut().par_chunks_mut(n).enumerate().for_each(|(ch, x)| {
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = gamma[ch] as f64 / (var + eps as f64).sqrt();
        let shift = beta[ch] as f64;
        for v in x.iter_mut() {
            *v = ((*v as f64 - mean) * scale + shift) as f32;
        }
    });
    Ok(out)
}

pub fn relu_inplace(t: &mut Tensor4D) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// 2x2x2 max pooling with stride 2.
pub fn max_pool_2x(input: &Tensor4D) -> Result<Tensor4D> {
    let [nx, ny, nz] = input.dims();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return arg_err(format!("max pooling needs even dims, got {:?}", input.dims()));
    }
    let od = [nx / 2, ny / 2, nz / 2];
    let out = Tensor4D::from_fn(input.channels(), od, |c, x, y, z| {
        let mut m = f32::NEG_INFINITY;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(input.get(c, 2 * x + dx, 2 * y + dy, 2 * z + dz));
                }
            }
        }
        m
    });
    Ok(out)
}

/// Doubles every spatial dim by replicating each voxel into a 2x2x2 block.
pub fn nearest_upsample_2x(input: &Tensor4D) -> Tensor4D {
    let [nx, ny, nz] = input.dims();
    Tensor4D::from_fn(input.channels(), [2 * nx, 2 * ny, 2 * nz], |c, x, y, z| {
        input.get(c, x / 2, y / 2, z / 2)
    })
}

/// Softmax across channels at every voxel, with max subtraction.
pub fn softmax_channels(input: &Tensor4D) -> Tensor4D {
    let c = input.channels();
    let n = input.voxels();
    let src = input.data();
    let mut out = input.clone();
    let dst = out.data_mut();
    for i in 0..n {
        let m = (0..c).map(|k| src[k * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for k in 0..c {
            let e = ((src[k * n + i] - m) as f64).exp();
            dst[k * n + i] = e as f32;
            sum += e;
        }
        for k in 0..c {
            dst[k * n + i] = (dst[k * n + i] as f64 / sum) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tensor(c: usize, dims: [usize; 3], seed: u64) -> Tensor4D {
        let mut rng = crate::seeded_rng(seed);
        Tensor4D::from_fn(c, dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops over output and kernel positions with explicit bounds checks.
    fn conv_oracle(input: &Tensor4D, w: &[f32], b: &[f32], k: [usize; 3]) -> Tensor4D {
        let cin = input.channels();
        let d = input.dims();
        Tensor4D::from_fn(b.len(), d, |co, x, y, z| {
            let mut acc = b[co] as f64;
            for ci in 0..cin {
                for kz in 0..k[2] {
                    for ky in 0..k[1] {
                        for kx in 0..k[0] {
                            let sx = x as i64 + kx as i64 - (k[0] / 2) as i64;
                            let sy = y as i64 + ky as i64 - (k[1] / 2) as i64;
                            let sz = z as i64 + kz as i64 - (k[2] / 2) as i64;
                            if sx < 0 || sy < 0 || sz < 0 || sx >= d[0] as i64 || sy >= d[1] as i64 || sz >= d[2] as i64 {
                                continue;
                            }
                            let wi = (((co * cin + ci) * k[2] + kz) * k[1] + ky) * k[0] + kx;
                            acc += w[wi] as f64 * input.get(ci, sx as usize, sy as usize, sz as usize) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn identity_1x1x1_conv() {
        let x = random_tensor(3, [4, 3, 2], 1);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let y = conv3d(&x, &w, &[0.0; 3], [1, 1, 1]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_counts_padded_support() {
        let x = Tensor4D::filled(1, [5, 5, 5], 1.0);
        let y = conv3d(&x, &[1.0; 27], &[0.0], [3, 3, 3]).unwrap();
        assert_eq!(y.get(0, 2, 2, 2), 27.0);
        assert_eq!(y.get(0, 1, 3, 2), 27.0);
        assert_eq!(y.get(0, 0, 2, 2), 18.0); // face centre
        assert_eq!(y.get(0, 0, 0, 2), 12.0); // edge
        assert_eq!(y.get(0, 0, 0, 0), 8.0); // corner
    }

    #[test]
    fn random_conv_matches_oracle() {
        for (seed, k) in [(2u64, [3, 3, 3]), (3, [1, 1, 1]), (4, [3, 1, 3]), (5, [5, 3, 1])] {
            let x = random_tensor(2, [5, 4, 6], seed);
            let mut rng = crate::seeded_rng(seed + 100);
            let w: Vec<f32> = (0..k.iter().product::<usize>() * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = [0.1, -0.2, 0.3];
            let y = conv3d(&x, &w, &b, k).unwrap();
            let o = conv_oracle(&x, &w, &b, k);
            for (a, e) in y.data().iter().zip(o.data()) {
                assert!((a - e).abs() < 1e-5, "kernel {k:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor4D::zeros(2, [3, 3, 3]);
        assert!(conv3d(&x, &[0.0; 27], &[0.0], [3, 3, 3]).is_err());
        assert!(conv3d(&x, &[0.0; 16], &[0.0], [2, 2, 2]).is_err());
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let x = random_tensor(2, [4, 4, 4], 8);
        let y = instance_norm(&x, &[1.0, 1.0], &[0.0, 0.0], INSTANCE_NORM_EPS).unwrap();
        for c in 0..2 {
            let ch = y.channel(c);
            let m = ch.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let v = ch.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_norm_matches_two_pass_oracle() {
        let x = random_tensor(2, [4, 4, 4], 9);
        let gamma = [1.5f32, -0.5];
        let beta = [0.25f32, 2.0];
        let y = instance_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = x.channel(c).iter().map(|&v| v as f64).collect();
            let mut mean = 0.0;
            for v in &vals {
                mean += v;
            }
            mean /= 64.0;
            let mut var = 0.0;
            for v in &vals {
                var += (v - mean) * (v - mean);
            }
            var /= 64.0;
            for (i, v) in vals.iter().enumerate() {
                let e = gamma[c] as f64 * (v - mean) / (var + 1e-5).sqrt() + beta[c] as f64;
                assert!((y.channel(c)[i] as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn instance_norm_of_constant_channel_is_beta() {
        let x = Tensor4D::filled(1, [2, 2, 2], 5.0);
        let y = instance_norm(&x, &[3.0], &[0.7], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn max_pool_block_max_and_locality() {
        let x = random_tensor(2, [4, 4, 4], 10);
        let y = max_pool_2x(&x).unwrap();
        for c in 0..2 {
            for z in 0..2 {
                for yy in 0..2 {
                    for xx in 0..2 {
                        let mut m = f32::MIN;
                        for i in 0..8 {
                            m = m.max(x.get(c, 2 * xx + (i & 1), 2 * yy + (i >> 1 & 1), 2 * z + (i >> 2)));
                        }
                        assert_eq!(y.get(c, xx, yy, z), m);
                    }
                }
            }
        }
        let mut spike = Tensor4D::zeros(1, [4, 4, 4]);
        spike.set(0, 3, 0, 2, 1.0);
        let p = max_pool_2x(&spike).unwrap();
        assert_eq!(p.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(max_pool_2x(&Tensor4D::zeros(1, [3, 2, 2])).is_err());
        assert_eq!(max_pool_2x(&Tensor4D::filled(1, [2, 2, 2], 4.0)).unwrap().data(), &[4.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor4D::filled(1, [1, 1, 1], 7.0);
        let y = nearest_upsample_2x(&x);
        assert_eq!(y.dims(), [2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    proptest! {
        #[test]
        fn pool_inverts_upsample(seed in 0u64..500, c in 1usize..3, nx in 1usize..4, ny in 1usize..4, nz in 1usize..4) {
            let x = random_tensor(c, [nx, ny, nz], seed);
            prop_assert_eq!(max_pool_2x(&nearest_upsample_2x(&x)).unwrap(), x);
        }

        #[test]
        fn softmax_sums_to_one(seed in 0u64..500, scale in 0.1f32..200.0) {
            let mut x = random_tensor(3, [3, 2, 2], seed);
            for v in x.data_mut() { *v *= scale; }
            let p = softmax_channels(&x);
            for i in 0..12 {
                let s: f32 = (0..3).map(|k| p.data()[k * 12 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
                prop_assert!((0..3).all(|k| p.data()[k * 12 + i] >= 0.0));
            }
        }
    }
}
