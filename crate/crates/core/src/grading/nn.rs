//! A small convolutional network with hand-written forward and backward
//! passes: four `conv3x3 -> ReLU -> maxpool2 -> dropout` blocks, global
//! average and max pooling (concatenated), one fully-connected feature layer
//! and a linear output. The max half keeps small localized cues such as a
//! narrowed joint space from being averaged away over the whole map.
//!
//! Parameters live in one flat buffer so the optimizer and checkpoints can
//! treat them uniformly. Convolutions go through im2col and `sgemm`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Shape of the network.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Arch {
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub n_out: usize,
    pub input_hw: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Net {
    pub arch: Arch,
    convs: Vec<Dense>,
    fc: Dense,
    out: Dense,
    n_params: usize,
}

/// Per-block activations kept for the backward pass.
struct BlockCache {
    h: usize,
    w: usize,
    cols: Vec<f32>,
    act: Vec<f32>,
    argmax: Vec<u32>,
    mask: Option<Vec<f32>>,
}

pub(crate) struct Trace {
    blocks: Vec<BlockCache>,
    /// Per channel: mean, then max, of the last feature map.
    pooled: Vec<f32>,
    /// Flat index of each channel's maximum in the last feature map.
    max_at: Vec<usize>,
    pub features: Vec<f32>,
    pub logits: Vec<f32>,
}

/// How dropout behaves during a pass.
pub(crate) enum Dropout<'a, R: Rng> {
    Off,
    On { rate: f32, rng: &'a mut R },
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], isize, isize),
    b: (&[f32], isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose lengths cover the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `cols[(ci*9 + ky*3 + kx), y*w + x] = input[ci, y+ky-1, x+kx-1]` (zero outside).
fn im2col(input: &[f32], c: usize, h: usize, w: usize, cols: &mut Vec<f32>) {
    let hw = h * w;
    cols.clear();
    cols.resize(c * 9 * hw, 0.0);
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dx = kx as isize - 1;
                let x0 = if dx < 0 { 1 } else { 0 };
                let x1 = if dx > 0 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for x in x0..x1 {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dx = kx as isize - 1;
                let x0 = if dx < 0 { 1 } else { 0 };
                let x1 = if dx > 0 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    for x in x0..x1 {
                        dst[(x as isize + dx) as usize] += src[x];
                    }
                }
            }
        }
    }
    out
}

fn maxpool2(act: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let i0 = base + 2 * y * w + 2 * x;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if act[i] > act[best] {
                        best = i;
                    }
                }
                out.push(act[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

impl Net {
    pub fn new(arch: Arch) -> Net {
        let mut off = 0;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense { n_in, n_out, w: off, b: off + n_in * n_out };
            off += n_in * n_out + n_out;
            d
        };
        let convs: Vec<Dense> = arch
            .channels
            .windows(2)
            .map(|c| dense(c[0] * 9, c[1]))
            .collect();
        let last = *arch.channels.last().expect("at least one channel count");
        let fc = dense(2 * last, arch.hidden);
        let out = dense(arch.hidden, arch.n_out);
        Net { arch, convs, fc, out, n_params: off }
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    /// He-normal weights, zero biases, with `out_bias` on the output layer.
    pub fn init<R: Rng>(&self, rng: &mut R, out_bias: &[f32]) -> Vec<f32> {
        let mut p = vec![0.0f32; self.n_params];
        for d in self.convs.iter().chain([&self.fc, &self.out]) {
            let std = (2.0 / d.n_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut p[d.w..d.w + d.n_in * d.n_out] {
                *v = normal.sample(rng) as f32;
            }
        }
        // Keep the output layer small so initial predictions sit near the bias.
        for v in &mut p[self.out.w..self.out.w + self.out.n_in * self.out.n_out] {
            *v *= 0.1;
        }
        p[self.out.b..self.out.b + self.out.n_out].copy_from_slice(out_bias);
        p
    }

    pub fn input_len(&self) -> usize {
        self.arch.channels[0] * self.arch.input_hw.0 * self.arch.input_hw.1
    }

    pub fn forward<R: Rng>(&self, params: &[f32], input: &[f32], mut dropout: Dropout<'_, R>) -> Trace {
        debug_assert_eq!(input.len(), self.input_len());
        let (mut h, mut w) = self.arch.input_hw;
        let mut x = input.to_vec();
        let mut blocks = Vec::with_capacity(self.convs.len());
        for d in &self.convs {
            let cin = d.n_in / 9;
            let hw = h * w;
            let mut cols = Vec::new();
            im2col(&x, cin, h, w, &mut cols);
            let mut act = vec![0.0f32; d.n_out * hw];
            for (co, plane) in act.chunks_mut(hw).enumerate() {
                plane.fill(params[d.b + co]);
            }
            gemm(
                d.n_out,
                d.n_in,
                hw,
                (&params[d.w..], d.n_in as isize, 1),
                (&cols, hw as isize, 1),
                1.0,
                &mut act,
            );
            act.iter_mut().for_each(|v| *v = v.max(0.0));
            let (mut pooled, argmax) = maxpool2(&act, d.n_out, h, w);
            let mask = match &mut dropout {
                Dropout::Off => None,
                Dropout::On { rate, rng } => {
                    let keep = 1.0 - *rate;
                    let m: Vec<f32> = (0..pooled.len())
                        .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    pooled.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
            };
            blocks.push(BlockCache { h, w, cols, act, argmax, mask });
            h /= 2;
            w /= 2;
            x = pooled;
        }
        let area = (h * w) as f32;
        let mut pooled: Vec<f32> = x.chunks(h * w).map(|p| p.iter().sum::<f32>() / area).collect();
        let max_at: Vec<usize> = x
            .chunks(h * w)
            .enumerate()
            .map(|(ci, p)| {
                let (i, _) = p.iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                ci * h * w + i
            })
            .collect();
        pooled.extend(max_at.iter().map(|&i| x[i]));
        debug_assert_eq!(pooled.len(), self.fc.n_in);
        let features = self.dense_forward(&self.fc, params, &pooled, true);
        let logits = self.dense_forward(&self.out, params, &features, false);
        Trace { blocks, pooled, max_at, features, logits }
    }

    fn dense_forward(&self, d: &Dense, params: &[f32], x: &[f32], relu: bool) -> Vec<f32> {
        (0..d.n_out)
            .map(|o| {
                let row = &params[d.w + o * d.n_in..][..d.n_in];
                let s = params[d.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
                if relu { s.max(0.0) } else { s }
            })
            .collect()
    }

    /// Accumulate parameter gradients for `d loss / d logits = dlogits` into `grad`.
    pub fn backward(&self, params: &[f32], trace: &Trace, dlogits: &[f32], grad: &mut [f32]) {
        let dfeat = self.dense_backward(&self.out, params, &trace.features, dlogits, grad);
        let dfeat: Vec<f32> = dfeat
            .iter()
            .zip(&trace.features)
            .map(|(g, f)| if *f > 0.0 { *g } else { 0.0 })
            .collect();
        let dpooled = self.dense_backward(&self.fc, params, &trace.pooled, &dfeat, grad);

        let last = trace.blocks.last().expect("network has conv blocks");
        let (ho, wo) = (last.h / 2, last.w / 2);
        let area = (ho * wo) as f32;
        let c = trace.max_at.len();
        let mut dx: Vec<f32> = dpooled[..c]
            .iter()
            .flat_map(|g| std::iter::repeat(g / area).take(ho * wo))
            .collect();
        for (&i, g) in trace.max_at.iter().zip(&dpooled[c..]) {
            dx[i] += g;
        }

        for (bi, (d, cache)) in self.convs.iter().zip(&trace.blocks).enumerate().rev() {
            let hw = cache.h * cache.w;
            if let Some(mask) = &cache.mask {
                dx.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            let mut dact = vec![0.0f32; d.n_out * hw];
            for (g, &i) in dx.iter().zip(&cache.argmax) {
                if cache.act[i as usize] > 0.0 {
                    dact[i as usize] += g;
                }
            }
            for (co, plane) in dact.chunks(hw).enumerate() {
                grad[d.b + co] += plane.iter().sum::<f32>();
            }
            // dW[cout, k] += dact[cout, hw] * cols[k, hw]^T
            gemm(
                d.n_out,
                hw,
                d.n_in,
                (&dact, hw as isize, 1),
                (&cache.cols, 1, hw as isize),
                1.0,
                &mut grad[d.w..d.w + d.n_in * d.n_out],
            );
            if bi > 0 {
                // dcols[k, hw] = W[cout, k]^T * dact[cout, hw]
                let mut dcols = vec![0.0f32; d.n_in * hw];
                gemm(
                    d.n_in,
                    d.n_out,
                    hw,
                    (&params[d.w..], 1, d.n_in as isize),
                    (&dact, hw as isize, 1),
                    0.0,
                    &mut dcols,
                );
                dx = col2im(&dcols, d.n_in / 9, cache.h, cache.w);
            }
        }
    }

    fn dense_backward(&self, d: &Dense, params: &[f32], x: &[f32], dy: &[f32], grad: &mut [f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; d.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[d.b + o] += g;
            let row = &params[d.w + o * d.n_in..][..d.n_in];
            let grow = &mut grad[d.w + o * d.n_in..][..d.n_in];
            for i in 0..d.n_in {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Net {
        Net::new(Arch { channels: vec![2, 3, 4], hidden: 5, n_out: 3, input_hw: (9, 8) })
    }

    /// Scalar objective sum_j c_j * logit_j, so d/dlogits = c.
    fn objective(net: &Net, p: &[f32], x: &[f32], c: &[f32], seed: Option<u64>) -> f64 {
        let t = match seed {
            None => net.forward::<ChaCha8Rng>(p, x, Dropout::Off),
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                net.forward(p, x, Dropout::On { rate: 0.3, rng: &mut rng })
            }
        };
        t.logits.iter().zip(c).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    fn check_gradient(seed: Option<u64>) {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = net.init(&mut rng, &[0.1, -0.2, 0.3]);
        let x: Vec<f32> = (0..net.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = [0.7f32, -1.3, 0.4];
        let trace = match seed {
            None => net.forward::<ChaCha8Rng>(&p, &x, Dropout::Off),
            Some(s) => {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                net.forward(&p, &x, Dropout::On { rate: 0.3, rng: &mut r })
            }
        };
        let mut grad = vec![0.0f32; net.num_params()];
        net.backward(&p, &trace, &c, &mut grad);

        let fd = |p: &mut Vec<f32>, i: usize, h: f32| {
            let orig = p[i];
            p[i] = orig + h;
            let up = objective(&net, p, &x, &c, seed);
            p[i] = orig - h;
            let down = objective(&net, p, &x, &c, seed);
            p[i] = orig;
            (up - down) / (2.0 * h as f64)
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-2 * a.abs().max(b.abs()).max(1e-2);
        let mut checked = 0;
        for i in (0..net.num_params()).step_by(7) {
            let (coarse, fine) = (fd(&mut p, i, 1e-3), fd(&mut p, i, 3e-4));
            // A ReLU or max-pool switch inside the stencil shows up as
            // step-size dependence; such coordinates are not smooth there.
            if !close(coarse, fine) {
                continue;
            }
            let an = grad[i] as f64;
            assert!(close(fine, an), "param {i}: fd {fine} vs analytic {an}");
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check_gradient(None);
    }

    #[test]
    fn gradient_with_dropout_mask() {
        check_gradient(Some(11));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, h, w) = (2, 5, 4);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.gen()).collect();
        let y: Vec<f32> = (0..c * 9 * h * w).map(|_| rng.gen()).collect();
        let mut cols = Vec::new();
        im2col(&x, c, h, w, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im(&y, c, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let net = Net::new(Arch { channels: vec![1, 1], hidden: 1, n_out: 1, input_hw: (4, 4) });
        let mut p = vec![0.0f32; net.num_params()];
        // Kernel with a single tap at (ky=0, kx=2): out[y,x] = in[y-1, x+1].
        p[2] = 1.0;
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let mut cols = Vec::new();
        im2col(&x, 1, 4, 4, &mut cols);
        let row = &cols[2 * 16..3 * 16];
        for y in 0..4 {
            for xx in 0..4 {
                let expect = if y >= 1 && xx + 1 < 4 { x[(y - 1) * 4 + xx + 1] } else { 0.0 };
                assert_eq!(row[y * 4 + xx], expect);
            }
        }
        let _ = net.forward::<ChaCha8Rng>(&p, &x, Dropout::Off);
    }

    #[test]
    fn dropout_off_is_deterministic() {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = net.init(&mut rng, &[0.0; 3]);
        let x: Vec<f32> = (0..net.input_len()).map(|_| rng.gen()).collect();
        let a = net.forward::<ChaCha8Rng>(&p, &x, Dropout::Off);
        let b = net.forward::<ChaCha8Rng>(&p, &x, Dropout::Off);
        assert_eq!(a.logits, b.logits);
    }
}
