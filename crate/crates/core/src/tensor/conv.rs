//! Convolutions over channels-last `[N, H, W, C]` feature maps.

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Spatial padding mode. `Same` pads symmetrically, with any odd pixel going
/// to the bottom/right edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    input: usize,
    kernel: usize,
    output: usize,
    pad_before: usize,
}

fn axis(op: &'static str, input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Axis> {
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    if kernel == 0 {
        return Err(Error::shape(op, "kernel extent must be positive"));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(Error::shape(
                    op,
                    format!("kernel extent {kernel} exceeds input extent {input} with valid padding"),
                ));
            }
            Ok(Axis {
                input,
                kernel,
                output: (input - kernel) / stride + 1,
                pad_before: 0,
            })
        }
        Padding::Same => {
            let output = input.div_ceil(stride);
            let needed = ((output - 1) * stride + kernel).saturating_sub(input);
            Ok(Axis {
                input,
                kernel,
                output,
                pad_before: needed / 2,
            })
        }
    }
}

impl Axis {
    /// Input coordinate read by output `o` at kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, stride: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(self.pad_before)?;
        (pos < self.input).then_some(pos)
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

struct Geometry {
    n: usize,
    h: Axis,
    w: Axis,
    stride: usize,
}

impl Geometry {
    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize, usize, usize, usize)> + '_ {
        // (n, oh, ow, kh, kw, ih, iw)
        let (h, w, s) = (self.h, self.w, self.stride);
        (0..self.n).flat_map(move |n| {
            (0..h.output).flat_map(move |oh| {
                (0..w.output).flat_map(move |ow| {
                    (0..h.kernel).flat_map(move |kh| {
                        let ih = h.source(oh, kh, s);
                        (0..w.kernel).filter_map(move |kw| {
                            let ih = ih?;
                            let iw = w.source(ow, kw, s)?;
                            Some((n, oh, ow, kh, kw, ih, iw))
                        })
                    })
                })
            })
        })
    }
}

impl Tape {
    /// Full cross-correlation. `kernel` is `[kh, kw, Cin, Cout]`.
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let k = self.value(kernel);
        expect_rank(OP, &x, 4)?;
        expect_rank(OP, &k, 4)?;
        let (n, hi, wi, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, kcin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if cin != kcin {
            return Err(Error::shape(
                OP,
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        let geo = Geometry {
            n,
            h: axis(OP, hi, kh, stride, padding)?,
            w: axis(OP, wi, kw, stride, padding)?,
            stride,
        };
        let (ho, wo) = (geo.h.output, geo.w.output);
        let out_shape = vec![n, ho, wo, cout];

        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0; n * ho * wo * cout];
        for (b, oh, ow, th, tw, ih, iw) in geo.taps() {
            let xo = ((b * hi + ih) * wi + iw) * cin;
            let ko = (th * kw + tw) * cin * cout;
            let oo = ((b * ho + oh) * wo + ow) * cout;
            let dst = &mut out[oo..oo + cout];
            for ci in 0..cin {
                let xv = xd[xo + ci];
                let krow = &kd[ko + ci * cout..ko + (ci + 1) * cout];
                for (d, kv) in dst.iter_mut().zip(krow) {
                    *d += xv * kv;
                }
            }
        }

        let value = Tensor::new(out_shape, out)?;
        self.record(OP, value, &[input, kernel], move |dy| {
            let xd = x.data();
            let kd = k.data();
            let gd = dy.data();
            let mut dx = vec![0.0; xd.len()];
            let mut dk = vec![0.0; kd.len()];
            for (b, oh, ow, th, tw, ih, iw) in geo.taps() {
                let xo = ((b * hi + ih) * wi + iw) * cin;
                let ko = (th * kw + tw) * cin * cout;
                let oo = ((b * ho + oh) * wo + ow) * cout;
                let g = &gd[oo..oo + cout];
                for ci in 0..cin {
                    let krow = &kd[ko + ci * cout..ko + (ci + 1) * cout];
                    let xv = xd[xo + ci];
                    let mut acc = 0.0;
                    let dkrow = &mut dk[ko + ci * cout..ko + (ci + 1) * cout];
                    for ((gv, kv), dkv) in g.iter().zip(krow).zip(dkrow.iter_mut()) {
                        acc += gv * kv;
                        *dkv += xv * gv;
                    }
                    dx[xo + ci] += acc;
                }
            }
            vec![
                Tensor::new(x.shape().to_vec(), dx).unwrap(),
                Tensor::new(k.shape().to_vec(), dk).unwrap(),
            ]
        })
    }

    /// Per-channel convolution. `kernel` is `[kh, kw, C]`; channels never mix.
    pub fn depthwise_conv2d(
        &self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "depthwise_conv2d";
        let x = self.value(input);
        let k = self.value(kernel);
        expect_rank(OP, &x, 4)?;
        expect_rank(OP, &k, 3)?;
        let (n, hi, wi, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, kc) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if c != kc {
            return Err(Error::shape(
                OP,
                format!("input has {c} channels, kernel has {kc}"),
            ));
        }
        let geo = Geometry {
            n,
            h: axis(OP, hi, kh, stride, padding)?,
            w: axis(OP, wi, kw, stride, padding)?,
            stride,
        };
        let (ho, wo) = (geo.h.output, geo.w.output);

        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0; n * ho * wo * c];
        for (b, oh, ow, th, tw, ih, iw) in geo.taps() {
            let xrow = &xd[((b * hi + ih) * wi + iw) * c..][..c];
            let krow = &kd[(th * kw + tw) * c..][..c];
            let dst = &mut out[((b * ho + oh) * wo + ow) * c..][..c];
            for ((d, xv), kv) in dst.iter_mut().zip(xrow).zip(krow) {
                *d += xv * kv;
            }
        }

        let value = Tensor::new(vec![n, ho, wo, c], out)?;
        self.record(OP, value, &[input, kernel], move |dy| {
            let xd = x.data();
            let kd = k.data();
            let gd = dy.data();
            let mut dx = vec![0.0; xd.len()];
            let mut dk = vec![0.0; kd.len()];
            for (b, oh, ow, th, tw, ih, iw) in geo.taps() {
                let xo = ((b * hi + ih) * wi + iw) * c;
                let ko = (th * kw + tw) * c;
                let g = &gd[((b * ho + oh) * wo + ow) * c..][..c];
                for ch in 0..c {
                    dx[xo + ch] += g[ch] * kd[ko + ch];
                    dk[ko + ch] += g[ch] * xd[xo + ch];
                }
            }
            vec![
                Tensor::new(x.shape().to_vec(), dx).unwrap(),
                Tensor::new(k.shape().to_vec(), dk).unwrap(),
            ]
        })
    }

    /// 1×1 convolution: a per-pixel matrix multiply. `kernel` is
    /// `[1, 1, Cin, Cout]`.
    pub fn pointwise_conv2d(&self, input: Var, kernel: Var) -> Result<Var> {
        const OP: &str = "pointwise_conv2d";
        let x = self.value(input);
        let k = self.value(kernel);
        expect_rank(OP, &x, 4)?;
        expect_rank(OP, &k, 4)?;
        let cin = x.shape()[3];
        let ks = k.shape();
        if ks[0] != 1 || ks[1] != 1 {
            return Err(Error::shape(OP, format!("kernel must be 1x1, got {ks:?}")));
        }
        if ks[2] != cin {
            return Err(Error::shape(
                OP,
                format!("input has {cin} channels, kernel expects {}", ks[2]),
            ));
        }
        let cout = ks[3];
        let pixels = x.len() / cin.max(1);
        let out = matmul(x.data(), k.data(), pixels, cin, cout);
        let mut shape = x.shape().to_vec();
        shape[3] = cout;
        let value = Tensor::new(shape, out)?;
        self.record(OP, value, &[input, kernel], move |dy| {
            let (dx, dk) = matmul_backward(x.data(), k.data(), dy.data(), pixels, cin, cout);
            vec![
                Tensor::new(x.shape().to_vec(), dx).unwrap(),
                Tensor::new(k.shape().to_vec(), dk).unwrap(),
            ]
        })
    }
}

/// `[m, k] x [k, n]` row-major product.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
    out
}

/// Gradients of `a @ b` given the output gradient `g` of shape `[m, n]`.
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = a[i * k + p];
            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
    (da, db)
}
