//! Elementwise, reduction, and classifier ops.

use rand::Rng;

use super::conv::{matmul, matmul_backward};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_FLOOR, 1]` before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Result of a batch-normalization op.
pub struct BatchNormOutput {
    pub output: Var,
    /// Per-channel statistics of the current batch, present in training mode.
    pub batch_stats: Option<(Tensor, Tensor)>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", &av, &bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.record("add", value, &[a, b], |g| vec![g.clone(), g.clone()])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", &av, &bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.record("mul", value, &[a, b], move |g| {
            let ga = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
            let gb = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
            vec![
                Tensor::new(av.shape().to_vec(), ga).unwrap(),
                Tensor::new(bv.shape().to_vec(), gb).unwrap(),
            ]
        })
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.record("scale", value, &[a], move |g| vec![g.map(|x| x * factor)])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let value = Tensor::scalar(av.data().iter().sum());
        self.record("sum", value, &[a], move |g| vec![Tensor::full(&shape, g.item())])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = av.map(|x| x.max(0.0));
        self.record("relu", value, &[a], move |g| {
            let d = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Tensor::new(av.shape().to_vec(), d).unwrap()]
        })
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = av.map(|x| x * sigmoid(x));
        self.record("swish", value, &[a], move |g| {
            let d = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .collect();
            vec![Tensor::new(av.shape().to_vec(), d).unwrap()]
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let value = av.reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("{:?} -> {shape:?}", av.shape()))
        })?;
        let original = av.shape().to_vec();
        self.record("reshape", value, &[a], move |g| {
            vec![g.reshape(&original).unwrap()]
        })
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, F]`.
    pub fn flatten(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let f = shape[1..].iter().product();
        self.reshape(a, &[n, f])
    }

    /// Concatenates along the trailing (channel) axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(
                "concat_channels",
                format!("leading axes differ: {sa:?} vs {sb:?}"),
            ));
        }
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let rows = if ca + cb == 0 {
            0
        } else {
            sa[..sa.len() - 1].iter().product()
        };
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(shape, data)?;
        self.record("concat_channels", value, &[a, b], move |g| {
            vec![
                g.slice_channels(0, ca).unwrap(),
                g.slice_channels(ca, ca + cb).unwrap(),
            ]
        })
    }

    /// Channels `[start, end)` of the trailing axis.
    pub fn slice_channels(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let value = av.slice_channels(start, end)?;
        let c = av.last_dim();
        let shape = av.shape().to_vec();
        self.record("slice_channels", value, &[a], move |g| {
            let w = end - start;
            let mut d = Tensor::zeros(&shape);
            let rows = d.len() / c.max(1);
            for r in 0..rows {
                d.data_mut()[r * c + start..r * c + end]
                    .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![d]
        })
    }

    /// `input @ weight + bias` with `input: [N, F]`, `weight: [F, K]`,
    /// `bias: [K]`.
    pub fn dense(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::shape(
                "dense",
                format!("ranks {:?} {:?} {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let k = w.shape()[1];
        if w.shape()[0] != f || b.shape()[0] != k {
            return Err(Error::shape(
                "dense",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out = matmul(x.data(), w.data(), n, f, k);
        for row in out.chunks_mut(k) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        self.record("dense", value, &[input, weight, bias], move |g| {
            let (dx, dw) = matmul_backward(x.data(), w.data(), g.data(), n, f, k);
            let mut db = vec![0.0; k];
            for row in g.data().chunks(k) {
                for (d, gv) in db.iter_mut().zip(row) {
                    *d += gv;
                }
            }
            vec![
                Tensor::new(vec![n, f], dx).unwrap(),
                Tensor::new(vec![f, k], dw).unwrap(),
                Tensor::new(vec![k], db).unwrap(),
            ]
        })
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        let k = x.last_dim();
        if k == 0 {
            return Err(Error::shape("softmax", "empty trailing axis"));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let y = value.clone();
        self.record("softmax", value, &[logits], move |g| {
            let mut d = vec![0.0; y.len()];
            for ((drow, yrow), grow) in d.chunks_mut(k).zip(y.data().chunks(k)).zip(g.data().chunks(k)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *dv = yv * (gv - dot);
                }
            }
            vec![Tensor::new(y.shape().to_vec(), d).unwrap()]
        })
    }

    /// Categorical cross-entropy `−mean_n log p[n, true]` over `[N, K]`
    /// probabilities. `labels` must be one-hot rows.
    pub fn cross_entropy(&self, probs: Var, labels: &Tensor) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() != 2 || p.shape() != labels.shape() {
            return Err(Error::shape(
                "cross_entropy",
                format!("probs {:?} vs labels {:?}", p.shape(), labels.shape()),
            ));
        }
        let (n, k) = (p.shape()[0], p.shape()[1]);
        let mut targets = Vec::with_capacity(n);
        for (r, row) in labels.data().chunks(k).enumerate() {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect();
            if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy: label row {r} is not one-hot"
                )));
            }
            targets.push(ones[0]);
        }
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| p.data()[r * k + t].clamp(PROB_FLOOR, 1.0).ln())
            .sum::<f64>()
            / n as f64;
        self.record("cross_entropy", Tensor::scalar(loss), &[probs], move |g| {
            let scale = g.item() / n as f64;
            let mut d = Tensor::zeros(&[n, k]);
            for (r, &t) in targets.iter().enumerate() {
                let pv = p.data()[r * k + t];
                if pv > PROB_FLOOR && pv <= 1.0 {
                    d.data_mut()[r * k + t] = -scale / pv;
                }
            }
            vec![d]
        })
    }

    /// Inverted dropout. Identity (the same `Var`) when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let av = self.value(a);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.record("dropout", value, &[a], move |g| {
            let d = g.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
            vec![Tensor::new(g.shape().to_vec(), d).unwrap()]
        })
    }

    /// Normalizes each trailing-axis channel. In training mode statistics come
    /// from the batch (all leading axes); otherwise `running` supplies them.
    pub fn batch_norm(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        training: bool,
    ) -> Result<BatchNormOutput> {
        const OP: &str = "batch_norm";
        let x = self.value(input);
        let c = x.last_dim();
        for t in [&*self.value(gamma), &*self.value(beta), running.0, running.1] {
            if t.shape() != [c] {
                return Err(Error::shape(
                    OP,
                    format!("per-channel tensor {:?} for {c} channels", t.shape()),
                ));
            }
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let m = x.len() / c.max(1);
        if m == 0 {
            return Err(Error::shape(OP, "empty batch"));
        }

        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            for row in x.data().chunks(c) {
                for (s, v) in mean.iter_mut().zip(row) {
                    *s += v;
                }
            }
            mean.iter_mut().for_each(|s| *s /= m as f64);
            let mut var = vec![0.0; c];
            for row in x.data().chunks(c) {
                for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|s| *s /= m as f64);
            (mean, var)
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();

        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ((xr, hr), or) in x
            .data()
            .chunks(c)
            .zip(xhat.chunks_mut(c))
            .zip(out.chunks_mut(c))
        {
            for ch in 0..c {
                hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                or[ch] = gv.data()[ch] * hr[ch] + bv.data()[ch];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        let output = self.record(OP, value, &[input, gamma, beta], move |g| {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    dgamma[ch] += gr[ch] * hr[ch];
                    dbeta[ch] += gr[ch];
                }
            }
            let gamma = gv.data();
            let mut dx = vec![0.0; xhat.len()];
            if training {
                // dxhat = g * gamma; dx = inv_std/m * (m*dxhat - Σdxhat - xhat*Σ(dxhat*xhat))
                let mf = m as f64;
                for ((dr, gr), hr) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        let dxhat = gr[ch] * gamma[ch];
                        dr[ch] = inv_std[ch] / mf
                            * (mf * dxhat - dbeta[ch] * gamma[ch] - hr[ch] * dgamma[ch] * gamma[ch]);
                    }
                }
            } else {
                for (dr, gr) in dx.chunks_mut(c).zip(g.data().chunks(c)) {
                    for ch in 0..c {
                        dr[ch] = gr[ch] * gamma[ch] * inv_std[ch];
                    }
                }
            }
            vec![
                Tensor::new(shape.clone(), dx).unwrap(),
                Tensor::new(vec![c], dgamma).unwrap(),
                Tensor::new(vec![c], dbeta).unwrap(),
            ]
        })?;
        let batch_stats = training.then(|| {
            (
                Tensor::new(vec![c], mean).unwrap(),
                Tensor::new(vec![c], var).unwrap(),
            )
        });
        Ok(BatchNormOutput {
            output,
            batch_stats,
        })
    }

    /// Arithmetic mean over the spatial axes: `[N, H, W, C] -> [N, 1, 1, C]`.
    pub fn global_avg_pool(&self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", x.shape())));
        }
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let area = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for p in 0..h * w {
                let row = &x.data()[(b * h * w + p) * c..][..c];
                for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= area);
        let value = Tensor::new(vec![n, 1, 1, c], out)?;
        self.record("global_avg_pool", value, &[input], move |g| {
            let mut d = vec![0.0; n * h * w * c];
            for b in 0..n {
                for p in 0..h * w {
                    for ch in 0..c {
                        d[(b * h * w + p) * c + ch] = g.data()[b * c + ch] / area;
                    }
                }
            }
            vec![Tensor::new(vec![n, h, w, c], d).unwrap()]
        })
    }
}
