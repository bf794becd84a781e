//! Capsule classifier head: routing by agreement from one-dimensional input
//! capsules into a fixed set of output capsules, then
//! flatten → dropout → dense.
//!
//! The compressed `1×1×C` feature map is read as `C` capsules of dimension 1.
//! Output width (10 capsules × 16 dims) is independent of the class count;
//! the capsule block acts as a feature processor and the dense tail maps its
//! 160 features to class logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamStore, Parameter};
use crate::tensor::{Tape, Tensor, Var};

pub const TRANSFORMS: &str = "capsule/W";
pub const DENSE_W: &str = "tail/dense_w";
pub const DENSE_B: &str = "tail/dense_b";

/// Added to `‖s‖²` under the square root in `squash`.
pub const SQUASH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    pub in_capsules: usize,
    pub in_dim: usize,
    pub out_capsules: usize,
    pub out_dim: usize,
    pub routing_iters: usize,
}

impl CapsuleConfig {
    /// Ten 16-dimensional output capsules, three routing iterations.
    pub fn standard(in_capsules: usize) -> Self {
        CapsuleConfig {
            in_capsules,
            in_dim: 1,
            out_capsules: 10,
            out_dim: 16,
            routing_iters: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.routing_iters == 0 {
            return Err(Error::InvalidArgument("routing_iters must be >= 1".into()));
        }
        if [self.in_capsules, self.in_dim, self.out_capsules, self.out_dim].contains(&0) {
            return Err(Error::InvalidArgument(format!("degenerate capsule config {self:?}")));
        }
        Ok(())
    }

    pub fn transform_shape(&self) -> [usize; 4] {
        [self.in_capsules, self.out_capsules, self.out_dim, self.in_dim]
    }

    pub fn transform_count(&self) -> usize {
        self.transform_shape().iter().product()
    }

    pub fn flat_width(&self) -> usize {
        self.out_capsules * self.out_dim
    }
}

fn squash_factor(n2: f64) -> f64 {
    n2 / ((1.0 + n2) * (n2 + SQUASH_EPS).sqrt())
}

/// `squash` applied to a single vector.
pub fn squash_vec(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    let f = squash_factor(n2);
    s.iter().map(|x| f * x).collect()
}

impl Tape {
    /// `v = ‖s‖²/(1+‖s‖²) · s/‖s‖` over the trailing axis.
    pub fn squash(&self, s: Var) -> Result<Var> {
        let sv = self.value(s);
        let d = sv.last_dim();
        let mut out = Vec::with_capacity(sv.len());
        for row in sv.data().chunks(d) {
            out.extend(squash_vec(row));
        }
        let value = Tensor::new(sv.shape().to_vec(), out)?;
        self.record("squash", value, &[s], move |g| {
            let mut grad = Vec::with_capacity(sv.len());
            for (row, grow) in sv.data().chunks(d).zip(g.data().chunks(d)) {
                let n2: f64 = row.iter().map(|x| x * x).sum();
                let q = (n2 + SQUASH_EPS).sqrt();
                let den = (1.0 + n2) * q;
                let f = n2 / den;
                // f = n2 / den, den' = q + (1+n2)/(2q)
                let dden = q + (1.0 + n2) / (2.0 * q);
                let df = (den - n2 * dden) / (den * den);
                let sg: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                grad.extend(row.iter().zip(grow).map(|(x, gv)| f * gv + 2.0 * df * sg * x));
            }
            vec![Tensor::new(sv.shape().to_vec(), grad).unwrap()]
        })
    }

    /// Prediction vectors `û[n,i,j,:] = W[i,j] · u[n,i]` for
    /// `u: [N, I, Din]`, `W: [I, J, D, Din]`, giving `[N, I, J, D]`.
    pub fn capsule_predictions(&self, u: Var, w: Var) -> Result<Var> {
        let (uv, wv) = (self.value(u), self.value(w));
        if uv.rank() != 3 || wv.rank() != 4 || uv.shape()[1] != wv.shape()[0] || uv.shape()[2] != wv.shape()[3] {
            return Err(Error::shape(
                "capsule_predictions",
                format!("u {:?} vs W {:?}", uv.shape(), wv.shape()),
            ));
        }
        let (n, i_n, din) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
        let (j_n, d) = (wv.shape()[1], wv.shape()[2]);
        let mut out = vec![0.0; n * i_n * j_n * d];
        for b in 0..n {
            for i in 0..i_n {
                let ui = &uv.data()[(b * i_n + i) * din..][..din];
                for jd in 0..j_n * d {
                    let wrow = &wv.data()[(i * j_n * d + jd) * din..][..din];
                    out[(b * i_n + i) * j_n * d + jd] = wrow.iter().zip(ui).map(|(a, b)| a * b).sum();
                }
            }
        }
        let value = Tensor::new(vec![n, i_n, j_n, d], out)?;
        self.record("capsule_predictions", value, &[u, w], move |g| {
            let mut du = vec![0.0; uv.len()];
            let mut dw = vec![0.0; wv.len()];
            for b in 0..n {
                for i in 0..i_n {
                    let uo = (b * i_n + i) * din;
                    for jd in 0..j_n * d {
                        let gv = g.data()[(b * i_n + i) * j_n * d + jd];
                        let wo = (i * j_n * d + jd) * din;
                        for k in 0..din {
                            du[uo + k] += gv * wv.data()[wo + k];
                            dw[wo + k] += gv * uv.data()[uo + k];
                        }
                    }
                }
            }
            vec![
                Tensor::new(uv.shape().to_vec(), du).unwrap(),
                Tensor::new(wv.shape().to_vec(), dw).unwrap(),
            ]
        })
    }

    /// `s[n,j,:] = Σ_i c[n,i,j] · û[n,i,j,:]`.
    pub fn capsule_weighted_sum(&self, c: Var, u_hat: Var) -> Result<Var> {
        let (cv, uv) = (self.value(c), self.value(u_hat));
        if cv.rank() != 3 || uv.rank() != 4 || cv.shape() != &uv.shape()[..3] {
            return Err(Error::shape(
                "capsule_weighted_sum",
                format!("c {:?} vs û {:?}", cv.shape(), uv.shape()),
            ));
        }
        let [n, i_n, j_n, d] = uv.shape()[..] else { unreachable!() };
        let mut out = vec![0.0; n * j_n * d];
        for b in 0..n {
            for i in 0..i_n {
                for j in 0..j_n {
                    let cij = cv.data()[(b * i_n + i) * j_n + j];
                    let src = &uv.data()[((b * i_n + i) * j_n + j) * d..][..d];
                    for (o, x) in out[(b * j_n + j) * d..][..d].iter_mut().zip(src) {
                        *o += cij * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, j_n, d], out)?;
        self.record("capsule_weighted_sum", value, &[c, u_hat], move |g| {
            let mut dc = vec![0.0; cv.len()];
            let mut du = vec![0.0; uv.len()];
            for b in 0..n {
                for i in 0..i_n {
                    for j in 0..j_n {
                        let ci = (b * i_n + i) * j_n + j;
                        let gs = &g.data()[(b * j_n + j) * d..][..d];
                        let src = &uv.data()[ci * d..][..d];
                        dc[ci] = gs.iter().zip(src).map(|(a, b)| a * b).sum();
                        for (o, gv) in du[ci * d..][..d].iter_mut().zip(gs) {
                            *o = cv.data()[ci] * gv;
                        }
                    }
                }
            }
            vec![
                Tensor::new(cv.shape().to_vec(), dc).unwrap(),
                Tensor::new(uv.shape().to_vec(), du).unwrap(),
            ]
        })
    }

    /// Agreement `a[n,i,j] = û[n,i,j,:] · v[n,j,:]`.
    pub fn capsule_agreement(&self, u_hat: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u_hat), self.value(v));
        if uv.rank() != 4 || vv.rank() != 3 || vv.shape() != [uv.shape()[0], uv.shape()[2], uv.shape()[3]] {
            return Err(Error::shape(
                "capsule_agreement",
                format!("û {:?} vs v {:?}", uv.shape(), vv.shape()),
            ));
        }
        let [n, i_n, j_n, d] = uv.shape()[..] else { unreachable!() };
        let mut out = vec![0.0; n * i_n * j_n];
        for b in 0..n {
            for i in 0..i_n {
                for j in 0..j_n {
                    let src = &uv.data()[((b * i_n + i) * j_n + j) * d..][..d];
                    let vj = &vv.data()[(b * j_n + j) * d..][..d];
                    out[(b * i_n + i) * j_n + j] = src.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
            }
        }
        let value = Tensor::new(vec![n, i_n, j_n], out)?;
        self.record("capsule_agreement", value, &[u_hat, v], move |g| {
            let mut du = vec![0.0; uv.len()];
            let mut dv = vec![0.0; vv.len()];
            for b in 0..n {
                for i in 0..i_n {
                    for j in 0..j_n {
                        let gv = g.data()[(b * i_n + i) * j_n + j];
                        let uo = ((b * i_n + i) * j_n + j) * d;
                        let vo = (b * j_n + j) * d;
                        for k in 0..d {
                            du[uo + k] = gv * vv.data()[vo + k];
                            dv[vo + k] += gv * uv.data()[uo + k];
                        }
                    }
                }
            }
            vec![
                Tensor::new(uv.shape().to_vec(), du).unwrap(),
                Tensor::new(vv.shape().to_vec(), dv).unwrap(),
            ]
        })
    }
}

/// Routed output capsules plus the coupling coefficients used at each
/// iteration.
pub struct Routing {
    /// `[N, out_capsules, out_dim]`.
    pub output: Var,
    /// One `[N, in_capsules, out_capsules]` tensor per iteration.
    pub couplings: Vec<Tensor>,
}

/// Dynamic routing by agreement, recorded on the tape so gradients flow
/// through the coupling coefficients of every unrolled iteration.
pub fn route(tape: &Tape, u: Var, transforms: Var, cfg: &CapsuleConfig) -> Result<Routing> {
    cfg.validate()?;
    let us = tape.shape(u);
    if us.len() != 3 || us[1] != cfg.in_capsules || us[2] != cfg.in_dim {
        return Err(Error::shape(
            "route",
            format!("input {us:?} does not match config {cfg:?}"),
        ));
    }
    if tape.shape(transforms) != cfg.transform_shape() {
        return Err(Error::shape(
            "route",
            format!(
                "transforms {:?}, expected {:?}",
                tape.shape(transforms),
                cfg.transform_shape()
            ),
        ));
    }
    let n = us[0];
    let u_hat = tape.capsule_predictions(u, transforms)?;
    let mut logits = tape.constant(Tensor::zeros(&[n, cfg.in_capsules, cfg.out_capsules]))?;
    let mut couplings = Vec::with_capacity(cfg.routing_iters);
    let mut v = None;
    for iter in 0..cfg.routing_iters {
        let c = tape.softmax(logits)?;
        couplings.push((*tape.value(c)).clone());
        let s = tape.capsule_weighted_sum(c, u_hat)?;
        let out = tape.squash(s)?;
        v = Some(out);
        if iter + 1 < cfg.routing_iters {
            let agreement = tape.capsule_agreement(u_hat, out)?;
            logits = tape.add(logits, agreement)?;
        }
    }
    Ok(Routing {
        output: v.expect("routing_iters >= 1"),
        couplings,
    })
}

/// Capsule routing followed by flatten → dropout → dense.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleHead {
    pub config: CapsuleConfig,
    pub dropout_rate: f64,
    pub class_count: usize,
}

/// Output of [`CapsuleHead::forward`].
pub struct HeadOutput {
    pub logits: Var,
    pub capsules: Var,
    pub couplings: Vec<Tensor>,
}

impl CapsuleHead {
    pub fn new(config: CapsuleConfig, dropout_rate: f64, class_count: usize) -> Result<Self> {
        config.validate()?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "class_count must be >= 2, got {class_count}"
            )));
        }
        Ok(CapsuleHead {
            config,
            dropout_rate,
            class_count,
        })
    }

    /// Registers `capsule/W`, `tail/dense_w`, and `tail/dense_b`.
    pub fn register<R: Rng + ?Sized>(&self, params: &mut ParamStore, rng: &mut R) -> Result<()> {
        let cfg = &self.config;
        // Scaled so that the uniform-coupling sum over inputs starts near unit norm.
        let std = cfg.out_capsules as f64 / ((cfg.in_capsules * cfg.in_dim * cfg.out_dim) as f64).sqrt();
        params.insert(Parameter::new(
            TRANSFORMS,
            Tensor::randn(&cfg.transform_shape(), std, rng),
            true,
        ))?;
        let flat = cfg.flat_width();
        params.insert(Parameter::new(
            DENSE_W,
            Tensor::randn(&[flat, self.class_count], (1.0 / flat as f64).sqrt(), rng),
            true,
        ))?;
        params.insert(Parameter::new(DENSE_B, Tensor::zeros(&[self.class_count]), true))
    }

    /// `compressed` is `[N, 1, 1, C]` (or any shape with `N·C` values).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &ParamStore,
        compressed: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<HeadOutput> {
        let shape = tape.shape(compressed);
        let n = shape[0];
        let u = tape.reshape(compressed, &[n, self.config.in_capsules, self.config.in_dim])?;
        let w = params.bind(tape, TRANSFORMS)?;
        let routing = route(tape, u, w, &self.config)?;
        let logits = self.classify_tail(tape, params, routing.output, training, rng)?;
        Ok(HeadOutput {
            logits,
            capsules: routing.output,
            couplings: routing.couplings,
        })
    }

    /// Flatten `[N, 10, 16]` to 160 features, dropout, dense to logits.
    pub fn classify_tail<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &ParamStore,
        capsules: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let flat = tape.flatten(capsules)?;
        let dropped = tape.dropout(flat, self.dropout_rate, training, rng)?;
        let w = params.bind(tape, DENSE_W)?;
        let b = params.bind(tape, DENSE_B)?;
        tape.dense(dropped, w, b)
    }
}
