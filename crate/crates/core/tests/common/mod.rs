#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roct_core::capsule::{route, CapsuleConfig};
use roct_core::gradcheck::{check_gradients, project, GradCheckReport};
use roct_core::srnet::SrCompressor;
use roct_core::tensor::Padding;
use roct_core::{Result, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub type Case = (&'static str, fn(u64) -> Result<GradCheckReport>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn one_hot_rows(n: usize, k: usize, r: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let mut t = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let c = r.random_range(0..k);
        t.data_mut()[i * k + c] = 1.0;
    }
    t
}

fn conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[2, 5, 4, 2], 1.0, &mut r);
    let k = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut r);
    let stride = 1 + (seed as usize % 2);
    let pad = if seed.is_multiple_of(3) { Padding::Valid } else { Padding::Same };
    let probe = Tensor::randn(&[1], 1.0, &mut r); // keep stream aligned across variants
    let _ = probe;
    let shape = {
        let t = roct_core::Tape::new();
        let xv = t.constant(x.clone())?;
        let kv = t.constant(k.clone())?;
        t.shape(t.conv2d(xv, kv, stride, pad)?)
    };
    let w = Tensor::randn(&shape, 1.0, &mut r);
    check_gradients(&[x, k], STEP, move |t, v| {
        let y = t.conv2d(v[0], v[1], stride, pad)?;
        project(t, y, &w)
    })
}

fn depthwise(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[2, 5, 5, 3], 1.0, &mut r);
    let k = Tensor::randn(&[3, 3, 3], 1.0, &mut r);
    let stride = 1 + (seed as usize % 2);
    let ho = 5usize.div_ceil(stride);
    let w = Tensor::randn(&[2, ho, ho, 3], 1.0, &mut r);
    check_gradients(&[x, k], STEP, move |t, v| {
        let y = t.depthwise_conv2d(v[0], v[1], stride, Padding::Same)?;
        project(t, y, &w)
    })
}

fn pointwise(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut r);
    let k = Tensor::randn(&[1, 1, 4, 3], 1.0, &mut r);
    let w = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    check_gradients(&[x, k], STEP, move |t, v| {
        let y = t.pointwise_conv2d(v[0], v[1])?;
        project(t, y, &w)
    })
}

fn dense(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    let wt = Tensor::randn(&[5, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    let w = Tensor::randn(&[3, 4], 1.0, &mut r);
    check_gradients(&[x, wt, b], STEP, move |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        project(t, y, &w)
    })
}

fn softmax_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let logits = Tensor::randn(&[4, 5], 1.5, &mut r);
    let labels = one_hot_rows(4, 5, &mut r);
    check_gradients(&[logits], STEP, move |t, v| {
        let p = t.softmax(v[0])?;
        t.cross_entropy(p, &labels)
    })
}

fn activations(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[3, 6], 1.0, &mut r);
    let w = Tensor::randn(&[3, 12], 1.0, &mut r);
    check_gradients(&[x], STEP, move |t, v| {
        let a = t.relu(v[0])?;
        let b = t.swish(v[0])?;
        let c = t.concat_channels(a, b)?;
        project(t, c, &w)
    })
}

fn batch_norm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[3, 2, 2, 3], 2.0, &mut r);
    let gamma = Tensor::randn(&[3], 1.0, &mut r);
    let beta = Tensor::randn(&[3], 1.0, &mut r);
    let rm = Tensor::randn(&[3], 0.5, &mut r);
    let rv = Tensor::rand_uniform(&[3], 0.5, 2.0, &mut r);
    let w = Tensor::randn(&[3, 2, 2, 3], 1.0, &mut r);
    let train = check_gradients(&[x.clone(), gamma.clone(), beta.clone()], STEP, {
        let (rm, rv, w) = (rm.clone(), rv.clone(), w.clone());
        move |t, v| {
            let y = t.batch_norm(v[0], v[1], v[2], (&rm, &rv), true)?.output;
            project(t, y, &w)
        }
    })?;
    let eval = check_gradients(&[x, gamma, beta], STEP, move |t, v| {
        let y = t.batch_norm(v[0], v[1], v[2], (&rm, &rv), false)?.output;
        project(t, y, &w)
    })?;
    Ok(if train.max_rel_error >= eval.max_rel_error { train } else { eval })
}

fn srnet_compress(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let sr = SrCompressor::new(3, 4, 5);
    let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
    let k = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let w = Tensor::randn(&[2, 1, 1, 5], 1.0, &mut r);
    check_gradients(&[x, k], STEP, move |t, v| {
        let y = sr.compress(t, v[0], v[1])?;
        project(t, y, &w)
    })
}

fn squash(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    // Mix of small, unit-scale, and large vectors.
    let mut s = Tensor::randn(&[6, 4], 1.0, &mut r);
    for (i, v) in s.data_mut().iter_mut().enumerate() {
        *v *= [0.05, 1.0, 4.0][(i / 4) % 3];
    }
    let w = Tensor::randn(&[6, 4], 1.0, &mut r);
    check_gradients(&[s], STEP, move |t, v| {
        let y = t.squash(v[0])?;
        project(t, y, &w)
    })
}

fn routing(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let cfg = CapsuleConfig {
        in_capsules: 6,
        in_dim: 1,
        out_capsules: 3,
        out_dim: 4,
        routing_iters: 3,
    };
    let u = Tensor::randn(&[2, 6, 1], 1.0, &mut r);
    let wt = Tensor::randn(&cfg.transform_shape(), 0.7, &mut r);
    let w = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    check_gradients(&[u, wt], STEP, move |t, v| {
        let out = route(t, v[0], v[1], &cfg)?.output;
        project(t, out, &w)
    })
}

/// Compressor → routing → flatten → dropout (fixed mask) → dense →
/// softmax → cross-entropy, differentiated w.r.t. every input and weight.
fn full_head(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let cfg = CapsuleConfig {
        in_capsules: 4,
        in_dim: 1,
        out_capsules: 3,
        out_dim: 2,
        routing_iters: 3,
    };
    let sr = SrCompressor::new(2, 2, 4);
    let feats = Tensor::randn(&[2, 2, 2, 4], 1.0, &mut r);
    let kernel = Tensor::randn(&[2, 2, 4], 0.5, &mut r);
    let wt = Tensor::randn(&cfg.transform_shape(), 0.8, &mut r);
    let dw = Tensor::randn(&[6, 3], 1.0, &mut r);
    let db = Tensor::randn(&[3], 0.1, &mut r);
    let labels = one_hot_rows(2, 3, &mut r);
    check_gradients(&[feats, kernel, wt, dw, db], STEP, move |t, v| {
        let c = sr.compress(t, v[0], v[1])?;
        let u = t.reshape(c, &[2, 4, 1])?;
        let caps = route(t, u, v[2], &cfg)?.output;
        let flat = t.flatten(caps)?;
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0);
        let dropped = t.dropout(flat, 0.3, true, &mut mask_rng)?;
        let logits = t.dense(dropped, v[3], v[4])?;
        let p = t.softmax(logits)?;
        t.cross_entropy(p, &labels)
    })
}

pub fn gradient_cases() -> Vec<Case> {
    vec![
        ("conv2d", conv2d),
        ("depthwise_conv2d", depthwise),
        ("pointwise_conv2d", pointwise),
        ("dense", dense),
        ("softmax+cross_entropy", softmax_cross_entropy),
        ("relu/swish/concat", activations),
        ("batch_norm", batch_norm),
        ("srnet_compress", srnet_compress),
        ("squash", squash),
        ("routing_3_iters", routing),
        ("full_head", full_head),
    ]
}

/// Straight-line dynamic routing on plain slices. `u` is `[I, Din]`, `w`
/// is `[I, J, D, Din]`. Returns the output capsules `[J][D]` and the
/// couplings used at each iteration `[iter][I][J]`.
pub fn routing_oracle(
    u: &[f64],
    w: &[f64],
    cfg: &CapsuleConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (ni, nj, d, din) = (cfg.in_capsules, cfg.out_capsules, cfg.out_dim, cfg.in_dim);
    let mut uhat = vec![vec![vec![0.0; d]; nj]; ni];
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..d {
                for m in 0..din {
                    uhat[i][j][k] += w[((i * nj + j) * d + k) * din + m] * u[i * din + m];
                }
            }
        }
    }
    let mut b = vec![vec![0.0; nj]; ni];
    let mut v = vec![vec![0.0; d]; nj];
    let mut history = Vec::new();
    for it in 0..cfg.routing_iters {
        let c: Vec<Vec<f64>> = b
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect();
        for j in 0..nj {
            let mut s = vec![0.0; d];
            for i in 0..ni {
                for k in 0..d {
                    s[k] += c[i][j] * uhat[i][j][k];
                }
            }
            let n2: f64 = s.iter().map(|x| x * x).sum();
            let n = n2.sqrt();
            v[j] = if n == 0.0 {
                vec![0.0; d]
            } else {
                s.iter().map(|x| n2 / (1.0 + n2) * x / n).collect()
            };
        }
        history.push(c);
        if it + 1 < cfg.routing_iters {
            for i in 0..ni {
                for j in 0..nj {
                    b[i][j] += (0..d).map(|k| uhat[i][j][k] * v[j][k]).sum::<f64>();
                }
            }
        }
    }
    (v, history)
}

/// Runs the tape routing on a single item, returning flattened output and
/// couplings.
pub fn tape_route(u: &Tensor, w: &Tensor, cfg: &CapsuleConfig) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let t = roct_core::Tape::new();
    let uv = t.constant(u.clone())?;
    let wv = t.constant(w.clone())?;
    let r = route(&t, uv, wv, cfg)?;
    Ok((t.value(r.output).data().to_vec(), r.couplings))
}

pub fn small_caps(iters: usize) -> CapsuleConfig {
    CapsuleConfig {
        in_capsules: 7,
        in_dim: 1,
        out_capsules: 4,
        out_dim: 3,
        routing_iters: iters,
    }
}

/// Largest gap between tape routing and the straight-line oracle over a few
/// seeds and iteration counts.
pub fn routing_oracle_gap() -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        for iters in 1..=3 {
            let cfg = small_caps(iters);
            let mut r = rng(seed);
            let u = Tensor::randn(&[1, 7, 1], 1.0, &mut r);
            let w = Tensor::randn(&cfg.transform_shape(), 0.6, &mut r);
            let (out, cs) = tape_route(&u, &w, &cfg)?;
            let (v, hist) = routing_oracle(u.data(), w.data(), &cfg);
            for (a, b) in out.iter().zip(v.iter().flatten()) {
                worst = worst.max((a - b).abs());
            }
            for (c, h) in cs.iter().zip(&hist) {
                for (a, b) in c.data().iter().zip(h.iter().flatten()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Worst `|Σ_j c_ij − 1|` and largest output norm over random batches.
pub fn coupling_and_norm_bounds() -> Result<(f64, f64)> {
    let (mut row_gap, mut max_norm) = (0.0f64, 0.0f64);
    for seed in SEEDS {
        let cfg = small_caps(3);
        let mut r = rng(seed);
        let u = Tensor::randn(&[3, 7, 1], 3.0, &mut r);
        let w = Tensor::randn(&cfg.transform_shape(), 2.0, &mut r);
        let (out, cs) = tape_route(&u, &w, &cfg)?;
        for c in &cs {
            assert!(c.data().iter().all(|&x| x > 0.0), "non-positive coupling");
            for row in c.data().chunks(cfg.out_capsules) {
                row_gap = row_gap.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        for v in out.chunks(cfg.out_dim) {
            max_norm = max_norm.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    Ok((row_gap, max_norm))
}

/// Inputs whose predictions all point along output capsule 0's direction
/// while capsule 1 receives mutually cancelling predictions. Returns the
/// couplings to capsule 0 per iteration for every input.
pub fn agreement_witness() -> Result<Vec<Vec<f64>>> {
    let cfg = CapsuleConfig {
        in_capsules: 4,
        in_dim: 1,
        out_capsules: 2,
        out_dim: 2,
        routing_iters: 3,
    };
    let u = Tensor::ones(&[1, 4, 1]);
    // W[i, 0] = (1, 0) for all i; W[i, 1] alternates (0, ±1).
    let mut w = Tensor::zeros(&cfg.transform_shape());
    for i in 0..4 {
        w.data_mut()[(i * 2) * 2] = 1.0;
        w.data_mut()[(i * 2 + 1) * 2 + 1] = if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let (_, cs) = tape_route(&u, &w, &cfg)?;
    Ok((0..4)
        .map(|i| cs.iter().map(|c| c.data()[i * 2]).collect())
        .collect())
}

/// One input, one output: routing must reduce to `squash(W·u)` exactly.
pub fn degenerate_gap() -> Result<f64> {
    let cfg = CapsuleConfig {
        in_capsules: 1,
        in_dim: 2,
        out_capsules: 1,
        out_dim: 3,
        routing_iters: 3,
    };
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let mut r = rng(seed);
        let u = Tensor::randn(&[1, 1, 2], 1.0, &mut r);
        let w = Tensor::randn(&cfg.transform_shape(), 1.0, &mut r);
        let (out, _) = tape_route(&u, &w, &cfg)?;
        let wu: Vec<f64> = (0..3)
            .map(|k| w.data()[k * 2] * u.data()[0] + w.data()[k * 2 + 1] * u.data()[1])
            .collect();
        let expect = roct_core::capsule::squash_vec(&wu);
        for (a, b) in out.iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Class sizes of the five-class OCT fixture: AMD, CSR, DR, MH, NORMAL.
pub const OCTID_CLASSES: [(&str, usize); 5] =
    [("AMD", 55), ("CSR", 102), ("DR", 107), ("MH", 105), ("NORMAL", 206)];

/// Empty placeholder files under `root/<class>/`; enough for scanning and
/// splitting, which never decode.
pub fn write_octid_fixture(root: &std::path::Path) -> std::io::Result<()> {
    for (class, n) in OCTID_CLASSES {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir)?;
        for i in 0..n {
            std::fs::write(dir.join(format!("{class}{i:03}.png")), b"")?;
        }
    }
    Ok(())
}

/// Writes `CLASS-PATIENT-INDEX.png` grayscale images.
pub fn write_kermany_images(
    dir: &std::path::Path,
    class: &str,
    patients: std::ops::Range<u32>,
    per_patient: u32,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for p in patients {
        for i in 1..=per_patient {
            let img = image::GrayImage::from_fn(12, 10, |x, y| image::Luma([((x * 20 + y * 7 + p) % 256) as u8]));
            img.save(dir.join(format!("{class}-{p}-{i}.png")))
                .map_err(std::io::Error::other)?;
        }
    }
    Ok(())
}

/// Two-class synthetic set: class 0 is a Gaussian blob at a random position,
/// class 1 a sinusoidal stripe pattern with random phase, period, and
/// orientation. Both carry mild noise and stay within [0, 1].
pub fn blob_stripe_set(per_class: usize, size: usize, seed: u64) -> roct_core::data::ImageSet {
    use rand::Rng;
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let s = size as f64;
    for i in 0..2 * per_class {
        let class = i % 2;
        let mut t = Tensor::zeros(&[size, size, 1]);
        if class == 0 {
            let (cy, cx) = (r.random_range(0.25..0.75) * s, r.random_range(0.25..0.75) * s);
            let sigma = r.random_range(0.08..0.16) * s;
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    t.data_mut()[y * size + x] = 0.1 + 0.8 * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        } else {
            let period = r.random_range(5.0..9.0);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let vertical = r.random_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    let p = if vertical { x } else { y } as f64;
                    t.data_mut()[y * size + x] =
                        0.5 + 0.4 * (std::f64::consts::TAU * p / period + phase).sin();
                }
            }
        }
        for v in t.data_mut() {
            *v = (*v + r.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        images.push(t);
        labels.push(class);
    }
    roct_core::data::ImageSet {
        classes: vec!["blob".into(), "stripe".into()],
        images,
        labels,
    }
}

/// Toy ensemble (64 + 40 channels) and the full capsule head at 32×32.
pub fn learnability_spec() -> roct_core::model::ModelSpec {
    roct_core::model::ModelSpec {
        input_size: 32,
        ..roct_core::model::ModelSpec::toy(2)
    }
}

/// Standard optimizer settings, no augmentation (the fixture measures fitting).
pub fn learnability_config(seed: u64) -> roct_core::trainer::TrainConfig {
    roct_core::trainer::TrainConfig {
        seed,
        augment: roct_core::data::AugmentConfig::none(),
        ..roct_core::trainer::TrainConfig::standard()
    }
}

/// Trains until the train set is fit in eval mode. Returns the number of
/// epochs needed, or `None` if `max_epochs` pass first.
pub fn epochs_to_fit(seed: u64, max_epochs: usize) -> Result<Option<usize>> {
    use roct_core::trainer::{accuracy, Trainer};
    let set = blob_stripe_set(20, 32, seed);
    let mut model = roct_core::model::ModelGraph::new(learnability_spec(), seed)?;
    let cfg = learnability_config(seed);
    let batch = cfg.batch_size;
    let mut trainer = Trainer::new(cfg)?;
    for epoch in 0..max_epochs {
        trainer.train_epoch(&mut model, &set, epoch)?;
        if accuracy(&model, &set, batch)? == 1.0 {
            return Ok(Some(epoch + 1));
        }
    }
    Ok(None)
}

/// Multi-class pattern set drawn from `kinds` (blob, hstripe, vstripe,
/// checker, ring, diagonal), `per_class` images each, interleaved by class.
pub fn pattern_set(kinds: &[&str], per_class: usize, size: usize, seed: u64) -> roct_core::data::ImageSet {
    use rand::Rng;
    use std::f64::consts::TAU;
    let mut r = rng(seed);
    let s = size as f64;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_class {
        for (label, kind) in kinds.iter().enumerate() {
            let (cy, cx) = (r.random_range(0.3..0.7) * s, r.random_range(0.3..0.7) * s);
            let period = r.random_range(5.0..8.0);
            let phase = r.random_range(0.0..TAU);
            let mut t = Tensor::zeros(&[size, size, 1]);
            for y in 0..size {
                for x in 0..size {
                    let (fy, fx) = (y as f64, x as f64);
                    let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                    let v = match *kind {
                        "blob" => 0.1 + 0.8 * (-(d * d) / (2.0 * (0.12 * s).powi(2))).exp(),
                        "hstripe" => 0.5 + 0.4 * (TAU * fy / period + phase).sin(),
                        "vstripe" => 0.5 + 0.4 * (TAU * fx / period + phase).sin(),
                        "checker" => {
                            0.5 + 0.4 * (TAU * fy / period + phase).sin().signum() * (TAU * fx / period).sin().signum()
                        }
                        "ring" => 0.1 + 0.8 * (-((d - 0.25 * s).powi(2)) / 4.0).exp(),
                        "diagonal" => 0.5 + 0.4 * (TAU * (fx + fy) / period + phase).sin(),
                        other => panic!("unknown pattern {other}"),
                    };
                    t.data_mut()[y * size + x] = (v + r.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
            }
            images.push(t);
            labels.push(label);
        }
    }
    roct_core::data::ImageSet {
        classes: kinds.iter().map(|k| k.to_string()).collect(),
        images,
        labels,
    }
}

/// Eval-mode mean cross-entropy over a whole set.
pub fn set_loss(model: &roct_core::model::ModelGraph, set: &roct_core::data::ImageSet) -> Result<f64> {
    let refs: Vec<&Tensor> = set.images.iter().collect();
    let probs = model.predict(&Tensor::stack(&refs)?)?;
    let k = model.class_count();
    Ok(set
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data()[i * k + l].max(1e-12).ln())
        .sum::<f64>()
        / set.len() as f64)
}

pub struct TransferOutcome {
    pub report: roct_core::model::LoadReport,
    pub source_accuracy: f64,
    pub transfer_accuracy: f64,
    pub scratch_accuracy: f64,
}

/// Fits a 4-class model on corpus A, loosely loads it into a 5-class model,
/// and compares first-epoch validation accuracy on corpus B against the
/// same 5-class model trained from its initialization.
pub fn transfer_fixture(seed: u64) -> Result<TransferOutcome> {
    use roct_core::model::{checkpoint::apply_checkpoint, checkpoint::Checkpoint, ModelGraph};
    use roct_core::trainer::{accuracy, fit, Trainer};

    let a_kinds = ["blob", "hstripe", "vstripe", "checker"];
    let b_kinds = ["blob", "hstripe", "vstripe", "checker", "ring"];
    let spec = |k| roct_core::model::ModelSpec {
        input_size: 32,
        ..roct_core::model::ModelSpec::toy(k)
    };
    let cfg = roct_core::trainer::TrainConfig {
        epochs: 20,
        ..learnability_config(seed)
    };

    let a_train = pattern_set(&a_kinds, 8, 32, seed);
    let mut source = ModelGraph::new(spec(4), seed)?;
    fit(&mut source, &a_train, None, &cfg, None)?;
    let ckpt = Checkpoint::from_model(&source)?;

    let source_accuracy = accuracy(&source, &a_train, cfg.batch_size)?;

    let b_train = pattern_set(&b_kinds, 16, 32, seed + 100);
    let b_val = pattern_set(&b_kinds, 6, 32, seed + 200);
    let mut scratch = ModelGraph::new(spec(5), seed + 1)?;
    let mut transfer = ModelGraph::new(spec(5), seed + 1)?;
    let report = apply_checkpoint(&ckpt, &mut transfer, false)?;

    let mut out = [0.0; 2];
    for (slot, model) in [&mut scratch, &mut transfer].into_iter().enumerate() {
        Trainer::new(cfg.clone())?.train_epoch(model, &b_train, 0)?;
        out[slot] = accuracy(model, &b_val, cfg.batch_size)?;
    }
    Ok(TransferOutcome {
        report,
        source_accuracy,
        scratch_accuracy: out[0],
        transfer_accuracy: out[1],
    })
}

/// A small two-backbone spec used where only plumbing matters.
pub fn small_spec(class_count: usize) -> roct_core::model::ModelSpec {
    use roct_core::model::{BackboneFamily, BackboneSpec, ModelSpec};
    let bb = |family, final_channels| BackboneSpec {
        family,
        stem_channels: 4,
        block_count: 2,
        final_channels,
        downsample_factor: 4,
    };
    ModelSpec {
        backbone_a: bb(BackboneFamily::XceptionMini, 6),
        backbone_b: Some(bb(BackboneFamily::Effv2Mini, 4)),
        input_size: 16,
        ..ModelSpec::toy(class_count)
    }
}

/// Shapes of every stage of a toy-ensemble forward pass on a 64×64 batch of
/// two: features, compressed, capsules, flattened, logits.
pub fn toy_stage_shapes(class_count: usize) -> Result<Vec<Vec<usize>>> {
    let model = roct_core::model::ModelGraph::new(roct_core::model::ModelSpec::toy(class_count), 0)?;
    let t = roct_core::Tape::new();
    let x = t.constant(Tensor::rand_uniform(&[2, 64, 64, 1], 0.0, 1.0, &mut rng(0)))?;
    let out = model.forward(&t, x, false, &mut rng(0))?;
    let flat = t.flatten(out.capsules)?;
    Ok(vec![
        t.shape(out.features),
        t.shape(out.compressed),
        t.shape(out.capsules),
        t.shape(flat),
        t.shape(out.logits),
    ])
}

/// Feature maps `a` and `b` share every per-channel mean (`b` permutes each
/// channel's spatial positions). Returns the max |compress(a) − compress(b)|
/// under a seeded non-uniform kernel and the max |gap(a) − gap(b)|.
pub fn srnet_gap_separation(seed: u64) -> Result<(f64, f64)> {
    use rand::seq::SliceRandom;
    let (h, w, c) = (4, 4, 6);
    let mut r = rng(seed);
    let a = Tensor::rand_uniform(&[1, h, w, c], 0.0, 1.0, &mut r);
    let mut b = a.clone();
    for ch in 0..c {
        let mut pos: Vec<usize> = (0..h * w).collect();
        pos.shuffle(&mut r);
        for (dst, &src) in pos.iter().enumerate() {
            b.data_mut()[dst * c + ch] = a.data()[src * c + ch];
        }
    }
    let kernel = Tensor::rand_uniform(&[h, w, c], 0.0, 2.0 / (h * w) as f64, &mut r);
    let sr = SrCompressor::new(h, w, c);
    let t = roct_core::Tape::new();
    let (av, bv, kv) = (t.constant(a)?, t.constant(b)?, t.constant(kernel)?);
    let (ca, cb) = (sr.compress(&t, av, kv)?, sr.compress(&t, bv, kv)?);
    let (ga, gb) = (roct_core::srnet::gap(&t, av)?, roct_core::srnet::gap(&t, bv)?);
    Ok((
        t.value(ca).max_abs_diff(&t.value(cb)),
        t.value(ga).max_abs_diff(&t.value(gb)),
    ))
}

/// Counts random prediction logs whose matrix-derived values disagree with
/// direct per-sample counting.
pub fn metrics_log_mismatches(logs: usize, seed: u64) -> Result<usize> {
    use rand::Rng;
    use roct_core::metrics::ConfusionMatrix;
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..logs {
        let k = r.random_range(2..=6);
        let n = r.random_range(1..=200);
        let log: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let t = r.random_range(0..k);
                (t, if r.random_bool(0.6) { t } else { r.random_range(0..k) })
            })
            .collect();
        let mut cm = ConfusionMatrix::new((0..k).map(|i| i.to_string()).collect());
        for &(t, p) in &log {
            cm.accumulate_index(t, p)?;
        }
        let count = |f: &dyn Fn(usize, usize) -> bool| log.iter().filter(|&&(t, p)| f(t, p)).count() as u64;
        let mut ok = cm.overall_accuracy()? == count(&|t, p| t == p) as f64 / n as f64;
        let mut weighted = 0.0;
        let mut defined = true;
        for c in 0..k {
            let tp = count(&|t, p| t == c && p == c);
            let fn_ = count(&|t, p| t == c && p != c);
            let fp = count(&|t, p| t != c && p == c);
            let tn = count(&|t, p| t != c && p != c);
            ok &= (cm.true_positives(c), cm.false_negatives(c), cm.false_positives(c), cm.true_negatives(c))
                == (tp, fn_, fp, tn);
            if tn + fp == 0 {
                defined = false;
                continue;
            }
            let s = tn as f64 / (tn + fp) as f64;
            ok &= cm.specificity(c)? == s;
            weighted += s * (tp + fn_) as f64;
        }
        if defined {
            ok &= cm.mean_specificity()? == weighted / n as f64;
        }
        bad += usize::from(!ok);
    }
    Ok(bad)
}
