use std::borrow::Cow;

use rayon::prelude::*;

use super::loss::{output_gradient, total_loss, LossBreakdown, LossConfig, Targets};
use super::{log_softmax, softmax, HeadParams, ModelError};
use crate::features::EmbeddingSequence;
use crate::labels::NUM_CLASSES;

/// Head outputs plus the activations needed for the backward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub primary_probs: [f64; NUM_CLASSES],
    pub primary_logprobs: [f64; NUM_CLASSES],
    pub secondary_probs: Option<[f64; NUM_CLASSES]>,
    pub secondary_logprobs: Option<[f64; NUM_CLASSES]>,
    pub attributes: Option<[f64; 3]>,
    cache: Cache,
}

#[derive(Debug, Clone)]
struct Cache {
    alpha: Vec<f64>,
    n_frames: usize,
    /// Layer-mixed frames, T × D.
    x: Vec<f64>,
    /// Post-ReLU outputs of the three pointwise stages, T × C each.
    h: [Vec<f64>; 3],
    text_alpha: Vec<f64>,
    /// Per-layer temporal means of the text input, L_t × D_t.
    text_means: Vec<f64>,
    fused: Vec<f64>,
    /// Post-ReLU hidden layer of the MLP.
    z: Vec<f64>,
}

/// `out = x · W + b` with `W` stored row-major as `x.len() × out.len()`.
#[inline]
fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Accumulates `gW += x ⊗ g`, `gb += g`, and returns `W · g` when requested.
#[inline]
fn affine_backward(x: &[f64], w: &[f64], g: &[f64], gw: &mut [f64], gb: &mut [f64], gx: Option<&mut [f64]>) {
    let n = g.len();
    for (b, gj) in gb.iter_mut().zip(g) {
        *b += gj;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (gwij, gj) in gw[i * n..(i + 1) * n].iter_mut().zip(g) {
            *gwij += xi * gj;
        }
    }
    if let Some(gx) = gx {
        for (i, gxi) in gx.iter_mut().enumerate() {
            let row = &w[i * n..(i + 1) * n];
            *gxi = row.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax Jacobian applied to an upstream gradient.
fn softmax_backward(alpha: &[f64], g_alpha: &[f64], out: &mut [f64]) {
    let dot: f64 = alpha.iter().zip(g_alpha).map(|(a, g)| a * g).sum();
    for ((o, a), g) in out.iter_mut().zip(alpha).zip(g_alpha) {
        *o += a * (g - dot);
    }
}

fn check_input(e: &EmbeddingSequence, layers: usize, dim: usize, what: &str) -> Result<(), ModelError> {
    if e.n_frames == 0 {
        return Err(ModelError::ZeroFrames);
    }
    if e.n_layers != layers || e.dim != dim {
        return Err(ModelError::DimensionMismatch(format!(
            "{what} input is {}×{}, model expects {layers} layers of dim {dim}",
            e.n_layers, e.dim
        )));
    }
    Ok(())
}

pub fn forward(
    speech: &EmbeddingSequence,
    text: Option<&EmbeddingSequence>,
    p: &HeadParams,
) -> Result<ModelOutput, ModelError> {
    let cfg = p.config();
    let o = &p.offsets;
    check_input(speech, cfg.speech_layers, cfg.speech_dim, "speech")?;
    let text = match (cfg.has_text(), text) {
        (true, Some(t)) => {
            check_input(t, cfg.text_layers, cfg.text_dim, "text")?;
            Some(t)
        }
        (true, None) => return Err(ModelError::MissingText),
        (false, _) => None,
    };

    let alpha = if cfg.last_layer_only {
        let mut a = vec![0.0; cfg.speech_layers];
        a[cfg.speech_layers - 1] = 1.0;
        a
    } else {
        softmax(p.slice(&o.speech_logits))
    };
    let (t_len, d, c) = (speech.n_frames, cfg.speech_dim, cfg.conv_channels);
    let mut x = vec![0.0; t_len * d];
    for (l, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for t in 0..t_len {
            for (xv, e) in x[t * d..(t + 1) * d].iter_mut().zip(speech.frame(l, t)) {
                *xv += a * *e as f64;
            }
        }
    }

    let mut h: [Vec<f64>; 3] = [vec![0.0; t_len * c], vec![0.0; t_len * c], vec![0.0; t_len * c]];
    for k in 0..3 {
        let (w, b) = (&o.conv[k].0, &o.conv[k].1);
        let (prev, rest) = h.split_at_mut(k);
        let input: &[f64] = if k == 0 { &x } else { &prev[k - 1] };
        let d_in = if k == 0 { d } else { c };
        for t in 0..t_len {
            let out = &mut rest[0][t * c..(t + 1) * c];
            affine(&input[t * d_in..(t + 1) * d_in], p.slice(w), p.slice(b), out);
            relu_in_place(out);
        }
    }

    let mut fused = vec![0.0; cfg.fused_dim()];
    for t in 0..t_len {
        for (s, v) in fused[..c].iter_mut().zip(&h[2][t * c..(t + 1) * c]) {
            *s += v;
        }
    }
    for s in &mut fused[..c] {
        *s /= t_len as f64;
    }

    let (mut text_alpha, mut text_means) = (Vec::new(), Vec::new());
    if let (Some(te), Some(r)) = (text, &o.text_logits) {
        text_alpha = softmax(p.slice(r));
        let dt = cfg.text_dim;
        text_means = vec![0.0; cfg.text_layers * dt];
        for l in 0..cfg.text_layers {
            let m = &mut text_means[l * dt..(l + 1) * dt];
            for t in 0..te.n_frames {
                for (mv, e) in m.iter_mut().zip(te.frame(l, t)) {
                    *mv += *e as f64;
                }
            }
            for mv in m.iter_mut() {
                *mv /= te.n_frames as f64;
            }
            for (f, mv) in fused[c..].iter_mut().zip(m.iter()) {
                *f += text_alpha[l] * mv;
            }
        }
    }

    let mut z = vec![0.0; cfg.mlp_hidden];
    affine(&fused, p.slice(&o.mlp[0].0), p.slice(&o.mlp[0].1), &mut z);
    relu_in_place(&mut z);
    let mut out = vec![0.0; cfg.out_dim()];
    affine(&z, p.slice(&o.mlp[1].0), p.slice(&o.mlp[1].1), &mut out);

    let lp = log_softmax(&out[..NUM_CLASSES]);
    let primary_logprobs: [f64; NUM_CLASSES] = lp.try_into().expect("nine logits");
    let primary_probs = primary_logprobs.map(f64::exp);
    let (secondary_probs, secondary_logprobs) = match cfg.secondary_range() {
        Some(r) => {
            let lp: [f64; NUM_CLASSES] = log_softmax(&out[r]).try_into().expect("nine logits");
            (Some(lp.map(f64::exp)), Some(lp))
        }
        None => (None, None),
    };
    let attributes = cfg.attribute_range().map(|r| {
        let mut a = [0.0; 3];
        for (ak, v) in a.iter_mut().zip(&out[r]) {
            *ak = sigmoid(*v);
        }
        a
    });

    Ok(ModelOutput {
        primary_probs,
        primary_logprobs,
        secondary_probs,
        secondary_logprobs,
        attributes,
        cache: Cache { alpha, n_frames: t_len, x, h, text_alpha, text_means, fused, z },
    })
}

/// Exact gradient of `total_loss` with respect to every parameter.
pub fn backward(
    output: &ModelOutput,
    speech: &EmbeddingSequence,
    targets: &Targets,
    p: &HeadParams,
    loss_cfg: &LossConfig,
) -> Vec<f64> {
    let cfg = p.config();
    let o = &p.offsets;
    let cache = &output.cache;
    let mut grad = vec![0.0; p.len()];
    let g_out = output_gradient(output, targets, loss_cfg, cfg);

    // MLP output layer.
    let mut g_z = vec![0.0; cfg.mlp_hidden];
    {
        let (gw, gb) = split_two(&mut grad, &o.mlp[1].0, &o.mlp[1].1);
        affine_backward(&cache.z, p.slice(&o.mlp[1].0), &g_out, gw, gb, Some(&mut g_z));
    }
    for (g, z) in g_z.iter_mut().zip(&cache.z) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let mut g_fused = vec![0.0; cfg.fused_dim()];
    {
        let (gw, gb) = split_two(&mut grad, &o.mlp[0].0, &o.mlp[0].1);
        affine_backward(&cache.fused, p.slice(&o.mlp[0].0), &g_z, gw, gb, Some(&mut g_fused));
    }

    let c = cfg.conv_channels;
    if let Some(r) = &o.text_logits {
        let dt = cfg.text_dim;
        let g_r = &g_fused[c..];
        let g_alpha: Vec<f64> = (0..cfg.text_layers)
            .map(|l| cache.text_means[l * dt..(l + 1) * dt].iter().zip(g_r).map(|(m, g)| m * g).sum())
            .collect();
        softmax_backward(&cache.text_alpha, &g_alpha, &mut grad[r.clone()]);
    }

    // Temporal mean, then the three pointwise stages in reverse.
    let t_len = cache.n_frames;
    let d = cfg.speech_dim;
    let inv_t = 1.0 / t_len as f64;
    let g_s: Vec<f64> = g_fused[..c].iter().map(|g| g * inv_t).collect();
    let mut g_x = vec![0.0; t_len * d];
    let mut g_h = vec![0.0; c];
    let mut g_prev = vec![0.0; c];
    for t in 0..t_len {
        g_h.copy_from_slice(&g_s);
        for k in (0..3).rev() {
            let act = &cache.h[k][t * c..(t + 1) * c];
            for (g, a) in g_h.iter_mut().zip(act) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let (w, b) = (&o.conv[k].0, &o.conv[k].1);
            let input: &[f64] = if k == 0 { &cache.x[t * d..(t + 1) * d] } else { &cache.h[k - 1][t * c..(t + 1) * c] };
            let (gw, gb) = split_two(&mut grad, w, b);
            if k == 0 {
                affine_backward(input, p.slice(w), &g_h, gw, gb, Some(&mut g_x[t * d..(t + 1) * d]));
            } else {
                affine_backward(input, p.slice(w), &g_h, gw, gb, Some(&mut g_prev));
                std::mem::swap(&mut g_h, &mut g_prev);
            }
        }
    }

    if !cfg.last_layer_only {
        let g_alpha: Vec<f64> = (0..cfg.speech_layers)
            .map(|l| {
                let mut acc = 0.0;
                for t in 0..t_len {
                    for (g, e) in g_x[t * d..(t + 1) * d].iter().zip(speech.frame(l, t)) {
                        acc += g * *e as f64;
                    }
                }
                acc
            })
            .collect();
        softmax_backward(&cache.alpha, &g_alpha, &mut grad[o.speech_logits.clone()]);
    }
    grad
}

/// Weight and bias gradient slices; `w` precedes `b` in the buffer.
fn split_two<'a>(
    grad: &'a mut [f64],
    w: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(w.end <= b.start);
    let (head, tail) = grad.split_at_mut(b.start);
    (&mut head[w.clone()], &mut tail[..b.len()])
}

/// One training example, possibly built on the fly by augmentation.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    /// Stable position in the dataset; fixes the gradient reduction order.
    pub key: usize,
    pub speech: Cow<'a, EmbeddingSequence>,
    pub text: Option<Cow<'a, EmbeddingSequence>>,
    pub targets: Targets,
}

pub fn sample_gradient(
    item: &TrainItem<'_>,
    p: &HeadParams,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>), ModelError> {
    let out = forward(&item.speech, item.text.as_deref(), p)?;
    let loss = total_loss(&out, &item.targets, loss_cfg);
    let grad = backward(&out, &item.speech, &item.targets, p, loss_cfg);
    Ok((loss, grad))
}

/// Mean loss and gradient over a batch.
///
/// Per-sample gradients may be computed in parallel; with `fixed_order` they
/// are summed in ascending `key` order, so the result is bitwise independent
/// of both the worker count and the order of `items`.
pub fn batch_gradient(
    items: &[TrainItem<'_>],
    p: &HeadParams,
    loss_cfg: &LossConfig,
    fixed_order: bool,
) -> Result<(LossBreakdown, Vec<f64>), ModelError> {
    let mut per_sample: Vec<(usize, LossBreakdown, Vec<f64>)> = items
        .par_iter()
        .map(|it| sample_gradient(it, p, loss_cfg).map(|(l, g)| (it.key, l, g)))
        .collect::<Result<_, _>>()?;
    if fixed_order {
        per_sample.sort_by_key(|(k, _, _)| *k);
    }
    let mut loss = LossBreakdown::default();
    let mut grad = vec![0.0; p.len()];
    for (_, l, g) in &per_sample {
        loss.add(l);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = items.len().max(1) as f64;
    loss.scale(1.0 / n);
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{kl_loss, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { speech_layers: 2, speech_dim: 8, conv_channels: 6, mlp_hidden: 5, ..Default::default() }
    }

    fn random_seq(rng: &mut ChaCha8Rng, l: usize, t: usize, d: usize) -> EmbeddingSequence {
        let data = (0..l * t * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingSequence::new(l, t, d, 50.0, data).unwrap()
    }

    #[test]
    fn zero_input_gives_uniform() {
        let mut p = HeadParams::init(small_cfg(), 0).unwrap();
        for name in ["conv.0.bias", "conv.1.bias", "conv.2.bias", "mlp.0.bias", "mlp.1.bias"] {
            p.tensor_mut(name).unwrap().fill(0.0);
        }
        let out = forward(&EmbeddingSequence::zeros(2, 4, 8, 50.0), None, &p).unwrap();
        for x in out.primary_probs {
            assert!((x - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_layer_ignores_layer_logit() {
        let cfg = ModelConfig { speech_layers: 1, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_seq(&mut rng, 1, 5, 8);
        let mut p = HeadParams::init(cfg, 3).unwrap();
        let a = forward(&x, None, &p).unwrap();
        p.tensor_mut("speech.layer_logits").unwrap()[0] = 7.5;
        let b = forward(&x, None, &p).unwrap();
        assert_eq!(a.primary_probs, b.primary_probs);
    }

    #[test]
    fn layer_logit_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_seq(&mut rng, 2, 4, 8);
        let mut p = HeadParams::init(small_cfg(), 4).unwrap();
        p.tensor_mut("speech.layer_logits").unwrap().copy_from_slice(&[0.3, -1.2]);
        let a = forward(&x, None, &p).unwrap();
        for v in p.tensor_mut("speech.layer_logits").unwrap() {
            *v += 3.25;
        }
        let b = forward(&x, None, &p).unwrap();
        for (u, v) in a.primary_probs.iter().zip(b.primary_probs) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn input_errors() {
        let p = HeadParams::init(small_cfg(), 0).unwrap();
        let wrong = EmbeddingSequence::zeros(3, 4, 8, 50.0);
        assert!(matches!(forward(&wrong, None, &p), Err(ModelError::DimensionMismatch(_))));
        let bad_frames = EmbeddingSequence { n_frames: 0, data: vec![], ..EmbeddingSequence::zeros(2, 1, 8, 50.0) };
        assert!(matches!(forward(&bad_frames, None, &p), Err(ModelError::ZeroFrames)));
        let cfg = ModelConfig { text_layers: 2, text_dim: 3, ..small_cfg() };
        let p = HeadParams::init(cfg, 0).unwrap();
        assert!(matches!(forward(&EmbeddingSequence::zeros(2, 4, 8, 50.0), None, &p), Err(ModelError::MissingText)));
    }

    #[test]
    fn stationary_point_has_zero_head_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_seq(&mut rng, 2, 4, 8);
        let p = HeadParams::init(small_cfg(), 6).unwrap();
        let out = forward(&x, None, &p).unwrap();
        let targets = Targets::primary_only(out.primary_probs);
        assert!(kl_loss(&out, &out.primary_probs).unwrap().abs() < 1e-15);
        let g = backward(&out, &x, &targets, &p, &LossConfig::default());
        let b2 = p.offsets.mlp[1].1.clone();
        assert!(g[b2].iter().all(|v| v.abs() < 1e-15));
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn duplicate_sample_reweights_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = HeadParams::init(small_cfg(), 9).unwrap();
        let items: Vec<TrainItem> = (0..4)
            .map(|k| {
                let mut t = [0.0; NUM_CLASSES];
                t[k] = 1.0;
                TrainItem {
                    key: k,
                    speech: Cow::Owned(random_seq(&mut rng, 2, 3 + k, 8)),
                    text: None,
                    targets: Targets::primary_only(t),
                }
            })
            .collect();
        let cfg = LossConfig::default();
        let (_, mean) = batch_gradient(&items, &p, &cfg, true).unwrap();
        let (_, g0) = sample_gradient(&items[0], &p, &cfg).unwrap();
        let mut dup = items.clone();
        dup.push(TrainItem { key: 4, ..items[0].clone() });
        let (_, mean_dup) = batch_gradient(&dup, &p, &cfg, true).unwrap();
        let n = items.len() as f64;
        for i in 0..p.len() {
            let expect = (n * mean[i] + g0[i]) / (n + 1.0);
            assert!((mean_dup[i] - expect).abs() < 1e-12);
            // equivalently: the duplicated sample carries weight 2/(n+1)
        }
    }

    #[test]
    fn fixed_reduction_order_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = HeadParams::init(small_cfg(), 11).unwrap();
        let items: Vec<TrainItem> = (0..7)
            .map(|k| TrainItem {
                key: k,
                speech: Cow::Owned(random_seq(&mut rng, 2, 2 + k % 3, 8)),
                text: None,
                targets: Targets::primary_only([1.0 / 9.0; NUM_CLASSES]),
            })
            .collect();
        let cfg = LossConfig::default();
        let (la, a) = batch_gradient(&items, &p, &cfg, true).unwrap();
        let mut rev = items.clone();
        rev.reverse();
        let (lb, b) = batch_gradient(&rev, &p, &cfg, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (_, c) = batch_gradient(&rev, &p, &cfg, false).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
