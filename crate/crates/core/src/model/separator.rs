//! Text-guided feature separation: residual convolutional ECG encoder,
//! multi-head cross-attention scoring against the report embedding, hard
//! masking with a straight-through backward, and per-channel codebook
//! quantization with the masked two-term codebook loss.

use ecgtwin_nn::{Graph, Real, Var};

use crate::config::{Dims, ATTN_HEADS};
use crate::model::{encoder_channels, BoundParams};

/// Everything the separation pass produces, as graph variables.
pub struct SeparatedVars {
    /// Encoder features e, [N, C, L_e].
    pub e: Var,
    /// Attention scores in (0,1), [N, C, L_e].
    pub scores: Var,
    /// Hard mask A, [N, C, L_e], straight-through backward.
    pub mask: Var,
    /// Quantized features Q(e) on the straight-through path, [N, C, L_e].
    pub q_e: Var,
    /// Disease-indicative features Q(e) * A.
    pub f_d: Var,
    /// Personal-normal features e * (1 - A).
    pub f_p: Var,
    /// Masked two-term codebook loss, scalar.
    pub vq_loss: Var,
    /// Chosen codebook row per (sample, channel), length N * C.
    pub indices: Vec<usize>,
}

/// Residual downsampling encoder: stem conv (stride 2), then eight stages
/// of conv-relu-conv with a projection skip, each halving the length.
/// 12 x 4096 in, C x L_e out.
pub fn encode_ecg<T: Real>(g: &mut Graph<T>, p: &BoundParams, x: Var, dims: &Dims) -> Var {
    let stem = g.conv1d(x, p.v("separator.encoder.stem.w"), p.v("separator.encoder.stem.b"), 2, 1);
    let mut h = g.relu(stem);
    for i in 0..encoder_channels(dims.c).len() {
        let c1 = g.conv1d(
            h,
            p.v(&format!("separator.encoder.stage{i}.conv1.w")),
            p.v(&format!("separator.encoder.stage{i}.conv1.b")),
            2,
            1,
        );
        let a1 = g.relu(c1);
        let c2 = g.conv1d(
            a1,
            p.v(&format!("separator.encoder.stage{i}.conv2.w")),
            p.v(&format!("separator.encoder.stage{i}.conv2.b")),
            1,
            1,
        );
        let skip = g.conv1d(
            h,
            p.v(&format!("separator.encoder.stage{i}.skip.w")),
            p.v(&format!("separator.encoder.stage{i}.skip.b")),
            2,
            0,
        );
        let sum = g.add(c2, skip);
        h = g.relu(sum);
    }
    h
}

/// Slices rows [r0, r1) of a 2-D tensor as [r1-r0, d].
fn slice_rows<T: Real>(g: &mut Graph<T>, x: Var, rows: usize, d: usize, r0: usize, r1: usize) -> Var {
    let flat = g.reshape(x, &[1, rows * d]);
    let cut = g.slice_last(flat, r0 * d, r1 * d);
    g.reshape(cut, &[r1 - r0, d])
}

/// Scores every feature element against the compressed report. Queries are
/// the C channel rows of f_ecg; the length-L_t text vector is reshaped into
/// T tokens serving as keys and values. Four heads, concatenated, projected
/// back to L_e, squashed to (0,1).
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    f_ecg: Var,
    f_text: Var,
    dims: &Dims,
) -> Var {
    let shape = g.val(f_ecg).shape().to_vec();
    assert_eq!(shape.len(), 3);
    let (n, c, l_e) = (shape[0], shape[1], shape[2]);
    assert_eq!(l_e, dims.l_e);
    assert_eq!(g.val(f_text).shape(), &[n, dims.l_t]);
    let t = dims.t;
    let token_dim = dims.l_t / t;
    let d_h = dims.l_e;
    let d_v = dims.l_e / ATTN_HEADS;

    let queries = g.reshape(f_ecg, &[n * c, l_e]);
    let tokens = g.reshape(f_text, &[n * t, token_dim]);

    // Project all samples at once, per head.
    let mut head_qs = Vec::with_capacity(ATTN_HEADS);
    let mut head_ks = Vec::with_capacity(ATTN_HEADS);
    let mut head_vs = Vec::with_capacity(ATTN_HEADS);
    for h in 0..ATTN_HEADS {
        head_qs.push(g.linear(
            queries,
            p.v(&format!("separator.attn.head{h}.q.w")),
            p.v(&format!("separator.attn.head{h}.q.b")),
        ));
        head_ks.push(g.linear(
            tokens,
            p.v(&format!("separator.attn.head{h}.k.w")),
            p.v(&format!("separator.attn.head{h}.k.b")),
        ));
        head_vs.push(g.linear(
            tokens,
            p.v(&format!("separator.attn.head{h}.v.w")),
            p.v(&format!("separator.attn.head{h}.v.b")),
        ));
    }

    let scale = 1.0 / (d_h as f64).sqrt();
    let mut per_sample = Vec::with_capacity(n);
    for s in 0..n {
        let mut head_outs = Vec::with_capacity(ATTN_HEADS);
        for h in 0..ATTN_HEADS {
            let q2 = slice_rows(g, head_qs[h], n * c, d_h, s * c, (s + 1) * c);
            let q = g.reshape(q2, &[1, c, d_h]);
            let k2 = slice_rows(g, head_ks[h], n * t, d_h, s * t, (s + 1) * t);
            let k = g.reshape(k2, &[1, t, d_h]);
            let v2 = slice_rows(g, head_vs[h], n * t, d_v, s * t, (s + 1) * t);
            let v = g.reshape(v2, &[1, t, d_v]);
            let logits = g.matmul_nt(q, k);
            let scaled = g.scale(logits, scale);
            let attn = g.softmax_last(scaled);
            head_outs.push(g.matmul_nn(attn, v));
        }
        let merged = g.concat_last(&head_outs);
        per_sample.push(g.reshape(merged, &[1, 1, c * l_e]));
    }
    let stacked = g.concat_last(&per_sample);
    let rows = g.reshape(stacked, &[n * c, l_e]);
    let projected = g.linear(rows, p.v("separator.attn.out.w"), p.v("separator.attn.out.b"));
    let squashed = g.sigmoid(projected);
    g.reshape(squashed, &[n, c, l_e])
}

/// Masked two-term codebook loss. The first term moves codebook entries
/// toward (frozen) encoder rows; the second commits the encoder to its
/// (frozen) chosen entries. Each term is the per-sample squared norm over the
/// masked map, averaged over the batch.
pub fn vq_loss<T: Real>(g: &mut Graph<T>, e: Var, q_gather: Var, mask: Var) -> Var {
    let n = g.val(e).shape()[0];
    let sg_e = g.stop_grad(e);
    let d1 = g.sub(sg_e, q_gather);
    let m1 = g.mul(d1, mask);
    let sq1 = g.mul(m1, m1);
    let s1 = g.sum_all(sq1);
    let sg_q = g.stop_grad(q_gather);
    let d2 = g.sub(sg_q, e);
    let m2 = g.mul(d2, mask);
    let sq2 = g.mul(m2, m2);
    let s2 = g.sum_all(sq2);
    let total = g.add(s1, s2);
    g.scale(total, 1.0 / n as f64)
}

/// Full separation pass. `text_raw` is the frozen backend embedding
/// [N, raw_dim]; the learnable compression to L_t happens here.
///
/// `use_vq = false` bypasses the codebook entirely: f_d = e * A, the loss is
/// zero, and no indices are chosen. `freeze_mask = true` detaches the hard
/// mask so it acts as a constant during backward (finite-difference probes).
pub fn separate<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    x: Var,
    text_raw: Var,
    dims: &Dims,
    l: f64,
    use_vq: bool,
    freeze_mask: bool,
) -> SeparatedVars {
    let e = encode_ecg(g, p, x, dims);
    let f_text = g.linear(text_raw, p.v("text.compress.w"), p.v("text.compress.b"));
    let scores = cross_attention(g, p, e, f_text, dims);
    let hard = g.binarize_ste(scores, l);
    let mask = if freeze_mask { g.stop_grad(hard) } else { hard };
    let (q_e, vq, indices) = if use_vq {
        let cb = p.v("separator.codebook");
        let (q_e, indices) = g.quantize_ste(e, cb);
        let shape = g.val(e).shape().to_vec();
        let q_gather = g.gather_rows(cb, &indices, &shape);
        let vq = vq_loss(g, e, q_gather, mask);
        (q_e, vq, indices)
    } else {
        (e, g.constant(ecgtwin_nn::Tensor::scalar(ecgtwin_nn::real::c(0.0))), Vec::new())
    };
    let f_d = g.mul(q_e, mask);
    let neg = g.scale(mask, -1.0);
    let inv = g.add_scalar(neg, 1.0);
    let f_p = g.mul(e, inv);
    SeparatedVars {
        e,
        scores,
        mask,
        q_e,
        f_d,
        f_p,
        vq_loss: vq,
        indices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::model::{bind_params, init_params, trainable_none};
    use ecgtwin_nn::seed::Stream;
    use ecgtwin_nn::Tensor;

    type G = Graph<f32>;

    fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f32> {
        let mut s = Stream::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| (s.normal() * scale) as f32).collect())
    }

    #[test]
    fn encoder_shape_and_finiteness() {
        let cfg = Config::default();
        let store = init_params(&cfg);
        let mut g: G = Graph::new();
        let p = bind_params(&mut g, &store, &trainable_none);
        let zero = g.constant(Tensor::zeros(&[2, 12, 4096]));
        let e = encode_ecg(&mut g, &p, zero, &cfg.dims);
        assert_eq!(g.val(e).shape(), &[2, 64, 8]);
        assert!(g.val(e).all_finite());

        let x = g.constant(random_tensor(&[2, 12, 4096], 3, 1.0));
        let e = encode_ecg(&mut g, &p, x, &cfg.dims);
        assert!(g.val(e).all_finite());
    }

    #[test]
    fn attention_scores_in_open_unit_interval() {
        let cfg = Config::default();
        let store = init_params(&cfg);
        let mut g: G = Graph::new();
        let p = bind_params(&mut g, &store, &trainable_none);
        let f_ecg = g.constant(random_tensor(&[3, 64, 8], 5, 1.0));
        let f_text = g.constant(random_tensor(&[3, 128], 6, 1.0));
        let scores = cross_attention(&mut g, &p, f_ecg, f_text, &cfg.dims);
        assert_eq!(g.val(scores).shape(), &[3, 64, 8]);
        for &v in g.val(scores).data() {
            assert!(v > 0.0 && v < 1.0, "score {v} outside (0,1)");
        }
    }

    #[test]
    fn different_reports_give_different_scores() {
        let cfg = Config::default();
        let store = init_params(&cfg);
        let mut g: G = Graph::new();
        let p = bind_params(&mut g, &store, &trainable_none);
        let x = g.constant(random_tensor(&[1, 12, 4096], 11, 1.0));
        let backend = crate::text::StubBackend { raw_dim: cfg.dims.raw_dim, seed: 0 };
        let mut score_mats = Vec::new();
        for text in ["significant st segment elevation", "sinus rhythm normal ecg"] {
            let raw = crate::text::embed_reports(&backend, &[text]).unwrap();
            let raw = g.constant(Tensor::from_vec(&[1, cfg.dims.raw_dim], raw));
            let out = separate(&mut g, &p, x, raw, &cfg.dims, cfg.l, true, false);
            score_mats.push(g.val(out.scores).data().to_vec());
        }
        let max_diff = score_mats[0]
            .iter()
            .zip(&score_mats[1])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-4, "text has no effect on scores: {max_diff}");
    }

    #[test]
    fn mask_binarization_cases() {
        let mut g: G = Graph::new();
        let scores = g.constant(Tensor::from_vec(&[1, 2, 2], vec![0.2, 0.7, 0.5, 0.4]));
        let m = g.binarize_ste(scores, 0.5);
        assert_eq!(g.val(m).data(), &[0.0, 1.0, 1.0, 0.0]);
        let low = g.binarize_ste(scores, 0.8);
        assert_eq!(g.val(low).data(), &[0.0, 0.0, 0.0, 0.0]);
        // Threshold 0: every score in (0,1) is included.
        let all = g.binarize_ste(scores, 0.0);
        assert_eq!(g.val(all).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quantization_picks_nearest_with_tie_to_lowest() {
        let mut g: G = Graph::new();
        let cb = g.constant(Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let e = g.constant(Tensor::from_vec(&[1, 1, 3], vec![0.9, 1.1, 1.0]));
        let (q, idx) = g.quantize_ste(e, cb);
        assert_eq!(idx, vec![1]);
        assert_eq!(g.val(q).data(), &[1.0, 1.0, 1.0]);

        // Exactly between the two entries: lowest index wins.
        let mid = g.constant(Tensor::from_vec(&[1, 1, 3], vec![0.5, 0.5, 0.5]));
        let (qm, idxm) = g.quantize_ste(mid, cb);
        assert_eq!(idxm, vec![0]);
        assert_eq!(g.val(qm).data(), &[0.0, 0.0, 0.0]);

        // Rows already on codebook entries are fixed points.
        let fixed = g.constant(Tensor::from_vec(&[1, 2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let (qf, idxf) = g.quantize_ste(fixed, cb);
        assert_eq!(g.val(qf).data(), g.val(fixed).data());
        assert_eq!(idxf, vec![0, 1]);
    }

    #[test]
    fn quantization_is_idempotent_and_contractive() {
        let mut g: G = Graph::new();
        let cb_t = random_tensor(&[6, 4], 9, 0.5);
        let cb = g.constant(cb_t.clone());
        let e_t = random_tensor(&[2, 5, 4], 10, 1.0);
        let e = g.constant(e_t.clone());
        let (q, idx) = g.quantize_ste(e, cb);
        let (q2, idx2) = g.quantize_ste(q, cb);
        assert_eq!(g.val(q).data(), g.val(q2).data());
        assert_eq!(idx, idx2);
        // Chosen entry is at least as close as every other entry.
        for (r, &ki) in idx.iter().enumerate() {
            let row = &e_t.data()[r * 4..(r + 1) * 4];
            let dist = |k: usize| -> f64 {
                let entry = &cb_t.data()[k * 4..(k + 1) * 4];
                row.iter()
                    .zip(entry)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum()
            };
            for k in 0..6 {
                assert!(dist(ki) <= dist(k) + 1e-12);
            }
        }
    }

    #[test]
    fn codebook_loss_cases() {
        let mut g: G = Graph::new();
        // Single element: e = 0.5, entry = 0, mask = 1 -> 0.25 + 0.25.
        let e = g.constant(Tensor::from_vec(&[1, 1, 1], vec![0.5]));
        let q = g.constant(Tensor::from_vec(&[1, 1, 1], vec![0.0]));
        let ones = g.constant(Tensor::from_vec(&[1, 1, 1], vec![1.0]));
        let v = vq_loss(&mut g, e, q, ones);
        assert!((g.val(v).item() - 0.5).abs() < 1e-6);

        // Zero mask kills the loss regardless of the gap.
        let zeros = g.constant(Tensor::from_vec(&[1, 1, 1], vec![0.0]));
        let v0 = vq_loss(&mut g, e, q, zeros);
        assert_eq!(g.val(v0).item(), 0.0);

        // Matching quantization kills it too.
        let qe = g.constant(Tensor::from_vec(&[1, 1, 1], vec![0.5]));
        let vm = vq_loss(&mut g, e, qe, ones);
        assert_eq!(g.val(vm).item(), 0.0);
    }

    #[test]
    fn codebook_loss_invariant_to_entry_permutation() {
        let cfg = Config::default();
        let dims = cfg.dims;
        let mut s = Stream::new(17);
        let k = 5usize;
        let cb: Vec<f32> = (0..k * dims.l_e).map(|_| s.normal() as f32).collect();
        // Reversed entry order; argmin must follow the same vectors.
        let mut cb_rev = vec![0.0f32; cb.len()];
        for i in 0..k {
            cb_rev[i * dims.l_e..(i + 1) * dims.l_e]
                .copy_from_slice(&cb[(k - 1 - i) * dims.l_e..(k - i) * dims.l_e]);
        }
        let e_t = random_tensor(&[1, 4, dims.l_e], 18, 1.0);
        let m_t = Tensor::from_vec(&[1, 4, dims.l_e], vec![1.0; 4 * dims.l_e]);

        let eval = |cb_data: &[f32]| -> (f32, Vec<usize>) {
            let mut g: G = Graph::new();
            let cb = g.constant(Tensor::from_vec(&[k, dims.l_e], cb_data.to_vec()));
            let e = g.constant(e_t.clone());
            let m = g.constant(m_t.clone());
            let (_, idx) = g.quantize_ste(e, cb);
            let qg = g.gather_rows(cb, &idx, &[1, 4, dims.l_e]);
            let v = vq_loss(&mut g, e, qg, m);
            (g.val(v).item(), idx)
        };
        let (va, ia) = eval(&cb);
        let (vb, ib) = eval(&cb_rev);
        assert!((va - vb).abs() < 1e-6);
        for (a, b) in ia.iter().zip(&ib) {
            assert_eq!(k - 1 - a, *b, "indices must permute with the entries");
        }
    }

    #[test]
    fn separation_algebra() {
        let cfg = Config::default();
        let store = init_params(&cfg);
        let mut g: G = Graph::new();
        let p = bind_params(&mut g, &store, &trainable_none);
        let x = g.constant(random_tensor(&[2, 12, 4096], 21, 1.0));
        let raw = g.constant(random_tensor(&[2, cfg.dims.raw_dim], 22, 1.0));
        let out = separate(&mut g, &p, x, raw, &cfg.dims, cfg.l, true, false);
        let e = g.val(out.e).data().to_vec();
        let q = g.val(out.q_e).data().to_vec();
        let m = g.val(out.mask).data().to_vec();
        let fd = g.val(out.f_d).data().to_vec();
        let fp = g.val(out.f_p).data().to_vec();
        for i in 0..e.len() {
            assert_eq!(fd[i] * fp[i], 0.0, "disjoint supports");
            assert_eq!(fd[i] + q[i] * (1.0 - m[i]), q[i], "mask partition of Q(e)");
            if m[i] == 0.0 {
                assert_eq!(fp[i], e[i], "personal features follow e off-mask");
            } else {
                assert_eq!(fd[i], q[i], "disease features follow Q(e) on-mask");
            }
        }
        assert!(g.val(out.vq_loss).item() >= 0.0);

        // Boundary thresholds force the masks the algebra predicts.
        let all_on = separate(&mut g, &p, x, raw, &cfg.dims, 0.0, true, false);
        assert!(g.val(all_on.f_p).data().iter().all(|&v| v == 0.0));
        let all_off = separate(&mut g, &p, x, raw, &cfg.dims, 1.0, true, false);
        assert!(g.val(all_off.f_d).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.val(all_off.vq_loss).item(), 0.0);
        assert_eq!(g.val(all_off.f_p).data(), g.val(all_off.e).data());
    }

    #[test]
    fn bypass_mode_skips_the_codebook() {
        let cfg = Config::default();
        let store = init_params(&cfg);
        let mut g: G = Graph::new();
        let p = bind_params(&mut g, &store, &trainable_none);
        let x = g.constant(random_tensor(&[1, 12, 4096], 40, 1.0));
        let raw = g.constant(random_tensor(&[1, cfg.dims.raw_dim], 41, 1.0));
        let out = separate(&mut g, &p, x, raw, &cfg.dims, cfg.l, false, false);
        assert!(out.indices.is_empty());
        assert_eq!(g.val(out.vq_loss).item(), 0.0);
        assert_eq!(g.val(out.q_e).data(), g.val(out.e).data());
        let e = g.val(out.e).data().to_vec();
        let m = g.val(out.mask).data().to_vec();
        let fd = g.val(out.f_d).data().to_vec();
        for i in 0..e.len() {
            assert_eq!(fd[i], e[i] * m[i]);
        }
    }
}
