//! Personalized ECG synthesis: a fully connected mapper turns the disease
//! features into a style vector, and a nine-block upsampling decoder carries
//! the personal-normal features back to 12 x 4096 samples, restyled at every
//! stage through adaptive instance normalization.

use ecgtwin_nn::{Graph, ParamStore, Real, Tensor, Var};

use crate::config::{AdvLossForm, Config, Dims};
use crate::data::preprocess::TARGET_LEN;
use crate::data::record::{EcgRecord, Label};
use crate::error::Error;
use crate::model::separator::separate;
use crate::model::{
    adain_site_channels, bind_params, decoder_channels, noise_field, BoundParams, DECODER_BLOCKS,
    IN_LEADS, MAPPER_LAYERS, NORM_EPS, STYLE_SIGMA_EPS,
};
use crate::text::{embed_reports, TextBackend};
use crate::F;

/// Disease features [N, C, L_e] -> style vector [N, W]. Eight linear layers
/// with leaky rectification between them, none after the last.
pub fn map_disease<T: Real>(g: &mut Graph<T>, p: &BoundParams, f_d: Var, dims: &Dims) -> Var {
    let shape = g.val(f_d).shape().to_vec();
    let n = shape[0];
    let mut h = g.reshape(f_d, &[n, dims.c * dims.l_e]);
    for i in 0..MAPPER_LAYERS {
        if i > 0 {
            h = g.leaky_relu(h, 0.2);
        }
        h = g.linear(
            h,
            p.v(&format!("generator.mapper.l{i}.w")),
            p.v(&format!("generator.mapper.l{i}.b")),
        );
    }
    h
}

/// Per-site affine head: style [N, W] -> (mu [N, ch], sigma [N, ch]).
/// Sigma passes through softplus plus a floor so it can never reach zero.
pub fn affine_style<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    style: Var,
    site: usize,
    ch: usize,
) -> (Var, Var) {
    let out = g.linear(
        style,
        p.v(&format!("generator.affine{site:02}.w")),
        p.v(&format!("generator.affine{site:02}.b")),
    );
    let mu = g.slice_last(out, 0, ch);
    let raw = g.slice_last(out, ch, 2 * ch);
    let sp = g.softplus(raw);
    let sigma = g.add_scalar(sp, STYLE_SIGMA_EPS);
    (mu, sigma)
}

/// Adaptive instance normalization: normalize each (sample, channel) row to
/// zero mean and unit population std, then rescale by sigma and shift by mu.
pub fn adain<T: Real>(g: &mut Graph<T>, x: Var, mu: Var, sigma: Var) -> Var {
    let normed = g.instance_norm(x, NORM_EPS);
    let scaled = g.mul_chan(normed, sigma);
    g.add_chan(scaled, mu)
}

/// Adds the fixed noise field, gated per channel by a learned scale that
/// starts at zero. `field` is a [1, C, L_e] constant shared by the batch.
pub fn inject_noise<T: Real>(g: &mut Graph<T>, p: &BoundParams, f_p: Var, field: Var) -> Var {
    let shape = g.val(f_p).shape().to_vec();
    let eta = g.chan_expand(p.v("generator.noise_scale"), shape[2]);
    let gated = g.mul(eta, field);
    g.add_b1(f_p, gated)
}

/// Decoder: style-conditioned stem on the noised personal features, then
/// nine blocks of upsample / conv / AdaIN / conv / AdaIN, then a width-1
/// conv down to the 12 leads. [N, C, L_e] -> [N, 12, L_e * 2^9].
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    f_p: Var,
    style: Var,
    field: Var,
    dims: &Dims,
) -> Var {
    let sites = adain_site_channels(dims.c);
    let chans = decoder_channels(dims.c);
    let noised = inject_noise(g, p, f_p, field);
    let (mu, sigma) = affine_style(g, p, style, 0, sites[0]);
    let mut h = adain(g, noised, mu, sigma);
    for b in 0..DECODER_BLOCKS {
        h = g.upsample2(h);
        h = g.conv1d(
            h,
            p.v(&format!("generator.dec{b}.conv1.w")),
            p.v(&format!("generator.dec{b}.conv1.b")),
            1,
            1,
        );
        let (mu1, sg1) = affine_style(g, p, style, 1 + 2 * b, chans[b + 1]);
        h = adain(g, h, mu1, sg1);
        h = g.conv1d(
            h,
            p.v(&format!("generator.dec{b}.conv2.w")),
            p.v(&format!("generator.dec{b}.conv2.b")),
            1,
            1,
        );
        let (mu2, sg2) = affine_style(g, p, style, 2 + 2 * b, chans[b + 1]);
        h = adain(g, h, mu2, sg2);
    }
    g.conv1d(h, p.v("generator.final.w"), p.v("generator.final.b"), 1, 0)
}

/// Map the disease features to a style and decode the personal features
/// under it: the whole generator in one call.
pub fn generate<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    f_p: Var,
    f_d: Var,
    field: Var,
    dims: &Dims,
) -> Var {
    let style = map_disease(g, p, f_d, dims);
    decode(g, p, f_p, style, field, dims)
}

/// mean over rows of (1 - cosine similarity); rows with zero norm score
/// similarity 0 and contribute 1.
pub fn mean_sim_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let cos = g.cosine_rows(a, b);
    let neg = g.scale(cos, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    g.mean_all(one_minus)
}

/// Generator-side adversarial loss over fake logits [N, 1].
pub fn adv_g_loss<T: Real>(g: &mut Graph<T>, fake_logits: Var, form: AdvLossForm) -> Var {
    match form {
        AdvLossForm::Equations => {
            let neg = g.scale(fake_logits, -1.0);
            let sp = g.softplus(neg);
            g.mean_all(sp)
        }
        AdvLossForm::Algorithm1 => {
            let sp = g.softplus(fake_logits);
            let m = g.mean_all(sp);
            g.scale(m, -1.0)
        }
    }
}

/// Squared L2 norm of the reconstruction error per sample, averaged over the
/// batch. The per-sample sum runs over all 12 x 4096 elements, which keeps
/// reconstruction dominant over the batch-mean adversarial and similarity
/// terms the way the unweighted total expects.
pub fn rec_loss<T: Real>(g: &mut Graph<T>, recon: Var, x: Var) -> Var {
    let n = g.val(recon).shape()[0];
    let d = g.sub(recon, x);
    let sq = g.mul(d, d);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / n as f64)
}

fn record_as_input<T: Real>(g: &mut Graph<T>, rec: &EcgRecord) -> crate::Result<Var> {
    if rec.samples_per_lead != TARGET_LEN {
        return Err(Error::validation(format!(
            "record {} has {} samples per lead; expected preprocessed length {}",
            rec.id, rec.samples_per_lead, TARGET_LEN
        )));
    }
    let t = Tensor::from_vec(&[1, IN_LEADS, TARGET_LEN], rec.samples.clone()).cast::<T>();
    Ok(g.constant(t))
}

/// Runs the frozen pipeline once: personal features from `pre`, disease
/// features from `reference`, decoded to 12 x 4096 samples.
fn edited_samples(
    store: &ParamStore<F>,
    cfg: &Config,
    backend: &dyn TextBackend,
    pre: &EcgRecord,
    reference: &EcgRecord,
) -> crate::Result<Vec<F>> {
    let mut g: Graph<F> = Graph::new();
    let p = bind_params(&mut g, store, &crate::model::trainable_none);
    let field = g.constant(noise_field(cfg));
    let x_pre = record_as_input(&mut g, pre)?;
    let x_ref = record_as_input(&mut g, reference)?;
    let raw_pre = embed_reports(backend, &[pre.report.as_str()])?;
    let raw_ref = embed_reports(backend, &[reference.report.as_str()])?;
    let raw_pre = g.constant(Tensor::from_vec(&[1, cfg.dims.raw_dim], raw_pre));
    let raw_ref = g.constant(Tensor::from_vec(&[1, cfg.dims.raw_dim], raw_ref));
    let sep_pre = separate(&mut g, &p, x_pre, raw_pre, &cfg.dims, cfg.l, cfg.use_vq, false);
    let sep_ref = separate(&mut g, &p, x_ref, raw_ref, &cfg.dims, cfg.l, cfg.use_vq, false);
    let out = generate(&mut g, &p, sep_pre.f_p, sep_ref.f_d, field, &cfg.dims);
    Ok(g.val(out).data().to_vec())
}

/// Decodes a record from its own separated features: the reconstruction the
/// training objective drives toward the original.
pub fn reconstruct_record(
    store: &ParamStore<F>,
    cfg: &Config,
    backend: &dyn TextBackend,
    pre: &EcgRecord,
) -> crate::Result<EcgRecord> {
    let samples = edited_samples(store, cfg, backend, pre, pre)?;
    Ok(EcgRecord {
        id: format!("{}_rec", pre.id),
        sampling_rate: pre.sampling_rate,
        label: pre.label,
        report: pre.report.clone(),
        segments: Vec::new(),
        samples,
        samples_per_lead: TARGET_LEN,
    })
}

/// Digital twin: the pre-diagnosis patient's personal features fused with a
/// diseased reference's disease features. The twin carries the reference's
/// label and report on the pre patient's physiology.
pub fn synthesize_twin(
    store: &ParamStore<F>,
    cfg: &Config,
    backend: &dyn TextBackend,
    pre: &EcgRecord,
    reference: &EcgRecord,
) -> crate::Result<EcgRecord> {
    if reference.label == Label::Norm {
        return Err(Error::validation(format!(
            "reference record {} is NORM; twins need a diseased reference",
            reference.id
        )));
    }
    let samples = edited_samples(store, cfg, backend, pre, reference)?;
    Ok(EcgRecord {
        id: format!("{}_twin_{}", pre.id, reference.id),
        sampling_rate: pre.sampling_rate,
        label: reference.label,
        report: reference.report.clone(),
        segments: Vec::new(),
        samples,
        samples_per_lead: TARGET_LEN,
    })
}
