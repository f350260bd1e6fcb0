//! Critic over 12-lead signals: ten conv-conv-blur downsampling blocks, a
//! minibatch standard-deviation channel, then two heads sharing the trunk:
//! a real/fake logit and a disease-feature estimate matching the separator's
//! flattened feature width.

use ecgtwin_nn::{Graph, Real, Var};

use crate::config::Dims;
use crate::model::{BoundParams, DISC_BLOCKS, DISC_CHANNELS};

/// Both head outputs for one batch.
pub struct DiscOut {
    /// Real/fake logits, [N, 1].
    pub logits: Var,
    /// Estimated disease features, [N, C * L_e].
    pub disease: Var,
}

fn head<T: Real>(g: &mut Graph<T>, p: &BoundParams, shared: Var, name: &str, n: usize) -> Var {
    let c = g.conv1d(
        shared,
        p.v(&format!("discriminator.{name}.conv.w")),
        p.v(&format!("discriminator.{name}.conv.b")),
        1,
        1,
    );
    let a = g.relu(c);
    let trunk_c = *DISC_CHANNELS.last().unwrap();
    let flat = g.reshape(a, &[n, trunk_c * 4]);
    let f1 = g.linear(
        flat,
        p.v(&format!("discriminator.{name}.fc1.w")),
        p.v(&format!("discriminator.{name}.fc1.b")),
    );
    let a1 = g.relu(f1);
    g.linear(
        a1,
        p.v(&format!("discriminator.{name}.fc2.w")),
        p.v(&format!("discriminator.{name}.fc2.b")),
    )
}

/// Runs the critic on signals [N, 12, 4096].
pub fn discriminate<T: Real>(g: &mut Graph<T>, p: &BoundParams, x: Var, dims: &Dims) -> DiscOut {
    let n = g.val(x).shape()[0];
    let mut h = x;
    for b in 0..DISC_BLOCKS {
        let c1 = g.conv1d(
            h,
            p.v(&format!("discriminator.block{b:02}.conv1.w")),
            p.v(&format!("discriminator.block{b:02}.conv1.b")),
            1,
            1,
        );
        let a1 = g.relu(c1);
        let c2 = g.conv1d(
            a1,
            p.v(&format!("discriminator.block{b:02}.conv2.w")),
            p.v(&format!("discriminator.block{b:02}.conv2.b")),
            1,
            1,
        );
        let a2 = g.relu(c2);
        h = g.avgpool2(a2);
    }
    let shared = g.minibatch_stddev(h);
    let logits = head(g, p, shared, "outhead", n);
    let disease = head(g, p, shared, "dhead", n);
    debug_assert_eq!(g.val(disease).shape(), &[n, dims.c * dims.l_e]);
    DiscOut { logits, disease }
}

/// Critic-side adversarial loss: push real logits up and fake logits down.
pub fn adv_d_loss<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    let neg_real = g.scale(real_logits, -1.0);
    let sp_real = g.softplus(neg_real);
    let term_real = g.mean_all(sp_real);
    let sp_fake = g.softplus(fake_logits);
    let term_fake = g.mean_all(sp_fake);
    g.add(term_real, term_fake)
}
