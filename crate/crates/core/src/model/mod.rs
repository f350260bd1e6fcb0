//! Model architecture: parameter schedules, initialization, and graph
//! binding shared by the separator, generator, and discriminator.
//!
//! All parameters live in one flat `ParamStore` keyed by dotted names
//! ("separator.encoder.stem.w", "generator.mapper.l3.b", ...). Forward
//! builders take a `BoundParams` view that maps those names to graph leaves,
//! so the same code serves training (trainable leaves), evaluation (frozen
//! leaves), and f64 gradient checks.

pub mod discriminator;
pub mod generator;
pub mod separator;

use std::collections::BTreeMap;

use ecgtwin_nn::seed::Stream;
use ecgtwin_nn::{Graph, ParamStore, Real, Tensor, Var};

use crate::config::{Config, Dims, ATTN_HEADS};
use crate::F;

/// ECG input channels (the 12 leads).
pub const IN_LEADS: usize = 12;
/// Decoder blocks; each doubles the temporal length.
pub const DECODER_BLOCKS: usize = 9;
/// Discriminator blocks; each halves the temporal length.
pub const DISC_BLOCKS: usize = 10;
/// AdaIN sites: decoder stem plus two per block.
pub const ADAIN_SITES: usize = 1 + 2 * DECODER_BLOCKS;
/// Mapper depth.
pub const MAPPER_LAYERS: usize = 8;
/// Scale guard added to softplus style scales.
pub const STYLE_SIGMA_EPS: f64 = 1e-4;
/// Instance-normalization epsilon.
pub const NORM_EPS: f64 = 1e-6;
/// Raw style bias so softplus(bias) = 1: styles start as identity scaling.
pub const SIGMA_BIAS: f64 = 0.541_324_854_612_918_1;

/// Encoder stage output channels: eight downsampling stages from the stem's
/// 12 channels up to C.
pub fn encoder_channels(c: usize) -> [usize; 8] {
    let f = |num: usize, den: usize| (c * num / den).max(4);
    [f(1, 4), f(1, 4), f(3, 8), f(3, 8), f(1, 2), f(1, 2), f(3, 4), c]
}

/// Decoder channels: input C, then the nine block outputs.
pub fn decoder_channels(c: usize) -> [usize; DECODER_BLOCKS + 1] {
    let f = |num: usize, den: usize| (c * num / den).max(2);
    [c, f(3, 4), f(1, 2), f(3, 8), f(1, 4), 12, 10, 8, 8, 8]
}

/// Discriminator trunk channels (input leads first).
pub const DISC_CHANNELS: [usize; DISC_BLOCKS + 1] = [12, 8, 8, 16, 16, 32, 32, 64, 64, 64, 64];

/// Channel width entering each AdaIN site (stem, then two per block).
pub fn adain_site_channels(c: usize) -> Vec<usize> {
    let dec = decoder_channels(c);
    let mut sites = Vec::with_capacity(ADAIN_SITES);
    sites.push(c);
    for b in 0..DECODER_BLOCKS {
        sites.push(dec[b + 1]);
        sites.push(dec[b + 1]);
    }
    sites
}

#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    /// Gaussian scaled for ReLU fan-in.
    HeNormal { fan_in: usize },
    /// Gaussian scaled to preserve variance through a linear map.
    XavierNormal { fan_in: usize },
    Zeros,
    /// Style affine head: near-zero weights, bias = (0 for means,
    /// SIGMA_BIAS for raw scales) so AdaIN starts close to identity.
    AffineHead { ch: usize },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

/// The complete parameter schedule for a given dimension config. Single
/// source of truth for initialization, checkpoint layout, and binding.
pub fn param_specs(d: &Dims) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
        specs.push(ParamSpec { name, shape, init });
    };

    // Separator: encoder stem + 8 residual downsampling stages.
    push(
        "separator.encoder.stem.w".into(),
        vec![IN_LEADS, IN_LEADS, 3],
        InitKind::HeNormal { fan_in: IN_LEADS * 3 },
    );
    push("separator.encoder.stem.b".into(), vec![IN_LEADS], InitKind::Zeros);
    let enc = encoder_channels(d.c);
    let mut cin = IN_LEADS;
    for (i, &cout) in enc.iter().enumerate() {
        push(
            format!("separator.encoder.stage{i}.conv1.w"),
            vec![cout, cin, 3],
            InitKind::HeNormal { fan_in: cin * 3 },
        );
        push(format!("separator.encoder.stage{i}.conv1.b"), vec![cout], InitKind::Zeros);
        push(
            format!("separator.encoder.stage{i}.conv2.w"),
            vec![cout, cout, 3],
            InitKind::HeNormal { fan_in: cout * 3 },
        );
        push(format!("separator.encoder.stage{i}.conv2.b"), vec![cout], InitKind::Zeros);
        push(
            format!("separator.encoder.stage{i}.skip.w"),
            vec![cout, cin, 1],
            InitKind::XavierNormal { fan_in: cin },
        );
        push(format!("separator.encoder.stage{i}.skip.b"), vec![cout], InitKind::Zeros);
        cin = cout;
    }

    // Separator: multi-head cross-attention over text tokens.
    let token_dim = d.l_t / d.t;
    let d_h = d.l_e;
    let d_v = d.l_e / ATTN_HEADS;
    for h in 0..ATTN_HEADS {
        push(
            format!("separator.attn.head{h}.q.w"),
            vec![d_h, d.l_e],
            InitKind::XavierNormal { fan_in: d.l_e },
        );
        push(format!("separator.attn.head{h}.q.b"), vec![d_h], InitKind::Zeros);
        push(
            format!("separator.attn.head{h}.k.w"),
            vec![d_h, token_dim],
            InitKind::XavierNormal { fan_in: token_dim },
        );
        push(format!("separator.attn.head{h}.k.b"), vec![d_h], InitKind::Zeros);
        push(
            format!("separator.attn.head{h}.v.w"),
            vec![d_v, token_dim],
            InitKind::XavierNormal { fan_in: token_dim },
        );
        push(format!("separator.attn.head{h}.v.b"), vec![d_v], InitKind::Zeros);
    }
    push(
        "separator.attn.out.w".into(),
        vec![d.l_e, d.l_e],
        InitKind::XavierNormal { fan_in: d.l_e },
    );
    push("separator.attn.out.b".into(), vec![d.l_e], InitKind::Zeros);

    // Separator: the disease embedding codebook.
    push(
        "separator.codebook".into(),
        vec![d.k, d.l_e],
        InitKind::Uniform { lo: -1.0 / d.k as f64, hi: 1.0 / d.k as f64 },
    );

    // Text compression: raw backend embedding -> L_t.
    push(
        "text.compress.w".into(),
        vec![d.l_t, d.raw_dim],
        InitKind::XavierNormal { fan_in: d.raw_dim },
    );
    push("text.compress.b".into(), vec![d.l_t], InitKind::Zeros);

    // Generator: mapper (flattened f_d -> style vector).
    let mut din = d.c * d.l_e;
    for i in 0..MAPPER_LAYERS {
        push(
            format!("generator.mapper.l{i}.w"),
            vec![d.w_style, din],
            InitKind::HeNormal { fan_in: din },
        );
        push(format!("generator.mapper.l{i}.b"), vec![d.w_style], InitKind::Zeros);
        din = d.w_style;
    }

    // Generator: learnable per-channel noise scale, zero at start.
    push("generator.noise_scale".into(), vec![d.c], InitKind::Zeros);

    // Generator: one affine head per AdaIN site.
    for (site, &ch) in adain_site_channels(d.c).iter().enumerate() {
        push(
            format!("generator.affine{site:02}.w"),
            vec![2 * ch, d.w_style],
            InitKind::AffineHead { ch },
        );
        push(format!("generator.affine{site:02}.b"), vec![2 * ch], InitKind::AffineHead { ch });
    }

    // Generator: decoder convolutions and the final 1x1 projection.
    let dec = decoder_channels(d.c);
    for b in 0..DECODER_BLOCKS {
        let (ci, co) = (dec[b], dec[b + 1]);
        push(
            format!("generator.dec{b}.conv1.w"),
            vec![co, ci, 3],
            InitKind::HeNormal { fan_in: ci * 3 },
        );
        push(format!("generator.dec{b}.conv1.b"), vec![co], InitKind::Zeros);
        push(
            format!("generator.dec{b}.conv2.w"),
            vec![co, co, 3],
            InitKind::HeNormal { fan_in: co * 3 },
        );
        push(format!("generator.dec{b}.conv2.b"), vec![co], InitKind::Zeros);
    }
    push(
        "generator.final.w".into(),
        vec![IN_LEADS, dec[DECODER_BLOCKS], 1],
        InitKind::XavierNormal { fan_in: dec[DECODER_BLOCKS] },
    );
    push("generator.final.b".into(), vec![IN_LEADS], InitKind::Zeros);

    // Discriminator trunk.
    for b in 0..DISC_BLOCKS {
        let (ci, co) = (DISC_CHANNELS[b], DISC_CHANNELS[b + 1]);
        push(
            format!("discriminator.block{b:02}.conv1.w"),
            vec![co, ci, 3],
            InitKind::HeNormal { fan_in: ci * 3 },
        );
        push(format!("discriminator.block{b:02}.conv1.b"), vec![co], InitKind::Zeros);
        push(
            format!("discriminator.block{b:02}.conv2.w"),
            vec![co, co, 3],
            InitKind::HeNormal { fan_in: co * 3 },
        );
        push(format!("discriminator.block{b:02}.conv2.b"), vec![co], InitKind::Zeros);
    }

    // Discriminator heads: minibatch-stddev input, conv, two linears.
    let trunk_c = DISC_CHANNELS[DISC_BLOCKS];
    let trunk_l = crate::data::preprocess::TARGET_LEN >> DISC_BLOCKS;
    for (head, out_w) in [("outhead", 1usize), ("dhead", d.c * d.l_e)] {
        push(
            format!("discriminator.{head}.conv.w"),
            vec![trunk_c, trunk_c + 1, 3],
            InitKind::HeNormal { fan_in: (trunk_c + 1) * 3 },
        );
        push(format!("discriminator.{head}.conv.b"), vec![trunk_c], InitKind::Zeros);
        push(
            format!("discriminator.{head}.fc1.w"),
            vec![64, trunk_c * trunk_l],
            InitKind::HeNormal { fan_in: trunk_c * trunk_l },
        );
        push(format!("discriminator.{head}.fc1.b"), vec![64], InitKind::Zeros);
        push(
            format!("discriminator.{head}.fc2.w"),
            vec![out_w, 64],
            InitKind::XavierNormal { fan_in: 64 },
        );
        push(format!("discriminator.{head}.fc2.b"), vec![out_w], InitKind::Zeros);
    }

    specs
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor<F> {
    let numel: usize = spec.shape.iter().product();
    let mut s = Stream::named(seed, &spec.name);
    let data: Vec<F> = match spec.init {
        InitKind::Zeros => vec![0.0; numel],
        InitKind::HeNormal { fan_in } => {
            let scale = (2.0 / fan_in as f64).sqrt();
            (0..numel).map(|_| (s.normal() * scale) as F).collect()
        }
        InitKind::XavierNormal { fan_in } => {
            let scale = (1.0 / fan_in as f64).sqrt();
            (0..numel).map(|_| (s.normal() * scale) as F).collect()
        }
        InitKind::Uniform { lo, hi } => (0..numel).map(|_| s.uniform_in(lo, hi) as F).collect(),
        InitKind::AffineHead { ch } => {
            if spec.shape.len() == 2 {
                // Weights: tiny so styles start near their biases.
                let scale = 0.01 * (1.0 / spec.shape[1] as f64).sqrt();
                (0..numel).map(|_| (s.normal() * scale) as F).collect()
            } else {
                // Bias: zero means, raw sigma solving softplus(x) = 1.
                let mut b = vec![0.0 as F; numel];
                for v in b.iter_mut().skip(ch) {
                    *v = SIGMA_BIAS as F;
                }
                b
            }
        }
    };
    Tensor::from_vec(&spec.shape, data)
}

/// Fresh parameter store; every tensor's stream is keyed by (seed, name),
/// so values are independent of insertion order.
pub fn init_params(cfg: &Config) -> ParamStore<F> {
    let mut store = ParamStore::new();
    for spec in param_specs(&cfg.dims) {
        store.insert(&spec.name, init_tensor(&spec, cfg.seed));
    }
    store
}

/// The fixed standard-normal noise field added to personal-normal features,
/// shaped [1, C, L_e]. Not a parameter: regenerated from the seed.
pub fn noise_field(cfg: &Config) -> Tensor<F> {
    let d = &cfg.dims;
    let mut s = Stream::named(cfg.seed, "generator.noise_field");
    let data: Vec<F> = (0..d.c * d.l_e).map(|_| s.normal() as F).collect();
    Tensor::from_vec(&[1, d.c, d.l_e], data)
}

/// Graph leaves for every parameter, in name order.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn v(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }
}

/// Casts every parameter value into a fresh store (moments reset); used to
/// run the same forward builders at a different precision.
pub fn cast_store<S: Real, T: Real>(store: &ParamStore<S>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, slot) in store.iter() {
        out.insert(name, slot.value.cast());
    }
    out
}

/// Binds the store into a graph. `trainable` decides per name whether the
/// leaf carries gradients; frozen subgraphs skip backward work entirely.
pub fn bind_params<S: Real, T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<S>,
    trainable: &dyn Fn(&str) -> bool,
) -> BoundParams {
    let mut vars = BTreeMap::new();
    for (name, slot) in store.iter() {
        let t: Tensor<T> = slot.value.cast();
        let var = g.leaf(t, trainable(name));
        vars.insert(name.to_string(), var);
    }
    BoundParams { vars }
}

/// Collects gradients for every trainable leaf after backward, keyed by
/// parameter name, ready for the optimizer.
pub fn collect_grads<T: Real>(g: &mut Graph<T>, bound: &BoundParams) -> BTreeMap<String, Vec<T>> {
    let mut out = BTreeMap::new();
    for name in bound.vars.keys() {
        if let Some(grad) = g.take_grad(bound.vars[name]) {
            out.insert(name.clone(), grad);
        }
    }
    out
}

pub fn trainable_all(_: &str) -> bool {
    true
}

pub fn trainable_none(_: &str) -> bool {
    false
}

/// Generator-step parameters: everything the generator loss trains.
pub fn trainable_gen(name: &str) -> bool {
    name.starts_with("separator.") || name.starts_with("generator.") || name.starts_with("text.")
}

/// Discriminator-step parameters.
pub fn trainable_disc(name: &str) -> bool {
    name.starts_with("discriminator.")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_dims() -> Dims {
        Config::default().dims
    }

    #[test]
    fn schedules_line_up() {
        let d = desk_dims();
        assert_eq!(encoder_channels(d.c), [16, 16, 24, 24, 32, 32, 48, 64]);
        assert_eq!(decoder_channels(d.c), [64, 48, 32, 24, 16, 12, 10, 8, 8, 8]);
        assert_eq!(adain_site_channels(d.c).len(), ADAIN_SITES);
        // Nine doublings from L_e reach the record length.
        assert_eq!(d.l_e << DECODER_BLOCKS, 4096);
        // Ten halvings from the record length reach the trunk tail.
        assert_eq!(4096 >> DISC_BLOCKS, 4);
    }

    #[test]
    fn specs_unique_and_initialized() {
        let cfg = Config::default();
        let specs = param_specs(&cfg.dims);
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let count = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), count, "duplicate parameter names");

        let store = init_params(&cfg);
        let total: usize = store.iter().map(|(_, s)| s.value.numel()).sum();
        // Roughly a million parameters at desk scale; exact value is free to
        // drift with schedule tweaks but the order of magnitude must not.
        assert!(total > 500_000 && total < 3_000_000, "total params {total}");

        // Initialization is a pure function of (seed, name).
        let again = init_params(&cfg);
        for name in store.names() {
            assert_eq!(store.slot(&name).value.data(), again.slot(&name).value.data());
        }
    }

    #[test]
    fn affine_bias_starts_at_identity_scale() {
        let cfg = Config::default();
        let store = init_params(&cfg);
        let b = store.slot("generator.affine00.b");
        let ch = cfg.dims.c;
        assert_eq!(b.value.shape(), &[2 * ch]);
        for i in 0..ch {
            assert_eq!(b.value.data()[i], 0.0);
            let raw = b.value.data()[ch + i] as f64;
            let softplus = (raw.exp() + 1.0).ln();
            assert!((softplus - 1.0).abs() < 1e-6);
        }
        let eta = store.slot("generator.noise_scale");
        assert!(eta.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binding_respects_trainability() {
        let cfg = Config::default();
        let store = init_params(&cfg);
        let mut g: Graph<f32> = Graph::new();
        let bound = bind_params(&mut g, &store, &trainable_disc);
        let cb = bound.v("separator.codebook");
        let w = bound.v("discriminator.block00.conv1.w");
        // Frozen leaves never accumulate gradients; trainable ones do.
        let s1 = g.sum_all(cb);
        let s2 = g.sum_all(w);
        let loss = g.add(s1, s2);
        let loss = g.mean_all(loss);
        g.backward(loss);
        assert!(g.grad(cb).is_none());
        assert!(g.grad(w).is_some());
    }
}
