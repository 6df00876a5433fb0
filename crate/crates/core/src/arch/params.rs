use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{DecoderReduce, InitialNorm, StoicConfig, TimeConcat, TIME_FEATURES};
use crate::error::{Result, StoicError};
use crate::numerics::{Element, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors keyed by slash-separated layer paths, iterated lexicographically.
#[derive(Clone, Debug)]
pub struct ParamStore<E: Element = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<E>) -> Option<Tensor<E>> {
        self.tensors.insert(path.into(), tensor)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<E>> {
        self.tensors
            .get(path)
            .ok_or_else(|| StoicError::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Fresh gradient-tracking leaves over the same values.
    pub fn trainable(&self) -> Self {
        self.map(|t| t.with_requires_grad(true))
    }

    /// Constant copies; forward passes over these record no graph.
    pub fn detached(&self) -> Self {
        self.map(Tensor::detach)
    }

    pub fn zero_grads(&self) {
        self.tensors.values().for_each(Tensor::zero_grad);
    }

    pub fn map(&self, f: impl Fn(&Tensor<E>) -> Tensor<E>) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), f(v)))
                .collect(),
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let data = v.data().iter().map(|x| F::from_f64(x.as_f64())).collect();
                    (
                        k.clone(),
                        Tensor::from_vec(data, v.shape()).expect("same shape"),
                    )
                })
                .collect(),
        }
    }

    /// Bit-level equality of paths, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore<E>) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((pa, a), (pb, b))| {
                pa == pb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    /// Checks that every expected path exists with the expected shape.
    pub fn check_against(&self, config: &StoicConfig) -> Result<()> {
        let specs = param_specs(config);
        for spec in &specs {
            let t = self.get(&spec.path)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(StoicError::shape(
                    "params",
                    format!(
                        "`{}` has shape {:?}, config expects {:?}",
                        spec.path,
                        t.shape(),
                        spec.shape
                    ),
                ));
            }
        }
        if specs.len() != self.len() {
            return Err(StoicError::shape(
                "params",
                format!(
                    "store has {} tensors, config expects {}",
                    self.len(),
                    specs.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub fn block_prefix(i: usize) -> String {
    format!("block{i}")
}

/// Every parameter of the network, in construction order.
pub fn param_specs(config: &StoicConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push =
        |path: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { path, shape, init });
    let l = config.embed_dim;
    let c = config.image.channels;
    let t = config.tokens();
    let (k, _, _) = config.stride.geometry();
    let hidden = config.mlp_hidden();

    push(
        "init_conv/weight".into(),
        vec![l, config.init_conv_in_channels(), k, k],
        Init::TruncNormal,
    );
    push("init_conv/bias".into(), vec![l], Init::Zeros);
    if config.initial_norm == InitialNorm::BatchNorm {
        push("init_norm/gamma".into(), vec![l], Init::Ones);
        push("init_norm/beta".into(), vec![l], Init::Zeros);
    }

    let plane = config.time_plane_len();
    push(
        "time_embed/weight".into(),
        vec![TIME_FEATURES, plane],
        Init::TruncNormal,
    );
    push("time_embed/bias".into(), vec![plane], Init::Zeros);
    if config.time_concat == TimeConcat::AfterConv {
        push("time_proj/weight".into(), vec![l + 1, l], Init::TruncNormal);
        push("time_proj/bias".into(), vec![l], Init::Zeros);
    }

    if let Some(ctx) = config.context {
        push(
            "context_embed/weight".into(),
            vec![ctx.token_dim, t],
            Init::TruncNormal,
        );
        push("context_embed/bias".into(), vec![t], Init::Zeros);
        push(
            "context_proj/weight".into(),
            vec![l + ctx.tokens, l],
            Init::TruncNormal,
        );
        push("context_proj/bias".into(), vec![l], Init::Zeros);
    }

    for i in 0..config.num_blocks {
        let p = block_prefix(i);
        push(format!("{p}/ln1/gamma"), vec![l], Init::Ones);
        push(format!("{p}/ln1/beta"), vec![l], Init::Zeros);
        push(format!("{p}/attn/qkv_w"), vec![l, 3 * l], Init::TruncNormal);
        push(format!("{p}/attn/qkv_b"), vec![3 * l], Init::Zeros);
        push(format!("{p}/attn/out_w"), vec![l, l], Init::TruncNormal);
        push(format!("{p}/attn/out_b"), vec![l], Init::Zeros);
        push(format!("{p}/ln2/gamma"), vec![l], Init::Ones);
        push(format!("{p}/ln2/beta"), vec![l], Init::Zeros);
        push(format!("{p}/mlp/fc1_w"), vec![l, hidden], Init::TruncNormal);
        push(format!("{p}/mlp/fc1_b"), vec![hidden], Init::Zeros);
        push(format!("{p}/mlp/fc2_w"), vec![hidden, l], Init::TruncNormal);
        push(format!("{p}/mlp/fc2_b"), vec![l], Init::Zeros);
    }

    push("decoder/ln/gamma".into(), vec![l], Init::Ones);
    push("decoder/ln/beta".into(), vec![l], Init::Zeros);
    if config.decoder_reduce == DecoderReduce::Linear {
        push(
            "decoder/reduce/weight".into(),
            vec![l, c],
            Init::TruncNormal,
        );
        push("decoder/reduce/bias".into(), vec![c], Init::Zeros);
    }
    let (dk, _, _) = config.decoder_geometry();
    // Same [C, C, K, K] layout for conv and transposed conv since C_in = C_out.
    push(
        "decoder/conv/weight".into(),
        vec![c, c, dk, dk],
        Init::Zeros,
    );
    push("decoder/conv/bias".into(), vec![c], Init::Zeros);
    specs
}

/// Normal sample rejected outside ±2σ.
pub(crate) fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization: truncated-normal (σ = 0.02, ±2σ) weights, zero biases,
/// unit norm gains, zero final decoder conv.
pub fn build_params<E: Element>(config: &StoicConfig, seed: u64) -> Result<ParamStore<E>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<E> = match spec.init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::TruncNormal => (0..n)
                .map(|_| E::from_f64(truncated_normal(&mut rng, INIT_STD)))
                .collect(),
        };
        store.insert(spec.path, Tensor::from_vec(data, &spec.shape)?);
    }
    Ok(store)
}

/// Replaces every tensor with N(0, std²) draws. Used to get non-degenerate gradients
/// everywhere (the standard init zeroes the decoder conv).
pub fn randomize_params<E: Element>(store: &ParamStore<E>, seed: u64, std: f64) -> ParamStore<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    for (path, t) in store.iter() {
        let data = (0..t.numel())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                E::from_f64(z * std)
            })
            .collect();
        out.insert(path, Tensor::from_vec(data, t.shape()).expect("same shape"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ImageDims, StrideVariant};

    fn cfg() -> StoicConfig {
        StoicConfig::new(StrideVariant::S1, ImageDims::new(3, 8, 8), 64, 4)
    }

    #[test]
    fn same_seed_same_store() {
        let a = build_params::<f32>(&cfg(), 7).unwrap();
        let b = build_params::<f32>(&cfg(), 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = build_params::<f32>(&cfg(), 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn final_decoder_conv_starts_at_zero_and_weights_are_truncated() {
        let p = build_params::<f64>(&cfg(), 1).unwrap();
        assert!(p
            .get("decoder/conv/weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let w = p.get("block0/attn/qkv_w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        assert!(w.data().iter().any(|&v| v != 0.0));
        assert!(p
            .get("block2/ln1/gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn blocks_share_shapes_and_paths_are_sorted() {
        let p = build_params::<f32>(&cfg(), 0).unwrap();
        let suffixes: Vec<(String, Vec<usize>)> = p
            .iter()
            .filter(|(k, _)| k.starts_with("block0/"))
            .map(|(k, t)| {
                (
                    k.trim_start_matches("block0").to_string(),
                    t.shape().to_vec(),
                )
            })
            .collect();
        for i in 1..4 {
            for (suffix, shape) in &suffixes {
                assert_eq!(
                    p.get(&format!("block{i}{suffix}")).unwrap().shape(),
                    shape.as_slice()
                );
            }
        }
        let paths: Vec<&str> = p.paths().collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
        assert!(p.check_against(&cfg()).is_ok());
    }
}
