//! Line-oriented run configuration: `[section]` headers, `key = value` lines, `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{
    DecoderConv, DecoderReduce, ImageDims, InitialNonlinearity, InitialNorm, StoicConfig,
    StrideVariant, TimeConcat, CONTEXT_TOKENS,
};
use crate::data::{
    gen_toy_dataset_with, load_cifar10_batch, toy_context, Dataset, ToyKind, ToyOptions,
};
use crate::diffusion::{
    make_schedule, NoiseSchedule, SampleOptions, Sampler, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_STEPS,
};
use crate::error::{Result, StoicError};
use crate::numerics::Tensor;
use crate::training::TrainHyper;

pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(
    section: &'static str,
    key: &'static str,
    default: &'static str,
    help: &'static str,
) -> KeySpec {
    KeySpec {
        section,
        key,
        default,
        help,
    }
}

/// Every accepted key with its default.
pub const KEYS: &[KeySpec] = &[
    key(
        "model",
        "stride",
        "S2",
        "initial conv variant: S1 (K=3,S=1,P=1) or S2 (K=2,S=2,P=0)",
    ),
    key("model", "channels", "1", "image channels C"),
    key("model", "height", "8", "image height H"),
    key("model", "width", "8", "image width W"),
    key("model", "embed_dim", "64", "embedding dimension L"),
    key("model", "num_blocks", "4", "number of core blocks N"),
    key(
        "model",
        "heads",
        "auto",
        "attention heads; auto = max(1, L/64)",
    ),
    key("model", "mlp_ratio", "4", "MLP expansion ratio r"),
    key(
        "model",
        "time_concat",
        "after_conv",
        "before_conv or after_conv",
    ),
    key(
        "model",
        "context_dim",
        "0",
        "context token width; 0 = unconditional",
    ),
    key("model", "decoder_reduce", "slice", "slice or linear"),
    key(
        "model",
        "decoder_conv",
        "auto",
        "conv, conv_transpose, or auto (conv for S1, conv_transpose for S2)",
    ),
    key("model", "initial_nonlinearity", "gelu", "gelu or none"),
    key("model", "initial_norm", "none", "none or batch_norm"),
    key(
        "diffusion",
        "steps",
        "1000",
        "number of discrete timesteps T",
    ),
    key(
        "diffusion",
        "beta_start",
        "auto",
        "first beta; auto = 1e-4 * 1000/T",
    ),
    key(
        "diffusion",
        "beta_end",
        "auto",
        "last beta; auto = 0.02 * 1000/T",
    ),
    key(
        "diffusion",
        "sde_beta_min",
        "0.1",
        "continuous beta(0) for the SDE sampler",
    ),
    key(
        "diffusion",
        "sde_beta_max",
        "20",
        "continuous beta(1) for the SDE sampler",
    ),
    key("train", "lr", "1e-4", "AdamW learning rate"),
    key("train", "beta1", "0.9", "AdamW first-moment decay"),
    key("train", "beta2", "0.999", "AdamW second-moment decay"),
    key("train", "eps", "1e-8", "AdamW epsilon"),
    key("train", "weight_decay", "0.01", "decoupled weight decay"),
    key("train", "batch_size", "64", "images per step"),
    key("train", "steps", "1000", "optimizer steps"),
    key(
        "train",
        "cond_dropout",
        "0.1",
        "probability of replacing a context with the null context",
    ),
    key(
        "train",
        "seed",
        "0",
        "seed for initialization and per-step sampling",
    ),
    key(
        "train",
        "guidance_training",
        "false",
        "train with condition dropout (needs dataset contexts)",
    ),
    key(
        "train",
        "checkpoint_every",
        "0",
        "checkpoint interval in steps; 0 = final only",
    ),
    key("sample", "sampler", "ancestral", "ancestral or em"),
    key("sample", "steps", "auto", "reverse steps; auto = T"),
    key(
        "sample",
        "guidance",
        "1.0",
        "classifier-free guidance scale",
    ),
    key("sample", "count", "16", "images to generate"),
    key("sample", "seed", "0", "sampling seed"),
    key("sample", "chunk", "64", "chains per network call"),
    key(
        "sample",
        "prompt",
        "none",
        "toy mode index used as the condition, or none for the null context",
    ),
    key(
        "data",
        "source",
        "two_blobs",
        "two_blobs, checker or cifar10",
    ),
    key(
        "data",
        "path",
        "",
        "CIFAR-10 binary batch file (source = cifar10)",
    ),
    key("data", "count", "1024", "synthetic images to generate"),
    key("data", "noise", "0.1", "synthetic pixel noise std"),
    key("data", "seed", "0", "synthetic dataset seed"),
];

pub const SECTIONS: &[&str] = &["model", "diffusion", "train", "sample", "data"];

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sde_beta_min: f64,
    pub sde_beta_max: f64,
}

impl DiffusionConfig {
    pub fn for_steps(steps: usize) -> Self {
        let k = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        DiffusionConfig {
            steps,
            beta_start: DEFAULT_BETA_START * k,
            beta_end: DEFAULT_BETA_END * k,
            sde_beta_min: crate::diffusion::DEFAULT_SDE_BETA_MIN,
            sde_beta_max: crate::diffusion::DEFAULT_SDE_BETA_MAX,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)?
            .with_sde(self.sde_beta_min, self.sde_beta_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub sampler: Sampler,
    pub steps: usize,
    pub guidance: f64,
    pub count: usize,
    pub seed: u64,
    pub chunk: usize,
    pub prompt: Option<u8>,
}

impl SampleConfig {
    pub fn options(&self) -> SampleOptions {
        SampleOptions {
            sampler: self.sampler,
            steps: self.steps,
            guidance: self.guidance,
            seed: self.seed,
            chunk: self.chunk,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy(ToyKind),
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub count: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: StoicConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainHyper,
    pub sample: SampleConfig,
    pub data: DataConfig,
}

struct Entry {
    value: String,
    line: usize,
}

struct Document {
    entries: BTreeMap<(String, String), Entry>,
}

impl Document {
    fn parse(text: &str) -> Result<Document> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let syntax = |detail: String| StoicError::ConfigSyntax { line, detail };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| syntax(format!("unterminated section header `{content}`")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(syntax(format!(
                        "unknown section [{name}] (expected one of {SECTIONS:?})"
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = value`, got `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| syntax(format!("key `{k}` appears before any [section]")))?;
            if !KEYS.iter().any(|s| s.section == sec && s.key == k) {
                return Err(syntax(format!("unknown key `{k}` in [{sec}]")));
            }
            let slot = (sec.to_string(), k.to_string());
            if entries.contains_key(&slot) {
                return Err(syntax(format!("duplicate key `{k}` in [{sec}]")));
            }
            entries.insert(
                slot,
                Entry {
                    value: v.to_string(),
                    line,
                },
            );
        }
        Ok(Document { entries })
    }

    fn raw(&self, section: &str, key: &str) -> (String, Option<usize>) {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            Some(e) => (e.value.clone(), Some(e.line)),
            None => {
                let spec = KEYS
                    .iter()
                    .find(|s| s.section == section && s.key == key)
                    .expect("key table covers every lookup");
                (spec.default.to_string(), None)
            }
        }
    }

    fn fail(section: &str, key: &str, line: Option<usize>, detail: String) -> StoicError {
        match line {
            Some(line) => StoicError::ConfigSyntax {
                line,
                detail: format!("[{section}] {key}: {detail}"),
            },
            None => StoicError::Config(format!("[{section}] {key}: {detail}")),
        }
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (value, line) = self.raw(section, key);
        value
            .parse::<T>()
            .map_err(|e| Self::fail(section, key, line, format!("invalid value `{value}`: {e}")))
    }

    /// `None` for the literal `auto`.
    fn get_auto<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let (value, _) = self.raw(section, key);
        if value == "auto" {
            Ok(None)
        } else {
            self.get(section, key).map(Some)
        }
    }

    fn check<T>(&self, section: &str, key: &str, value: T, ok: bool, need: &str) -> Result<T> {
        if ok {
            Ok(value)
        } else {
            let (raw, line) = self.raw(section, key);
            Err(Self::fail(
                section,
                key,
                line,
                format!("`{raw}` must be {need}"),
            ))
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let d = Document::parse(text)?;

        let stride: StrideVariant = d.get("model", "stride")?;
        let image = ImageDims::new(
            d.get("model", "channels")?,
            d.get("model", "height")?,
            d.get("model", "width")?,
        );
        let embed_dim: usize = d.get("model", "embed_dim")?;
        let mut model = StoicConfig::new(stride, image, embed_dim, d.get("model", "num_blocks")?);
        if let Some(h) = d.get_auto("model", "heads")? {
            model.heads = h;
        }
        model.mlp_ratio = d.get("model", "mlp_ratio")?;
        model.time_concat = d.get::<TimeConcat>("model", "time_concat")?;
        let context_dim: usize = d.get("model", "context_dim")?;
        if context_dim > 0 {
            model = model.with_context(context_dim);
        }
        model.decoder_reduce = d.get::<DecoderReduce>("model", "decoder_reduce")?;
        if let Some(dc) = d.get_auto::<DecoderConv>("model", "decoder_conv")? {
            model.decoder_conv = dc;
        }
        model.initial_nonlinearity =
            d.get::<InitialNonlinearity>("model", "initial_nonlinearity")?;
        model.initial_norm = d.get::<InitialNorm>("model", "initial_norm")?;
        model.validate()?;

        let steps: usize = d.get("diffusion", "steps")?;
        let steps = d.check("diffusion", "steps", steps, steps >= 1, "at least 1")?;
        let mut diffusion = DiffusionConfig::for_steps(steps);
        if let Some(b) = d.get_auto("diffusion", "beta_start")? {
            diffusion.beta_start = b;
        }
        if let Some(b) = d.get_auto("diffusion", "beta_end")? {
            diffusion.beta_end = b;
        }
        diffusion.sde_beta_min = d.get("diffusion", "sde_beta_min")?;
        diffusion.sde_beta_max = d.get("diffusion", "sde_beta_max")?;
        diffusion.schedule()?;

        let lr: f64 = d.get("train", "lr")?;
        let cond_dropout: f64 = d.get("train", "cond_dropout")?;
        let train = TrainHyper {
            lr: d.check(
                "train",
                "lr",
                lr,
                lr > 0.0 && lr.is_finite(),
                "a positive number",
            )?,
            betas: (d.get("train", "beta1")?, d.get("train", "beta2")?),
            eps: d.get("train", "eps")?,
            weight_decay: d.get("train", "weight_decay")?,
            batch_size: d.get("train", "batch_size")?,
            steps: d.get("train", "steps")?,
            cond_dropout: d.check(
                "train",
                "cond_dropout",
                cond_dropout,
                (0.0..=1.0).contains(&cond_dropout),
                "in [0, 1]",
            )?,
            seed: d.get("train", "seed")?,
            guidance_training: d.get("train", "guidance_training")?,
            checkpoint_every: d.get("train", "checkpoint_every")?,
        };
        train.validate()?;

        let prompt = match d.raw("sample", "prompt").0.as_str() {
            "none" => None,
            _ => Some(d.get::<u8>("sample", "prompt")?),
        };
        let sample = SampleConfig {
            sampler: d.get("sample", "sampler")?,
            steps: d.get_auto("sample", "steps")?.unwrap_or(diffusion.steps),
            guidance: d.get("sample", "guidance")?,
            count: d.get("sample", "count")?,
            seed: d.get("sample", "seed")?,
            chunk: d.get("sample", "chunk")?,
            prompt,
        };

        let source = match d.raw("data", "source").0.as_str() {
            "cifar10" => DataSource::Cifar10,
            _ => DataSource::Toy(d.get("data", "source")?),
        };
        let path = d.raw("data", "path").0;
        let data = DataConfig {
            source,
            path: if path.is_empty() {
                None
            } else {
                Some(PathBuf::from(path))
            },
            count: d.get("data", "count")?,
            noise: d.get("data", "noise")?,
            seed: d.get("data", "seed")?,
        };
        Ok(RunConfig {
            model,
            diffusion,
            train,
            sample,
            data,
        })
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| StoicError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.diffusion.schedule()
    }

    /// The `[data]` dataset. A conditional model gets mode (toy) or class (CIFAR-10)
    /// contexts built by [`toy_context`].
    pub fn load_dataset(&self) -> Result<Dataset> {
        let context_dim = self.model.context.map(|c| c.token_dim);
        match self.data.source {
            DataSource::Toy(kind) => {
                let opts = ToyOptions {
                    noise: self.data.noise,
                    context_dim,
                };
                gen_toy_dataset_with(
                    kind,
                    self.data.count,
                    self.model.image,
                    self.data.seed,
                    opts,
                )
            }
            DataSource::Cifar10 => {
                let path = self.data.path.as_deref().ok_or_else(|| {
                    StoicError::Config("data.source = cifar10 needs data.path".into())
                })?;
                let mut ds = load_cifar10_batch(path)?;
                if let (Some(td), Some(labels)) = (context_dim, ds.labels.as_ref()) {
                    let data = labels.iter().flat_map(|&l| toy_context(l, td)).collect();
                    let ctx = Tensor::from_vec(data, &[labels.len(), CONTEXT_TOKENS, td])?;
                    let labels = ds.labels.take();
                    ds = Dataset::new(ds.name, ds.images, Some(ctx))?;
                    ds.labels = labels;
                }
                Ok(ds)
            }
        }
    }

    /// Contexts for `count` samples: the prompt's context repeated, or `None` when the
    /// model is unconditional or no prompt is set.
    pub fn prompt_contexts(&self, count: usize) -> Result<Option<Tensor<f32>>> {
        match (self.model.context, self.sample.prompt) {
            (Some(cc), Some(mode)) => {
                let one = toy_context(mode, cc.token_dim);
                let data = (0..count).flat_map(|_| one.iter().copied()).collect();
                Ok(Some(Tensor::from_vec(
                    data,
                    &[count, CONTEXT_TOKENS, cc.token_dim],
                )?))
            }
            _ => Ok(None),
        }
    }

    /// Canonical text with every key spelled out; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let df = &self.diffusion;
        let t = &self.train;
        let s = &self.sample;
        let dc = &self.data;
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "stride = {}", m.stride);
        let _ = writeln!(out, "channels = {}", m.image.channels);
        let _ = writeln!(out, "height = {}", m.image.height);
        let _ = writeln!(out, "width = {}", m.image.width);
        let _ = writeln!(out, "embed_dim = {}", m.embed_dim);
        let _ = writeln!(out, "num_blocks = {}", m.num_blocks);
        let _ = writeln!(out, "heads = {}", m.heads);
        let _ = writeln!(out, "mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(out, "time_concat = {}", m.time_concat);
        let _ = writeln!(
            out,
            "context_dim = {}",
            m.context.map_or(0, |c| c.token_dim)
        );
        let _ = writeln!(out, "decoder_reduce = {}", m.decoder_reduce);
        let _ = writeln!(out, "decoder_conv = {}", m.decoder_conv);
        let _ = writeln!(out, "initial_nonlinearity = {}", m.initial_nonlinearity);
        let _ = writeln!(out, "initial_norm = {}", m.initial_norm);
        let _ = writeln!(out, "\n[diffusion]");
        let _ = writeln!(out, "steps = {}", df.steps);
        let _ = writeln!(out, "beta_start = {:?}", df.beta_start);
        let _ = writeln!(out, "beta_end = {:?}", df.beta_end);
        let _ = writeln!(out, "sde_beta_min = {:?}", df.sde_beta_min);
        let _ = writeln!(out, "sde_beta_max = {:?}", df.sde_beta_max);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "lr = {:?}", t.lr);
        let _ = writeln!(out, "beta1 = {:?}", t.betas.0);
        let _ = writeln!(out, "beta2 = {:?}", t.betas.1);
        let _ = writeln!(out, "eps = {:?}", t.eps);
        let _ = writeln!(out, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "steps = {}", t.steps);
        let _ = writeln!(out, "cond_dropout = {:?}", t.cond_dropout);
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "guidance_training = {}", t.guidance_training);
        let _ = writeln!(out, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(out, "\n[sample]");
        let _ = writeln!(out, "sampler = {}", s.sampler);
        let _ = writeln!(out, "steps = {}", s.steps);
        let _ = writeln!(out, "guidance = {:?}", s.guidance);
        let _ = writeln!(out, "count = {}", s.count);
        let _ = writeln!(out, "seed = {}", s.seed);
        let _ = writeln!(out, "chunk = {}", s.chunk);
        let _ = writeln!(
            out,
            "prompt = {}",
            s.prompt.map_or("none".to_string(), |p| p.to_string())
        );
        let _ = writeln!(out, "\n[data]");
        let source = match &dc.source {
            DataSource::Toy(k) => k.to_string(),
            DataSource::Cifar10 => "cifar10".to_string(),
        };
        let _ = writeln!(out, "source = {source}");
        let _ = writeln!(
            out,
            "path = {}",
            dc.path
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        );
        let _ = writeln!(out, "count = {}", dc.count);
        let _ = writeln!(out, "noise = {:?}", dc.noise);
        let _ = writeln!(out, "seed = {}", dc.seed);
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults are valid")
    }
}

/// Help text listing every section, key and default.
pub fn describe_keys() -> String {
    let mut out = String::new();
    for section in SECTIONS {
        let _ = writeln!(out, "[{section}]");
        for k in KEYS.iter().filter(|k| k.section == *section) {
            let default = if k.default.is_empty() {
                "(empty)"
            } else {
                k.default
            };
            let _ = writeln!(out, "  {:<22} default {:<12} {}", k.key, default, k.help);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let d = RunConfig::default();
        assert_eq!(d.diffusion.beta_start, 1e-4);
        assert_eq!(d.diffusion.beta_end, 0.02);
        assert_eq!(d.train.lr, 1e-4);
        assert_eq!(d.sample.steps, 1000);
        assert_eq!(d.model.decoder_conv, DecoderConv::ConvTranspose);
        let text = "[model]\nstride = S1\ncontext_dim = 8 # comment\n[diffusion]\nsteps = 200\n[sample]\nprompt = 1\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.decoder_conv, DecoderConv::Conv);
        assert_eq!(c.sample.steps, 200);
        assert_eq!(c.sample.prompt, Some(1));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("# header\n[model]\nembed_dim = 64\nwidht = 8\n").unwrap_err();
        assert!(
            matches!(err, StoicError::ConfigSyntax { line: 4, .. }),
            "{err}"
        );
        let err = RunConfig::parse("[train]\nlr = -1\n").unwrap_err();
        assert!(
            matches!(err, StoicError::ConfigSyntax { line: 2, .. }),
            "{err}"
        );
        assert!(RunConfig::parse("lr = 1\n").is_err());
        assert!(RunConfig::parse("[bogus]\n").is_err());
        assert!(RunConfig::parse("[model]\nheads = 3\n").is_err());
        assert!(RunConfig::parse("[train]\nseed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let help = describe_keys();
        assert!(KEYS.iter().all(|k| help.contains(k.key)));
    }
}
