use std::path::Path;

use super::class::DefectClass;
use super::config::ViTConfig;
use crate::container::{Container, DType, Kind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Affine map stored as `weight: [out, in]`, `bias: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        Self {
            weight: trunc_normal(&[out_dim, in_dim], rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn init(dim: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Every learnable tensor of the network. Also reused as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

// Builds the canonical `(name, tensor, decays)` list over either `&` or `&mut` borrows.
macro_rules! param_list {
    ($params:expr, $iter:ident, $($r:tt)+) => {{
        let p = $params;
        let mut out = Vec::new();
        out.push(("patch_embed.weight".to_string(), $($r)+ p.patch_embed.weight, true));
        out.push(("patch_embed.bias".to_string(), $($r)+ p.patch_embed.bias, false));
        out.push(("cls_token".to_string(), $($r)+ p.cls_token, false));
        out.push(("pos_embed".to_string(), $($r)+ p.pos_embed, false));
        for (i, b) in p.blocks.$iter().enumerate() {
            let Block { norm1, q, k, v, proj, norm2, fc1, fc2 } = b;
            let linears = [("attn.q", q), ("attn.k", k), ("attn.v", v), ("attn.proj", proj)];
            let LayerNorm { gamma, beta } = norm1;
            out.push((format!("blocks.{i}.norm1.weight"), gamma, false));
            out.push((format!("blocks.{i}.norm1.bias"), beta, false));
            for (name, lin) in linears {
                let Linear { weight, bias } = lin;
                out.push((format!("blocks.{i}.{name}.weight"), weight, true));
                out.push((format!("blocks.{i}.{name}.bias"), bias, false));
            }
            let LayerNorm { gamma, beta } = norm2;
            out.push((format!("blocks.{i}.norm2.weight"), gamma, false));
            out.push((format!("blocks.{i}.norm2.bias"), beta, false));
            for (name, lin) in [("mlp.fc1", fc1), ("mlp.fc2", fc2)] {
                let Linear { weight, bias } = lin;
                out.push((format!("blocks.{i}.{name}.weight"), weight, true));
                out.push((format!("blocks.{i}.{name}.bias"), bias, false));
            }
        }
        out.push(("norm.weight".to_string(), $($r)+ p.norm.gamma, false));
        out.push(("norm.bias".to_string(), $($r)+ p.norm.beta, false));
        out.push(("head.weight".to_string(), $($r)+ p.head.weight, true));
        out.push(("head.bias".to_string(), $($r)+ p.head.bias, false));
        out
    }};
}

impl Params {
    fn init(cfg: &ViTConfig, rng: &mut Rng) -> Self {
        let d = cfg.hidden_dim;
        let patch_embed = Linear::init(d, cfg.patch_dim(), rng);
        let cls_token = trunc_normal(&[d], rng);
        let pos_embed = trunc_normal(&[cfg.seq_len(), d], rng);
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                norm1: LayerNorm::init(d),
                q: Linear::init(d, d, rng),
                k: Linear::init(d, d, rng),
                v: Linear::init(d, d, rng),
                proj: Linear::init(d, d, rng),
                norm2: LayerNorm::init(d),
                fc1: Linear::init(cfg.mlp_dim, d, rng),
                fc2: Linear::init(d, cfg.mlp_dim, rng),
            })
            .collect();
        Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::init(d),
            head: Linear::init(cfg.num_classes, d, rng),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t, _| t.data_mut().fill(0.0));
        out
    }

    /// `(name, tensor, decays)` in canonical order; `decays` marks weight matrices.
    pub fn tensors(&self) -> Vec<(String, &Tensor, bool)> {
        param_list!(self, iter, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        param_list!(self, iter_mut, &mut)
    }

    pub fn for_each(&self, mut f: impl FnMut(String, &Tensor, bool)) {
        for (n, t, d) in self.tensors() {
            f(n, t, d);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut Tensor, bool)) {
        for (n, t, d) in self.tensors_mut() {
            f(n, t, d);
        }
    }
}

fn trunc_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.truncated_normal(INIT_STD));
    t
}

/// Which parameters receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Only `head.weight` and `head.bias`; the backbone stays frozen.
    #[default]
    HeadOnly,
    Full,
}

impl Trainable {
    pub fn selects(self, name: &str) -> bool {
        match self {
            Trainable::HeadOnly => name.starts_with("head."),
            Trainable::Full => true,
        }
    }
}

/// Named gradient tensors for the selected parameters, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub(crate) fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Classifier weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    pub(crate) params: Params,
    // Bumped on every mutable access so stale forward caches can be detected.
    pub(crate) generation: u64,
}

impl ViTModel {
    /// Random initialization: truncated normal (std 0.02) weights and embeddings,
    /// zero biases, unit layer-norm scales.
    pub fn init(config: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: Params::init(config, rng),
            generation: 0,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.params.for_each(|n, _, _| names.push(n));
        names
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params
            .tensors()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    /// Mutable access to one parameter; invalidates outstanding forward caches.
    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.generation += 1;
        self.params
            .tensors_mut()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    pub(crate) fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.params.for_each(|_, t, _| n += t.len());
        n
    }

    fn expected_shapes(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        // Shapes only depend on the config; build them from a zero-cost template.
        let d = config.hidden_dim;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![d, config.patch_dim()]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![config.seq_len(), d]),
        ];
        for i in 0..config.num_layers {
            let n = |s: &str| format!("blocks.{i}.{s}");
            out.push((n("norm1.weight"), vec![d]));
            out.push((n("norm1.bias"), vec![d]));
            for a in ["attn.q", "attn.k", "attn.v", "attn.proj"] {
                out.push((n(&format!("{a}.weight")), vec![d, d]));
                out.push((n(&format!("{a}.bias")), vec![d]));
            }
            out.push((n("norm2.weight"), vec![d]));
            out.push((n("norm2.bias"), vec![d]));
            out.push((n("mlp.fc1.weight"), vec![config.mlp_dim, d]));
            out.push((n("mlp.fc1.bias"), vec![config.mlp_dim]));
            out.push((n("mlp.fc2.weight"), vec![d, config.mlp_dim]));
            out.push((n("mlp.fc2.bias"), vec![d]));
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out.push(("head.weight".to_string(), vec![config.num_classes, d]));
        out.push(("head.bias".to_string(), vec![config.num_classes]));
        out
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(Kind::Classifier);
        let cfg = &self.config;
        c.set("image_size", cfg.image_size);
        c.set("patch_size", cfg.patch_size);
        c.set("hidden_dim", cfg.hidden_dim);
        c.set("num_layers", cfg.num_layers);
        c.set("num_heads", cfg.num_heads);
        c.set("mlp_dim", cfg.mlp_dim);
        c.set("num_classes", cfg.num_classes);
        c.set("dropout_hidden", cfg.dropout_hidden);
        c.set("dropout_attention", cfg.dropout_attention);
        c.set("norm_mean", join(&cfg.norm_mean));
        c.set("norm_std", join(&cfg.norm_std));
        let classes: Vec<String> = if cfg.num_classes == DefectClass::COUNT {
            DefectClass::ALL.iter().map(|c| c.slug().to_string()).collect()
        } else {
            (0..cfg.num_classes).map(|i| format!("class_{i}")).collect()
        };
        c.set("classes", classes.join(","));
        self.params
            .for_each(|name, t, _| c.push(&name, DType::F32, t.shape(), t.data()));
        c
    }

    /// Writes the model as a classifier container with `f32` tensors.
    pub fn export(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Reads a classifier container, taking the configuration from its header.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let cfg = config_from_header(&c, path)?;
        Self::from_container(&c, &cfg, path)
    }

    /// Populates a model of shape `cfg` from a container, e.g. converted pretrained weights.
    pub fn import_weights(path: &Path, cfg: &ViTConfig) -> Result<Self> {
        let c = Container::read(path)?;
        Self::from_container(&c, cfg, path)
    }

    fn from_container(c: &Container, cfg: &ViTConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        if c.kind != Kind::Classifier {
            return Err(Error::format(path, "container does not hold a classifier"));
        }
        for (name, shape) in Self::expected_shapes(cfg) {
            let entry = c
                .entry(&name)
                .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
            if entry.shape != shape {
                return Err(Error::Incompatible {
                    name,
                    expected: shape,
                    found: entry.shape.clone(),
                });
            }
        }
        let mut model = Self {
            config: cfg.clone(),
            params: Params::init(cfg, &mut Rng::new(0)),
            generation: 0,
        };
        model.params.for_each_mut(|name, t, _| {
            let entry = c.entry(&name).expect("checked above");
            t.data_mut().copy_from_slice(&entry.values);
        });
        Ok(model)
    }
}

fn join(v: &[f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn config_from_header(c: &Container, path: &Path) -> Result<ViTConfig> {
    let get = |key: &str| {
        c.get(key)
            .ok_or_else(|| Error::format(path, format!("header lacks `{key}`")))
    };
    let int = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("header `{key}` is not an integer")))
    };
    let real = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("header `{key}` is not a number")))
    };
    let triple = |key: &str| -> Result<[f64; 3]> {
        let parts: Vec<f64> = get(key)?
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("header `{key}` is not a number list")))?;
        parts
            .try_into()
            .map_err(|_| Error::format(path, format!("header `{key}` needs three values")))
    };
    Ok(ViTConfig {
        image_size: int("image_size")?,
        patch_size: int("patch_size")?,
        hidden_dim: int("hidden_dim")?,
        num_layers: int("num_layers")?,
        num_heads: int("num_heads")?,
        mlp_dim: int("mlp_dim")?,
        num_classes: int("num_classes")?,
        dropout_hidden: real("dropout_hidden")?,
        dropout_attention: real("dropout_attention")?,
        norm_mean: triple("norm_mean")?,
        norm_std: triple("norm_std")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ViTConfig::toy();
        let a = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        let b = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        let c = ViTModel::init(&cfg, &mut Rng::new(2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_conventions() {
        let m = ViTModel::init(&ViTConfig::toy(), &mut Rng::new(3)).unwrap();
        for name in m.parameter_names() {
            let t = m.parameter(&name).unwrap();
            if name.contains("norm") && name.ends_with(".weight") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|v| v.abs() <= 0.04), "{name}");
                assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_rejects_bad_config() {
        let cfg = ViTConfig {
            hidden_dim: 65,
            num_heads: 4,
            ..ViTConfig::toy()
        };
        assert!(matches!(ViTModel::init(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_match_template() {
        let cfg = ViTConfig::toy();
        let m = ViTModel::init(&cfg, &mut Rng::new(0)).unwrap();
        let mut actual = Vec::new();
        m.params.for_each(|n, t, _| actual.push((n, t.shape().to_vec())));
        assert_eq!(actual, ViTModel::expected_shapes(&cfg));
        assert_eq!(m.parameter("pos_embed").unwrap().shape(), &[17, 64]);
    }

    #[test]
    fn export_then_load_round_trips_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pvs");
        let m = ViTModel::init(&ViTConfig::toy(), &mut Rng::new(4)).unwrap();
        m.export(&path).unwrap();
        let back = ViTModel::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for name in m.parameter_names() {
            let a = m.parameter(&name).unwrap().data();
            let b = back.parameter(&name).unwrap().data();
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let c = Container::read(&path).unwrap();
        assert!(c
            .get("classes")
            .unwrap()
            .starts_with("physical_damage,bird_dropping,clean"));
    }

    #[test]
    fn import_reports_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pvs");
        ViTModel::init(&ViTConfig::toy(), &mut Rng::new(4))
            .unwrap()
            .export(&path)
            .unwrap();
        let wider = ViTConfig {
            mlp_dim: 256,
            ..ViTConfig::toy()
        };
        match ViTModel::import_weights(&path, &wider) {
            Err(Error::Incompatible { name, expected, found }) => {
                assert_eq!(name, "blocks.0.mlp.fc1.weight");
                assert_eq!(expected, vec![256, 64]);
                assert_eq!(found, vec![128, 64]);
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }
}
