//! Flat JSON run configuration mirroring [`TrainConfig`].
//!
//! Every key is optional. Layers are combined with [`RunConfig::overlay`]
//! (command-line flags over a config file over defaults) and then resolved
//! into a [`TrainConfig`]. A resolved configuration serializes with every key
//! present, so feeding it back reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QuineError, Result};
use crate::net::{Encoding, Init, NetworkSpec, Variant};
use crate::optim::Algorithm;
use crate::train::{Regime, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    He,
    Zero,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Option<Variant>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub coord_embed_dim: Option<usize>,
    pub image_embed_dim: Option<usize>,
    pub image_dim: Option<usize>,
    pub n_classes: Option<usize>,
    pub encoding: Option<Encoding>,
    pub coord_proj_std: Option<f64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub optimizer: Option<Algorithm>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub lambda: Option<f64>,
    pub temperature: Option<f64>,
    pub regime: Option<Regime>,
    pub sigma: Option<f64>,
    pub generations: Option<usize>,
    pub inner_epochs: Option<usize>,
    pub sequential_regeneration: Option<bool>,
    pub classifier_only: Option<bool>,
    pub init: Option<InitKind>,
    pub init_slope: Option<f64>,
    pub record_time: Option<bool>,
    pub mnist_dir: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
}

macro_rules! overlay_fields {
    ($base:ident, $top:ident; $($f:ident),*) => {
        RunConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| QuineError::InvalidArgument(format!("bad config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| QuineError::io(path, e))?;
        Self::from_json(&text).map_err(|e| QuineError::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Keys set in `top` win over keys set in `self`.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        let base = self;
        overlay_fields!(base, top;
            variant, embed_dim, hidden_dim, coord_embed_dim, image_embed_dim, image_dim, n_classes,
            encoding, coord_proj_std, seed, batch_size, epochs, optimizer, lr, beta1, beta2, eps,
            lambda, temperature, regime, sigma, generations, inner_epochs, sequential_regeneration,
            classifier_only, init, init_slope, record_time, mnist_dir, init_from)
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        let variant = self.variant.unwrap_or(Variant::Vanilla);
        let base_std = NetworkSpec::vanilla().coord_proj_std;
        let mut spec = match variant {
            Variant::Vanilla => {
                let d = NetworkSpec::vanilla();
                let e = self.embed_dim.unwrap_or(d.embed_dim);
                let mut s = NetworkSpec::vanilla_with(e, self.hidden_dim.unwrap_or(d.hidden_dim));
                if let Some(ce) = self.coord_embed_dim {
                    s.coord_embed_dim = ce;
                }
                s
            }
            Variant::Auxiliary => {
                let d = NetworkSpec::auxiliary();
                let ce = self.coord_embed_dim.unwrap_or(d.coord_embed_dim);
                let ie = self.image_embed_dim.unwrap_or(d.image_embed_dim);
                let mut s = NetworkSpec::auxiliary_with(
                    ce,
                    ie,
                    self.hidden_dim.unwrap_or(d.hidden_dim),
                    self.image_dim.unwrap_or(d.image_dim),
                    self.n_classes.unwrap_or(d.n_classes),
                );
                if let Some(e) = self.embed_dim {
                    s.embed_dim = e;
                }
                s
            }
        };
        spec.encoding = self.encoding.unwrap_or(Encoding::OneHot);
        spec.coord_proj_std = self.coord_proj_std.unwrap_or(base_std);
        spec.validate()?;
        Ok(spec)
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.spec()?);
        let algorithm = self.optimizer.unwrap_or(cfg.optimizer);
        cfg = cfg.with_optimizer(algorithm);
        let h = &mut cfg.hyperparams;
        h.lr = self.lr.unwrap_or(h.lr);
        h.beta1 = self.beta1.unwrap_or(h.beta1);
        h.beta2 = self.beta2.unwrap_or(h.beta2);
        h.eps = self.eps.unwrap_or(h.eps);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.lambda = self.lambda.unwrap_or(cfg.lambda);
        cfg.temperature = self.temperature.unwrap_or(cfg.temperature);
        cfg.regime = self.regime.unwrap_or(cfg.regime);
        cfg.sigma = self.sigma.unwrap_or(cfg.sigma);
        cfg.generations = self.generations.unwrap_or(cfg.generations);
        cfg.inner_epochs = self.inner_epochs.unwrap_or(cfg.inner_epochs);
        cfg.sequential_regeneration = self.sequential_regeneration.unwrap_or(cfg.sequential_regeneration);
        cfg.classifier_only = self.classifier_only.unwrap_or(cfg.classifier_only);
        cfg.record_time = self.record_time.unwrap_or(cfg.record_time);
        cfg.init = match (self.init.unwrap_or(InitKind::He), self.init_slope) {
            (InitKind::Zero, _) => Init::Zero,
            (InitKind::He, Some(a)) => Init::He { negative_slope: a },
            (InitKind::He, None) => Init::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully populated configuration describing `cfg`.
    pub fn resolved(cfg: &TrainConfig, mnist_dir: Option<PathBuf>, init_from: Option<PathBuf>) -> Self {
        let s = &cfg.spec;
        let (init, init_slope) = match cfg.init {
            Init::Zero => (InitKind::Zero, None),
            Init::He { negative_slope } => (InitKind::He, Some(negative_slope)),
        };
        RunConfig {
            variant: Some(s.variant),
            embed_dim: Some(s.embed_dim),
            hidden_dim: Some(s.hidden_dim),
            coord_embed_dim: Some(s.coord_embed_dim),
            image_embed_dim: Some(s.image_embed_dim),
            image_dim: Some(s.image_dim),
            n_classes: Some(s.n_classes),
            encoding: Some(s.encoding),
            coord_proj_std: Some(s.coord_proj_std),
            seed: Some(cfg.seed),
            batch_size: Some(cfg.batch_size),
            epochs: Some(cfg.epochs),
            optimizer: Some(cfg.optimizer),
            lr: Some(cfg.hyperparams.lr),
            beta1: Some(cfg.hyperparams.beta1),
            beta2: Some(cfg.hyperparams.beta2),
            eps: Some(cfg.hyperparams.eps),
            lambda: Some(cfg.lambda),
            temperature: Some(cfg.temperature),
            regime: Some(cfg.regime),
            sigma: Some(cfg.sigma),
            generations: Some(cfg.generations),
            inner_epochs: Some(cfg.inner_epochs),
            sequential_regeneration: Some(cfg.sequential_regeneration),
            classifier_only: Some(cfg.classifier_only),
            init: Some(init),
            init_slope,
            record_time: Some(cfg.record_time),
            mnist_dir,
            init_from,
        }
    }
}
