//! Complete model state: configuration, parameters, memory banks and
//! optimizer moments, with JSON checkpointing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::backbone::{BackboneParams, BackboneVars, DEFAULT_DEPTH, DEFAULT_K_HOPS};
use crate::experts::{
    curvature_of, expert_forward, ExpertModel, ExpertVars, DEFAULT_EXPERT_LAYERS, DEFAULT_KAPPAS,
};
use crate::nn::{Linear, LinearVars};
use crate::router::{gate, routing_logits, GateDecision, MemoryBank, RouterConfig};
use crate::tape::{Mat, Tape, Var};
use crate::training::{AdamState, TrainConfig};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_depth: usize,
    /// Output width of `Φ`; the embedding width is `k_hops` times this.
    pub backbone_out: usize,
    pub k_hops: usize,
    pub expert_kappas: Vec<f64>,
    pub expert_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_depth: DEFAULT_DEPTH,
            backbone_out: 32,
            k_hops: DEFAULT_K_HOPS,
            expert_kappas: DEFAULT_KAPPAS.to_vec(),
            expert_layers: DEFAULT_EXPERT_LAYERS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_depth == 0 || self.backbone_out == 0 || self.k_hops == 0 || self.expert_layers == 0 {
            return Err(Error::Config("model depths and widths must be positive".into()));
        }
        if self.expert_kappas.is_empty() {
            return Err(Error::Config("at least one expert is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub format_version: u32,
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub router: RouterConfig,
    pub train: TrainConfig,
    pub backbone: BackboneParams,
    pub decoder: Linear,
    pub experts: Vec<ExpertModel>,
    pub banks: Vec<MemoryBank>,
    pub optimizer: AdamState,
}

impl ModelState {
    /// Fresh parameters drawn from a generator seeded with `train.seed`.
    pub fn init(model: ModelConfig, align: AlignConfig, router: RouterConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        align.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let d = align.total_dim;
        let backbone = BackboneParams::init(d, model.backbone_out, model.backbone_depth, model.k_hops, &mut rng);
        let embed = backbone.embed_dim();
        let experts: Vec<ExpertModel> = model
            .expert_kappas
            .iter()
            .enumerate()
            .map(|(i, &k)| ExpertModel::init(i, k, embed, model.expert_layers, &mut rng))
            .collect();
        let decoder = Linear::xavier(embed, d, &mut rng);
        let banks = (0..experts.len()).map(|i| MemoryBank::new(i, router.capacity)).collect();
        let mut state = Self {
            format_version: FORMAT_VERSION,
            model,
            align,
            router,
            train,
            backbone,
            decoder,
            experts,
            banks,
            optimizer: AdamState::default(),
        };
        state.optimizer = AdamState::zeros_like(&state.param_values());
        state.validate()?;
        Ok(state)
    }

    /// Width of the aligned feature space.
    pub fn feature_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim()
    }

    pub fn curvatures(&self) -> Vec<f64> {
        self.experts.iter().map(curvature_of).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.align.validate()?;
        self.train.validate()?;
        self.router.validate(self.experts.len())?;
        self.backbone.validate()?;
        if self.feature_dim() != self.align.total_dim {
            return Err(Error::Dimension(format!(
                "backbone input width {} does not match aligned width {}",
                self.feature_dim(),
                self.align.total_dim
            )));
        }
        let embed = self.embed_dim();
        if self.decoder.fan_in() != embed || self.decoder.fan_out() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "decoder is {}→{}, expected {embed}→{}",
                self.decoder.fan_in(),
                self.decoder.fan_out(),
                self.feature_dim()
            )));
        }
        self.decoder.validate("decoder")?;
        for e in &self.experts {
            if e.dim != embed {
                return Err(Error::Dimension(format!(
                    "expert {} has width {}, embedding width is {embed}",
                    e.index, e.dim
                )));
            }
            e.validate()?;
        }
        if self.banks.len() != self.experts.len() {
            return Err(Error::Dimension(format!(
                "{} banks for {} experts",
                self.banks.len(),
                self.experts.len()
            )));
        }
        for b in &self.banks {
            b.validate(embed)?;
        }
        Ok(())
    }

    /// Every trainable tensor in a fixed order; scalars are 1×1.
    pub fn param_values(&self) -> Vec<Mat> {
        let mut out = Vec::new();
        let linear = |l: &Linear, out: &mut Vec<Mat>| {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        };
        for l in &self.backbone.layers {
            linear(l, &mut out);
        }
        linear(&self.decoder, &mut out);
        for e in &self.experts {
            for l in &e.layers {
                linear(l, &mut out);
            }
            out.push(Mat::from_elem((1, 1), e.theta));
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.backbone.layers.len() {
            out.push(format!("backbone.{i}.weight"));
            out.push(format!("backbone.{i}.bias"));
        }
        out.push("decoder.weight".into());
        out.push("decoder.bias".into());
        for e in &self.experts {
            for j in 0..e.layers.len() {
                out.push(format!("expert{}.{j}.weight", e.index));
                out.push(format!("expert{}.{j}.bias", e.index));
            }
            out.push(format!("expert{}.theta", e.index));
        }
        out
    }

    /// Inverse of [`param_values`](Self::param_values).
    pub fn set_param_values(&mut self, values: &[Mat]) -> Result<()> {
        let current = self.param_values();
        if values.len() != current.len() || values.iter().zip(&current).any(|(a, b)| a.dim() != b.dim()) {
            return Err(Error::Dimension("parameter list does not match the model".into()));
        }
        let mut it = values.iter().cloned();
        let mut next = || it.next().expect("length checked");
        for l in &mut self.backbone.layers {
            l.weight = next();
            l.bias = next();
        }
        self.decoder.weight = next();
        self.decoder.bias = next();
        for e in &mut self.experts {
            for l in &mut e.layers {
                l.weight = next();
                l.bias = next();
            }
            e.theta = next()[[0, 0]];
        }
        Ok(())
    }

    /// Gates and reconstructs one embedding with the frozen banks.
    pub fn reconstruct(&self, h: &[f64]) -> Result<(GateDecision, Vec<f64>)> {
        let logits = routing_logits(h, &self.banks, &self.experts, self.router.squared_routing)?;
        let decision = gate(&logits, &self.router);
        let mut out = vec![0.0; h.len()];
        for (&i, &w) in decision.active.iter().zip(&decision.active_weights) {
            for (o, r) in out.iter_mut().zip(expert_forward(&self.experts[i], h)?) {
                *o += w * r;
            }
        }
        Ok((decision, out))
    }

    /// Row-wise [`reconstruct`](Self::reconstruct), parallel over rows.
    pub fn reconstruct_rows(&self, h: &Mat) -> Result<Mat> {
        let rows: Vec<Vec<f64>> = (0..h.nrows())
            .into_par_iter()
            .map(|i| self.reconstruct(&h.row(i).to_vec()).map(|(_, r)| r))
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Mat::from_shape_vec(h.dim(), flat).expect("row widths agree"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(s)?;
        state.validate()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Tape leaves for every parameter, in [`ModelState::param_values`] order.
pub(crate) struct ModelVars {
    pub backbone: BackboneVars,
    pub decoder: LinearVars,
    pub experts: Vec<ExpertVars>,
}

impl ModelVars {
    pub fn new(state: &ModelState, tape: &mut Tape) -> Self {
        let backbone = BackboneVars::new(&state.backbone, tape);
        let decoder = state.decoder.leaves(tape);
        let experts = state.experts.iter().map(|e| ExpertVars::new(e, tape)).collect();
        Self {
            backbone,
            decoder,
            experts,
        }
    }

    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.backbone.layers {
            out.extend([l.weight, l.bias]);
        }
        out.extend([self.decoder.weight, self.decoder.bias]);
        for e in &self.experts {
            for l in &e.layers {
                out.extend([l.weight, l.bias]);
            }
            out.push(e.theta);
        }
        out
    }
}
