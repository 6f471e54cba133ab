use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::baselines::{NeuralTrainState, NeuralTransition, TransitionOptions};
use crate::diff::ParamVector;
use crate::error::{Error, Result};
use crate::lagrangian::{LagrangianModel, ModelConfig};
use crate::learn::{AdamW, ContextEncoder, EpochLog, Normalizer, TrainConfig, TrainState};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSlice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub method: Method,
    /// Ablation label the run was trained under.
    pub label: String,
    pub seed: u64,
    pub epoch: usize,
    pub h: f64,
    pub d: usize,
    pub d_eta: usize,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionOptions>,
    pub normalizer: Normalizer,
    pub slices: Vec<NamedSlice>,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
}

fn push_slices(out: &mut Vec<NamedSlice>, prefix: &str, p: &ParamVector) {
    for (i, s) in p.layout().slices().iter().enumerate() {
        out.push(NamedSlice { name: format!("{prefix}/{}", s.name), rows: s.rows, cols: s.cols, values: p.slice(i).to_vec() });
    }
}

fn fill_slices(slices: &[NamedSlice], prefix: &str, p: &mut ParamVector) -> Result<()> {
    let layout = p.layout().clone();
    for (i, s) in layout.slices().iter().enumerate() {
        let name = format!("{prefix}/{}", s.name);
        let src = slices
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Format { path: String::new(), detail: format!("checkpoint lacks parameter slice `{name}`") })?;
        if (src.rows, src.cols) != (s.rows, s.cols) || src.values.len() != s.len() {
            return Err(Error::Format {
                path: String::new(),
                detail: format!("slice `{name}` is {}x{} but the model expects {}x{}", src.rows, src.cols, s.rows, s.cols),
            });
        }
        p.slice_mut(i).copy_from_slice(&src.values);
    }
    let expected = layout.slices().len();
    let present = slices.iter().filter(|n| n.name.starts_with(&format!("{prefix}/"))).count();
    if present != expected {
        return Err(Error::Format { path: String::new(), detail: format!("checkpoint has {present} `{prefix}` slices, model has {expected}") });
    }
    Ok(())
}

pub(crate) fn model_config(cfg: &TrainConfig, d: usize, h: f64) -> ModelConfig {
    ModelConfig { variant: cfg.variant, dim: d, ctx_dim: cfg.ctx_dim, width: cfg.width, depth: cfg.depth, h, epsilon_mass: cfg.epsilon_mass }
}

impl Checkpoint {
    pub fn from_variational(st: &TrainState, label: &str) -> Self {
        let mut slices = Vec::new();
        push_slices(&mut slices, "model", st.model.params());
        push_slices(&mut slices, "encoder", st.encoder.params());
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            method: Method::Variational,
            label: label.into(),
            seed: st.config.seed,
            epoch: st.epochs_done,
            h: st.model.h(),
            d: st.model.dim(),
            d_eta: st.model.ctx_dim(),
            config: st.config.clone(),
            transition: None,
            normalizer: st.normalizer.clone(),
            slices,
            optimizer: st.optimizer.clone(),
            log: st.log.clone(),
        }
    }

    pub fn from_neural(st: &NeuralTrainState, label: &str, h: f64) -> Self {
        let mut slices = Vec::new();
        push_slices(&mut slices, "transition", st.transition.params());
        push_slices(&mut slices, "encoder", st.encoder.params());
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            method: Method::Neural,
            label: label.into(),
            seed: st.config.seed,
            epoch: st.epochs_done,
            h,
            d: st.transition.dim(),
            d_eta: st.transition.ctx_dim(),
            config: st.config.clone(),
            transition: Some(st.transition.options),
            normalizer: st.normalizer.clone(),
            slices,
            optimizer: st.optimizer.clone(),
            log: st.log.clone(),
        }
    }

    fn encoder(&self) -> Result<ContextEncoder> {
        let c = &self.config;
        let mut enc = ContextEncoder::new(self.d, self.d_eta, c.width, c.depth, 0)?;
        fill_slices(&self.slices, "encoder", enc.params_mut())?;
        Ok(enc)
    }

    fn check_kind(&self, method: Method) -> Result<()> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format { path: String::new(), detail: format!("unsupported checkpoint schema version {}", self.schema_version) });
        }
        if self.method != method {
            return Err(Error::Invalid(format!("checkpoint holds a {} model, expected {}", self.method.name(), method.name())));
        }
        Ok(())
    }

    pub fn variational_state(&self) -> Result<TrainState> {
        self.check_kind(Method::Variational)?;
        let mcfg = model_config(&self.config, self.d, self.h);
        let mut model = LagrangianModel::new(mcfg, 0)?;
        fill_slices(&self.slices, "model", model.params_mut())?;
        Ok(TrainState {
            config: self.config.clone(),
            model,
            encoder: self.encoder()?,
            normalizer: self.normalizer.clone(),
            optimizer: self.optimizer.clone(),
            epochs_done: self.epoch,
            log: self.log.clone(),
        })
    }

    pub fn neural_state(&self) -> Result<NeuralTrainState> {
        self.check_kind(Method::Neural)?;
        let c = &self.config;
        let opts = self.transition.unwrap_or_default();
        let mut transition = NeuralTransition::new(self.d, self.d_eta, c.width, c.depth, opts, 0)?;
        fill_slices(&self.slices, "transition", transition.params_mut())?;
        Ok(NeuralTrainState {
            config: self.config.clone(),
            transition,
            encoder: self.encoder()?,
            normalizer: self.normalizer.clone(),
            optimizer: self.optimizer.clone(),
            epochs_done: self.epoch,
            log: self.log.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format { path: path.display().to_string(), detail: format!("unsupported checkpoint schema version {}", ck.schema_version) });
        }
        Ok(ck)
    }
}
