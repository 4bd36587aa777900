//! The full forecaster: encoder, target generator and decoder.

use serde::{Deserialize, Serialize};
use tsd_autograd::{Graph, Var};

use crate::decoder::{init_decoder, Forecast, ForecastVars, TrajDecParams};
use crate::encoder::{init_encoder, EncoderInput, EncoderParams, SceneFeatures, SceneVars};
use crate::error::{argument, Error, Result};
use crate::masking::ObservationMask;
use crate::nn::{Bound, ParamStore};
use crate::scenario::Scenario;
use crate::targets::{init_target_generator, TargetGenParams, TargetSet, TargetVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub modes: usize,
    pub points: usize,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            modes: 6,
            points: 3,
            t_obs: 20,
            t_pred: 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.modes == 0 || self.points == 0 || self.t_obs == 0 {
            return Err(Error::Config(
                "modes, points and t_obs must be positive".into(),
            ));
        }
        if self.t_pred == 0 || !self.t_pred.is_multiple_of(self.points) {
            return Err(Error::Config(format!(
                "t_pred = {} must be a positive multiple of points = {}",
                self.t_pred, self.points
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TsdModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub targets: TargetGenParams,
    pub decoder: TrajDecParams,
}

/// Graph handles for all three parameter stores.
pub struct ModelBound {
    pub encoder: Bound,
    pub targets: Bound,
    pub decoder: Bound,
}

impl ModelBound {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .vars()
            .iter()
            .chain(self.targets.vars())
            .chain(self.decoder.vars())
            .copied()
    }
}

/// One forward pass on a graph.
pub struct BranchVars {
    pub scene: SceneVars,
    pub targets: Option<TargetVars>,
    pub forecast: ForecastVars,
}

pub const STORE_PREFIXES: [&str; 3] = ["encoder", "targets", "decoder"];

impl TsdModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            d,
            heads,
            modes,
            points,
            t_pred,
            ..
        } = config;
        // independent streams per component
        let s = seed.wrapping_mul(3);
        Ok(Self {
            config,
            encoder: init_encoder(d, heads, s)?,
            targets: init_target_generator(d, heads, modes, points, t_pred, s.wrapping_add(1))?,
            decoder: init_decoder(d, heads, modes, points, t_pred, s.wrapping_add(2))?,
        })
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [
            &self.encoder.store,
            &self.targets.store,
            &self.decoder.store,
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [
            &mut self.encoder.store,
            &mut self.targets.store,
            &mut self.decoder.store,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.stores().iter().map(|s| s.num_scalars()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.stores().iter().all(|s| s.is_finite())
    }

    pub fn bind(&self, g: &mut Graph) -> ModelBound {
        ModelBound {
            encoder: self.encoder.store.bind(g),
            targets: self.targets.store.bind(g),
            decoder: self.decoder.store.bind(g),
        }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> ModelBound {
        ModelBound {
            encoder: self.encoder.store.bind_frozen(g),
            targets: self.targets.store.bind_frozen(g),
            decoder: self.decoder.store.bind_frozen(g),
        }
    }

    /// Encoder, then targets if `use_targets`, then the decoder.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ModelBound,
        input: &EncoderInput,
        use_targets: bool,
    ) -> BranchVars {
        let scene = self.encoder.forward(g, &p.encoder, input);
        let targets = use_targets.then(|| self.targets.forward(g, &p.targets, &scene));
        let forecast = self
            .decoder
            .forward(g, &p.decoder, &scene, targets.as_ref());
        BranchVars {
            scene,
            targets,
            forecast,
        }
    }

    fn check_input(&self, items: &[(&Scenario, &ObservationMask)]) -> Result<()> {
        for (s, _) in items {
            if s.t_obs() != self.config.t_obs {
                return Err(argument(format!(
                    "scenario {} has T_obs {}, model expects {}",
                    s.scenario_id,
                    s.t_obs(),
                    self.config.t_obs
                )));
            }
        }
        Ok(())
    }

    /// Batched inference.
    pub fn predict(
        &self,
        items: &[(&Scenario, &ObservationMask)],
        use_targets: bool,
    ) -> Result<Vec<Prediction>> {
        self.check_input(items)?;
        let input = EncoderInput::new(items)?;
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, &input, use_targets);
        let features = SceneFeatures::from_vars(&g, &out.scene, &input);
        let preds: Vec<Prediction> = features
            .into_iter()
            .enumerate()
            .map(|(b, features)| Prediction {
                features,
                targets: out.targets.as_ref().map(|t| TargetSet::from_vars(&g, t, b)),
                forecast: Forecast::from_vars(&g, &out.forecast, b),
            })
            .collect();
        if preds
            .iter()
            .any(|p| !(p.forecast.mu.is_finite() && p.forecast.b.is_finite()))
        {
            return Err(Error::Numeric("model produced non-finite forecasts".into()));
        }
        Ok(preds)
    }
}

/// Per-scenario outputs of [`TsdModel::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub features: SceneFeatures,
    pub targets: Option<TargetSet>,
    pub forecast: Forecast,
}
