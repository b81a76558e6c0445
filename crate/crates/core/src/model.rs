//! The assembled tracking network and its parameters.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Pyramid};
use crate::config::Config;
use crate::correlation::{Correlation, FusionMap};
use crate::error::Result;
use crate::head::{scatter_to_bev, DetectionOutput, Head};
use crate::numeric::{checkpoint, ParamStore, Scalar, Tape};

/// Parameter layout of the full network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub correlation: Correlation,
    pub head: Head,
}

/// Wall-clock time per stage of one forward pass, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub backbone_ms: f64,
    pub correlation_ms: f64,
    pub head_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.backbone_ms + self.correlation_ms + self.head_ms
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub struct ForwardOutput {
    pub template: Pyramid,
    pub search: Pyramid,
    pub fusion: FusionMap,
    pub detection: DetectionOutput,
    /// Search points falling outside the BEV grid.
    pub dropped: usize,
    pub timings: StageTimings,
}

impl Network {
    /// Builds the layout and a freshly initialized parameter set.
    pub fn new(config: &Config, seed: u64) -> Result<(Network, ParamStore<f64>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut store, config.backbone(), &mut rng)?;
        let correlation = Correlation::new(&mut store, config.correlation(), config.feature_dim, &mut rng)?;
        let head = Head::new(&mut store, config.grid(), config.feature_dim, config.head_width, &mut rng)?;
        Ok((
            Network {
                backbone,
                correlation,
                head,
            },
            store,
        ))
    }

    /// Template and search clouds must already be in their canonical
    /// frames and resampled to the configured sizes.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        template: &[[f64; 3]],
        search: &[[f64; 3]],
        seed: u64,
    ) -> Result<ForwardOutput> {
        let t0 = Instant::now();
        let (tp, sp) = self.backbone.extract_features(tape, template, search, seed)?;
        let t1 = Instant::now();
        let fusion = self
            .correlation
            .correlate(tape, sp.output(), tp.output(), search, template)?;
        let t2 = Instant::now();
        let bev = scatter_to_bev(tape, fusion.features, &fusion.coords, self.head.grid)?;
        let detection = self.head.forward(tape, &bev)?;
        let t3 = Instant::now();
        Ok(ForwardOutput {
            template: tp,
            search: sp,
            fusion,
            detection,
            dropped: bev.dropped,
            timings: StageTimings {
                backbone_ms: ms(t1 - t0),
                correlation_ms: ms(t2 - t1),
                head_ms: ms(t3 - t2),
            },
        })
    }
}

/// Configuration, layout and parameter values at one precision.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: Config,
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        let (net, store) = Network::new(config, seed)?;
        Ok(Model {
            config: config.clone(),
            net,
            params: store.cast(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Loads checkpoint values into a model laid out by `config`.
    pub fn load(config: &Config, path: &Path) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        let stored: ParamStore<T> = checkpoint::load(path)?;
        model.params.load_from(&stored)?;
        Ok(model)
    }
}
