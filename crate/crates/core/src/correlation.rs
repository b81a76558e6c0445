//! Template-to-search correlation: cross-attention from the search points
//! into the template, followed by attention over feature-space neighborhoods
//! of the fused map, repeated for a fixed number of iterations.

use rand::Rng;

use crate::attention::{Attention, AttentionConfig, PosEmbed};
use crate::backbone::coords_var;
use crate::error::{Error, Result};
use crate::geometry::{knn_features, NeighborGraph};
use crate::numeric::{ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationConfig {
    pub iterations: usize,
    /// Feature-space neighborhood size of the ego pass.
    pub k: usize,
    /// Disabling drops the ego pass (cross-feature augmentation only).
    pub ego: bool,
    pub attention: AttentionConfig,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            iterations: 2,
            k: 48,
            ego: true,
            attention: AttentionConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Search,
    Coarse(usize),
    Refined(usize),
}

/// Search-aligned feature map: row `i` always belongs to search point `i`.
#[derive(Clone, Debug)]
pub struct FusionMap {
    pub features: Var,
    pub coords: Vec<[f64; 3]>,
    pub stage: Stage,
}

#[derive(Clone, Debug)]
pub struct Iteration {
    pub cross: Attention,
    pub template_pos: PosEmbed,
    /// Absent when the ego pass is disabled.
    pub ego: Option<EgoPass>,
}

#[derive(Clone, Debug)]
pub struct EgoPass {
    pub attn: Attention,
    pub search_pos: PosEmbed,
}

#[derive(Clone, Debug)]
pub struct Correlation {
    pub config: CorrelationConfig,
    pub iterations: Vec<Iteration>,
}

impl Correlation {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        config: CorrelationConfig,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.iterations == 0 {
            return Err(Error::Parameter("correlation needs at least one iteration".into()));
        }
        if config.k == 0 {
            return Err(Error::Parameter("ego neighborhood size must be positive".into()));
        }
        let mut iterations = Vec::with_capacity(config.iterations);
        for n in 1..=config.iterations {
            let name = format!("correlation.iter{n}");
            let att = config.attention;
            iterations.push(Iteration {
                cross: Attention::new(store, &format!("{name}.cross"), width, width, att, rng)?,
                template_pos: PosEmbed::new(store, &format!("{name}.template_pos"), width, rng)?,
                ego: if config.ego {
                    Some(EgoPass {
                        attn: Attention::new(store, &format!("{name}.ego"), width, width, att, rng)?,
                        search_pos: PosEmbed::new(store, &format!("{name}.search_pos"), width, rng)?,
                    })
                } else {
                    None
                },
            });
        }
        Ok(Correlation { config, iterations })
    }

    /// Embeds the template into the search features:
    /// `CrossAttention(Y^s, Y^t, Y^t + X^t)`.
    pub fn cross_feature_aug<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        iter: usize,
        search: &FusionMap,
        template: Var,
        template_coords: &[[f64; 3]],
    ) -> Result<FusionMap> {
        if template_coords.is_empty() || tape.rows(template) == 0 {
            return Err(Error::Precondition("empty template".into()));
        }
        let it = &self.iterations[iter];
        let xyz = coords_var(tape, template_coords);
        let pos = it.template_pos.forward(tape, xyz)?;
        let features = it.cross.cross_attention(tape, search.features, template, pos)?;
        Ok(FusionMap {
            features,
            coords: search.coords.clone(),
            stage: Stage::Coarse(iter + 1),
        })
    }

    /// Feature-space neighbor graph of the current fused map.
    pub fn feature_graph<T: Scalar>(&self, tape: &Tape<'_, T>, fused: &FusionMap) -> Result<NeighborGraph> {
        knn_features(tape.value(fused.features), tape.cols(fused.features), self.config.k)
    }

    /// Refines each point over its `K` nearest neighbors in feature space;
    /// positional terms come from the 3-D coordinates of those neighbors.
    pub fn ego_feature_aug<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        iter: usize,
        fused: &FusionMap,
    ) -> Result<FusionMap> {
        let ego = self.iterations[iter]
            .ego
            .as_ref()
            .ok_or_else(|| Error::Config("ego pass is disabled".into()))?;
        let graph = self.feature_graph(tape, fused)?;
        let xyz = coords_var(tape, &fused.coords);
        let pos = ego.search_pos.forward(tape, xyz)?;
        let features = ego.attn.local_attention(tape, fused.features, pos, &graph)?;
        Ok(FusionMap {
            features,
            coords: fused.coords.clone(),
            stage: Stage::Refined(iter + 1),
        })
    }

    /// Alternates the two passes; each iteration's output replaces the search
    /// features of the next.
    pub fn correlate<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        search: Var,
        template: Var,
        search_coords: &[[f64; 3]],
        template_coords: &[[f64; 3]],
    ) -> Result<FusionMap> {
        if tape.rows(search) != search_coords.len() {
            return Err(Error::dim("correlate", tape.shape(search), &[search_coords.len(), 3]));
        }
        let mut map = FusionMap {
            features: search,
            coords: search_coords.to_vec(),
            stage: Stage::Search,
        };
        for iter in 0..self.iterations.len() {
            map = self.cross_feature_aug(tape, iter, &map, template, template_coords)?;
            if self.iterations[iter].ego.is_some() {
                map = self.ego_feature_aug(tape, iter, &map)?;
            }
        }
        Ok(map)
    }
}
