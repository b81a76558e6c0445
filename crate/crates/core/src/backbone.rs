//! Shared-weight point Transformer: a three-level encoder of edge
//! convolutions and self-attention over randomly halved point sets, and a
//! decoder that interpolates back to full resolution with cross-attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{xavier_bound, Attention, AttentionConfig, Linear, PosEmbed};
use crate::error::{Error, Result};
use crate::geometry::{knn_coords, resample_indices, NeighborGraph};
use crate::numeric::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Coordinate-space neighbor count of each encoder level.
    pub neighbors: [usize; LEVELS],
    /// Feature widths `C_1..C_3` of the encoder levels.
    pub channels: [usize; LEVELS],
    /// Output width `C`.
    pub out_dim: usize,
    pub attention: AttentionConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            neighbors: [32, 48, 48],
            channels: [32, 64, 128],
            out_dim: 32,
            attention: AttentionConfig::default(),
        }
    }
}

impl BackboneConfig {
    /// Width emitted by decoder level `l` (`C_0 = C`).
    pub fn decoder_width(&self, l: usize) -> usize {
        if l == 0 {
            self.out_dim
        } else {
            self.channels[l - 1]
        }
    }

    /// Checks that a cloud of `n` points survives every halving with enough
    /// points for the neighbor graphs.
    pub fn check_input(&self, n: usize) -> Result<()> {
        if n == 0 || n % (1 << LEVELS) != 0 {
            return Err(Error::Parameter(format!(
                "point count {n} must be a positive multiple of {}",
                1 << LEVELS
            )));
        }
        for (l, &k) in self.neighbors.iter().enumerate() {
            let m = n >> (l + 1);
            if m < k {
                return Err(Error::Parameter(format!(
                    "level {} keeps {m} of {n} points, fewer than its {k} neighbors",
                    l + 1
                )));
            }
        }
        Ok(())
    }
}

/// `max_j relu(W_c f_i + W_e (f_j - f_i) + b)` over the neighbors `j` of `i`,
/// i.e. a one-layer perceptron on `concat(f_i, f_j - f_i)` split into its
/// center and edge blocks.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub center: ParamId,
    pub edge: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl EdgeConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = xavier_bound(2 * in_dim, out_dim);
        Ok(EdgeConv {
            center: store.add(format!("{name}.center"), Tensor::uniform(&[in_dim, out_dim], bound, rng))?,
            edge: store.add(format!("{name}.edge"), Tensor::uniform(&[in_dim, out_dim], bound, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, features: Var, graph: &NeighborGraph) -> Result<Var> {
        if tape.rows(features) != graph.n {
            return Err(Error::dim("edge_conv", tape.shape(features), &[graph.n, graph.k]));
        }
        // The max over neighbors commutes with the rectifier and the terms
        // that only depend on the center point.
        let wc = tape.param(self.center);
        let we = tape.param(self.edge);
        let b = tape.param(self.bias);
        let fc = tape.matmul(features, wc)?;
        let fe = tape.matmul(features, we)?;
        let own = tape.sub(fc, fe)?;
        let best = tape.neighbor_max(fe, &graph.indices, graph.k)?;
        let x = tape.add(own, best)?;
        let x = tape.add_row(x, b)?;
        Ok(tape.relu(x))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub edge: EdgeConv,
    pub pos: PosEmbed,
    pub attn: Attention,
    pub neighbors: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub pos: PosEmbed,
    pub attn: Attention,
}

/// Parameter layout of the backbone.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub encoder: Vec<EncoderLevel>,
    /// Indexed by level `0..LEVELS`; entry `l` produces `F̂_l`.
    pub decoder: Vec<DecoderLevel>,
    /// Lifts raw coordinates to the level-0 decoder width.
    pub input_proj: Linear,
}

/// Intermediate maps of one branch. Index `l` runs over the pyramid; level 0
/// is the input cloud.
pub struct Pyramid {
    pub coords: Vec<Vec<[f64; 3]>>,
    /// Indices of each level's points into the previous level.
    pub samples: Vec<Vec<usize>>,
    pub local: Vec<Var>,
    pub attended: Vec<Var>,
    pub pos: Vec<Var>,
    pub interpolated: Vec<Var>,
}

impl Pyramid {
    pub fn output(&self) -> Var {
        self.interpolated[0]
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f64>, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut in_dim = 3;
        for l in 0..LEVELS {
            let c = config.channels[l];
            let name = format!("backbone.enc{}", l + 1);
            encoder.push(EncoderLevel {
                edge: EdgeConv::new(store, &format!("{name}.edge"), in_dim, c, rng)?,
                pos: PosEmbed::new(store, &format!("{name}.pos"), c, rng)?,
                attn: Attention::new(store, &format!("{name}.attn"), c, c, config.attention, rng)?,
                neighbors: config.neighbors[l],
            });
            in_dim = c;
        }
        let mut decoder = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let name = format!("backbone.dec{l}");
            let coarse = config.channels[l];
            decoder.push(DecoderLevel {
                pos: PosEmbed::new(store, &format!("{name}.pos"), coarse, rng)?,
                attn: Attention::new(
                    store,
                    &format!("{name}.attn"),
                    config.decoder_width(l),
                    coarse,
                    config.attention,
                    rng,
                )?,
            });
        }
        let input_proj = Linear::new(store, "backbone.input_proj", 3, config.decoder_width(0), true, rng)?;
        Ok(Backbone {
            config,
            encoder,
            decoder,
            input_proj,
        })
    }

    /// One encoder level: halve the cloud, aggregate local neighborhoods,
    /// then attend globally with positional terms on query, key and value.
    pub fn encoder_level<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        level: usize,
        coords: &[[f64; 3]],
        features: Var,
        rng: &mut R,
    ) -> Result<(Vec<usize>, Vec<[f64; 3]>, Var, Var, Var)> {
        let enc = &self.encoder[level];
        let n = coords.len();
        if n % 2 != 0 || n / 2 < enc.neighbors {
            return Err(Error::Parameter(format!(
                "encoder level {} cannot halve {n} points with {} neighbors",
                level + 1,
                enc.neighbors
            )));
        }
        let mut idx = resample_indices(n, n / 2, rng)?;
        idx.sort_unstable();
        let sub: Vec<[f64; 3]> = idx.iter().map(|&i| coords[i]).collect();
        let feats = tape.gather_rows(features, &idx)?;
        let graph = knn_coords(&sub, enc.neighbors)?;
        let local = enc.edge.forward(tape, feats, &graph)?;
        let xyz = coords_var(tape, &sub);
        let pos = enc.pos.forward(tape, xyz)?;
        let attended = enc.attn.self_attention(tape, local, pos)?;
        Ok((idx, sub, local, pos, attended))
    }

    /// Interpolates the coarse map onto the finer level: fine features query,
    /// coarse features are keys, coarse features plus their positional
    /// embedding are values.
    pub fn decoder_level<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        level: usize,
        fine: Var,
        coarse: Var,
        coarse_coords: &[[f64; 3]],
    ) -> Result<Var> {
        let dec = &self.decoder[level];
        let xyz = coords_var(tape, coarse_coords);
        let pos = dec.pos.forward(tape, xyz)?;
        dec.attn.cross_attention(tape, fine, coarse, pos)
    }

    /// Full encoder-decoder pass over one cloud.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        coords: &[[f64; 3]],
        rng: &mut R,
    ) -> Result<Pyramid> {
        self.config.check_input(coords.len())?;
        let input = coords_var(tape, coords);
        let mut pyr = Pyramid {
            coords: vec![coords.to_vec()],
            samples: Vec::new(),
            local: Vec::new(),
            attended: vec![input],
            pos: Vec::new(),
            interpolated: Vec::new(),
        };
        let mut features = input;
        for l in 0..LEVELS {
            let (idx, sub, local, pos, attended) = {
                let prev = &pyr.coords[l];
                self.encoder_level(tape, l, prev, features, rng)?
            };
            pyr.samples.push(idx);
            pyr.coords.push(sub);
            pyr.local.push(local);
            pyr.pos.push(pos);
            pyr.attended.push(attended);
            features = attended;
        }
        // F̂_3 = F_3, then decode downwards.
        let mut interp = vec![pyr.attended[LEVELS]; LEVELS + 1];
        for l in (0..LEVELS).rev() {
            let fine = if l == 0 {
                self.input_proj.forward(tape, input)?
            } else {
                pyr.attended[l]
            };
            interp[l] = self.decoder_level(tape, l, fine, interp[l + 1], &pyr.coords[l + 1])?;
        }
        pyr.interpolated = interp;
        Ok(pyr)
    }

    /// Runs both branches with shared weights. Each branch draws its
    /// subsampling from a fresh generator seeded with `seed`, so identical
    /// clouds give identical maps.
    pub fn extract_features<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        template: &[[f64; 3]],
        search: &[[f64; 3]],
        seed: u64,
    ) -> Result<(Pyramid, Pyramid)> {
        let t = self.forward(tape, template, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let s = self.forward(tape, search, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((t, s))
    }
}

pub(crate) fn coords_var<T: Scalar>(tape: &mut Tape<'_, T>, coords: &[[f64; 3]]) -> Var {
    let data = coords
        .iter()
        .flat_map(|p| p.iter().map(|&v| T::from_f64c(v)))
        .collect();
    tape.input_raw(&[coords.len(), 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> BackboneConfig {
        BackboneConfig {
            neighbors: [4, 4, 2],
            channels: [8, 8, 16],
            out_dim: 8,
            attention: AttentionConfig::default(),
        }
    }

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)])
            .collect()
    }

    #[test]
    fn level_sizes_halve() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, toy_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new(&store);
        let pyr = bb.forward(&mut tape, &cloud(64, 1), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let sizes: Vec<usize> = pyr.coords.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8]);
        assert_eq!(tape.shape(pyr.output()), &[64, 8]);
        for l in 1..=LEVELS {
            for (&i, p) in pyr.samples[l - 1].iter().zip(&pyr.coords[l]) {
                assert_eq!(pyr.coords[l - 1][i], *p);
            }
        }
    }

    #[test]
    fn rejects_small_or_odd_inputs() {
        let cfg = toy_config();
        assert!(cfg.check_input(60).is_err());
        assert!(cfg.check_input(8).is_err());
        assert!(cfg.check_input(16).is_ok());
    }

    #[test]
    fn coincident_points_share_one_edge_feature() {
        let mut store = ParamStore::new();
        let ec = EdgeConv::new(&mut store, "ec", 3, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let pts = vec![[0.5, -0.25, 1.0]; 6];
        let graph = knn_coords(&pts, 3).unwrap();
        let mut tape = Tape::new(&store);
        let f = coords_var(&mut tape, &pts);
        let out = ec.forward(&mut tape, f, &graph).unwrap();
        let wc = &store.get(ec.center).tensor;
        let expect: Vec<f64> = (0..5)
            .map(|o| (0..3).map(|i| pts[0][i] * wc.data()[i * 5 + o]).sum::<f64>().max(0.0))
            .collect();
        for row in tape.value(out).chunks(5) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
