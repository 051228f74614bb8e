//! The learnable pairwise mapping: two independent PointNet encoders, an MLP
//! that predicts per-pair transformation parameters, and a stack of
//! scale/bias + fully-connected deformation modules conditioned on them.
//!
//! Weights are immutable during inference; [`Model::map`] may be called
//! concurrently from multiple threads over one shared model. Training mutates
//! parameters under a single-writer contract.

use crate::autodiff::{AutodiffError, NodeId, Real, Shape, Tape, Tensor};
use crate::pointcloud::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Architecture hyperparameters. The defaults are the fixed architecture used
/// throughout; smaller widths exist for fast gradient checking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Per-point MLP widths of each encoder (input is 3).
    pub encoder_widths: Vec<usize>,
    /// Hidden width of the parameter-prediction MLP.
    pub predictor_hidden: usize,
    /// Feature width of the deformation modules.
    pub deform_width: usize,
    /// Number of deformation modules (K).
    pub deform_modules: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_widths: vec![64, 128, 512],
            predictor_hidden: 512,
            deform_width: 64,
            deform_modules: 7,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference checks.
    pub fn toy(width: usize) -> Self {
        ModelConfig {
            encoder_widths: vec![width, width],
            predictor_hidden: width,
            deform_width: width,
            deform_modules: 3,
        }
    }

    /// Shape-encoding dimension (output of each encoder).
    pub fn latent_dim(&self) -> usize {
        *self.encoder_widths.last().expect("at least one encoder layer")
    }

    /// Flattened length of the per-pair predicted parameters: scale and bias
    /// in R^3 for the first module, R^width for the rest.
    pub fn pair_param_len(&self) -> usize {
        2 * 3 + (self.deform_modules - 1) * 2 * self.deform_width
    }

    /// Offset of module `k`'s (scale, bias) pair in the flattened parameter
    /// vector, along with its dimension.
    fn param_slot(&self, k: usize) -> (usize, usize) {
        if k == 0 {
            (0, 3)
        } else {
            (2 * 3 + (k - 1) * 2 * self.deform_width, self.deform_width)
        }
    }

    /// Flat integer descriptor of the layer sizes, stored in checkpoints.
    pub fn arch_descriptor(&self) -> Vec<u32> {
        let mut out = vec![self.encoder_widths.len() as u32];
        out.extend(self.encoder_widths.iter().map(|&w| w as u32));
        out.push(self.predictor_hidden as u32);
        out.push(self.deform_width as u32);
        out.push(self.deform_modules as u32);
        out
    }

    pub fn from_descriptor(desc: &[u32]) -> Option<Self> {
        let n = *desc.first()? as usize;
        if desc.len() != n + 4 || n == 0 {
            return None;
        }
        let encoder_widths: Vec<usize> = desc[1..=n].iter().map(|&w| w as usize).collect();
        let cfg = ModelConfig {
            encoder_widths,
            predictor_hidden: desc[n + 1] as usize,
            deform_width: desc[n + 2] as usize,
            deform_modules: desc[n + 3] as usize,
        };
        if cfg.deform_modules < 2 || cfg.deform_width == 0 || cfg.predictor_hidden == 0 {
            return None;
        }
        Some(cfg)
    }

    fn validate(&self) {
        assert!(!self.encoder_widths.is_empty(), "encoder needs layers");
        assert!(self.deform_modules >= 2, "deformation stack needs >= 2 modules");
        assert!(self.deform_width > 0 && self.predictor_hidden > 0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Per-point MLP weights of one PointNet encoder.
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

/// Weights of the pair-parameter prediction MLP (one hidden layer).
#[derive(Clone, Debug)]
pub struct PredictorParams<T> {
    pub hidden: LayerParams<T>,
    pub out: LayerParams<T>,
}

/// The K shared fully-connected matrices of the deformation network. Biases
/// come from the predicted per-pair parameters.
#[derive(Clone, Debug)]
pub struct DeformLayers<T> {
    pub mats: Vec<Tensor<T>>,
}

/// Which encoder a cloud goes through: slot A encodes mapping sources, slot B
/// encodes mapping targets. The two hold independent weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderSlot {
    Source,
    Target,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder_a: EncoderParams<T>,
    pub encoder_b: EncoderParams<T>,
    pub predictor: PredictorParams<T>,
    pub deform: DeformLayers<T>,
}

fn glorot<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(Shape::Matrix(rows, cols), data).expect("sized by construction")
}

impl<T: Real> Model<T> {
    /// Fan-balanced uniform init for all matrices, zero biases, from a seeded
    /// generator. The same seed yields the same weights (up to precision).
    pub fn init(config: ModelConfig, seed: u64) -> Model<T> {
        config.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make_encoder = |rng: &mut ChaCha8Rng| {
            let mut layers = Vec::new();
            let mut d_in = 3;
            for &d_out in &config.encoder_widths {
                layers.push(LayerParams {
                    w: glorot(rng, d_out, d_in),
                    b: Tensor::zeros(Shape::Vector(d_out)),
                });
                d_in = d_out;
            }
            EncoderParams { layers }
        };
        let encoder_a = make_encoder(&mut rng);
        let encoder_b = make_encoder(&mut rng);

        let concat_dim = 2 * config.latent_dim();
        let predictor = PredictorParams {
            hidden: LayerParams {
                w: glorot(&mut rng, config.predictor_hidden, concat_dim),
                b: Tensor::zeros(Shape::Vector(config.predictor_hidden)),
            },
            out: LayerParams {
                w: glorot(&mut rng, config.pair_param_len(), config.predictor_hidden),
                b: Tensor::zeros(Shape::Vector(config.pair_param_len())),
            },
        };

        let k = config.deform_modules;
        let w = config.deform_width;
        let mut mats = Vec::with_capacity(k);
        for i in 0..k {
            let (rows, cols) = if i == 0 {
                (w, 3)
            } else if i == k - 1 {
                (3, w)
            } else {
                (w, w)
            };
            mats.push(glorot(&mut rng, rows, cols));
        }

        Model {
            config,
            encoder_a,
            encoder_b,
            predictor,
            deform: DeformLayers { mats },
        }
    }

    /// All parameter tensors in canonical (checkpoint) order: encoder A
    /// layers (w, b interleaved), encoder B, predictor hidden then out, then
    /// the deformation matrices.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for enc in [&self.encoder_a, &self.encoder_b] {
            for layer in &enc.layers {
                out.push(&layer.w);
                out.push(&layer.b);
            }
        }
        out.push(&self.predictor.hidden.w);
        out.push(&self.predictor.hidden.b);
        out.push(&self.predictor.out.w);
        out.push(&self.predictor.out.b);
        for m in &self.deform.mats {
            out.push(m);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for enc in [&mut self.encoder_a, &mut self.encoder_b] {
            for layer in &mut enc.layers {
                out.push(&mut layer.w);
                out.push(&mut layer.b);
            }
        }
        out.push(&mut self.predictor.hidden.w);
        out.push(&mut self.predictor.hidden.b);
        out.push(&mut self.predictor.out.w);
        out.push(&mut self.predictor.out.b);
        for m in &mut self.deform.mats {
            out.push(m);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            encoder_a: EncoderParams {
                layers: self
                    .encoder_a
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        w: l.w.cast(),
                        b: l.b.cast(),
                    })
                    .collect(),
            },
            encoder_b: EncoderParams {
                layers: self
                    .encoder_b
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        w: l.w.cast(),
                        b: l.b.cast(),
                    })
                    .collect(),
            },
            predictor: PredictorParams {
                hidden: LayerParams {
                    w: self.predictor.hidden.w.cast(),
                    b: self.predictor.hidden.b.cast(),
                },
                out: LayerParams {
                    w: self.predictor.out.w.cast(),
                    b: self.predictor.out.b.cast(),
                },
            },
            deform: DeformLayers {
                mats: self.deform.mats.iter().map(|m| m.cast()).collect(),
            },
        }
    }

    /// Shape encoding through the chosen encoder slot (off-tape convenience).
    pub fn encode(&self, slot: EncoderSlot, cloud: &PointCloud) -> Result<Tensor<T>, AutodiffError> {
        let mut tape = Tape::new();
        let nodes = ModelNodes::register(&mut tape, self)?;
        let id = nodes.encode(&mut tape, slot, cloud)?;
        Ok(tape.value(id).clone())
    }

    /// Full pairwise map `f_{source,target}` applied to the source points.
    /// Point `i` of the output corresponds to point `i` of the source.
    pub fn map(&self, source: &PointCloud, target: &PointCloud) -> Result<PointCloud, AutodiffError> {
        let mut tape = Tape::new();
        let mut deformer = ModelDeformer::on_tape(&mut tape, self, &[source, target])?;
        let input = tape.constant(Tensor::from_points(&source.to_arrays()))?;
        let out = deformer.deform(
            &mut tape,
            input,
            &[PairSegment {
                source_slot: 0,
                target_slot: 1,
                start: 0,
                len: source.len(),
            }],
        )?;
        let pts = tape
            .value(out)
            .data()
            .chunks(3)
            .map(|r| crate::pointcloud::Point3::new(r[0].to_f64(), r[1].to_f64(), r[2].to_f64()))
            .collect();
        PointCloud::new(pts).map_err(|_| AutodiffError::NonFiniteValue { context: "map output" })
    }
}

/// Tape node ids of every model parameter, in the model's canonical order.
pub struct ModelNodes {
    pub encoder_a: Vec<(NodeId, NodeId)>,
    pub encoder_b: Vec<(NodeId, NodeId)>,
    pub predictor_hidden: (NodeId, NodeId),
    pub predictor_out: (NodeId, NodeId),
    pub deform: Vec<NodeId>,
    config: ModelConfig,
}

impl ModelNodes {
    /// Registers all parameters as differentiable tape inputs.
    pub fn register<T: Real>(tape: &mut Tape<T>, model: &Model<T>) -> Result<ModelNodes, AutodiffError> {
        let reg_enc = |tape: &mut Tape<T>, enc: &EncoderParams<T>| -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
            enc.layers
                .iter()
                .map(|l| Ok((tape.var(l.w.clone())?, tape.var(l.b.clone())?)))
                .collect()
        };
        let encoder_a = reg_enc(tape, &model.encoder_a)?;
        let encoder_b = reg_enc(tape, &model.encoder_b)?;
        let predictor_hidden = (
            tape.var(model.predictor.hidden.w.clone())?,
            tape.var(model.predictor.hidden.b.clone())?,
        );
        let predictor_out = (
            tape.var(model.predictor.out.w.clone())?,
            tape.var(model.predictor.out.b.clone())?,
        );
        let deform = model
            .deform
            .mats
            .iter()
            .map(|m| tape.var(m.clone()))
            .collect::<Result<_, _>>()?;
        Ok(ModelNodes {
            encoder_a,
            encoder_b,
            predictor_hidden,
            predictor_out,
            deform,
            config: model.config.clone(),
        })
    }

    /// Rebuilds the node map from already-registered parameter nodes given in
    /// canonical order (the inverse of [`ModelNodes::flat`]).
    pub fn from_flat(config: &ModelConfig, ids: &[NodeId]) -> ModelNodes {
        let mut cursor = 0usize;
        let mut take_pairs = |count: usize| {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                out.push((ids[cursor], ids[cursor + 1]));
                cursor += 2;
            }
            out
        };
        let n_layers = config.encoder_widths.len();
        let encoder_a = take_pairs(n_layers);
        let encoder_b = take_pairs(n_layers);
        let predictor_hidden = (ids[cursor], ids[cursor + 1]);
        let predictor_out = (ids[cursor + 2], ids[cursor + 3]);
        cursor += 4;
        let deform = ids[cursor..cursor + config.deform_modules].to_vec();
        ModelNodes {
            encoder_a,
            encoder_b,
            predictor_hidden,
            predictor_out,
            deform,
            config: config.clone(),
        }
    }

    /// Node ids in the same canonical order as [`Model::params`].
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for enc in [&self.encoder_a, &self.encoder_b] {
            for (w, b) in enc {
                out.push(*w);
                out.push(*b);
            }
        }
        out.push(self.predictor_hidden.0);
        out.push(self.predictor_hidden.1);
        out.push(self.predictor_out.0);
        out.push(self.predictor_out.1);
        out.extend(self.deform.iter().copied());
        out
    }

    /// Per-point MLP with ReLU between layers, then max pooling over points.
    /// Exactly permutation-invariant in the point order.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        slot: EncoderSlot,
        cloud: &PointCloud,
    ) -> Result<NodeId, AutodiffError> {
        let layers = match slot {
            EncoderSlot::Source => &self.encoder_a,
            EncoderSlot::Target => &self.encoder_b,
        };
        let mut x = tape.constant(Tensor::from_points(&cloud.to_arrays()))?;
        for (i, (w, b)) in layers.iter().enumerate() {
            if i + 1 == layers.len() {
                return tape.linear_max_pool(x, *w, Some(*b));
            }
            let lin = tape.linear(x, *w, Some(*b))?;
            x = tape.relu(lin)?;
        }
        unreachable!("encoder has at least one layer")
    }

    /// Predicts the flattened per-pair parameter vector from two encodings
    /// and slices it into per-module (scale, bias) pairs.
    pub fn predict_pair_params<T: Real>(
        &self,
        tape: &mut Tape<T>,
        v_source: NodeId,
        v_target: NodeId,
    ) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
        let joint = tape.concat(v_source, v_target)?;
        let hidden = tape.linear(joint, self.predictor_hidden.0, Some(self.predictor_hidden.1))?;
        let hidden = tape.relu(hidden)?;
        let flat = tape.linear(hidden, self.predictor_out.0, Some(self.predictor_out.1))?;
        let mut out = Vec::with_capacity(self.config.deform_modules);
        for k in 0..self.config.deform_modules {
            let (offset, dim) = self.config.param_slot(k);
            let s = tape.slice(flat, offset, dim)?;
            let b = tape.slice(flat, offset + dim, dim)?;
            out.push((s, b));
        }
        Ok(out)
    }
}

/// One row range of a stacked deformation pass, mapped with the parameters
/// predicted for `(source_slot, target_slot)`.
#[derive(Clone, Copy, Debug)]
pub struct PairSegment {
    pub source_slot: usize,
    pub target_slot: usize,
    pub start: usize,
    pub len: usize,
}

/// Applies pairwise deformations on a tape. The loss layer drives this; the
/// identity implementation exists so losses can be exercised without a model.
pub trait Deformer<T: Real> {
    /// Deforms `input` (stacked rows, one range per segment), applying the
    /// mapping for each segment's (source, target) pair to its rows.
    fn deform(
        &mut self,
        tape: &mut Tape<T>,
        input: NodeId,
        segments: &[PairSegment],
    ) -> Result<NodeId, AutodiffError>;
}

/// Maps every point to itself.
pub struct IdentityDeformer;

impl<T: Real> Deformer<T> for IdentityDeformer {
    fn deform(
        &mut self,
        _tape: &mut Tape<T>,
        input: NodeId,
        _segments: &[PairSegment],
    ) -> Result<NodeId, AutodiffError> {
        Ok(input)
    }
}

/// Model-backed deformer over a fixed slot list of clouds. Encodings and
/// per-pair predicted parameters are computed lazily and cached, so repeated
/// pairs across loss terms share one prediction on the same tape.
pub struct ModelDeformer<'a, T: Real> {
    nodes: ModelNodes,
    clouds: Vec<&'a PointCloud>,
    enc_source: Vec<Option<NodeId>>,
    enc_target: Vec<Option<NodeId>>,
    pair_params: HashMap<(usize, usize), Vec<(NodeId, NodeId)>>,
    _precision: std::marker::PhantomData<T>,
}

impl<'a, T: Real> ModelDeformer<'a, T> {
    pub fn on_tape(
        tape: &mut Tape<T>,
        model: &Model<T>,
        clouds: &[&'a PointCloud],
    ) -> Result<Self, AutodiffError> {
        let nodes = ModelNodes::register(tape, model)?;
        Ok(Self::with_nodes(nodes, clouds))
    }

    /// Builds over parameter nodes the caller already registered (canonical
    /// order). Used where the parameter vars must be shared with other
    /// machinery, e.g. the gradient checker.
    pub fn from_param_nodes(
        _tape: &mut Tape<T>,
        config: &ModelConfig,
        param_ids: &[NodeId],
        clouds: &[&'a PointCloud],
    ) -> Result<Self, AutodiffError> {
        Ok(Self::with_nodes(ModelNodes::from_flat(config, param_ids), clouds))
    }

    fn with_nodes(nodes: ModelNodes, clouds: &[&'a PointCloud]) -> Self {
        ModelDeformer {
            nodes,
            clouds: clouds.to_vec(),
            enc_source: vec![None; clouds.len()],
            enc_target: vec![None; clouds.len()],
            pair_params: HashMap::new(),
            _precision: std::marker::PhantomData,
        }
    }

    pub fn nodes(&self) -> &ModelNodes {
        &self.nodes
    }

    pub fn encoding(
        &mut self,
        tape: &mut Tape<T>,
        slot: usize,
        role: EncoderSlot,
    ) -> Result<NodeId, AutodiffError> {
        let cache = match role {
            EncoderSlot::Source => &mut self.enc_source,
            EncoderSlot::Target => &mut self.enc_target,
        };
        if let Some(id) = cache[slot] {
            return Ok(id);
        }
        let id = self.nodes.encode(tape, role, self.clouds[slot])?;
        match role {
            EncoderSlot::Source => self.enc_source[slot] = Some(id),
            EncoderSlot::Target => self.enc_target[slot] = Some(id),
        }
        Ok(id)
    }

    fn pair(
        &mut self,
        tape: &mut Tape<T>,
        source_slot: usize,
        target_slot: usize,
    ) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
        if let Some(p) = self.pair_params.get(&(source_slot, target_slot)) {
            return Ok(p.clone());
        }
        let v_s = self.encoding(tape, source_slot, EncoderSlot::Source)?;
        let v_t = self.encoding(tape, target_slot, EncoderSlot::Target)?;
        let params = self.nodes.predict_pair_params(tape, v_s, v_t)?;
        self.pair_params
            .insert((source_slot, target_slot), params.clone());
        Ok(params)
    }
}

impl<'a, T: Real> Deformer<T> for ModelDeformer<'a, T> {
    fn deform(
        &mut self,
        tape: &mut Tape<T>,
        input: NodeId,
        segments: &[PairSegment],
    ) -> Result<NodeId, AutodiffError> {
        let k_modules = self.nodes.config.deform_modules;
        let mut per_seg_params = Vec::with_capacity(segments.len());
        for seg in segments {
            per_seg_params.push(self.pair(tape, seg.source_slot, seg.target_slot)?);
        }
        let mut x = input;
        for k in 0..k_modules {
            let segs = segments
                .iter()
                .zip(&per_seg_params)
                .map(|(seg, params)| {
                    let (s, b) = params[k];
                    (seg.start, seg.len, s, b)
                })
                .collect();
            let affine = tape.segmented_affine(x, segs)?;
            let lin = tape.linear(affine, self.nodes.deform[k], None)?;
            x = if k + 1 == k_modules {
                tape.tanh_act(lin)?
            } else {
                tape.relu(lin)?
            };
        }
        Ok(x)
    }
}
