//! Transformer set predictor for angle-of-arrival estimation.
//!
//! Each array element is a token. The real and imaginary parts of its
//! sample are projected to the embedding width; its position (in carrier
//! wavelengths) is projected into a positional encoding that is added to
//! attention queries and keys in every block. Pre-LN encoder blocks run
//! self-attention over elements. Decoder blocks let M learned query slots
//! (content plus query position) cross-attend the encoded elements, and
//! three two-layer heads map every slot to a bounded angle, a bounded
//! magnitude and a detection confidence.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::ArrayGeometry;
use crate::detection::{Detection, DetectionSet};
use crate::error::{AoaError, Result};
use crate::matching::DetectionGrad;
use crate::nn::{sigmoid, Attention, AttnCache, LayerNorm, Linear, LnCache, Mat, Mlp, MlpCache};

/// How element positions become positional encodings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PositionEncoding {
    /// One affine map `R³ → R^D`.
    Linear,
    /// Learnable Fourier features: `W₂·sin(W₁·p + b₁) + b₂`, with `W₁`
    /// drawn from `N(0, frequency_scale²)` radians per wavelength.
    Fourier { frequency_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub num_queries: usize,
    pub attention_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub mag_min_db: f64,
    pub mag_max_db: f64,
    pub position_encoding: PositionEncoding,
    /// Also add the positional encoding to the element embeddings once at
    /// the encoder input.
    pub positions_in_input: bool,
    /// Self-attention among query slots before cross-attention in each
    /// decoder block.
    pub decoder_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 16-element desk-scale model: D = 32, 2 + 2 blocks, 16 queries.
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            encoder_blocks: 2,
            decoder_blocks: 2,
            num_queries: 16,
            attention_heads: 8,
            ffn_hidden: 128,
            dropout: 0.0,
            theta_min_deg: -60.0,
            theta_max_deg: 60.0,
            mag_min_db: -15.0,
            mag_max_db: 2.0,
            position_encoding: PositionEncoding::Linear,
            positions_in_input: false,
            decoder_self_attention: false,
        }
    }

    /// Published scale: D = 128, 6 + 6 blocks, 80 queries. The feed-forward
    /// width is 2·D here; that gives about 1.66M parameters, where 4·D
    /// would give about 2.45M.
    pub fn published() -> Self {
        Self {
            embed_dim: 128,
            encoder_blocks: 6,
            decoder_blocks: 6,
            num_queries: 80,
            attention_heads: 8,
            ffn_hidden: 256,
            ..Self::desk()
        }
    }

    /// Smallest useful model, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            num_queries: 4,
            attention_heads: 2,
            ffn_hidden: 32,
            ..Self::desk()
        }
    }

    pub fn angle_span(&self) -> f64 {
        self.theta_max_deg - self.theta_min_deg
    }

    pub fn mag_span(&self) -> f64 {
        self.mag_max_db - self.mag_min_db
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(AoaError::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("model.embed_dim", self.embed_dim)?;
        positive("model.num_queries", self.num_queries)?;
        positive("model.attention_heads", self.attention_heads)?;
        positive("model.ffn_hidden", self.ffn_hidden)?;
        if self.embed_dim % self.attention_heads != 0 {
            return Err(AoaError::config(
                "model.attention_heads",
                format!("must divide embed_dim {}", self.embed_dim),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AoaError::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.theta_max_deg > self.theta_min_deg) {
            return Err(AoaError::config("model.theta_min_deg", "must be below theta_max_deg"));
        }
        if !(self.mag_max_db > self.mag_min_db) {
            return Err(AoaError::config("model.mag_min_db", "must be below mag_max_db"));
        }
        if let PositionEncoding::Fourier { frequency_scale } = self.position_encoding {
            if !(frequency_scale > 0.0 && frequency_scale.is_finite()) {
                return Err(AoaError::config(
                    "model.position_encoding.frequency_scale",
                    "must be positive",
                ));
            }
        }
        Ok(())
    }
}

/// Name, shape and offset of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    FanIn(usize),
    Zero,
    One,
    Normal(f64),
    UniformPhase,
}

#[derive(Debug, Clone, Copy)]
enum PosLayers {
    Linear(Linear),
    Fourier { features: Linear, proj: Linear },
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    self_attn: Option<(LayerNorm, Attention)>,
    ln1: LayerNorm,
    cross: Attention,
    ln2: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    pos: PosLayers,
    encoder: Vec<EncoderBlock>,
    encoder_ln: LayerNorm,
    decoder: Vec<DecoderBlock>,
    decoder_ln: LayerNorm,
    query: usize,
    query_pos: usize,
    angle_head: Mlp,
    mag_head: Mlp,
    conf_head: Mlp,
    specs: Vec<TensorSpec>,
    inits: Vec<Init>,
    total: usize,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        self.total += shape.iter().product::<usize>();
        self.specs.push(TensorSpec { name, shape, offset });
        self.inits.push(init);
        offset
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let w = self.tensor(format!("{name}.weight"), vec![d_in, d_out], Init::FanIn(d_in));
        let b = self.tensor(format!("{name}.bias"), vec![d_out], Init::Zero);
        Linear { w, b, d_in, d_out }
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        let gain = self.tensor(format!("{name}.gain"), vec![dim], Init::One);
        let bias = self.tensor(format!("{name}.bias"), vec![dim], Init::Zero);
        LayerNorm { gain, bias, dim }
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.query"), d, d),
            k: self.linear(&format!("{name}.key"), d, d),
            v: self.linear(&format!("{name}.value"), d, d),
            o: self.linear(&format!("{name}.out"), d, d),
            heads,
        }
    }

    fn mlp(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.fc1"), d_in, hidden),
            l2: self.linear(&format!("{name}.fc2"), hidden, d_out),
        }
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let d = c.embed_dim;
        let mut b = LayoutBuilder {
            specs: Vec::new(),
            inits: Vec::new(),
            total: 0,
        };
        let input = b.linear("input_proj", 2, d);
        let pos = match c.position_encoding {
            PositionEncoding::Linear => PosLayers::Linear(b.linear("position_proj", 3, d)),
            PositionEncoding::Fourier { frequency_scale } => {
                let w = b.tensor(
                    "position_features.weight".into(),
                    vec![3, d],
                    Init::Normal(frequency_scale),
                );
                let bias = b.tensor("position_features.bias".into(), vec![d], Init::UniformPhase);
                let features = Linear { w, b: bias, d_in: 3, d_out: d };
                PosLayers::Fourier {
                    features,
                    proj: b.linear("position_proj", d, d),
                }
            }
        };
        let encoder = (0..c.encoder_blocks)
            .map(|i| EncoderBlock {
                ln1: b.layer_norm(&format!("encoder.{i}.ln1"), d),
                attn: b.attention(&format!("encoder.{i}.self_attn"), d, c.attention_heads),
                ln2: b.layer_norm(&format!("encoder.{i}.ln2"), d),
                ffn: b.mlp(&format!("encoder.{i}.ffn"), d, c.ffn_hidden, d),
            })
            .collect();
        let encoder_ln = b.layer_norm("encoder.norm", d);
        let decoder = (0..c.decoder_blocks)
            .map(|i| DecoderBlock {
                self_attn: c.decoder_self_attention.then(|| {
                    (
                        b.layer_norm(&format!("decoder.{i}.ln0"), d),
                        b.attention(&format!("decoder.{i}.self_attn"), d, c.attention_heads),
                    )
                }),
                ln1: b.layer_norm(&format!("decoder.{i}.ln1"), d),
                cross: b.attention(&format!("decoder.{i}.cross_attn"), d, c.attention_heads),
                ln2: b.layer_norm(&format!("decoder.{i}.ln2"), d),
                ffn: b.mlp(&format!("decoder.{i}.ffn"), d, c.ffn_hidden, d),
            })
            .collect();
        let decoder_ln = b.layer_norm("decoder.norm", d);
        let query = b.tensor("query.content".into(), vec![c.num_queries, d], Init::Normal(1.0));
        let query_pos = b.tensor("query.position".into(), vec![c.num_queries, d], Init::Normal(1.0));
        let angle_head = b.mlp("head.angle", d, d, 1);
        let mag_head = b.mlp("head.magnitude", d, d, 1);
        let conf_head = b.mlp("head.confidence", d, d, 1);
        Layout {
            input,
            pos,
            encoder,
            encoder_ln,
            decoder,
            decoder_ln,
            query,
            query_pos,
            angle_head,
            mag_head,
            conf_head,
            specs: b.specs,
            inits: b.inits,
            total: b.total,
        }
    }
}

/// Model configuration plus its flat parameter vector.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for ModelWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Seeded initialization: fan-in uniform projections, unit LN gains, zero
/// biases, standard normal queries and query positions.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.total];
    for (spec, init) in layout.specs.iter().zip(&layout.inits) {
        let slot = &mut params[spec.offset..spec.offset + spec.len()];
        match *init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            }
            Init::Zero => {}
            Init::One => slot.iter_mut().for_each(|v| *v = 1.0),
            Init::Normal(sd) => slot.iter_mut().for_each(|v| {
                let z: f64 = rng.sample(StandardNormal);
                *v = sd * z;
            }),
            Init::UniformPhase => {
                let pi = std::f64::consts::PI;
                slot.iter_mut().for_each(|v| *v = rng.random_range(-pi..pi));
            }
        }
    }
    Ok(ModelWeights {
        config: config.clone(),
        layout,
        params,
    })
}

/// Raw per-slot outputs for a batch, row `b·M + m`.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub batch: usize,
    pub queries: usize,
    pub angle_deg: Vec<f64>,
    pub magnitude_db: Vec<f64>,
    pub confidence: Vec<f64>,
    angle_sig: Vec<f64>,
    mag_sig: Vec<f64>,
    conf_sig: Vec<f64>,
}

impl BatchOutput {
    pub fn detections(&self, b: usize) -> DetectionSet {
        let m = self.queries;
        DetectionSet::new(
            (b * m..(b + 1) * m)
                .map(|i| Detection {
                    angle_deg: self.angle_deg[i],
                    magnitude_db: self.magnitude_db[i],
                    confidence: self.confidence[i],
                })
                .collect(),
        )
    }

    pub fn all_detections(&self) -> Vec<DetectionSet> {
        (0..self.batch).map(|b| self.detections(b)).collect()
    }
}

const CONF_FLOOR: f64 = 1e-15;

struct EncCache {
    ln1: LnCache,
    attn: AttnCache,
    attn_mask: Option<Vec<f64>>,
    ln2: LnCache,
    ffn: MlpCache,
    ffn_mask: Option<Vec<f64>>,
}

struct DecCache {
    self_attn: Option<(LnCache, AttnCache, Option<Vec<f64>>)>,
    ln1: LnCache,
    cross: AttnCache,
    cross_mask: Option<Vec<f64>>,
    ln2: LnCache,
    ffn: MlpCache,
    ffn_mask: Option<Vec<f64>>,
}

enum PosCache {
    Linear,
    Fourier { pre: Mat, feat: Mat },
}

/// Everything the backward pass needs from one batched forward.
pub struct ForwardCache {
    batch: usize,
    elements: usize,
    tokens: Mat,
    pos_in: Mat,
    pos_cache: PosCache,
    encoder: Vec<EncCache>,
    encoder_ln: LnCache,
    decoder: Vec<DecCache>,
    decoder_ln: LnCache,
    heads: [MlpCache; 3],
}

/// Inverted-dropout mask source for training.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        Some(
            (0..len)
                .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
                .collect(),
        )
    }
}

fn apply_mask(x: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.data.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

fn finite_or(layer: impl FnOnce() -> String, x: &Mat) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(AoaError::NonFinite { layer: layer() })
    }
}

/// Snapshot tokens `[Re y_k, Im y_k]` stacked for a batch.
pub fn snapshot_tokens<S: AsRef<[Complex64]>>(snapshots: &[S]) -> Mat {
    let k = snapshots.first().map_or(0, |s| s.as_ref().len());
    let mut data = Vec::with_capacity(snapshots.len() * k * 2);
    for s in snapshots {
        for v in s.as_ref() {
            data.push(v.re);
            data.push(v.im);
        }
    }
    Mat::from_vec(snapshots.len() * k, 2, data)
}

/// Element positions in wavelengths as a `K × 3` matrix.
pub fn position_tokens(geometry: &ArrayGeometry) -> Mat {
    let p = geometry.positions_in_wavelengths();
    Mat::from_vec(p.len(), 3, p.into_iter().flatten().collect())
}

/// Samples per internal forward chunk during inference.
const INFERENCE_CHUNK: usize = 64;

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    /// Rebuilds weights from a configuration and a full parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(AoaError::Dimension {
                context: "model parameter vector",
                expected: layout.total,
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(AoaError::Checkpoint("parameters contain non-finite values".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    fn check_snapshot(&self, geometry: &ArrayGeometry, snapshot: &[Complex64]) -> Result<()> {
        if snapshot.len() != geometry.element_count() {
            return Err(AoaError::Dimension {
                context: "snapshot vs geometry",
                expected: geometry.element_count(),
                got: snapshot.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, geometry: &ArrayGeometry, snapshot: &[Complex64]) -> Result<DetectionSet> {
        self.check_snapshot(geometry, snapshot)?;
        let (out, _) = self.forward_tokens(&position_tokens(geometry), &snapshot_tokens(&[snapshot]), 1, None)?;
        Ok(out.detections(0))
    }

    /// Same result as calling [`ModelWeights::forward`] per snapshot;
    /// processed in fixed-size chunks, in parallel across chunks.
    pub fn forward_batch<S: AsRef<[Complex64]> + Sync>(
        &self,
        geometry: &ArrayGeometry,
        snapshots: &[S],
    ) -> Result<Vec<DetectionSet>> {
        for s in snapshots {
            self.check_snapshot(geometry, s.as_ref())?;
        }
        let pos = position_tokens(geometry);
        let chunks: Result<Vec<Vec<DetectionSet>>> = snapshots
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let (out, _) = self.forward_tokens(&pos, &snapshot_tokens(chunk), chunk.len(), None)?;
                Ok(out.all_detections())
            })
            .collect();
        Ok(chunks?.into_iter().flatten().collect())
    }

    fn positional(&self, pos_in: &Mat) -> (Mat, PosCache) {
        let p = &self.params;
        match self.layout.pos {
            PosLayers::Linear(l) => (l.forward(p, pos_in), PosCache::Linear),
            PosLayers::Fourier { features, proj } => {
                let pre = features.forward(p, pos_in);
                let feat = Mat::from_vec(pre.rows, pre.cols, pre.data.iter().map(|v| v.sin()).collect());
                (proj.forward(p, &feat), PosCache::Fourier { pre, feat })
            }
        }
    }

    /// Batched forward from prepared tokens: `pos_in` is `K × 3`, `tokens`
    /// is `(batch·K) × 2`.
    pub fn forward_tokens(
        &self,
        pos_in: &Mat,
        tokens: &Mat,
        batch: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(BatchOutput, ForwardCache)> {
        let c = &self.config;
        let p = &self.params;
        let l = &self.layout;
        let k = pos_in.rows;
        let m = c.num_queries;
        let d = c.embed_dim;
        if tokens.rows != batch * k {
            return Err(AoaError::Dimension {
                context: "token rows",
                expected: batch * k,
                got: tokens.rows,
            });
        }
        let mut mask = |len: usize| dropout.as_deref_mut().and_then(|dr| dr.mask(len));

        let (pos, pos_cache) = self.positional(pos_in);
        let mut z = l.input.forward(p, tokens);
        if c.positions_in_input {
            z = z.add_tiled(&pos);
        }
        let mut enc_caches = Vec::with_capacity(l.encoder.len());
        for (i, blk) in l.encoder.iter().enumerate() {
            let (h, ln1) = blk.ln1.forward(p, &z);
            let qk = h.add_tiled(&pos);
            let (mut a, attn) = blk.attn.forward(p, &qk, &qk, &h, k, k);
            let attn_mask = mask(a.data.len());
            apply_mask(&mut a, &attn_mask);
            z.add_assign(&a);
            let (h2, ln2) = blk.ln2.forward(p, &z);
            let (mut f, ffn) = blk.ffn.forward(p, &h2);
            let ffn_mask = mask(f.data.len());
            apply_mask(&mut f, &ffn_mask);
            z.add_assign(&f);
            finite_or(|| format!("encoder.{i}"), &z)?;
            enc_caches.push(EncCache {
                ln1,
                attn,
                attn_mask,
                ln2,
                ffn,
                ffn_mask,
            });
        }
        let (mem, encoder_ln) = l.encoder_ln.forward(p, &z);
        let mem_k = mem.add_tiled(&pos);

        let query = Mat::from_vec(m, d, p[l.query..l.query + m * d].to_vec());
        let qpos = Mat::from_vec(m, d, p[l.query_pos..l.query_pos + m * d].to_vec());
        let mut t = query.tile(batch);
        let mut dec_caches = Vec::with_capacity(l.decoder.len());
        for (i, blk) in l.decoder.iter().enumerate() {
            let self_attn = match &blk.self_attn {
                Some((ln0, sa)) => {
                    let (h0, c0) = ln0.forward(p, &t);
                    let qk = h0.add_tiled(&qpos);
                    let (mut a, ca) = sa.forward(p, &qk, &qk, &h0, m, m);
                    let sm = mask(a.data.len());
                    apply_mask(&mut a, &sm);
                    t.add_assign(&a);
                    Some((c0, ca, sm))
                }
                None => None,
            };
            let (h, ln1) = blk.ln1.forward(p, &t);
            let q = h.add_tiled(&qpos);
            let (mut a, cross) = blk.cross.forward(p, &q, &mem_k, &mem, m, k);
            let cross_mask = mask(a.data.len());
            apply_mask(&mut a, &cross_mask);
            t.add_assign(&a);
            let (h2, ln2) = blk.ln2.forward(p, &t);
            let (mut f, ffn) = blk.ffn.forward(p, &h2);
            let ffn_mask = mask(f.data.len());
            apply_mask(&mut f, &ffn_mask);
            t.add_assign(&f);
            finite_or(|| format!("decoder.{i}"), &t)?;
            dec_caches.push(DecCache {
                self_attn,
                ln1,
                cross,
                cross_mask,
                ln2,
                ffn,
                ffn_mask,
            });
        }
        let (x, decoder_ln) = l.decoder_ln.forward(p, &t);
        let (ua, ca) = l.angle_head.forward(p, &x);
        let (um, cm) = l.mag_head.forward(p, &x);
        let (uc, cc) = l.conf_head.forward(p, &x);
        for (name, u) in [("head.angle", &ua), ("head.magnitude", &um), ("head.confidence", &uc)] {
            finite_or(|| name.to_string(), u)?;
        }
        let angle_sig: Vec<f64> = ua.data.iter().map(|&v| sigmoid(v)).collect();
        let mag_sig: Vec<f64> = um.data.iter().map(|&v| sigmoid(v)).collect();
        let conf_sig: Vec<f64> = uc.data.iter().map(|&v| sigmoid(v)).collect();
        let out = BatchOutput {
            batch,
            queries: m,
            angle_deg: angle_sig.iter().map(|s| c.theta_min_deg + c.angle_span() * s).collect(),
            magnitude_db: mag_sig.iter().map(|s| c.mag_min_db + c.mag_span() * s).collect(),
            confidence: conf_sig.iter().map(|s| s.clamp(CONF_FLOOR, 1.0 - CONF_FLOOR)).collect(),
            angle_sig,
            mag_sig,
            conf_sig,
        };
        let cache = ForwardCache {
            batch,
            elements: k,
            tokens: tokens.clone(),
            pos_in: pos_in.clone(),
            pos_cache,
            encoder: enc_caches,
            encoder_ln,
            decoder: dec_caches,
            decoder_ln,
            heads: [ca, cm, cc],
        };
        Ok((out, cache))
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given the loss gradient
    /// with respect to every output slot (row `b·M + m`).
    pub fn backward(
        &self,
        out: &BatchOutput,
        cache: &ForwardCache,
        d_out: &[DetectionGrad],
        grad: &mut [f64],
    ) {
        let c = &self.config;
        let p = &self.params;
        let l = &self.layout;
        let m = c.num_queries;
        let d = c.embed_dim;
        let k = cache.elements;
        let batch = cache.batch;
        debug_assert_eq!(d_out.len(), batch * m);
        debug_assert_eq!(grad.len(), p.len());

        let rows = batch * m;
        let mut dua = Mat::zeros(rows, 1);
        let mut dum = Mat::zeros(rows, 1);
        let mut duc = Mat::zeros(rows, 1);
        for (i, g) in d_out.iter().enumerate() {
            let (sa, sm, sc) = (out.angle_sig[i], out.mag_sig[i], out.conf_sig[i]);
            dua.data[i] = g.angle_deg * c.angle_span() * sa * (1.0 - sa);
            dum.data[i] = g.magnitude_db * c.mag_span() * sm * (1.0 - sm);
            duc.data[i] = g.confidence * sc * (1.0 - sc);
        }
        let mut dx = l.angle_head.backward(p, grad, &cache.heads[0], &dua);
        dx.add_assign(&l.mag_head.backward(p, grad, &cache.heads[1], &dum));
        dx.add_assign(&l.conf_head.backward(p, grad, &cache.heads[2], &duc));
        let mut dt = l.decoder_ln.backward(p, grad, &cache.decoder_ln, &dx);

        let mut dmem = Mat::zeros(batch * k, d);
        let mut dpos = Mat::zeros(k, d);
        let mut dqpos = Mat::zeros(m, d);
        for (blk, bc) in l.decoder.iter().zip(&cache.decoder).rev() {
            let mut df = dt.clone();
            apply_mask(&mut df, &bc.ffn_mask);
            let dh2 = blk.ffn.backward(p, grad, &bc.ffn, &df);
            dt.add_assign(&blk.ln2.backward(p, grad, &bc.ln2, &dh2));
            let mut da = dt.clone();
            apply_mask(&mut da, &bc.cross_mask);
            let (dq, dk, dv) = blk.cross.backward(p, grad, &bc.cross, &da);
            dqpos.add_assign(&dq.fold_tiled(m));
            dpos.add_assign(&dk.fold_tiled(k));
            dmem.add_assign(&dk);
            dmem.add_assign(&dv);
            dt.add_assign(&blk.ln1.backward(p, grad, &bc.ln1, &dq));
            if let (Some((ln0, sa)), Some((c0, ca, sm))) = (&blk.self_attn, &bc.self_attn) {
                let mut da = dt.clone();
                apply_mask(&mut da, sm);
                let (dq, dk, dv) = sa.backward(p, grad, ca, &da);
                let dqk = dq.added(&dk);
                dqpos.add_assign(&dqk.fold_tiled(m));
                let dh0 = dqk.added(&dv);
                dt.add_assign(&ln0.backward(p, grad, c0, &dh0));
            }
        }
        add_to(grad, l.query, &dt.fold_tiled(m).data);
        add_to(grad, l.query_pos, &dqpos.data);

        let mut dz = l.encoder_ln.backward(p, grad, &cache.encoder_ln, &dmem);
        for (blk, bc) in l.encoder.iter().zip(&cache.encoder).rev() {
            let mut df = dz.clone();
            apply_mask(&mut df, &bc.ffn_mask);
            let dh2 = blk.ffn.backward(p, grad, &bc.ffn, &df);
            dz.add_assign(&blk.ln2.backward(p, grad, &bc.ln2, &dh2));
            let mut da = dz.clone();
            apply_mask(&mut da, &bc.attn_mask);
            let (dq, dk, dv) = blk.attn.backward(p, grad, &bc.attn, &da);
            let dqk = dq.added(&dk);
            dpos.add_assign(&dqk.fold_tiled(k));
            let dh = dqk.added(&dv);
            dz.add_assign(&blk.ln1.backward(p, grad, &bc.ln1, &dh));
        }
        if c.positions_in_input {
            dpos.add_assign(&dz.fold_tiled(k));
        }
        l.input.backward_params(grad, &cache.tokens, &dz);
        match (&l.pos, &cache.pos_cache) {
            (PosLayers::Linear(lin), _) => lin.backward_params(grad, &cache.pos_in, &dpos),
            (PosLayers::Fourier { features, proj }, PosCache::Fourier { pre, feat }) => {
                let dfeat = proj.backward(p, grad, feat, &dpos);
                let dpre = Mat::from_vec(
                    pre.rows,
                    pre.cols,
                    pre.data.iter().zip(&dfeat.data).map(|(x, g)| x.cos() * g).collect(),
                );
                features.backward_params(grad, &cache.pos_in, &dpre);
            }
            (PosLayers::Fourier { .. }, PosCache::Linear) => unreachable!("cache built by this model"),
        }
    }
}

fn add_to(grad: &mut [f64], offset: usize, values: &[f64]) {
    for (g, v) in grad[offset..offset + values.len()].iter_mut().zip(values) {
        *g += v;
    }
}
