//! The sparse-keypoint pose regression network: an intrinsic-calibration
//! position encoder, stacked attention layers (self-attention plus
//! similarity-guided cross-attention), average pooling, and two MLP heads
//! regressing a 6-vector rotation encoding and a translation.

mod exec;
mod forward;

pub use forward::{
    encode_positions, forward, forward_on_tape, guided_cross_attention_block, lease_params,
    predict_pose, self_attention_block, similarity_matrix, Diagnostics, LayerOn, MlpOn, ParamsOn,
    SimilarityMatrix,
};

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Keypoint(#[from] crate::keypoints::KeypointError),
    #[error("valid descriptor row {row} has near-zero norm")]
    ZeroDescriptor { row: usize },
    #[error("descriptor width {got} does not match configured d={expected}")]
    DescriptorWidth { expected: usize, got: usize },
    #[error("checkpoint config mismatch:\n{}", diffs.join("\n"))]
    ConfigMismatch { diffs: Vec<String> },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint parse error at line {line}: {msg}")]
    CheckpointParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the similarity matrix is normalized into [0, 1] before it multiplies
/// the cross-attention logits. The cosine map already lands in [0, 1], so
/// `Clamp` is the default; `MinMax` rescales over the valid entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityNormalization {
    Clamp,
    MinMax,
}

impl std::fmt::Display for SimilarityNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimilarityNormalization::Clamp => write!(f, "clamp"),
            SimilarityNormalization::MinMax => write!(f, "minmax"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Descriptor and embedding width.
    pub d: usize,
    /// Number of attention layers (each: one self block + one cross block).
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Width of the per-token feed-forward sublayer after each cross block;
    /// 0 disables it.
    pub ffn_hidden: usize,
    pub guidance_enabled: bool,
    pub cross_attention_enabled: bool,
    pub position_encoding_enabled: bool,
    pub intrinsic_calibration_enabled: bool,
    pub similarity_normalization: SimilarityNormalization,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on a laptop.
    pub fn desk() -> Self {
        ModelConfig {
            d: 32,
            layers: 2,
            heads: 2,
            mlp_hidden: 32,
            ffn_hidden: 64,
            guidance_enabled: true,
            cross_attention_enabled: true,
            position_encoding_enabled: true,
            intrinsic_calibration_enabled: true,
            similarity_normalization: SimilarityNormalization::Clamp,
        }
    }

    /// Full-scale preset (6 layers, 4 heads, d = 256).
    pub fn paper() -> Self {
        ModelConfig {
            d: 256,
            layers: 6,
            heads: 4,
            mlp_hidden: 256,
            ffn_hidden: 512,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(ModelError::InvalidConfig("mlp_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($field:ident) => {
                if self.$field != other.$field {
                    out.push(format!(
                        "  {}: expected {:?}, checkpoint has {:?}",
                        stringify!($field),
                        self.$field,
                        other.$field
                    ));
                }
            };
        }
        cmp!(d);
        cmp!(layers);
        cmp!(heads);
        cmp!(mlp_hidden);
        cmp!(ffn_hidden);
        cmp!(guidance_enabled);
        cmp!(cross_attention_enabled);
        cmp!(position_encoding_enabled);
        cmp!(intrinsic_calibration_enabled);
        cmp!(similarity_normalization);
        out
    }
}

/// One attention layer: shared self-attention weights applied to both images
/// and shared cross-attention weights. When cross-attention is ablated the
/// cross slot holds a second self-attention projection (d -> 3d) instead of
/// the key/value projection (d -> 2d).
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub self_w: Tensor,
    pub self_b: Tensor,
    pub cross_w: Tensor,
    pub cross_b: Tensor,
    pub ffn: Option<FfnParams>,
}

/// Per-token feed-forward sublayer (two linear maps around a ReLU).
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Three-layer MLP head.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub pe_w: Tensor,
    pub pe_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub rot_head: MlpParams,
    pub trans_head: MlpParams,
}

fn fan_in_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

/// Extra gain on the key columns of the cross-attention projection at init.
/// Fan-in-scaled keys give near-zero logits, which leaves the softmax
/// uniform and the similarity gate inert for many epochs at desk scale; a
/// larger key scale lets matched descriptors stand out from step one.
const CROSS_KEY_INIT_GAIN: f64 = 8.0;

/// Extra gain on the position encoder weights at init. Calibrated
/// coordinates live in roughly [-0.6, 0.6]; without the gain the positional
/// content of a token is an order of magnitude below the descriptor content
/// and the translation head cannot resolve parallax.
const POSITION_INIT_GAIN: f64 = 4.0;

impl ModelParams {
    /// Fan-in-scaled uniform weights, zero biases, fixed draw order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::from_seed(seed);
        let d = config.d;
        let pe_w = crate::tensor::scale(&fan_in_uniform(&mut rng, 2, d), POSITION_INIT_GAIN);
        let pe_b = Tensor::zeros(1, d);
        let cross_out = if config.cross_attention_enabled {
            2 * d
        } else {
            3 * d
        };
        let layers = (0..config.layers)
            .map(|_| {
                let mut cross_w = fan_in_uniform(&mut rng, d, cross_out);
                if config.cross_attention_enabled {
                    for i in 0..d {
                        let row = cross_w.row_mut(i);
                        for v in row.iter_mut().take(d) {
                            *v *= CROSS_KEY_INIT_GAIN;
                        }
                    }
                }
                LayerParams {
                    self_w: fan_in_uniform(&mut rng, d, 3 * d),
                    self_b: Tensor::zeros(1, 3 * d),
                    cross_w,
                    cross_b: Tensor::zeros(1, cross_out),
                    ffn: (config.ffn_hidden > 0).then(|| FfnParams {
                        w1: fan_in_uniform(&mut rng, d, config.ffn_hidden),
                        b1: Tensor::zeros(1, config.ffn_hidden),
                        w2: fan_in_uniform(&mut rng, config.ffn_hidden, d),
                        b2: Tensor::zeros(1, d),
                    }),
                }
            })
            .collect();
        let mlp = |rng: &mut Rng, out: usize| MlpParams {
            w1: fan_in_uniform(rng, 2 * d, config.mlp_hidden),
            b1: Tensor::zeros(1, config.mlp_hidden),
            w2: fan_in_uniform(rng, config.mlp_hidden, config.mlp_hidden),
            b2: Tensor::zeros(1, config.mlp_hidden),
            w3: fan_in_uniform(rng, config.mlp_hidden, out),
            b3: Tensor::zeros(1, out),
        };
        let rot_head = mlp(&mut rng, 6);
        let trans_head = mlp(&mut rng, 3);
        Ok(ModelParams {
            pe_w,
            pe_b,
            layers,
            rot_head,
            trans_head,
        })
    }

    /// Named tensor view in a stable order (checkpoints, optimizer state).
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("pe.w".into(), self.pe_w.clone());
        out.insert("pe.b".into(), self.pe_b.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            out.insert(format!("layer{i}.self.w"), layer.self_w.clone());
            out.insert(format!("layer{i}.self.b"), layer.self_b.clone());
            out.insert(format!("layer{i}.cross.w"), layer.cross_w.clone());
            out.insert(format!("layer{i}.cross.b"), layer.cross_b.clone());
            if let Some(ffn) = &layer.ffn {
                out.insert(format!("layer{i}.ffn.w1"), ffn.w1.clone());
                out.insert(format!("layer{i}.ffn.b1"), ffn.b1.clone());
                out.insert(format!("layer{i}.ffn.w2"), ffn.w2.clone());
                out.insert(format!("layer{i}.ffn.b2"), ffn.b2.clone());
            }
        }
        for (head, name) in [(&self.rot_head, "rot"), (&self.trans_head, "trans")] {
            out.insert(format!("{name}.w1"), head.w1.clone());
            out.insert(format!("{name}.b1"), head.b1.clone());
            out.insert(format!("{name}.w2"), head.w2.clone());
            out.insert(format!("{name}.b2"), head.b2.clone());
            out.insert(format!("{name}.w3"), head.w3.clone());
            out.insert(format!("{name}.b3"), head.b3.clone());
        }
        out
    }

    pub fn from_named(
        config: &ModelConfig,
        named: &BTreeMap<String, Tensor>,
    ) -> Result<Self, ModelError> {
        let get = |name: &str| -> Result<Tensor, ModelError> {
            named
                .get(name)
                .cloned()
                .ok_or_else(|| ModelError::CheckpointParse {
                    line: 0,
                    msg: format!("missing tensor {name}"),
                })
        };
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            layers.push(LayerParams {
                self_w: get(&format!("layer{i}.self.w"))?,
                self_b: get(&format!("layer{i}.self.b"))?,
                cross_w: get(&format!("layer{i}.cross.w"))?,
                cross_b: get(&format!("layer{i}.cross.b"))?,
                ffn: if config.ffn_hidden > 0 {
                    Some(FfnParams {
                        w1: get(&format!("layer{i}.ffn.w1"))?,
                        b1: get(&format!("layer{i}.ffn.b1"))?,
                        w2: get(&format!("layer{i}.ffn.w2"))?,
                        b2: get(&format!("layer{i}.ffn.b2"))?,
                    })
                } else {
                    None
                },
            });
        }
        let mlp = |name: &str| -> Result<MlpParams, ModelError> {
            Ok(MlpParams {
                w1: get(&format!("{name}.w1"))?,
                b1: get(&format!("{name}.b1"))?,
                w2: get(&format!("{name}.w2"))?,
                b2: get(&format!("{name}.b2"))?,
                w3: get(&format!("{name}.w3"))?,
                b3: get(&format!("{name}.b3"))?,
            })
        };
        Ok(ModelParams {
            pe_w: get("pe.w")?,
            pe_b: get("pe.b")?,
            layers,
            rot_head: mlp("rot")?,
            trans_head: mlp("trans")?,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.to_named().values().all(Tensor::all_finite)
    }

    /// Visit every parameter tensor mutably, in [`Self::to_named`] order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("pe.w", &mut self.pe_w);
        f("pe.b", &mut self.pe_b);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.self.w"), &mut layer.self_w);
            f(&format!("layer{i}.self.b"), &mut layer.self_b);
            f(&format!("layer{i}.cross.w"), &mut layer.cross_w);
            f(&format!("layer{i}.cross.b"), &mut layer.cross_b);
            if let Some(ffn) = &mut layer.ffn {
                f(&format!("layer{i}.ffn.w1"), &mut ffn.w1);
                f(&format!("layer{i}.ffn.b1"), &mut ffn.b1);
                f(&format!("layer{i}.ffn.w2"), &mut ffn.w2);
                f(&format!("layer{i}.ffn.b2"), &mut ffn.b2);
            }
        }
        for (head, name) in [
            (&mut self.rot_head, "rot"),
            (&mut self.trans_head, "trans"),
        ] {
            f(&format!("{name}.w1"), &mut head.w1);
            f(&format!("{name}.b1"), &mut head.b1);
            f(&format!("{name}.w2"), &mut head.w2);
            f(&format!("{name}.b2"), &mut head.b2);
            f(&format!("{name}.w3"), &mut head.w3);
            f(&format!("{name}.b3"), &mut head.b3);
        }
    }
}

/// On-disk training state: config, step counter, and named tensors
/// (parameters plus any optimizer state under `opt.` keys).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn params(&self) -> Result<ModelParams, ModelError> {
        ModelParams::from_named(&self.config, &self.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "SRPOSE-KIT-CKPT v1")?;
        let c = &self.config;
        writeln!(
            f,
            "config d={} layers={} heads={} mlp_hidden={} ffn_hidden={} guidance={} \
             cross_attention={} position_encoding={} intrinsic_calibration={} sim_norm={}",
            c.d,
            c.layers,
            c.heads,
            c.mlp_hidden,
            c.ffn_hidden,
            c.guidance_enabled as u8,
            c.cross_attention_enabled as u8,
            c.position_encoding_enabled as u8,
            c.intrinsic_calibration_enabled as u8,
            c.similarity_normalization,
        )?;
        writeln!(f, "step {}", self.step)?;
        for (name, t) in &self.tensors {
            writeln!(f, "tensor {name} {} {}", t.rows(), t.cols())?;
            for i in 0..t.rows() {
                let row: Vec<String> = t.row(i).iter().map(|v| format!("{v}")).collect();
                writeln!(f, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines().enumerate();
        let perr = |line: usize, msg: String| ModelError::CheckpointParse { line, msg };

        let (_, magic) = lines
            .next()
            .ok_or_else(|| perr(1, "empty checkpoint".into()))?;
        if magic? != "SRPOSE-KIT-CKPT v1" {
            return Err(perr(1, "bad magic".into()));
        }
        let (_, cfg_line) = lines
            .next()
            .ok_or_else(|| perr(2, "missing config".into()))?;
        let cfg_line = cfg_line?;
        let config = parse_config_line(&cfg_line).ok_or_else(|| perr(2, "bad config".into()))?;
        let (_, step_line) = lines.next().ok_or_else(|| perr(3, "missing step".into()))?;
        let step_line = step_line?;
        let step = step_line
            .strip_prefix("step ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| perr(3, "bad step line".into()))?;

        let mut tensors = BTreeMap::new();
        let mut pending: Option<(String, usize, usize, Vec<f64>)> = None;
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if let Some(rest) = line.strip_prefix("tensor ") {
                if let Some((name, rows, cols, data)) = pending.take() {
                    if data.len() != rows * cols {
                        return Err(perr(line_no, format!("tensor {name} truncated")));
                    }
                    tensors.insert(name, Tensor::from_vec(rows, cols, data));
                }
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.len() != 3 {
                    return Err(perr(line_no, "bad tensor header".into()));
                }
                let rows = toks[1]
                    .parse()
                    .map_err(|_| perr(line_no, "bad rows".into()))?;
                let cols = toks[2]
                    .parse()
                    .map_err(|_| perr(line_no, "bad cols".into()))?;
                pending = Some((toks[0].to_string(), rows, cols, Vec::new()));
            } else if !line.trim().is_empty() {
                let Some((_, _, _, data)) = pending.as_mut() else {
                    return Err(perr(line_no, "data before tensor header".into()));
                };
                for tok in line.split_whitespace() {
                    data.push(
                        tok.parse()
                            .map_err(|_| perr(line_no, format!("bad float {tok:?}")))?,
                    );
                }
            }
        }
        if let Some((name, rows, cols, data)) = pending.take() {
            if data.len() != rows * cols {
                return Err(perr(0, format!("tensor {name} truncated")));
            }
            tensors.insert(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(Checkpoint {
            config,
            step,
            tensors,
        })
    }

    /// Load and reject on any config difference, with a field-by-field diff.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint, ModelError> {
        let ckpt = Self::load(path)?;
        let diffs = expected.diff(&ckpt.config);
        if diffs.is_empty() {
            Ok(ckpt)
        } else {
            Err(ModelError::ConfigMismatch { diffs })
        }
    }
}

fn parse_config_line(line: &str) -> Option<ModelConfig> {
    let rest = line.strip_prefix("config ")?;
    let mut cfg = ModelConfig::desk();
    for tok in rest.split_whitespace() {
        let (key, val) = tok.split_once('=')?;
        match key {
            "d" => cfg.d = val.parse().ok()?,
            "layers" => cfg.layers = val.parse().ok()?,
            "heads" => cfg.heads = val.parse().ok()?,
            "mlp_hidden" => cfg.mlp_hidden = val.parse().ok()?,
            "ffn_hidden" => cfg.ffn_hidden = val.parse().ok()?,
            "guidance" => cfg.guidance_enabled = val == "1",
            "cross_attention" => cfg.cross_attention_enabled = val == "1",
            "position_encoding" => cfg.position_encoding_enabled = val == "1",
            "intrinsic_calibration" => cfg.intrinsic_calibration_enabled = val == "1",
            "sim_norm" => {
                cfg.similarity_normalization = match val {
                    "clamp" => SimilarityNormalization::Clamp,
                    "minmax" => SimilarityNormalization::MinMax,
                    _ => return None,
                }
            }
            _ => return None,
        }
    }
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        let mut bad = ModelConfig::desk();
        bad.heads = 5;
        assert!(bad.validate().is_err());
        bad = ModelConfig::desk();
        bad.layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::desk();
        let a = ModelParams::init(&cfg, 7).unwrap();
        let b = ModelParams::init(&cfg, 7).unwrap();
        for (x, y) in a.to_named().values().zip(b.to_named().values()) {
            assert_eq!(x, y);
        }
        let c = ModelParams::init(&cfg, 8).unwrap();
        assert_ne!(a.pe_w, c.pe_w);
    }

    #[test]
    fn named_roundtrip() {
        let cfg = ModelConfig::desk();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let named = p.to_named();
        let q = ModelParams::from_named(&cfg, &named).unwrap();
        assert_eq!(p.pe_w, q.pe_w);
        assert_eq!(p.layers[1].cross_w, q.layers[1].cross_w);
        assert_eq!(p.trans_head.w3, q.trans_head.w3);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let cfg = ModelConfig {
            layers: 1,
            ..ModelConfig::desk()
        };
        let p = ModelParams::init(&cfg, 11).unwrap();
        let ckpt = Checkpoint {
            config: cfg,
            step: 1234,
            tensors: p.to_named(),
        };
        let dir = std::env::temp_dir().join("srpose_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 1234);
        assert_eq!(back.config, cfg);
        for (name, t) in &ckpt.tensors {
            let bt = &back.tensors[name];
            assert_eq!(t.shape(), bt.shape());
            for (a, b) in t.iter().zip(bt.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {name} not bit-exact");
            }
        }
    }

    #[test]
    fn checkpoint_config_mismatch_diff() {
        let cfg = ModelConfig {
            layers: 1,
            ..ModelConfig::desk()
        };
        let p = ModelParams::init(&cfg, 11).unwrap();
        let ckpt = Checkpoint {
            config: cfg,
            step: 0,
            tensors: p.to_named(),
        };
        let dir = std::env::temp_dir().join("srpose_ckpt_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut other = cfg;
        other.d = 64;
        other.guidance_enabled = false;
        match Checkpoint::load_expecting(&path, &other) {
            Err(ModelError::ConfigMismatch { diffs }) => {
                assert_eq!(diffs.len(), 2, "{diffs:?}");
                assert!(diffs.iter().any(|d| d.contains("d:")));
                assert!(diffs.iter().any(|d| d.contains("guidance_enabled")));
            }
            other => panic!("expected ConfigMismatch, got {other:?}"),
        }
    }
}
