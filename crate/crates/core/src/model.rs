//! Encoder + head assembled into one classifier, and its `CAPS1` file format.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capsule::{BaselineHead, CapsuleHead, CapsuleHeadConfig};
use crate::encoders::{Encoder, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tape::{Bindings, Tape, Var};
use crate::tensor::Tensor;
use crate::text::EncodedDoc;

pub const MODEL_MAGIC: &[u8; 5] = b"CAPS1";
pub const BASELINE_CLASSES: usize = 2;

/// In JSON: `"baseline"`, `"capsule"` (default capsule settings) or a
/// capsule settings object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "HeadRepr", into = "HeadRepr")]
pub enum HeadConfig {
    Capsule(CapsuleHeadConfig),
    Baseline,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum HeadMarker {
    Baseline,
    Capsule,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum HeadRepr {
    Marker(HeadMarker),
    Capsule(CapsuleHeadConfig),
}

impl From<HeadRepr> for HeadConfig {
    fn from(r: HeadRepr) -> Self {
        match r {
            HeadRepr::Marker(HeadMarker::Baseline) => HeadConfig::Baseline,
            HeadRepr::Marker(HeadMarker::Capsule) => HeadConfig::default(),
            HeadRepr::Capsule(c) => HeadConfig::Capsule(c),
        }
    }
}

impl From<HeadConfig> for HeadRepr {
    fn from(h: HeadConfig) -> Self {
        match h {
            HeadConfig::Baseline => HeadRepr::Marker(HeadMarker::Baseline),
            HeadConfig::Capsule(c) => HeadRepr::Capsule(c),
        }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::Capsule(CapsuleHeadConfig::default())
    }
}

impl HeadConfig {
    pub fn is_capsule(&self) -> bool {
        matches!(self, HeadConfig::Capsule(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub n_s: usize,
    pub n_w: usize,
    pub embedding_dim: usize,
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.n_s * self.n_w
    }
}

#[derive(Debug, Clone)]
enum Head {
    Capsule(CapsuleHead),
    Baseline(BaselineHead),
}

/// Which intermediate representation to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Feature map averaged over positions.
    EncoderPooled,
    /// Condensed capsules, flattened row-major.
    Condensed,
    /// Class capsules, flattened row-major.
    Class,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-pooled" => Ok(Stage::EncoderPooled),
            "condensed" => Ok(Stage::Condensed),
            "class" => Ok(Stage::Class),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }
}

/// Tape outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub feature_map: FeatureMap,
    pub condensed: Option<Var>,
    pub class_capsules: Option<Var>,
    pub probabilities: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamSet,
    encoder: Encoder,
    head: Head,
}

const META_N_S: &str = "config.n_s";
const META_N_W: &str = "config.n_w";
const META_ROUTING: &str = "config.routing_iterations";

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let t = config.seq_len();
        if t == 0 || config.embedding_dim == 0 {
            return Err(Error::InvalidConfig("n_s, n_w and the embedding size must be positive".into()));
        }
        config.encoder.validate(t)?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamSet::new();
        params.insert(META_N_S, Tensor::vector(vec![config.n_s as f64]), false)?;
        params.insert(META_N_W, Tensor::vector(vec![config.n_w as f64]), false)?;
        let encoder = Encoder::init(&config.encoder, config.embedding_dim, &mut params, &mut rng)?;
        let (positions, channels) = config.encoder.output_shape(t);
        let head = match &config.head {
            HeadConfig::Capsule(caps) => {
                params.insert(META_ROUTING, Tensor::vector(vec![caps.routing_iterations as f64]), false)?;
                Head::Capsule(CapsuleHead::init(caps, positions, channels, &mut params, &mut rng)?)
            }
            HeadConfig::Baseline => Head::Baseline(BaselineHead::init(channels, BASELINE_CLASSES, &mut params, &mut rng)?),
        };
        let mut config = config.clone();
        config.encoder = config.encoder.canonical();
        Ok(Self {
            config,
            params,
            encoder,
            head,
        })
    }

    /// Rebuilds a model from stored parameters, inferring its configuration.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let meta = |name: &str| -> Result<usize> {
            let p = params.by_name(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
            match p.tensor.data() {
                [v] if *v >= 1.0 && v.fract() == 0.0 => Ok(*v as usize),
                _ => Err(Error::ModelFormat(format!("`{name}` must hold one positive integer"))),
            }
        };
        let n_s = meta(META_N_S)?;
        let n_w = meta(META_N_W)?;
        let (encoder_config, embedding_dim) = Encoder::infer(&params)?;
        let t = n_s * n_w;
        let (positions, channels) = encoder_config.output_shape(t);
        let (head_config, head) = if params.by_name("capsule.routing.w").is_some() {
            let caps = CapsuleHead::infer(&params, meta(META_ROUTING)?)?;
            let head = CapsuleHead::resolve(&caps, positions, channels, &params)?;
            (HeadConfig::Capsule(caps), Head::Capsule(head))
        } else {
            let head = BaselineHead::resolve(channels, BASELINE_CLASSES, &params)?;
            (HeadConfig::Baseline, Head::Baseline(head))
        };
        let encoder = Encoder::resolve(&encoder_config, embedding_dim, &params)?;
        Ok(Self {
            config: ModelConfig {
                encoder: encoder_config,
                head: head_config,
                n_s,
                n_w,
                embedding_dim,
            },
            params,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, doc: &EncodedDoc) -> Result<ForwardPass> {
        let shape = doc.block.shape();
        if shape != [self.config.n_s, self.config.n_w, self.config.embedding_dim] {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "model input",
                left: shape.to_vec(),
                right: vec![self.config.n_s, self.config.n_w, self.config.embedding_dim],
            }));
        }
        let flat = doc
            .block
            .clone()
            .reshaped(vec![self.config.seq_len(), self.config.embedding_dim])?;
        let input = tape.constant(flat);
        let feature_map = self.encoder.forward(tape, b, input)?;
        Ok(match &self.head {
            Head::Capsule(head) => {
                let out = head.forward(tape, b, &feature_map)?;
                ForwardPass {
                    feature_map,
                    condensed: Some(out.condensed),
                    class_capsules: Some(out.routing.class_capsules),
                    probabilities: out.probabilities,
                }
            }
            Head::Baseline(head) => ForwardPass {
                feature_map,
                condensed: None,
                class_capsules: None,
                probabilities: head.forward(tape, b, &feature_map)?,
            },
        })
    }

    /// Class probabilities for one document.
    pub fn probabilities(&self, doc: &EncodedDoc) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params);
        let pass = self.forward(&mut tape, &b, doc)?;
        Ok(tape.value(pass.probabilities).data().to_vec())
    }

    pub fn representation(&self, doc: &EncodedDoc, stage: Stage) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params);
        let pass = self.forward(&mut tape, &b, doc)?;
        let var = match stage {
            Stage::EncoderPooled => {
                let summed = tape.sum(pass.feature_map.data, 0)?;
                tape.scale(summed, 1.0 / pass.feature_map.positions as f64)?
            }
            Stage::Condensed => pass
                .condensed
                .ok_or_else(|| Error::InvalidArgument("the baseline head has no condensed capsules".into()))?,
            Stage::Class => pass
                .class_capsules
                .ok_or_else(|| Error::InvalidArgument("the baseline head has no class capsules".into()))?,
        };
        Ok(tape.value(var).data().to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        params_to_bytes(&self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_params(params_from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `CAPS1` then, per parameter: `u32` name length, name bytes, `u32` rank,
/// `u64` extents, `f64` values. All integers and floats little-endian.
pub fn params_to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::ModelFormat(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parameters named `config.*` are loaded as non-trainable.
pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    if !bytes.starts_with(MODEL_MAGIC) {
        return Err(Error::ModelFormat("missing CAPS1 magic header".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MODEL_MAGIC.len(),
    };
    let mut params = ParamSet::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::ModelFormat("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::ModelFormat(format!("parameter `{name}` has an impossible shape {shape:?}")))?;
        let raw = r.take(count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::ModelFormat(format!("parameter `{name}`: {e}")))?;
        let trainable = !name.starts_with("config.");
        params.insert(name, tensor, trainable)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use crate::text::{encode_document, Document, EmbeddingTable};

    fn config(head: HeadConfig) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::Bigru,
                kernel_sizes: vec![2],
                filters_per_kernel: 3,
                hidden_dim: 3,
            },
            head,
            n_s: 2,
            n_w: 3,
            embedding_dim: 4,
        }
    }

    fn caps() -> HeadConfig {
        HeadConfig::Capsule(CapsuleHeadConfig {
            n_pc: 2,
            n_cc: 4,
            d: 3,
            n_cls: 2,
            routing_iterations: 3,
        })
    }

    fn doc() -> EncodedDoc {
        let table = EmbeddingTable::parse("a 0.1 0.2 0.3 0.4\nb -0.5 0.1 0.0 0.2").unwrap();
        encode_document(&Document::new("a b. b a a", 1), &table, 2, 3)
    }

    #[test]
    fn round_trip_through_bytes() {
        for head in [caps(), HeadConfig::Baseline] {
            let model = Model::init(&config(head), 7).unwrap();
            let back = Model::from_bytes(&model.to_bytes()).unwrap();
            assert_eq!(back.config(), model.config());
            assert_eq!(back.params, model.params);
            assert_eq!(back.probabilities(&doc()).unwrap(), model.probabilities(&doc()).unwrap());
        }
    }

    #[test]
    fn bad_magic_mentions_format() {
        let mut bytes = Model::init(&config(caps()), 1).unwrap().to_bytes();
        bytes[0] = b'X';
        let err = Model::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("CAPS1"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = Model::init(&config(caps()), 1).unwrap().to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn representation_sizes() {
        let model = Model::init(&config(caps()), 2).unwrap();
        let d = doc();
        assert_eq!(model.representation(&d, Stage::EncoderPooled).unwrap().len(), 6);
        assert_eq!(model.representation(&d, Stage::Condensed).unwrap().len(), 12);
        assert_eq!(model.representation(&d, Stage::Class).unwrap().len(), 6);
        let baseline = Model::init(&config(HeadConfig::Baseline), 2).unwrap();
        assert!(baseline.representation(&d, Stage::Class).is_err());
        assert!("classs".parse::<Stage>().is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = Model::init(&config(caps()), 3).unwrap();
        let p = model.probabilities(&doc()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
