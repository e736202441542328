//! Sequence encoders mapping the document grid to a positions × channels
//! feature map.
//!
//! The `n_s × n_w` grid is read as one sequence of `T = n_s·n_w` tokens.
//! Padding positions are zero vectors and go through the encoder like any
//! other token, so the output length only depends on the configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{Bindings, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Cnn,
    Gru,
    Bigru,
    CnnBigru,
    Lstm,
    Bilstm,
    CnnBilstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> &'static [&'static str] {
        match self {
            CellKind::Gru => &["z", "r", "h"],
            CellKind::Lstm => &["i", "f", "o", "g"],
        }
    }
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 7] = [
        Self::Cnn,
        Self::Gru,
        Self::Bigru,
        Self::CnnBigru,
        Self::Lstm,
        Self::Bilstm,
        Self::CnnBilstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cnn => "cnn",
            Self::Gru => "gru",
            Self::Bigru => "bigru",
            Self::CnnBigru => "cnn-bigru",
            Self::Lstm => "lstm",
            Self::Bilstm => "bilstm",
            Self::CnnBilstm => "cnn-bilstm",
        }
    }

    /// Conventional capitalization, e.g. `BiGRU`.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Cnn => "CNN",
            Self::Gru => "GRU",
            Self::Bigru => "BiGRU",
            Self::CnnBigru => "CNN-BiGRU",
            Self::Lstm => "LSTM",
            Self::Bilstm => "BiLSTM",
            Self::CnnBilstm => "CNN-BiLSTM",
        }
    }

    pub fn uses_cnn(self) -> bool {
        matches!(self, Self::Cnn | Self::CnnBigru | Self::CnnBilstm)
    }

    fn cell(self) -> Option<CellKind> {
        match self {
            Self::Cnn => None,
            Self::Gru | Self::Bigru | Self::CnnBigru => Some(CellKind::Gru),
            Self::Lstm | Self::Bilstm | Self::CnnBilstm => Some(CellKind::Lstm),
        }
    }

    pub fn bidirectional(self) -> bool {
        matches!(self, Self::Bigru | Self::CnnBigru | Self::Bilstm | Self::CnnBilstm)
    }

    /// Parameter-name segment of the recurrent part.
    fn rnn_prefix(self) -> Option<&'static str> {
        match (self.cell()?, self.bidirectional()) {
            (CellKind::Gru, false) => Some("gru"),
            (CellKind::Gru, true) => Some("bigru"),
            (CellKind::Lstm, false) => Some("lstm"),
            (CellKind::Lstm, true) => Some("bilstm"),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown encoder kind `{s}`")))
    }
}

fn default_kernel_sizes() -> Vec<usize> {
    vec![3, 4, 5]
}

fn default_width() -> usize {
    300
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    #[serde(default = "default_kernel_sizes")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_width")]
    pub filters_per_kernel: usize,
    #[serde(default = "default_width")]
    pub hidden_dim: usize,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind) -> Self {
        Self {
            kind,
            kernel_sizes: default_kernel_sizes(),
            filters_per_kernel: default_width(),
            hidden_dim: default_width(),
        }
    }

    /// Copy with the fields the kind does not use reset to their defaults.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        if !self.kind.uses_cnn() {
            out.kernel_sizes = default_kernel_sizes();
            out.filters_per_kernel = default_width();
        }
        if self.kind.cell().is_none() {
            out.hidden_dim = default_width();
        }
        out
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.kind.uses_cnn() {
            if self.kernel_sizes.is_empty() {
                return Err(Error::InvalidConfig("kernel_sizes is empty".into()));
            }
            if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k > seq_len) {
                return Err(Error::InvalidConfig(format!(
                    "kernel size {k} must be in 1..={seq_len} (the flattened sequence length)"
                )));
            }
            let mut sorted = self.kernel_sizes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.kernel_sizes.len() {
                return Err(Error::InvalidConfig("kernel_sizes repeats a size".into()));
            }
            if self.filters_per_kernel == 0 {
                return Err(Error::InvalidConfig("filters_per_kernel must be positive".into()));
            }
        }
        if self.kind.cell().is_some() && self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    /// `(L, C)` of the feature map for a sequence of `seq_len` tokens.
    pub fn output_shape(&self, seq_len: usize) -> (usize, usize) {
        let conv_len: usize = self.kernel_sizes.iter().map(|k| seq_len + 1 - k).sum();
        let positions = if self.kind.uses_cnn() { conv_len } else { seq_len };
        let channels = match self.kind {
            EncoderKind::Cnn => self.filters_per_kernel,
            EncoderKind::Gru | EncoderKind::Lstm => self.hidden_dim,
            _ => 2 * self.hidden_dim,
        };
        (positions, channels)
    }
}

/// Encoder output on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub data: Var,
    pub positions: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn glorot(name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name,
            shape,
            init: Init::Glorot { fan_in, fan_out },
        }
    }

    pub fn zeros(name: String, shape: Vec<usize>) -> Self {
        Self {
            name,
            shape,
            init: Init::Zeros,
        }
    }

    pub fn materialize(&self, rng: &mut SeededRng) -> Tensor {
        match self.init {
            Init::Glorot { fan_in, fan_out } => glorot_uniform(&self.shape, fan_in, fan_out, rng),
            Init::Zeros => Tensor::zeros(&self.shape),
        }
    }
}

pub(crate) fn insert_specs(specs: &[ParamSpec], params: &mut ParamSet, rng: &mut SeededRng) -> Result<()> {
    for spec in specs {
        params.insert(spec.name.clone(), spec.materialize(rng), true)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConvLayer {
    width: usize,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Cell {
    kind: CellKind,
    hidden: usize,
    /// Input weights per gate, `in × H`.
    w: Vec<ParamId>,
    /// Recurrent weights per gate, `H × H`.
    u: Vec<ParamId>,
    /// Biases per gate, `1 × H`.
    b: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    input_dim: usize,
    convs: Vec<ConvLayer>,
    forward_cell: Option<Cell>,
    backward_cell: Option<Cell>,
}

fn cell_specs(prefix: &str, kind: CellKind, input: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for gate in kind.gates() {
        specs.push(ParamSpec::glorot(format!("{prefix}.w_{gate}"), vec![input, hidden], input, hidden));
        specs.push(ParamSpec::glorot(format!("{prefix}.u_{gate}"), vec![hidden, hidden], hidden, hidden));
        specs.push(ParamSpec::zeros(format!("{prefix}.b_{gate}"), vec![1, hidden]));
    }
    specs
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn rnn_input_dim(config: &EncoderConfig, e_d: usize) -> usize {
        if config.kind.uses_cnn() {
            config.filters_per_kernel
        } else {
            e_d
        }
    }

    fn directions(config: &EncoderConfig) -> &'static [&'static str] {
        if config.kind.bidirectional() {
            &["fwd", "bwd"]
        } else {
            &["fwd"]
        }
    }

    pub(crate) fn specs(config: &EncoderConfig, e_d: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        if config.kind.uses_cnn() {
            for &k in &config.kernel_sizes {
                let f = config.filters_per_kernel;
                specs.push(ParamSpec::glorot(format!("encoder.cnn.k{k}.w"), vec![k * e_d, f], k * e_d, f));
                specs.push(ParamSpec::zeros(format!("encoder.cnn.k{k}.b"), vec![1, f]));
            }
        }
        if let (Some(cell), Some(prefix)) = (config.kind.cell(), config.kind.rnn_prefix()) {
            let input = Self::rnn_input_dim(config, e_d);
            for dir in Self::directions(config) {
                specs.extend(cell_specs(&format!("encoder.{prefix}.{dir}"), cell, input, config.hidden_dim));
            }
        }
        specs
    }

    /// Initializes encoder parameters into `params`: Glorot-uniform weights,
    /// zero biases.
    pub fn init(config: &EncoderConfig, e_d: usize, params: &mut ParamSet, rng: &mut SeededRng) -> Result<Self> {
        insert_specs(&Self::specs(config, e_d), params, rng)?;
        Self::resolve(config, e_d, params)
    }

    /// Binds to existing parameters, checking every shape.
    pub fn resolve(config: &EncoderConfig, e_d: usize, params: &ParamSet) -> Result<Self> {
        let mut convs = Vec::new();
        if config.kind.uses_cnn() {
            for &k in &config.kernel_sizes {
                let f = config.filters_per_kernel;
                convs.push(ConvLayer {
                    width: k,
                    weight: params.expect(&format!("encoder.cnn.k{k}.w"), &[k * e_d, f])?,
                    bias: params.expect(&format!("encoder.cnn.k{k}.b"), &[1, f])?,
                });
            }
        }
        let mut cells = Vec::new();
        if let (Some(kind), Some(prefix)) = (config.kind.cell(), config.kind.rnn_prefix()) {
            let input = Self::rnn_input_dim(config, e_d);
            let h = config.hidden_dim;
            for dir in Self::directions(config) {
                let mut cell = Cell {
                    kind,
                    hidden: h,
                    w: Vec::new(),
                    u: Vec::new(),
                    b: Vec::new(),
                };
                for gate in kind.gates() {
                    let p = format!("encoder.{prefix}.{dir}");
                    cell.w.push(params.expect(&format!("{p}.w_{gate}"), &[input, h])?);
                    cell.u.push(params.expect(&format!("{p}.u_{gate}"), &[h, h])?);
                    cell.b.push(params.expect(&format!("{p}.b_{gate}"), &[1, h])?);
                }
                cells.push(cell);
            }
        }
        let mut cells = cells.into_iter();
        Ok(Self {
            config: config.clone(),
            input_dim: e_d,
            convs,
            forward_cell: cells.next(),
            backward_cell: cells.next(),
        })
    }

    /// Recovers the configuration and embedding size from parameter names
    /// and shapes.
    pub fn infer(params: &ParamSet) -> Result<(EncoderConfig, usize)> {
        let mut kernels: Vec<(usize, Vec<usize>)> = params
            .iter()
            .filter_map(|(_, p)| {
                let k = p.name.strip_prefix("encoder.cnn.k")?.strip_suffix(".w")?;
                Some((k.parse().ok()?, p.tensor.shape().to_vec()))
            })
            .collect();
        kernels.sort_by_key(|(k, _)| *k);
        let rnn = ["bigru", "gru", "bilstm", "lstm"]
            .into_iter()
            .find(|prefix| params.iter().any(|(_, p)| p.name.starts_with(&format!("encoder.{prefix}."))));
        let kind = match (kernels.is_empty(), rnn) {
            (false, None) => EncoderKind::Cnn,
            (true, Some("gru")) => EncoderKind::Gru,
            (true, Some("bigru")) => EncoderKind::Bigru,
            (true, Some("lstm")) => EncoderKind::Lstm,
            (true, Some("bilstm")) => EncoderKind::Bilstm,
            (false, Some("bigru")) => EncoderKind::CnnBigru,
            (false, Some("bilstm")) => EncoderKind::CnnBilstm,
            _ => return Err(Error::ModelFormat("cannot infer the encoder from parameter names".into())),
        };
        let mut config = EncoderConfig::new(kind);
        let mut e_d = None;
        if !kernels.is_empty() {
            config.kernel_sizes = kernels.iter().map(|(k, _)| *k).collect();
            let (k, shape) = &kernels[0];
            config.filters_per_kernel = shape[1];
            e_d = Some(shape[0] / k);
        }
        if let Some(prefix) = rnn {
            let gate = if prefix.ends_with("gru") { "z" } else { "i" };
            let w = params
                .by_name(&format!("encoder.{prefix}.fwd.w_{gate}"))
                .ok_or_else(|| Error::MissingParameter(format!("encoder.{prefix}.fwd.w_{gate}")))?;
            config.hidden_dim = w.tensor.shape()[1];
            e_d.get_or_insert(w.tensor.shape()[0]);
        }
        let e_d = e_d.expect("kind implies cnn or rnn parameters");
        // re-resolve to validate every shape
        Self::resolve(&config, e_d, params)?;
        Ok((config, e_d))
    }

    /// Runs the encoder on a `T × E_d` input.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, input: Var) -> Result<FeatureMap> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "encoder input",
                left: shape,
                right: vec![0, self.input_dim],
            }));
        }
        self.config.validate(shape[0])?;
        let mut seq = input;
        if !self.convs.is_empty() {
            seq = self.convolve(tape, b, seq)?;
        }
        if let Some(fwd) = &self.forward_cell {
            let forward = run_cell(tape, b, fwd, seq, false)?;
            seq = match &self.backward_cell {
                Some(bwd) => {
                    let backward = run_cell(tape, b, bwd, seq, true)?;
                    tape.concat(&[forward, backward], 1)?
                }
                None => forward,
            };
        }
        let out = tape.value(seq).shape();
        Ok(FeatureMap {
            data: seq,
            positions: out[0],
            channels: out[1],
        })
    }

    fn convolve(&self, tape: &mut Tape, b: &Bindings, input: Var) -> Result<Var> {
        let t = tape.value(input).shape()[0];
        let mut maps = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let out_len = t + 1 - conv.width;
            let windows = (0..conv.width)
                .map(|o| tape.slice(input, 0, o, o + out_len))
                .collect::<Result<Vec<_>, _>>()?;
            let unfolded = tape.concat(&windows, 1)?;
            let z = tape.matmul(unfolded, b.var(conv.weight))?;
            let bias = broadcast_rows(tape, b.var(conv.bias), out_len)?;
            let z = tape.add(z, bias)?;
            maps.push(tape.relu(z)?);
        }
        Ok(tape.concat(&maps, 0)?)
    }
}

/// Repeats a `1 × n` row `rows` times via `ones(rows × 1) · row`.
pub(crate) fn broadcast_rows(tape: &mut Tape, row: Var, rows: usize) -> Result<Var> {
    if rows == 1 {
        return Ok(row);
    }
    let ones = tape.constant(Tensor::filled(&[rows, 1], 1.0));
    Ok(tape.matmul(ones, row)?)
}

/// Runs one recurrent direction and returns the hidden states in position
/// order as a `T × H` matrix.
fn run_cell(tape: &mut Tape, b: &Bindings, cell: &Cell, input: Var, reverse: bool) -> Result<Var> {
    let t_len = tape.value(input).shape()[0];
    let h = cell.hidden;
    let gates = cell.w.len();
    let vars = |ids: &[ParamId]| ids.iter().map(|&id| b.var(id)).collect::<Vec<_>>();
    let w_all = tape.concat(&vars(&cell.w), 1)?;
    let b_all = tape.concat(&vars(&cell.b), 1)?;
    let projected = tape.matmul(input, w_all)?;
    let bias = broadcast_rows(tape, b_all, t_len)?;
    let projected = tape.add(projected, bias)?;

    let mut state = tape.constant(Tensor::zeros(&[1, h]));
    let mut memory = tape.constant(Tensor::zeros(&[1, h]));
    let mut outputs = Vec::with_capacity(t_len);

    match cell.kind {
        CellKind::Gru => {
            let u = vars(&cell.u);
            let u_zr = tape.concat(&u[..2], 1)?;
            let u_h = u[2];
            for step in 0..t_len {
                let t = if reverse { t_len - 1 - step } else { step };
                let x_t = tape.slice(projected, 0, t, t + 1)?;
                let x_zr = tape.slice(x_t, 1, 0, 2 * h)?;
                let x_h = tape.slice(x_t, 1, 2 * h, 3 * h)?;
                let h_zr = tape.matmul(state, u_zr)?;
                let pre = tape.add(x_zr, h_zr)?;
                let zr = tape.sigmoid(pre)?;
                let z = tape.slice(zr, 1, 0, h)?;
                let r = tape.slice(zr, 1, h, 2 * h)?;
                let reset = tape.mul(r, state)?;
                let cand = tape.matmul(reset, u_h)?;
                let cand = tape.add(x_h, cand)?;
                let cand = tape.tanh(cand)?;
                // h' = z∘h + (1−z)∘h̃ = h̃ + z∘(h − h̃)
                let diff = tape.sub(state, cand)?;
                let keep = tape.mul(z, diff)?;
                state = tape.add(cand, keep)?;
                outputs.push(state);
            }
        }
        CellKind::Lstm => {
            debug_assert_eq!(gates, 4);
            let u_all = tape.concat(&vars(&cell.u), 1)?;
            for step in 0..t_len {
                let t = if reverse { t_len - 1 - step } else { step };
                let x_t = tape.slice(projected, 0, t, t + 1)?;
                let rec = tape.matmul(state, u_all)?;
                let pre = tape.add(x_t, rec)?;
                let sig_pre = tape.slice(pre, 1, 0, 3 * h)?;
                let ifo = tape.sigmoid(sig_pre)?;
                let g_pre = tape.slice(pre, 1, 3 * h, 4 * h)?;
                let g = tape.tanh(g_pre)?;
                let i = tape.slice(ifo, 1, 0, h)?;
                let f = tape.slice(ifo, 1, h, 2 * h)?;
                let o = tape.slice(ifo, 1, 2 * h, 3 * h)?;
                let kept = tape.mul(f, memory)?;
                let written = tape.mul(i, g)?;
                memory = tape.add(kept, written)?;
                let squashed = tape.tanh(memory)?;
                state = tape.mul(o, squashed)?;
                outputs.push(state);
            }
        }
    }
    if reverse {
        outputs.reverse();
    }
    Ok(tape.concat(&outputs, 0)?)
}

/// Runs `encoder` on a `T × E_d` tensor outside of training.
pub fn encoder_forward(encoder: &Encoder, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = tape.bind(params);
    let x = tape.constant(input.clone());
    let fm = encoder.forward(&mut tape, &b, x)?;
    Ok(tape.value(fm.data).clone())
}
