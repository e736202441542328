//! Capsule head: primary capsules, compression, dynamic routing and the
//! class-probability representation layer, plus a pooled dense baseline.

use serde::{Deserialize, Serialize};

use crate::encoders::{insert_specs, FeatureMap, ParamSpec};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{Bindings, Tape, Var};
use crate::tensor::{apply_primitive, Primitive, Tensor, TensorError};

fn default_n_pc() -> usize {
    8
}
fn default_n_cc() -> usize {
    128
}
fn default_d() -> usize {
    16
}
fn default_n_cls() -> usize {
    2
}
fn default_iterations() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleHeadConfig {
    #[serde(default = "default_n_pc")]
    pub n_pc: usize,
    #[serde(default = "default_n_cc")]
    pub n_cc: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_n_cls")]
    pub n_cls: usize,
    #[serde(default = "default_iterations")]
    pub routing_iterations: usize,
}

impl Default for CapsuleHeadConfig {
    fn default() -> Self {
        Self {
            n_pc: default_n_pc(),
            n_cc: default_n_cc(),
            d: default_d(),
            n_cls: default_n_cls(),
            routing_iterations: default_iterations(),
        }
    }
}

impl CapsuleHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pc == 0 || self.n_cc == 0 || self.d == 0 || self.routing_iterations == 0 {
            return Err(Error::InvalidConfig(
                "n_pc, n_cc, d and routing_iterations must be at least 1".into(),
            ));
        }
        if self.n_cls < 2 {
            return Err(Error::InvalidConfig("n_cls must be at least 2".into()));
        }
        Ok(())
    }
}

/// `count × dim` capsule vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleStack {
    pub data: Tensor,
}

impl CapsuleStack {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "capsule stack must be count × dim, got shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn count(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn capsule(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.count())
            .map(|i| self.capsule(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Routing logits and couplings after the final iteration, with the
/// couplings used at every iteration in `history`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub logits: Tensor,
    pub couplings: Tensor,
    pub history: Vec<Tensor>,
}

/// `squash(x) = (‖x‖² / (1 + ‖x‖²)) · x / ‖x‖`, with `squash(0) = 0`.
pub fn squash(x: &[f64]) -> Vec<f64> {
    let t = Tensor::vector(x.to_vec());
    apply_primitive(&Primitive::Squash { axis: 0 }, &[&t])
        .expect("squash of a vector is well-formed")
        .into_data()
}

/// Projects every position of an `L × C` feature map to `n_pc` capsules of
/// dimension `d` and squashes them. Returns `(L·n_pc) × d`, position-major.
pub fn primary_capsules_on(tape: &mut Tape, fm: Var, projection: Var, n_pc: usize, d: usize) -> Result<Var> {
    let projected = tape.matmul(fm, projection)?;
    let positions = tape.value(projected).shape()[0];
    if tape.value(projected).shape()[1] != n_pc * d {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "primary capsules",
            left: tape.value(projection).shape().to_vec(),
            right: vec![tape.value(fm).shape()[1], n_pc * d],
        }));
    }
    let grouped = tape.reshape(projected, &[positions * n_pc, d])?;
    Ok(tape.squash(grouped, 1)?)
}

/// Condensed capsule `j` is `Σ_i weights[j, i] · primary_i`.
pub fn compress_on(tape: &mut Tape, primary: Var, weights: Var) -> Result<Var> {
    Ok(tape.matmul(weights, primary)?)
}

/// Tape variables produced by [`route_on`].
#[derive(Debug, Clone)]
pub struct RoutingVars {
    pub class_capsules: Var,
    pub logits: Var,
    pub couplings: Vec<Var>,
}

/// Dynamic routing from `n_cc × d` condensed capsules to `n_cls` class
/// capsules. `transform` is `n_cc × n_cls × d × d`; logits start at zero and
/// the agreement update is skipped after the final iteration.
pub fn route_on(tape: &mut Tape, condensed: Var, transform: Var, iterations: usize) -> Result<RoutingVars> {
    let (n_cc, d) = {
        let s = tape.value(condensed).shape();
        (s[0], s[1])
    };
    let ts = tape.value(transform).shape().to_vec();
    if ts.len() != 4 || ts[0] != n_cc || ts[2] != d || ts[3] != d {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "dynamic routing",
            left: tape.value(condensed).shape().to_vec(),
            right: ts,
        }));
    }
    if iterations == 0 {
        return Err(Error::InvalidConfig("routing needs at least one iteration".into()));
    }
    let n_cls = ts[1];

    // û_{k|j} = W_{jk} u_j for all j, k in one batched product
    let w = tape.reshape(transform, &[n_cc, n_cls * d, d])?;
    let u = tape.reshape(condensed, &[n_cc, d, 1])?;
    let predictions = tape.bmm(w, u)?;
    let predictions = tape.reshape(predictions, &[n_cc, n_cls, d])?;
    let per_class = (0..n_cls)
        .map(|k| {
            let p = tape.slice(predictions, 1, k, k + 1)?;
            tape.reshape(p, &[n_cc, d])
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut logits = tape.constant(Tensor::zeros(&[n_cc, n_cls]));
    let mut couplings = Vec::with_capacity(iterations);
    let mut class_capsules = None;
    for iteration in 0..iterations {
        let c = tape.softmax(logits, 1)?;
        couplings.push(c);
        let mut sums = Vec::with_capacity(n_cls);
        for (k, &u_hat) in per_class.iter().enumerate() {
            let c_k = tape.slice(c, 1, k, k + 1)?;
            let c_k = tape.reshape(c_k, &[1, n_cc])?;
            sums.push(tape.matmul(c_k, u_hat)?);
        }
        let s = tape.concat(&sums, 0)?;
        let v = tape.squash(s, 1)?;
        class_capsules = Some(v);
        if iteration + 1 < iterations {
            let mut agreement = Vec::with_capacity(n_cls);
            for (k, &u_hat) in per_class.iter().enumerate() {
                let v_k = tape.slice(v, 0, k, k + 1)?;
                let v_k = tape.reshape(v_k, &[d, 1])?;
                agreement.push(tape.matmul(u_hat, v_k)?);
            }
            let a = tape.concat(&agreement, 1)?;
            logits = tape.add(logits, a)?;
        }
    }
    Ok(RoutingVars {
        class_capsules: class_capsules.expect("at least one iteration"),
        logits,
        couplings,
    })
}

/// Softmax over the class-capsule norms.
pub fn class_probabilities_on(tape: &mut Tape, class_capsules: Var) -> Result<Var> {
    let norms = tape.l2_norm(class_capsules, 1)?;
    Ok(tape.softmax(norms, 0)?)
}

/// Index of the largest probability; ties go to the lower index.
pub fn predict(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn primary_capsules(fm: &Tensor, projection: &Tensor, config: &CapsuleHeadConfig) -> Result<CapsuleStack> {
    let mut tape = Tape::new();
    let f = tape.constant(fm.clone());
    let p = tape.constant(projection.clone());
    let out = primary_capsules_on(&mut tape, f, p, config.n_pc, config.d)?;
    CapsuleStack::new(tape.value(out).clone())
}

pub fn compress(primary: &CapsuleStack, weights: &Tensor) -> Result<CapsuleStack> {
    if weights.rank() != 2 || weights.shape()[1] != primary.count() {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "compress",
            left: weights.shape().to_vec(),
            right: primary.data.shape().to_vec(),
        }));
    }
    let out = apply_primitive(&Primitive::MatMul, &[weights, &primary.data])?;
    CapsuleStack::new(out)
}

pub fn dynamic_routing(
    condensed: &CapsuleStack,
    transform: &Tensor,
    config: &CapsuleHeadConfig,
) -> Result<(CapsuleStack, RoutingState)> {
    let mut tape = Tape::new();
    let u = tape.constant(condensed.data.clone());
    let w = tape.constant(transform.clone());
    let vars = route_on(&mut tape, u, w, config.routing_iterations)?;
    let history: Vec<Tensor> = vars.couplings.iter().map(|&c| tape.value(c).clone()).collect();
    let state = RoutingState {
        logits: tape.value(vars.logits).clone(),
        couplings: history.last().expect("at least one iteration").clone(),
        history,
    };
    Ok((CapsuleStack::new(tape.value(vars.class_capsules).clone())?, state))
}

pub fn class_probabilities(class_capsules: &CapsuleStack) -> Vec<f64> {
    let norms = Tensor::vector(class_capsules.norms());
    apply_primitive(&Primitive::Softmax { axis: 0 }, &[&norms])
        .expect("softmax of a vector")
        .into_data()
}

/// Mean-pools an `L × C` feature map, applies `pooled · weights + bias` and
/// a softmax.
pub fn baseline_head_on(tape: &mut Tape, fm: Var, weights: Var, bias: Var) -> Result<Var> {
    let positions = tape.value(fm).shape()[0];
    let summed = tape.sum(fm, 0)?;
    let pooled = tape.scale(summed, 1.0 / positions as f64)?;
    let channels = tape.value(pooled).shape()[0];
    let pooled = tape.reshape(pooled, &[1, channels])?;
    let logits = tape.matmul(pooled, weights)?;
    let logits = tape.add(logits, bias)?;
    let n_cls = tape.value(logits).shape()[1];
    let logits = tape.reshape(logits, &[n_cls])?;
    Ok(tape.softmax(logits, 0)?)
}

pub fn baseline_head(fm: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = tape.constant(fm.clone());
    let w = tape.constant(weights.clone());
    let b = tape.constant(bias.clone());
    let p = baseline_head_on(&mut tape, f, w, b)?;
    Ok(tape.value(p).data().to_vec())
}

/// Capsule head parameters bound to a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct CapsuleHead {
    config: CapsuleHeadConfig,
    positions: usize,
    channels: usize,
    projection: ParamId,
    compression: ParamId,
    transform: ParamId,
}

/// Tape outputs of the capsule head.
#[derive(Debug, Clone)]
pub struct CapsuleOutputs {
    pub primary: Var,
    pub condensed: Var,
    pub routing: RoutingVars,
    pub probabilities: Var,
}

impl CapsuleHead {
    pub(crate) fn specs(config: &CapsuleHeadConfig, positions: usize, channels: usize) -> Vec<ParamSpec> {
        let CapsuleHeadConfig { n_pc, n_cc, d, n_cls, .. } = *config;
        let primaries = positions * n_pc;
        vec![
            ParamSpec::glorot("capsule.primary.w".into(), vec![channels, n_pc * d], channels, n_pc * d),
            ParamSpec::glorot("capsule.compress.w".into(), vec![n_cc, primaries], primaries, n_cc),
            ParamSpec::glorot("capsule.routing.w".into(), vec![n_cc, n_cls, d, d], d, d),
        ]
    }

    pub fn init(
        config: &CapsuleHeadConfig,
        positions: usize,
        channels: usize,
        params: &mut ParamSet,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        insert_specs(&Self::specs(config, positions, channels), params, rng)?;
        Self::resolve(config, positions, channels, params)
    }

    pub fn resolve(config: &CapsuleHeadConfig, positions: usize, channels: usize, params: &ParamSet) -> Result<Self> {
        let CapsuleHeadConfig { n_pc, n_cc, d, n_cls, .. } = *config;
        Ok(Self {
            config: *config,
            positions,
            channels,
            projection: params.expect("capsule.primary.w", &[channels, n_pc * d])?,
            compression: params.expect("capsule.compress.w", &[n_cc, positions * n_pc])?,
            transform: params.expect("capsule.routing.w", &[n_cc, n_cls, d, d])?,
        })
    }

    /// Reads `(n_pc, n_cc, d, n_cls)` back from parameter shapes.
    pub fn infer(params: &ParamSet, routing_iterations: usize) -> Result<CapsuleHeadConfig> {
        let shape = |name: &str| {
            params
                .by_name(name)
                .map(|p| p.tensor.shape().to_vec())
                .ok_or_else(|| Error::MissingParameter(name.to_string()))
        };
        let routing = shape("capsule.routing.w")?;
        let projection = shape("capsule.primary.w")?;
        if routing.len() != 4 || projection.len() != 2 || routing[2] == 0 || projection[1] % routing[2] != 0 {
            return Err(Error::ModelFormat("inconsistent capsule parameter shapes".into()));
        }
        Ok(CapsuleHeadConfig {
            n_pc: projection[1] / routing[2],
            n_cc: routing[0],
            d: routing[2],
            n_cls: routing[1],
            routing_iterations,
        })
    }

    pub fn config(&self) -> &CapsuleHeadConfig {
        &self.config
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, fm: &FeatureMap) -> Result<CapsuleOutputs> {
        if fm.positions != self.positions || fm.channels != self.channels {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "capsule head",
                left: vec![fm.positions, fm.channels],
                right: vec![self.positions, self.channels],
            }));
        }
        let primary = primary_capsules_on(tape, fm.data, b.var(self.projection), self.config.n_pc, self.config.d)?;
        let condensed = compress_on(tape, primary, b.var(self.compression))?;
        let routing = route_on(tape, condensed, b.var(self.transform), self.config.routing_iterations)?;
        let probabilities = class_probabilities_on(tape, routing.class_capsules)?;
        Ok(CapsuleOutputs {
            primary,
            condensed,
            routing,
            probabilities,
        })
    }
}

/// Mean-pool + dense + softmax head.
#[derive(Debug, Clone)]
pub struct BaselineHead {
    weights: ParamId,
    bias: ParamId,
}

impl BaselineHead {
    pub(crate) fn specs(channels: usize, n_cls: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::glorot("head.dense.w".into(), vec![channels, n_cls], channels, n_cls),
            ParamSpec::zeros("head.dense.b".into(), vec![1, n_cls]),
        ]
    }

    pub fn init(channels: usize, n_cls: usize, params: &mut ParamSet, rng: &mut SeededRng) -> Result<Self> {
        insert_specs(&Self::specs(channels, n_cls), params, rng)?;
        Self::resolve(channels, n_cls, params)
    }

    pub fn resolve(channels: usize, n_cls: usize, params: &ParamSet) -> Result<Self> {
        Ok(Self {
            weights: params.expect("head.dense.w", &[channels, n_cls])?,
            bias: params.expect("head.dense.b", &[1, n_cls])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, fm: &FeatureMap) -> Result<Var> {
        baseline_head_on(tape, fm.data, b.var(self.weights), b.var(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert!(close(&squash(&[1.0, 0.0]), &[0.5, 0.0], 1e-15));
        let big = squash(&[1000.0, 0.0]);
        assert!((big[0] - 1e6 / (1.0 + 1e6)).abs() < 1e-15);
        assert!(big[0] < 1.0 && big[0] > 0.999_998);
    }

    #[test]
    fn primary_capsule_count_and_range() {
        let config = CapsuleHeadConfig {
            n_pc: 8,
            d: 4,
            ..Default::default()
        };
        let mut rng = SeededRng::new(5);
        let fm = Tensor::new(vec![891, 3], (0..891 * 3).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let proj = Tensor::new(vec![3, 32], (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let caps = primary_capsules(&fm, &proj, &config).unwrap();
        assert_eq!(caps.count(), 7128);
        assert_eq!(caps.dim(), 4);
        assert!(caps.norms().iter().all(|&n| n < 1.0));
        let zero = primary_capsules(&fm, &Tensor::zeros(&[3, 32]), &config).unwrap();
        assert!(zero.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_shape_checked() {
        let config = CapsuleHeadConfig {
            n_pc: 2,
            d: 3,
            ..Default::default()
        };
        let err = primary_capsules(&Tensor::zeros(&[4, 5]), &Tensor::zeros(&[5, 5]), &config);
        assert!(err.is_err());
    }

    #[test]
    fn compress_selects_and_checks() {
        let primary = CapsuleStack::new(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap()).unwrap();
        let one_hot = Tensor::matrix(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let c = compress(&primary, &one_hot).unwrap();
        assert_eq!(c.capsule(0), &[3.0, 4.0]);
        assert_eq!(c.capsule(1), &[5.0, 6.0]);
        let zero = compress(&primary, &Tensor::zeros(&[4, 3])).unwrap();
        assert!(zero.data.data().iter().all(|&v| v == 0.0));
        assert!(compress(&primary, &Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn compress_full_scale_shape() {
        let primary = CapsuleStack::new(Tensor::filled(&[7128, 16], 0.01)).unwrap();
        let c = compress(&primary, &Tensor::filled(&[128, 7128], 0.001)).unwrap();
        assert_eq!((c.count(), c.dim()), (128, 16));
    }

    #[test]
    fn first_couplings_are_uniform() {
        let config = CapsuleHeadConfig {
            n_cc: 3,
            d: 2,
            routing_iterations: 3,
            ..Default::default()
        };
        let mut rng = SeededRng::new(1);
        let u = CapsuleStack::new(Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let w = Tensor::new(vec![3, 2, 2, 2], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (v, state) = dynamic_routing(&u, &w, &config).unwrap();
        assert!(state.history[0].data().iter().all(|&c| c == 0.5));
        assert_eq!(state.history.len(), 3);
        assert!(v.norms().iter().all(|&n| (0.0..1.0).contains(&n)));
    }

    #[test]
    fn probabilities_and_prediction() {
        let equal = CapsuleStack::new(Tensor::matrix(&[vec![0.3, 0.4], vec![0.5, 0.0]]).unwrap()).unwrap();
        assert!(close(&class_probabilities(&equal), &[0.5, 0.5], 1e-15));
        let skewed = CapsuleStack::new(Tensor::matrix(&[vec![0.9, 0.0], vec![0.0, 0.1]]).unwrap()).unwrap();
        let p = class_probabilities(&skewed);
        let e = (0.8f64).exp();
        assert!(close(&p, &[e / (1.0 + e), 1.0 / (1.0 + e)], 1e-15));
        assert!((p[0] - 0.690).abs() < 5e-4);
        assert_eq!(predict(&p), 0);
        assert_eq!(predict(&[0.7, 0.3]), 0);
        assert_eq!(predict(&[0.5, 0.5]), 0);
        assert_eq!(predict(&[0.1, 0.9]), 1);
    }

    #[test]
    fn baseline_examples() {
        let fm = Tensor::filled(&[4, 3], 0.7);
        let p = baseline_head(&fm, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        // constant map: pooling returns the constant row
        let w = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let p = baseline_head(&fm, &w, &Tensor::zeros(&[1, 2])).unwrap();
        let e = (0.7f64).exp();
        assert!(close(&p, &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-14));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(baseline_head(&fm, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[1, 2])).is_err());
    }
}
