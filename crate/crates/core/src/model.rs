//! MLP softmax classifiers, their checkpoints, and the epoch training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{argmax, NumArray};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::smoothing::SmoothingState;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Layer sizes run from the input dimension to the class count `Z`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    /// `input-64-64-classes`, the default desk architecture.
    pub fn desk(input: usize, classes: usize, seed: u64) -> Self {
        Self::new(input, &[64, 64], classes, seed)
    }

    pub fn new(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(classes);
        MlpSpec {
            layer_sizes,
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be at least 1"));
        }
        if self.classes() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.classes()
            )));
        }
        Ok(())
    }

    /// Parameter shapes in storage order: `W0, b0, W1, b1, …`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_sizes
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub params: Vec<NumArray>,
    pub epoch: usize,
    pub smoothing: Option<SmoothingState>,
}

/// He-normal weights and zero biases, drawn from a generator seeded by `spec.seed`.
pub fn init(spec: &MlpSpec) -> Result<Checkpoint> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = Vec::new();
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let weights = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        params.push(NumArray::matrix(fan_in, fan_out, weights)?);
        params.push(NumArray::zeros(&[fan_out]));
    }
    Ok(Checkpoint {
        spec: spec.clone(),
        params,
        epoch: 0,
        smoothing: None,
    })
}

impl Checkpoint {
    fn check_input(&self, x: &NumArray) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "model expects n×{} inputs, got {:?}",
                self.spec.input_dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &NumArray) -> Result<NumArray> {
        self.check_input(x)?;
        let layers = self.params.len() / 2;
        let mut h = x.clone();
        for l in 0..layers {
            h = h.matmul(&self.params[2 * l])?.add_row_bias(&self.params[2 * l + 1])?;
            if l + 1 < layers {
                h = h.relu();
            }
        }
        h.check_finite("logits")?;
        Ok(h)
    }

    /// Class probabilities, one row per input row.
    pub fn predict_proba(&self, x: &NumArray) -> Result<NumArray> {
        self.logits(x)?.softmax_rows()
    }

    /// Predicted classes; ties go to the lowest class index.
    pub fn predict(&self, x: &NumArray) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    /// Records the forward pass on `tape` and returns the logits node.
    /// `params` must be the tape nodes of this checkpoint's parameters.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(x)?)?;
        let layers = params.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_bias(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(NumArray::len).sum()
    }

    /// Byte-exact serialized form; see [`Checkpoint::from_bytes`].
    ///
    /// Layout (all integers little-endian):
    ///
    /// ```text
    /// magic        8 bytes  "CALCKPT\0"
    /// version      u32      1
    /// header_len   u64
    /// header       JSON     {"spec":…,"epoch":…,"shapes":[…],"smoothing":…}
    /// params       f64 LE   every array in storage order, row-major
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            epoch: self.epoch,
            shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
            smoothing: self.smoothing.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + header_len)
            .ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
        header.spec.validate()?;
        if header.shapes != header.spec.param_shapes() {
            return Err(fmt("parameter shapes disagree with spec"));
        }
        let mut rest = &bytes[20 + header_len..];
        let mut params = Vec::with_capacity(header.shapes.len());
        for shape in header.shapes {
            let n: usize = shape.iter().product();
            if rest.len() < 8 * n {
                return Err(fmt("truncated parameters"));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[8 * n..];
            params.push(NumArray::new(shape, data)?);
        }
        if !rest.is_empty() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            params,
            epoch: header.epoch,
            smoothing: header.smoothing,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// Hash of the parameter bytes only, ignoring epoch and smoothing snapshot.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CALCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: MlpSpec,
    epoch: usize,
    shapes: Vec<Vec<usize>>,
    smoothing: Option<SmoothingState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Adam with the usual β₁ = 0.9, β₂ = 0.999, ε = 1e-8, or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let (first, second) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer {
            kind,
            lr,
            step: 0,
            first,
            second,
        }
    }

    pub fn step(&mut self, params: &mut [NumArray], grads: &[NumArray]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - Self::BETA1.powi(self.step);
                let bc2 = 1.0 - Self::BETA2.powi(self.step);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[k];
                    let v = &mut self.second[k];
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * gv;
                        v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * gv * gv;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

/// Source of per-example soft labels, refreshed once per epoch.
pub trait Supervisor {
    /// Soft-label matrix (`n × Z`) for the epoch about to run (1-based).
    fn soft_labels(&mut self, epoch: usize, ckpt: &Checkpoint) -> Result<NumArray>;

    /// Called after the epoch's optimizer steps.
    fn end_epoch(&mut self, _epoch: usize, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }

    /// Snapshot stored in the final checkpoint, if any.
    fn smoothing_state(&self) -> Option<&SmoothingState> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
}

/// Runs epochs one at a time so callers can interleave work between them.
#[derive(Debug, Clone)]
pub struct Trainer {
    ckpt: Checkpoint,
    cfg: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(ckpt: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(
            cfg.optimizer,
            cfg.learning_rate,
            ckpt.params.iter().map(NumArray::len),
        );
        Ok(Trainer {
            ckpt,
            cfg: cfg.clone(),
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn set_smoothing(&mut self, state: Option<SmoothingState>) {
        self.ckpt.smoothing = state;
    }

    /// One pass over `x` in a freshly shuffled order. Returns the mean loss.
    pub fn run_epoch(&mut self, x: &NumArray, targets: &NumArray) -> Result<f64> {
        let n = x.rows();
        if targets.rows() != n || targets.cols() != self.ckpt.spec.classes() {
            return Err(Error::Shape(format!(
                "targets {:?} for {n} examples and {} classes",
                targets.shape(),
                self.ckpt.spec.classes()
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let xb = x.select_rows(batch);
            let tb = targets.select_rows(batch);

            let mut tape = Tape::new();
            let params: Vec<NodeId> = self.ckpt.params.iter().map(|p| tape.param(p.clone())).collect();
            let input = tape.constant(xb);
            let logits = self.ckpt.forward_on_tape(&mut tape, &params, input)?;
            let probs = tape.softmax(logits)?;
            let loss = tape.cross_entropy_soft(probs, &tb)?;
            let value = tape.value(loss)?.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {} is {value}",
                    self.ckpt.epoch + 1
                )));
            }
            let grads = tape.grad(loss, &params)?;
            self.optimizer.step(&mut self.ckpt.params, &grads);
            total += value * batch.len() as f64;
        }
        self.ckpt.epoch += 1;
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!(
                "mean training loss at epoch {} is {mean}",
                self.ckpt.epoch
            )));
        }
        Ok(mean)
    }
}

/// Trains for `cfg.epochs` epochs, asking `supervisor` for soft labels before
/// each epoch and notifying it (then `on_epoch`) after.
pub fn train<S, F>(
    ckpt: Checkpoint,
    data: &Dataset,
    supervisor: &mut S,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Checkpoint>
where
    S: Supervisor + ?Sized,
    F: FnMut(&EpochReport, &Checkpoint) -> Result<()>,
{
    if data.dim() != ckpt.spec.input_dim() || data.classes() != ckpt.spec.classes() {
        return Err(Error::Shape(format!(
            "dataset is {}-dim with {} classes; model is {:?}",
            data.dim(),
            data.classes(),
            ckpt.spec.layer_sizes
        )));
    }
    let mut trainer = Trainer::new(ckpt, cfg)?;
    for _ in 0..cfg.epochs {
        let epoch = trainer.checkpoint().epoch + 1;
        let targets = supervisor.soft_labels(epoch, trainer.checkpoint())?;
        let loss = trainer.run_epoch(data.features(), &targets)?;
        supervisor.end_epoch(epoch, trainer.checkpoint())?;
        trainer.set_smoothing(supervisor.smoothing_state().cloned());
        on_epoch(&EpochReport { epoch, loss }, trainer.checkpoint())?;
    }
    Ok(trainer.into_checkpoint())
}
