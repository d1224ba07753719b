//! Three-branch fusion network for future activity sequences.
//!
//! One branch of fully connected layers reads the scene-object features, a
//! two-layer LSTM reads the features of the last `window` observed
//! activities, and a third branch of fully connected layers reads the last
//! observed activity's features. The branch outputs are concatenated into a
//! merge layer, from which `horizon` independent softmax heads predict the
//! future labels and a single ReLU node regresses the start time of the
//! future sequence. Training minimizes mean cross-entropy over the heads plus
//! a weighted mean squared error on the time.
//!
//! Ground-truth labels of the observed activities are never used as inputs,
//! at training or prediction time; only their features are.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::VideoRecord;
use crate::layers::{
    lstm_forward_sequence, Activation, DenseBinding, DenseLayer, DropoutMode, DropoutSpec,
    LstmBinding, LstmLayer, SequenceBatch,
};
use crate::nd::{NdError, NodeId, Parameter, Tape, Tensor};
use crate::optim::Optimizer;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid predictor config: {0}")]
    Config(String),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("target class {class} out of range for {num_classes} classes")]
    TargetOutOfRange { class: usize, num_classes: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got} for {which}")]
    FeatureDim {
        which: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
}

/// Which context branches are active. The sequential branch is the backbone
/// and cannot be removed; scene and time are the ablation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub scene: bool,
    pub sequence: bool,
    pub time: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches {
            scene: true,
            sequence: true,
            time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub num_classes: usize,
    /// Number of observed activities fed to the LSTM branch.
    pub window: usize,
    /// Number of future activities predicted jointly.
    pub horizon: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub branches: Branches,
    /// Max-probability threshold below which a prediction is reported as
    /// unknown.
    pub unknown_threshold: f64,
    /// Weight of the start-time regression term in the joint loss.
    pub lambda_time: f64,
    /// Standardize inter-activity times against the training set instead of
    /// regressing raw seconds.
    pub time_standardize: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            num_classes: 2,
            window: 3,
            horizon: 3,
            hidden: 256,
            dropout: 0.2,
            branches: Branches::default(),
            unknown_threshold: 0.1,
            lambda_time: 1.0,
            time_standardize: false,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.window < 1 {
            return Err(PredictorError::Config("window must be >= 1".into()));
        }
        if self.horizon < 1 {
            return Err(PredictorError::Config("horizon must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(PredictorError::Config("num_classes must be >= 2".into()));
        }
        if self.hidden < 1 {
            return Err(PredictorError::Config("hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PredictorError::Config("dropout must lie in [0, 1)".into()));
        }
        if !(0.0 < self.unknown_threshold && self.unknown_threshold < 1.0) {
            return Err(PredictorError::Config(
                "unknown_threshold must lie in (0, 1)".into(),
            ));
        }
        if !self.branches.sequence {
            return Err(PredictorError::Config(
                "the sequence branch cannot be disabled".into(),
            ));
        }
        Ok(())
    }
}

/// Input feature dimensions: activity features feed the LSTM and
/// last-activity branches, scene features feed the scene branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub activity: usize,
    pub scene: usize,
}

/// One supervised example: `window` observed activity feature vectors plus
/// the scene and last-activity features, mapped to `horizon` future labels
/// and the inter-activity time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub id: String,
    pub seq_features: Vec<Vec<f64>>,
    pub scene_feature: Vec<f64>,
    pub last_feature: Vec<f64>,
    pub target_labels: Vec<usize>,
    pub inter_time: f64,
}

/// Per-head probability distributions over classes plus the predicted start
/// time (absent when the time branch is ablated).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub label_dists: Vec<Vec<f64>>,
    pub start_time: Option<f64>,
}

/// Slide a width-`window` observation over a video with stride one; each
/// position yields the next `horizon` labels and the start-time gap between
/// the last observed and first future activity. A video with `m` activities
/// produces `max(0, m - window - horizon + 1)` windows.
pub fn make_windows(video: &VideoRecord, cfg: &PredictorConfig) -> Vec<TrainingWindow> {
    let m = video.activities.len();
    let (w, h) = (cfg.window, cfg.horizon);
    if m < w + h {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(m - w - h + 1);
    for i in 0..=(m - w - h) {
        let obs = &video.activities[i..i + w];
        let last = &video.activities[i + w - 1];
        let future = &video.activities[i + w..i + w + h];
        out.push(TrainingWindow {
            id: format!("{}:{}", video.video_id, i),
            seq_features: obs.iter().map(|a| a.activity_feature.clone()).collect(),
            scene_feature: last.scene_feature.clone(),
            last_feature: last.activity_feature.clone(),
            target_labels: future.iter().map(|a| a.label).collect(),
            inter_time: future[0].start_s - last.start_s,
        });
    }
    out
}

/// Dense batch view over a set of training windows.
pub struct WindowBatch {
    pub seq: SequenceBatch,
    pub scene: Tensor,
    pub last: Tensor,
    /// targets[h][i] is example i's gold class for head h.
    pub targets: Vec<Vec<usize>>,
    pub times: Vec<f64>,
}

impl WindowBatch {
    pub fn from_windows(
        windows: &[&TrainingWindow],
        cfg: &PredictorConfig,
        dims: &FeatureDims,
    ) -> Result<Self, PredictorError> {
        if windows.is_empty() {
            return Err(PredictorError::EmptyDataset);
        }
        for w in windows {
            if w.seq_features.len() != cfg.window {
                return Err(PredictorError::Config(format!(
                    "window {} has {} observed steps, config says {}",
                    w.id,
                    w.seq_features.len(),
                    cfg.window
                )));
            }
            for f in &w.seq_features {
                check_dim("activity feature", dims.activity, f.len())?;
            }
            check_dim("scene feature", dims.scene, w.scene_feature.len())?;
            check_dim("activity feature", dims.activity, w.last_feature.len())?;
            if w.target_labels.len() != cfg.horizon {
                return Err(PredictorError::Config(format!(
                    "window {} has {} targets, config horizon is {}",
                    w.id,
                    w.target_labels.len(),
                    cfg.horizon
                )));
            }
            for &t in &w.target_labels {
                if t >= cfg.num_classes {
                    return Err(PredictorError::TargetOutOfRange {
                        class: t,
                        num_classes: cfg.num_classes,
                    });
                }
            }
        }
        let n = windows.len();
        let mut steps = Vec::with_capacity(cfg.window);
        for t in 0..cfg.window {
            let mut data = Vec::with_capacity(n * dims.activity);
            for w in windows {
                data.extend_from_slice(&w.seq_features[t]);
            }
            steps.push(Tensor::new(&[n, dims.activity], data)?);
        }
        let scene = Tensor::new(
            &[n, dims.scene],
            windows
                .iter()
                .flat_map(|w| w.scene_feature.iter().copied())
                .collect(),
        )?;
        let last = Tensor::new(
            &[n, dims.activity],
            windows
                .iter()
                .flat_map(|w| w.last_feature.iter().copied())
                .collect(),
        )?;
        let targets = (0..cfg.horizon)
            .map(|h| windows.iter().map(|w| w.target_labels[h]).collect())
            .collect();
        let times = windows.iter().map(|w| w.inter_time).collect();
        Ok(WindowBatch {
            seq: SequenceBatch::full(steps)?,
            scene,
            last,
            targets,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn check_dim(which: &'static str, expected: usize, got: usize) -> Result<(), PredictorError> {
    if expected != got {
        return Err(PredictorError::FeatureDim {
            which,
            expected,
            got,
        });
    }
    Ok(())
}

#[derive(Debug)]
pub struct PredictorModel {
    pub cfg: PredictorConfig,
    pub dims: FeatureDims,
    scene_fc: Option<[DenseLayer; 2]>,
    seq_lstm: Vec<LstmLayer>,
    last_fc: Option<[DenseLayer; 2]>,
    merge: DenseLayer,
    heads: Vec<DenseLayer>,
    time_head: Option<DenseLayer>,
    /// (mean, std) of training inter-activity times when standardizing.
    pub time_norm: Option<(f64, f64)>,
}

pub struct PredictorBinding {
    flat: Vec<NodeId>,
    scene: Option<[DenseBinding; 2]>,
    lstm: Vec<LstmBinding>,
    last: Option<[DenseBinding; 2]>,
    merge: DenseBinding,
    heads: Vec<DenseBinding>,
    time: Option<DenseBinding>,
}

pub struct PredictorForward {
    /// One `[batch x num_classes]` probability node per head.
    pub head_probs: Vec<NodeId>,
    /// `[batch x 1]` predicted times, absent when the time branch is off.
    pub time_pred: Option<NodeId>,
}

/// Build the fusion network. Disabled branches are omitted from the model
/// and from the merge concatenation entirely; disabling the time branch also
/// removes the regression node and its loss term.
pub fn build_predictor(
    cfg: &PredictorConfig,
    dims: FeatureDims,
    seed: u64,
) -> Result<PredictorModel, PredictorError> {
    cfg.validate()?;
    if dims.activity == 0 || (cfg.branches.scene && dims.scene == 0) {
        return Err(PredictorError::Config(
            "feature dimensions must be positive".into(),
        ));
    }
    if !cfg.branches.scene && !cfg.branches.sequence && !cfg.branches.time {
        return Err(PredictorError::Config("all branches disabled".into()));
    }
    let h = cfg.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_fc = cfg.branches.scene.then(|| {
        [
            DenseLayer::new("scene0", dims.scene, h, Activation::Relu, &mut rng),
            DenseLayer::new("scene1", h, h, Activation::Relu, &mut rng),
        ]
    });
    let seq_lstm = vec![
        LstmLayer::new("lstm0", dims.activity, h, &mut rng),
        LstmLayer::new("lstm1", h, h, &mut rng),
    ];
    let last_fc = cfg.branches.time.then(|| {
        [
            DenseLayer::new("last0", dims.activity, h, Activation::Relu, &mut rng),
            DenseLayer::new("last1", h, h, Activation::Relu, &mut rng),
        ]
    });
    let n_branches = 1 + usize::from(cfg.branches.scene) + usize::from(cfg.branches.time);
    let merge = DenseLayer::new("merge", n_branches * h, h, Activation::Relu, &mut rng);
    let heads = (0..cfg.horizon)
        .map(|i| {
            DenseLayer::new(
                &format!("head{i}"),
                h,
                cfg.num_classes,
                Activation::Softmax,
                &mut rng,
            )
        })
        .collect();
    let time_head = cfg.branches.time.then(|| {
        let act = if cfg.time_standardize {
            Activation::Identity
        } else {
            Activation::Relu
        };
        DenseLayer::new("time", h, 1, act, &mut rng)
    });
    Ok(PredictorModel {
        cfg: cfg.clone(),
        dims,
        scene_fc,
        seq_lstm,
        last_fc,
        merge,
        heads,
        time_head,
        time_norm: None,
    })
}

impl PredictorModel {
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        if let Some(fc) = &self.scene_fc {
            for l in fc {
                out.extend(l.parameters());
            }
        }
        for l in &self.seq_lstm {
            out.extend(l.parameters());
        }
        if let Some(fc) = &self.last_fc {
            for l in fc {
                out.extend(l.parameters());
            }
        }
        out.extend(self.merge.parameters());
        for head in &self.heads {
            out.extend(head.parameters());
        }
        if let Some(t) = &self.time_head {
            out.extend(t.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        if let Some(fc) = &mut self.scene_fc {
            for l in fc {
                out.extend(l.parameters_mut());
            }
        }
        for l in &mut self.seq_lstm {
            out.extend(l.parameters_mut());
        }
        if let Some(fc) = &mut self.last_fc {
            for l in fc {
                out.extend(l.parameters_mut());
            }
        }
        out.extend(self.merge.parameters_mut());
        for head in &mut self.heads {
            out.extend(head.parameters_mut());
        }
        if let Some(t) = &mut self.time_head {
            out.extend(t.parameters_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Width of the merge layer input, i.e. the concatenation of the enabled
    /// branch outputs.
    pub fn merge_in_dim(&self) -> usize {
        self.merge.in_dim()
    }

    pub fn heads(&self) -> &[DenseLayer] {
        &self.heads
    }

    pub fn has_time_head(&self) -> bool {
        self.time_head.is_some()
    }

    /// Zero the output-layer weights in place. Softmax heads then emit
    /// uniform distributions and the time node emits its (zero) bias.
    pub fn zero_output_layers(&mut self) {
        for head in &mut self.heads {
            head.weight.value.fill(0.0);
            head.bias.value.fill(0.0);
        }
        if let Some(t) = &mut self.time_head {
            t.weight.value.fill(0.0);
            t.bias.value.fill(0.0);
        }
    }

    /// Bind parameter leaves from externally supplied ids, in `parameters()`
    /// order.
    pub fn binding_from_ids(&self, ids: &[NodeId]) -> PredictorBinding {
        assert_eq!(ids.len(), self.parameters().len(), "one id per parameter");
        let mut cursor = 0usize;
        let dense = |cursor: &mut usize| {
            let b = DenseBinding::new(ids[*cursor], ids[*cursor + 1]);
            *cursor += 2;
            b
        };
        let scene = self
            .scene_fc
            .as_ref()
            .map(|_| [dense(&mut cursor), dense(&mut cursor)]);
        let lstm = self
            .seq_lstm
            .iter()
            .map(|_| {
                let b = LstmBinding::from_ids(&ids[cursor..cursor + 12]);
                cursor += 12;
                b
            })
            .collect();
        let last = self
            .last_fc
            .as_ref()
            .map(|_| [dense(&mut cursor), dense(&mut cursor)]);
        let merge = dense(&mut cursor);
        let heads = self.heads.iter().map(|_| dense(&mut cursor)).collect();
        let time = self.time_head.as_ref().map(|_| dense(&mut cursor));
        assert_eq!(cursor, ids.len());
        PredictorBinding {
            flat: ids.to_vec(),
            scene,
            lstm,
            last,
            merge,
            heads,
            time,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> PredictorBinding {
        let ids: Vec<NodeId> = self
            .parameters()
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        self.binding_from_ids(&ids)
    }

    pub fn read_grads(&mut self, tape: &Tape, binding: &PredictorBinding) {
        let flat = binding.flat.clone();
        for (p, id) in self.parameters_mut().into_iter().zip(flat) {
            p.grad
                .add_scaled(tape.grad(id), 1.0)
                .expect("parameter grad shape");
        }
    }

    /// Tape forward pass over a window batch. Dropout fires only in train
    /// mode, drawing masks from `rng`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        binding: &PredictorBinding,
        batch: &WindowBatch,
        mode: DropoutMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<PredictorForward, PredictorError> {
        let drop = match mode {
            DropoutMode::Train => DropoutSpec::new(self.cfg.dropout)?.train(),
            DropoutMode::Eval => DropoutSpec::new(self.cfg.dropout)?.eval(),
        };
        let mut parts = Vec::new();
        if let (Some(fc), Some(bind)) = (&self.scene_fc, &binding.scene) {
            let x = tape.leaf(batch.scene.clone());
            let h1 = fc[0].forward(tape, &bind[0], x)?;
            let h1 = drop.apply(tape, h1, rng)?;
            let h2 = fc[1].forward(tape, &bind[1], h1)?;
            parts.push(drop.apply(tape, h2, rng)?);
        }
        let lstm_out = lstm_forward_sequence(tape, &self.seq_lstm, &binding.lstm, &batch.seq)?;
        parts.push(drop.apply(tape, lstm_out.last_hidden(), rng)?);
        if let (Some(fc), Some(bind)) = (&self.last_fc, &binding.last) {
            let x = tape.leaf(batch.last.clone());
            let h1 = fc[0].forward(tape, &bind[0], x)?;
            let h1 = drop.apply(tape, h1, rng)?;
            let h2 = fc[1].forward(tape, &bind[1], h1)?;
            parts.push(drop.apply(tape, h2, rng)?);
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        let merged = self.merge.forward(tape, &binding.merge, cat)?;
        let merged = drop.apply(tape, merged, rng)?;
        let head_probs = self
            .heads
            .iter()
            .zip(&binding.heads)
            .map(|(head, bind)| head.forward(tape, bind, merged))
            .collect::<Result<Vec<_>, _>>()?;
        let time_pred = match (&self.time_head, &binding.time) {
            (Some(t), Some(bind)) => Some(t.forward(tape, bind, merged)?),
            _ => None,
        };
        Ok(PredictorForward {
            head_probs,
            time_pred,
        })
    }

    /// Joint loss node: mean over batch and heads of -log p(gold), plus
    /// lambda times the mean squared time error.
    pub fn joint_loss_node(
        &self,
        tape: &mut Tape,
        fwd: &PredictorForward,
        batch: &WindowBatch,
    ) -> Result<NodeId, PredictorError> {
        let mut ce_total: Option<NodeId> = None;
        for (probs, targets) in fwd.head_probs.iter().zip(&batch.targets) {
            let picked = tape.gather_cols(*probs, targets)?;
            let lp = tape.ln(picked);
            let head_mean = tape.mean(lp);
            ce_total = Some(match ce_total {
                None => head_mean,
                Some(acc) => tape.add(acc, head_mean)?,
            });
        }
        let ce = tape.scale(
            ce_total.expect("at least one head"),
            -1.0 / self.heads.len() as f64,
        );
        let loss = match fwd.time_pred {
            None => ce,
            Some(pred) => {
                let gold: Vec<f64> = match self.time_norm {
                    Some((mean, std)) => batch
                        .times
                        .iter()
                        .map(|q| (q - mean) / std.max(1e-9))
                        .collect(),
                    None => batch.times.clone(),
                };
                let qt = tape.leaf(Tensor::new(&[gold.len(), 1], gold)?);
                let diff = tape.sub(pred, qt)?;
                let sq = tape.mul(diff, diff)?;
                let mse = tape.mean(sq);
                let weighted = tape.scale(mse, self.cfg.lambda_time);
                tape.add(ce, weighted)?
            }
        };
        Ok(loss)
    }

    /// Plain-tensor forward for one window's features; dropout is always off
    /// here.
    pub fn predict_sequence(
        &self,
        seq_features: &[Vec<f64>],
        scene_feature: &[f64],
        last_feature: &[f64],
    ) -> Result<PredictionOutput, PredictorError> {
        if seq_features.len() != self.cfg.window {
            return Err(PredictorError::Config(format!(
                "expected {} observed steps, got {}",
                self.cfg.window,
                seq_features.len()
            )));
        }
        for f in seq_features {
            check_dim("activity feature", self.dims.activity, f.len())?;
        }
        check_dim("activity feature", self.dims.activity, last_feature.len())?;
        let mut parts: Vec<Tensor> = Vec::new();
        if let Some(fc) = &self.scene_fc {
            check_dim("scene feature", self.dims.scene, scene_feature.len())?;
            let x = Tensor::new(&[1, self.dims.scene], scene_feature.to_vec())?;
            let h = fc[1].infer(&fc[0].infer(&x)?)?;
            parts.push(h);
        }
        let mut h = Tensor::zeros(&[1, self.cfg.hidden]);
        let mut c = Tensor::zeros(&[1, self.cfg.hidden]);
        let mut h2 = Tensor::zeros(&[1, self.cfg.hidden]);
        let mut c2 = Tensor::zeros(&[1, self.cfg.hidden]);
        for step in seq_features {
            let x = Tensor::new(&[1, self.dims.activity], step.clone())?;
            let (nh, nc) = self.seq_lstm[0].infer_step(&x, &h, &c)?;
            h = nh;
            c = nc;
            let (nh2, nc2) = self.seq_lstm[1].infer_step(&h, &h2, &c2)?;
            h2 = nh2;
            c2 = nc2;
        }
        parts.push(h2);
        if let Some(fc) = &self.last_fc {
            let x = Tensor::new(&[1, self.dims.activity], last_feature.to_vec())?;
            parts.push(fc[1].infer(&fc[0].infer(&x)?)?);
        }
        let mut cat_data = Vec::new();
        for p in &parts {
            cat_data.extend_from_slice(p.data());
        }
        let cat = Tensor::new(&[1, cat_data.len()], cat_data)?;
        let merged = self.merge.infer(&cat)?;
        let label_dists = self
            .heads
            .iter()
            .map(|head| head.infer(&merged).map(|t| t.data().to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let start_time = match &self.time_head {
            None => None,
            Some(t) => {
                let raw = t.infer(&merged)?.data()[0];
                let q = match self.time_norm {
                    Some((mean, std)) => (raw * std.max(1e-9) + mean).max(0.0),
                    None => raw,
                };
                Some(q)
            }
        };
        Ok(PredictionOutput {
            label_dists,
            start_time,
        })
    }

    pub fn predict_window(&self, w: &TrainingWindow) -> Result<PredictionOutput, PredictorError> {
        self.predict_sequence(&w.seq_features, &w.scene_feature, &w.last_feature)
    }
}

/// Joint loss of a batch of predictions against gold labels and times:
/// mean over examples and heads of -log p(gold) plus lambda times the mean
/// squared time error. The time term is skipped when predictions carry no
/// start time.
pub fn joint_loss(
    outputs: &[PredictionOutput],
    targets: &[Vec<usize>],
    times: &[f64],
    lambda: f64,
) -> Result<f64, PredictorError> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(PredictorError::EmptyDataset);
    }
    let n = outputs.len() as f64;
    let horizon = outputs[0].label_dists.len() as f64;
    let mut ce = 0.0;
    for (out, target) in outputs.iter().zip(targets) {
        for (dist, &gold) in out.label_dists.iter().zip(target) {
            if gold >= dist.len() {
                return Err(PredictorError::TargetOutOfRange {
                    class: gold,
                    num_classes: dist.len(),
                });
            }
            ce -= dist[gold].ln();
        }
    }
    ce /= n * horizon;
    let mut loss = ce;
    if outputs[0].start_time.is_some() {
        let mut mse = 0.0;
        for (out, &q) in outputs.iter().zip(times) {
            let q_hat = out.start_time.expect("uniform time availability");
            mse += (q - q_hat) * (q - q_hat);
        }
        loss += lambda * mse / n;
    }
    Ok(loss)
}

/// Minibatch training with dropout, deterministic under `seed`. Returns the
/// per-epoch mean training loss.
pub fn train_predictor(
    model: &mut PredictorModel,
    windows: &[TrainingWindow],
    epochs: usize,
    batch_size: usize,
    optimizer: &mut Optimizer,
    seed: u64,
) -> Result<Vec<f64>, PredictorError> {
    if windows.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    if model.cfg.time_standardize && model.time_norm.is_none() {
        let mean = windows.iter().map(|w| w.inter_time).sum::<f64>() / windows.len() as f64;
        let var = windows
            .iter()
            .map(|w| (w.inter_time - mean).powi(2))
            .sum::<f64>()
            / windows.len() as f64;
        model.time_norm = Some((mean, var.sqrt()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let refs: Vec<&TrainingWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = WindowBatch::from_windows(&refs, &model.cfg, &model.dims)?;
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let fwd =
                model.forward_batch(&mut tape, &binding, &batch, DropoutMode::Train, &mut rng)?;
            let loss = model.joint_loss_node(&mut tape, &fwd, &batch)?;
            epoch_loss += tape.value(loss).data()[0] * chunk.len() as f64;
            tape.backward(loss)?;
            for p in model.parameters_mut() {
                p.zero_grad();
            }
            model.read_grads(&tape, &binding);
            let mut params = model.parameters_mut();
            optimizer.step(&mut params)?;
        }
        curve.push(epoch_loss / windows.len() as f64);
    }
    Ok(curve)
}

/// The `k` highest-probability classes in descending order; ties break
/// toward the lower class index.
pub fn top_k(dist: &[f64], k: usize) -> Result<Vec<(usize, f64)>, PredictorError> {
    if k == 0 || k > dist.len() {
        return Err(PredictorError::Config(format!(
            "k must lie in [1, {}], got {k}",
            dist.len()
        )));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&i| (i, dist[i])).collect())
}

/// Gate decision for a single distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatedLabel {
    Known(usize),
    Unknown,
}

/// Report the argmax class only when its probability reaches the threshold;
/// otherwise the activity is treated as a label never seen in training.
pub fn unknown_gate(dist: &[f64], tau: f64) -> Result<GatedLabel, PredictorError> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(PredictorError::Config(format!(
            "threshold must lie in (0, 1), got {tau}"
        )));
    }
    let top = top_k(dist, 1)?[0];
    Ok(if top.1 >= tau {
        GatedLabel::Known(top.0)
    } else {
        GatedLabel::Unknown
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ActivityInstance;
    use crate::nd::grad_check;
    use crate::optim::{make_optimizer, OptimizerKind};
    use rand::Rng;

    fn small_cfg(c: usize, w: usize, h: usize) -> PredictorConfig {
        PredictorConfig {
            num_classes: c,
            window: w,
            horizon: h,
            hidden: 6,
            dropout: 0.0,
            ..PredictorConfig::default()
        }
    }

    fn dims(a: usize, s: usize) -> FeatureDims {
        FeatureDims {
            activity: a,
            scene: s,
        }
    }

    fn rand_window(
        rng: &mut ChaCha8Rng,
        cfg: &PredictorConfig,
        d: &FeatureDims,
        id: &str,
    ) -> TrainingWindow {
        let mut feats =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        TrainingWindow {
            id: id.to_string(),
            seq_features: (0..cfg.window).map(|_| feats(d.activity)).collect(),
            scene_feature: feats(d.scene),
            last_feature: feats(d.activity),
            target_labels: (0..cfg.horizon)
                .map(|_| rng.random_range(0..cfg.num_classes))
                .collect(),
            inter_time: rng.random_range(0.0..5.0),
        }
    }

    fn toy_video(m: usize, dim: usize) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            activities: (0..m)
                .map(|i| ActivityInstance {
                    label: i % 3,
                    start_s: 10.0 * i as f64,
                    end_s: 10.0 * i as f64 + 4.0,
                    activity_feature: vec![i as f64; dim],
                    scene_feature: vec![0.5; dim],
                    scene_objects: vec!["bowl".into()],
                    caption_tokens: vec!["x".into()],
                })
                .collect(),
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = 5usize;
        let (da, ds, h) = (64usize, 32usize, 256usize);
        let cfg = PredictorConfig {
            num_classes: c,
            hidden: h,
            ..PredictorConfig::default()
        };
        let model = build_predictor(&cfg, dims(da, ds), 0).unwrap();
        let dense = |i: usize, o: usize| i * o + o;
        let lstm = |i: usize| 4 * (i * h) + 4 * (h * h) + 4 * h;
        let expected = dense(ds, h)
            + dense(h, h)                // scene branch
            + lstm(da) + lstm(h)         // two LSTM layers
            + dense(da, h) + dense(h, h) // last-activity branch
            + dense(3 * h, h)            // merge over three branches
            + cfg.horizon * dense(h, c)  // softmax heads
            + dense(h, 1); // time regression node
        assert_eq!(model.num_parameters(), expected);
    }

    #[test]
    fn sequence_only_concat_width_is_hidden() {
        let cfg = PredictorConfig {
            branches: Branches {
                scene: false,
                sequence: true,
                time: false,
            },
            ..small_cfg(4, 3, 3)
        };
        let model = build_predictor(&cfg, dims(5, 4), 0).unwrap();
        assert_eq!(model.merge_in_dim(), cfg.hidden);
        assert!(!model.has_time_head());
    }

    #[test]
    fn horizon_one_output_width_is_classes_plus_time_node() {
        let cfg = small_cfg(7, 3, 1);
        let model = build_predictor(&cfg, dims(4, 3), 0).unwrap();
        assert_eq!(model.heads().len(), 1);
        assert_eq!(model.heads()[0].out_dim(), 7);
        assert!(model.has_time_head());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = small_cfg(3, 3, 3);
        cfg.window = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(3, 3, 3);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(3, 3, 3);
        cfg.branches.sequence = false;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(3, 3, 3);
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn window_counts_follow_the_formula() {
        let cfg = small_cfg(3, 3, 3);
        assert_eq!(make_windows(&toy_video(7, 2), &cfg).len(), 2);
        assert_eq!(make_windows(&toy_video(5, 2), &cfg).len(), 0);
        assert_eq!(make_windows(&toy_video(6, 2), &cfg).len(), 1);
    }

    #[test]
    fn windows_observe_k_back_and_predict_k_forward() {
        // Observing activities k-2, k-1, k must target k+1, k+2, k+3.
        let cfg = small_cfg(3, 3, 3);
        let video = toy_video(9, 2);
        let windows = make_windows(&video, &cfg);
        for (i, w) in windows.iter().enumerate() {
            // Feature of observed step j is the constant vector j.
            for (t, feat) in w.seq_features.iter().enumerate() {
                assert_eq!(feat[0] as usize, i + t);
            }
            let expected: Vec<usize> = (i + 3..i + 6).map(|j| j % 3).collect();
            assert_eq!(w.target_labels, expected);
            // q = start(first future) - start(last observed)
            assert!((w.inter_time - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let out = PredictionOutput {
            label_dists: vec![vec![0.0, 1.0, 0.0]],
            start_time: Some(2.5),
        };
        let loss = joint_loss(&[out], &[vec![1]], &[2.5], 1.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_four_class_loss_is_ln4() {
        let out = PredictionOutput {
            label_dists: vec![vec![0.25; 4]],
            start_time: Some(1.0),
        };
        let loss = joint_loss(&[out], &[vec![2]], &[1.0], 1.0).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_rejects_out_of_range_targets() {
        let out = PredictionOutput {
            label_dists: vec![vec![0.5, 0.5]],
            start_time: None,
        };
        assert!(matches!(
            joint_loss(&[out], &[vec![2]], &[0.0], 1.0).unwrap_err(),
            PredictorError::TargetOutOfRange { .. }
        ));
    }

    #[test]
    fn eq_losses_match_naive_double_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let c = rng.random_range(2..6);
            let h = rng.random_range(1..4);
            let mut outputs = Vec::new();
            let mut targets: Vec<Vec<usize>> = Vec::new();
            let mut times = Vec::new();
            for _ in 0..n {
                let dists: Vec<Vec<f64>> = (0..h)
                    .map(|_| {
                        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                        let s: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / s).collect()
                    })
                    .collect();
                outputs.push(PredictionOutput {
                    label_dists: dists,
                    start_time: Some(rng.random_range(0.0..10.0)),
                });
                targets.push((0..h).map(|_| rng.random_range(0..c)).collect());
                times.push(rng.random_range(0.0..10.0));
            }
            let fast = joint_loss(&outputs, &targets, &times, 1.0).unwrap();

            // Naive cross-entropy: -(1/n) sum_i sum_j 1(y_i = j) log p(y_i = j | x_i)
            // per head, then averaged over heads.
            let mut ce = 0.0;
            for head in 0..h {
                let mut head_ce = 0.0;
                for i in 0..n {
                    for j in 0..c {
                        if targets[i][head] == j {
                            head_ce -= outputs[i].label_dists[head][j].ln();
                        }
                    }
                }
                ce += head_ce / n as f64;
            }
            ce /= h as f64;
            // Naive squared error: (1/n) sum_i (q_i - q_hat_i)^2.
            let mut mse = 0.0;
            for i in 0..n {
                let d = times[i] - outputs[i].start_time.unwrap();
                mse += d * d;
            }
            mse /= n as f64;

            assert!(
                (fast - (ce + mse)).abs() < 1e-12,
                "fast {fast} naive {}",
                ce + mse
            );
        }
    }

    #[test]
    fn tape_loss_equals_pure_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg(4, 2, 2);
        let d = dims(3, 2);
        let model = build_predictor(&cfg, d, 7).unwrap();
        let windows: Vec<TrainingWindow> = (0..5)
            .map(|i| rand_window(&mut rng, &cfg, &d, &format!("w{i}")))
            .collect();
        let refs: Vec<&TrainingWindow> = windows.iter().collect();
        let batch = WindowBatch::from_windows(&refs, &cfg, &d).unwrap();

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let fwd = model
            .forward_batch(&mut tape, &binding, &batch, DropoutMode::Eval, &mut rng)
            .unwrap();
        let loss_node = model.joint_loss_node(&mut tape, &fwd, &batch).unwrap();
        let tape_loss = tape.value(loss_node).data()[0];

        let outputs: Vec<PredictionOutput> = windows
            .iter()
            .map(|w| model.predict_window(w).unwrap())
            .collect();
        let targets: Vec<Vec<usize>> = windows.iter().map(|w| w.target_labels.clone()).collect();
        let times: Vec<f64> = windows.iter().map(|w| w.inter_time).collect();
        let pure = joint_loss(&outputs, &targets, &times, cfg.lambda_time).unwrap();
        assert!((tape_loss - pure).abs() < 1e-12, "{tape_loss} vs {pure}");
    }

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PredictorConfig {
            hidden: 4,
            ..small_cfg(3, 2, 2)
        };
        let d = dims(3, 2);
        let model = build_predictor(&cfg, d, 11).unwrap();
        let windows: Vec<TrainingWindow> = (0..3)
            .map(|i| rand_window(&mut rng, &cfg, &d, &format!("w{i}")))
            .collect();
        let refs: Vec<&TrainingWindow> = windows.iter().collect();
        let batch = WindowBatch::from_windows(&refs, &cfg, &d).unwrap();
        // Jitter every parameter, biases included: a zero bias behind a fully
        // dead relu row puts the pre-activation exactly on the kink, where
        // central differences disagree with the subgradient.
        let params: Vec<Parameter> = model
            .parameters()
            .into_iter()
            .map(|p| {
                let mut p = p.clone();
                for v in p.value.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
                p
            })
            .collect();
        let report = grad_check(&params, 1e-5, move |t, ids| {
            let binding = model.binding_from_ids(ids);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let fwd = model
                .forward_batch(t, &binding, &batch, DropoutMode::Eval, &mut r)
                .map_err(|_| NdError::EmptySequence)?;
            model
                .joint_loss_node(t, &fwd, &batch)
                .map_err(|_| NdError::EmptySequence)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "err {} at {}[{}]: analytic {} numeric {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );
    }

    #[test]
    fn memorizes_a_single_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PredictorConfig {
            hidden: 16,
            ..small_cfg(3, 2, 2)
        };
        let d = dims(3, 2);
        let mut model = build_predictor(&cfg, d, 1).unwrap();
        let windows = vec![rand_window(&mut rng, &cfg, &d, "w0")];
        let mut opt = make_optimizer(OptimizerKind::Adam, 0.01).unwrap();
        let curve = train_predictor(&mut model, &windows, 200, 8, &mut opt, 123).unwrap();
        assert!(curve[199] < 0.01, "final loss {}", curve[199]);
    }

    #[test]
    fn training_is_deterministic_under_a_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let cfg = small_cfg(3, 2, 2);
            let d = dims(3, 2);
            let mut model = build_predictor(&cfg, d, 2).unwrap();
            let windows: Vec<TrainingWindow> = (0..7)
                .map(|i| rand_window(&mut rng, &cfg, &d, &format!("w{i}")))
                .collect();
            let mut opt = make_optimizer(OptimizerKind::Adam, 0.005).unwrap();
            train_predictor(&mut model, &windows, 5, 3, &mut opt, 77).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_flattens_the_curve() {
        // Dropout is zero here so every epoch evaluates the same function.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = small_cfg(3, 2, 2);
        let d = dims(3, 2);
        let mut model = build_predictor(&cfg, d, 3).unwrap();
        let windows: Vec<TrainingWindow> = (0..4)
            .map(|i| rand_window(&mut rng, &cfg, &d, &format!("w{i}")))
            .collect();
        let mut opt = make_optimizer(OptimizerKind::Adam, 0.0).unwrap();
        let curve = train_predictor(&mut model, &windows, 4, 2, &mut opt, 5).unwrap();
        for v in &curve[1..] {
            assert!((v - curve[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_output_layers_predict_uniformly_with_zero_time() {
        let cfg = small_cfg(5, 2, 3);
        let d = dims(3, 2);
        let mut model = build_predictor(&cfg, d, 4).unwrap();
        model.zero_output_layers();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = rand_window(&mut rng, &cfg, &d, "w");
        let out = model.predict_window(&w).unwrap();
        assert_eq!(out.label_dists.len(), 3);
        for dist in &out.label_dists {
            for &p in dist {
                assert!((p - 0.2).abs() < 1e-12);
            }
        }
        assert_eq!(out.start_time, Some(0.0));
    }

    #[test]
    fn predicted_distributions_sum_to_one() {
        let cfg = small_cfg(6, 3, 3);
        let d = dims(4, 3);
        let model = build_predictor(&cfg, d, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let w = rand_window(&mut rng, &cfg, &d, "w");
            let out = model.predict_window(&w).unwrap();
            for dist in &out.label_dists {
                let s: f64 = dist.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            assert!(out.start_time.unwrap() >= 0.0);
        }
    }

    #[test]
    fn predict_rejects_wrong_feature_dims() {
        let cfg = small_cfg(3, 2, 1);
        let model = build_predictor(&cfg, dims(3, 2), 0).unwrap();
        let err = model
            .predict_sequence(&[vec![0.0; 4], vec![0.0; 4]], &[0.0; 2], &[0.0; 3])
            .unwrap_err();
        assert!(matches!(err, PredictorError::FeatureDim { .. }));
    }

    #[test]
    fn top_k_examples() {
        // Uniform distribution: the tie rule picks class 0 first.
        let uniform = vec![0.25; 4];
        assert_eq!(top_k(&uniform, 1).unwrap(), vec![(0, 0.25)]);

        let dist = vec![0.1, 0.7, 0.2];
        assert_eq!(top_k(&dist, 2).unwrap(), vec![(1, 0.7), (2, 0.2)]);

        assert!(top_k(&dist, 0).is_err());
        assert!(top_k(&dist, 4).is_err());
    }

    #[test]
    fn top_k_sets_are_nested() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let c = rng.random_range(5..12);
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let dist: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let as_set = |v: Vec<(usize, f64)>| -> std::collections::BTreeSet<usize> {
                v.into_iter().map(|(i, _)| i).collect()
            };
            let t1 = as_set(top_k(&dist, 1).unwrap());
            let t3 = as_set(top_k(&dist, 3).unwrap());
            let t5 = as_set(top_k(&dist, 5).unwrap());
            assert!(t1.is_subset(&t3) && t3.is_subset(&t5));
        }
    }

    #[test]
    fn unknown_gate_examples() {
        let mut dist = vec![0.1 / 9.0; 10];
        dist[4] = 0.9;
        assert_eq!(unknown_gate(&dist, 0.1).unwrap(), GatedLabel::Known(4));

        let uniform = vec![0.01; 100];
        assert_eq!(unknown_gate(&uniform, 0.1).unwrap(), GatedLabel::Unknown);

        assert!(unknown_gate(&uniform, 0.0).is_err());
        assert!(unknown_gate(&uniform, 1.0).is_err());
        // Pure function: same inputs, same decision.
        for _ in 0..5 {
            assert_eq!(unknown_gate(&uniform, 0.1).unwrap(), GatedLabel::Unknown);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn window_count_formula_exhaustive(m in 0usize..51, w in 1usize..6, h in 1usize..6) {
                let cfg = PredictorConfig {
                    num_classes: 3,
                    window: w,
                    horizon: h,
                    ..PredictorConfig::default()
                };
                let video = toy_video(m, 2);
                let expected = (m as isize - w as isize - h as isize + 1).max(0) as usize;
                prop_assert_eq!(make_windows(&video, &cfg).len(), expected);
            }
        }
    }
}
