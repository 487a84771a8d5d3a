//! Encoder-decoder segmentation networks built from a declarative config,
//! plus training, checkpointing and inference.

mod checkpoint;
mod infer;
mod train;

pub use checkpoint::{Checkpoint, EpochStats, CHECKPOINT_MAGIC};
pub use infer::{segment, Segmentation};
pub use train::{
    fine_tune, pretrain_bilateral, train, ConcatSource, Sample, SampleSource, TrainOutcome, ValidationSplit,
    VecSource,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn3d::{
    concat_channels, split_channels, BatchNorm3d, Conv3d, Layer, LossKind, MaxPool3d, Mode,
    NnError, OptimizerKind, PRelu, Padding, Param, Real, Residual, Sequential, Softmax, Tensor,
    Upsample3d,
};
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture config: {0}")]
    InvalidConfig(String),
    #[error("ROI {dims:?} too small for depth {depth} (need at least {min} voxels per axis)")]
    RoiTooSmall {
        dims: [usize; 3],
        depth: usize,
        min: usize,
    },
    #[error("ROI {dims:?} must be divisible by {multiple} on every axis")]
    RoiIncompatible { dims: [usize; 3], multiple: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    DivergedTraining {
        epoch: usize,
        what: String,
        /// Last state with finite parameters.
        checkpoint: Box<Checkpoint>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Max-pooling and nearest-neighbour upsampling.
    Proposed,
    /// Strided and transposed convolutions, residual blocks.
    Ext,
}

/// Architecture and training schedule. Every field has a default, so a
/// JSON file only needs the values that differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Resolution levels including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    /// Explicit per-level channels; `base_channels · 2^level` when absent.
    pub channels: Option<Vec<usize>>,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub loss: LossKind,
    pub tract_weight: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    /// Held-out fraction when no explicit validation split is given.
    pub val_fraction: f64,
    /// Stop once validation Dice reaches this value.
    pub target_dice: Option<f64>,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            variant: Variant::Proposed,
            depth: 3,
            base_channels: 16,
            channels: None,
            in_channels: 6,
            kernel_size: 3,
            loss: LossKind::Wip,
            tract_weight: 3.0,
            optimizer: OptimizerKind::Adam,
            lr: 0.1,
            batch_size: 2,
            patience: 15,
            lr_factor: 0.5,
            epochs: 150,
            val_fraction: 0.1,
            target_dice: None,
            seed: 42,
        }
    }
}

impl ArchConfig {
    pub fn level_channels(&self) -> Vec<usize> {
        match &self.channels {
            Some(c) => c.clone(),
            None => (0..self.depth).map(|l| self.base_channels << l).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.depth < 1 {
            return bad("depth must be at least 1");
        }
        if self.depth > 16 {
            return bad("depth must be at most 16");
        }
        let ch = self.level_channels();
        if ch.len() != self.depth {
            return bad("channels list length must equal depth");
        }
        if ch.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if !(self.tract_weight > 0.0 && self.tract_weight.is_finite()) {
            return bad("tract weight must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("lr factor must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ArchConfig = serde_json::from_str(text).map_err(|e| NetError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NetError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Smallest accepted ROI extent per axis.
    pub fn min_roi(&self) -> usize {
        1 << self.depth
    }

    /// ROI extents must be multiples of this.
    pub fn roi_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_roi(&self, dims: [usize; 3]) -> Result<()> {
        if dims.iter().any(|&d| d < self.min_roi()) {
            return Err(NetError::RoiTooSmall {
                dims,
                depth: self.depth,
                min: self.min_roi(),
            });
        }
        if dims.iter().any(|&d| d % self.roi_multiple() != 0) {
            return Err(NetError::RoiIncompatible {
                dims,
                multiple: self.roi_multiple(),
            });
        }
        Ok(())
    }
}

/// (conv → BN → PReLU) × 2, optionally wrapped in a residual connection.
fn conv_block<T: Real>(
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    residual: bool,
    rng: &mut ChaCha8Rng,
) -> Box<dyn Layer<T>> {
    let mut s = Sequential::default();
    for (j, ci) in [(1, c_in), (2, c_out)] {
        s.push(Conv3d::new(&format!("{name}.conv{j}"), ci, c_out, k, 1, Padding::Same, false, rng));
        s.push(BatchNorm3d::new(&format!("{name}.bn{j}"), c_out));
        s.push(PRelu::new(&format!("{name}.prelu{j}"), c_out));
    }
    if residual {
        let proj = (c_in != c_out)
            .then(|| Conv3d::new(&format!("{name}.proj"), c_in, c_out, 1, 1, Padding::Same, false, rng));
        Box::new(Residual::new(s, proj))
    } else {
        Box::new(s)
    }
}

/// U-Net style encoder-decoder ending in a voxelwise softmax over
/// (background, tract). Channel 1 of the output is the tract probability.
pub struct Network<T: Real> {
    cfg: ArchConfig,
    enc: Vec<Box<dyn Layer<T>>>,
    down: Vec<Box<dyn Layer<T>>>,
    up: Vec<Box<dyn Layer<T>>>,
    dec: Vec<Box<dyn Layer<T>>>,
    head: Conv3d<T>,
    softmax: Softmax<T>,
    skip_channels: Vec<usize>,
    up_channels: Vec<usize>,
}

/// Build a network with He-normal weights drawn from `cfg.seed`.
pub fn build<T: Real>(cfg: &ArchConfig) -> Result<Network<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ch = cfg.level_channels();
    let k = cfg.kernel_size;
    let ext = cfg.variant == Variant::Ext;
    let mut enc = Vec::new();
    let mut down: Vec<Box<dyn Layer<T>>> = Vec::new();
    let mut c_prev = cfg.in_channels;
    for (l, &c) in ch.iter().enumerate() {
        enc.push(conv_block(&format!("enc{l}"), c_prev, c, k, ext, &mut rng));
        if l + 1 < cfg.depth {
            if ext {
                down.push(Box::new(Conv3d::new(&format!("down{l}"), c, c, 2, 2, Padding::Valid, false, &mut rng)));
            } else {
                down.push(Box::new(MaxPool3d::new(2)));
            }
        }
        c_prev = c;
    }
    let mut up: Vec<Box<dyn Layer<T>>> = Vec::new();
    let mut dec = Vec::new();
    let mut up_channels = Vec::new();
    for l in 0..cfg.depth - 1 {
        let below = ch[l + 1];
        let uc = if ext {
            up.push(Box::new(Conv3d::new(&format!("up{l}"), below, ch[l], 2, 2, Padding::Valid, true, &mut rng)));
            ch[l]
        } else {
            up.push(Box::new(Upsample3d::new(2)));
            below
        };
        up_channels.push(uc);
        dec.push(conv_block(&format!("dec{l}"), ch[l] + uc, ch[l], k, ext, &mut rng));
    }
    let head = Conv3d::new("head", ch[0], 2, 1, 1, Padding::Same, false, &mut rng);
    Ok(Network {
        cfg: cfg.clone(),
        enc,
        down,
        up,
        dec,
        head,
        softmax: Softmax::new(),
        skip_channels: ch[..cfg.depth - 1].to_vec(),
        up_channels,
    })
}

/// [`build`] plus a check that `roi` suits the architecture.
pub fn build_for_roi<T: Real>(cfg: &ArchConfig, roi: [usize; 3]) -> Result<Network<T>> {
    cfg.validate()?;
    cfg.check_roi(roi)?;
    build(cfg)
}

impl<T: Real> Network<T> {
    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    /// Trainable parameter count (excludes batch-norm running statistics).
    pub fn n_trainable(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn head_mut(&mut self) -> &mut Conv3d<T> {
        &mut self.head
    }

    /// Copy parameter values (not optimizer state) from `params`, matched
    /// by name.
    pub fn load_values(&mut self, params: &[Param<T>]) -> Result<()> {
        let mut mine = self.params_mut();
        if mine.len() != params.len() {
            return Err(NetError::Checkpoint(format!(
                "{} parameters in network, {} provided",
                mine.len(),
                params.len()
            )));
        }
        for (dst, src) in mine.iter_mut().zip(params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(NetError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }

    /// Copy values and optimizer state.
    pub fn load_state(&mut self, params: &[Param<T>]) -> Result<()> {
        self.load_values(params)?;
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            dst.adam = src.adam.clone();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Param<T>> {
        self.params().into_iter().cloned().collect()
    }

    /// Tract probability of a `[1, C, z, y, x]` input in eval mode.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, Mode::Eval)?)
    }

    fn check_input(&self, x: &Tensor<T>) -> std::result::Result<(), NnError> {
        let s = x.spatial();
        self.cfg
            .check_roi([s[2], s[1], s[0]])
            .map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
        if x.c() != self.cfg.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.cfg.in_channels,
                x.c()
            )));
        }
        Ok(())
    }
}

impl<T: Real> Layer<T> for Network<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> crate::nn3d::Result<Tensor<T>> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let mut skips = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for l in 0..depth - 1 {
            h = self.enc[l].forward(&h, mode)?;
            h = {
                let d = self.down[l].forward(&h, mode)?;
                skips.push(h);
                d
            };
        }
        h = self.enc[depth - 1].forward(&h, mode)?;
        for l in (0..depth - 1).rev() {
            let u = self.up[l].forward(&h, mode)?;
            let cat = concat_channels(&skips[l], &u)?;
            h = self.dec[l].forward(&cat, mode)?;
        }
        let logits = self.head.forward(&h, mode)?;
        self.softmax.forward(&logits, mode)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> crate::nn3d::Result<Tensor<T>> {
        let depth = self.cfg.depth;
        let mut g = self.softmax.backward(gy)?;
        g = self.head.backward(&g)?;
        let mut skip_grads = vec![None; depth - 1];
        for l in 0..depth - 1 {
            g = self.dec[l].backward(&g)?;
            let (gs, gu) = split_channels(&g, self.skip_channels[l])?;
            debug_assert_eq!(gu.c(), self.up_channels[l]);
            skip_grads[l] = Some(gs);
            g = self.up[l].backward(&gu)?;
        }
        g = self.enc[depth - 1].backward(&g)?;
        for l in (0..depth - 1).rev() {
            g = self.down[l].backward(&g)?;
            g.add_assign(skip_grads[l].as_ref().expect("set above"))?;
            g = self.enc[l].backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for l in self.enc.iter().chain(&self.down).chain(&self.up).chain(&self.dec) {
            v.extend(l.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for l in self
            .enc
            .iter_mut()
            .chain(self.down.iter_mut())
            .chain(self.up.iter_mut())
            .chain(self.dec.iter_mut())
        {
            v.extend(l.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}
