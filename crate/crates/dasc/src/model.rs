//! The core model: a convolutional stack mapping a clip's feature tensor to a
//! layer-normalized embedding, binary mask application, and the two softmax
//! heads for acoustic scene and domain classification.
//!
//! Masking always happens after normalization; the heads only ever see the
//! normalized (and possibly masked) embedding.

use crate::error::{config_err, Result};
use crate::numerics::{NodeId, ParamStore, Scalar, Tape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One convolutional layer: `filters` kernels of extent `kernel`, stride 1,
/// same padding, optionally followed by a max-pool of extent `pool`
/// (pool stride equals the window).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub pool: Option<(usize, usize)>,
}

/// Activation applied after convolutional and hidden dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Full description of the core model and heads.
///
/// `embedding` is the effective embedding size: the training harness doubles
/// it for masked configurations before constructing the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub time_frames: usize,
    pub mel_bands: usize,
    pub channels: usize,
    pub embedding: usize,
    pub scene_classes: usize,
    pub domain_classes: usize,
    pub conv: Vec<ConvLayerSpec>,
    /// Dense widths between the pooled conv output and the embedding layer.
    pub hidden_dense: Vec<usize>,
    pub layer_norm_eps: f64,
    pub activation: Activation,
}

impl ModelConfig {
    /// Small configuration for unit tests and full-model gradient checks.
    pub fn tiny(embedding: usize, scene_classes: usize, domain_classes: usize) -> Self {
        ModelConfig {
            time_frames: 8,
            mel_bands: 8,
            channels: 1,
            embedding,
            scene_classes,
            domain_classes,
            conv: vec![
                ConvLayerSpec {
                    filters: 3,
                    kernel: (3, 3),
                    pool: Some((2, 2)),
                },
                ConvLayerSpec {
                    filters: 4,
                    kernel: (3, 3),
                    pool: None,
                },
            ],
            hidden_dense: vec![10],
            layer_norm_eps: 1e-5,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding < 2 || self.embedding % 2 != 0 {
            return config_err(format!(
                "embedding size {} must be even and at least 2 (masks split it into halves)",
                self.embedding
            ));
        }
        if self.scene_classes < 2 || self.domain_classes < 2 {
            return config_err(format!(
                "need at least 2 scene and 2 domain classes, got {} and {}",
                self.scene_classes, self.domain_classes
            ));
        }
        if self.time_frames == 0 || self.mel_bands == 0 || self.channels == 0 {
            return config_err("input extents must be positive");
        }
        if self.layer_norm_eps <= 0.0 {
            return config_err(format!(
                "layer norm epsilon {} must be positive",
                self.layer_norm_eps
            ));
        }
        // walk the spatial extents through the stack
        let (mut h, mut w) = (self.time_frames, self.mel_bands);
        for (i, layer) in self.conv.iter().enumerate() {
            if layer.filters == 0 || layer.kernel.0 == 0 || layer.kernel.1 == 0 {
                return config_err(format!("conv layer {i} has a zero extent"));
            }
            if let Some((ph, pw)) = layer.pool {
                if ph == 0 || pw == 0 {
                    return config_err(format!("conv layer {i} has a zero pool extent"));
                }
                if ph > h || pw > w {
                    return config_err(format!(
                        "conv layer {i} pool {ph}x{pw} larger than remaining extent {h}x{w}"
                    ));
                }
                h = (h - ph) / ph + 1;
                w = (w - pw) / pw + 1;
            }
        }
        for (i, &units) in self.hidden_dense.iter().enumerate() {
            if units == 0 {
                return config_err(format!("hidden dense layer {i} has zero units"));
            }
        }
        Ok(())
    }

    /// Channel count entering the dense stack (after global average pooling).
    fn pooled_channels(&self) -> usize {
        self.conv
            .last()
            .map(|l| l.filters)
            .unwrap_or(self.channels)
    }
}

/// Which half of the embedding a mask exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLabel {
    Plus,
    Minus,
    AllOnes,
}

/// Block-structured binary embedding mask. Only the three labeled patterns
/// are constructible: plus (ones in the first half), minus (the complement),
/// and all-ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    label: MaskLabel,
    len: usize,
}

impl MaskPattern {
    fn checked(label: MaskLabel, len: usize) -> Result<Self> {
        if len < 2 || len % 2 != 0 {
            return config_err(format!(
                "mask length {len} must be even and at least 2"
            ));
        }
        Ok(MaskPattern { label, len })
    }

    pub fn plus(len: usize) -> Result<Self> {
        Self::checked(MaskLabel::Plus, len)
    }

    pub fn minus(len: usize) -> Result<Self> {
        Self::checked(MaskLabel::Minus, len)
    }

    pub fn all_ones(len: usize) -> Result<Self> {
        Self::checked(MaskLabel::AllOnes, len)
    }

    pub fn label(&self) -> MaskLabel {
        self.label
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        match self.label {
            MaskLabel::Plus => i < self.len / 2,
            MaskLabel::Minus => i >= self.len / 2,
            MaskLabel::AllOnes => true,
        }
    }

    pub fn bits<T: Scalar>(&self) -> Vec<T> {
        (0..self.len)
            .map(|i| if self.bit(i) { T::one() } else { T::zero() })
            .collect()
    }
}

/// Node handles for one forward pass: both head distributions plus the raw
/// (normalized) and masked embeddings.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub y_hat_a: NodeId,
    pub y_hat_d: NodeId,
    pub z: NodeId,
    pub z_tilde: NodeId,
}

/// Core model `f` plus heads `g_A`/`g_D`. Holds only the topology; parameter
/// values live in a [`ParamStore`] keyed by the names this model declares.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Declared parameters in creation order: (name, shape, fan-in).
    fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let cfg = &self.config;
        let mut specs = Vec::new();
        let mut cin = cfg.channels;
        for (i, layer) in cfg.conv.iter().enumerate() {
            let (kh, kw) = layer.kernel;
            specs.push((
                format!("conv{i}.kernel"),
                vec![kh, kw, cin, layer.filters],
                kh * kw * cin,
            ));
            specs.push((format!("conv{i}.bias"), vec![layer.filters], 0));
            cin = layer.filters;
        }
        let mut width = cfg.pooled_channels();
        for (i, &units) in cfg.hidden_dense.iter().enumerate() {
            specs.push((format!("dense{i}.weight"), vec![width, units], width));
            specs.push((format!("dense{i}.bias"), vec![units], 0));
            width = units;
        }
        specs.push(("embed.weight".into(), vec![width, cfg.embedding], width));
        specs.push(("embed.bias".into(), vec![cfg.embedding], 0));
        specs.push((
            "head_a.weight".into(),
            vec![cfg.embedding, cfg.scene_classes],
            cfg.embedding,
        ));
        specs.push(("head_a.bias".into(), vec![cfg.scene_classes], 0));
        specs.push((
            "head_d.weight".into(),
            vec![cfg.embedding, cfg.domain_classes],
            cfg.embedding,
        ));
        specs.push(("head_d.bias".into(), vec![cfg.domain_classes], 0));
        specs
    }

    /// Deterministic He-style uniform initialization; biases start at zero.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, fan_in) in self.param_specs() {
            let tensor = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                let limit = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-limit..limit)))
            };
            store.insert(&name, tensor)?;
        }
        Ok(store)
    }

    /// Check that a store carries exactly the parameters this model expects.
    pub fn validate_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let specs = self.param_specs();
        if store.len() != specs.len() {
            return config_err(format!(
                "parameter store has {} entries, model expects {}",
                store.len(),
                specs.len()
            ));
        }
        for (name, shape, _) in &specs {
            match store.value(name) {
                Some(v) if v.shape() == shape.as_slice() => {}
                Some(v) => {
                    return config_err(format!(
                        "parameter '{name}' has shape {:?}, model expects {shape:?}",
                        v.shape()
                    ));
                }
                None => return config_err(format!("parameter '{name}' missing from store")),
            }
        }
        Ok(())
    }

    fn activate<T: Scalar>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Identity => Ok(x),
        }
    }

    fn param_leaf<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        name: &str,
    ) -> Result<NodeId> {
        match store.value(name) {
            Some(v) => tape.param(name, v.clone()),
            None => config_err(format!("parameter '{name}' missing from store")),
        }
    }

    /// Core model plus normalization: `x: [rows,T,F,C]` to the normalized
    /// embedding `z: [rows,E]`.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let xs = tape.value(x).shape().to_vec();
        let expected = [cfg.time_frames, cfg.mel_bands, cfg.channels];
        if xs.len() != 4 || xs[1..] != expected {
            return config_err(format!(
                "input shape {xs:?} does not match model input [rows, {}, {}, {}]",
                cfg.time_frames, cfg.mel_bands, cfg.channels
            ));
        }
        let mut h = x;
        for (i, layer) in cfg.conv.iter().enumerate() {
            let k = self.param_leaf(tape, store, &format!("conv{i}.kernel"))?;
            let b = self.param_leaf(tape, store, &format!("conv{i}.bias"))?;
            h = tape.conv2d(h, k, b, (1, 1), crate::numerics::Padding::Same)?;
            h = self.activate(tape, h)?;
            if let Some(pool) = layer.pool {
                h = tape.max_pool2d(h, pool, pool)?;
            }
        }
        h = tape.global_avg_pool(h)?;
        for i in 0..cfg.hidden_dense.len() {
            let w = self.param_leaf(tape, store, &format!("dense{i}.weight"))?;
            let b = self.param_leaf(tape, store, &format!("dense{i}.bias"))?;
            h = tape.dense(h, w, b)?;
            h = self.activate(tape, h)?;
        }
        let w = self.param_leaf(tape, store, "embed.weight")?;
        let b = self.param_leaf(tape, store, "embed.bias")?;
        let z_raw = tape.dense(h, w, b)?;
        tape.layer_norm(z_raw, cfg.layer_norm_eps)
    }

    /// Multiply each embedding row by its mask pattern.
    pub fn apply_mask<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        z: NodeId,
        masks: &[MaskPattern],
    ) -> Result<NodeId> {
        apply_mask(tape, z, masks)
    }

    /// Head distributions from a (masked) embedding; the heads share no
    /// parameters.
    pub fn predict<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_tilde: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let wa = self.param_leaf(tape, store, "head_a.weight")?;
        let ba = self.param_leaf(tape, store, "head_a.bias")?;
        let logits_a = tape.dense(z_tilde, wa, ba)?;
        let y_hat_a = tape.softmax(logits_a)?;

        let wd = self.param_leaf(tape, store, "head_d.weight")?;
        let bd = self.param_leaf(tape, store, "head_d.bias")?;
        let logits_d = tape.dense(z_tilde, wd, bd)?;
        let y_hat_d = tape.softmax(logits_d)?;
        Ok((y_hat_a, y_hat_d))
    }

    /// Full pass: embed, mask, predict.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        masks: &[MaskPattern],
    ) -> Result<Predictions> {
        let rows = tape.value(x).shape()[0];
        if masks.len() != rows {
            return config_err(format!(
                "got {} mask patterns for {rows} input rows",
                masks.len()
            ));
        }
        let z = self.embed(tape, store, x)?;
        let z_tilde = self.apply_mask(tape, z, masks)?;
        let (y_hat_a, y_hat_d) = self.predict(tape, store, z_tilde)?;
        Ok(Predictions {
            y_hat_a,
            y_hat_d,
            z,
            z_tilde,
        })
    }
}

/// Standardize one embedding batch `[rows,E]` to zero mean / unit variance
/// per row (population variance, epsilon inside the square root, no affine).
pub fn normalize_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    eps: f64,
) -> Result<NodeId> {
    tape.layer_norm(z, eps)
}

/// Multiply embedding rows `[rows,E]` by per-row mask patterns.
pub fn apply_mask<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    masks: &[MaskPattern],
) -> Result<NodeId> {
    let zs = tape.value(z).shape().to_vec();
    if zs.len() != 2 {
        return config_err(format!("apply_mask expects [rows, E], got {zs:?}"));
    }
    let (rows, width) = (zs[0], zs[1]);
    if masks.len() != rows {
        return config_err(format!("got {} masks for {rows} rows", masks.len()));
    }
    for m in masks {
        if m.len() != width {
            return config_err(format!(
                "mask length {} does not match embedding size {width}",
                m.len()
            ));
        }
    }
    let mut data = Vec::with_capacity(rows * width);
    for m in masks {
        data.extend(m.bits::<T>());
    }
    let mask = Tensor::new(vec![rows, width], data)?;
    tape.mul_mask(z, mask)
}
