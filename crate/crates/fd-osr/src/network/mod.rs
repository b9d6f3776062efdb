//! Encoder/decoder network with a split representation.
//!
//! The encoder maps a padded grayscale image to a representation whose
//! first `content_dim` coordinates describe *what* is in the image and
//! whose remaining `transform_dim` coordinates describe *how* it was
//! transformed. The decoder reconstructs the untransformed image from the
//! content part only; a small linear head classifies the transformation.

pub mod checkpoint;
pub mod layers;

use ndarray::{Array2, Array4, Axis, Ix2, Ix4, NdFloat};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Dropout, MaxPool2d, Mode, ParamTensor, Relu,
    SigmoidLayer,
};
pub use layers::OptSlot;

/// Named parameter subsets for selective optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    THead,
    ClassHead,
}

/// Which slice of the representation feeds the transformation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformHeadInput {
    /// Only the transformation coordinates (the decoupled setup).
    TransformPart,
    /// The entire representation (rotation-classification baselines).
    FullRep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Side length of the (square, single-channel) input.
    pub input_hw: usize,
    /// Output channels of each conv stage; every stage is conv3x3 "same",
    /// batch norm, ReLU, then 3x3/stride-2 max pool.
    pub conv_channels: Vec<usize>,
    /// Fully connected widths between the flattened conv output and the
    /// representation projection.
    pub fc_widths: Vec<usize>,
    pub content_dim: usize,
    pub transform_dim: usize,
    /// Number of transformations the transformation head distinguishes.
    pub n_transforms: usize,
    /// Number of known classes for the classification head.
    pub n_classes: usize,
    /// Dropout keep probability on the fully connected stack.
    pub dropout_keep: f64,
    pub t_head_input: TransformHeadInput,
}

impl EncoderConfig {
    /// Production configuration for 32x32 padded inputs.
    pub fn standard(content_dim: usize, transform_dim: usize, n_classes: usize) -> Self {
        EncoderConfig {
            input_hw: 32,
            conv_channels: vec![32, 64],
            fc_widths: vec![256, 128],
            content_dim,
            transform_dim,
            n_transforms: 4,
            n_classes,
            dropout_keep: 0.2,
            t_head_input: TransformHeadInput::TransformPart,
        }
    }

    /// Small configuration for finite-difference gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            input_hw: 8,
            conv_channels: vec![2, 2],
            fc_widths: vec![4],
            content_dim: 2,
            transform_dim: 1,
            n_transforms: 4,
            n_classes: 3,
            dropout_keep: 1.0,
            t_head_input: TransformHeadInput::TransformPart,
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.content_dim + self.transform_dim
    }

    /// Spatial side lengths entering each conv stage, ending with the
    /// side length of the flattened feature map.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_hw];
        let mut s = self.input_hw;
        for _ in &self.conv_channels {
            s = (s - 3) / 2 + 1; // valid 3x3 pool, stride 2
            sizes.push(s);
        }
        sizes
    }

    pub fn flatten_dim(&self) -> usize {
        let s = *self.spatial_sizes().last().unwrap();
        self.conv_channels.last().unwrap() * s * s
    }

    pub fn t_head_in_dim(&self) -> usize {
        match self.t_head_input {
            TransformHeadInput::TransformPart => self.transform_dim,
            TransformHeadInput::FullRep => self.rep_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.fc_widths.is_empty() {
            return Err(Error::Config(
                "need at least one conv stage and one fc layer".into(),
            ));
        }
        if self.content_dim == 0 {
            return Err(Error::Config("content_dim must be positive".into()));
        }
        let mut s = self.input_hw;
        for _ in &self.conv_channels {
            if s < 3 {
                return Err(Error::Config(format!(
                    "spatial size collapses below the 3x3 pool window for input {}",
                    self.input_hw
                )));
            }
            s = (s - 3) / 2 + 1;
        }
        if self.t_head_input == TransformHeadInput::TransformPart && self.transform_dim == 0 {
            return Err(Error::Config(
                "transformation head reads the transform part but transform_dim is 0".into(),
            ));
        }
        Ok(())
    }
}

struct ConvStage<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<Ix4>,
    pool: MaxPool2d,
}

struct FcStage<T> {
    dense: Dense<T>,
    relu: Relu<Ix2>,
    dropout: Dropout<T>,
}

pub struct Encoder<T> {
    stages: Vec<ConvStage<T>>,
    fcs: Vec<FcStage<T>>,
    proj: Dense<T>,
    flat_dims: Option<(usize, usize, usize, usize)>,
}

impl<T: NdFloat> Encoder<T> {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut ic = 1;
        for (i, &oc) in cfg.conv_channels.iter().enumerate() {
            stages.push(ConvStage {
                conv: Conv2d::new(&format!("enc.conv{i}"), ic, oc, 3, rng),
                bn: BatchNorm2d::new(&format!("enc.bn{i}"), oc),
                relu: Relu::new(),
                pool: MaxPool2d::new(3, 2),
            });
            ic = oc;
        }
        let mut fcs = Vec::new();
        let mut dim = cfg.flatten_dim();
        for (i, &w) in cfg.fc_widths.iter().enumerate() {
            fcs.push(FcStage {
                dense: Dense::new(&format!("enc.fc{i}"), dim, w, rng),
                relu: Relu::new(),
                dropout: Dropout::new(cfg.dropout_keep),
            });
            dim = w;
        }
        let proj = Dense::new("enc.proj", dim, cfg.rep_dim(), rng);
        Encoder {
            stages,
            fcs,
            proj,
            flat_dims: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Array2<T> {
        let mut h = x.clone();
        for st in &mut self.stages {
            h = st.conv.forward(&h);
            h = st.bn.forward(&h, mode);
            h = st.relu.forward(&h);
            h = st.pool.forward(&h);
        }
        let (n, c, hh, ww) = h.dim();
        self.flat_dims = Some((n, c, hh, ww));
        let mut a = h.into_shape((n, c * hh * ww)).unwrap();
        for fc in &mut self.fcs {
            a = fc.dense.forward(&a);
            a = fc.relu.forward(&a);
            a = fc.dropout.forward(&a, mode, rng);
        }
        self.proj.forward(&a)
    }

    pub fn backward(&mut self, g_rep: &Array2<T>) -> Array4<T> {
        let mut g = self.proj.backward(g_rep);
        for fc in self.fcs.iter_mut().rev() {
            g = fc.dropout.backward(&g);
            g = fc.relu.backward(&g);
            g = fc.dense.backward(&g);
        }
        let (n, c, hh, ww) = self.flat_dims.take().expect("forward before backward");
        let mut g4 = g.into_shape((n, c, hh, ww)).unwrap();
        for st in self.stages.iter_mut().rev() {
            g4 = st.pool.backward(&g4);
            g4 = st.relu.backward(&g4);
            g4 = st.bn.backward(&g4);
            g4 = st.conv.backward(&g4);
        }
        g4
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut ParamTensor<T>)) {
        for st in &mut self.stages {
            f(&mut st.conv.w);
            f(&mut st.conv.b);
            f(&mut st.bn.gamma);
            f(&mut st.bn.beta);
        }
        for fc in &mut self.fcs {
            f(&mut fc.dense.w);
            f(&mut fc.dense.b);
        }
        f(&mut self.proj.w);
        f(&mut self.proj.b);
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        self.stages.iter_mut().map(|s| &mut s.bn).collect()
    }

    /// Gradient of the projection weights, rows indexed by representation
    /// coordinate. Exposed so tests can verify which coordinates a loss
    /// actually touches.
    pub fn proj_grad(&self) -> Array2<T> {
        self.proj
            .w
            .grad
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned()
    }
}

pub struct Decoder<T> {
    fcs: Vec<(Dense<T>, Relu<Ix2>)>,
    deconvs: Vec<ConvTranspose2d<T>>,
    relus: Vec<Relu<Ix4>>,
    sigmoid: SigmoidLayer<T, ndarray::Ix4>,
    reshape: (usize, usize, usize), // channels, h, w at the conv entry
}

impl<T: NdFloat> Decoder<T> {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let spatial = cfg.spatial_sizes();
        let bottom = *spatial.last().unwrap();
        let mut fcs = Vec::new();
        let mut dim = cfg.content_dim;
        let mut widths: Vec<usize> = cfg.fc_widths.iter().rev().copied().collect();
        widths.push(cfg.flatten_dim());
        for (i, &w) in widths.iter().enumerate() {
            fcs.push((
                Dense::new(&format!("dec.fc{i}"), dim, w, rng),
                Relu::new(),
            ));
            dim = w;
        }
        // reversed conv channels, ending at the single input channel
        let mut chans: Vec<usize> = cfg.conv_channels.iter().rev().copied().collect();
        chans.push(1);
        let mut deconvs = Vec::new();
        let mut relus = Vec::new();
        for i in 0..chans.len() - 1 {
            let cur = spatial[spatial.len() - 1 - i];
            let target = spatial[spatial.len() - 2 - i];
            let outpad = target - ((cur - 1) * 2 + 3);
            deconvs.push(ConvTranspose2d::new(
                &format!("dec.deconv{i}"),
                chans[i],
                chans[i + 1],
                3,
                2,
                outpad,
                rng,
            ));
            if i + 2 < chans.len() {
                relus.push(Relu::new());
            }
        }
        Decoder {
            fcs,
            deconvs,
            relus,
            sigmoid: SigmoidLayer::new(),
            reshape: (*cfg.conv_channels.last().unwrap(), bottom, bottom),
        }
    }

    pub fn forward(&mut self, z_c: &Array2<T>) -> Array4<T> {
        let mut a = z_c.clone();
        for (dense, relu) in &mut self.fcs {
            a = dense.forward(&a);
            a = relu.forward(&a);
        }
        let n = a.nrows();
        let (c, h, w) = self.reshape;
        let mut x = a.into_shape((n, c, h, w)).unwrap();
        let last = self.deconvs.len() - 1;
        for (i, deconv) in self.deconvs.iter_mut().enumerate() {
            x = deconv.forward(&x);
            if i < last {
                x = self.relus[i].forward(&x);
            }
        }
        self.sigmoid.forward(&x)
    }

    pub fn backward(&mut self, g_out: &Array4<T>) -> Array2<T> {
        let mut g = self.sigmoid.backward(g_out);
        let last = self.deconvs.len() - 1;
        for (i, deconv) in self.deconvs.iter_mut().enumerate().rev() {
            if i < last {
                g = self.relus[i].backward(&g);
            }
            g = deconv.backward(&g);
        }
        let (n, c, h, w) = g.dim();
        let mut g2 = g.into_shape((n, c * h * w)).unwrap();
        for (dense, relu) in self.fcs.iter_mut().rev() {
            g2 = relu.backward(&g2);
            g2 = dense.backward(&g2);
        }
        g2
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut ParamTensor<T>)) {
        for (dense, _) in &mut self.fcs {
            f(&mut dense.w);
            f(&mut dense.b);
        }
        for d in &mut self.deconvs {
            f(&mut d.w);
            f(&mut d.b);
        }
    }
}

/// The full trainable state: encoder, content decoder, and the two heads.
pub struct ModelState<T> {
    pub cfg: EncoderConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub t_head: Dense<T>,
    pub class_head: Dense<T>,
    /// Adam step counter, shared across all parameter groups.
    pub step: u64,
}

impl<T: NdFloat> ModelState<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg, rng);
        let decoder = Decoder::new(&cfg, rng);
        let t_head = Dense::new("t_head", cfg.t_head_in_dim(), cfg.n_transforms, rng);
        let class_head = Dense::new("class_head", cfg.content_dim, cfg.n_classes, rng);
        Ok(ModelState {
            cfg,
            encoder,
            decoder,
            t_head,
            class_head,
            step: 0,
        })
    }

    /// Encode a batch to the full representation (content then transform).
    pub fn encode(&mut self, x: &Array4<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Array2<T> {
        self.encoder.forward(x, mode, rng)
    }

    pub fn content_of(&self, rep: &Array2<T>) -> Array2<T> {
        rep.slice(ndarray::s![.., ..self.cfg.content_dim]).to_owned()
    }

    pub fn transform_of(&self, rep: &Array2<T>) -> Array2<T> {
        rep.slice(ndarray::s![.., self.cfg.content_dim..]).to_owned()
    }

    pub fn t_head_input_of(&self, rep: &Array2<T>) -> Array2<T> {
        match self.cfg.t_head_input {
            TransformHeadInput::TransformPart => self.transform_of(rep),
            TransformHeadInput::FullRep => rep.clone(),
        }
    }

    /// Scatter a gradient on the t-head input back into representation
    /// coordinates; the complement stays exactly zero for the decoupled
    /// setup.
    pub fn t_head_grad_to_rep(&self, g_in: &Array2<T>, n: usize) -> Array2<T> {
        match self.cfg.t_head_input {
            TransformHeadInput::FullRep => g_in.clone(),
            TransformHeadInput::TransformPart => {
                let mut g = Array2::zeros((n, self.cfg.rep_dim()));
                g.slice_mut(ndarray::s![.., self.cfg.content_dim..]).assign(g_in);
                g
            }
        }
    }

    /// Pad a content gradient with zeros over the transform coordinates.
    pub fn content_grad_to_rep(&self, g_c: &Array2<T>) -> Array2<T> {
        let n = g_c.nrows();
        let mut g = Array2::zeros((n, self.cfg.rep_dim()));
        g.slice_mut(ndarray::s![.., ..self.cfg.content_dim]).assign(g_c);
        g
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut ParamTensor<T>)) {
        self.encoder.for_each_param(f);
        self.decoder.for_each_param(f);
        f(&mut self.t_head.w);
        f(&mut self.t_head.b);
        f(&mut self.class_head.w);
        f(&mut self.class_head.b);
    }

    pub fn zero_all_grads(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }

    pub fn for_each_param_in(
        &mut self,
        groups: &[ParamGroup],
        f: &mut dyn FnMut(&mut ParamTensor<T>),
    ) {
        for g in groups {
            match g {
                ParamGroup::Encoder => self.encoder.for_each_param(f),
                ParamGroup::Decoder => self.decoder.for_each_param(f),
                ParamGroup::THead => {
                    f(&mut self.t_head.w);
                    f(&mut self.t_head.b);
                }
                ParamGroup::ClassHead => {
                    f(&mut self.class_head.w);
                    f(&mut self.class_head.b);
                }
            }
        }
    }

    /// Adam-update the named parameter groups from their accumulated
    /// gradients, then clear those gradients.
    pub fn adam_update(&mut self, groups: &[ParamGroup], lr: T) {
        self.adam_update_slot(groups, lr, OptSlot::Primary);
    }

    pub fn adam_update_slot(&mut self, groups: &[ParamGroup], lr: T, slot: OptSlot) {
        self.step += 1;
        self.for_each_param_in(groups, &mut |p| {
            p.adam_step_slot(lr, slot);
            p.zero_grad();
        });
    }

    pub fn encoder_proj_grad(&self) -> Array2<T> {
        self.encoder.proj_grad()
    }

    /// Inference embedding: content and transform parts, batch norm on
    /// running stats and no dropout.
    pub fn embed(&mut self, x: &Array4<T>, rng: &mut ChaCha8Rng) -> Array2<T> {
        self.encoder.forward(x, Mode::Infer, rng)
    }
}

/// Stack per-sample image planes into the (N, 1, H, W) batch layout.
pub fn batch_images<T: NdFloat>(planes: &[ndarray::Array2<T>]) -> Array4<T> {
    assert!(!planes.is_empty());
    let (h, w) = planes[0].dim();
    let mut out = Array4::zeros((planes.len(), 1, h, w));
    for (i, p) in planes.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(p);
    }
    out
}
