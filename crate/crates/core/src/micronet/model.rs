use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, C2f, ConvModule, ConvModuleSpec, Dropout, Linear,
    Mode,
};
use super::tensor::{Param, Tensor};
use crate::cloudio::Species;
use crate::error::{Error, Result};

/// Backbone downsampling factor: five stride-2 conv modules.
pub const DOWNSAMPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output widths of the five downsampling stages; c2f block `i` keeps
    /// the width of the stage in front of it.
    pub widths: [usize; 5],
    pub bottlenecks: [usize; 4],
    pub head_channels: usize,
    pub classes: usize,
    pub input_side: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 64, 64],
            bottlenecks: [3, 6, 6, 3],
            head_channels: 128,
            classes: Species::COUNT,
            input_side: 160,
            dropout: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.head_channels == 0 || self.classes < 2 {
            return Err(Error::InvalidArgument(
                "model widths and classes must be positive".into(),
            ));
        }
        if self.input_side == 0 || self.input_side % DOWNSAMPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "input side {} must be a positive multiple of {DOWNSAMPLE}",
                self.input_side
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(
                "dropout rate must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Spatial side of the last c2f block's activations.
    pub fn activation_side(&self) -> usize {
        self.input_side / DOWNSAMPLE
    }
}

/// Logits plus the recorded activations of the last c2f block.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Shape (batch, classes, 1, 1).
    pub logits: Tensor,
    pub last_c2f: Tensor,
}

impl ForwardOutput {
    pub fn logits_of(&self, sample: usize) -> &[f64] {
        self.logits.sample(sample)
    }
}

/// Classification head: pointwise conv module, global average pool,
/// dropout and a linear map to class logits.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv: ConvModule,
    pub dropout: Dropout,
    pub linear: Linear,
    conv_shape: Option<[usize; 4]>,
}

impl Head {
    pub fn new(
        in_channels: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: ConvModule::new(ConvModuleSpec::pointwise(in_channels, hidden), rng),
            dropout: Dropout::new(dropout),
            linear: Linear::new(hidden, classes, rng),
            conv_shape: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let h = self.conv.forward(x, mode)?;
        self.conv_shape = Some(h.shape());
        let pooled = global_avg_pool(&h);
        let dropped = self.dropout.forward(&pooled, mode, rng);
        self.linear.forward(&dropped)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Tensor {
        let g = self.linear.backward(grad_logits);
        let g = self.dropout.backward(&g);
        let g =
            global_avg_pool_backward(&g, self.conv_shape.expect("head backward before forward"));
        self.conv.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv.params_mut();
        out.push(&mut self.linear.weight);
        out.push(&mut self.linear.bias);
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.conv.params();
        out.push(&self.linear.weight);
        out.push(&self.linear.bias);
        out
    }
}

/// Compact c2f-style classifier: two stride-2 conv modules, four c2f
/// blocks (the first three each followed by a stride-2 conv module) and
/// the classification head.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: [ConvModule; 2],
    pub stages: Vec<C2f>,
    pub downs: Vec<ConvModule>,
    pub head: Head,
    dropout_rng: ChaCha8Rng,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let w = config.widths;
        let stem = [
            ConvModule::new(ConvModuleSpec::down(1, w[0]), &mut rng),
            ConvModule::new(ConvModuleSpec::down(w[0], w[1]), &mut rng),
        ];
        let mut stages = Vec::with_capacity(4);
        let mut downs = Vec::with_capacity(3);
        for i in 0..4 {
            stages.push(C2f::new(
                w[i + 1],
                w[i + 1],
                config.bottlenecks[i],
                &mut rng,
            ));
            if i < 3 {
                downs.push(ConvModule::new(
                    ConvModuleSpec::down(w[i + 1], w[i + 2]),
                    &mut rng,
                ));
            }
        }
        let head = Head::new(
            w[4],
            config.head_channels,
            config.classes,
            config.dropout,
            &mut rng,
        );
        let dropout_rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0x5eed_d20b);
        Ok(Self {
            config,
            stem,
            stages,
            downs,
            head,
            dropout_rng,
        })
    }

    /// Runs the backbone, returning the last c2f block's activations.
    pub fn forward_backbone(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let side = self.config.input_side;
        if x.channels() != 1 || x.height() != side || x.width() != side {
            return Err(Error::Shape(format!(
                "model expects (N, 1, {side}, {side}) input, got {:?}",
                x.shape()
            )));
        }
        let mut h = self.stem[0].forward(x, mode)?;
        h = self.stem[1].forward(&h, mode)?;
        for i in 0..4 {
            h = self.stages[i].forward(&h, mode)?;
            if i < 3 {
                h = self.downs[i].forward(&h, mode)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let last_c2f = self.forward_backbone(x, mode)?;
        let logits = self.head.forward(&last_c2f, mode, &mut self.dropout_rng)?;
        Ok(ForwardOutput { logits, last_c2f })
    }

    /// Back-propagates logit gradients through the head only, returning the
    /// gradient with respect to the last c2f activations.
    pub fn backward_head(&mut self, grad_logits: &Tensor) -> Tensor {
        self.head.backward(grad_logits)
    }

    /// Full backward pass; accumulates parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Tensor {
        let mut g = self.head.backward(grad_logits);
        for i in (0..4).rev() {
            if i < 3 {
                g = self.downs[i].backward(&g);
            }
            g = self.stages[i].backward(&g);
        }
        g = self.stem[1].backward(&g);
        self.stem[0].backward(&g)
    }

    /// All parameters and buffers in declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [s0, s1] = &mut self.stem;
        let mut out = s0.params_mut();
        out.extend(s1.params_mut());
        let mut downs = self.downs.iter_mut();
        for stage in self.stages.iter_mut() {
            out.extend(stage.params_mut());
            if let Some(d) = downs.next() {
                out.extend(d.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.stem[0].params();
        out.extend(self.stem[1].params());
        let mut downs = self.downs.iter();
        for stage in &self.stages {
            out.extend(stage.params());
            if let Some(d) = downs.next() {
                out.extend(d.params());
            }
        }
        out.extend(self.head.params());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(side: usize) -> ModelConfig {
        ModelConfig {
            widths: [2, 3, 4, 4, 4],
            bottlenecks: [1, 2, 2, 1],
            head_channels: 5,
            input_side: side,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn last_c2f_side_is_input_over_32() {
        let mut model = Model::new(small(160)).unwrap();
        let x = Tensor::zeros([1, 1, 160, 160]);
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.last_c2f.shape(), [1, 4, 5, 5]);
        assert_eq!(out.logits.shape(), [1, 7, 1, 1]);
    }

    #[test]
    fn wrong_input_side_is_rejected() {
        let mut model = Model::new(small(64)).unwrap();
        let x = Tensor::zeros([1, 1, 96, 96]);
        assert!(matches!(
            model.forward(&x, Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn input_side_must_divide_by_32() {
        assert!(Model::new(small(100)).is_err());
    }

    #[test]
    fn eval_forward_is_repeatable_with_dropout() {
        let mut cfg = small(64);
        cfg.dropout = 0.5;
        let mut model = Model::new(cfg).unwrap();
        let x = Tensor::from_vec(
            [1, 1, 64, 64],
            (0..4096).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let a = model.forward(&x, Mode::Eval).unwrap().logits;
        let b = model.forward(&x, Mode::Eval).unwrap().logits;
        assert_eq!(a.data(), b.data());
    }
}
