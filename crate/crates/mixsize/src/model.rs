//! CIFAR-style residual networks: depth 6n+2, three stages, widths
//! `w, 2w, 4w` with strides 1, 2, 2, global average pooling and one linear
//! classifier. Because pooling averages whatever spatial extent reaches it,
//! the same weights accept any input side S ≥ 8.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::elem::Elem;
use crate::tensor::{
    add, batchnorm2d, conv2d, flatten_spatial, global_avg_pool, linear, relu, BnMode, BnStats,
    StatsAccum, Tape, Tensor,
};
use crate::{Error, Result};

/// Minimum input side: three stride-2 stages must leave ≥ 1 pixel.
pub const MIN_INPUT_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetConfig {
    pub depth: usize,
    pub base_width: usize,
    pub num_classes: usize,
}

impl ResNetConfig {
    pub fn new(depth: usize, base_width: usize, num_classes: usize) -> Result<Self> {
        let cfg = Self { depth, base_width, num_classes };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 8 || (self.depth - 2) % 6 != 0 {
            return Err(Error::Config(format!(
                "depth must be 6n+2 with n ≥ 1 (8, 14, 20, ...), got {}",
                self.depth
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }

    /// Channel widths of the three stages.
    pub fn stage_widths(&self) -> [usize; 3] {
        [self.base_width, self.base_width * 2, self.base_width * 4]
    }
}

/// Whether a forward pass uses batch or running statistics in BN layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics without updating the running estimates; forward only.
    Capture,
}

impl Mode {
    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
            Mode::Capture => BnMode::Capture,
        }
    }
}

#[derive(Debug)]
pub struct Conv2d<T: Elem> {
    pub weight: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Elem> Conv2d<T> {
    /// He fan-in initialization: N(0, √(2 / c_in·k²)).
    fn init(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let data: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Self {
            weight: Tensor::param(&[cout, cin, k, k], data).unwrap(),
            stride,
            pad,
        }
    }

    fn out_side(&self, s: usize) -> usize {
        let k = self.weight.shape()[2];
        (s + 2 * self.pad - k) / self.stride + 1
    }

    fn flops(&self, s_in: usize) -> u64 {
        let sh = self.weight.shape();
        let (cout, cin, k) = (sh[0] as u64, sh[1] as u64, sh[2] as u64);
        let so = self.out_side(s_in) as u64;
        2 * cout * so * so * cin * k * k
    }
}

#[derive(Debug)]
pub struct BatchNorm2d<T: Elem> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BnStats,
}

impl<T: Elem> BatchNorm2d<T> {
    fn init(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()).with_requires_grad(true),
            beta: Tensor::zeros(&[channels]).with_requires_grad(true),
            stats: BnStats::new(channels),
        }
    }

    fn zero_gamma(self) -> Self {
        self.gamma.data_mut().fill(T::zero());
        self
    }
}

#[derive(Debug)]
struct Block<T: Elem> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    /// 1×1 strided projection on dimension-changing blocks.
    down: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Elem> Block<T> {
    fn init(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let down = (stride != 1 || cin != cout)
            .then(|| (Conv2d::init(cin, cout, 1, stride, 0, rng), BatchNorm2d::init(cout)));
        Self {
            conv1: Conv2d::init(cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::init(cout),
            conv2: Conv2d::init(cout, cout, 3, 1, 1, rng),
            // zero gamma: the block starts as (near) identity
            bn2: BatchNorm2d::init(cout).zero_gamma(),
            down,
        }
    }
}

/// One parameter with its registered name and weight-decay eligibility.
pub struct NamedParam<T: Elem> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub decay: bool,
}

pub struct ResNet<T: Elem> {
    pub cfg: ResNetConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stages: Vec<Vec<Block<T>>>,
    fc_weight: Tensor<T>,
    fc_bias: Tensor<T>,
}

/// Tracks which BN layer a pass is at, so capture accumulators and traces
/// line up with [`ResNet::bn_names`] order.
struct BnPass<'a, T: Elem> {
    tape: &'a Tape,
    mode: Mode,
    accums: Option<&'a mut [StatsAccum]>,
    trace: Option<&'a mut Vec<Tensor<T>>>,
    idx: usize,
}

impl<T: Elem> BnPass<'_, T> {
    fn apply(&mut self, x: &Tensor<T>, bn: &mut BatchNorm2d<T>) -> Result<Tensor<T>> {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push(x.detached_copy());
        }
        let acc = match self.accums.as_deref_mut() {
            Some(all) => Some(&mut all[self.idx]),
            None => None,
        };
        self.idx += 1;
        batchnorm2d(self.tape, x, &bn.gamma, &bn.beta, &mut bn.stats, self.mode.bn(), acc)
    }
}

impl<T: Elem> ResNet<T> {
    pub fn build(cfg: ResNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.stage_widths();
        let n = cfg.blocks_per_stage();
        let stem_conv = Conv2d::init(3, widths[0], 3, 1, 1, rng);
        let stem_bn = BatchNorm2d::init(widths[0]);
        let mut stages = Vec::with_capacity(3);
        let mut cin = widths[0];
        for (si, &w) in widths.iter().enumerate() {
            let stride = if si == 0 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(n);
            for bi in 0..n {
                let s = if bi == 0 { stride } else { 1 };
                blocks.push(Block::init(cin, w, s, rng));
                cin = w;
            }
            stages.push(blocks);
        }
        let fan_in = widths[2] as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).unwrap();
        let fc_data: Vec<T> = (0..cfg.num_classes * widths[2])
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Ok(Self {
            cfg,
            stem_conv,
            stem_bn,
            stages,
            fc_weight: Tensor::param(&[cfg.num_classes, widths[2]], fc_data)?,
            fc_bias: Tensor::zeros(&[cfg.num_classes]).with_requires_grad(true),
        })
    }

    pub fn forward(&mut self, tape: &Tape, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_impl(tape, x, mode, None, None)
    }

    /// Forward in capture mode, folding every BN layer's input into the
    /// matching accumulator (ordered as [`Self::bn_names`]).
    pub fn forward_capture(
        &mut self,
        tape: &Tape,
        x: &Tensor<T>,
        accums: &mut [StatsAccum],
    ) -> Result<Tensor<T>> {
        if accums.len() != self.bn_count() {
            return Err(crate::shape_err!(
                "forward_capture: {} accumulators for {} BN layers",
                accums.len(),
                self.bn_count()
            ));
        }
        self.forward_impl(tape, x, Mode::Capture, Some(accums), None)
    }

    /// Forward that also returns a detached copy of every BN layer's input,
    /// in [`Self::bn_names`] order. Used by tests that re-derive calibration
    /// statistics from raw activations.
    pub fn forward_traced(
        &mut self,
        tape: &Tape,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut trace = Vec::with_capacity(self.bn_count());
        let logits = self.forward_impl(tape, x, mode, None, Some(&mut trace))?;
        Ok((logits, trace))
    }

    fn forward_impl(
        &mut self,
        tape: &Tape,
        x: &Tensor<T>,
        mode: Mode,
        accums: Option<&mut [StatsAccum]>,
        trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(crate::shape_err!(
                "forward: expected [N,3,H,W], got {shape:?}"
            ));
        }
        if shape[2].min(shape[3]) < MIN_INPUT_SIZE {
            return Err(crate::domain_err!(
                "forward: input {}x{} below minimum side {MIN_INPUT_SIZE}",
                shape[2],
                shape[3]
            ));
        }
        let mut bn = BnPass { tape, mode, accums, trace, idx: 0 };

        let mut h = conv2d(tape, x, &self.stem_conv.weight, None, 1, 1)?;
        h = bn.apply(&h, &mut self.stem_bn)?;
        h = relu(tape, &h)?;
        for stage in &mut self.stages {
            for block in stage {
                let mut out = conv2d(
                    tape, &h, &block.conv1.weight, None,
                    block.conv1.stride, block.conv1.pad,
                )?;
                out = bn.apply(&out, &mut block.bn1)?;
                out = relu(tape, &out)?;
                out = conv2d(
                    tape, &out, &block.conv2.weight, None,
                    block.conv2.stride, block.conv2.pad,
                )?;
                out = bn.apply(&out, &mut block.bn2)?;
                let skip = match &mut block.down {
                    Some((conv, dbn)) => {
                        let p = conv2d(tape, &h, &conv.weight, None, conv.stride, conv.pad)?;
                        bn.apply(&p, dbn)?
                    }
                    None => h,
                };
                h = relu(tape, &add(tape, &out, &skip)?)?;
            }
        }
        let pooled = global_avg_pool(tape, &h)?;
        let flat = flatten_spatial(tape, &pooled)?;
        linear(tape, &flat, &self.fc_weight, Some(&self.fc_bias))
    }

    /// All trainable parameters in a fixed order, with decay eligibility
    /// (convolution and classifier weights decay; BN affines and bias do not).
    pub fn named_params(&self) -> Vec<NamedParam<T>> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor: &Tensor<T>, decay: bool| {
            out.push(NamedParam { name, tensor: tensor.clone(), decay });
        };
        push("stem.conv.weight".into(), &self.stem_conv.weight, true);
        push("stem.bn.gamma".into(), &self.stem_bn.gamma, false);
        push("stem.bn.beta".into(), &self.stem_bn.beta, false);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let p = format!("stage{}.block{}", si + 1, bi);
                push(format!("{p}.conv1.weight"), &b.conv1.weight, true);
                push(format!("{p}.bn1.gamma"), &b.bn1.gamma, false);
                push(format!("{p}.bn1.beta"), &b.bn1.beta, false);
                push(format!("{p}.conv2.weight"), &b.conv2.weight, true);
                push(format!("{p}.bn2.gamma"), &b.bn2.gamma, false);
                push(format!("{p}.bn2.beta"), &b.bn2.beta, false);
                if let Some((conv, dbn)) = &b.down {
                    push(format!("{p}.down.conv.weight"), &conv.weight, true);
                    push(format!("{p}.down.bn.gamma"), &dbn.gamma, false);
                    push(format!("{p}.down.bn.beta"), &dbn.beta, false);
                }
            }
        }
        push("fc.weight".into(), &self.fc_weight, true);
        push("fc.bias".into(), &self.fc_bias, false);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Visit every BN layer in the fixed registry order.
    pub fn for_each_bn(&mut self, mut f: impl FnMut(&str, &mut BatchNorm2d<T>)) {
        f("stem.bn", &mut self.stem_bn);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, b) in stage.iter_mut().enumerate() {
                let p = format!("stage{}.block{}", si + 1, bi);
                f(&format!("{p}.bn1"), &mut b.bn1);
                f(&format!("{p}.bn2"), &mut b.bn2);
                if let Some((_, dbn)) = &mut b.down {
                    f(&format!("{p}.down.bn"), dbn);
                }
            }
        }
    }

    pub fn bn_names(&self) -> Vec<String> {
        let mut names = vec!["stem.bn".to_string()];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let p = format!("stage{}.block{}", si + 1, bi);
                names.push(format!("{p}.bn1"));
                names.push(format!("{p}.bn2"));
                if b.down.is_some() {
                    names.push(format!("{p}.down.bn"));
                }
            }
        }
        names
    }

    pub fn bn_count(&self) -> usize {
        let mut n = 0;
        // stem + 2 per block + 1 per projection
        n += 1;
        for stage in &self.stages {
            for b in stage {
                n += 2 + usize::from(b.down.is_some());
            }
        }
        n
    }

    /// Per-channel widths of every BN layer, in registry order.
    pub fn bn_channels(&self) -> Vec<usize> {
        let mut out = vec![self.stem_bn.gamma.numel()];
        for stage in &self.stages {
            for b in stage {
                out.push(b.bn1.gamma.numel());
                out.push(b.bn2.gamma.numel());
                if let Some((_, dbn)) = &b.down {
                    out.push(dbn.gamma.numel());
                }
            }
        }
        out
    }

    /// Multiply-accumulate count ×2 over convs and the classifier at input
    /// side `s`.
    pub fn flops(&self, s: usize) -> Result<u64> {
        if s < MIN_INPUT_SIZE {
            return Err(crate::domain_err!("flops: side {s} below minimum {MIN_INPUT_SIZE}"));
        }
        let mut total = self.stem_conv.flops(s);
        let mut side = self.stem_conv.out_side(s);
        for stage in &self.stages {
            for b in stage {
                total += b.conv1.flops(side);
                if let Some((conv, _)) = &b.down {
                    total += conv.flops(side);
                }
                side = b.conv1.out_side(side);
                total += b.conv2.flops(side);
            }
        }
        total += 2 * (self.fc_weight.numel() as u64);
        Ok(total)
    }

    /// Independent copy: fresh parameter and statistics buffers.
    pub fn deep_clone(&self) -> Self {
        let clone_conv = |c: &Conv2d<T>| Conv2d {
            weight: c.weight.detached_copy().with_requires_grad(true),
            stride: c.stride,
            pad: c.pad,
        };
        let clone_bn = |b: &BatchNorm2d<T>| BatchNorm2d {
            gamma: b.gamma.detached_copy().with_requires_grad(true),
            beta: b.beta.detached_copy().with_requires_grad(true),
            stats: b.stats.clone(),
        };
        Self {
            cfg: self.cfg,
            stem_conv: clone_conv(&self.stem_conv),
            stem_bn: clone_bn(&self.stem_bn),
            stages: self
                .stages
                .iter()
                .map(|st| {
                    st.iter()
                        .map(|b| Block {
                            conv1: clone_conv(&b.conv1),
                            bn1: clone_bn(&b.bn1),
                            conv2: clone_conv(&b.conv2),
                            bn2: clone_bn(&b.bn2),
                            down: b.down.as_ref().map(|(c, bn)| (clone_conv(c), clone_bn(bn))),
                        })
                        .collect()
                })
                .collect(),
            fc_weight: self.fc_weight.detached_copy().with_requires_grad(true),
            fc_bias: self.fc_bias.detached_copy().with_requires_grad(true),
        }
    }

    pub fn zero_grads(&self) {
        for p in self.named_params() {
            p.tensor.zero_grad();
        }
    }
}
