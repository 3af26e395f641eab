//! Declarative builders for the two equirectangular depth networks, analytic
//! receptive-field computation and checkpoint serialization.
//!
//! Both networks are assembled as a small layer graph (an IR of conv /
//! deconv / elu / dropout / concat / add / upsample nodes). The same graph
//! drives the tape forward pass, the receptive-field walker and checkpoint
//! naming, so the three cannot drift apart.
//!
//! UResNet: two preprocessing convs, four stride-2 residual down blocks,
//! then one upscale block and three up-prediction blocks (deconv + conv,
//! each branching a depth prediction that is nearest-upsampled and
//! concatenated into the next block), and a final prediction conv.
//! Predictions at downscale factors 8, 4, 2, 1.
//!
//! RectNet: two preprocessing blocks concatenating square and row-elongated
//! rectangle filters of near-equal area, a ÷4 downscale block, two dilation
//! blocks with increasing dilation and a 1×1 conv, skip connections around
//! each, then two upscale steps with predictions at factors 2 and 1.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ConvSpec, NodeId, PadMode, Scalar, Shape, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    UResNet,
    RectNet,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::UResNet => "uresnet",
            Arch::RectNet => "rectnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uresnet" => Ok(Arch::UResNet),
            "rectnet" => Ok(Arch::RectNet),
            other => Err(Error::config(format!(
                "unknown architecture '{other}' (expected uresnet or rectnet)"
            ))),
        }
    }
}

/// One square∥rectangle filter pair of a preprocessing block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankPair {
    pub square: (usize, usize),
    pub rect: (usize, usize),
}

impl BankPair {
    /// Relative area deviation of the rectangle vs the square filter.
    pub fn area_deviation(&self) -> f64 {
        let sq = (self.square.0 * self.square.1) as f64;
        let rc = (self.rect.0 * self.rect.1) as f64;
        (rc - sq).abs() / sq
    }
}

/// Square + rectangle filter bank for RectNet's two preprocessing blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RectBank {
    pub block1: BankPair,
    pub block2: BankPair,
}

impl Default for RectBank {
    fn default() -> Self {
        // Areas 9∥9 and 25∥27: the widest practical horizontal extent that
        // keeps the rectangle's area within 20% of the paired square.
        Self {
            block1: BankPair {
                square: (3, 3),
                rect: (1, 9),
            },
            block2: BankPair {
                square: (5, 5),
                rect: (3, 9),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    /// RectNet dilation schedule: block A uses [0], [1]; block B [2], [3].
    pub dilations: [usize; 4],
    pub bank: RectBank,
    /// Prediction downscale factors, coarse to fine; structural per arch.
    pub scales: Vec<usize>,
    pub dropout: f64,
    pub padding: PadMode,
}

impl ModelSpec {
    pub fn uresnet(height: usize, width: usize, base_width: usize) -> Self {
        Self {
            arch: Arch::UResNet,
            in_channels: 3,
            height,
            width,
            base_width,
            dilations: [1, 1, 1, 1],
            bank: RectBank::default(),
            scales: vec![8, 4, 2, 1],
            dropout: 0.1,
            padding: PadMode::Sphere,
        }
    }

    pub fn rectnet(height: usize, width: usize, base_width: usize) -> Self {
        Self {
            arch: Arch::RectNet,
            in_channels: 3,
            height,
            width,
            base_width,
            dilations: [2, 4, 8, 16],
            bank: RectBank::default(),
            scales: vec![2, 1],
            dropout: 0.1,
            padding: PadMode::Sphere,
        }
    }

    pub fn for_arch(arch: Arch, height: usize, width: usize, base_width: usize) -> Self {
        match arch {
            Arch::UResNet => Self::uresnet(height, width, base_width),
            Arch::RectNet => Self::rectnet(height, width, base_width),
        }
    }

    fn structural_scales(&self) -> Vec<usize> {
        match self.arch {
            Arch::UResNet => vec![8, 4, 2, 1],
            Arch::RectNet => vec![2, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::config("channels must be nonzero".to_string()));
        }
        let div = match self.arch {
            Arch::UResNet => 32,
            Arch::RectNet => 4,
        };
        if self.height % div != 0 || self.width % div != 0 || self.height == 0 {
            return Err(Error::config(format!(
                "{} input dims must be divisible by {div}, got {}x{}",
                self.arch.as_str(),
                self.height,
                self.width
            )));
        }
        if self.arch == Arch::RectNet && self.base_width % 2 != 0 {
            return Err(Error::config(format!(
                "rectnet base width must be even to split square/rect branches, got {}",
                self.base_width
            )));
        }
        if self.scales != self.structural_scales() {
            return Err(Error::config(format!(
                "prediction scales {:?} do not match the {} structure {:?}",
                self.scales,
                self.arch.as_str(),
                self.structural_scales()
            )));
        }
        for &s in &self.scales {
            if self.height % s != 0 || self.width % s != 0 {
                return Err(Error::config(format!(
                    "scale {s} does not divide input dims {}x{}",
                    self.height, self.width
                )));
            }
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::config("dilations must be >= 1".to_string()));
        }
        for (i, pair) in [self.bank.block1, self.bank.block2].iter().enumerate() {
            let dev = pair.area_deviation();
            if dev > 0.2 {
                return Err(Error::config(format!(
                    "rect bank block {} area deviation {dev:.3} exceeds 0.2",
                    i + 1
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Canonical text record embedded in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "arch {}\nin_channels {}\nheight {}\nwidth {}\nbase_width {}\ndilations {} {} {} {}\nbank1 {} {} {} {}\nbank2 {} {} {} {}\nscales {}\ndropout {}\npadding {}\n",
            self.arch.as_str(),
            self.in_channels,
            self.height,
            self.width,
            self.base_width,
            self.dilations[0],
            self.dilations[1],
            self.dilations[2],
            self.dilations[3],
            self.bank.block1.square.0,
            self.bank.block1.square.1,
            self.bank.block1.rect.0,
            self.bank.block1.rect.1,
            self.bank.block2.square.0,
            self.bank.block2.square.1,
            self.bank.block2.rect.0,
            self.bank.block2.rect.1,
            self.scales
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            self.dropout,
            self.padding,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("bad spec line '{line}'"),
            })?;
            fields.insert(key.to_string(), rest.to_string());
        }
        let get = |key: &str| -> Result<String> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| Error::config(format!("model spec missing field '{key}'")))
        };
        let usize_of = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::config(format!("bad value for spec field '{key}'")))
        };
        let nums_of = |key: &str| -> Result<Vec<usize>> {
            get(key)?
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::config(format!("bad value for spec field '{key}'")))
                })
                .collect()
        };
        let dil = nums_of("dilations")?;
        if dil.len() != 4 {
            return Err(Error::config("dilations must list 4 values".to_string()));
        }
        let b1 = nums_of("bank1")?;
        let b2 = nums_of("bank2")?;
        if b1.len() != 4 || b2.len() != 4 {
            return Err(Error::config("bank entries must list 4 values".to_string()));
        }
        let spec = ModelSpec {
            arch: Arch::parse(&get("arch")?)?,
            in_channels: usize_of("in_channels")?,
            height: usize_of("height")?,
            width: usize_of("width")?,
            base_width: usize_of("base_width")?,
            dilations: [dil[0], dil[1], dil[2], dil[3]],
            bank: RectBank {
                block1: BankPair {
                    square: (b1[0], b1[1]),
                    rect: (b1[2], b1[3]),
                },
                block2: BankPair {
                    square: (b2[0], b2[1]),
                    rect: (b2[2], b2[3]),
                },
            },
            scales: nums_of("scales")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::config("bad value for spec field 'dropout'".to_string()))?,
            padding: match get("padding")?.as_str() {
                "sphere" => PadMode::Sphere,
                "zero" => PadMode::Zero,
                other => return Err(Error::config(format!("unknown padding mode '{other}'"))),
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Layer graph IR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum GOp {
    Input,
    Conv {
        input: usize,
        w: usize,
        b: usize,
        spec: ConvSpec,
    },
    Deconv {
        input: usize,
        w: usize,
        b: usize,
        spec: ConvSpec,
    },
    Elu {
        input: usize,
    },
    Dropout {
        input: usize,
        stream: u64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
}

#[derive(Debug, Clone)]
struct GNode {
    label: String,
    op: GOp,
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    nodes: Vec<GNode>,
    /// (downscale factor, node index), coarse to fine.
    outputs: Vec<(usize, usize)>,
    pub params: Vec<Param<T>>,
    /// Training steps already applied (persisted in checkpoints).
    pub step: u64,
}

/// Per-layer receptive field, in input pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfEntry {
    pub label: String,
    pub rf_h: usize,
    pub rf_w: usize,
}

struct Builder<T: Scalar> {
    nodes: Vec<GNode>,
    params: Vec<Param<T>>,
    rng: Option<SplitMix64>,
    padding: PadMode,
    streams: u64,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: Option<u64>, padding: PadMode) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            rng: seed.map(SplitMix64::new),
            padding,
            streams: 0,
        }
    }

    fn push(&mut self, label: &str, op: GOp) -> usize {
        self.nodes.push(GNode {
            label: label.to_string(),
            op,
        });
        self.nodes.len() - 1
    }

    fn input(&mut self) -> usize {
        self.push("input", GOp::Input)
    }

    fn weight_param(&mut self, name: String, shape: Shape, fan_in: usize) -> usize {
        let tensor = match &mut self.rng {
            Some(rng) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..shape.numel())
                    .map(|_| T::from_f64(rng.range(-bound, bound)))
                    .collect();
                Tensor { shape, data }
            }
            None => Tensor::zeros(shape),
        };
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    fn bias_param(&mut self, name: String, shape: Shape) -> usize {
        self.params.push(Param {
            name,
            tensor: Tensor::zeros(shape),
        });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        label: &str,
        input: usize,
        ic: usize,
        oc: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
    ) -> usize {
        let spec = ConvSpec {
            in_channels: ic,
            out_channels: oc,
            kernel,
            stride,
            dilation,
            padding: self.padding,
        };
        let fan_in = ic * kernel.0 * kernel.1;
        let w = self.weight_param(format!("{label}.weight"), spec.weight_shape(), fan_in);
        let b = self.bias_param(format!("{label}.bias"), spec.bias_shape());
        self.push(label, GOp::Conv { input, w, b, spec })
    }

    fn deconv(&mut self, label: &str, input: usize, ic: usize, oc: usize) -> usize {
        let spec = ConvSpec {
            in_channels: ic,
            out_channels: oc,
            kernel: (3, 3),
            stride: 2,
            dilation: 1,
            padding: self.padding,
        };
        // Each output cell of a stride-2 scatter sees about a quarter of the taps.
        let fan_in = (ic * 9 / 4).max(1);
        let w = self.weight_param(
            format!("{label}.weight"),
            spec.transpose_weight_shape(),
            fan_in,
        );
        let b = self.bias_param(format!("{label}.bias"), spec.bias_shape());
        self.push(label, GOp::Deconv { input, w, b, spec })
    }

    fn elu(&mut self, label: &str, input: usize) -> usize {
        self.push(label, GOp::Elu { input })
    }

    fn dropout(&mut self, label: &str, input: usize) -> usize {
        let stream = self.streams;
        self.streams += 1;
        self.push(label, GOp::Dropout { input, stream })
    }

    fn add(&mut self, label: &str, a: usize, b: usize) -> usize {
        self.push(label, GOp::Add { a, b })
    }

    fn concat(&mut self, label: &str, inputs: Vec<usize>) -> usize {
        self.push(label, GOp::Concat { inputs })
    }

    fn upsample(&mut self, label: &str, input: usize, factor: usize) -> usize {
        self.push(label, GOp::Upsample { input, factor })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_elu(
        &mut self,
        label: &str,
        input: usize,
        ic: usize,
        oc: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
    ) -> usize {
        let c = self.conv(label, input, ic, oc, kernel, stride, dilation);
        self.elu(&format!("{label}.elu"), c)
    }
}

fn build_uresnet_graph<T: Scalar>(spec: &ModelSpec, seed: Option<u64>) -> Model<T> {
    let w0 = spec.base_width;
    let mut b = Builder::new(seed, spec.padding);
    let input = b.input();

    let mut x = b.conv_elu("pre1", input, spec.in_channels, w0, (3, 3), 1, 1);
    x = b.conv_elu("pre2", x, w0, w0, (3, 3), 1, 1);
    let mut c = w0;
    for i in 1..=4 {
        let (cin, cout) = (c, c * 2);
        let t = b.conv_elu(&format!("down{i}.conv_s2"), x, cin, cout, (3, 3), 2, 1);
        let t = b.conv_elu(&format!("down{i}.conv_a"), t, cout, cout, (3, 3), 1, 1);
        let t = b.conv(&format!("down{i}.conv_b"), t, cout, cout, (3, 3), 1, 1);
        let p = b.conv(&format!("down{i}.proj"), x, cin, cout, (1, 1), 2, 1);
        let s = b.add(&format!("down{i}.skip"), t, p);
        x = b.elu(&format!("down{i}.elu"), s);
        c = cout;
    }

    let mut outputs = Vec::new();
    let t = b.deconv("up0.deconv", x, c, c / 2);
    let t = b.elu("up0.deconv.elu", t);
    let mut feat = b.conv_elu("up0.conv", t, c / 2, c / 2, (3, 3), 1, 1);
    c /= 2; // features at /8
    let mut feat_c = c;
    let mut scale = 8usize;
    for i in 1..=3 {
        let dp = b.dropout(&format!("pred{scale}.drop"), feat);
        let pred = b.conv(&format!("pred{scale}.conv"), dp, feat_c, 1, (3, 3), 1, 1);
        outputs.push((scale, pred));
        let t = b.deconv(&format!("up{i}.deconv"), feat, feat_c, c / 2);
        let t = b.elu(&format!("up{i}.deconv.elu"), t);
        let g = b.conv_elu(&format!("up{i}.conv"), t, c / 2, c / 2, (3, 3), 1, 1);
        let up = b.upsample(&format!("pred{scale}.up"), pred, 2);
        feat = b.concat(&format!("up{i}.cat"), vec![g, up]);
        c /= 2;
        feat_c = c + 1;
        scale /= 2;
    }
    let dp = b.dropout("pred1.drop", feat);
    let pred = b.conv("pred1.conv", dp, feat_c, 1, (3, 3), 1, 1);
    outputs.push((1, pred));

    Model {
        spec: spec.clone(),
        nodes: b.nodes,
        outputs,
        params: b.params,
        step: 0,
    }
}

fn build_rectnet_graph<T: Scalar>(spec: &ModelSpec, seed: Option<u64>) -> Model<T> {
    let w0 = spec.base_width;
    let mut b = Builder::new(seed, spec.padding);
    let input = b.input();

    // Preprocessing: square ∥ rectangle branches, output channels split evenly.
    let half = w0 / 2;
    let sq = b.conv_elu(
        "pre1.sq",
        input,
        spec.in_channels,
        half,
        spec.bank.block1.square,
        1,
        1,
    );
    let rc = b.conv_elu(
        "pre1.rect",
        input,
        spec.in_channels,
        w0 - half,
        spec.bank.block1.rect,
        1,
        1,
    );
    let p1 = b.concat("pre1.cat", vec![sq, rc]);

    let sq = b.conv_elu("pre2.sq", p1, w0, w0, spec.bank.block2.square, 1, 1);
    let rc = b.conv_elu("pre2.rect", p1, w0, w0, spec.bank.block2.rect, 1, 1);
    let p2 = b.concat("pre2.cat", vec![sq, rc]);

    // Downscale block: spatial ÷4 via two stride-2 convs, plus two convs.
    let c = 4 * w0;
    let t = b.conv_elu("down.conv1_s2", p2, 2 * w0, c, (3, 3), 2, 1);
    let t = b.conv_elu("down.conv2_s2", t, c, c, (3, 3), 2, 1);
    let t = b.conv_elu("down.conv3", t, c, c, (3, 3), 1, 1);
    let d = b.conv_elu("down.conv4", t, c, c, (3, 3), 1, 1);

    // Increasing-dilation blocks with 1×1 reductions and skip connections.
    let t = b.conv_elu("dil1.conv_a", d, c, c, (3, 3), 1, spec.dilations[0]);
    let t = b.conv_elu("dil1.conv_b", t, c, c, (3, 3), 1, spec.dilations[1]);
    let t = b.conv("dil1.reduce", t, c, c, (1, 1), 1, 1);
    let s = b.add("dil1.skip", t, d);
    let a = b.elu("dil1.elu", s);

    let t = b.conv_elu("dil2.conv_a", a, c, c, (3, 3), 1, spec.dilations[2]);
    let t = b.conv_elu("dil2.conv_b", t, c, c, (3, 3), 1, spec.dilations[3]);
    let t = b.conv("dil2.reduce", t, c, c, (1, 1), 1, 1);
    let s = b.add("dil2.skip", t, a);
    let bb = b.elu("dil2.elu", s);

    // Decoder: /4 → /2 with a prediction, then /2 → /1 with the final one.
    let t = b.deconv("up1.deconv", bb, c, 2 * w0);
    let t = b.elu("up1.deconv.elu", t);
    let f2 = b.conv_elu("up1.conv", t, 2 * w0, 2 * w0, (3, 3), 1, 1);
    let dp = b.dropout("pred2.drop", f2);
    let pred2 = b.conv("pred2.conv", dp, 2 * w0, 1, (3, 3), 1, 1);

    let t = b.deconv("up2.deconv", f2, 2 * w0, w0);
    let t = b.elu("up2.deconv.elu", t);
    let g1 = b.conv_elu("up2.conv", t, w0, w0, (3, 3), 1, 1);
    let up = b.upsample("pred2.up", pred2, 2);
    let cat = b.concat("up2.cat", vec![g1, up]);
    let dp = b.dropout("pred1.drop", cat);
    let pred1 = b.conv("pred1.conv", dp, w0 + 1, 1, (3, 3), 1, 1);

    Model {
        spec: spec.clone(),
        nodes: b.nodes,
        outputs: vec![(2, pred2), (1, pred1)],
        params: b.params,
        step: 0,
    }
}

/// Tape nodes produced by one forward pass.
pub struct ForwardPass {
    /// (downscale factor, prediction node), coarse to fine.
    pub predictions: Vec<(usize, NodeId)>,
    /// Tape leaf of every parameter, aligned with `model.params`.
    pub param_ids: Vec<NodeId>,
    /// Tape node of every graph node (for probing intermediate layers).
    pub node_ids: Vec<NodeId>,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with seeded He-uniform weight init and zero biases.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
        spec.validate()?;
        Ok(match spec.arch {
            Arch::UResNet => build_uresnet_graph(spec, Some(seed)),
            Arch::RectNet => build_rectnet_graph(spec, Some(seed)),
        })
    }

    /// All-zero parameters (predictions equal the bias, i.e. zero).
    pub fn zeroed(spec: &ModelSpec) -> Result<Model<T>> {
        spec.validate()?;
        Ok(match spec.arch {
            Arch::UResNet => build_uresnet_graph(spec, None),
            Arch::RectNet => build_rectnet_graph(spec, None),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.shape.numel()).sum()
    }

    pub fn node_index(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.label == label)
    }

    /// Runs the graph on a tape, inserting the model parameters as leaves.
    /// `train` enables dropout (keyed on (seed, stream, step)); `trainable`
    /// makes the parameter leaves gradient-requiring.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        train: bool,
        trainable: bool,
        seed: u64,
        step: u64,
    ) -> Result<ForwardPass> {
        let param_ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable))
            .collect();
        self.forward_with_params(tape, input, &param_ids, train, seed, step)
    }

    /// Forward pass over externally supplied parameter leaves (used by the
    /// gradient checker, which owns the perturbed parameters).
    pub fn forward_with_params(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        param_ids: &[NodeId],
        train: bool,
        seed: u64,
        step: u64,
    ) -> Result<ForwardPass> {
        let in_shape = tape.value(input).shape;
        if in_shape.c != self.spec.in_channels
            || in_shape.h != self.spec.height
            || in_shape.w != self.spec.width
        {
            return Err(Error::shape(format!(
                "input {} does not match model dims {}x{}x{}",
                in_shape, self.spec.in_channels, self.spec.height, self.spec.width
            )));
        }
        if param_ids.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter leaves, got {}",
                self.params.len(),
                param_ids.len()
            )));
        }
        let mut ids: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let id = match &node.op {
                GOp::Input => input,
                GOp::Conv { input, w, b, spec } => {
                    tape.conv2d(ids[*input], param_ids[*w], param_ids[*b], spec)?
                }
                GOp::Deconv { input, w, b, spec } => {
                    tape.conv_transpose2d(ids[*input], param_ids[*w], param_ids[*b], spec)?
                }
                GOp::Elu { input } => tape.elu(ids[*input]),
                GOp::Dropout { input, stream } => {
                    tape.dropout(ids[*input], self.spec.dropout, seed, *stream, step, train)?
                }
                GOp::Add { a, b } => tape.add(ids[*a], ids[*b])?,
                GOp::Concat { inputs } => {
                    let mapped: Vec<NodeId> = inputs.iter().map(|&i| ids[i]).collect();
                    tape.concat(&mapped)?
                }
                GOp::Upsample { input, factor } => tape.upsample_nearest(ids[*input], *factor)?,
            };
            ids.push(id);
        }
        Ok(ForwardPass {
            predictions: self
                .outputs
                .iter()
                .map(|&(scale, node)| (scale, ids[node]))
                .collect(),
            param_ids: param_ids.to_vec(),
            node_ids: ids,
        })
    }

    /// Analytic receptive field of every graph node, via
    /// RF_l = RF_{l−1} + (k−1)·dilation·jump_{l−1}, jump_l = jump·stride,
    /// taking the maximum across merging branches.
    pub fn receptive_field(&self) -> Vec<RfEntry> {
        #[derive(Clone, Copy)]
        struct Rf {
            rf_h: f64,
            rf_w: f64,
            jump_h: f64,
            jump_w: f64,
        }
        let mut states: Vec<Rf> = Vec::with_capacity(self.nodes.len());
        let mut entries = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let st = match &node.op {
                GOp::Input => Rf {
                    rf_h: 1.0,
                    rf_w: 1.0,
                    jump_h: 1.0,
                    jump_w: 1.0,
                },
                GOp::Conv { input, spec, .. } => {
                    let p = states[*input];
                    Rf {
                        rf_h: p.rf_h
                            + (spec.kernel.0 - 1) as f64 * spec.dilation as f64 * p.jump_h,
                        rf_w: p.rf_w
                            + (spec.kernel.1 - 1) as f64 * spec.dilation as f64 * p.jump_w,
                        jump_h: p.jump_h * spec.stride as f64,
                        jump_w: p.jump_w * spec.stride as f64,
                    }
                }
                GOp::Deconv { input, spec, .. } => {
                    let p = states[*input];
                    let jh = p.jump_h / spec.stride as f64;
                    let jw = p.jump_w / spec.stride as f64;
                    Rf {
                        rf_h: p.rf_h + (spec.kernel.0 - 1) as f64 * spec.dilation as f64 * jh,
                        rf_w: p.rf_w + (spec.kernel.1 - 1) as f64 * spec.dilation as f64 * jw,
                        jump_h: jh,
                        jump_w: jw,
                    }
                }
                GOp::Elu { input } | GOp::Dropout { input, .. } => states[*input],
                GOp::Add { a, b } => {
                    let (pa, pb) = (states[*a], states[*b]);
                    Rf {
                        rf_h: pa.rf_h.max(pb.rf_h),
                        rf_w: pa.rf_w.max(pb.rf_w),
                        jump_h: pa.jump_h,
                        jump_w: pa.jump_w,
                    }
                }
                GOp::Concat { inputs } => {
                    let mut st = states[inputs[0]];
                    for &i in &inputs[1..] {
                        st.rf_h = st.rf_h.max(states[i].rf_h);
                        st.rf_w = st.rf_w.max(states[i].rf_w);
                    }
                    st
                }
                GOp::Upsample { input, factor } => {
                    let p = states[*input];
                    Rf {
                        jump_h: p.jump_h / *factor as f64,
                        jump_w: p.jump_w / *factor as f64,
                        ..p
                    }
                }
            };
            states.push(st);
            entries.push(RfEntry {
                label: node.label.clone(),
                rf_h: st.rf_h.round() as usize,
                rf_w: st.rf_w.round() as usize,
            });
        }
        entries
    }

    pub fn rf_of(&self, label: &str) -> Option<RfEntry> {
        self.receptive_field()
            .into_iter()
            .find(|e| e.label == label)
    }
}

/// RF recurrence over a plain chain of conv layers (kernel, stride,
/// dilation); returns per-layer (rf_h, rf_w).
pub fn rf_chain(layers: &[((usize, usize), usize, usize)]) -> Vec<(usize, usize)> {
    let mut rf = (1usize, 1usize);
    let mut jump = (1usize, 1usize);
    let mut out = Vec::with_capacity(layers.len());
    for &((kh, kw), stride, dilation) in layers {
        rf.0 += (kh - 1) * dilation * jump.0;
        rf.1 += (kw - 1) * dilation * jump.1;
        jump.0 *= stride;
        jump.1 *= stride;
        out.push(rf);
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"ODCK";
const CKPT_VERSION: u32 = 1;

/// Binary layout: magic "ODCK", version u32 LE, step u64 LE, length-prefixed
/// UTF-8 spec record, tensor count u32 LE, then per tensor
/// {name_len u32 + name bytes, rank u32, dims u32×rank, f32 LE payload}.
pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.step.to_le_bytes());
    let spec_text = model.spec.to_text();
    out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let s = p.tensor.shape;
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in [s.n as u32, s.c as u32, s.h as u32, s.w as u32] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &p.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated checkpoint while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = ByteReader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad checkpoint magic {magic:?}, expected ODCK"),
        });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let step = r.u64("step")?;
    let spec_len = r.u32("spec length")? as usize;
    let spec_pos = r.pos;
    let spec_bytes = r.take(spec_len, "spec record")?;
    let spec_text = std::str::from_utf8(spec_bytes).map_err(|_| Error::Format {
        offset: spec_pos,
        msg: "spec record is not valid UTF-8".to_string(),
    })?;
    let spec = ModelSpec::from_text(spec_text)?;
    let mut model: Model<f32> = Model::zeroed(&spec)?;
    model.step = step;

    let count = r.u32("tensor count")? as usize;
    if count != model.params.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!(
                "checkpoint stores {count} tensors, model expects {}",
                model.params.len()
            ),
        });
    }
    for i in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: name_pos,
                msg: "tensor name is not valid UTF-8".to_string(),
            })?
            .to_string();
        if name != model.params[i].name {
            return Err(Error::Format {
                offset: name_pos,
                msg: format!(
                    "tensor {i} named '{name}', model expects '{}'",
                    model.params[i].name
                ),
            });
        }
        let rank = r.u32("tensor rank")?;
        if rank != 4 {
            return Err(Error::Format {
                offset: r.pos - 4,
                msg: format!("tensor rank {rank}, expected 4"),
            });
        }
        let mut dims = [0u32; 4];
        for d in &mut dims {
            *d = r.u32("tensor dim")?;
        }
        let shape = Shape::new(
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
        );
        if shape != model.params[i].tensor.shape {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!(
                    "tensor '{name}' has dims {shape}, model expects {}",
                    model.params[i].tensor.shape
                ),
            });
        }
        let payload = r.take(shape.numel() * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.params[i].tensor = Tensor::from_vec(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: "trailing bytes after checkpoint payload".to_string(),
        });
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_once(model: &Model<f32>, input: Tensor<f32>) -> Vec<(usize, Tensor<f32>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(input, false);
        let pass = model.forward(&mut tape, x, false, false, 0, 0).unwrap();
        pass.predictions
            .iter()
            .map(|&(s, id)| (s, tape.value(id).clone()))
            .collect()
    }

    fn rand_input(spec: &ModelSpec, seed: u64) -> Tensor<f32> {
        let shape = Shape::new(1, spec.in_channels, spec.height, spec.width);
        let mut rng = crate::rng::SplitMix64::new(seed);
        Tensor::from_vec(
            shape,
            (0..shape.numel())
                .map(|_| rng.range(0.0, 1.0) as f32)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn uresnet_shapes_and_scales() {
        let spec = ModelSpec::uresnet(64, 128, 8);
        let model: Model<f32> = Model::build(&spec, 1).unwrap();
        let preds = forward_once(&model, rand_input(&spec, 2));
        let scales: Vec<usize> = preds.iter().map(|(s, _)| *s).collect();
        assert_eq!(scales, vec![8, 4, 2, 1]);
        for (s, t) in &preds {
            assert_eq!(t.shape, Shape::new(1, 1, 64 / s, 128 / s));
            assert!(t.all_finite());
        }
    }

    #[test]
    fn rectnet_shapes_and_scales() {
        let spec = ModelSpec::rectnet(128, 256, 8);
        let model: Model<f32> = Model::build(&spec, 3).unwrap();
        let preds = forward_once(&model, rand_input(&spec, 4));
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].0, 2);
        assert_eq!(preds[0].1.shape, Shape::new(1, 1, 64, 128));
        assert_eq!(preds[1].0, 1);
        assert_eq!(preds[1].1.shape, Shape::new(1, 1, 128, 256));
    }

    #[test]
    fn zero_init_predictions_equal_bias() {
        for spec in [ModelSpec::uresnet(32, 64, 2), ModelSpec::rectnet(32, 64, 2)] {
            let model: Model<f32> = Model::zeroed(&spec).unwrap();
            let preds = forward_once(&model, rand_input(&spec, 5));
            for (_, t) in preds {
                assert!(t.all_finite());
                assert!(
                    t.data.iter().all(|&v| v == 0.0),
                    "zero model must emit its (zero) biases"
                );
            }
        }
    }

    #[test]
    fn uresnet_param_count_matches_arithmetic_oracle() {
        // Independent per-layer arithmetic: conv = oc·ic·kh·kw + oc,
        // deconv = ic·oc·kh·kw + oc. Encoder widths double per block; the
        // decoder carries one extra channel per concatenated prediction.
        let w = 8usize;
        let conv = |oc: usize, ic: usize, kh: usize, kw: usize| oc * ic * kh * kw + oc;
        let mut expect = 0usize;
        expect += conv(w, 3, 3, 3); // pre1
        expect += conv(w, w, 3, 3); // pre2
        let mut c = w;
        for _ in 0..4 {
            expect += conv(2 * c, c, 3, 3); // strided conv
            expect += conv(2 * c, 2 * c, 3, 3) * 2; // two regular convs
            expect += conv(2 * c, c, 1, 1); // skip projection
            c *= 2;
        }
        expect += c * (c / 2) * 9 + c / 2; // up0 deconv
        expect += conv(c / 2, c / 2, 3, 3); // up0 conv
        c /= 2;
        let mut feat = c;
        for _ in 0..3 {
            expect += conv(1, feat, 3, 3); // prediction branch
            expect += feat * (c / 2) * 9 + c / 2; // deconv
            expect += conv(c / 2, c / 2, 3, 3); // conv
            c /= 2;
            feat = c + 1;
        }
        expect += conv(1, feat, 3, 3); // final prediction

        let spec = ModelSpec::uresnet(64, 128, w);
        let model: Model<f32> = Model::build(&spec, 1).unwrap();
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn rectnet_param_count_matches_arithmetic_oracle() {
        let w = 8usize;
        let conv = |oc: usize, ic: usize, kh: usize, kw: usize| oc * ic * kh * kw + oc;
        let mut expect = 0usize;
        expect += conv(w / 2, 3, 3, 3) + conv(w / 2, 3, 1, 9); // pre1
        expect += conv(w, w, 5, 5) + conv(w, w, 3, 9); // pre2
        let c = 4 * w;
        expect += conv(c, 2 * w, 3, 3); // down s2 #1
        expect += conv(c, c, 3, 3) * 3; // down s2 #2 and two convs
        expect += (conv(c, c, 3, 3) * 2 + conv(c, c, 1, 1)) * 2; // dilation blocks
        expect += c * (2 * w) * 9 + 2 * w; // up1 deconv
        expect += conv(2 * w, 2 * w, 3, 3); // up1 conv
        expect += conv(1, 2 * w, 3, 3); // pred2
        expect += (2 * w) * w * 9 + w; // up2 deconv
        expect += conv(w, w, 3, 3); // up2 conv
        expect += conv(1, w + 1, 3, 3); // pred1

        let spec = ModelSpec::rectnet(64, 128, w);
        let model: Model<f32> = Model::build(&spec, 1).unwrap();
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn rect_bank_area_rule() {
        let bank = RectBank::default();
        assert_eq!(bank.block1.area_deviation(), 0.0);
        assert!((bank.block2.area_deviation() - 2.0 / 25.0).abs() < 1e-12);
        let mut spec = ModelSpec::rectnet(64, 128, 8);
        spec.bank.block1.rect = (1, 5); // area 5 vs 9 → 44% off
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dims_divisibility_enforced() {
        assert!(ModelSpec::uresnet(40, 80, 8).validate().is_err());
        assert!(ModelSpec::rectnet(30, 60, 8).validate().is_err());
        assert!(ModelSpec::uresnet(64, 128, 8).validate().is_ok());
    }

    #[test]
    fn rf_chain_hand_examples() {
        // Three stacked 3×3 convs with dilations 1, 2, 4: RF = 1 + 2(1+2+4).
        let rf = rf_chain(&[((3, 3), 1, 1), ((3, 3), 1, 2), ((3, 3), 1, 4)]);
        assert_eq!(rf.last().unwrap(), &(15, 15));
        // A single 1×9 conv.
        let rf = rf_chain(&[((1, 9), 1, 1)]);
        assert_eq!(rf[0], (1, 9));
        // Stride-2 3×3 then 3×3: 3 + 2·2 = 7.
        let rf = rf_chain(&[((3, 3), 2, 1), ((3, 3), 1, 1)]);
        assert_eq!(rf.last().unwrap(), &(7, 7));
    }

    #[test]
    fn rectnet_rf_reaches_half_width() {
        let spec = ModelSpec::rectnet(128, 256, 8);
        let model: Model<f32> = Model::build(&spec, 1).unwrap();
        let rf = model.rf_of("dil2.conv_b").unwrap();
        assert!(
            rf.rf_w >= 128,
            "last dilation layer rf_w = {} < half of 256",
            rf.rf_w
        );
    }

    #[test]
    fn rf_matches_bruteforce_gradient_support() {
        // Zero padding and uniform positive weights: the gradient support of
        // one centered output element must span exactly the analytic RF.
        // 96 rows leave room for the RF plus the bottom-skewed stride pads.
        let mut spec = ModelSpec::rectnet(96, 128, 2);
        spec.dilations = [1, 1, 1, 1];
        spec.padding = PadMode::Zero;
        let mut model: Model<f64> = Model::zeroed(&spec).unwrap();
        for p in &mut model.params {
            let fill = if p.name.ends_with(".bias") { 0.01 } else { 0.05 };
            p.tensor = Tensor::filled(p.tensor.shape, fill);
        }
        let probe = "dil2.conv_b.elu";
        let node = model.node_index(probe).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 3, 96, 128), 1.0), true);
        let pass = model.forward(&mut tape, x, false, false, 0, 0).unwrap();
        let layer = pass.node_ids[node];
        let ls = tape.value(layer).shape;
        // Select the centered element of channel 0 via a one-hot mask.
        let mut mask = Tensor::zeros(ls);
        let gt = Tensor::zeros(ls);
        mask.data[ls.idx(0, 0, ls.h / 2, ls.w / 2)] = 1.0;
        let loss = tape.masked_sq_diff_mean(layer, &gt, &mask).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();

        let (mut min_x, mut max_x, mut min_y, mut max_y) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for y in 0..96 {
            for xx in 0..128 {
                if g.data[g.shape.idx(0, 0, y, xx)].abs() > 1e-30 {
                    min_x = min_x.min(xx);
                    max_x = max_x.max(xx);
                    min_y = min_y.min(y);
                    max_y = max_y.max(y);
                }
            }
        }
        let rf = model.rf_of(probe).unwrap();
        assert_eq!(max_x - min_x + 1, rf.rf_w, "measured w-support vs analytic");
        assert_eq!(max_y - min_y + 1, rf.rf_h, "measured h-support vs analytic");
    }

    #[test]
    fn rectnet_shift_equivariance_bit_exact() {
        // Sphere padding commutes with 4k-column input shifts through the ÷4
        // bottleneck; each output shifts by 4k/s.
        let spec = ModelSpec::rectnet(32, 64, 4);
        let model: Model<f32> = Model::build(&spec, 11).unwrap();
        let x = rand_input(&spec, 12);
        let shift = 8usize;
        let sh = x.shape;
        let mut xs = Tensor::zeros(sh);
        for c in 0..sh.c {
            for y in 0..sh.h {
                for xx in 0..sh.w {
                    xs.data[sh.idx(0, c, y, (xx + shift) % sh.w)] = x.data[sh.idx(0, c, y, xx)];
                }
            }
        }
        let base = forward_once(&model, x);
        let shifted = forward_once(&model, xs);
        for ((s, a), (_, b)) in base.iter().zip(&shifted) {
            let os = a.shape;
            let sh_out = shift / s;
            for y in 0..os.h {
                for xx in 0..os.w {
                    assert_eq!(
                        a.data[os.idx(0, 0, y, xx)].to_bits(),
                        b.data[os.idx(0, 0, y, (xx + sh_out) % os.w)].to_bits(),
                        "scale {s} mismatch at ({y},{xx})"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let spec = ModelSpec::rectnet(32, 64, 4);
        let model: Model<f32> = Model::build(&spec, 21).unwrap();
        let bytes = encode_checkpoint(&model);
        let loaded = decode_checkpoint(&bytes).unwrap();
        let again = encode_checkpoint(&loaded);
        assert_eq!(bytes, again);

        // Forward outputs reproduce bit-exactly after the round trip.
        let x = rand_input(&spec, 22);
        let a = forward_once(&model, x.clone());
        let b = forward_once(&loaded, x);
        for ((_, ta), (_, tb)) in a.iter().zip(&b) {
            assert_eq!(
                ta.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                tb.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn checkpoint_truncation_and_magic_errors() {
        let spec = ModelSpec::rectnet(32, 64, 2);
        let model: Model<f32> = Model::build(&spec, 1).unwrap();
        let bytes = encode_checkpoint(&model);

        match decode_checkpoint(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, msg }) => {
                assert!(msg.contains("truncated"), "{msg}");
                assert!(offset > 0);
            }
            Err(other) => panic!("expected format error, got {other}"),
            Ok(_) => panic!("truncated checkpoint must fail"),
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        match decode_checkpoint(&bad) {
            Err(e) => assert!(e.to_string().contains("magic")),
            Ok(_) => panic!("bad magic must fail"),
        }
    }

    #[test]
    fn spec_text_round_trip() {
        for spec in [
            ModelSpec::uresnet(64, 128, 8),
            ModelSpec::rectnet(128, 256, 16),
        ] {
            let parsed = ModelSpec::from_text(&spec.to_text()).unwrap();
            assert_eq!(spec, parsed);
        }
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        use crate::tensor::grad_check;

        for (spec, seed) in [
            (ModelSpec::rectnet(8, 16, 2), 31u64),
            (ModelSpec::uresnet(32, 64, 2), 32u64),
        ] {
            let model: Model<f64> = Model::build(&spec, seed).unwrap();
            let mut rng = crate::rng::SplitMix64::new(seed + 100);
            let in_shape = Shape::new(1, 3, spec.height, spec.width);
            let input = Tensor::from_vec(
                in_shape,
                (0..in_shape.numel()).map(|_| rng.range(0.1, 1.0)).collect(),
            )
            .unwrap();
            let out_shape = Shape::new(1, 1, spec.height, spec.width);
            let gt = Tensor::filled(out_shape, 2.0);
            let mut mask = Tensor::filled(out_shape, 1.0);
            mask.data[5] = 0.0; // exercise the masked path

            let params: Vec<(String, Tensor<f64>)> = model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect();
            let report = grad_check(
                &params,
                |tape, ids| {
                    let x = tape.leaf(input.clone(), false);
                    let pass = model.forward_with_params(tape, x, ids, false, 0, 0)?;
                    let (_, pred) = pass
                        .predictions
                        .iter()
                        .find(|(s, _)| *s == 1)
                        .copied()
                        .unwrap();
                    tape.masked_sq_diff_mean(pred, &gt, &mask)
                },
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{}: {report:?}",
                spec.arch.as_str()
            );
        }
    }
}
