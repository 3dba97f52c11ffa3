//! Randomly initialized models with the published layer dimensions.
//!
//! Only the CONV/FC sizes of the reference topologies are fixed; pooling is
//! placed so the classifier input matches the listed FC width. Binary
//! convolutions are valid-only, so each BNN arm uses its own spatial plan.
//! Integer shifts, thresholds and logit biases are calibrated on a seeded
//! batch of synthetic images so activations stay in range and bits are
//! roughly balanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{input_tensor, Activation, ArmKind, CoopModel, Layer, LayerSpec, ModelGraph};
use crate::bnn::{binconv2d, fuse_batchnorm, BinConvParams, BinFilters};
use crate::float_ref::{BatchNorm, DEFAULT_BN_EPS};
use crate::int8::{conv_accumulators, fc_accumulators, AccMode, Int8ConvParams, Int8FcParams};
use crate::synthetic::synthetic_images;
use crate::tensor::{BitTensor, FloatTensor, KernelShape, QuantFilters, QuantTensor, Shape};

pub const DEFAULT_SEED: u64 = 2019;

/// Dequantized activations of hidden int8 layers target `2^HIDDEN_EXP` per LSB.
const HIDDEN_EXP: i32 = -5;
/// Logit resolution of the classifier heads.
const LOGIT_EXP: i32 = -4;
/// Largest calibrated int8 magnitude.
const CALIB_PEAK: f64 = 100.0;
/// Synthetic images used to calibrate shifts, thresholds and logit biases.
const CALIB_IMAGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    /// 3x32x32 input, CONV 32x5x5, 32x5x5, 64x5x5, FC 1024x10.
    CaffeNet,
    /// 1x32x32 input, CONV 32/32/64/64 5x5, FC 1024x31.
    GscNet,
    /// 1x44x44 input, 3x CONV 32x3x3, 3x 64x3x3, 3x 128x3x3, FC 128x7.
    FerNet,
    /// Small 1x12x12, 10-class network for tests and demos.
    Tiny,
}

impl Topology {
    pub const ALL: [Topology; 4] =
        [Topology::CaffeNet, Topology::GscNet, Topology::FerNet, Topology::Tiny];

    pub fn name(self) -> &'static str {
        match self {
            Topology::CaffeNet => "caffenet",
            Topology::GscNet => "gscnet",
            Topology::FerNet => "fernet",
            Topology::Tiny => "tiny",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Topology::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn input_shape(self) -> Shape {
        let (c, h, w) = match self {
            Topology::CaffeNet => (3, 32, 32),
            Topology::GscNet => (1, 32, 32),
            Topology::FerNet => (1, 44, 44),
            Topology::Tiny => (1, 12, 12),
        };
        Shape::new(c, h, w).expect("static shape")
    }

    pub fn num_classes(self) -> usize {
        match self {
            Topology::CaffeNet => 10,
            Topology::GscNet => 31,
            Topology::FerNet => 7,
            Topology::Tiny => 10,
        }
    }

    fn plans(self) -> (Vec<Stage>, Vec<Stage>) {
        use Stage::*;
        let classes = self.num_classes();
        match self {
            Topology::CaffeNet => (
                vec![
                    Conv(32, 5, 2),
                    Pool(2),
                    Bridge,
                    BinConv(32, 5),
                    BinConv(64, 5),
                    Pool(2),
                    Fc(classes),
                ],
                vec![
                    Conv(32, 5, 2),
                    Pool(2),
                    Relu,
                    Conv(32, 5, 2),
                    Pool(2),
                    Relu,
                    Conv(64, 5, 2),
                    Pool(2),
                    Relu,
                    Fc(classes),
                ],
            ),
            Topology::GscNet => (
                vec![
                    Conv(32, 5, 2),
                    Pool(2),
                    Bridge,
                    BinConv(32, 5),
                    BinConv(64, 5),
                    BinConv(64, 5),
                    Fc(classes),
                ],
                vec![
                    Conv(32, 5, 2),
                    Pool(2),
                    Relu,
                    Conv(32, 5, 2),
                    Pool(2),
                    Relu,
                    Conv(64, 5, 2),
                    Pool(2),
                    Relu,
                    Conv(64, 5, 2),
                    Relu,
                    Fc(classes),
                ],
            ),
            Topology::FerNet => (
                vec![
                    Conv(32, 3, 1),
                    Bridge,
                    BinConv(32, 3),
                    BinConv(32, 3),
                    Pool(2),
                    BinConv(64, 3),
                    BinConv(64, 3),
                    BinConv(64, 3),
                    Pool(2),
                    BinConv(128, 3),
                    BinConv(128, 3),
                    BinConv(128, 3),
                    Fc(classes),
                ],
                vec![
                    Conv(32, 3, 1),
                    Relu,
                    Conv(32, 3, 0),
                    Relu,
                    Conv(32, 3, 0),
                    Pool(2),
                    Relu,
                    Conv(64, 3, 0),
                    Relu,
                    Conv(64, 3, 0),
                    Relu,
                    Conv(64, 3, 0),
                    Pool(2),
                    Relu,
                    Conv(128, 3, 0),
                    Relu,
                    Conv(128, 3, 0),
                    Relu,
                    Conv(128, 3, 0),
                    Relu,
                    Fc(classes),
                ],
            ),
            Topology::Tiny => (
                vec![
                    Conv(8, 3, 1),
                    Bridge,
                    BinConv(16, 3),
                    Pool(2),
                    BinConv(16, 3),
                    Fc(classes),
                ],
                vec![
                    Conv(8, 3, 1),
                    Pool(2),
                    Relu,
                    Conv(16, 3, 1),
                    Pool(2),
                    Relu,
                    Fc(classes),
                ],
            ),
        }
    }

    pub fn build(self, seed: u64) -> CoopModel {
        let (bnn_plan, int8_plan) = self.plans();
        let shape = self.input_shape();
        let pixels = synthetic_images(shape, CALIB_IMAGES, seed ^ 0xCA11B);
        let calib: Vec<QuantTensor> = pixels
            .chunks(shape.len())
            .map(|p| input_tensor(p, shape).expect("calibration image matches shape"))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bnn = ArmBuilder::new(ArmKind::Bnn, &mut rng, calib.clone()).build(&bnn_plan);
        let int8 = ArmBuilder::new(ArmKind::Int8, &mut rng, calib).build(&int8_plan);
        let classes = self.num_classes();
        let bnn = ModelGraph::new(ArmKind::Bnn, shape, classes, bnn).expect("bnn plan chains");
        let int8 = ModelGraph::new(ArmKind::Int8, shape, classes, int8).expect("int8 plan chains");
        CoopModel::new(bnn, int8, None).expect("arms agree")
    }
}

pub fn build_caffenet() -> CoopModel {
    Topology::CaffeNet.build(DEFAULT_SEED)
}

pub fn build_gscnet() -> CoopModel {
    Topology::GscNet.build(DEFAULT_SEED)
}

pub fn build_fernet() -> CoopModel {
    Topology::FerNet.build(DEFAULT_SEED)
}

pub fn build_tiny(seed: u64) -> CoopModel {
    Topology::Tiny.build(seed)
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    /// int8 conv: filters, kernel, pad.
    Conv(usize, usize, usize),
    /// Fused binary conv: filters, kernel.
    BinConv(usize, usize),
    Pool(usize),
    Relu,
    Bridge,
    Fc(usize),
}

struct ArmBuilder<'a> {
    arm: ArmKind,
    rng: &'a mut ChaCha8Rng,
    calib: Vec<Activation>,
    layers: Vec<LayerSpec>,
    counts: [usize; 5],
}

impl<'a> ArmBuilder<'a> {
    fn new(arm: ArmKind, rng: &'a mut ChaCha8Rng, calib: Vec<QuantTensor>) -> Self {
        let calib = calib.into_iter().map(Activation::Quant).collect();
        ArmBuilder { arm, rng, calib, layers: vec![], counts: [0; 5] }
    }

    fn name(&mut self, slot: usize, stem: &str) -> String {
        self.counts[slot] += 1;
        format!("{}.{stem}{}", self.arm.name(), self.counts[slot])
    }

    fn push(&mut self, name: String, layer: Layer) {
        self.calib = std::mem::take(&mut self.calib)
            .into_iter()
            .map(|a| super::apply(&layer, a).expect("builder layers chain"))
            .collect();
        self.layers.push(LayerSpec { name, layer });
    }

    fn calib_quant(&self) -> Vec<QuantTensor> {
        self.calib
            .iter()
            .map(|a| match a {
                Activation::Quant(q) => q.clone(),
                Activation::Bits(b) => crate::bnn::bipolar_to_int8(b),
            })
            .collect()
    }

    fn calib_bits(&self) -> Vec<BitTensor> {
        self.calib
            .iter()
            .map(|a| match a {
                Activation::Bits(b) => b.clone(),
                Activation::Quant(_) => panic!("binary conv planned on a non-binary map"),
            })
            .collect()
    }

    fn random_i8(&mut self, n: usize) -> Vec<i8> {
        (0..n).map(|_| self.rng.gen_range(-64..=64)).collect()
    }

    fn build(mut self, plan: &[Stage]) -> Vec<LayerSpec> {
        for stage in plan {
            match *stage {
                Stage::Conv(filters, k, pad) => self.conv(filters, k, pad),
                Stage::BinConv(filters, k) => self.binconv(filters, k),
                Stage::Pool(k) => {
                    let name = self.name(2, "pool");
                    self.push(name, Layer::MaxPool { kernel: k, stride: k });
                }
                Stage::Relu => {
                    let name = self.name(3, "relu");
                    self.push(name, Layer::Relu);
                }
                Stage::Bridge => self.bridge(),
                Stage::Fc(outputs) => self.fc(outputs),
            }
        }
        let name = format!("{}.softmax", self.arm.name());
        self.layers.push(LayerSpec { name, layer: Layer::SoftmaxHead });
        self.layers
    }

    fn conv(&mut self, filters: usize, k: usize, pad: usize) {
        let xs = self.calib_quant();
        let in_shape = xs[0].shape();
        let ks = KernelShape::new(filters, in_shape.channels, k, k).expect("static kernel");
        let weights = QuantFilters::new(ks, self.random_i8(ks.len()), -7).expect("sized");
        let bias = (0..filters).map(|_| self.rng.gen_range(-512..=512)).collect();
        let mut p = Int8ConvParams {
            weights,
            bias,
            stride: 1,
            pad,
            out_scale_shift: 0,
            acc_mode: AccMode::Wide,
        };
        let out_shape = p.output_shape(in_shape).expect("plan fits");
        let peak = xs
            .iter()
            .map(|x| max_abs(&conv_accumulators(x, &p, out_shape)))
            .max()
            .unwrap_or(0);
        let (shift, wexp) = calibrate(peak, xs[0].scale_exp(), HIDDEN_EXP);
        p.out_scale_shift = shift;
        p.weights.scale_exp = wexp;
        let name = self.name(0, "conv");
        self.push(name, Layer::ConvInt8(p));
    }

    fn fc(&mut self, outputs: usize) {
        let xs = self.calib_quant();
        let s = xs[0].shape();
        let ks = KernelShape::new(outputs, s.channels, s.height, s.width).expect("static kernel");
        let weights = QuantFilters::new(ks, self.random_i8(ks.len()), -7).expect("sized");
        let mut p = Int8FcParams {
            weights,
            bias: vec![0; outputs],
            out_scale_shift: 0,
            acc_mode: AccMode::Wide,
        };
        // centre each output on the calibration batch so no class dominates
        let accs: Vec<Vec<i32>> = xs.iter().map(|x| fc_accumulators(x, &p)).collect();
        p.bias = (0..outputs)
            .map(|o| {
                let sum: i64 = accs.iter().map(|a| a[o] as i64).sum();
                (-(sum as f64 / accs.len() as f64).round()) as i32
            })
            .collect();
        let peak = xs.iter().map(|x| max_abs(&fc_accumulators(x, &p))).max().unwrap_or(0);
        let (shift, wexp) = calibrate(peak, xs[0].scale_exp(), LOGIT_EXP);
        p.out_scale_shift = shift;
        p.weights.scale_exp = wexp;
        let name = self.name(1, "fc");
        self.push(name, Layer::FcInt8(p));
    }

    fn bridge(&mut self) {
        let pre: Vec<FloatTensor> = self.calib_quant().iter().map(|q| q.dequantize()).collect();
        let bn = self.balanced_batchnorm(&pre);
        let act = fuse_batchnorm(&bn).expect("gamma is never zero");
        let name = self.name(4, "bridge");
        self.push(name, Layer::BinActBridge(act));
    }

    fn binconv(&mut self, filters: usize, k: usize) {
        let xs = self.calib_bits();
        let ks = KernelShape::new(filters, xs[0].shape().channels, k, k).expect("static kernel");
        let bits: Vec<u8> = (0..ks.len()).map(|_| self.rng.gen_range(0..2)).collect();
        let conv = BinConvParams {
            weights: BinFilters::from_bits(ks, &bits).expect("sized"),
            alpha: (0..filters).map(|_| self.rng.gen_range(32..=127)).collect(),
            alpha_scale_exp: -7,
            stride: 1,
        };
        let pre: Vec<FloatTensor> =
            xs.iter().map(|x| binconv2d(x, &conv).expect("plan fits")).collect();
        let bn = self.balanced_batchnorm(&pre);
        let act = fuse_batchnorm(&bn).expect("gamma is never zero");
        let name = self.name(0, "binconv");
        self.push(name, Layer::BinConvFused { conv, act });
    }

    /// Batch norm whose fused threshold sits at each channel's calibration median.
    fn balanced_batchnorm(&mut self, pre: &[FloatTensor]) -> BatchNorm {
        let s = pre[0].shape();
        let plane = s.plane();
        let mut mean = Vec::with_capacity(s.channels);
        let mut gamma = Vec::with_capacity(s.channels);
        for c in 0..s.channels {
            let mut vals: Vec<f32> =
                pre.iter().flat_map(|t| &t.data()[c * plane..(c + 1) * plane]).copied().collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            mean.push(vals[vals.len() / 2]);
            gamma.push(if self.rng.gen_bool(0.2) { -1.0 } else { 1.0 });
        }
        BatchNorm {
            mean,
            var: vec![1.0; s.channels],
            gamma,
            beta: vec![0.0; s.channels],
            eps: DEFAULT_BN_EPS,
        }
    }
}

fn max_abs(v: &[i32]) -> i64 {
    v.iter().map(|&a| (a as i64).abs()).max().unwrap_or(0)
}

/// Picks a right shift bringing `peak` to about `CALIB_PEAK`, and a weight
/// scale exponent so the output lands on `target_exp` when possible.
fn calibrate(peak: i64, input_exp: i32, target_exp: i32) -> (u32, i32) {
    let shift = if peak as f64 <= CALIB_PEAK {
        0
    } else {
        ((peak as f64 / CALIB_PEAK).log2().ceil() as i32).clamp(0, 31)
    };
    let wexp = (target_exp - input_exp - shift).clamp(-31, 0);
    // output exponent input + wexp + shift must stay <= 0
    let wexp = wexp.min(-(input_exp + shift)).max(-31);
    (shift as u32, wexp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, INPUT_SCALE_EXP};

    fn weight_count(g: &ModelGraph) -> usize {
        g.layers()
            .iter()
            .map(|l| match &l.layer {
                Layer::ConvInt8(p) => p.weights.shape.len(),
                Layer::FcInt8(p) => p.weights.shape.len(),
                Layer::BinConvFused { conv, .. } => conv.weights.shape().len(),
                _ => 0,
            })
            .sum()
    }

    #[test]
    fn caffenet_dims() {
        let m = build_caffenet();
        assert_eq!(m.num_classes(), 10);
        assert_eq!(m.input_shape(), Shape::new(3, 32, 32).unwrap());
        assert_eq!(weight_count(m.int8()), 2400 + 25600 + 51200 + 10240);
        assert_eq!(weight_count(m.bnn()), 2400 + 25600 + 51200 + 10240);
        let fc = m.int8().layers().iter().find(|l| l.kind() == LayerKind::FcInt8).unwrap();
        let Layer::FcInt8(p) = &fc.layer else { unreachable!() };
        assert_eq!(p.weights.shape.window_len(), 1024);
    }

    #[test]
    fn gscnet_and_fernet_dims() {
        let g = build_gscnet();
        assert_eq!(g.num_classes(), 31);
        assert_eq!(weight_count(g.int8()), 800 + 25600 + 51200 + 102400 + 1024 * 31);
        let f = build_fernet();
        assert_eq!(f.num_classes(), 7);
        let convs = 9 * 32 + 32 * 9 * 32 * 2 + 9 * (32 * 64 + 64 * 64 * 2) + 9 * (64 * 128 + 128 * 128 * 2);
        assert_eq!(weight_count(f.int8()), convs + 128 * 7);
        assert_eq!(weight_count(f.bnn()), convs + 128 * 7);
    }

    #[test]
    fn bnn_arms_keep_int8_ends() {
        for t in Topology::ALL {
            let m = t.build(1);
            let kinds: Vec<LayerKind> = m.bnn().layers().iter().map(|l| l.kind()).collect();
            assert_eq!(kinds[0], LayerKind::ConvInt8, "{}", t.name());
            assert_eq!(kinds[kinds.len() - 2], LayerKind::FcInt8, "{}", t.name());
            assert_eq!(m.bnn().input_shape(), m.int8().input_shape());
        }
    }

    #[test]
    fn builds_are_deterministic() {
        assert_eq!(build_tiny(9), build_tiny(9));
        assert_ne!(build_tiny(9), build_tiny(10));
    }

    #[test]
    fn calibrate_keeps_scale_in_range() {
        assert_eq!(calibrate(50, INPUT_SCALE_EXP, HIDDEN_EXP), (0, 0));
        let (s, w) = calibrate(100_000, -7, -5);
        assert_eq!(s, 10);
        assert_eq!(-7 + w + s as i32, -5);
        let (s, w) = calibrate(1 << 40, 0, -4);
        assert!(w + s as i32 <= 0 && w >= -31);
    }
}
