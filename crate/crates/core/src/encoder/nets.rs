//! Encoder, pretext heads and decoder.

use super::layers::{
    elu, elu_grad_from_output, sigmoid, softmax, softmax_backward, upsample_nearest, upsample_nearest_backward,
    Affine, Conv2d,
};
use super::EncoderError;
use crate::imaging::Image;
use crate::numerics::{RngStream, Scalar, Tensor};
use crate::pmsacl::Embedder;

/// Anything holding named parameter tensors.
pub trait Params<T: Scalar> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn conv_named<'a, T>(prefix: &str, c: &'a Conv2d<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    out.push((format!("{prefix}.weight"), &c.weight));
    out.push((format!("{prefix}.bias"), &c.bias));
}

fn affine_named<'a, T>(prefix: &str, a: &'a Affine<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    out.push((format!("{prefix}.weight"), &a.weight));
    out.push((format!("{prefix}.bias"), &a.bias));
}

fn zero_conv<T: Scalar>(c: &Conv2d<T>) -> Conv2d<T> {
    Conv2d {
        weight: c.weight.zeros_like(),
        bias: c.bias.zeros_like(),
        stride: c.stride,
        pad: c.pad,
    }
}

fn zero_affine<T: Scalar>(a: &Affine<T>) -> Affine<T> {
    Affine {
        weight: a.weight.zeros_like(),
        bias: a.bias.zeros_like(),
    }
}

fn cast_conv<T: Scalar, U: Scalar>(c: &Conv2d<T>) -> Conv2d<U> {
    Conv2d {
        weight: c.weight.cast(),
        bias: c.bias.cast(),
        stride: c.stride,
        pad: c.pad,
    }
}

fn cast_affine<T: Scalar, U: Scalar>(a: &Affine<T>) -> Affine<U> {
    Affine {
        weight: a.weight.cast(),
        bias: a.bias.cast(),
    }
}

fn elu_map<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        *v = elu(*v);
    }
}

fn elu_back<T: Scalar>(y: &[T], g: &mut [T]) {
    for (gv, &yv) in g.iter_mut().zip(y) {
        *gv *= elu_grad_from_output(yv);
    }
}

/// Architecture hyper-parameters shared by the encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 32, 64],
            embed_dim: 128,
        }
    }
}

/// Stride-2 conv blocks, global average pooling and a two-layer projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet<T> {
    pub blocks: Vec<Conv2d<T>>,
    pub proj0: Affine<T>,
    pub proj1: Affine<T>,
}

/// Activations recorded by [`EncoderNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    /// Input followed by the output map of every block.
    pub maps: Vec<Tensor<T>>,
    pub pooled: Vec<T>,
    pub hidden: Vec<T>,
    pub embedding: Vec<T>,
}

impl<T: Scalar> EncoderTrace<T> {
    /// Output map of block `b` (0-based).
    pub fn block_map(&self, b: usize) -> &Tensor<T> {
        &self.maps[b + 1]
    }
}

impl<T: Scalar> EncoderNet<T> {
    pub fn new(arch: &Arch, rng: &mut RngStream) -> Self {
        let mut blocks = Vec::new();
        let mut cin = arch.in_channels;
        for &c in &arch.channels {
            blocks.push(Conv2d::new(3, cin, c, 2, 1, 2f64.sqrt(), rng));
            cin = c;
        }
        let proj0 = Affine::new(cin, arch.embed_dim, 2f64.sqrt(), rng);
        let proj1 = Affine::new(arch.embed_dim, arch.embed_dim, 1.0, rng);
        Self { blocks, proj0, proj1 }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].c_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.proj0.n_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.proj1.n_out()
    }

    /// Total spatial downsampling factor of block `b`'s output.
    pub fn block_stride(&self, b: usize) -> usize {
        self.blocks[..=b].iter().map(|c| c.stride).product()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(zero_conv).collect(),
            proj0: zero_affine(&self.proj0),
            proj1: zero_affine(&self.proj1),
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderNet<U> {
        EncoderNet {
            blocks: self.blocks.iter().map(cast_conv).collect(),
            proj0: cast_affine(&self.proj0),
            proj1: cast_affine(&self.proj1),
        }
    }

    pub fn forward_tensor(&self, x: Tensor<T>) -> Result<EncoderTrace<T>, EncoderError> {
        if x.ndim() != 3 || x.shape()[2] != self.in_channels() {
            return Err(EncoderError::Shape(format!(
                "input {:?} does not match {} channels",
                x.shape(),
                self.in_channels()
            )));
        }
        let mut maps = vec![x];
        for conv in &self.blocks {
            let mut y = conv.forward(maps.last().unwrap());
            elu_map(&mut y);
            maps.push(y);
        }
        let last = maps.last().unwrap();
        let c = last.shape()[2];
        let npix = last.shape()[0] * last.shape()[1];
        let mut pooled = vec![T::zero(); c];
        for px in last.data().chunks(c) {
            for (p, &v) in pooled.iter_mut().zip(px) {
                *p += v;
            }
        }
        let inv = T::one() / T::of(npix as f64);
        pooled.iter_mut().for_each(|p| *p *= inv);
        let mut hidden = self.proj0.forward(&pooled);
        hidden.iter_mut().for_each(|v| *v = elu(*v));
        let embedding = self.proj1.forward(&hidden);
        Ok(EncoderTrace {
            maps,
            pooled,
            hidden,
            embedding,
        })
    }

    pub fn forward(&self, image: &Image) -> Result<EncoderTrace<T>, EncoderError> {
        self.forward_tensor(image.cast())
    }

    pub fn encode(&self, image: &Image) -> Result<Vec<T>, EncoderError> {
        Ok(self.forward(image)?.embedding)
    }

    /// Accumulates parameter gradients for one recorded forward pass.
    pub fn backward(&self, trace: &EncoderTrace<T>, d_embedding: &[T], grad: &mut Self) -> Result<(), EncoderError> {
        self.check_trace(trace)?;
        if d_embedding.len() != self.embed_dim() {
            return Err(EncoderError::BackwardMismatch(format!(
                "embedding gradient has {} entries, expected {}",
                d_embedding.len(),
                self.embed_dim()
            )));
        }
        let mut gh = self.proj1.backward(&trace.hidden, d_embedding, &mut grad.proj1);
        elu_back(&trace.hidden, &mut gh);
        let gpool = self.proj0.backward(&trace.pooled, &gh, &mut grad.proj0);
        let last = trace.maps.last().unwrap();
        let c = last.shape()[2];
        let inv = T::one() / T::of((last.shape()[0] * last.shape()[1]) as f64);
        let mut g = Tensor::from_fn(last.shape(), |i| gpool[i % c] * inv);
        for b in (0..self.blocks.len()).rev() {
            elu_back(trace.maps[b + 1].data(), g.data_mut());
            let gin = self.blocks[b].backward(&trace.maps[b], &g, &mut grad.blocks[b], b > 0);
            match gin {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }

    fn check_trace(&self, trace: &EncoderTrace<T>) -> Result<(), EncoderError> {
        if trace.maps.len() != self.blocks.len() + 1 {
            return Err(EncoderError::BackwardMismatch(format!(
                "trace has {} maps for {} blocks",
                trace.maps.len(),
                self.blocks.len()
            )));
        }
        for (b, conv) in self.blocks.iter().enumerate() {
            let (i, o) = (&trace.maps[b], &trace.maps[b + 1]);
            let ok = i.shape()[2] == conv.c_in()
                && o.shape()[2] == conv.c_out()
                && o.shape()[0] == conv.out_extent(i.shape()[0])
                && o.shape()[1] == conv.out_extent(i.shape()[1]);
            if !ok {
                return Err(EncoderError::BackwardMismatch(format!("block {b} shapes do not match the network")));
            }
        }
        if trace.pooled.len() != self.feature_dim() || trace.hidden.len() != self.proj0.n_out() {
            return Err(EncoderError::BackwardMismatch("projection head shapes".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Params<T> for EncoderNet<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.blocks.iter().enumerate() {
            conv_named(&format!("encoder.block{i}"), c, &mut out);
        }
        affine_named("encoder.proj0", &self.proj0, &mut out);
        affine_named("encoder.proj1", &self.proj1, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.blocks {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.proj0.weight,
            &mut self.proj0.bias,
            &mut self.proj1.weight,
            &mut self.proj1.bias,
        ]);
        out
    }
}

impl<T: Scalar> Embedder<T> for EncoderNet<T> {
    fn embed(&self, image: &Image) -> Vec<T> {
        self.encode(image).expect("image channels match the encoder")
    }
}

/// Augmentation-class head and relative-position head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadNets<T> {
    pub aug: Affine<T>,
    pub pos: Affine<T>,
}

impl<T: Scalar> HeadNets<T> {
    pub fn new(embed_dim: usize, n_classes: usize, rng: &mut RngStream) -> Self {
        Self {
            aug: Affine::new(embed_dim, n_classes, 1.0, rng),
            pos: Affine::new(2 * embed_dim, crate::pmsacl::NEIGHBOURS, 1.0, rng),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.aug.n_out()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            aug: zero_affine(&self.aug),
            pos: zero_affine(&self.pos),
        }
    }

    pub fn cast<U: Scalar>(&self) -> HeadNets<U> {
        HeadNets {
            aug: cast_affine(&self.aug),
            pos: cast_affine(&self.pos),
        }
    }

    pub fn aug_probs(&self, z: &[T]) -> Vec<T> {
        softmax(&self.aug.forward(z))
    }

    /// Returns the gradient with respect to the embedding.
    pub fn aug_backward(&self, z: &[T], probs: &[T], d_probs: &[T], grad: &mut Self) -> Vec<T> {
        let gl = softmax_backward(probs, d_probs);
        self.aug.backward(z, &gl, &mut grad.aug)
    }

    pub fn pos_probs(&self, z1: &[T], z2: &[T]) -> Vec<T> {
        let pair: Vec<T> = z1.iter().chain(z2).copied().collect();
        softmax(&self.pos.forward(&pair))
    }

    /// Returns gradients with respect to both patch embeddings.
    pub fn pos_backward(&self, z1: &[T], z2: &[T], probs: &[T], d_probs: &[T], grad: &mut Self) -> (Vec<T>, Vec<T>) {
        let pair: Vec<T> = z1.iter().chain(z2).copied().collect();
        let gl = softmax_backward(probs, d_probs);
        let mut g = self.pos.backward(&pair, &gl, &mut grad.pos);
        let g2 = g.split_off(z1.len());
        (g, g2)
    }
}

impl<T: Scalar> Params<T> for HeadNets<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        affine_named("heads.aug", &self.aug, &mut out);
        affine_named("heads.pos", &self.pos, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.aug.weight,
            &mut self.aug.bias,
            &mut self.pos.weight,
            &mut self.pos.bias,
        ]
    }
}

/// Affine seed map followed by upsample-conv stages; sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet<T> {
    pub seed: Affine<T>,
    pub stages: Vec<Conv2d<T>>,
    pub seed_shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    pub z: Vec<T>,
    /// Seed map, then for each stage the upsampled input and the stage output.
    pub seed: Tensor<T>,
    pub upsampled: Vec<Tensor<T>>,
    pub outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> DecoderTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().unwrap()
    }
}

impl<T: Scalar> DecoderNet<T> {
    /// Mirror of `arch` producing `side × side × in_channels` images.
    pub fn new(arch: &Arch, side: usize, rng: &mut RngStream) -> Result<Self, EncoderError> {
        let n = arch.channels.len();
        let s0 = side >> n;
        if s0 == 0 || s0 << n != side {
            return Err(EncoderError::Shape(format!("side {side} is not divisible by 2^{n}")));
        }
        let c0 = *arch.channels.last().unwrap();
        let seed = Affine::new(arch.embed_dim, s0 * s0 * c0, 2f64.sqrt(), rng);
        let mut stages = Vec::new();
        let mut cin = c0;
        for i in (0..n).rev() {
            let cout = if i == 0 { arch.in_channels } else { arch.channels[i - 1] };
            let gain = if i == 0 { 1.0 } else { 2f64.sqrt() };
            stages.push(Conv2d::new(3, cin, cout, 1, 1, gain, rng));
            cin = cout;
        }
        Ok(Self {
            seed,
            stages,
            seed_shape: [s0, s0, c0],
        })
    }

    pub fn output_side(&self) -> usize {
        self.seed_shape[0] << self.stages.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            seed: zero_affine(&self.seed),
            stages: self.stages.iter().map(zero_conv).collect(),
            seed_shape: self.seed_shape,
        }
    }

    pub fn cast<U: Scalar>(&self) -> DecoderNet<U> {
        DecoderNet {
            seed: cast_affine(&self.seed),
            stages: self.stages.iter().map(cast_conv).collect(),
            seed_shape: self.seed_shape,
        }
    }

    pub fn forward(&self, z: &[T]) -> Result<DecoderTrace<T>, EncoderError> {
        if z.len() != self.seed.n_in() {
            return Err(EncoderError::Shape(format!("latent has {} entries, expected {}", z.len(), self.seed.n_in())));
        }
        let mut seed = Tensor::new(self.seed_shape.to_vec(), self.seed.forward(z)).map_err(EncoderError::Numerics)?;
        elu_map(&mut seed);
        let mut upsampled = Vec::new();
        let mut outputs: Vec<Tensor<T>> = Vec::new();
        let last = self.stages.len() - 1;
        for (i, conv) in self.stages.iter().enumerate() {
            let input = outputs.last().unwrap_or(&seed);
            let up = upsample_nearest(input, 2);
            let mut y = conv.forward(&up);
            if i == last {
                y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                elu_map(&mut y);
            }
            upsampled.push(up);
            outputs.push(y);
        }
        Ok(DecoderTrace {
            z: z.to_vec(),
            seed,
            upsampled,
            outputs,
        })
    }

    /// Accumulates gradients and returns the latent gradient.
    pub fn backward(&self, trace: &DecoderTrace<T>, d_out: &Tensor<T>, grad: &mut Self) -> Result<Vec<T>, EncoderError> {
        if trace.outputs.len() != self.stages.len() || trace.output().shape() != d_out.shape() {
            return Err(EncoderError::BackwardMismatch("decoder trace does not match output gradient".into()));
        }
        let last = self.stages.len() - 1;
        let mut g = d_out.clone();
        for i in (0..self.stages.len()).rev() {
            let y = trace.outputs[i].data();
            if i == last {
                for (gv, &yv) in g.data_mut().iter_mut().zip(y) {
                    *gv *= yv * (T::one() - yv);
                }
            } else {
                elu_back(y, g.data_mut());
            }
            let gup = self.stages[i]
                .backward(&trace.upsampled[i], &g, &mut grad.stages[i], true)
                .expect("input gradient requested");
            g = upsample_nearest_backward(&gup, 2);
        }
        elu_back(trace.seed.data(), g.data_mut());
        Ok(self.seed.backward(&trace.z, g.data(), &mut grad.seed))
    }
}

impl<T: Scalar> Params<T> for DecoderNet<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        affine_named("decoder.seed", &self.seed, &mut out);
        for (i, c) in self.stages.iter().enumerate() {
            conv_named(&format!("decoder.stage{i}"), c, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.seed.weight, &mut self.seed.bias];
        for c in &mut self.stages {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }
}
