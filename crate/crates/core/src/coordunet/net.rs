use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::FeatureGrid;
use super::layers::{
    conv3d_replicate, conv3d_replicate_backward, coordinate_channels, instance_norm, instance_norm_backward,
    leaky_relu, leaky_relu_backward, maxpool2, maxpool2_backward, softmax_channels, softmax_channels_backward,
    trilinear_up2, trilinear_up2_backward, NormCache,
};
use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::volume::ScalarVolume;

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name,
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Convolution, instance norm and LeakyReLU; indices point into the tensor list.
#[derive(Clone, Copy, Debug)]
struct Block {
    cin: usize,
    cout: usize,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
}

struct BlockCache {
    input: FeatureGrid,
    norm: NormCache,
    pre_act: FeatureGrid,
}

/// Intermediate values kept by [`UNet::forward_with_tape`] for the backward pass.
pub struct Tape {
    blocks: Vec<Option<BlockCache>>,
    pools: Vec<([usize; 5], Vec<u32>)>,
    skip_channels: Vec<usize>,
    head_input: FeatureGrid,
    pub probs: FeatureGrid,
}

/// The 4-level coordinate-aware U-Net with its parameters.
///
/// Block order: two per encoder level, two for the bottleneck, then three
/// per decoder level (upsample conv and the two after concatenation), from
/// the deepest level up. The head is a 1x1x1 convolution.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: NetworkConfig,
    params: Vec<Tensor>,
    blocks: Vec<Block>,
    head_weight: usize,
    head_bias: usize,
}

impl UNet {
    /// Architecture with fan-in scaled uniform weights drawn from `cfg.seed`.
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(net.cfg.seed);
        let k3 = net.cfg.kernel_size.pow(3);
        for b in net.blocks.clone() {
            let bound = 1.0 / ((b.cin * k3) as f64).sqrt();
            for t in [b.weight, b.bias] {
                for v in &mut net.params[t].data {
                    *v = rng.random_range(-bound..bound);
                }
            }
            net.params[b.gamma].data.fill(1.0);
        }
        let bound = 1.0 / (net.cfg.base_channels as f64).sqrt();
        for t in [net.head_weight, net.head_bias] {
            for v in &mut net.params[t].data {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Architecture with every parameter zero.
    pub fn zeros(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut params = Vec::new();
        let mut blocks = Vec::new();
        let mut add_block = |params: &mut Vec<Tensor>, name: String, cin: usize, cout: usize| {
            let weight = params.len();
            params.push(Tensor::zeros(format!("{name}.conv.weight"), vec![cout, cin, k, k, k]));
            params.push(Tensor::zeros(format!("{name}.conv.bias"), vec![cout]));
            params.push(Tensor::zeros(format!("{name}.norm.gamma"), vec![cout]));
            params.push(Tensor::zeros(format!("{name}.norm.beta"), vec![cout]));
            blocks.push(Block {
                cin,
                cout,
                weight,
                bias: weight + 1,
                gamma: weight + 2,
                beta: weight + 3,
            });
        };
        let widths: Vec<usize> = (0..cfg.levels).map(|i| cfg.base_channels << i).collect();
        let mut cin = cfg.input_channels;
        for (i, &w) in widths.iter().enumerate() {
            add_block(&mut params, format!("enc{i}.block1"), cin, w);
            add_block(&mut params, format!("enc{i}.block2"), w, w);
            cin = w;
        }
        let wb = cfg.base_channels << cfg.levels;
        add_block(&mut params, "bottleneck.block1".into(), cin, wb);
        add_block(&mut params, "bottleneck.block2".into(), wb, wb);
        cin = wb;
        for (i, &w) in widths.iter().enumerate().rev() {
            add_block(&mut params, format!("dec{i}.up"), cin, w);
            add_block(&mut params, format!("dec{i}.block1"), 2 * w, w);
            add_block(&mut params, format!("dec{i}.block2"), w, w);
            cin = w;
        }
        let head_weight = params.len();
        params.push(Tensor::zeros(
            "head.conv.weight".into(),
            vec![cfg.output_classes, cin, 1, 1, 1],
        ));
        params.push(Tensor::zeros("head.conv.bias".into(), vec![cfg.output_classes]));
        Ok(UNet {
            cfg,
            params,
            blocks,
            head_weight,
            head_bias: head_weight + 1,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    /// Replace all parameters; names and shapes must match the architecture.
    pub fn load_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, architecture needs {}",
                params.len(),
                self.params.len()
            )));
        }
        for (have, want) in params.iter().zip(&self.params) {
            if have.name != want.name || have.shape != want.shape || have.data.len() != want.data.len() {
                return Err(Error::Schema(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    have.name, have.shape, want.name, want.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Network input: the standardized image followed by the three
    /// coordinate channels.
    pub fn input_grid(&self, image: &ScalarVolume) -> Result<FeatureGrid> {
        let [nx, ny, nz] = image.dims();
        let factor = 1usize << self.cfg.levels;
        if [nx, ny, nz].iter().any(|&n| n % factor != 0 || n < 2 * factor) {
            return Err(Error::Shape(format!(
                "network input dims {:?} must be multiples of {factor} and at least {}",
                image.dims(),
                2 * factor
            )));
        }
        if !image.all_finite() {
            return Err(Error::invalid("network input contains non-finite values"));
        }
        let n = image.len() as f64;
        let mean = image.data().iter().sum::<f64>() / n;
        let var = image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        let img = FeatureGrid::from_vec(
            [1, 1, nz, ny, nx],
            image.data().iter().map(|v| (v - mean) * scale).collect(),
        )?;
        FeatureGrid::concat_channels(&img, &coordinate_channels([nx, ny, nz])?)
    }

    /// Softmax probabilities of shape `(1, classes, nz, ny, nx)`.
    pub fn forward(&self, image: &ScalarVolume) -> Result<FeatureGrid> {
        let x = self.input_grid(image)?;
        Ok(self.run(x, None)?.0)
    }

    pub fn forward_with_tape(&self, image: &ScalarVolume) -> Result<Tape> {
        let x = self.input_grid(image)?;
        let mut tape = Tape {
            blocks: (0..self.blocks.len()).map(|_| None).collect(),
            pools: Vec::new(),
            skip_channels: Vec::new(),
            head_input: FeatureGrid::zeros([0; 5]),
            probs: FeatureGrid::zeros([0; 5]),
        };
        let (probs, head_input) = self.run(x, Some(&mut tape))?;
        tape.probs = probs;
        tape.head_input = head_input;
        Ok(tape)
    }

    fn run(&self, x: FeatureGrid, mut tape: Option<&mut Tape>) -> Result<(FeatureGrid, FeatureGrid)> {
        let levels = self.cfg.levels;
        let mut bi = 0;
        let mut h = x;
        let mut skips = Vec::with_capacity(levels);
        for _ in 0..levels {
            for _ in 0..2 {
                h = self.block_forward(bi, h, tape.as_deref_mut())?;
                bi += 1;
            }
            let (pooled, arg) = maxpool2(&h)?;
            if let Some(t) = tape.as_deref_mut() {
                t.pools.push((h.shape(), arg));
                t.skip_channels.push(h.channels());
            }
            skips.push(h);
            h = pooled;
        }
        for _ in 0..2 {
            h = self.block_forward(bi, h, tape.as_deref_mut())?;
            bi += 1;
        }
        for _ in 0..levels {
            let skip = skips.pop().expect("one skip per level");
            let up = self.block_forward(bi, trilinear_up2(&h), tape.as_deref_mut())?;
            h = FeatureGrid::concat_channels(&skip, &up)?;
            for j in 1..3 {
                h = self.block_forward(bi + j, h, tape.as_deref_mut())?;
            }
            bi += 3;
        }
        let w = &self.params[self.head_weight];
        let logits = conv3d_replicate(&h, &w.data, &self.params[self.head_bias].data, self.cfg.output_classes, 1)?;
        Ok((softmax_channels(&logits), h))
    }

    fn block_forward(&self, bi: usize, input: FeatureGrid, tape: Option<&mut Tape>) -> Result<FeatureGrid> {
        let b = self.blocks[bi];
        let k = self.cfg.kernel_size;
        let conv = conv3d_replicate(&input, &self.params[b.weight].data, &self.params[b.bias].data, b.cout, k)?;
        let (normed, norm) = instance_norm(
            &conv,
            &self.params[b.gamma].data,
            &self.params[b.beta].data,
            self.cfg.instance_norm_epsilon,
        )?;
        let out = leaky_relu(&normed, self.cfg.leaky_slope);
        if let Some(t) = tape {
            t.blocks[bi] = Some(BlockCache {
                input,
                norm,
                pre_act: normed,
            });
        }
        Ok(out)
    }

    fn block_backward(&self, bi: usize, tape: &Tape, grad: &FeatureGrid, grads: &mut [Vec<f64>]) -> Result<FeatureGrid> {
        let b = self.blocks[bi];
        let cache = tape.blocks[bi].as_ref().expect("block recorded on tape");
        let g = leaky_relu_backward(&cache.pre_act, grad, self.cfg.leaky_slope);
        let (g, gg, gb) = instance_norm_backward(&g, &cache.norm, &self.params[b.gamma].data);
        add_into(&mut grads[b.gamma], &gg);
        add_into(&mut grads[b.beta], &gb);
        let (gx, gw, gbias) =
            conv3d_replicate_backward(&cache.input, &self.params[b.weight].data, b.cout, self.cfg.kernel_size, &g)?;
        add_into(&mut grads[b.weight], &gw);
        add_into(&mut grads[b.bias], &gbias);
        Ok(gx)
    }

    /// Parameter gradients given the gradient of a scalar loss with respect
    /// to the output probabilities. Layout matches [`UNet::params`].
    pub fn backward(&self, tape: &Tape, grad_probs: &FeatureGrid) -> Result<Vec<Vec<f64>>> {
        let levels = self.cfg.levels;
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|t| vec![0.0; t.data.len()]).collect();
        let g_logits = softmax_channels_backward(&tape.probs, grad_probs);
        let (mut g, gw, gb) = conv3d_replicate_backward(
            &tape.head_input,
            &self.params[self.head_weight].data,
            self.cfg.output_classes,
            1,
            &g_logits,
        )?;
        add_into(&mut grads[self.head_weight], &gw);
        add_into(&mut grads[self.head_bias], &gb);

        let mut bi = self.blocks.len();
        let mut skip_grads = Vec::with_capacity(levels);
        for level in 0..levels {
            bi -= 3;
            g = self.block_backward(bi + 2, tape, &g, &mut grads)?;
            g = self.block_backward(bi + 1, tape, &g, &mut grads)?;
            let (g_skip, g_up) = g.split_channels(tape.skip_channels[level]);
            skip_grads.push(g_skip);
            let g_up = self.block_backward(bi, tape, &g_up, &mut grads)?;
            g = trilinear_up2_backward(&g_up);
        }
        for _ in 0..2 {
            bi -= 1;
            g = self.block_backward(bi, tape, &g, &mut grads)?;
        }
        for level in (0..levels).rev() {
            let (shape, arg) = &tape.pools[level];
            g = maxpool2_backward(*shape, arg, &g);
            g.add_assign(&skip_grads[level]);
            for _ in 0..2 {
                bi -= 1;
                g = self.block_backward(bi, tape, &g, &mut grads)?;
            }
        }
        debug_assert_eq!(bi, 0);
        Ok(grads)
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
