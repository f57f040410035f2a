//! Layer stacks described as data, so the same description drives
//! initialization, the forward pass, and complexity accounting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binding, Conv2dSpec, Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Square `kernel × kernel` convolution with bias.
    Conv { name: String, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize },
    Linear { name: String, din: usize, dout: usize },
    Relu,
    MaxPool { kh: usize, kw: usize },
    Flatten,
    GlobalAvgPool,
    /// `relu(conv3x3(relu(conv3x3_s(x))) + skip(x))`, where `skip` is a
    /// strided 1×1 convolution when the shape changes and identity otherwise.
    Residual { name: String, cin: usize, cout: usize, stride: usize },
}

impl Layer {
    pub fn conv(name: &str, cin: usize, cout: usize) -> Layer {
        Layer::Conv { name: name.into(), cin, cout, kernel: 3, stride: 1, padding: 1 }
    }

    pub fn linear(name: &str, din: usize, dout: usize) -> Layer {
        Layer::Linear { name: name.into(), din, dout }
    }

    pub fn residual(name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        Layer::Residual { name: name.into(), cin, cout, stride }
    }

    fn has_skip_conv(cin: usize, cout: usize, stride: usize) -> bool {
        cin != cout || stride != 1
    }

    /// `(name, shape)` of every trainable tensor, in creation order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let conv = |name: String, cin, cout, k| vec![(format!("{name}.weight"), vec![cout, cin, k, k]), (format!("{name}.bias"), vec![cout])];
        match self {
            Layer::Conv { name, cin, cout, kernel, .. } => conv(name.clone(), *cin, *cout, *kernel),
            Layer::Linear { name, din, dout } => vec![(format!("{name}.weight"), vec![*din, *dout]), (format!("{name}.bias"), vec![*dout])],
            Layer::Residual { name, cin, cout, stride } => {
                let mut v = conv(format!("{name}.conv1"), *cin, *cout, 3);
                v.extend(conv(format!("{name}.conv2"), *cout, *cout, 3));
                if Self::has_skip_conv(*cin, *cout, *stride) {
                    v.extend(conv(format!("{name}.skip"), *cin, *cout, 1));
                }
                v
            }
            _ => vec![],
        }
    }

    /// Per-sample output shape and multiply-accumulate count.
    fn trace(&self, input: &[usize]) -> Result<(Vec<usize>, u64)> {
        let spatial = |what: &str| -> Result<[usize; 3]> {
            <[usize; 3]>::try_from(input).map_err(|_| Error::shape("layer", format!("{what} expects [C, H, W], got {input:?}")))
        };
        let conv_out = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p).checked_sub(k).map(|v| v / s + 1);
        let conv_trace = |cin: usize, cout: usize, k: usize, s: usize, p: usize, [c, h, w]: [usize; 3]| -> Result<(Vec<usize>, u64)> {
            match (c == cin, conv_out(h, k, s, p), conv_out(w, k, s, p)) {
                (true, Some(ho), Some(wo)) => Ok((vec![cout, ho, wo], (cout * cin * k * k * ho * wo) as u64)),
                _ => Err(Error::shape("conv2d", format!("{cin}->{cout} k{k} s{s} on {:?}", [c, h, w]))),
            }
        };
        match self {
            Layer::Conv { cin, cout, kernel, stride, padding, .. } => {
                conv_trace(*cin, *cout, *kernel, *stride, *padding, spatial("conv")?)
            }
            Layer::Residual { cin, cout, stride, .. } => {
                let x = spatial("residual")?;
                let (mid, m1) = conv_trace(*cin, *cout, 3, *stride, 1, x)?;
                let (out, m2) = conv_trace(*cout, *cout, 3, 1, 1, [mid[0], mid[1], mid[2]])?;
                let m3 = if Self::has_skip_conv(*cin, *cout, *stride) { conv_trace(*cin, *cout, 1, *stride, 0, x)?.1 } else { 0 };
                Ok((out, m1 + m2 + m3))
            }
            Layer::Linear { din, dout, .. } => match input {
                [d] if d == din => Ok((vec![*dout], (din * dout) as u64)),
                _ => Err(Error::shape("linear", format!("{din}->{dout} on {input:?}"))),
            },
            Layer::Relu => Ok((input.to_vec(), 0)),
            Layer::MaxPool { kh, kw } => {
                let [c, h, w] = spatial("max_pool")?;
                if *kh == 0 || *kw == 0 || h < *kh || w < *kw {
                    return Err(Error::shape("max_pool", format!("window {kh}x{kw} on {h}x{w}")));
                }
                Ok((vec![c, h / kh, w / kw], 0))
            }
            Layer::Flatten => Ok((vec![input.iter().product()], 0)),
            Layer::GlobalAvgPool => Ok((vec![spatial("global_avg_pool")?[0]], 0)),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let conv = |g: &mut Graph, name: &str, x: Var, stride: usize, padding: usize| -> Result<Var> {
            let (w, b) = (p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?);
            g.conv2d(x, w, Some(b), Conv2dSpec { stride, padding })
        };
        match self {
            Layer::Conv { name, stride, padding, .. } => conv(g, name, x, *stride, *padding),
            Layer::Linear { name, .. } => {
                let y = g.matmul(x, p.get(&format!("{name}.weight"))?)?;
                g.add_bias(y, p.get(&format!("{name}.bias"))?)
            }
            Layer::Relu => g.relu(x),
            Layer::MaxPool { kh, kw } => g.max_pool(x, *kh, *kw),
            Layer::Flatten => g.flatten(x),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::Residual { name, cin, cout, stride } => {
                let h = conv(g, &format!("{name}.conv1"), x, *stride, 1)?;
                let h = g.relu(h)?;
                let h = conv(g, &format!("{name}.conv2"), h, 1, 1)?;
                let skip = if Self::has_skip_conv(*cin, *cout, *stride) { conv(g, &format!("{name}.skip"), x, *stride, 0)? } else { x };
                let y = g.add(h, skip)?;
                g.relu(y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(Layer::parameter_shapes).collect()
    }

    /// Weight and bias element count from the layer descriptions alone.
    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Per-sample output shape and total multiply-accumulates for `input`.
    pub fn trace(&self, input: &[usize]) -> Result<(Vec<usize>, u64)> {
        let mut shape = input.to_vec();
        let mut macs = 0;
        for layer in &self.layers {
            let (next, m) = layer.trace(&shape)?;
            shape = next;
            macs += m;
        }
        Ok((shape, macs))
    }

    /// Adds He-uniform weights and zero biases for every layer to `store`.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for (name, shape) in self.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn residual_trace_and_parameters() {
        let block = Sequential::new(vec![Layer::residual("r", 16, 32, 2)]);
        let (shape, macs) = block.trace(&[16, 16, 8]).unwrap();
        assert_eq!(shape, vec![32, 8, 4]);
        // conv1 + conv2 + 1x1 skip, each over the 8x4 output grid
        assert_eq!(macs, (32 * 16 * 9 + 32 * 32 * 9 + 32 * 16) * 32);
        assert_eq!(block.parameter_count(), (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (32 * 16 + 32));
        assert_eq!(Sequential::new(vec![Layer::residual("r", 8, 8, 1)]).parameter_shapes().len(), 4);
    }

    #[test]
    fn forward_shape_matches_trace() {
        let net = Sequential::new(vec![
            Layer::conv("c1", 2, 4),
            Layer::Relu,
            Layer::residual("r1", 4, 6, 2),
            Layer::MaxPool { kh: 2, kw: 1 },
            Layer::Flatten,
            Layer::linear("fc", 6 * 2 * 3, 5),
        ]);
        let (shape, _) = net.trace(&[2, 8, 6]).unwrap();
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.num_elements(), net.parameter_count());
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::new(vec![3, 2, 8, 6], (0..288).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let y = net.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(y), &[3, shape[0]]);
    }

    #[test]
    fn mismatched_stack_is_a_shape_error() {
        let net = Sequential::new(vec![Layer::Flatten, Layer::linear("fc", 10, 2)]);
        assert!(matches!(net.trace(&[3, 3]), Err(Error::Shape { .. })));
    }
}
