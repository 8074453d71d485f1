//! Small fully connected ReLU networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector, layer by layer, each layer as its
//! weight matrix (output-major) followed by its bias. Evaluation order is
//! fixed so the same weights give bit-identical outputs on every run.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations saved by `forward_cached` for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        let n = param_count(dims);
        Mlp {
            dims: dims.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// He-uniform hidden layers; the output layer is further scaled by
    /// `out_scale` so fresh networks predict close to their bias.
    pub fn init(dims: &[usize], out_scale: f64, rng: &mut impl Rng) -> Self {
        let mut m = Mlp::zeros(dims);
        let layers = dims.len() - 1;
        for l in 0..layers {
            let (inp, out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / inp as f64).sqrt() * if l + 1 == layers { out_scale } else { 1.0 };
            let (w, _) = m.layer_offsets(l);
            for v in &mut m.params[w..w + inp * out] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        m
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Option<Self> {
        (dims.len() >= 2 && param_count(dims) == params.len()).then(|| Mlp {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Bias of the output layer, the last `output_dim` parameters.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let n = self.params.len() - self.output_dim();
        &mut self.params[n..]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Rounds every parameter through f32, the precision weights are stored at.
    pub fn round_to_f32(&mut self) {
        self.params.iter_mut().for_each(|p| *p = (*p as f32) as f64);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.dims[k] * self.dims[k + 1] + self.dims[k + 1];
        }
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(x, &mut cache).to_vec()
    }

    pub fn forward_cached<'c>(&self, x: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        debug_assert_eq!(x.len(), self.input_dim());
        let layers = self.dims.len() - 1;
        cache.acts.resize_with(layers + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (inp, out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[off..off + inp * out];
            let b = &self.params[off + inp * out..off + inp * out + out];
            off += inp * out + out;
            let (done, rest) = cache.acts.split_at_mut(l + 1);
            let src = &done[l];
            let dst = &mut rest[0];
            dst.clear();
            for o in 0..out {
                let row = &w[o * inp..(o + 1) * inp];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(src) {
                    acc += wi * xi;
                }
                if l + 1 < layers && acc < 0.0 {
                    acc = 0.0;
                }
                dst.push(acc);
            }
        }
        &cache.acts[layers]
    }

    /// Accumulates `d loss / d params` into `grads` given `grad_out` for the
    /// outputs of the last `forward_cached` call. If `grad_in` is given it
    /// receives `d loss / d input` (overwritten, not accumulated).
    pub fn backward(&self, cache: &mut MlpCache, grad_out: &[f64], grads: &mut [f64], grad_in: Option<&mut [f64]>) {
        debug_assert_eq!(grads.len(), self.params.len());
        let layers = self.dims.len() - 1;
        cache.delta.clear();
        cache.delta.extend_from_slice(grad_out);
        let want_input = grad_in.is_some();
        for l in (0..layers).rev() {
            let (inp, out) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let src = &cache.acts[l];
            for o in 0..out {
                let d = cache.delta[o];
                if d == 0.0 {
                    continue;
                }
                grads[b_off + o] += d;
                let g = &mut grads[w_off + o * inp..w_off + (o + 1) * inp];
                for (gi, xi) in g.iter_mut().zip(src) {
                    *gi += d * xi;
                }
            }
            if l == 0 && !want_input {
                break;
            }
            cache.next.clear();
            cache.next.resize(inp, 0.0);
            let w = &self.params[w_off..w_off + inp * out];
            for o in 0..out {
                let d = cache.delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, wi) in cache.next.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *n += d * wi;
                }
            }
            if l > 0 {
                for (n, a) in cache.next.iter_mut().zip(src) {
                    if *a <= 0.0 {
                        *n = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cache.delta, &mut cache.next);
        }
        if let Some(gi) = grad_in {
            gi.copy_from_slice(&cache.delta[..self.input_dim()]);
        }
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}
