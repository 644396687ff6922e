//! Dense and convolutional layers with hand-written backward passes.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Fully connected layer `y = x·Wᵀ + b` over row-major batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    /// Shape `(out, in)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    #[serde(skip)]
    pub(crate) gw: Array2<f64>,
    #[serde(skip)]
    pub(crate) gb: Array1<f64>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = (2.0 / inputs as f64).sqrt();
        let w = Array2::from_shape_fn((outputs, inputs), |_| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Dense {
            gw: Array2::zeros(w.raw_dim()),
            gb: Array1::zeros(outputs),
            w,
            b: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn zero_grad(&mut self) {
        if self.gw.raw_dim() != self.w.raw_dim() {
            self.gw = Array2::zeros(self.w.raw_dim());
            self.gb = Array1::zeros(self.b.len());
        } else {
            self.gw.fill(0.0);
            self.gb.fill(0.0);
        }
    }

    pub fn params(&mut self) -> [(&mut [f64], &[f64]); 2] {
        let Dense { w, b, gw, gb } = self;
        [
            (w.as_slice_mut().unwrap(), gw.as_slice().unwrap()),
            (b.as_slice_mut().unwrap(), gb.as_slice().unwrap()),
        ]
    }
}

/// 3×3 convolution, stride 2, zero padding 1, lowered to a matrix product.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    /// Shape `(out_channels, in_channels · 9)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    #[serde(skip)]
    pub(crate) gw: Array2<f64>,
    #[serde(skip)]
    pub(crate) gb: Array1<f64>,
}

pub(crate) fn conv_out(size: usize) -> usize {
    (size + 2 - 3) / 2 + 1
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let d = Dense::new(in_ch * 9, out_ch, rng);
        Conv2d {
            w: d.w,
            b: d.b,
            gw: d.gw,
            gb: d.gb,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.w.nrows()
    }

    /// Patch matrix of shape `(C·9, H'·W')`.
    pub(crate) fn im2col(x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = (conv_out(h), conv_out(w));
        let mut cols = Array2::zeros((c * 9, oh * ow));
        for ch in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ch * 9 + ky * 3 + kx;
                    for oy in 0..oh {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                cols[[row, oy * ow + ox]] = x[[ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
        let (oh, ow) = (conv_out(h), conv_out(w));
        let mut x = Array3::zeros((c, h, w));
        for ch in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ch * 9 + ky * 3 + kx;
                    for oy in 0..oh {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                x[[ch, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the pre-activation output and the patch matrix.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = Self::im2col(x);
        let out = self.w.dot(&cols) + &self.b.view().insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((self.out_channels(), conv_out(h), conv_out(w)))
            .expect("conv output shape");
        (out, cols)
    }

    /// Accumulates gradients; returns `dL/dx` when `want_input` is set.
    pub fn backward(
        &mut self,
        cols: &Array2<f64>,
        dy: &Array3<f64>,
        input_shape: (usize, usize, usize),
        want_input: bool,
    ) -> Option<Array3<f64>> {
        let (o, oh, ow) = dy.dim();
        let dy = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, oh * ow))
            .expect("conv grad shape");
        self.gw += &dy.dot(&cols.t());
        self.gb += &dy.sum_axis(Axis(1));
        want_input.then(|| {
            let dcols = self.w.t().dot(&dy);
            let (c, h, w) = input_shape;
            Self::col2im(&dcols, c, h, w)
        })
    }

    pub fn zero_grad(&mut self) {
        self.gw = Array2::zeros(self.w.raw_dim());
        self.gb = Array1::zeros(self.b.len());
    }

    pub fn params(&mut self) -> [(&mut [f64], &[f64]); 2] {
        let Conv2d { w, b, gw, gb } = self;
        [
            (w.as_slice_mut().unwrap(), gw.as_slice().unwrap()),
            (b.as_slice_mut().unwrap(), gb.as_slice().unwrap()),
        ]
    }
}

/// ReLU multilayer perceptron with inverted dropout after each hidden layer
/// and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub dropout: f64,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Mlp {
    /// `widths` lists every layer size from input to output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], dropout: f64, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            layers: widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
            dropout,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    /// Forward pass. Dropout is applied when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Array2<f64>, rng: Option<&mut R>) -> Array2<f64> {
        self.forward_cached(x, rng).0
    }

    pub fn forward_cached<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        mut rng: Option<&mut R>,
    ) -> (Array2<f64>, MlpCache) {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            if i + 1 == n {
                cache.pre.push(Array2::zeros((0, 0)));
                cache.masks.push(None);
                return (z, cache);
            }
            let mut a = z.mapv(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let m = Array2::from_shape_simple_fn(a.raw_dim(), || {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("loop returns at the output layer")
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&mut self, cache: &MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let n = self.layers.len();
        let mut d = dy.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                d.zip_mut_with(&cache.pre[i], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                if let Some(m) = &cache.masks[i] {
                    d *= m;
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d);
        }
        d
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Dense::zero_grad);
    }

    /// `(values, gradients)` for every parameter tensor, in a fixed order.
    pub fn params(&mut self) -> Vec<(&mut [f64], &[f64])> {
        self.layers.iter_mut().flat_map(Dense::params).collect()
    }
}

/// Convolutional observation encoder: the grid is read as `C = depth`
/// channels over a `H × W` image, two stride-2 convolutions with ReLU, then a
/// linear projection to the latent size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub dense: Dense,
    /// Input `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
}

pub struct EncoderCache {
    cols1: Array2<f64>,
    pre1: Array3<f64>,
    cols2: Array2<f64>,
    pre2: Array3<f64>,
    flat: Array2<f64>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        input_shape: (usize, usize, usize),
        channels: [usize; 2],
        latent: usize,
        rng: &mut R,
    ) -> Self {
        let (c, h, w) = input_shape;
        let conv1 = Conv2d::new(c, channels[0], rng);
        let conv2 = Conv2d::new(channels[0], channels[1], rng);
        let flat = channels[1] * conv_out(conv_out(h)) * conv_out(conv_out(w));
        Encoder {
            conv1,
            conv2,
            dense: Dense::new(flat, latent, rng),
            input_shape,
        }
    }

    pub fn latent(&self) -> usize {
        self.dense.outputs()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array1<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array1<f64>, EncoderCache) {
        assert_eq!(x.dim(), self.input_shape, "encoder input shape");
        let (pre1, cols1) = self.conv1.forward(x);
        let a1 = pre1.mapv(|v| v.max(0.0));
        let (pre2, cols2) = self.conv2.forward(&a1);
        let flat = pre2.mapv(|v| v.max(0.0));
        let flat = Array2::from_shape_vec((1, flat.len()), flat.iter().copied().collect())
            .expect("flatten");
        let z = self.dense.forward(&flat).row(0).to_owned();
        (
            z,
            EncoderCache {
                cols1,
                pre1,
                cols2,
                pre2,
                flat,
            },
        )
    }

    /// Accumulates gradients given `dL/dz`.
    pub fn backward(&mut self, cache: &EncoderCache, dz: &Array1<f64>) {
        let dz = dz.view().insert_axis(Axis(0)).to_owned();
        let dflat = self.dense.backward(&cache.flat, &dz);
        let mut d2 = dflat
            .into_shape_with_order(cache.pre2.raw_dim())
            .expect("unflatten");
        d2.zip_mut_with(&cache.pre2, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let a1_shape = cache.pre1.dim();
        let mut d1 = self
            .conv2
            .backward(&cache.cols2, &d2, a1_shape, true)
            .expect("input gradient requested");
        d1.zip_mut_with(&cache.pre1, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        self.conv1.backward(&cache.cols1, &d1, self.input_shape, false);
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.conv2.zero_grad();
        self.dense.zero_grad();
    }

    /// `(values, gradients)` for every parameter tensor, in a fixed order.
    pub fn params(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let Encoder {
            conv1,
            conv2,
            dense,
            ..
        } = self;
        conv1
            .params()
            .into_iter()
            .chain(conv2.params())
            .chain(dense.params())
            .collect()
    }
}

/// Adam optimizer state over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<(&mut [f64], &[f64])>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

impl PartialEq for Dense {
    fn eq(&self, other: &Self) -> bool {
        self.w == other.w && self.b == other.b
    }
}

impl PartialEq for Conv2d {
    fn eq(&self, other: &Self) -> bool {
        self.w == other.w && self.b == other.b
    }
}
