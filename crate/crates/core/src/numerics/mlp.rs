use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sine,
}

/// Fully connected network: hidden layers use `activation`, the output
/// layer is linear. Parameters are stored as `[W0, b0, W1, b1, ...]` with
/// `W_l` shaped `[in, out]` and `b_l` shaped `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::matrix(w[0], w[1], draw(w[0] * w[1])).expect("weight shape"));
            params.push(Tensor::new(vec![w[1]], draw(w[1])).expect("bias shape"));
        }
        Self { sizes: sizes.to_vec(), activation, params }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let params = sizes
            .windows(2)
            .flat_map(|w| [Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[w[1]])])
            .collect();
        Self { sizes: sizes.to_vec(), activation, params }
    }

    /// Rebuilds a network from stored parameters, checking their shapes.
    pub fn from_parts(
        sizes: Vec<usize>,
        activation: Activation,
        params: Vec<Tensor>,
    ) -> crate::Result<Self> {
        let want: Vec<Vec<usize>> =
            sizes.windows(2).flat_map(|w| [vec![w[0], w[1]], vec![w[1]]]).collect();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if sizes.len() < 2 || want != got {
            return Err(crate::Error::shape("Mlp::from_parts", format!("{want:?} vs {got:?}")));
        }
        Ok(Self { sizes, activation, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Registers the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    fn activate<'t>(&self, z: Var<'t>) -> Var<'t> {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Sine => z.sin(),
        }
    }

    pub fn forward<'t>(&self, params: &[Var<'t>], input: Var<'t>) -> Var<'t> {
        let layers = self.sizes.len() - 1;
        let mut h = input;
        for l in 0..layers {
            let z = h.matmul(params[2 * l]) + params[2 * l + 1];
            h = if l + 1 < layers { self.activate(z) } else { z };
        }
        h
    }

    /// Forward pass together with Jacobian-vector products along each
    /// `tangent` (each shaped like `input`). All outputs stay on the tape,
    /// so the products can themselves be differentiated.
    pub fn forward_jvp<'t>(
        &self,
        params: &[Var<'t>],
        input: Var<'t>,
        tangents: &[Var<'t>],
    ) -> (Var<'t>, Vec<Var<'t>>) {
        let layers = self.sizes.len() - 1;
        let mut h = input;
        let mut dh: Vec<Var<'t>> = tangents.to_vec();
        for l in 0..layers {
            let w = params[2 * l];
            let z = h.matmul(w) + params[2 * l + 1];
            let dz: Vec<Var<'t>> = dh.iter().map(|d| d.matmul(w)).collect();
            if l + 1 < layers {
                let (act, slope) = match self.activation {
                    Activation::Tanh => {
                        let a = z.tanh();
                        (a, -a.square() + 1.0)
                    }
                    Activation::Sine => (z.sin(), z.cos()),
                };
                h = act;
                dh = dz.into_iter().map(|d| d * slope).collect();
            } else {
                h = z;
                dh = dz;
            }
        }
        (h, dh)
    }

    /// Tape-free evaluation.
    pub fn eval(&self, input: &Tensor) -> Tensor {
        let layers = self.sizes.len() - 1;
        let mut h = input.clone();
        for l in 0..layers {
            let mut z = h.matmul(&self.params[2 * l]).expect("mlp input width");
            let b = self.params[2 * l + 1].data();
            let cols = z.cols();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v += b[i % cols];
            }
            if l + 1 < layers {
                let f: fn(f64) -> f64 = match self.activation {
                    Activation::Tanh => f64::tanh,
                    Activation::Sine => f64::sin,
                };
                z.data_mut().iter_mut().for_each(|v| *v = f(*v));
            }
            h = z;
        }
        h
    }
}

/// Random Fourier features of a scalar time: `[sin(2π w_k t), cos(2π w_k t)]`
/// with fixed frequencies `w_k ~ N(0, scale²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierFeatures {
    freqs: Vec<f64>,
}

impl FourierFeatures {
    pub fn new<R: Rng + ?Sized>(width: usize, scale: f64, rng: &mut R) -> Self {
        assert!(width % 2 == 0, "Fourier feature width must be even");
        let freqs = (0..width / 2)
            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self { freqs }
    }

    pub fn from_freqs(freqs: Vec<f64>) -> Self {
        Self { freqs }
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn width(&self) -> usize {
        2 * self.freqs.len()
    }

    /// `[times.len(), width]` feature matrix.
    pub fn embed(&self, times: &[f64]) -> Tensor {
        let k = self.freqs.len();
        let mut data = Vec::with_capacity(times.len() * 2 * k);
        for &t in times {
            data.extend(self.freqs.iter().map(|w| (std::f64::consts::TAU * w * t).sin()));
            data.extend(self.freqs.iter().map(|w| (std::f64::consts::TAU * w * t).cos()));
        }
        Tensor::matrix(times.len(), 2 * k, data).expect("embedding shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 16, 16, 2], Activation::Tanh, &mut rng);
        assert_eq!(net.param_count(), 4 * 16 + 17 * 16 + 17 * 2);
        let stored: usize = net.params().iter().map(Tensor::len).sum();
        assert_eq!(stored, net.param_count());
    }

    #[test]
    fn zero_weights_return_output_bias() {
        let mut net = Mlp::zeros(&[2, 4, 3], Activation::Tanh);
        net.params_mut()[3] = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -7.0], vec![1.0, 2.0]]).unwrap();
        let out = net.eval(&x);
        assert_eq!(out.row(0), &[1.0, -2.0, 0.5]);
        assert_eq!(out.row(1), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn tape_forward_matches_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Tanh, Activation::Sine] {
            let net = Mlp::new(&[3, 8, 8, 2], act, &mut rng);
            let x = Tensor::randn(&[5, 3], &mut rng);
            let tape = Tape::new();
            let p = net.bind(&tape, true);
            let y = net.forward(&p, tape.constant(x.clone()));
            assert!(y.value().max_abs_diff(&net.eval(&x)) < 1e-12);
        }
    }

    #[test]
    fn jvp_matches_directional_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for act in [Activation::Tanh, Activation::Sine] {
            let net = Mlp::new(&[3, 8, 8, 2], act, &mut rng);
            let x = Tensor::randn(&[4, 3], &mut rng);
            let dir = Tensor::randn(&[4, 3], &mut rng);
            let tape = Tape::new();
            let p = net.bind(&tape, false);
            let (_, jv) = net.forward_jvp(&p, tape.constant(x.clone()), &[tape.constant(dir.clone())]);
            let h = 1e-6;
            let plus = net.eval(&x.zip_map(&dir, |a, d| a + h * d).unwrap());
            let minus = net.eval(&x.zip_map(&dir, |a, d| a - h * d).unwrap());
            let fd = plus.zip_map(&minus, |a, b| (a - b) / (2.0 * h)).unwrap();
            assert!(jv[0].value().max_abs_diff(&fd) < 1e-7);
        }
    }

    #[test]
    fn fourier_features_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ff = FourierFeatures::new(8, 4.0, &mut rng);
        let e = ff.embed(&[0.0]);
        assert_eq!(e.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
