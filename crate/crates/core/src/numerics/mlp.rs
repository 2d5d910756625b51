use rand::Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};

/// Stack of affine layers with SiLU between them and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
}

impl Mlp {
    /// Registers an MLP with layer widths `dims[0] → dims[1] → …`.
    ///
    /// Weights are drawn from `uniform(±1/√fan_in)`, biases start at zero.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let bound = 1.0 / (io[0] as f64).sqrt();
                let w = store.add_uniform(format!("{prefix}.{i}.weight"), &[io[0], io[1]], bound, rng);
                let b = store.add_uniform(format!("{prefix}.{i}.bias"), &[io[1]], 0.0, rng);
                (w, b)
            })
            .collect();
        Self {
            layers,
            dims: dims.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// `(weight, bias)` ids per layer.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Forward pass on `x: [N×in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.input_dim() {
            return shape_err(
                "mlp_forward",
                format!("input {:?}, expected width {}", g.shape(x), self.input_dim()),
            );
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            h = g.linear(h, wv, bv)?;
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::activation::silu_scalar;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(dims: &[usize]) -> (ParamStore, Mlp) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", dims, &mut rng);
        (store, mlp)
    }

    fn run(store: &ParamStore, mlp: &Mlp, x: Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = mlp.forward(&mut g, store, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_layer() {
        let (mut store, mlp) = net(&[3, 3]);
        let (w, b) = mlp.layers()[0];
        store.set_value(w, Tensor::eye(3)).unwrap();
        store.set_value(b, Tensor::zeros(&[3])).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        assert_eq!(run(&store, &mlp, x.clone()), x);
    }

    #[test]
    fn constant_layer() {
        let (mut store, mlp) = net(&[2, 2]);
        let (w, b) = mlp.layers()[0];
        store.set_value(w, Tensor::zeros(&[2, 2])).unwrap();
        store.set_value(b, Tensor::vector(vec![0.25, -4.0])).unwrap();
        let y = run(&store, &mlp, Tensor::new(vec![1, 2], vec![9.0, 7.0]).unwrap());
        assert_eq!(y.data(), &[0.25, -4.0]);
    }

    #[test]
    fn two_layers_match_scalar_forward() {
        let (mut store, mlp) = net(&[2, 3, 1]);
        let (w0, b0) = mlp.layers()[0];
        let (w1, b1) = mlp.layers()[1];
        let w0v = [[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]];
        let b0v = [0.01, 0.02, -0.03];
        let w1v = [0.7, -0.8, 0.9];
        let b1v = 0.05;
        store.set_value(w0, Tensor::from_rows(&[w0v[0].to_vec(), w0v[1].to_vec()]).unwrap()).unwrap();
        store.set_value(b0, Tensor::vector(b0v.to_vec())).unwrap();
        store.set_value(w1, Tensor::new(vec![3, 1], w1v.to_vec()).unwrap()).unwrap();
        store.set_value(b1, Tensor::vector(vec![b1v])).unwrap();
        let x = [1.5, -0.5];
        let mut expect = b1v;
        for j in 0..3 {
            let pre = b0v[j] + x[0] * w0v[0][j] + x[1] * w0v[1][j];
            expect += silu_scalar(pre) * w1v[j];
        }
        let y = run(&store, &mlp, Tensor::new(vec![1, 2], x.to_vec()).unwrap());
        assert!((y.item() - expect).abs() < 1e-14);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, mlp) = net(&[3, 2]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        assert!(mlp.forward(&mut g, &store, x).is_err());
    }
}
